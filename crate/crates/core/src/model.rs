//! Model assembly: backbone, encoder, query generation, decoder, and
//! prediction heads, wired per the configured ablation variant.

use crate::attention::{
    decoder_stack, BranchQuerySet, DecoderLayerParams, DecoderMode, EncoderFeatureMap,
    EncoderLayerParams,
};
use crate::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::graph::{Graph, NodeId};
use crate::loss::LayerPredictions;
use crate::params::{Conv, Linear, Mlp, ParamStore};
use crate::querygen::{
    discriminative_points, generate_queries, mini_detector, pooled_region_features,
    tensor_to_boxes, MiniDetectorParams, QueryGenParams, PE_COORD_SCALE, PE_TEMPERATURE,
};
use crate::sampling::{grid_centers, sinusoidal_embed_2d};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Initial positive probability of the classification heads.
const CLS_PRIOR: f64 = 0.01;
/// Total backbone stride.
pub const BACKBONE_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Attention channels C.
    pub channels: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Query count N.
    pub queries: usize,
    /// Discriminative points per query per branch, M.
    pub points: usize,
    /// Object classes K.
    pub classes: usize,
    pub mode: DecoderMode,
    pub enable_taq: bool,
    pub enable_tal: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub repeat_r: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough that gradient checks and CPU
    /// training stay cheap. Pairs with 96x96 inputs (6x6 encoder grid,
    /// so the 25 queries select from 36 locations).
    pub fn desk() -> Self {
        ModelConfig {
            channels: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 3,
            queries: 25,
            points: 8,
            classes: 3,
            mode: DecoderMode::SplitCross,
            enable_taq: true,
            enable_tal: true,
            alpha: 0.25,
            beta: 0.75,
            gamma: 2.0,
            repeat_r: 2,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// Full-scale preset matching the published training protocol
    /// (256 channels, 8 heads, 6+6 layers, 300 queries). Retained as a
    /// named configuration; not trainable on a desk budget.
    pub fn paper() -> Self {
        ModelConfig {
            channels: 256,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            queries: 300,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            problems.push(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            ));
        }
        if self.channels % 4 != 0 {
            problems.push(format!(
                "channels {} must be divisible by 4 for 2-D sinusoidal embeddings",
                self.channels
            ));
        }
        if self.enc_layers == 0 {
            problems.push("enc_layers must be >= 1".into());
        }
        if self.dec_layers == 0 {
            problems.push("dec_layers must be >= 1".into());
        }
        if self.queries == 0 {
            problems.push("queries must be >= 1".into());
        }
        if self.points == 0 {
            problems.push("points must be >= 1".into());
        }
        if self.classes == 0 {
            problems.push("classes must be >= 1".into());
        }
        if self.repeat_r == 0 {
            problems.push("repeat_r must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} must be in [0,1)", self.dropout));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                problems.push(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("c".into(), self.channels.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("l_enc".into(), self.enc_layers.to_string()),
            ("l_dec".into(), self.dec_layers.to_string()),
            ("n_queries".into(), self.queries.to_string()),
            ("m_points".into(), self.points.to_string()),
            ("k_classes".into(), self.classes.to_string()),
            ("mode".into(), self.mode.as_str().to_string()),
            ("enable_taq".into(), self.enable_taq.to_string()),
            ("enable_tal".into(), self.enable_tal.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("repeat_r".into(), self.repeat_r.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("bad value `{value}` for key `{key}` ({what})"));
        match key {
            "c" => self.channels = value.parse().map_err(|_| bad("integer"))?,
            "heads" => self.heads = value.parse().map_err(|_| bad("integer"))?,
            "l_enc" => self.enc_layers = value.parse().map_err(|_| bad("integer"))?,
            "l_dec" => self.dec_layers = value.parse().map_err(|_| bad("integer"))?,
            "n_queries" => self.queries = value.parse().map_err(|_| bad("integer"))?,
            "m_points" => self.points = value.parse().map_err(|_| bad("integer"))?,
            "k_classes" => self.classes = value.parse().map_err(|_| bad("integer"))?,
            "mode" => self.mode = value.parse()?,
            "enable_taq" => self.enable_taq = value.parse().map_err(|_| bad("bool"))?,
            "enable_tal" => self.enable_tal = value.parse().map_err(|_| bad("bool"))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("number"))?,
            "beta" => self.beta = value.parse().map_err(|_| bad("number"))?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad("number"))?,
            "repeat_r" => self.repeat_r = value.parse().map_err(|_| bad("integer"))?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad("number"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in kv {
            cfg.apply_kv(k, v)?;
        }
        Ok(cfg)
    }
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    backbone: Vec<Conv>,
    encoder: Vec<EncoderLayerParams>,
    minidet: MiniDetectorParams,
    querygen: QueryGenParams,
    learned_content: Option<(usize, usize)>,
    learned_pos: Option<(usize, usize)>,
    decoder: Vec<DecoderLayerParams>,
    cls_head: Linear,
    box_head: Mlp,
}

/// Graph handles of one image's forward pass.
pub struct ImageForward {
    /// Per decoder layer, in depth order.
    pub layers: Vec<LayerPredictions>,
    /// Per decoder layer: `[2, heads, N, HW]` cross-attention maps.
    pub cross_maps: Vec<NodeId>,
    /// Mini-detector dense predictions (objectness as one class).
    pub mini: LayerPredictions,
    pub anchors: NodeId,
    pub anchor_values: Vec<CenterBox>,
    pub feat_h: usize,
    pub feat_w: usize,
}

/// Extracted (host) values of one image's inference pass.
pub struct ImageInference {
    pub layer_logits: Vec<Tensor<f64>>,
    pub layer_boxes: Vec<Vec<CenterBox>>,
    pub cross_maps: Vec<Tensor<f64>>,
    pub feat_h: usize,
    pub feat_w: usize,
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;

        let widths = [(c / 4).max(4), (c / 2).max(4), c, c];
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            backbone.push(Conv::new(
                &mut store,
                &mut rng,
                &format!("backbone.{i}"),
                cin,
                cout,
                3,
                2,
                1,
            ));
            cin = cout;
        }

        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayerParams::new(&mut store, &mut rng, &format!("enc.{i}"), c, cfg.heads))
            .collect::<Result<Vec<_>>>()?;

        let minidet = MiniDetectorParams::new(&mut store, &mut rng, "mini", c);
        let querygen = QueryGenParams::new(&mut store, &mut rng, "qg", c, cfg.points);

        let (learned_content, learned_pos) = if cfg.enable_taq {
            (None, None)
        } else {
            let cc = store.add(
                "embed.content_cls",
                crate::params::xavier_uniform(&mut rng, &[cfg.queries, c], cfg.queries, c),
            );
            let cl = store.add(
                "embed.content_loc",
                crate::params::xavier_uniform(&mut rng, &[cfg.queries, c], cfg.queries, c),
            );
            let pc = store.add(
                "embed.pos_cls",
                crate::params::xavier_uniform(&mut rng, &[cfg.queries, c], cfg.queries, c),
            );
            let pl = store.add(
                "embed.pos_loc",
                crate::params::xavier_uniform(&mut rng, &[cfg.queries, c], cfg.queries, c),
            );
            (Some((cc, cl)), Some((pc, pl)))
        };

        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                DecoderLayerParams::new(&mut store, &mut rng, &format!("dec.{i}"), c, cfg.heads, cfg.mode)
            })
            .collect::<Result<Vec<_>>>()?;

        let cls_head = Linear::new(&mut store, &mut rng, "head.cls", c, cfg.classes);
        let box_head = Mlp::new(&mut store, &mut rng, "head.box", &[c, c, c, 4]);

        // Focal-style prior: initial positive probability ~ CLS_PRIOR.
        let prior_logit = T::from_f64((CLS_PRIOR / (1.0 - CLS_PRIOR)).ln());
        for name in ["head.cls.b", "mini.obj.b"] {
            let id = store.find(name).expect("head bias exists");
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::full(&shape, prior_logit);
        }

        Ok(Model {
            cfg: cfg.clone(),
            store,
            backbone,
            encoder,
            minidet,
            querygen,
            learned_content,
            learned_pos,
            decoder,
            cls_head,
            box_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Copy every classification-branch parameter onto its localization
    /// twin, so both branches compute identically on identical inputs.
    pub fn tie_branch_weights(&mut self) {
        let pairs = [
            ("norm_cross_loc", "norm_cross_cls"),
            ("norm_ffn_loc", "norm_ffn_cls"),
            ("norm_self_loc", "norm_self"),
            ("cross_loc", "cross_cls"),
            ("ffn_loc", "ffn_cls"),
            ("self_loc", "self"),
            ("head_loc", "head_cls"),
            ("proj_loc", "proj_cls"),
            ("content_loc", "content_cls"),
            ("pos_loc", "pos_cls"),
        ];
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            for (from, to) in pairs {
                if name.contains(from) {
                    let src = name.replace(from, to);
                    if let (Some(dst_id), Some(src_id)) =
                        (self.store.find(&name), self.store.find(&src))
                    {
                        let v = self.store.get(src_id).clone();
                        *self.store.get_mut(dst_id) = v;
                    }
                    break;
                }
            }
        }
    }

    /// Build the forward graph for one `[3,H,W]` image. Parameters must
    /// already be installed on the graph (`store.install`).
    pub fn forward_image(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<ImageForward> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(
                "forward",
                format!("image must be [3,H,W], got {:?}", s),
            ));
        }
        let (h_in, w_in) = (s[1], s[2]);
        if h_in % BACKBONE_STRIDE != 0 || w_in % BACKBONE_STRIDE != 0 {
            return Err(Error::shape(
                "forward",
                format!("image sides must be multiples of {BACKBONE_STRIDE}, got {h_in}x{w_in}"),
            ));
        }
        debug_assert!(g.len() >= self.store.len(), "install parameters first");
        let c = self.cfg.channels;

        let mut x = g.constant(image.clone());
        for conv in &self.backbone {
            x = conv.apply(g, x)?;
            x = g.relu(x);
        }
        let (h, w) = (h_in / BACKBONE_STRIDE, w_in / BACKBONE_STRIDE);
        let flat = g.reshape(x, &[c, h * w])?;
        let tokens = g.transpose(flat)?;

        let grid = grid_centers::<T>(h, w).map(|v| v * T::from_f64(PE_COORD_SCALE));
        let grid_node = g.constant(grid);
        let pe = sinusoidal_embed_2d(g, grid_node, c, PE_TEMPERATURE)?;

        let feat = crate::attention::encoder_stack(g, &self.encoder, tokens, pe, self.cfg.dropout)?;
        let fmap = EncoderFeatureMap {
            features: feat,
            pos: pe,
            h,
            w,
            channels: c,
        };

        let anchors = mini_detector(g, &self.minidet, &fmap, self.cfg.queries)?;
        let feat_t = g.transpose(feat)?;
        let map_spatial = g.reshape(feat_t, &[c, h, w])?;

        let qs = if self.cfg.enable_taq {
            let f_r = pooled_region_features(g, map_spatial, &anchors)?;
            let pts = discriminative_points(g, &self.querygen, f_r)?;
            let gq = generate_queries(g, &self.querygen, &fmap, map_spatial, &anchors, &pts)?;
            if self.cfg.mode == DecoderMode::Shared {
                BranchQuerySet {
                    content_cls: gq.content_cls,
                    content_loc: gq.content_cls,
                    pos_cls: gq.pos_cls,
                    pos_loc: gq.pos_cls,
                }
            } else {
                BranchQuerySet {
                    content_cls: gq.content_cls,
                    content_loc: gq.content_loc,
                    pos_cls: gq.pos_cls,
                    pos_loc: gq.pos_loc,
                }
            }
        } else {
            let (cc, cl) = self.learned_content.expect("learned embeddings");
            let (pc, pl) = self.learned_pos.expect("learned embeddings");
            if self.cfg.mode == DecoderMode::Shared {
                BranchQuerySet {
                    content_cls: cc,
                    content_loc: cc,
                    pos_cls: pc,
                    pos_loc: pc,
                }
            } else {
                BranchQuerySet {
                    content_cls: cc,
                    content_loc: cl,
                    pos_cls: pc,
                    pos_loc: pl,
                }
            }
        };

        let layer_outs = decoder_stack(g, &self.decoder, qs, &fmap, self.cfg.dropout)?;

        // Anchor-relative box regression: sigmoid(delta + logit(anchor)).
        let log_a = g.log(anchors.boxes);
        let one_minus = g.affine(anchors.boxes, -1.0, 1.0);
        let log_1m = g.log(one_minus);
        let anchor_logit = g.sub(log_a, log_1m)?;

        let mut layers = Vec::with_capacity(layer_outs.len());
        let mut cross_maps = Vec::with_capacity(layer_outs.len());
        for lo in &layer_outs {
            let logits = self.cls_head.apply(g, lo.queries.content_cls)?;
            let delta = self.box_head.apply(g, lo.queries.content_loc)?;
            let shifted = g.add(delta, anchor_logit)?;
            let boxes = g.sigmoid(shifted);
            layers.push(LayerPredictions {
                class_logits: logits,
                boxes,
            });
            cross_maps.push(lo.cross_attn_maps);
        }
        let mini = LayerPredictions {
            class_logits: anchors.obj_logits_all,
            boxes: anchors.boxes_all,
        };
        Ok(ImageForward {
            layers,
            cross_maps,
            mini,
            anchors: anchors.boxes,
            anchor_values: anchors.box_values,
            feat_h: h,
            feat_w: w,
        })
    }

    /// Inference over a `[B,3,H,W]` batch; images are processed
    /// independently, so per-image outputs do not depend on batch
    /// composition.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Vec<ImageInference>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(
                "forward",
                format!("batch must be [B,3,H,W], got {:?}", s),
            ));
        }
        let per = s[1] * s[2] * s[3];
        let mut out = Vec::with_capacity(s[0]);
        for b in 0..s[0] {
            let data = images.data()[b * per..(b + 1) * per].to_vec();
            let img = Tensor::from_vec(&[3, s[2], s[3]], data)?;
            out.push(self.infer_image(&img)?);
        }
        Ok(out)
    }

    /// Inference on one `[3,H,W]` image (dropout off, values extracted).
    pub fn infer_image(&self, image: &Tensor<T>) -> Result<ImageInference> {
        let mut g = Graph::new();
        self.store.install(&mut g, false)?;
        let fwd = self.forward_image(&mut g, image)?;
        Ok(ImageInference {
            layer_logits: fwd
                .layers
                .iter()
                .map(|l| g.value(l.class_logits).cast::<f64>())
                .collect(),
            layer_boxes: fwd
                .layers
                .iter()
                .map(|l| tensor_to_boxes(g.value(l.boxes)))
                .collect(),
            cross_maps: fwd
                .cross_maps
                .iter()
                .map(|&m| g.value(m).cast::<f64>())
                .collect(),
            feat_h: fwd.feat_h,
            feat_w: fwd.feat_w,
        })
    }

    /// Serialize parameters (as f32 records) plus extra records and
    /// key=value config entries.
    pub fn to_checkpoint(
        &self,
        extra_records: Vec<Record>,
        extra_config: Vec<(String, String)>,
    ) -> Checkpoint {
        let mut records: Vec<Record> = self
            .store
            .iter()
            .map(|(name, t)| Record {
                name: name.to_string(),
                dims: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64() as f32).collect(),
            })
            .collect();
        records.extend(extra_records);
        let mut config = self.cfg.to_kv();
        config.extend(extra_config);
        Checkpoint { records, config }
    }

    /// Rebuild a model from a checkpoint; every model parameter must be
    /// present with matching dims.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_kv(&ckpt.config)?;
        let mut model = Model::build(&cfg)?;
        for id in 0..model.store.len() {
            let name = model.store.name(id).to_string();
            let rec = ckpt
                .record(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter record `{name}`")))?;
            if rec.dims != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has dims {:?}, expected {:?}",
                    rec.dims,
                    model.store.get(id).shape()
                )));
            }
            let t = Tensor::from_vec(
                &rec.dims,
                rec.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
            )?;
            *model.store.get_mut(id) = t;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 16,
            heads: 4,
            enc_layers: 1,
            dec_layers: 2,
            queries: 6,
            points: 4,
            classes: 3,
            dropout: 0.0,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn same_seed_bitwise_identical_build() {
        let a = Model::<f32>::build(&tiny_cfg()).unwrap();
        let b = Model::<f32>::build(&tiny_cfg()).unwrap();
        for id in 0..a.store.len() {
            assert_eq!(a.store.get(id).data(), b.store.get(id).data());
        }
    }

    #[test]
    fn validate_lists_all_violations() {
        let mut cfg = tiny_cfg();
        cfg.channels = 15;
        cfg.queries = 0;
        cfg.dropout = 1.5;
        let err = Model::<f32>::build(&cfg).err().expect("build should fail").to_string();
        assert!(err.contains("channels"), "{err}");
        assert!(err.contains("queries"), "{err}");
        assert!(err.contains("dropout"), "{err}");
    }

    #[test]
    fn split_cross_param_surplus_is_loc_branch() {
        let mut cfg = tiny_cfg();
        cfg.mode = DecoderMode::SplitCross;
        let split = Model::<f32>::build(&cfg).unwrap();
        cfg.mode = DecoderMode::Shared;
        let shared = Model::<f32>::build(&cfg).unwrap();
        let loc_params: usize = split
            .store
            .iter()
            .filter(|(n, _)| n.contains("cross_loc") || n.contains("ffn_loc") || n.contains("norm_cross_loc") || n.contains("norm_ffn_loc"))
            .map(|(_, t)| t.numel())
            .sum();
        assert!(loc_params > 0);
        assert_eq!(
            split.param_count(),
            shared.param_count() + loc_params,
            "split {} vs shared {} + loc {}",
            split.param_count(),
            shared.param_count(),
            loc_params
        );
    }

    #[test]
    fn forward_shapes_and_batch_independence() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::build(&cfg).unwrap();
        let img = Tensor::<f32>::from_fn(&[3, 48, 48], |i| ((i % 17) as f32) / 17.0);
        let mut batch2 = Vec::new();
        batch2.extend_from_slice(img.data());
        batch2.extend_from_slice(img.data());
        let batch = Tensor::from_vec(&[2, 3, 48, 48], batch2).unwrap();
        let out = model.forward(&batch).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert_eq!(o.layer_logits.len(), cfg.dec_layers);
            assert_eq!(o.layer_logits[0].shape(), &[cfg.queries, cfg.classes]);
            assert_eq!(o.layer_boxes[0].len(), cfg.queries);
            assert_eq!(
                o.cross_maps[0].shape(),
                &[2, cfg.heads, cfg.queries, 9]
            );
        }
        assert_eq!(out[0].layer_logits[1].data(), out[1].layer_logits[1].data());
    }

    #[test]
    fn rejects_bad_image_sizes() {
        let model = Model::<f32>::build(&tiny_cfg()).unwrap();
        let img = Tensor::<f32>::zeros(&[1, 3, 50, 48]);
        assert!(model.forward(&img).is_err());
        let img = Tensor::<f32>::zeros(&[3, 48, 48]);
        assert!(model.forward(&img).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let model = Model::<f32>::build(&tiny_cfg()).unwrap();
        let ckpt = model.to_checkpoint(vec![], vec![]);
        let loaded = Model::<f32>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(model.cfg, loaded.cfg);
        for id in 0..model.store.len() {
            assert_eq!(
                model.store.get(id).data(),
                loaded.store.get(id).data(),
                "param {}",
                model.store.name(id)
            );
        }
    }
}
