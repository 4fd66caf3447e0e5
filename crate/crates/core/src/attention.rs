//! Transformer blocks: multi-head attention, the encoder stack, and the
//! decoder layer whose cross-attention (and optionally more) is split into
//! classification and localization branches.
//!
//! All blocks are post-norm (normalization after the residual add). Query
//! positional embeddings are added for self-attention and concatenated for
//! cross-attention: the cross-attention query is `cat(content, pos)` against
//! keys `cat(F, pos(F))`, doubling the query/key channel width while values
//! and outputs stay at `C`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{LayerNorm, Linear, ParamStore};
use crate::tensor::Scalar;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

/// Dimensions of an attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaInit {
    pub qk_dim: usize,
    pub v_dim: usize,
    pub heads: usize,
}

/// Per-block attention projections. `qk_dim` may differ from `v_dim`
/// (conditional cross-attention uses 2C queries/keys over C values).
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
}

impl AttentionWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        init: MhaInit,
    ) -> Result<Self> {
        let MhaInit { qk_dim, v_dim, heads } = init;
        if heads == 0 || qk_dim % heads != 0 || v_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dims (qk {qk_dim}, v {v_dim}) must divide head count {heads}"
            )));
        }
        Ok(AttentionWeights {
            wq: Linear::new(store, rng, &format!("{prefix}.wq"), qk_dim, qk_dim),
            wk: Linear::new_no_bias(store, rng, &format!("{prefix}.wk"), qk_dim, qk_dim),
            wv: Linear::new(store, rng, &format!("{prefix}.wv"), v_dim, v_dim),
            wo: Linear::new(store, rng, &format!("{prefix}.wo"), v_dim, v_dim),
            heads: init.heads,
            qk_dim,
            v_dim,
        })
    }
}

pub struct MhaOutput {
    /// `[Nq, v_dim]` after the output projection.
    pub out: NodeId,
    /// Post-softmax attention probabilities `[heads, Nq, Nk]`,
    /// taken before the output projection.
    pub maps: NodeId,
}

/// Scaled dot-product attention over all heads; scale is
/// `1/sqrt(qk_dim/heads)`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    w: &AttentionWeights,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<MhaOutput> {
    let (nq, nk) = (g.value(q).shape()[0], g.value(k).shape()[0]);
    if nk == 0 {
        return Err(Error::shape("multi_head_attention", "no keys".to_string()));
    }
    let check = |name: &str, id: NodeId, dim: usize, rows: usize| -> Result<()> {
        let s = g.value(id).shape();
        if s.len() != 2 || s[0] != rows || s[1] != dim {
            return Err(Error::shape(
                "multi_head_attention",
                format!("{name} expected [{rows}, {dim}], got {:?}", s),
            ));
        }
        Ok(())
    };
    check("q", q, w.qk_dim, nq)?;
    check("k", k, w.qk_dim, nk)?;
    check("v", v, w.v_dim, nk)?;

    let qp = w.wq.apply(g, q)?;
    let kp = w.wk.apply(g, k)?;
    let vp = w.wv.apply(g, v)?;
    let dqk = w.qk_dim / w.heads;
    let dv = w.v_dim / w.heads;
    let scale = 1.0 / (dqk as f64).sqrt();

    let mut outs = Vec::with_capacity(w.heads);
    let mut maps = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = g.narrow(qp, 1, h * dqk, dqk)?;
        let kh = g.narrow(kp, 1, h * dqk, dqk)?;
        let vh = g.narrow(vp, 1, h * dv, dv)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.mul_scalar(scores, scale);
        let probs = g.softmax(scaled, 1)?;
        outs.push(g.matmul(probs, vh)?);
        maps.push(g.reshape(probs, &[1, nq, nk])?);
    }
    let merged = g.concat(&outs, 1)?;
    let out = w.wo.apply(g, merged)?;
    let maps = g.concat(&maps, 0)?;
    Ok(MhaOutput { out, maps })
}

/// Feed-forward block: `lin2(dropout(relu(lin1(x))))` with hidden 4·C.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Ffn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
    ) -> Self {
        Ffn {
            lin1: Linear::new(store, rng, &format!("{prefix}.lin1"), dim, 4 * dim),
            lin2: Linear::new(store, rng, &format!("{prefix}.lin2"), 4 * dim, dim),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, dropout: f64) -> Result<NodeId> {
        let h = self.lin1.apply(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        self.lin2.apply(g, h)
    }
}

/// Encoder output plus its spatial geometry and positional embedding.
#[derive(Debug, Clone, Copy)]
pub struct EncoderFeatureMap {
    /// `[h*w, c]` features.
    pub features: NodeId,
    /// `[h*w, c]` 2-D sinusoidal embedding of grid centers.
    pub pos: NodeId,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionWeights,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
}

impl EncoderLayerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(EncoderLayerParams {
            self_attn: AttentionWeights::new(
                store,
                rng,
                &format!("{prefix}.self"),
                MhaInit {
                    qk_dim: dim,
                    v_dim: dim,
                    heads,
                },
            )?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim),
            ffn: Ffn::new(store, rng, &format!("{prefix}.ffn"), dim),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim),
        })
    }
}

/// Self-attention + FFN encoder layers over `src [HW, C]` with additive
/// positional embeddings on queries and keys. Output keeps the input shape.
pub fn encoder_stack<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[EncoderLayerParams],
    src: NodeId,
    pos: NodeId,
    dropout: f64,
) -> Result<NodeId> {
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    let mut x = src;
    for layer in layers {
        let qk = g.add(x, pos)?;
        let att = multi_head_attention(g, &layer.self_attn, qk, qk, x)?;
        let att_do = g.dropout(att.out, dropout)?;
        let res = g.add(x, att_do)?;
        x = layer.norm1.apply(g, res)?;
        let f = layer.ffn.apply(g, x, dropout)?;
        let f_do = g.dropout(f, dropout)?;
        let res = g.add(x, f_do)?;
        x = layer.norm2.apply(g, res)?;
    }
    Ok(x)
}

/// Decoder wiring variants: `Shared` is the single-branch baseline,
/// `SplitCross` shares self-attention and splits cross-attention/FFN,
/// `FullSplit` duplicates the whole layer per branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    Shared,
    FullSplit,
    SplitCross,
}

impl DecoderMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderMode::Shared => "shared",
            DecoderMode::FullSplit => "full_split",
            DecoderMode::SplitCross => "split_cross",
        }
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(DecoderMode::Shared),
            "full_split" => Ok(DecoderMode::FullSplit),
            "split_cross" => Ok(DecoderMode::SplitCross),
            other => Err(Error::Config(format!(
                "unknown decoder mode `{other}` (expected shared|full_split|split_cross)"
            ))),
        }
    }
}

/// Per-branch content and positional embeddings for all N queries.
#[derive(Debug, Clone, Copy)]
pub struct BranchQuerySet {
    pub content_cls: NodeId,
    pub content_loc: NodeId,
    pub pos_cls: NodeId,
    pub pos_loc: NodeId,
}

pub struct DecoderLayerOutput {
    pub queries: BranchQuerySet,
    /// `[2, heads, N, HW]`: cls then loc cross-attention probabilities.
    pub cross_attn_maps: NodeId,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub mode: DecoderMode,
    pub self_attn: AttentionWeights,
    pub self_attn_loc: Option<AttentionWeights>,
    pub norm_self: LayerNorm,
    pub norm_self_loc: Option<LayerNorm>,
    pub cross_cls: AttentionWeights,
    pub cross_loc: Option<AttentionWeights>,
    pub norm_cross_cls: LayerNorm,
    pub norm_cross_loc: Option<LayerNorm>,
    pub ffn_cls: Ffn,
    pub ffn_loc: Option<Ffn>,
    pub norm_ffn_cls: LayerNorm,
    pub norm_ffn_loc: Option<LayerNorm>,
}

impl DecoderLayerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        mode: DecoderMode,
    ) -> Result<Self> {
        let self_init = MhaInit {
            qk_dim: dim,
            v_dim: dim,
            heads,
        };
        let cross_init = MhaInit {
            qk_dim: 2 * dim,
            v_dim: dim,
            heads,
        };
        let split = mode != DecoderMode::Shared;
        let full = mode == DecoderMode::FullSplit;
        Ok(DecoderLayerParams {
            mode,
            self_attn: AttentionWeights::new(store, rng, &format!("{prefix}.self"), self_init)?,
            self_attn_loc: if full {
                Some(AttentionWeights::new(
                    store,
                    rng,
                    &format!("{prefix}.self_loc"),
                    self_init,
                )?)
            } else {
                None
            },
            norm_self: LayerNorm::new(store, &format!("{prefix}.norm_self"), dim),
            norm_self_loc: if full {
                Some(LayerNorm::new(store, &format!("{prefix}.norm_self_loc"), dim))
            } else {
                None
            },
            cross_cls: AttentionWeights::new(store, rng, &format!("{prefix}.cross_cls"), cross_init)?,
            cross_loc: if split {
                Some(AttentionWeights::new(
                    store,
                    rng,
                    &format!("{prefix}.cross_loc"),
                    cross_init,
                )?)
            } else {
                None
            },
            norm_cross_cls: LayerNorm::new(store, &format!("{prefix}.norm_cross_cls"), dim),
            norm_cross_loc: if split {
                Some(LayerNorm::new(
                    store,
                    &format!("{prefix}.norm_cross_loc"),
                    dim,
                ))
            } else {
                None
            },
            ffn_cls: Ffn::new(store, rng, &format!("{prefix}.ffn_cls"), dim),
            ffn_loc: if split {
                Some(Ffn::new(store, rng, &format!("{prefix}.ffn_loc"), dim))
            } else {
                None
            },
            norm_ffn_cls: LayerNorm::new(store, &format!("{prefix}.norm_ffn_cls"), dim),
            norm_ffn_loc: if split {
                Some(LayerNorm::new(store, &format!("{prefix}.norm_ffn_loc"), dim))
            } else {
                None
            },
        })
    }
}

/// One branch's conditional cross-attention + FFN:
/// query `cat(content, pos)`, key `cat(F, pos(F))`, value `F`.
fn branch_cross_ffn<T: Scalar>(
    g: &mut Graph<T>,
    content: NodeId,
    pos: NodeId,
    fmap: &EncoderFeatureMap,
    cross: &AttentionWeights,
    norm_cross: &LayerNorm,
    ffn: &Ffn,
    norm_ffn: &LayerNorm,
    dropout: f64,
) -> Result<(NodeId, NodeId)> {
    let qcat = g.concat(&[content, pos], 1)?;
    let kcat = g.concat(&[fmap.features, fmap.pos], 1)?;
    let att = multi_head_attention(g, cross, qcat, kcat, fmap.features)?;
    let att_do = g.dropout(att.out, dropout)?;
    let res = g.add(content, att_do)?;
    let x = norm_cross.apply(g, res)?;
    let f = ffn.apply(g, x, dropout)?;
    let f_do = g.dropout(f, dropout)?;
    let res = g.add(x, f_do)?;
    let out = norm_ffn.apply(g, res)?;
    Ok((out, att.maps))
}

/// Self-attention + residual + norm over one query set.
fn self_block<T: Scalar>(
    g: &mut Graph<T>,
    content: NodeId,
    pos: NodeId,
    attn: &AttentionWeights,
    norm: &LayerNorm,
    dropout: f64,
) -> Result<NodeId> {
    let qk = g.add(content, pos)?;
    let att = multi_head_attention(g, attn, qk, qk, content)?;
    let att_do = g.dropout(att.out, dropout)?;
    let res = g.add(content, att_do)?;
    norm.apply(g, res)
}

/// One decoder layer. In `SplitCross` mode the self-attention runs over the
/// concatenated 2N branch queries and its output is split back per branch;
/// each branch then runs its own cross-attention and FFN. `Shared` runs a
/// single branch and mirrors it; `FullSplit` duplicates everything.
pub fn sd_decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    params: &DecoderLayerParams,
    qs: &BranchQuerySet,
    fmap: &EncoderFeatureMap,
    dropout: f64,
) -> Result<DecoderLayerOutput> {
    let n = g.value(qs.content_cls).shape()[0];
    let heads = params.cross_cls.heads;
    let hw = fmap.h * fmap.w;
    match params.mode {
        DecoderMode::Shared => {
            let x = self_block(g, qs.content_cls, qs.pos_cls, &params.self_attn, &params.norm_self, dropout)?;
            let (out, maps) = branch_cross_ffn(
                g,
                x,
                qs.pos_cls,
                fmap,
                &params.cross_cls,
                &params.norm_cross_cls,
                &params.ffn_cls,
                &params.norm_ffn_cls,
                dropout,
            )?;
            let m = g.reshape(maps, &[1, heads, n, hw])?;
            let maps2 = g.concat(&[m, m], 0)?;
            Ok(DecoderLayerOutput {
                queries: BranchQuerySet {
                    content_cls: out,
                    content_loc: out,
                    pos_cls: qs.pos_cls,
                    pos_loc: qs.pos_loc,
                },
                cross_attn_maps: maps2,
            })
        }
        DecoderMode::FullSplit => {
            let x_cls = self_block(g, qs.content_cls, qs.pos_cls, &params.self_attn, &params.norm_self, dropout)?;
            let x_loc = self_block(
                g,
                qs.content_loc,
                qs.pos_loc,
                params.self_attn_loc.as_ref().expect("full_split params"),
                params.norm_self_loc.as_ref().expect("full_split params"),
                dropout,
            )?;
            let (out_cls, maps_cls) = branch_cross_ffn(
                g,
                x_cls,
                qs.pos_cls,
                fmap,
                &params.cross_cls,
                &params.norm_cross_cls,
                &params.ffn_cls,
                &params.norm_ffn_cls,
                dropout,
            )?;
            let (out_loc, maps_loc) = branch_cross_ffn(
                g,
                x_loc,
                qs.pos_loc,
                fmap,
                params.cross_loc.as_ref().expect("split params"),
                params.norm_cross_loc.as_ref().expect("split params"),
                params.ffn_loc.as_ref().expect("split params"),
                params.norm_ffn_loc.as_ref().expect("split params"),
                dropout,
            )?;
            let mc = g.reshape(maps_cls, &[1, heads, n, hw])?;
            let ml = g.reshape(maps_loc, &[1, heads, n, hw])?;
            let maps2 = g.concat(&[mc, ml], 0)?;
            Ok(DecoderLayerOutput {
                queries: BranchQuerySet {
                    content_cls: out_cls,
                    content_loc: out_loc,
                    pos_cls: qs.pos_cls,
                    pos_loc: qs.pos_loc,
                },
                cross_attn_maps: maps2,
            })
        }
        DecoderMode::SplitCross => {
            let content = g.concat(&[qs.content_cls, qs.content_loc], 0)?;
            let pos = g.concat(&[qs.pos_cls, qs.pos_loc], 0)?;
            let o_self = self_block(g, content, pos, &params.self_attn, &params.norm_self, dropout)?;
            let halves = g.split(o_self, 0, &[n, n])?;
            let (x_cls, x_loc) = (halves[0], halves[1]);
            let (out_cls, maps_cls) = branch_cross_ffn(
                g,
                x_cls,
                qs.pos_cls,
                fmap,
                &params.cross_cls,
                &params.norm_cross_cls,
                &params.ffn_cls,
                &params.norm_ffn_cls,
                dropout,
            )?;
            let (out_loc, maps_loc) = branch_cross_ffn(
                g,
                x_loc,
                qs.pos_loc,
                fmap,
                params.cross_loc.as_ref().expect("split params"),
                params.norm_cross_loc.as_ref().expect("split params"),
                params.ffn_loc.as_ref().expect("split params"),
                params.norm_ffn_loc.as_ref().expect("split params"),
                dropout,
            )?;
            let mc = g.reshape(maps_cls, &[1, heads, n, hw])?;
            let ml = g.reshape(maps_loc, &[1, heads, n, hw])?;
            let maps2 = g.concat(&[mc, ml], 0)?;
            Ok(DecoderLayerOutput {
                queries: BranchQuerySet {
                    content_cls: out_cls,
                    content_loc: out_loc,
                    pos_cls: qs.pos_cls,
                    pos_loc: qs.pos_loc,
                },
                cross_attn_maps: maps2,
            })
        }
    }
}

/// Run all decoder layers, keeping every layer's output for auxiliary
/// losses. Positional embeddings stay fixed; content updates layer to layer.
pub fn decoder_stack<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[DecoderLayerParams],
    qs: BranchQuerySet,
    fmap: &EncoderFeatureMap,
    dropout: f64,
) -> Result<Vec<DecoderLayerOutput>> {
    if layers.is_empty() {
        return Err(Error::Config("decoder needs at least one layer".into()));
    }
    let mut outputs = Vec::with_capacity(layers.len());
    let mut cur = qs;
    for layer in layers {
        let out = sd_decoder_layer(g, layer, &cur, fmap, dropout)?;
        cur = out.queries;
        outputs.push(out);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradcheckOptions};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Attention weights with identity projections and zero biases.
    fn identity_attention(store: &mut ParamStore<f64>, dim: usize, heads: usize) -> AttentionWeights {
        let mut r = rng(0);
        let w = AttentionWeights::new(
            store,
            &mut r,
            "id",
            MhaInit {
                qk_dim: dim,
                v_dim: dim,
                heads,
            },
        )
        .unwrap();
        let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        for lin in [&w.wq, &w.wk, &w.wv, &w.wo] {
            *store.get_mut(lin.w) = eye.clone();
        }
        w
    }

    #[test]
    fn single_key_attention_is_one() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(1);
        let w = AttentionWeights::new(
            &mut store,
            &mut r,
            "a",
            MhaInit {
                qk_dim: 8,
                v_dim: 8,
                heads: 2,
            },
        )
        .unwrap();
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let q = g.constant(random_tensor(&mut r, &[3, 8]));
        let k = g.constant(random_tensor(&mut r, &[1, 8]));
        let v = g.constant(random_tensor(&mut r, &[1, 8]));
        let out = multi_head_attention(&mut g, &w, q, k, v).unwrap();
        assert_eq!(g.value(out.maps).shape(), &[2, 3, 1]);
        for &p in g.value(out.maps).data() {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_keys_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(1);
        let w = AttentionWeights::new(
            &mut store,
            &mut r,
            "a",
            MhaInit {
                qk_dim: 8,
                v_dim: 8,
                heads: 2,
            },
        )
        .unwrap();
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let q = g.constant(Tensor::zeros(&[3, 8]));
        let k = g.constant(Tensor::zeros(&[0, 8]));
        let v = g.constant(Tensor::zeros(&[0, 8]));
        assert!(multi_head_attention(&mut g, &w, q, k, v).is_err());
    }

    #[test]
    fn identity_projections_peak_on_matching_key() {
        let mut store = ParamStore::<f64>::new();
        let w = identity_attention(&mut store, 4, 1);
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        // One-hot keys: q_i · k_j is maximal exactly at j == i.
        let keys = Tensor::from_fn(&[3, 4], |i| if i / 4 == i % 4 { 3.0 } else { 0.0 });
        let q = g.constant(keys.clone());
        let k = g.constant(keys.clone());
        let v = g.constant(keys);
        let out = multi_head_attention(&mut g, &w, q, k, v).unwrap();
        let maps = g.value(out.maps);
        for i in 0..3 {
            let row: Vec<f64> = (0..3).map(|j| maps.data()[i * 3 + j]).collect();
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, i, "row {i}: {row:?}");
        }
    }

    #[test]
    fn permuting_keys_permutes_map_columns() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(3);
        let w = AttentionWeights::new(
            &mut store,
            &mut r,
            "a",
            MhaInit {
                qk_dim: 8,
                v_dim: 8,
                heads: 2,
            },
        )
        .unwrap();
        let kt = random_tensor(&mut r, &[4, 8]);
        let vt = random_tensor(&mut r, &[4, 8]);
        let qt = random_tensor(&mut r, &[2, 8]);
        let perm = [2usize, 0, 3, 1];

        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let q = g.constant(qt.clone());
        let k = g.constant(kt.clone());
        let v = g.constant(vt.clone());
        let base = multi_head_attention(&mut g, &w, q, k, v).unwrap();
        let kp = g.gather_rows(k, &perm).unwrap();
        let vp = g.gather_rows(v, &perm).unwrap();
        let permuted = multi_head_attention(&mut g, &w, q, kp, vp).unwrap();

        let out_a = g.value(base.out).clone();
        let out_b = g.value(permuted.out).clone();
        for (a, b) in out_a.data().iter().zip(out_b.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let ma = g.value(base.maps).clone();
        let mb = g.value(permuted.maps).clone();
        for h in 0..2 {
            for i in 0..2 {
                for (jp, &jo) in perm.iter().enumerate() {
                    let a = ma.data()[(h * 2 + i) * 4 + jo];
                    let b = mb.data()[(h * 2 + i) * 4 + jp];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    fn encoder_fixture(
        g: &mut Graph<f64>,
        r: &mut ChaCha8Rng,
        hw: usize,
        c: usize,
    ) -> EncoderFeatureMap {
        let features = g.constant(random_tensor(r, &[hw, c]));
        let pos = g.constant(random_tensor(r, &[hw, c]));
        EncoderFeatureMap {
            features,
            pos,
            h: 1,
            w: hw,
            channels: c,
        }
    }

    fn query_fixture(g: &mut Graph<f64>, r: &mut ChaCha8Rng, n: usize, c: usize) -> BranchQuerySet {
        BranchQuerySet {
            content_cls: g.constant(random_tensor(r, &[n, c])),
            content_loc: g.constant(random_tensor(r, &[n, c])),
            pos_cls: g.constant(random_tensor(r, &[n, c])),
            pos_loc: g.constant(random_tensor(r, &[n, c])),
        }
    }

    #[test]
    fn encoder_keeps_shape_and_passes_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(4);
        let layers: Vec<EncoderLayerParams> = (0..2)
            .map(|i| EncoderLayerParams::new(&mut store, &mut r, &format!("enc.{i}"), 8, 2).unwrap())
            .collect();
        let src_t = random_tensor(&mut r, &[5, 8]);
        let pos_t = random_tensor(&mut r, &[5, 8]);
        {
            let mut g = Graph::new();
            store.install(&mut g, false).unwrap();
            let src = g.constant(src_t.clone());
            let pos = g.constant(pos_t.clone());
            let out = encoder_stack(&mut g, &layers, src, pos, 0.0).unwrap();
            assert_eq!(g.value(out).shape(), &[5, 8]);
        }
        // Gradcheck through both layers w.r.t. source and all weights.
        let mut inputs: Vec<Tensor<f64>> = (0..store.len()).map(|i| store.get(i).clone()).collect();
        inputs.push(src_t);
        let src_idx = inputs.len() - 1;
        let report = gradcheck(
            &inputs,
            &GradcheckOptions {
                samples_per_tensor: 6,
                seed: 5,
                ..Default::default()
            },
            |g, ids| {
                let pos = g.constant(pos_t.clone());
                let out = encoder_stack(g, &layers, ids[src_idx], pos, 0.0)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum_all(sq))
            },
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    fn layer_params(
        store: &mut ParamStore<f64>,
        r: &mut ChaCha8Rng,
        mode: DecoderMode,
        c: usize,
        heads: usize,
    ) -> DecoderLayerParams {
        DecoderLayerParams::new(store, r, "dec", c, heads, mode).unwrap()
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(6);
        let params = layer_params(&mut store, &mut r, DecoderMode::SplitCross, 8, 2);
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let fmap = encoder_fixture(&mut g, &mut r, 6, 8);
        let qs = query_fixture(&mut g, &mut r, 4, 8);
        let out = sd_decoder_layer(&mut g, &params, &qs, &fmap, 0.0).unwrap();
        let maps = g.value(out.cross_attn_maps);
        assert_eq!(maps.shape(), &[2, 2, 4, 6]);
        for row in maps.data().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn tied_weights_and_identical_inputs_mirror_branches() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(7);
        let params = layer_params(&mut store, &mut r, DecoderMode::SplitCross, 8, 2);
        // Tie loc-branch weights to the cls branch.
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            if name.contains("cross_loc") || name.contains("ffn_loc") || name.contains("norm_cross_loc") || name.contains("norm_ffn_loc") {
                let src = name
                    .replace("cross_loc", "cross_cls")
                    .replace("ffn_loc", "ffn_cls");
                let sid = store.find(&src).unwrap();
                let did = store.find(&name).unwrap();
                *store.get_mut(did) = store.get(sid).clone();
            }
        }
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let fmap = encoder_fixture(&mut g, &mut r, 6, 8);
        let content = g.constant(random_tensor(&mut r, &[4, 8]));
        let pos = g.constant(random_tensor(&mut r, &[4, 8]));
        let qs = BranchQuerySet {
            content_cls: content,
            content_loc: content,
            pos_cls: pos,
            pos_loc: pos,
        };
        let out = sd_decoder_layer(&mut g, &params, &qs, &fmap, 0.0).unwrap();
        let cls = g.value(out.queries.content_cls);
        let loc = g.value(out.queries.content_loc);
        for (a, b) in cls.data().iter().zip(loc.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn loc_weights_do_not_touch_cls_map() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(8);
        let params = layer_params(&mut store, &mut r, DecoderMode::SplitCross, 8, 2);
        let run = |store: &ParamStore<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut r2 = rng(99);
            let mut g = Graph::new();
            store.install(&mut g, false).unwrap();
            let fmap = encoder_fixture(&mut g, &mut r2, 6, 8);
            let qs = query_fixture(&mut g, &mut r2, 4, 8);
            let out = sd_decoder_layer(&mut g, &params, &qs, &fmap, 0.0).unwrap();
            let maps = g.value(out.cross_attn_maps);
            let half = maps.numel() / 2;
            (
                maps.data()[..half].to_vec(),
                maps.data()[half..].to_vec(),
            )
        };
        let (cls_before, loc_before) = run(&store);
        // Perturb only the loc-branch cross-attention weights.
        let wid = store.find("dec.cross_loc.wq.w").unwrap();
        store.get_mut(wid).data_mut()[0] += 0.37;
        let (cls_after, loc_after) = run(&store);
        assert_eq!(cls_before, cls_after, "cls map must be bitwise unchanged");
        assert_ne!(loc_before, loc_after, "loc map must respond");
    }

    #[test]
    fn shared_mode_matches_reference_single_branch_layer() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(9);
        let params = layer_params(&mut store, &mut r, DecoderMode::Shared, 8, 2);
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let mut r2 = rng(55);
        let fmap = encoder_fixture(&mut g, &mut r2, 6, 8);
        let content = g.constant(random_tensor(&mut r2, &[4, 8]));
        let pos = g.constant(random_tensor(&mut r2, &[4, 8]));
        let qs = BranchQuerySet {
            content_cls: content,
            content_loc: content,
            pos_cls: pos,
            pos_loc: pos,
        };
        let out = sd_decoder_layer(&mut g, &params, &qs, &fmap, 0.0).unwrap();

        // Reference single-branch conditional layer from the same primitives.
        let reference = {
            let qk = g.add(content, pos).unwrap();
            let att = multi_head_attention(&mut g, &params.self_attn, qk, qk, content).unwrap();
            let res = g.add(content, att.out).unwrap();
            let x = params.norm_self.apply(&mut g, res).unwrap();
            let qcat = g.concat(&[x, pos], 1).unwrap();
            let kcat = g.concat(&[fmap.features, fmap.pos], 1).unwrap();
            let catt =
                multi_head_attention(&mut g, &params.cross_cls, qcat, kcat, fmap.features).unwrap();
            let res = g.add(x, catt.out).unwrap();
            let y = params.norm_cross_cls.apply(&mut g, res).unwrap();
            let f = params.ffn_cls.apply(&mut g, y, 0.0).unwrap();
            let res = g.add(y, f).unwrap();
            params.norm_ffn_cls.apply(&mut g, res).unwrap()
        };
        let got = g.value(out.queries.content_cls);
        let expect = g.value(reference);
        assert_eq!(got.data(), expect.data(), "shared mode must equal the reference exactly");
        // And both branch outputs are literally the same node.
        assert_eq!(out.queries.content_cls, out.queries.content_loc);
    }

    #[test]
    fn unknown_mode_string_is_error() {
        assert!("diagonal".parse::<DecoderMode>().is_err());
        assert_eq!(
            "split_cross".parse::<DecoderMode>().unwrap(),
            DecoderMode::SplitCross
        );
    }

    #[test]
    fn stack_length_matches_depth_and_single_layer_agrees() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(10);
        let layers: Vec<DecoderLayerParams> = (0..3)
            .map(|i| {
                DecoderLayerParams::new(&mut store, &mut r, &format!("dec.{i}"), 8, 2, DecoderMode::SplitCross)
                    .unwrap()
            })
            .collect();
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let mut r2 = rng(66);
        let fmap = encoder_fixture(&mut g, &mut r2, 6, 8);
        let qs = query_fixture(&mut g, &mut r2, 4, 8);
        for l in [1usize, 2, 3] {
            let outs = decoder_stack(&mut g, &layers[..l], qs, &fmap, 0.0).unwrap();
            assert_eq!(outs.len(), l);
        }
        let single = sd_decoder_layer(&mut g, &layers[0], &qs, &fmap, 0.0).unwrap();
        let stack = decoder_stack(&mut g, &layers[..1], qs, &fmap, 0.0).unwrap();
        assert_eq!(
            g.value(single.queries.content_cls).data(),
            g.value(stack[0].queries.content_cls).data()
        );
    }

    #[test]
    fn query_permutation_equivariance() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(11);
        let params = layer_params(&mut store, &mut r, DecoderMode::SplitCross, 8, 2);
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let mut r2 = rng(77);
        let fmap = encoder_fixture(&mut g, &mut r2, 6, 8);
        let qs = query_fixture(&mut g, &mut r2, 5, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = BranchQuerySet {
            content_cls: g.gather_rows(qs.content_cls, &perm).unwrap(),
            content_loc: g.gather_rows(qs.content_loc, &perm).unwrap(),
            pos_cls: g.gather_rows(qs.pos_cls, &perm).unwrap(),
            pos_loc: g.gather_rows(qs.pos_loc, &perm).unwrap(),
        };
        let base = sd_decoder_layer(&mut g, &params, &qs, &fmap, 0.0).unwrap();
        let permd = sd_decoder_layer(&mut g, &params, &permuted, &fmap, 0.0).unwrap();
        let a = g.value(base.queries.content_cls).clone();
        let b = g.value(permd.queries.content_cls).clone();
        for (ip, &io) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((a.at2(io, c) - b.at2(ip, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradcheck_decoder_layer_all_modes() {
        for mode in [DecoderMode::Shared, DecoderMode::FullSplit, DecoderMode::SplitCross] {
            let mut store = ParamStore::<f64>::new();
            let mut r = rng(12);
            let params = layer_params(&mut store, &mut r, mode, 8, 2);
            let mut r2 = rng(88);
            let feat_t = random_tensor(&mut r2, &[5, 8]);
            let pos_t = random_tensor(&mut r2, &[5, 8]);
            let qc = random_tensor(&mut r2, &[3, 8]);
            let ql = random_tensor(&mut r2, &[3, 8]);
            let pc = random_tensor(&mut r2, &[3, 8]);
            let pl = random_tensor(&mut r2, &[3, 8]);
            let mut inputs: Vec<Tensor<f64>> =
                (0..store.len()).map(|i| store.get(i).clone()).collect();
            let base = inputs.len();
            inputs.extend([feat_t, qc, ql, pc, pl]);
            let report = gradcheck(
                &inputs,
                &GradcheckOptions {
                    samples_per_tensor: 4,
                    seed: 3,
                    ..Default::default()
                },
                |g, ids| {
                    let fmap = EncoderFeatureMap {
                        features: ids[base],
                        pos: g.constant(pos_t.clone()),
                        h: 1,
                        w: 5,
                        channels: 8,
                    };
                    let qs = BranchQuerySet {
                        content_cls: ids[base + 1],
                        content_loc: ids[base + 2],
                        pos_cls: ids[base + 3],
                        pos_loc: ids[base + 4],
                    };
                    let out = sd_decoder_layer(g, &params, &qs, &fmap, 0.0)?;
                    let cat = g.concat(
                        &[out.queries.content_cls, out.queries.content_loc],
                        0,
                    )?;
                    let sq = g.mul(cat, cat)?;
                    Ok(g.sum_all(sq))
                },
            )
            .unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "mode {mode:?}: {report:?}"
            );
        }
    }
}
