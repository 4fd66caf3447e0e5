//! Set-prediction losses: alignment-weighted focal classification, box L1 +
//! GIoU, positive repetition, and per-layer aggregation with the
//! mini-detector auxiliary term.
//!
//! Matching and alignment targets are computed host-side from detached
//! values and enter the graph as constants; only the prediction path
//! carries gradient.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matching::{match_predictions, repeat_gts, GtObject, MatchResult};
use crate::tensor::{Scalar, Tensor};

pub const BOX_WEIGHT_L1: f64 = 5.0;
pub const BOX_WEIGHT_GIOU: f64 = 2.0;

/// Graph nodes of one prediction set (a decoder layer or the mini-detector).
#[derive(Debug, Clone, Copy)]
pub struct LayerPredictions {
    /// `[N, K]` class logits (per-class sigmoid semantics).
    pub class_logits: NodeId,
    /// `[N, 4]` boxes, normalized center form, sigmoid-bounded.
    pub boxes: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub repeat: usize,
    pub use_alignment: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LayerTerms {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LayerTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.l1 + self.giou
    }
}

/// Per-term loss values for reporting; the graph node carries the sum.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub layers: Vec<LayerTerms>,
    pub mini: LayerTerms,
    pub total: f64,
}

/// Focal-style classification loss with alignment targets, normalized by
/// `max(N_pos, 1)`: positives contribute `|t−s|^γ · BCE(s, t)` on their
/// ground-truth class, every other (query, class) element contributes
/// `s^γ · BCE(s, 0)`. Written as one elementwise expression over the full
/// target matrix, every term is non-negative.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    class_logits: NodeId,
    mr: &MatchResult,
    gts: &[GtObject],
    gamma: f64,
) -> Result<NodeId> {
    let shape = g.value(class_logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(
            "classification_loss",
            format!("logits must be [N,K], got {:?}", shape),
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    let mut targets = Tensor::<T>::zeros(&[n, k]);
    for pair in &mr.pairs {
        let label = gts[pair.gt].label;
        targets.data_mut()[pair.query * k + label] = T::from_f64(pair.t);
    }
    let t = g.constant(targets);
    let s = g.sigmoid(class_logits);
    let gap = g.sub(t, s)?;
    let gap = g.abs(gap);
    let weight = g.pow_scalar(gap, gamma)?;
    // BCE from logits: softplus(z) − z·t, stable for any z.
    let sp = g.softplus(class_logits);
    let zt = g.mul(class_logits, t)?;
    let bce = g.sub(sp, zt)?;
    let terms = g.mul(weight, bce)?;
    let sum = g.sum_all(terms);
    let norm = (mr.n_pos().max(1)) as f64;
    Ok(g.mul_scalar(sum, 1.0 / norm))
}

/// Differentiable GIoU of paired boxes `[P,4]` x `[P,4]` -> `[P,1]`.
/// Assumes positive widths/heights on at least one side so the union stays
/// positive (predictions are sigmoid-bounded). Exactly-touching edges take
/// the one-sided subgradient of the max/min/relu formulation.
pub fn giou_pairs<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let corners = |g: &mut Graph<T>, t: NodeId| -> Result<(NodeId, NodeId, NodeId, NodeId, NodeId)> {
        let cx = g.narrow(t, 1, 0, 1)?;
        let cy = g.narrow(t, 1, 1, 1)?;
        let w = g.narrow(t, 1, 2, 1)?;
        let h = g.narrow(t, 1, 3, 1)?;
        let hw = g.mul_scalar(w, 0.5);
        let hh = g.mul_scalar(h, 0.5);
        let x1 = g.sub(cx, hw)?;
        let x2 = g.add(cx, hw)?;
        let y1 = g.sub(cy, hh)?;
        let y2 = g.add(cy, hh)?;
        let area = g.mul(w, h)?;
        Ok((x1, y1, x2, y2, area))
    };
    let (ax1, ay1, ax2, ay2, aarea) = corners(g, a)?;
    let (bx1, by1, bx2, by2, barea) = corners(g, b)?;

    let ix1 = g.maximum(ax1, bx1)?;
    let ix2 = g.minimum(ax2, bx2)?;
    let iy1 = g.maximum(ay1, by1)?;
    let iy2 = g.minimum(ay2, by2)?;
    let iwr = g.sub(ix2, ix1)?;
    let iw = g.relu(iwr);
    let ihr = g.sub(iy2, iy1)?;
    let ih = g.relu(ihr);
    let inter = g.mul(iw, ih)?;

    let ab = g.add(aarea, barea)?;
    let union = g.sub(ab, inter)?;
    let iou = g.div(inter, union)?;

    let ex1 = g.minimum(ax1, bx1)?;
    let ex2 = g.maximum(ax2, bx2)?;
    let ey1 = g.minimum(ay1, by1)?;
    let ey2 = g.maximum(ay2, by2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let earea = g.mul(ew, eh)?;
    let excess = g.sub(earea, union)?;
    let penalty = g.div(excess, earea)?;
    g.sub(iou, penalty)
}

/// Box regression loss over matched pairs:
/// `(λ_l1·Σ‖Δ‖₁ + λ_giou·Σ(1−GIoU)) / N_pos`, split into its two terms.
pub fn box_loss<T: Scalar>(
    g: &mut Graph<T>,
    boxes: NodeId,
    mr: &MatchResult,
    gts: &[GtObject],
) -> Result<(NodeId, NodeId)> {
    if mr.pairs.is_empty() {
        let z1 = g.scalar(0.0);
        let z2 = g.scalar(0.0);
        return Ok((z1, z2));
    }
    let idx: Vec<usize> = mr.pairs.iter().map(|p| p.query).collect();
    let pred = g.gather_rows(boxes, &idx)?;
    let mut gt_data = Vec::with_capacity(idx.len() * 4);
    for pair in &mr.pairs {
        let b = gts[pair.gt].cbox;
        gt_data.extend_from_slice(&[
            T::from_f64(b.cx),
            T::from_f64(b.cy),
            T::from_f64(b.w),
            T::from_f64(b.h),
        ]);
    }
    let gt = g.constant(Tensor::from_vec(&[idx.len(), 4], gt_data)?);
    let norm = mr.n_pos() as f64;

    let diff = g.sub(pred, gt)?;
    let adiff = g.abs(diff);
    let l1_sum = g.sum_all(adiff);
    let l1 = g.mul_scalar(l1_sum, BOX_WEIGHT_L1 / norm);

    let gi = giou_pairs(g, pred, gt)?;
    let neg = g.affine(gi, -1.0, 1.0); // 1 − GIoU
    let gsum = g.sum_all(neg);
    let giou_loss = g.mul_scalar(gsum, BOX_WEIGHT_GIOU / norm);
    Ok((l1, giou_loss))
}

/// Build one prediction set's classification + box loss terms from an
/// already-computed match.
fn layer_loss_frozen<T: Scalar>(
    g: &mut Graph<T>,
    preds: &LayerPredictions,
    gts_rep: &[GtObject],
    mr: &MatchResult,
    gamma: f64,
) -> Result<(NodeId, LayerTerms)> {
    let cls = classification_loss(g, preds.class_logits, mr, gts_rep, gamma)?;
    let (l1, gl) = box_loss(g, preds.boxes, mr, gts_rep)?;
    let t1 = g.add(cls, l1)?;
    let total = g.add(t1, gl)?;
    let terms = LayerTerms {
        cls: g.value(cls).item().to_f64(),
        l1: g.value(l1).item().to_f64(),
        giou: g.value(gl).item().to_f64(),
    };
    Ok((total, terms))
}

/// Matches for every prediction set, plus the repeated ground-truth lists
/// they refer to. Separated from loss construction so the assignment and
/// alignment targets can be frozen (they are detached by contract).
pub struct FrozenMatches {
    pub layer_matches: Vec<MatchResult>,
    pub mini_match: MatchResult,
    pub gts_rep: Vec<GtObject>,
    pub mini_gts: Vec<GtObject>,
}

pub fn compute_matches<T: Scalar>(
    g: &Graph<T>,
    layers: &[LayerPredictions],
    mini: &LayerPredictions,
    gts: &[GtObject],
    cfg: &LossConfig,
) -> Result<FrozenMatches> {
    let n_queries = g.value(layers[0].boxes).shape()[0];
    let gts_rep = repeat_gts(gts, cfg.repeat);
    if gts_rep.len() > n_queries {
        return Err(Error::domain(
            "total_loss",
            format!(
                "{} ground truths repeated {}x exceed {} queries; increase the query count",
                gts.len(),
                cfg.repeat,
                n_queries
            ),
        ));
    }
    let match_one = |preds: &LayerPredictions, gts: &[GtObject]| -> Result<MatchResult> {
        let logits64 = g.value(preds.class_logits).cast::<f64>();
        let boxes64 = crate::querygen::tensor_to_boxes(g.value(preds.boxes));
        match_predictions(&logits64, &boxes64, gts, cfg.alpha, cfg.beta, cfg.use_alignment)
    };
    let layer_matches = layers
        .iter()
        .map(|p| match_one(p, &gts_rep))
        .collect::<Result<Vec<_>>>()?;
    let mini_gts: Vec<GtObject> = gts_rep
        .iter()
        .map(|gt| GtObject {
            label: 0,
            cbox: gt.cbox,
        })
        .collect();
    let mini_match = match_one(mini, &mini_gts)?;
    Ok(FrozenMatches {
        layer_matches,
        mini_match,
        gts_rep,
        mini_gts,
    })
}

/// Loss over all layers with frozen matches and targets.
pub fn total_loss_frozen<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerPredictions],
    mini: &LayerPredictions,
    frozen: &FrozenMatches,
    gamma: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let mut layer_terms = Vec::with_capacity(layers.len());
    let mut acc: Option<NodeId> = None;
    for (preds, mr) in layers.iter().zip(&frozen.layer_matches) {
        let (node, terms) = layer_loss_frozen(g, preds, &frozen.gts_rep, mr, gamma)?;
        layer_terms.push(terms);
        acc = Some(match acc {
            Some(a) => g.add(a, node)?,
            None => node,
        });
    }
    let (mini_node, mini_terms) =
        layer_loss_frozen(g, mini, &frozen.mini_gts, &frozen.mini_match, gamma)?;
    let total_node = g.add(acc.expect("at least one layer"), mini_node)?;
    let breakdown = LossBreakdown {
        layers: layer_terms,
        mini: mini_terms,
        total: g.value(total_node).item().to_f64(),
    };
    Ok((total_node, breakdown))
}

/// Total training loss for one image: every decoder layer is matched and
/// supervised independently (auxiliary losses), the mini-detector gets the
/// same treatment with objectness as a single binary class, and ground
/// truths are tiled `repeat` times before matching so several queries
/// supervise each object.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerPredictions],
    mini: &LayerPredictions,
    gts: &[GtObject],
    cfg: &LossConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let frozen = compute_matches(g, layers, mini, gts, cfg)?;
    total_loss_frozen(g, layers, mini, &frozen, cfg.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CenterBox;
    use crate::matching::MatchPair;

    fn single_match(query: usize, t: f64, s: f64) -> MatchResult {
        MatchResult {
            pairs: vec![MatchPair {
                query,
                gt: 0,
                s,
                u: 1.0,
                t,
            }],
            unmatched: vec![],
            n_queries: 1,
        }
    }

    #[test]
    fn perfect_negative_contributes_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 1], vec![-80.0]).unwrap(), true);
        let mr = MatchResult {
            pairs: vec![],
            unmatched: vec![0],
            n_queries: 1,
        };
        let loss = classification_loss(&mut g, logits, &mr, &[], 2.0).unwrap();
        assert!(g.value(loss).item() < 1e-20);
    }

    #[test]
    fn positive_with_unit_target_is_focal() {
        // t = 1 reduces the positive term to (1−s)^γ · (−log s).
        let z = 0.8f64;
        let s = 1.0 / (1.0 + (-z).exp());
        let gts = [GtObject {
            label: 0,
            cbox: CenterBox::new(0.5, 0.5, 0.2, 0.2),
        }];
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 1], vec![z]).unwrap(), true);
        let mr = single_match(0, 1.0, s);
        let loss = classification_loss(&mut g, logits, &mr, &gts, 2.0).unwrap();
        let expect = (1.0 - s).powi(2) * (-s.ln());
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn aligned_target_matches_scalar_oracle() {
        let z = 0.405_465_108_108_164_4_f64; // sigmoid ≈ 0.6
        let s = 1.0 / (1.0 + (-z).exp());
        let t = 0.711337;
        let gts = [GtObject {
            label: 0,
            cbox: CenterBox::new(0.5, 0.5, 0.2, 0.2),
        }];
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 1], vec![z]).unwrap(), true);
        let mr = single_match(0, t, s);
        let loss = classification_loss(&mut g, logits, &mr, &gts, 2.0).unwrap();
        let bce = -t * s.ln() - (1.0 - t) * (1.0 - s).ln();
        let expect = (t - s).abs().powi(2) * bce;
        assert!(
            (g.value(loss).item() - expect).abs() < 1e-9,
            "{} vs {expect}",
            g.value(loss).item()
        );
    }

    #[test]
    fn box_loss_exact_match_is_zero() {
        let b = CenterBox::new(0.4, 0.6, 0.2, 0.3);
        let gts = [GtObject { label: 0, cbox: b }];
        let mut g = Graph::<f64>::new();
        let boxes = g.leaf(
            Tensor::from_vec(&[1, 4], vec![b.cx, b.cy, b.w, b.h]).unwrap(),
            true,
        );
        let mr = single_match(0, 1.0, 0.5);
        let (l1, gl) = box_loss(&mut g, boxes, &mr, &gts).unwrap();
        assert!(g.value(l1).item().abs() < 1e-12);
        assert!(g.value(gl).item().abs() < 1e-9);
    }

    #[test]
    fn disjoint_boxes_giou_term() {
        // GIoU(A,B) = −7/9 for these, so the pair term is 2·(1−(−7/9)) = 32/9.
        let pred = CenterBox::new(0.5, 0.5, 1.0, 1.0);
        let gt = CenterBox::new(2.5, 2.5, 1.0, 1.0);
        let gts = [GtObject { label: 0, cbox: gt }];
        let mut g = Graph::<f64>::new();
        let boxes = g.leaf(
            Tensor::from_vec(&[1, 4], vec![pred.cx, pred.cy, pred.w, pred.h]).unwrap(),
            true,
        );
        let mr = single_match(0, 1.0, 0.5);
        let (_l1, gl) = box_loss(&mut g, boxes, &mr, &gts).unwrap();
        assert!((g.value(gl).item() - 32.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn giou_graph_matches_geometry() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mut mk = || {
                CenterBox::new(
                    rng_range(&mut rng, 0.1, 0.9),
                    rng_range(&mut rng, 0.1, 0.9),
                    rng_range(&mut rng, 0.01, 0.5),
                    rng_range(&mut rng, 0.01, 0.5),
                )
            };
            fn rng_range(rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> f64 {
                rng.gen_range(lo..hi)
            }
            let (a, b) = (mk(), mk());
            let mut g = Graph::<f64>::new();
            let an = g.constant(Tensor::from_vec(&[1, 4], vec![a.cx, a.cy, a.w, a.h]).unwrap());
            let bn = g.constant(Tensor::from_vec(&[1, 4], vec![b.cx, b.cy, b.w, b.h]).unwrap());
            let gi = giou_pairs(&mut g, an, bn).unwrap();
            let expect = crate::geometry::giou(&a, &b);
            assert!(
                (g.value(gi).data()[0] - expect).abs() < 1e-10,
                "{} vs {expect}",
                g.value(gi).data()[0]
            );
        }
    }

    #[test]
    fn classification_loss_nonnegative_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let k = rng.gen_range(1..4);
            let logits =
                Tensor::from_fn(&[n, k], |_| rng.gen_range(-4.0..4.0));
            let gts = vec![GtObject {
                label: rng.gen_range(0..k),
                cbox: CenterBox::new(0.5, 0.5, 0.2, 0.2),
            }];
            let mut g = Graph::<f64>::new();
            let l = g.leaf(logits, true);
            let mr = MatchResult {
                pairs: vec![MatchPair {
                    query: rng.gen_range(0..n),
                    gt: 0,
                    s: 0.5,
                    u: 0.7,
                    t: rng.gen_range(0.0..1.0),
                }],
                unmatched: vec![],
                n_queries: n,
            };
            let loss = classification_loss(&mut g, l, &mr, &gts, 2.0).unwrap();
            assert!(g.value(loss).item() >= 0.0);
        }
    }
}
