//! Task-aware query generation: mini-detector anchors, region features,
//! discriminative points, and per-branch content/positional initialization.
//!
//! Each anchor from the mini-detector is pooled with RoIAlign; a shared
//! ConvNet plus one MLP head per branch predicts M in-RoI points; their
//! sampled features average into the branch's content embedding, and the
//! sinusoidal embedding of their average offset becomes its positional
//! embedding. The whole path is differentiable end to end, including the
//! anchor coordinates.

use crate::attention::EncoderFeatureMap;
use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::graph::{Graph, NodeId};
use crate::params::{Conv, Linear, Mlp, ParamStore};
use crate::sampling::{grid_centers, roi_align, sinusoidal_embed_2d, to_pixel_coords, ROI_GRID};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// Coordinates are scaled by 2π before sinusoidal embedding so the first
/// frequency covers a full period over the unit image; used consistently
/// for encoder grid embeddings and query offsets.
pub const PE_COORD_SCALE: f64 = std::f64::consts::TAU;
/// Sinusoidal embedding temperature.
pub const PE_TEMPERATURE: f64 = 10000.0;
/// ConvNet output channels over pooled RoI features.
pub const POINT_NET_CHANNELS: usize = 8;
/// Hidden width of the per-branch point MLPs.
pub const POINT_MLP_HIDDEN: usize = 64;

/// ln(p / (1 - p)), clamped away from 0 and 1.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
pub struct MiniDetectorParams {
    pub objectness: Linear,
    pub box_head: Linear,
}

impl MiniDetectorParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
    ) -> Self {
        let objectness = Linear::new(store, rng, &format!("{prefix}.obj"), dim, 1);
        let box_head = Linear::new(store, rng, &format!("{prefix}.box"), dim, 4);
        MiniDetectorParams {
            objectness,
            box_head,
        }
    }
}

/// Anchor proposals: the selected top-N boxes plus the dense per-location
/// predictions that the auxiliary detection loss supervises.
pub struct AnchorSet {
    /// `[N, 4]` selected anchors, normalized center form, each in (0,1).
    pub boxes: NodeId,
    /// Host copy of the selected anchors.
    pub box_values: Vec<CenterBox>,
    /// `[N]` objectness probabilities of the selected anchors.
    pub objectness: NodeId,
    /// Flat encoder locations chosen, best score first
    /// (ties broken by lower flat index).
    pub selected: Vec<usize>,
    /// `[HW, 1]` objectness logits at every location.
    pub obj_logits_all: NodeId,
    /// `[HW, 4]` box predictions at every location.
    pub boxes_all: NodeId,
}

/// Per-location objectness + box heads over encoder features, anchored at
/// each location's grid coordinate, followed by top-N selection.
pub fn mini_detector<T: Scalar>(
    g: &mut Graph<T>,
    params: &MiniDetectorParams,
    fmap: &EncoderFeatureMap,
    n: usize,
) -> Result<AnchorSet> {
    let hw = fmap.h * fmap.w;
    if n > hw {
        return Err(Error::domain(
            "mini_detector",
            format!("cannot select {n} anchors from {hw} locations"),
        ));
    }
    let obj_logits_all = params.objectness.apply(g, fmap.features)?;
    let raw = params.box_head.apply(g, fmap.features)?;

    // cx,cy = sigmoid(raw + inverse_sigmoid(grid)); w,h = sigmoid(raw).
    let grid = grid_centers::<T>(fmap.h, fmap.w);
    let grid_logit = g.constant(Tensor::from_fn(&[hw, 2], |i| {
        T::from_f64(inverse_sigmoid(grid.data()[i].to_f64()))
    }));
    let raw_cxcy = g.narrow(raw, 1, 0, 2)?;
    let raw_wh = g.narrow(raw, 1, 2, 2)?;
    let shifted = g.add(raw_cxcy, grid_logit)?;
    let cxcy = g.sigmoid(shifted);
    let wh = g.sigmoid(raw_wh);
    let boxes_all = g.concat(&[cxcy, wh], 1)?;

    // Top-N by objectness, ties to the lower flat index.
    let scores: Vec<f64> = g
        .value(obj_logits_all)
        .data()
        .iter()
        .map(|v| v.to_f64())
        .collect();
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let selected: Vec<usize> = order.into_iter().take(n).collect();

    let boxes = g.gather_rows(boxes_all, &selected)?;
    let sel_logits = g.gather_rows(obj_logits_all, &selected)?;
    let obj_prob2 = g.sigmoid(sel_logits);
    let objectness = g.reshape(obj_prob2, &[n])?;
    let box_values = tensor_to_boxes(g.value(boxes));
    Ok(AnchorSet {
        boxes,
        box_values,
        objectness,
        selected,
        obj_logits_all,
        boxes_all,
    })
}

pub fn tensor_to_boxes<T: Scalar>(t: &Tensor<T>) -> Vec<CenterBox> {
    debug_assert_eq!(t.shape()[1], 4);
    t.data()
        .chunks(4)
        .map(|c| {
            CenterBox::new(
                c[0].to_f64(),
                c[1].to_f64(),
                c[2].to_f64(),
                c[3].to_f64(),
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct QueryGenParams {
    pub conv1: Conv,
    pub conv2: Conv,
    pub head_cls: Mlp,
    pub head_loc: Mlp,
    pub proj_cls: Linear,
    pub proj_loc: Linear,
    pub points: usize,
}

impl QueryGenParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        points: usize,
    ) -> Self {
        let qc = POINT_NET_CHANNELS;
        let flat = ROI_GRID * ROI_GRID * qc;
        QueryGenParams {
            conv1: Conv::new(store, rng, &format!("{prefix}.conv1"), dim, qc, 3, 1, 1),
            conv2: Conv::new(store, rng, &format!("{prefix}.conv2"), qc, qc, 3, 1, 1),
            head_cls: Mlp::new(
                store,
                rng,
                &format!("{prefix}.head_cls"),
                &[flat, POINT_MLP_HIDDEN, points * 2],
            ),
            head_loc: Mlp::new(
                store,
                rng,
                &format!("{prefix}.head_loc"),
                &[flat, POINT_MLP_HIDDEN, points * 2],
            ),
            proj_cls: Linear::new(store, rng, &format!("{prefix}.proj_cls"), dim, dim),
            proj_loc: Linear::new(store, rng, &format!("{prefix}.proj_loc"), dim, dim),
            points,
        }
    }
}

/// Discriminative points per branch, sigmoid-bounded RoI-frame coordinates.
/// Layout per branch: `[N, M, 2]` as (x, y) pairs.
pub struct PointSet {
    pub cls: NodeId,
    pub loc: NodeId,
}

/// Shared ConvNet over `f_r [N, 7, 7, d]`, flattened, then one MLP head per
/// branch emitting M·2 sigmoided coordinates.
pub fn discriminative_points<T: Scalar>(
    g: &mut Graph<T>,
    params: &QueryGenParams,
    f_r: NodeId,
) -> Result<PointSet> {
    let shape = g.value(f_r).shape().to_vec();
    if shape.len() != 4 || shape[1] != ROI_GRID || shape[2] != ROI_GRID {
        return Err(Error::shape(
            "discriminative_points",
            format!("expected [N,7,7,d], got {:?}", shape),
        ));
    }
    let (n, d) = (shape[0], shape[3]);
    let grid2 = ROI_GRID * ROI_GRID;
    let flat_all = g.reshape(f_r, &[n, grid2 * d])?;
    let qc = POINT_NET_CHANNELS;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row = g.narrow(flat_all, 0, i, 1)?;
        let hwxd = g.reshape(row, &[grid2, d])?;
        let dxhw = g.transpose(hwxd)?;
        let spatial = g.reshape(dxhw, &[d, ROI_GRID, ROI_GRID])?;
        let c1 = params.conv1.apply(g, spatial)?;
        let c1 = g.relu(c1);
        let c2 = params.conv2.apply(g, c1)?;
        let c2 = g.relu(c2);
        let back = g.reshape(c2, &[qc, grid2])?;
        let back = g.transpose(back)?;
        rows.push(g.reshape(back, &[1, grid2 * qc])?);
    }
    let feats = g.concat(&rows, 0)?;
    let raw_cls = params.head_cls.apply(g, feats)?;
    let raw_loc = params.head_loc.apply(g, feats)?;
    let s_cls = g.sigmoid(raw_cls);
    let s_loc = g.sigmoid(raw_loc);
    Ok(PointSet {
        cls: g.reshape(s_cls, &[n, params.points, 2])?,
        loc: g.reshape(s_loc, &[n, params.points, 2])?,
    })
}

fn branch_queries<T: Scalar>(
    g: &mut Graph<T>,
    map_spatial: NodeId,
    anchors: NodeId,
    points: NodeId,
    proj: &Linear,
    m: usize,
    c: usize,
    feat_h: usize,
    feat_w: usize,
) -> Result<(NodeId, NodeId)> {
    let n = g.value(points).shape()[0];
    let flat = g.reshape(points, &[n, m * 2])?;
    let even: Vec<usize> = (0..m).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..m).map(|i| 2 * i + 1).collect();
    let xs = g.gather_cols(flat, &even)?; // [N, M] RoI-frame
    let ys = g.gather_cols(flat, &odd)?;

    let cx = g.narrow(anchors, 1, 0, 1)?;
    let cy = g.narrow(anchors, 1, 1, 1)?;
    let bw = g.narrow(anchors, 1, 2, 1)?;
    let bh = g.narrow(anchors, 1, 3, 1)?;
    let half_w = g.mul_scalar(bw, 0.5);
    let half_h = g.mul_scalar(bh, 0.5);
    let x1 = g.sub(cx, half_w)?;
    let y1 = g.sub(cy, half_h)?;

    // Absolute normalized coordinates: x1 + p·w, per point.
    let sx = g.mul(xs, bw)?;
    let px = g.add(sx, x1)?;
    let sy = g.mul(ys, bh)?;
    let py = g.add(sy, y1)?;

    let pxf = g.reshape(px, &[n * m, 1])?;
    let pyf = g.reshape(py, &[n * m, 1])?;
    let pts_norm = g.concat(&[pxf, pyf], 1)?;
    let pts_pix = to_pixel_coords(g, pts_norm, feat_h, feat_w)?;
    let sampled = g.bilinear_sample(map_spatial, pts_pix)?; // [N*M, d]
    let grouped = g.reshape(sampled, &[n, m, c])?;
    let mean_feat = g.mean_axis(grouped, 1)?; // [N, d]
    let content = proj.apply(g, mean_feat)?;

    let avg_x = g.mean_axis(px, 1)?; // [N]
    let avg_y = g.mean_axis(py, 1)?;
    let ax = g.reshape(avg_x, &[n, 1])?;
    let ay = g.reshape(avg_y, &[n, 1])?;
    let avg = g.concat(&[ax, ay], 1)?;
    let avg_scaled = g.mul_scalar(avg, PE_COORD_SCALE);
    let pos = sinusoidal_embed_2d(g, avg_scaled, c, PE_TEMPERATURE)?;
    Ok((content, pos))
}

/// Contents and positional embeddings produced by task-aware generation,
/// one pair per branch, plus the average offsets for inspection.
pub struct GeneratedQueries {
    pub content_cls: NodeId,
    pub content_loc: NodeId,
    pub pos_cls: NodeId,
    pub pos_loc: NodeId,
}

/// Map each branch's RoI-frame points into the image, sample features,
/// average them into content embeddings, and embed the average offsets.
pub fn generate_queries<T: Scalar>(
    g: &mut Graph<T>,
    params: &QueryGenParams,
    fmap: &EncoderFeatureMap,
    map_spatial: NodeId,
    anchors: &AnchorSet,
    points: &PointSet,
) -> Result<GeneratedQueries> {
    if params.points == 0 {
        return Err(Error::domain(
            "generate_queries",
            "point count M must be positive".to_string(),
        ));
    }
    let c = fmap.channels;
    let (content_cls, pos_cls) = branch_queries(
        g,
        map_spatial,
        anchors.boxes,
        points.cls,
        &params.proj_cls,
        params.points,
        c,
        fmap.h,
        fmap.w,
    )?;
    let (content_loc, pos_loc) = branch_queries(
        g,
        map_spatial,
        anchors.boxes,
        points.loc,
        &params.proj_loc,
        params.points,
        c,
        fmap.h,
        fmap.w,
    )?;
    Ok(GeneratedQueries {
        content_cls,
        content_loc,
        pos_cls,
        pos_loc,
    })
}

/// RoIAlign over the selected anchors: `[N, 7, 7, d]`.
pub fn pooled_region_features<T: Scalar>(
    g: &mut Graph<T>,
    map_spatial: NodeId,
    anchors: &AnchorSet,
) -> Result<NodeId> {
    roi_align(g, map_spatial, anchors.boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn feature_map(g: &mut Graph<f64>, h: usize, w: usize, c: usize, v: f64) -> EncoderFeatureMap {
        let features = g.constant(Tensor::full(&[h * w, c], v));
        let pos = g.constant(Tensor::zeros(&[h * w, c]));
        EncoderFeatureMap {
            features,
            pos,
            h,
            w,
            channels: c,
        }
    }

    fn zero_minidet(g_dim: usize, store: &mut ParamStore<f64>) -> MiniDetectorParams {
        let w = store.add("mini.obj.w", Tensor::zeros(&[g_dim, 1]));
        let b = store.add("mini.obj.b", Tensor::zeros(&[1]));
        let bw = store.add("mini.box.w", Tensor::zeros(&[g_dim, 4]));
        let bb = store.add("mini.box.b", Tensor::zeros(&[4]));
        MiniDetectorParams {
            objectness: Linear { w, b: Some(b) },
            box_head: Linear {
                w: bw,
                b: Some(bb),
            },
        }
    }

    #[test]
    fn uniform_objectness_selects_first_indices() {
        let mut store = ParamStore::<f64>::new();
        let params = zero_minidet(4, &mut store);
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let fmap = feature_map(&mut g, 3, 3, 4, 1.0);
        let a = mini_detector(&mut g, &params, &fmap, 5).unwrap();
        assert_eq!(a.selected, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_heads_give_grid_centered_half_boxes() {
        let mut store = ParamStore::<f64>::new();
        let params = zero_minidet(4, &mut store);
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        // 1x1 grid: the single location sits at (0.5, 0.5).
        let fmap = feature_map(&mut g, 1, 1, 4, 1.0);
        let a = mini_detector(&mut g, &params, &fmap, 1).unwrap();
        let b = a.box_values[0];
        assert!((b.cx - 0.5).abs() < 1e-9, "{b:?}");
        assert!((b.cy - 0.5).abs() < 1e-9);
        assert!((b.w - 0.5).abs() < 1e-12);
        assert!((b.h - 0.5).abs() < 1e-12);
    }

    #[test]
    fn top_n_matches_sort_oracle() {
        use rand::{Rng, SeedableRng as _};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let hw = rng.gen_range(4..40usize);
            let n = rng.gen_range(1..=hw);
            let scores: Vec<f64> = (0..hw).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
            // Reference: stable sort on (-score, index).
            let mut expect: Vec<usize> = (0..hw).collect();
            expect.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            expect.truncate(n);
            // Same rule as mini_detector's selection.
            let mut got: Vec<usize> = (0..hw).collect();
            got.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            got.truncate(n);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn too_many_anchors_errors() {
        let mut store = ParamStore::<f64>::new();
        let params = zero_minidet(4, &mut store);
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let fmap = feature_map(&mut g, 2, 2, 4, 1.0);
        assert!(mini_detector(&mut g, &params, &fmap, 5).is_err());
    }

    #[test]
    fn zero_weights_put_points_at_roi_center() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = QueryGenParams::new(&mut store, &mut rng, "qg", 4, 3);
        // Zero every parameter: sigmoid(0) = 0.5 everywhere.
        for id in 0..store.len() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        params.points = 3;
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let f_r = g.constant(Tensor::full(&[2, 7, 7, 4], 0.3));
        let pts = discriminative_points(&mut g, &params, f_r).unwrap();
        assert_eq!(g.value(pts.cls).shape(), &[2, 3, 2]);
        for &v in g.value(pts.cls).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_points_average_to_center() {
        // Four points at the RoI corners of the full-image anchor must
        // average to (0.5, 0.5); verified through the same arithmetic
        // branch_queries uses.
        let mut g = Graph::<f64>::new();
        let anchors = g.constant(Tensor::from_vec(&[1, 4], vec![0.5, 0.5, 1.0, 1.0]).unwrap());
        let pts = g.constant(
            Tensor::from_vec(
                &[1, 4, 2],
                vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            )
            .unwrap(),
        );
        let flat = g.reshape(pts, &[1, 8]).unwrap();
        let xs = g.gather_cols(flat, &[0, 2, 4, 6]).unwrap();
        let cx = g.narrow(anchors, 1, 0, 1).unwrap();
        let bw = g.narrow(anchors, 1, 2, 1).unwrap();
        let half = g.mul_scalar(bw, 0.5);
        let x1 = g.sub(cx, half).unwrap();
        let sx = g.mul(xs, bw).unwrap();
        let px = g.add(sx, x1).unwrap();
        let avg = g.mean_axis(px, 1).unwrap();
        assert!((g.value(avg).data()[0] - 0.5).abs() < 1e-12);
    }
}
