//! Bipartite matching between queries and ground truths.
//!
//! The solver is a shortest-augmenting-path assignment over pair-valued
//! costs `(primary, secondary)` with lexicographic comparison. The secondary
//! channel carries query indices, which lets the canonical tie-break — the
//! lexicographically smallest assignment vector among all optima — be
//! computed exactly, without epsilon perturbation: columns are fixed left to
//! right, each time minimizing the query index assigned to the next column
//! subject to optimality.

use crate::error::{Error, Result};
use crate::geometry::{giou, l1_center, CenterBox};
use crate::tensor::Tensor;

/// Matching cost weights: classification, box L1, GIoU.
pub const MATCH_WEIGHT_CLS: f64 = 2.0;
pub const MATCH_WEIGHT_L1: f64 = 5.0;
pub const MATCH_WEIGHT_GIOU: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Query (row) assigned to each ground-truth column, in column order.
    pub row_of_col: Vec<usize>,
    /// Sum of assigned costs, accumulated in column order.
    pub total_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
struct Duo {
    a: f64,
    b: f64,
}

impl Duo {
    const ZERO: Duo = Duo { a: 0.0, b: 0.0 };
    const INF: Duo = Duo {
        a: f64::INFINITY,
        b: 0.0,
    };

    fn add(self, o: Duo) -> Duo {
        Duo {
            a: self.a + o.a,
            b: self.b + o.b,
        }
    }

    fn sub(self, o: Duo) -> Duo {
        Duo {
            a: self.a - o.a,
            b: self.b - o.b,
        }
    }
}

/// Assign every column a distinct row (`n_rows >= n_cols`), minimizing the
/// lexicographic sum of `cost(row, col)` pairs. Returns row per column.
fn lap_columns(n_rows: usize, n_cols: usize, cost: &dyn Fn(usize, usize) -> Duo) -> Vec<usize> {
    debug_assert!(n_rows >= n_cols);
    let mut u = vec![Duo::ZERO; n_cols];
    let mut v = vec![Duo::ZERO; n_rows];
    let mut row_at_col: Vec<i64> = vec![-1; n_cols];
    let mut col_at_row: Vec<i64> = vec![-1; n_rows];

    for cur in 0..n_cols {
        let mut min_val = Duo::ZERO;
        let mut i = cur;
        let mut num_remaining = n_rows;
        let mut remaining: Vec<usize> = (0..n_rows).collect();
        let mut scanned_cols = vec![false; n_cols];
        let mut scanned_rows = vec![false; n_rows];
        let mut shortest = vec![Duo::INF; n_rows];
        let mut path: Vec<i64> = vec![-1; n_rows];
        let mut sink: i64 = -1;
        while sink == -1 {
            let mut index = usize::MAX;
            let mut lowest = Duo::INF;
            scanned_cols[i] = true;
            for it in 0..num_remaining {
                let j = remaining[it];
                let r = min_val.add(cost(j, i)).sub(u[i]).sub(v[j]);
                if r < shortest[j] {
                    path[j] = i as i64;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && col_at_row[j] == -1) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            debug_assert!(min_val.a.is_finite(), "assignment infeasible");
            let j = remaining[index];
            if col_at_row[j] == -1 {
                sink = j as i64;
            } else {
                i = col_at_row[j] as usize;
            }
            scanned_rows[j] = true;
            remaining[index] = remaining[num_remaining - 1];
            num_remaining -= 1;
        }

        u[cur] = u[cur].add(min_val);
        for (c, u_c) in u.iter_mut().enumerate() {
            if scanned_cols[c] && c != cur {
                *u_c = u_c.add(min_val.sub(shortest[row_at_col[c] as usize]));
            }
        }
        for (r, v_r) in v.iter_mut().enumerate() {
            if scanned_rows[r] {
                *v_r = v_r.sub(min_val.sub(shortest[r]));
            }
        }

        let mut j = sink as usize;
        loop {
            let c = path[j] as usize;
            col_at_row[j] = c as i64;
            let next_j = row_at_col[c];
            row_at_col[c] = j as i64;
            if c == cur {
                break;
            }
            j = next_j as usize;
        }
    }
    row_at_col.into_iter().map(|r| r as usize).collect()
}

/// Globally optimal assignment of `m` columns to distinct rows of an
/// `n x m` cost matrix (`n >= m`); among optima, returns the
/// lexicographically smallest `row_of_col` vector.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Assignment> {
    if cost.rank() != 2 {
        return Err(Error::shape(
            "hungarian",
            format!("cost must be a matrix, got {:?}", cost.shape()),
        ));
    }
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    if n < m {
        return Err(Error::domain(
            "hungarian",
            format!("need at least as many rows as columns, got {n} x {m}"),
        ));
    }
    if let Some(bad) = cost.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(
            "hungarian",
            format!("non-finite cost at ({}, {})", bad / m, bad % m),
        ));
    }
    if m == 0 {
        return Ok(Assignment {
            row_of_col: Vec::new(),
            total_cost: 0.0,
        });
    }

    let mut row_of_col = vec![0usize; m];
    let mut row_used = vec![false; n];
    for target in 0..m {
        let rows: Vec<usize> = (0..n).filter(|&r| !row_used[r]).collect();
        let cols: Vec<usize> = (target..m).collect();
        let assigned = lap_columns(rows.len(), cols.len(), &|rl, cl| {
            let (r, c) = (rows[rl], cols[cl]);
            Duo {
                a: cost.at2(r, c),
                b: if c == target { r as f64 } else { 0.0 },
            }
        });
        let fixed = rows[assigned[0]];
        row_of_col[target] = fixed;
        row_used[fixed] = true;
    }
    let total_cost = (0..m).map(|c| cost.at2(row_of_col[c], c)).sum();
    Ok(Assignment {
        row_of_col,
        total_cost,
    })
}

/// One ground-truth object as seen by the matcher and losses.
#[derive(Debug, Clone, Copy)]
pub struct GtObject {
    pub label: usize,
    pub cbox: CenterBox,
}

/// DETR matching cost: `λ_cls·(−p[label]) + λ_l1·‖Δbox‖₁ + λ_giou·(−GIoU)`
/// with per-class sigmoid probabilities. Empty ground truth yields `[N, 0]`.
pub fn match_cost(
    class_logits: &Tensor<f64>,
    boxes: &[CenterBox],
    gts: &[GtObject],
) -> Result<Tensor<f64>> {
    if class_logits.rank() != 2 || class_logits.shape()[0] != boxes.len() {
        return Err(Error::shape(
            "match_cost",
            format!(
                "logits {:?} inconsistent with {} boxes",
                class_logits.shape(),
                boxes.len()
            ),
        ));
    }
    let (n, k) = (class_logits.shape()[0], class_logits.shape()[1]);
    let mut out = Tensor::zeros(&[n, gts.len()]);
    for (j, gt) in gts.iter().enumerate() {
        if gt.label >= k {
            return Err(Error::domain(
                "match_cost",
                format!("gt label {} out of range 0..{k}", gt.label),
            ));
        }
        for i in 0..n {
            let z = class_logits.at2(i, gt.label);
            let p = 1.0 / (1.0 + (-z).exp());
            let c = MATCH_WEIGHT_CLS * (-p)
                + MATCH_WEIGHT_L1 * l1_center(&boxes[i], &gt.cbox)
                + MATCH_WEIGHT_GIOU * (-giou(&boxes[i], &gt.cbox));
            out.data_mut()[i * gts.len() + j] = c;
        }
    }
    Ok(out)
}

/// Task-alignment target `t = s^α · u^β`, clamped to [0,1]. Inputs outside
/// [0,1] are clamped first (with a warning); both are detached targets.
pub fn alignment_metric(s: f64, u: f64, alpha: f64, beta: f64) -> f64 {
    let mut sc = s;
    let mut uc = u;
    if !(0.0..=1.0).contains(&sc) {
        log::warn!("alignment_metric: s = {s} outside [0,1], clamping");
        sc = sc.clamp(0.0, 1.0);
    }
    if !(0.0..=1.0).contains(&uc) {
        log::warn!("alignment_metric: u = {u} outside [0,1], clamping");
        uc = uc.clamp(0.0, 1.0);
    }
    (sc.powf(alpha) * uc.powf(beta)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct MatchPair {
    pub query: usize,
    /// Index into the (repeated) ground-truth list.
    pub gt: usize,
    /// Sigmoid probability of the ground-truth class (detached).
    pub s: f64,
    /// IoU of the matched prediction against its ground truth (detached).
    pub u: f64,
    /// Classification target for this positive.
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Positive pairs in ground-truth column order.
    pub pairs: Vec<MatchPair>,
    /// Queries left unmatched, ascending.
    pub unmatched: Vec<usize>,
    pub n_queries: usize,
}

impl MatchResult {
    pub fn n_pos(&self) -> usize {
        self.pairs.len()
    }
}

/// Match predictions against the (already repeated) ground-truth list and
/// attach per-pair alignment targets. With `use_alignment` disabled the
/// positive target degenerates to the binary label 1.
pub fn match_predictions(
    class_logits: &Tensor<f64>,
    boxes: &[CenterBox],
    gts: &[GtObject],
    alpha: f64,
    beta: f64,
    use_alignment: bool,
) -> Result<MatchResult> {
    let n = boxes.len();
    if gts.len() > n {
        return Err(Error::domain(
            "match_predictions",
            format!(
                "{} (repeated) ground truths exceed {n} queries; increase the query count",
                gts.len()
            ),
        ));
    }
    let cost = match_cost(class_logits, boxes, gts)?;
    let assignment = hungarian(&cost)?;
    let mut matched = vec![false; n];
    let mut pairs = Vec::with_capacity(gts.len());
    for (j, &q) in assignment.row_of_col.iter().enumerate() {
        matched[q] = true;
        let z = class_logits.at2(q, gts[j].label);
        let s = 1.0 / (1.0 + (-z).exp());
        let u = crate::geometry::iou(&boxes[q], &gts[j].cbox);
        let t = if use_alignment {
            alignment_metric(s, u, alpha, beta)
        } else {
            1.0
        };
        pairs.push(MatchPair {
            query: q,
            gt: j,
            s,
            u,
            t,
        });
    }
    let unmatched = (0..n).filter(|&q| !matched[q]).collect();
    Ok(MatchResult {
        pairs,
        unmatched,
        n_queries: n,
    })
}

/// Ground truths tiled `repeat` times (full copies appended in order).
pub fn repeat_gts(gts: &[GtObject], repeat: usize) -> Vec<GtObject> {
    let mut out = Vec::with_capacity(gts.len() * repeat.max(1));
    for _ in 0..repeat.max(1) {
        out.extend_from_slice(gts);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, m: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[n, m], v).unwrap()
    }

    #[test]
    fn two_by_two_swap_is_optimal() {
        let a = hungarian(&mat(2, 2, vec![1.0, 2.0, 2.0, 4.0])).unwrap();
        assert_eq!(a.row_of_col, vec![1, 0]);
        assert!((a.total_cost - 4.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_dominant_identity() {
        let a = hungarian(&mat(
            3,
            3,
            vec![0.0, 9.0, 9.0, 9.0, 0.0, 9.0, 9.0, 9.0, 0.0],
        ))
        .unwrap();
        assert_eq!(a.row_of_col, vec![0, 1, 2]);
    }

    #[test]
    fn identical_rows_pick_lowest_queries() {
        let a = hungarian(&mat(4, 2, vec![3.0, 1.0, 3.0, 1.0, 3.0, 1.0, 3.0, 1.0])).unwrap();
        assert_eq!(a.row_of_col, vec![0, 1]);
    }

    #[test]
    fn lexicographic_among_optima() {
        // Optima: col0 can take row0 or row1 at the same total; the
        // canonical answer gives col0 the smaller row.
        let a = hungarian(&mat(2, 2, vec![1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(a.row_of_col, vec![0, 1]);
    }

    #[test]
    fn rejects_nan_and_wide_matrices() {
        assert!(hungarian(&mat(2, 2, vec![0.0, f64::NAN, 0.0, 0.0])).is_err());
        assert!(hungarian(&mat(1, 2, vec![0.0, 1.0])).is_err());
    }

    #[test]
    fn empty_gt_is_empty_assignment() {
        let a = hungarian(&Tensor::zeros(&[3, 0])).unwrap();
        assert!(a.row_of_col.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn random_matrices_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = rng.gen_range(1..=5usize);
            let n = rng.gen_range(m..=6usize);
            let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cost = mat(n, m, data);
            let ours = hungarian(&cost).unwrap();
            let best = brute_force_min(&cost);
            assert!(
                (ours.total_cost - best).abs() < 1e-9,
                "ours {} vs brute {best}",
                ours.total_cost
            );
        }
    }

    fn brute_force_min(cost: &Tensor<f64>) -> f64 {
        let (n, m) = (cost.shape()[0], cost.shape()[1]);
        let mut best = f64::INFINITY;
        let mut rows: Vec<usize> = Vec::new();
        fn rec(cost: &Tensor<f64>, n: usize, m: usize, rows: &mut Vec<usize>, best: &mut f64) {
            if rows.len() == m {
                let total: f64 = rows.iter().enumerate().map(|(c, &r)| cost.at2(r, c)).sum();
                if total < *best {
                    *best = total;
                }
                return;
            }
            for r in 0..n {
                if !rows.contains(&r) {
                    rows.push(r);
                    rec(cost, n, m, rows, best);
                    rows.pop();
                }
            }
        }
        rec(cost, n, m, &mut rows, &mut best);
        best
    }

    #[test]
    fn match_cost_perfect_prediction() {
        // p = 1 and exact box: cost = 2·(−1) + 0 + 2·(−1) = −4.
        let logits = mat(1, 2, vec![60.0, -60.0]);
        let b = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let gts = [GtObject { label: 0, cbox: b }];
        let c = match_cost(&logits, &[b], &gts).unwrap();
        assert!((c.at2(0, 0) - (-4.0)).abs() < 1e-9);
    }

    #[test]
    fn match_cost_l1_contribution() {
        let logits = mat(1, 1, vec![-60.0]); // p ~ 0
        let pred = CenterBox::new(0.0, 0.0, 0.0, 0.0);
        let gt_box = CenterBox::new(1.0, 1.0, 1.0, 1.0);
        let gts = [GtObject {
            label: 0,
            cbox: gt_box,
        }];
        let c = match_cost(&logits, &[pred], &gts).unwrap();
        // L1 term 5·4 = 20; GIoU(pred point at origin vs unit box) enters too.
        let expected = 20.0 + MATCH_WEIGHT_GIOU * (-giou(&pred, &gt_box));
        assert!((c.at2(0, 0) - expected).abs() < 1e-9, "{}", c.at2(0, 0));
    }

    #[test]
    fn alignment_metric_values() {
        assert_eq!(alignment_metric(1.0, 1.0, 0.25, 0.75), 1.0);
        assert_eq!(alignment_metric(0.7, 0.0, 0.25, 0.75), 0.0);
        // Scalar oracle via exact square-root chains:
        // 0.5^(1/4) * 0.8^(3/4) = 2 * 2^(1/4) / (sqrt(5) * 5^(1/4)).
        let oracle = 2.0 * 2.0f64.sqrt().sqrt() / (5.0f64.sqrt() * 5.0f64.sqrt().sqrt());
        assert!((oracle - 0.711_311_764_015_569_1).abs() < 1e-15);
        let t = alignment_metric(0.5, 0.8, 0.25, 0.75);
        assert!((t - oracle).abs() < 1e-9, "{t} vs {oracle}");
    }

    #[test]
    fn alignment_metric_clamps_out_of_range() {
        assert_eq!(alignment_metric(1.5, 1.0, 0.25, 0.75), 1.0);
        assert_eq!(alignment_metric(-0.1, 0.5, 0.25, 0.75), 0.0);
    }

    #[test]
    fn repetition_matches_distinct_queries() {
        let logits = mat(4, 1, vec![0.0, 0.0, 0.0, 0.0]);
        let boxes = vec![
            CenterBox::new(0.5, 0.5, 0.2, 0.2),
            CenterBox::new(0.52, 0.5, 0.2, 0.2),
            CenterBox::new(0.1, 0.1, 0.05, 0.05),
            CenterBox::new(0.9, 0.9, 0.1, 0.1),
        ];
        let gts = vec![GtObject {
            label: 0,
            cbox: CenterBox::new(0.5, 0.5, 0.2, 0.2),
        }];
        let repeated = repeat_gts(&gts, 2);
        assert_eq!(repeated.len(), 2);
        let m = match_predictions(&logits, &boxes, &repeated, 0.25, 0.75, true).unwrap();
        assert_eq!(m.n_pos(), 2);
        assert_ne!(m.pairs[0].query, m.pairs[1].query);
        assert_eq!(m.unmatched.len(), 2);
    }

    #[test]
    fn too_many_gts_errors() {
        let logits = mat(1, 1, vec![0.0]);
        let boxes = vec![CenterBox::new(0.5, 0.5, 0.2, 0.2)];
        let gts = repeat_gts(
            &[GtObject {
                label: 0,
                cbox: CenterBox::new(0.5, 0.5, 0.2, 0.2),
            }],
            2,
        );
        let err = match_predictions(&logits, &boxes, &gts, 0.25, 0.75, true).unwrap_err();
        assert!(err.to_string().contains("query count"));
    }
}
