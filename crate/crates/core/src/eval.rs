//! COCO-style average precision at desk scale plus attention-map export.

use crate::error::{Error, Result};
use crate::geometry::{iou, CenterBox};
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub image_id: u64,
    pub label: usize,
    pub score: f64,
    pub cbox: CenterBox,
}

#[derive(Debug, Clone, Copy)]
pub struct GroundTruth {
    pub image_id: u64,
    pub label: usize,
    pub cbox: CenterBox,
}

/// AP report; fields are `None` when undefined (no ground truths at all).
#[derive(Debug, Clone, Serialize)]
pub struct ApReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// Mean-over-thresholds AP per class, `None` for classes without GTs.
    pub per_class: Vec<Option<f64>>,
}

impl ApReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Greedy matching per image and class at one IoU threshold: detections in
/// score order claim the unmatched ground truth of highest IoU >= threshold,
/// equal IoUs break to the lower GT index. Returns cumulative
/// (precision, recall) points after each detection.
fn pr_points(
    dets: &[(u64, f64, CenterBox)],
    gts_by_image: &BTreeMap<u64, Vec<CenterBox>>,
    n_gt: usize,
    threshold: f64,
) -> Vec<(f64, f64)> {
    let mut taken: BTreeMap<u64, Vec<bool>> = gts_by_image
        .iter()
        .map(|(&id, v)| (id, vec![false; v.len()]))
        .collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (i, (img, _score, b)) in dets.iter().enumerate() {
        if let (Some(gt_boxes), Some(flags)) = (gts_by_image.get(img), taken.get_mut(img)) {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gb) in gt_boxes.iter().enumerate() {
                if flags[gi] {
                    continue;
                }
                let ov = iou(b, gb);
                if ov >= threshold {
                    let better = match best {
                        None => true,
                        Some((_, cur)) => ov > cur,
                    };
                    if better {
                        best = Some((gi, ov));
                    }
                }
            }
            if let Some((gi, _)) = best {
                flags[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / (i + 1) as f64, tp as f64 / n_gt as f64));
    }
    points
}

/// 101-point interpolated AP from cumulative PR points.
fn interpolate_ap(points: &[(f64, f64)]) -> f64 {
    // Monotonize precision from the right, then sample the envelope at
    // recall levels 0, 0.01, ..., 1.
    let mut prec: Vec<f64> = points.iter().map(|p| p.0).collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        if prec[i] < prec[i + 1] {
            prec[i] = prec[i + 1];
        }
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let at = points.iter().position(|p| p.1 >= target);
        if let Some(i) = at {
            ap += prec[i];
        }
    }
    ap / 101.0
}

/// COCO-style evaluation. Detections are sorted by descending score, ties
/// by insertion order; classes without ground truths are excluded from all
/// means; an entirely empty ground-truth set yields an undefined report.
pub fn compute_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
    n_classes: usize,
) -> Result<ApReport> {
    if thresholds.is_empty() {
        return Err(Error::Eval("no IoU thresholds".into()));
    }
    if gts.is_empty() {
        return Ok(ApReport {
            ap: None,
            ap50: None,
            ap75: None,
            per_class: vec![None; n_classes],
        });
    }
    if let Some(d) = dets
        .iter()
        .find(|d| !d.score.is_finite() || d.label >= n_classes)
    {
        return Err(Error::Eval(format!(
            "bad detection (label {}, score {})",
            d.label, d.score
        )));
    }

    // ap[class][threshold]; None when the class has no ground truths.
    let mut per_class_thr: Vec<Option<Vec<f64>>> = vec![None; n_classes];
    for class in 0..n_classes {
        let mut gts_by_image: BTreeMap<u64, Vec<CenterBox>> = BTreeMap::new();
        let mut n_gt = 0usize;
        for gt in gts.iter().filter(|g| g.label == class) {
            gts_by_image.entry(gt.image_id).or_default().push(gt.cbox);
            n_gt += 1;
        }
        if n_gt == 0 {
            continue;
        }
        let mut class_dets: Vec<(u64, f64, CenterBox)> = dets
            .iter()
            .filter(|d| d.label == class)
            .map(|d| (d.image_id, d.score, d.cbox))
            .collect();
        class_dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let aps = thresholds
            .iter()
            .map(|&thr| {
                let pts = pr_points(&class_dets, &gts_by_image, n_gt, thr);
                interpolate_ap(&pts)
            })
            .collect();
        per_class_thr[class] = Some(aps);
    }

    let present: Vec<&Vec<f64>> = per_class_thr.iter().flatten().collect();
    if present.is_empty() {
        return Ok(ApReport {
            ap: None,
            ap50: None,
            ap75: None,
            per_class: vec![None; n_classes],
        });
    }
    let mean_at = |ti: usize| -> f64 {
        present.iter().map(|v| v[ti]).sum::<f64>() / present.len() as f64
    };
    let ap = present
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .sum::<f64>()
        / present.len() as f64;
    let find_thr = |t: f64| thresholds.iter().position(|&x| (x - t).abs() < 1e-9);
    Ok(ApReport {
        ap: Some(ap),
        ap50: find_thr(0.5).map(mean_at),
        ap75: find_thr(0.75).map(mean_at),
        per_class: per_class_thr
            .iter()
            .map(|o| o.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(gray);
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Head-average one branch's attention rows for a query and min-max scale
/// to bytes; a constant row maps to mid-gray 128.
pub fn attention_to_gray(
    maps: &Tensor<f64>,
    branch: usize,
    query: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<u8>, Vec<f64>)> {
    let s = maps.shape();
    if s.len() != 4 || s[0] != 2 {
        return Err(Error::Eval(format!(
            "attention maps must be [2,heads,N,HW], got {:?}",
            s
        )));
    }
    let (heads, n, hw) = (s[1], s[2], s[3]);
    if query >= n {
        return Err(Error::Eval(format!(
            "query index {query} out of range 0..{n}"
        )));
    }
    if h * w != hw {
        return Err(Error::Eval(format!("grid {h}x{w} does not cover {hw} keys")));
    }
    let mut avg = vec![0.0f64; hw];
    for head in 0..heads {
        let base = ((branch * heads + head) * n + query) * hw;
        for (i, a) in avg.iter_mut().enumerate() {
            *a += maps.data()[base + i];
        }
    }
    for a in avg.iter_mut() {
        *a /= heads as f64;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &avg {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let gray = if hi - lo < 1e-12 {
        vec![128u8; hw]
    } else {
        avg.iter()
            .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
            .collect()
    };
    Ok((gray, avg))
}

/// Export the head-averaged cls and loc maps of one query at one layer as
/// PGM files named `attn_{branch}_l{layer}_q{query}.pgm`. Returns the two
/// paths (cls, loc).
pub fn export_attention(
    maps: &Tensor<f64>,
    query: usize,
    layer: usize,
    h: usize,
    w: usize,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut paths = Vec::with_capacity(2);
    for (bi, bname) in ["cls", "loc"].iter().enumerate() {
        let (gray, _) = attention_to_gray(maps, bi, query, h, w)?;
        let path = out_dir.join(format!("attn_{bname}_l{layer}_q{query}.pgm"));
        write_pgm(&path, w, h, &gray)?;
        paths.push(path);
    }
    Ok((paths[0].clone(), paths[1].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> CenterBox {
        CenterBox::new(cx, cy, w, h)
    }

    fn gt(image_id: u64, label: usize, cbox: CenterBox) -> GroundTruth {
        GroundTruth {
            image_id,
            label,
            cbox,
        }
    }

    fn det(image_id: u64, label: usize, score: f64, cbox: CenterBox) -> Detection {
        Detection {
            image_id,
            label,
            score,
            cbox,
        }
    }

    #[test]
    fn exact_detection_scores_one() {
        let box0 = b(0.5, 0.5, 0.4, 0.4);
        let gts = [gt(0, 0, box0)];
        let dets = [det(0, 0, 1.0, box0)];
        let r = compute_ap(&dets, &gts, &coco_thresholds(), 1).unwrap();
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.ap50, Some(1.0));
    }

    #[test]
    fn no_detections_is_zero() {
        let gts = [gt(0, 0, b(0.5, 0.5, 0.4, 0.4))];
        let r = compute_ap(&[], &gts, &coco_thresholds(), 1).unwrap();
        assert_eq!(r.ap, Some(0.0));
    }

    #[test]
    fn empty_gt_is_undefined_not_zero() {
        let dets = [det(0, 0, 0.9, b(0.5, 0.5, 0.4, 0.4))];
        let r = compute_ap(&dets, &[], &coco_thresholds(), 2).unwrap();
        assert!(r.ap.is_none() && r.ap50.is_none());
        assert!(r.per_class.iter().all(|c| c.is_none()));
        assert!(r.to_json().contains("null"));
    }

    #[test]
    fn duplicate_ordering_hand_example() {
        // One GT; the exact detection plus a low-IoU second box on the same
        // object. With the good box scored higher AP50 = 1; swapping the
        // scores makes the first detection a miss, so AP50 = 0.5.
        let gt_box = b(0.5, 0.5, 0.4, 0.4);
        let near_box = b(0.66, 0.5, 0.4, 0.4); // IoU < 0.5 against gt_box
        assert!(iou(&gt_box, &near_box) < 0.5);
        let gts = [gt(0, 0, gt_box)];

        let dets = [det(0, 0, 0.9, gt_box), det(0, 0, 0.8, near_box)];
        let r = compute_ap(&dets, &gts, &[0.5], 1).unwrap();
        assert_eq!(r.ap50, Some(1.0));

        let dets = [det(0, 0, 0.9, near_box), det(0, 0, 0.8, gt_box)];
        let r = compute_ap(&dets, &gts, &[0.5], 1).unwrap();
        assert_eq!(r.ap50, Some(0.5));
    }

    #[test]
    fn score_transform_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let gts: Vec<GroundTruth> = (0..4)
            .map(|i| {
                gt(
                    i % 2,
                    (i % 2) as usize,
                    b(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2),
                )
            })
            .collect();
        let dets: Vec<Detection> = (0..8)
            .map(|i| {
                det(
                    i % 2,
                    (i % 2) as usize,
                    rng.gen_range(0.05..0.95),
                    b(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2),
                )
            })
            .collect();
        let r1 = compute_ap(&dets, &gts, &coco_thresholds(), 2).unwrap();
        // Strictly increasing transform of all scores.
        let dets2: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                score: 0.1 + 0.5 * d.score.powi(3),
                ..*d
            })
            .collect();
        let r2 = compute_ap(&dets2, &gts, &coco_thresholds(), 2).unwrap();
        assert_eq!(r1.ap, r2.ap);
        assert_eq!(r1.ap50, r2.ap50);
    }

    #[test]
    fn classes_without_gts_are_excluded() {
        let gts = [gt(0, 0, b(0.5, 0.5, 0.4, 0.4))];
        let dets = [
            det(0, 0, 0.9, b(0.5, 0.5, 0.4, 0.4)),
            det(0, 1, 0.99, b(0.1, 0.1, 0.1, 0.1)), // class 1 has no GT
        ];
        let r = compute_ap(&dets, &gts, &[0.5], 2).unwrap();
        assert_eq!(r.ap50, Some(1.0));
        assert_eq!(r.per_class[1], None);
    }

    #[test]
    fn uniform_attention_row_is_midgray() {
        let heads = 2;
        let maps = Tensor::from_fn(&[2, heads, 1, 6], |_| 1.0 / 6.0);
        let (gray, avg) = attention_to_gray(&maps, 0, 0, 2, 3).unwrap();
        assert_eq!(gray, vec![128u8; 6]);
        let sum: f64 = avg.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_hot_attention_is_single_white_pixel() {
        let hw = 12;
        let hot = 7usize; // row 1, col 3 of a 3x4 grid
        let maps = Tensor::from_fn(&[2, 1, 1, hw], |i| if i % hw == hot { 1.0 } else { 0.0 });
        let (gray, _) = attention_to_gray(&maps, 1, 0, 3, 4).unwrap();
        for (i, &g) in gray.iter().enumerate() {
            assert_eq!(g, if i == hot { 255 } else { 0 });
        }
    }

    #[test]
    fn export_writes_two_files() {
        let dir = std::env::temp_dir().join("sdd_eval_tests/export");
        let _ = std::fs::remove_dir_all(&dir);
        let maps = Tensor::from_fn(&[2, 2, 3, 6], |i| (i % 7) as f64 / 7.0);
        let (p1, p2) = export_attention(&maps, 2, 1, 2, 3, &dir).unwrap();
        for p in [&p1, &p2] {
            let bytes = std::fs::read(p).unwrap();
            assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
            assert_eq!(bytes.len(), "P5\n3 2\n255\n".len() + 6);
        }
        assert!(export_attention(&maps, 5, 0, 2, 3, &dir).is_err());
    }
}
