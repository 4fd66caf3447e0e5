use sd_detr_core::checkpoint::Checkpoint;
use sd_detr_core::dataset::Dataset;
use sd_detr_core::eval::{compute_ap, coco_thresholds};
use sd_detr_core::geometry::iou;
use sd_detr_core::harness::{evaluate_model, detections_for_image};
use sd_detr_core::model::Model;
use std::path::Path;

fn main() {
    let ckpt = Checkpoint::read(Path::new("/tmp/smoke/run2/final.ckpt")).unwrap();
    let model = Model::<f32>::from_checkpoint(&ckpt).unwrap();
    let ds = Dataset::load(Path::new("/tmp/smoke/val")).unwrap();
    let (report, dets) = evaluate_model(&model, &ds, false).unwrap();
    println!("AP {:?} AP50 {:?} AP75 {:?}", report.ap, report.ap50, report.ap75);
    println!("per-class {:?}", report.per_class);

    // Per-GT: best detection IoU; count of confident (>0.3) detections near it.
    let mut total_gt = 0;
    let mut gt_covered_50 = 0;
    let mut best_ious = Vec::new();
    let mut confident_per_gt = Vec::new();
    for ann in &ds.annotations {
        for o in &ann.objects {
            total_gt += 1;
            let mut best = 0.0f64;
            let mut confident = 0;
            for d in dets.iter().filter(|d| d.image_id == ann.image_id && d.label == o.label) {
                let ov = iou(&d.cbox, &o.cbox);
                if ov > best { best = ov; }
                if d.score > 0.3 && ov >= 0.5 { confident += 1; }
            }
            if best >= 0.5 { gt_covered_50 += 1; }
            best_ious.push(best);
            confident_per_gt.push(confident);
        }
    }
    best_ious.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("GTs: {total_gt}; coverable at IoU>=0.5: {gt_covered_50}");
    println!("best-IoU percentiles: p10 {:.3} p50 {:.3} p90 {:.3}",
        best_ious[total_gt/10], best_ious[total_gt/2], best_ious[9*total_gt/10]);
    let dup_counts: Vec<usize> = confident_per_gt.iter().copied().collect();
    let avg_dup: f64 = dup_counts.iter().sum::<usize>() as f64 / total_gt as f64;
    println!("confident (score>0.3, IoU>=0.5) detections per GT: avg {avg_dup:.2}");

    // Score distribution of TP-capable vs junk detections.
    let mut high = 0; let mut mid = 0;
    for d in &dets {
        if d.score > 0.5 { high += 1; } else if d.score > 0.2 { mid += 1; }
    }
    println!("dets total {} | score>0.5: {high} | 0.2-0.5: {mid}", dets.len());

    // AP at each threshold
    let gts: Vec<_> = ds.annotations.iter().flat_map(|a| a.objects.iter().map(move |o| sd_detr_core::eval::GroundTruth { image_id: a.image_id, label: o.label, cbox: o.cbox })).collect();
    for thr in coco_thresholds() {
        let r = compute_ap(&dets, &gts, &[thr], 3).unwrap();
        println!("AP@{:.2} = {:.3}", thr, r.ap.unwrap_or(0.0));
    }
    // One image detail
    let i = 0;
    let ann = &ds.annotations[i];
    println!("--- image {} gts:", ann.image_id);
    for o in &ann.objects { println!("  gt label {} box {:?}", o.label, o.cbox); }
    let mut d0 = detections_for_image(&model, &ds, i).unwrap();
    d0.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    for d in d0.iter().take(8) {
        println!("  det label {} score {:.3} box ({:.2},{:.2},{:.2},{:.2})", d.label, d.score, d.cbox.cx, d.cbox.cy, d.cbox.w, d.cbox.h);
    }
}
