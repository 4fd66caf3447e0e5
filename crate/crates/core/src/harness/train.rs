//! Seeded, resumable training loop with batch-parallel gradient
//! computation. All stochastic choices (batch sampling, dropout masks)
//! derive from `(seed, step, slot)`, so a resumed run replays an
//! uninterrupted one exactly and worker-thread count never changes results.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{compute_ap, coco_thresholds, ApReport, Detection, GroundTruth};
use crate::graph::Graph;
use crate::harness::{mix_seed, worker_threads, AdamW, RunConfig};
use crate::loss::{total_loss, LossConfig};
use crate::matching::GtObject;
use crate::model::Model;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Fraction of the step budget after which the learning rate drops 10x.
pub const LR_DROP_AT: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub total: f32,
    pub cls: f32,
    pub l1: f32,
    pub giou: f32,
    pub mini: f32,
    pub ap50: Option<f64>,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub fn csv_header() -> &'static str {
        "step,total_loss,cls_loss,l1_loss,giou_loss,mini_loss,ap50,wall_ms"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.total,
            self.cls,
            self.l1,
            self.giou,
            self.mini,
            self.ap50.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_ms
        )
    }
}

pub struct TrainResult {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub final_ap50: Option<f64>,
}

struct ImageGrad {
    total: f64,
    cls: f64,
    l1: f64,
    giou: f64,
    mini: f64,
    grads: Vec<Option<Tensor<f32>>>,
}

fn image_loss(
    model: &Model<f32>,
    image: &Tensor<f32>,
    gts: &[GtObject],
    dropout_seed: u64,
) -> Result<ImageGrad> {
    let mut g = Graph::for_training(dropout_seed);
    model.store.install(&mut g, true)?;
    let fwd = model.forward_image(&mut g, image)?;
    let cfg = LossConfig {
        alpha: model.cfg.alpha,
        beta: model.cfg.beta,
        gamma: model.cfg.gamma,
        repeat: model.cfg.repeat_r,
        use_alignment: model.cfg.enable_tal,
    };
    let (loss, breakdown) = total_loss(&mut g, &fwd.layers, &fwd.mini, gts, &cfg)?;
    g.backward(loss)?;
    let grads = (0..model.store.len())
        .map(|id| g.grad(id).cloned())
        .collect();
    let layer_sum = |f: fn(&crate::loss::LayerTerms) -> f64| -> f64 {
        breakdown.layers.iter().map(f).sum()
    };
    Ok(ImageGrad {
        total: breakdown.total,
        cls: layer_sum(|t| t.cls),
        l1: layer_sum(|t| t.l1),
        giou: layer_sum(|t| t.giou),
        mini: breakdown.mini.total(),
        grads,
    })
}

fn annotation_gts(ds: &Dataset, index: usize) -> Vec<GtObject> {
    ds.annotations[index]
        .objects
        .iter()
        .map(|o| GtObject {
            label: o.label,
            cbox: o.cbox,
        })
        .collect()
}

/// Per-query, per-class detections from the final decoder layer.
pub fn detections_for_image(
    model: &Model<f32>,
    ds: &Dataset,
    index: usize,
) -> Result<Vec<Detection>> {
    let image = ds.load_image::<f32>(index)?;
    let inf = model.infer_image(&image)?;
    let logits = inf.layer_logits.last().expect("decoder has layers");
    let boxes = inf.layer_boxes.last().expect("decoder has layers");
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let image_id = ds.images[index].id;
    let mut out = Vec::with_capacity(n * k);
    for q in 0..n {
        for c in 0..k {
            let score = 1.0 / (1.0 + (-logits.at2(q, c)).exp());
            out.push(Detection {
                image_id,
                label: c,
                score,
                cbox: boxes[q],
            });
        }
    }
    Ok(out)
}

fn dataset_gts(ds: &Dataset) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for ann in &ds.annotations {
        for o in &ann.objects {
            out.push(GroundTruth {
                image_id: ann.image_id,
                label: o.label,
                cbox: o.cbox,
            });
        }
    }
    out
}

/// Run the model over a dataset and score it; `echo_gt` replaces the model's
/// detections with the ground truth itself (perfect-detector sanity path).
pub fn evaluate_model(
    model: &Model<f32>,
    ds: &Dataset,
    echo_gt: bool,
) -> Result<(ApReport, Vec<Detection>)> {
    let gts = dataset_gts(ds);
    let dets: Vec<Detection> = if echo_gt {
        gts.iter()
            .map(|g| Detection {
                image_id: g.image_id,
                label: g.label,
                score: 1.0,
                cbox: g.cbox,
            })
            .collect()
    } else {
        let mut all = Vec::new();
        for i in 0..ds.len() {
            all.extend(detections_for_image(model, ds, i)?);
        }
        all
    };
    let report = compute_ap(&dets, &gts, &coco_thresholds(), model.cfg.classes)?;
    Ok((report, dets))
}

/// Deterministic batch for a step: indices drawn from a per-step generator.
fn batch_indices(seed: u64, step: usize, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, step as u64, 0xBA7C4]));
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

pub fn train(cfg: &RunConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let train_ds = Dataset::load(&cfg.train_data)?;
    let val_ds = Dataset::load(&cfg.val_data)?;
    if train_ds.is_empty() {
        return Err(Error::Train("training dataset is empty".into()));
    }
    let needed = train_ds.max_objects() * cfg.model.repeat_r;
    if needed > cfg.model.queries {
        return Err(Error::Config(format!(
            "dataset has up to {} objects; repeated {}x they exceed {} queries — increase n_queries",
            train_ds.max_objects(),
            cfg.model.repeat_r,
            cfg.model.queries
        )));
    }

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;

    let (mut model, mut opt, start_step) = match &cfg.resume {
        Some(path) => {
            let ckpt = crate::checkpoint::Checkpoint::read(path)?;
            let model = Model::<f32>::from_checkpoint(&ckpt)?;
            let mut opt = AdamW::new(&model.store, cfg.weight_decay);
            opt.restore(&model.store, &ckpt)?;
            let step: usize = ckpt
                .config_value("train_step")
                .ok_or_else(|| Error::Checkpoint("missing train_step".into()))?
                .parse()
                .map_err(|_| Error::Checkpoint("bad train_step".into()))?;
            (model, opt, step)
        }
        None => {
            let model = Model::<f32>::build(&cfg.model)?;
            let opt = AdamW::new(&model.store, cfg.weight_decay);
            (model, opt, 0)
        }
    };
    if start_step >= cfg.steps {
        return Err(Error::Train(format!(
            "resume step {start_step} is past the {}-step budget",
            cfg.steps
        )));
    }

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    writeln!(metrics, "{}", MetricsRow::csv_header())
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let seed = cfg.model.seed;
    let workers = worker_threads().min(cfg.batch_size).max(1);
    let started = Instant::now();
    let mut rows = Vec::with_capacity(cfg.steps - start_step);
    let mut final_ap50 = None;

    for step in start_step..cfg.steps {
        let indices = batch_indices(seed, step, cfg.batch_size, train_ds.len());
        let images: Vec<Tensor<f32>> = indices
            .iter()
            .map(|&i| train_ds.load_image::<f32>(i))
            .collect::<Result<_>>()?;
        let gts: Vec<Vec<GtObject>> = indices.iter().map(|&i| annotation_gts(&train_ds, i)).collect();

        // Each batch slot computes independently; merge in slot order.
        let mut slots: Vec<Option<Result<ImageGrad>>> = (0..cfg.batch_size).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for worker in 0..workers {
                let images = &images;
                let gts = &gts;
                let model = &model;
                handles.push(scope.spawn(move || {
                    let mut mine = Vec::new();
                    let mut slot = worker;
                    while slot < images.len() {
                        let dropout_seed = mix_seed(&[seed, step as u64, slot as u64, 0xD0]);
                        mine.push((
                            slot,
                            image_loss(model, &images[slot], &gts[slot], dropout_seed),
                        ));
                        slot += workers;
                    }
                    mine
                }));
            }
            for h in handles {
                for (slot, res) in h.join().expect("worker panicked") {
                    slots[slot] = Some(res);
                }
            }
        });

        let inv_b = 1.0 / cfg.batch_size as f32;
        let mut acc: Vec<Option<Tensor<f32>>> = (0..model.store.len()).map(|_| None).collect();
        let (mut total, mut cls, mut l1, mut giou, mut mini) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (slot, s) in slots.into_iter().enumerate() {
            let ig = s.expect("slot filled").map_err(|e| {
                Error::Train(format!(
                    "step {step}, image id {} (slot {slot}): {e}",
                    train_ds.images[indices[slot]].id
                ))
            })?;
            total += ig.total;
            cls += ig.cls;
            l1 += ig.l1;
            giou += ig.giou;
            mini += ig.mini;
            for (id, grad) in ig.grads.into_iter().enumerate() {
                if let Some(gt) = grad {
                    match &mut acc[id] {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(gt.data()) {
                                *x += *y * inv_b;
                            }
                        }
                        slot_ref => {
                            let mut scaled = gt;
                            for x in scaled.data_mut() {
                                *x *= inv_b;
                            }
                            *slot_ref = Some(scaled);
                        }
                    }
                }
            }
        }
        let batch_total = (total / cfg.batch_size as f64) as f32;
        if !batch_total.is_finite() {
            let ids: Vec<String> = indices
                .iter()
                .map(|&i| train_ds.images[i].id.to_string())
                .collect();
            return Err(Error::Train(format!(
                "non-finite loss at step {step}; batch image ids [{}]",
                ids.join(", ")
            )));
        }

        let lr_now = if (step as f64) >= LR_DROP_AT * cfg.steps as f64 {
            cfg.lr * 0.1
        } else {
            cfg.lr
        };
        opt.apply(&mut model.store, &acc, lr_now);

        let done = step + 1;
        let eval_now = done % cfg.eval_interval == 0 || done == cfg.steps;
        let ap50 = if eval_now {
            let (report, _) = evaluate_model(&model, &val_ds, false)?;
            final_ap50 = report.ap50;
            report.ap50
        } else {
            None
        };
        let row = MetricsRow {
            step: done,
            total: batch_total,
            cls: (cls / cfg.batch_size as f64) as f32,
            l1: (l1 / cfg.batch_size as f64) as f32,
            giou: (giou / cfg.batch_size as f64) as f32,
            mini: (mini / cfg.batch_size as f64) as f32,
            ap50,
            wall_ms: started.elapsed().as_millis(),
        };
        writeln!(metrics, "{}", row.to_csv())
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps) {
            eprintln!(
                "step {done}/{} loss {:.4}{}",
                cfg.steps,
                row.total,
                row.ap50
                    .map(|v| format!(" ap50 {v:.4}"))
                    .unwrap_or_default()
            );
        }
        rows.push(row);

        if done % cfg.checkpoint_interval == 0 && done != cfg.steps {
            save_checkpoint(&model, &opt, cfg, done, &cfg.out_dir.join(format!("ckpt_step{done}.ckpt")))?;
        }
    }

    let final_path = cfg.out_dir.join("final.ckpt");
    save_checkpoint(&model, &opt, cfg, cfg.steps, &final_path)?;
    Ok(TrainResult {
        rows,
        metrics_path,
        final_checkpoint: final_path,
        final_ap50,
    })
}

fn save_checkpoint(
    model: &Model<f32>,
    opt: &AdamW,
    cfg: &RunConfig,
    step: usize,
    path: &std::path::Path,
) -> Result<()> {
    let ckpt = model.to_checkpoint(
        opt.to_records(&model.store),
        vec![
            ("train_step".into(), step.to_string()),
            ("optim_t".into(), opt.t.to_string()),
            ("lr".into(), cfg.lr.to_string()),
            ("weight_decay".into(), cfg.weight_decay.to_string()),
        ],
    );
    ckpt.write(path)
}
