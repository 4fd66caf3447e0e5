//! `sd-detr` command line: data generation, training, evaluation, the
//! five-arm ablation, the verification suite, and attention-map export.
//!
//! Every error path exits nonzero with a single `error: ...` line on
//! stderr. `SD_DETR_THREADS` caps worker threads.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sd_detr_core::checkpoint::Checkpoint;
use sd_detr_core::dataset::{self, Dataset, SceneSpec};
use sd_detr_core::eval::export_attention;
use sd_detr_core::harness::{ablate, evaluate_model, run_verify, train, RunConfig};
use sd_detr_core::model::Model;
use sd_detr_core::tensor::Tensor;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sd-detr", version, about = "Desk-scale spatially decoupled DETR")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shapes dataset.
    GenData {
        /// Scene spec file (key=value); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of images.
        #[arg(long)]
        count: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset; prints the AP report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for ap_report.json (default: alongside nothing, cwd).
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Debug: echo ground truth as detections (perfect-detector sanity).
        #[arg(long)]
        debug_echo_gt: bool,
    },
    /// Run the five ablation arms over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: usize,
    },
    /// Run the built-in property suite (gradchecks, oracles, invariants).
    Verify {
        /// Inject a wrong gradient; the gradcheck group must then fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Export per-branch cross-attention maps for one query and layer.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { spec, count, out } => {
            let spec = match spec {
                Some(p) => SceneSpec::from_file(&p)?,
                None => SceneSpec::default(),
            };
            let manifest = dataset::generate(&spec, count, &out)?;
            println!(
                "wrote {} images, {} annotations under {}",
                manifest.images.len(),
                manifest.annotations.len(),
                out.display()
            );
        }
        Cmd::Train { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let result = train(&cfg)?;
            println!(
                "trained {} steps; metrics: {}; final checkpoint: {}{}",
                cfg.steps,
                result.metrics_path.display(),
                result.final_checkpoint.display(),
                result
                    .final_ap50
                    .map(|v| format!("; final AP50 {v:.4}"))
                    .unwrap_or_default()
            );
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            debug_echo_gt,
        } => {
            let ckpt = Checkpoint::read(&checkpoint)?;
            let model = Model::<f32>::from_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let (report, _dets) = evaluate_model(&model, &ds, debug_echo_gt)?;
            let json = report.to_json();
            println!("{json}");
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("ap_report.json");
            std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
        }
        Cmd::Ablate { config, seeds } => {
            let cfg = RunConfig::from_file(&config)?;
            let result = ablate(&cfg, seeds)?;
            println!(
                "{}",
                std::fs::read_to_string(&result.summary_path)
                    .unwrap_or_else(|_| "ablation finished".into())
            );
            println!("records: {}", result.csv_path.display());
        }
        Cmd::Verify { negative_control } => {
            let report = run_verify(negative_control);
            print!("{}", report.render());
            if !report.all_passed() {
                bail!("verification failed");
            }
        }
        Cmd::ExportAttn {
            checkpoint,
            image,
            query,
            layer,
            out,
        } => {
            let ckpt = Checkpoint::read(&checkpoint)?;
            let model = Model::<f32>::from_checkpoint(&ckpt)?;
            let (w, h, rgb) = dataset::read_ppm(&image)?;
            let mut img = Tensor::<f32>::zeros(&[3, h, w]);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        img.data_mut()[(c * h + y) * w + x] =
                            rgb[(y * w + x) * 3 + c] as f32 / 255.0;
                    }
                }
            }
            let inf = model.infer_image(&img)?;
            if layer >= inf.cross_maps.len() {
                bail!(
                    "layer {layer} out of range: model has {} decoder layers",
                    inf.cross_maps.len()
                );
            }
            let (cls_path, loc_path) = export_attention(
                &inf.cross_maps[layer],
                query,
                layer,
                inf.feat_h,
                inf.feat_w,
                &out,
            )?;
            println!("{}", cls_path.display());
            println!("{}", loc_path.display());
        }
    }
    Ok(())
}
