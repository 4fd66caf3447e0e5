//! Training, evaluation, ablation, and verification harness behind the CLI.

pub mod ablate;
pub mod config;
pub mod optim;
pub mod train;
pub mod verify;

pub use ablate::{ablate, AblateResult, ABLATION_ARMS};
pub use config::RunConfig;
pub use optim::AdamW;
pub use train::{detections_for_image, evaluate_model, train, MetricsRow, TrainResult};
pub use verify::{run_verify, VerifyReport};

/// Worker-thread cap: `SD_DETR_THREADS` if set, else available parallelism.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("SD_DETR_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Splitmix-style mixing for deriving per-step / per-slot seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut x = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}
