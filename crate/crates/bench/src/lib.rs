//! Shared fixtures for the criterion benches.

use tcm_core::autodiff::Array;
use tcm_core::config::TrainConfig;
use tcm_core::data::{Builtin, Dataset};
use tcm_core::net::{init_params, CmParams};
use tcm_core::rng;
use tcm_core::train::TcmBatch;

pub const DATA_N: usize = 2048;

pub fn ring8() -> Dataset {
    Dataset::builtin(Builtin::Ring8, DATA_N, 2, 0, 0.5).expect("builtin dataset")
}

/// Standard normal `rows × cols` matrix.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array {
    let mut r = rng::stream(seed, "bench", 0);
    Array::matrix(rows, cols, rng::normals(&mut r, rows * cols)).expect("shape")
}

/// Default-architecture network and config.
pub fn network() -> (TrainConfig, CmParams) {
    let cfg = TrainConfig::default();
    let p = init_params(0, &cfg.arch, cfg.coeff()).expect("valid architecture");
    (cfg, p)
}

/// A second-stage batch at the default batch size.
pub fn tcm_batch(cfg: &TrainConfig, data: &Dataset) -> TcmBatch {
    tcm_core::train::trainer::stage2_batch(cfg, data, 1).expect("batch")
}
