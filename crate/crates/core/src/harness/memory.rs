//! Transient-memory scaling of patch versus whole-image inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{forward_infer, InferMode, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct MemoryRow {
    pub mode: InferMode,
    pub side: usize,
    pub tiles: usize,
    pub transient_peak_bytes: usize,
}

/// Runs inference on random `side×side` images in both modes and records
/// the transient peak (input and output buffers excluded).
pub fn bench_memory(cfg: &ModelConfig, sides: &[usize], seed: u64) -> Result<Vec<MemoryRow>> {
    let params = ModelParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &side in sides {
        let image = Tensor::uniform(&[cfg.in_channels, side, side], 0.0, 1.0, &mut rng);
        for mode in [InferMode::Patch, InferMode::Global] {
            let out = forward_infer(&params, cfg, &image, mode)?;
            rows.push(MemoryRow {
                mode,
                side,
                tiles: out.report.tiles,
                transient_peak_bytes: out.report.transient_peak,
            });
        }
    }
    Ok(rows)
}

/// Peak ratio between the runs at `large` and `small` sides for `mode`.
pub fn growth(rows: &[MemoryRow], mode: InferMode, small: usize, large: usize) -> Option<f64> {
    let peak = |side| {
        rows.iter()
            .find(|r| r.mode == mode && r.side == side)
            .map(|r| r.transient_peak_bytes as f64)
    };
    Some(peak(large)? / peak(small)?)
}
