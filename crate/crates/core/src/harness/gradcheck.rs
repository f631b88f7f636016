//! End-to-end finite-difference check of the whole training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::model::{forward_train, AblationFlags, BackboneConfig, BoundParams, ModelConfig, ModelParams};
use crate::tensor::{analytic_grads, max_relative_error_with_floor, numeric_grads, ops, Tensor};
use crate::tiling::{downsample_global, extract_patch, plan_grid, TileGrid};

pub const TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-4;
/// Gradients this small are below the finite-difference round-off of an
/// O(1) loss and are compared absolutely.
const FLOOR: f64 = 1e-6;
/// Inputs are redrawn until every relu pre-activation is at least this far
/// from the kink, so no central difference straddles it.
const KINK_MARGIN: f64 = 20.0 * EPSILON;
const MAX_DRAWS: usize = 64;

/// Patch 8, `d_model` 4, two classes, a 2×2 global feature grid, on a
/// 12×12 image (four overlapping tiles).
pub fn micro_config(d_model: usize) -> ModelConfig {
    let backbone = |pool: bool| BackboneConfig {
        stage_channels: vec![3],
        pool: vec![pool],
        d_model,
    };
    ModelConfig {
        in_channels: 3,
        num_classes: 2,
        patch: 8,
        overlap: 4,
        global_size: 4,
        global_backbone: backbone(true),
        local_backbone: backbone(false),
        flags: AblationFlags {
            use_self_attn: true,
            use_mask: true,
        },
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub d_model: usize,
    pub num_scalars: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub per_param: Vec<ParamError>,
    pub passed: bool,
}

/// Test hook: scales one analytic gradient entry before comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct Corruption {
    pub param: usize,
    pub index: usize,
    pub factor: f64,
}

pub fn run_gradcheck(cfg: &ModelConfig, seed: u64, corrupt: Option<Corruption>) -> Result<GradcheckReport> {
    cfg.validate()?;
    let size = cfg.patch + cfg.patch / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = plan_grid(size, size, cfg.patch, cfg.overlap)?;
    let params = ModelParams::init(cfg, seed)?;
    let mut image = None;
    for _ in 0..MAX_DRAWS {
        let candidate = Tensor::uniform(&[cfg.in_channels, size, size], 0.0, 1.0, &mut rng);
        if relu_margin(&params, cfg, &candidate, &grid)? >= KINK_MARGIN {
            image = Some(candidate);
            break;
        }
    }
    let image = image.ok_or_else(|| {
        Error::CheckFailed(format!("no kink-free input found in {MAX_DRAWS} draws"))
    })?;
    let labels: Vec<u8> = (0..size * size)
        .map(|_| rng.gen_range(0..cfg.num_classes) as u8)
        .collect();
    let labels = ClassMap::new(size, size, labels)?;
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let f = |tape: &crate::tensor::Tape, vars: &[crate::tensor::Var]| {
        let bound = BoundParams::from_vars(&params, vars)?;
        Ok(forward_train(tape, &bound, cfg, &image, &labels, &grid)?.loss)
    };
    let mut analytic = analytic_grads(&f, &inputs)?;
    if let Some(c) = corrupt {
        let t = analytic
            .get(c.param)
            .ok_or_else(|| Error::Usage(format!("no parameter #{}", c.param)))?;
        let mut data = t.to_vec();
        let slot = data
            .get_mut(c.index)
            .ok_or_else(|| Error::Usage(format!("no entry #{} in parameter #{}", c.index, c.param)))?;
        *slot = *slot * c.factor + c.factor;
        analytic[c.param] = Tensor::new(t.shape(), data)?;
    }
    let numeric = numeric_grads(&f, &inputs, EPSILON)?;

    let per_param: Vec<ParamError> = params
        .names()
        .zip(analytic.iter().zip(&numeric))
        .map(|(name, (a, n))| ParamError {
            name: name.to_string(),
            max_rel_error: max_relative_error_with_floor(
                std::slice::from_ref(a),
                std::slice::from_ref(n),
                FLOOR,
            ),
        })
        .collect();
    let worst = per_param
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("model has parameters");
    Ok(GradcheckReport {
        d_model: cfg.d_model(),
        num_scalars: params.num_scalars(),
        max_rel_error: worst.max_rel_error,
        worst: worst.name.clone(),
        passed: worst.max_rel_error < TOLERANCE,
        per_param,
    })
}

/// Smallest |pre-activation| over every backbone relu for this input.
fn relu_margin(params: &ModelParams, cfg: &ModelConfig, image: &Tensor, grid: &TileGrid) -> Result<f64> {
    let mut inputs = vec![("global", &cfg.global_backbone, downsample_global(image, cfg.global_size)?)];
    for p in 0..grid.len() {
        inputs.push(("local", &cfg.local_backbone, extract_patch(image, grid, p)?));
    }
    let mut margin = f64::INFINITY;
    for (prefix, bb, mut x) in inputs {
        for (s, &pool) in bb.pool.iter().enumerate() {
            let w = params.get(&format!("{prefix}.stage{s}.weight")).expect("layout");
            let b = params.get(&format!("{prefix}.stage{s}.bias")).expect("layout");
            let pre = ops::add_channel_bias(&ops::conv2d(&x, w, 1)?, b)?;
            margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
            x = ops::relu(&pre);
            if pool {
                x = ops::avg_pool2d(&x, 2)?;
            }
        }
    }
    Ok(margin)
}
