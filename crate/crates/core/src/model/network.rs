//! Forward passes: training (on the tape, whole image at once) and
//! inference (tile by tile with bounded live memory).

use serde::Serialize;

use super::loss::coupling_on_tape;
use super::params::{BoundParams, ModelParams};
use super::{BackboneConfig, LossBreakdown, ModelConfig};
use crate::attention::{
    glca_fuse, patch_footprint, project_qkv, scaled_dot_attention, self_attention,
    AttentionMask, AttentionWeights, StreamingAttention, TokenOrigin, TokenSeq,
};
use crate::error::{Error, Result};
use crate::ledger::AllocationLedger;
use crate::metrics::ClassMap;
use crate::tensor::{ops::IGNORE_LABEL, Tape, Tensor, Var};
use crate::tiling::{
    downsample_global, extract_label_patch, extract_patch, nearest_resize_labels, plan_grid,
    TileGrid,
};

/// Conv stages then a 1×1 projection to `d_model` channels.
pub fn backbone_forward(
    tape: &Tape,
    x: &Var,
    params: &BoundParams,
    prefix: &str,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let mut h = x.clone();
    for (s, &pool) in cfg.pool.iter().enumerate() {
        let w = params.get(&format!("{prefix}.stage{s}.weight"))?;
        let b = params.get(&format!("{prefix}.stage{s}.bias"))?;
        h = tape.conv2d(&h, w, 1)?;
        h = tape.add_channel_bias(&h, b)?;
        h = tape.relu(&h);
        if pool {
            h = tape.avg_pool2d(&h, 2)?;
        }
    }
    let w = params.get(&format!("{prefix}.proj.weight"))?;
    let b = params.get(&format!("{prefix}.proj.bias"))?;
    let h = tape.conv2d(&h, w, 0)?;
    tape.add_channel_bias(&h, b)
}

fn attention_weights(params: &BoundParams, prefix: &str) -> Result<AttentionWeights> {
    AttentionWeights::new(
        params.get(&format!("{prefix}.wq"))?.clone(),
        params.get(&format!("{prefix}.wk"))?.clone(),
        params.get(&format!("{prefix}.wv"))?.clone(),
    )
}

/// Backbone, flatten to tokens, then (optionally) residual self-attention.
fn branch_tokens(
    tape: &Tape,
    input: &Tensor,
    params: &BoundParams,
    cfg: &ModelConfig,
    origin: TokenOrigin,
) -> Result<TokenSeq> {
    let (prefix, bb) = match origin {
        TokenOrigin::Global => ("global", &cfg.global_backbone),
        TokenOrigin::LocalPatch(_) => ("local", &cfg.local_backbone),
    };
    let map = backbone_forward(tape, &Var::constant(input.clone()), params, prefix, bb)?;
    let seq = TokenSeq::from_map(tape, &map, origin)?;
    if !cfg.flags.use_self_attn {
        return Ok(seq);
    }
    let w = attention_weights(params, &format!("{prefix}.sa"))?;
    let refined = self_attention(tape, &seq, &w)?;
    seq.with_tokens(tape.add(&seq.tokens, &refined.tokens)?)
}

fn global_tokens(tape: &Tape, image: &Tensor, params: &BoundParams, cfg: &ModelConfig) -> Result<TokenSeq> {
    let small = downsample_global(image, cfg.global_size)?;
    branch_tokens(tape, &small, params, cfg, TokenOrigin::Global)
}

fn local_tokens(
    tape: &Tape,
    image: &Tensor,
    grid: &TileGrid,
    p: usize,
    params: &BoundParams,
    cfg: &ModelConfig,
) -> Result<TokenSeq> {
    let patch = extract_patch(image, grid, p)?;
    branch_tokens(tape, &patch, params, cfg, TokenOrigin::LocalPatch(p))
}

/// Global-map sample coordinates for the centres of a patch's local cells.
fn global_coords(origin: usize, patch: usize, cells: usize, image: usize, global: usize) -> Vec<f64> {
    (0..cells)
        .map(|i| {
            let y = origin as f64 + (i as f64 + 0.5) * patch as f64 / cells as f64;
            y * global as f64 / image as f64 - 0.5
        })
        .collect()
}

fn conv_head(tape: &Tape, x: &Var, params: &BoundParams, name: &str, padding: usize) -> Result<Var> {
    let y = tape.conv2d(x, params.get(&format!("{name}.weight"))?, padding)?;
    tape.add_channel_bias(&y, params.get(&format!("{name}.bias"))?)
}

/// Aggregation for one tile: the fused global map sampled over the tile,
/// concatenated with the fused local map, through the 3×3 aggregation
/// conv, upsampled to tile pixels.
fn aggregate_patch(
    tape: &Tape,
    fused_global: &Var,
    fused_local: &Var,
    grid: &TileGrid,
    p: usize,
    params: &BoundParams,
) -> Result<Var> {
    let (_, gh, gw) = fused_global.value().chw()?;
    let (_, lh, lw) = fused_local.value().chw()?;
    let (r0, c0) = grid.origin(p)?;
    let rows = global_coords(r0, grid.patch, lh, grid.image_h, gh);
    let cols = global_coords(c0, grid.patch, lw, grid.image_w, gw);
    let crop = tape.resample(fused_global, &rows, &cols)?;
    let cat = tape.concat_channels(&[&crop, fused_local])?;
    let logits = conv_head(tape, &cat, params, "agg", 1)?;
    tape.bilinear_resize(&logits, grid.patch, grid.patch)
}

fn patch_masks(grid: &TileGrid, global_spatial: (usize, usize)) -> Result<Vec<Vec<bool>>> {
    (0..grid.len())
        .map(|p| patch_footprint(grid, p, global_spatial, true))
        .collect()
}

/// Per-branch deep features and segmentation logits of one forward pass.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    /// Fused global features, `d×gh×gw`.
    pub x_glb: Tensor,
    /// Fused local features per tile, `d×lh×lw`.
    pub x_loc: Vec<Tensor>,
    /// Global-branch logits, `K×gh×gw`.
    pub s_glb: Tensor,
    /// Local-branch logits per tile, `K×lh×lw`.
    pub s_loc: Vec<Tensor>,
    /// Aggregated logits over the whole image, `K×H×W`.
    pub s_agg: Tensor,
}

pub struct TrainForward {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub outputs: BranchOutputs,
}

/// Full training forward pass over one image and its labels.
pub fn forward_train(
    tape: &Tape,
    params: &BoundParams,
    cfg: &ModelConfig,
    image: &Tensor,
    labels: &ClassMap,
    grid: &TileGrid,
) -> Result<TrainForward> {
    let (_, h, w) = image.chw()?;
    if (labels.h, labels.w) != (h, w) || (grid.image_h, grid.image_w) != (h, w) {
        return Err(Error::dim(format!(
            "image {h}×{w}, labels {}×{}, grid {}×{}",
            labels.h, labels.w, grid.image_h, grid.image_w
        )));
    }
    if grid.patch != cfg.patch {
        return Err(Error::Config(format!(
            "grid patch {} differs from model patch {}",
            grid.patch, cfg.patch
        )));
    }
    let k = cfg.num_classes;
    if let Some(&bad) = labels
        .data
        .iter()
        .find(|&&l| l != IGNORE_LABEL && usize::from(l) >= k)
    {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }

    let global = global_tokens(tape, image, params, cfg)?;
    let locals: Vec<TokenSeq> = (0..grid.len())
        .map(|p| local_tokens(tape, image, grid, p, params, cfg))
        .collect::<Result<_>>()?;

    let fg = attention_weights(params, "fuse.global")?;
    let fl = attention_weights(params, "fuse.local")?;
    let (q_g, k_g, v_g) = project_qkv(tape, &global, &fg)?;
    let mut q_parts = Vec::new();
    let mut k_parts = Vec::new();
    let mut v_parts = Vec::new();
    for l in &locals {
        let (q, k, v) = project_qkv(tape, l, &fl)?;
        q_parts.push(q);
        k_parts.push(k);
        v_parts.push(v);
    }
    let cat = |xs: &[Var]| tape.concat_channels(&xs.iter().collect::<Vec<_>>());
    let (q_l, k_l, v_l) = (cat(&q_parts)?, cat(&k_parts)?, cat(&v_parts)?);

    let n_l = locals[0].len();
    let (mask_lg, mask_gl) = if cfg.flags.use_mask {
        let rows: Vec<bool> = patch_masks(grid, global.spatial)?
            .iter()
            .flat_map(|fp| std::iter::repeat_n(fp.iter().copied(), n_l).flatten())
            .collect();
        let lg = AttentionMask::new(n_l * grid.len(), global.len(), rows)?;
        let gl = lg.transpose()?;
        (Some(lg), Some(gl))
    } else {
        (None, None)
    };
    let (fused_g, fused_l) = glca_fuse(
        tape,
        &q_g,
        &k_l,
        &v_l,
        &q_l,
        &k_g,
        &v_g,
        mask_gl.as_ref(),
        mask_lg.as_ref(),
    )?;

    let fused_global = global.with_tokens(fused_g)?.to_map(tape)?;
    let mut fused_locals = Vec::with_capacity(grid.len());
    for (p, l) in locals.iter().enumerate() {
        let rows = tape.slice_leading(&fused_l, p * n_l, (p + 1) * n_l)?;
        fused_locals.push(l.with_tokens(rows)?.to_map(tape)?);
    }

    let patch_logits: Vec<Var> = fused_locals
        .iter()
        .enumerate()
        .map(|(p, fl)| aggregate_patch(tape, &fused_global, fl, grid, p, params))
        .collect::<Result<_>>()?;
    let s_agg = tape.stitch_mean(&patch_logits.iter().collect::<Vec<_>>(), &grid.origins, h, w)?;
    let main = tape.focal_loss(&s_agg, &labels.data, cfg.gamma)?;

    let g = cfg.global_size;
    let s_glb = conv_head(tape, &fused_global, params, "head_global", 0)?;
    let s_glb_up = tape.bilinear_resize(&s_glb, g, g)?;
    let glb_targets = nearest_resize_labels(&labels.data, h, w, g, g);
    let aux_global = tape.focal_loss(&s_glb_up, &glb_targets, cfg.gamma)?;

    let mut s_loc = Vec::with_capacity(grid.len());
    let mut aux_local: Option<Var> = None;
    for (p, fl) in fused_locals.iter().enumerate() {
        let logits = conv_head(tape, fl, params, "head_local", 0)?;
        let up = tape.bilinear_resize(&logits, grid.patch, grid.patch)?;
        let targets = extract_label_patch(&labels.data, grid, p, IGNORE_LABEL)?;
        let l = tape.focal_loss(&up, &targets, cfg.gamma)?;
        aux_local = Some(match aux_local {
            None => l,
            Some(acc) => tape.add(&acc, &l)?,
        });
        s_loc.push(logits.value().clone());
    }
    let aux_local = tape.scale(&aux_local.expect("grid has tiles"), 1.0 / grid.len() as f64);

    let upsampled: Vec<Var> = fused_locals
        .iter()
        .map(|fl| tape.bilinear_resize(fl, grid.patch, grid.patch))
        .collect::<Result<_>>()?;
    let x_loc_full = tape.stitch_mean(&upsampled.iter().collect::<Vec<_>>(), &grid.origins, h, w)?;
    let coupling = coupling_on_tape(tape, &x_loc_full, &fused_global)?;

    let total = tape.add(&main, &aux_global)?;
    let total = tape.add(&total, &aux_local)?;
    let weighted = tape.scale(&coupling, cfg.lambda);
    let total = tape.add(&total, &weighted)?;

    let breakdown = LossBreakdown {
        main: main.value().item(),
        aux_global: aux_global.value().item(),
        aux_local: aux_local.value().item(),
        coupling: coupling.value().item(),
        lambda: cfg.lambda,
        total: total.value().item(),
    };
    let outputs = BranchOutputs {
        x_glb: fused_global.value().clone(),
        x_loc: fused_locals.iter().map(|v| v.value().clone()).collect(),
        s_glb: s_glb.value().clone(),
        s_loc,
        s_agg: s_agg.value().clone(),
    };
    Ok(TrainForward {
        loss: total,
        breakdown,
        outputs,
    })
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Result<ClassMap> {
    let (k, h, w) = logits.chw()?;
    let n = h * w;
    let z = logits.data();
    let data = (0..n)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if z[c * n + px] > z[best * n + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    ClassMap::new(h, w, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    /// Overlapping tiles of the configured patch size.
    Patch,
    /// The whole image as a single full-resolution tile.
    Global,
}

impl std::str::FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(InferMode::Patch),
            "global" => Ok(InferMode::Global),
            other => Err(Error::Config(format!("mode must be patch or global, got {other}"))),
        }
    }
}

/// Transient tensor bytes per inference phase, above what was live when
/// inference started (the input image).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InferReport {
    pub tiles: usize,
    pub global_branch_peak: usize,
    pub global_fusion_peak: usize,
    pub local_fusion_peak: usize,
    pub transient_peak: usize,
}

pub struct InferOutput {
    pub classes: ClassMap,
    /// Aggregated logits, `K×H×W`.
    pub logits: Tensor,
    pub report: InferReport,
}

struct Phase {
    baseline: usize,
}

impl Phase {
    fn run<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<(T, usize)> {
        AllocationLedger::reset_peak();
        let out = f()?;
        let peak = AllocationLedger::snapshot().peak.saturating_sub(self.baseline);
        Ok((out, peak))
    }
}

/// Prediction without a tape. Patch mode streams tiles twice: first to
/// fuse local keys/values into the global queries with an online softmax,
/// then to fuse and aggregate each tile, so live memory depends on the
/// tile and global sizes only.
pub fn forward_infer(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    mode: InferMode,
) -> Result<InferOutput> {
    let (_, h, w) = image.chw()?;
    let grid = match mode {
        InferMode::Patch => plan_grid(h, w, cfg.patch, cfg.overlap)?,
        InferMode::Global => plan_grid(h, w, h.max(w), 0)?,
    };
    let k = cfg.num_classes;
    // Output buffers: running mean of tile logits and its cover counts.
    let mut acc = vec![0.0f64; k * h * w];
    let mut counts = vec![0u32; h * w];

    let phase = Phase {
        baseline: AllocationLedger::snapshot().current,
    };
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let fg = attention_weights(&bound, "fuse.global")?;
    let fl = attention_weights(&bound, "fuse.local")?;

    let ((global, q_g, k_g, v_g), global_peak) = phase.run(|| {
        let g = global_tokens(&tape, image, &bound, cfg)?;
        let (q, k, v) = project_qkv(&tape, &g, &fg)?;
        Ok((g, q, k, v))
    })?;
    let footprints = if cfg.flags.use_mask {
        Some(patch_masks(&grid, global.spatial)?)
    } else {
        None
    };

    let (fused_global, fusion_peak) = phase.run(|| {
        let mut stream = StreamingAttention::new(q_g.value().clone())?;
        for p in 0..grid.len() {
            let l = local_tokens(&tape, image, &grid, p, &bound, cfg)?;
            let (_, k_l, v_l) = project_qkv(&tape, &l, &fl)?;
            let allowed = footprints.as_ref().map(|fps| {
                fps[p]
                    .iter()
                    .flat_map(|&a| std::iter::repeat_n(a, l.len()))
                    .collect::<Vec<bool>>()
            });
            stream.absorb(k_l.value(), v_l.value(), allowed.as_deref())?;
        }
        let attended = Var::constant(stream.finish()?);
        let fused = tape.add(&attended, &q_g)?;
        global.with_tokens(fused)?.to_map(&tape)
    })?;

    let ((), local_peak) = phase.run(|| {
        for p in 0..grid.len() {
            let l = local_tokens(&tape, image, &grid, p, &bound, cfg)?;
            let (q_l, _, _) = project_qkv(&tape, &l, &fl)?;
            let mask = match &footprints {
                Some(fps) => Some(AttentionMask::broadcast_row(l.len(), &fps[p])?),
                None => None,
            };
            let attended = scaled_dot_attention(&tape, &q_l, &k_g, &v_g, mask.as_ref())?;
            let fused_local = l.with_tokens(tape.add(&attended, &q_l)?)?.to_map(&tape)?;
            let logits = aggregate_patch(&tape, &fused_global, &fused_local, &grid, p, &bound)?;
            accumulate_tile(&mut acc, &mut counts, logits.value(), grid.origins[p], h, w);
        }
        Ok(())
    })?;
    debug_assert!(tape.is_empty());

    let logits = Tensor::new(&[k, h, w], acc)?;
    let classes = argmax_classes(&logits)?;
    let report = InferReport {
        tiles: grid.len(),
        global_branch_peak: global_peak,
        global_fusion_peak: fusion_peak,
        local_fusion_peak: local_peak,
        transient_peak: global_peak.max(fusion_peak).max(local_peak),
    };
    Ok(InferOutput {
        classes,
        logits,
        report,
    })
}

/// Running-mean accumulation matching the stitching used in training.
fn accumulate_tile(
    acc: &mut [f64],
    counts: &mut [u32],
    tile: &Tensor,
    (r0, c0): (usize, usize),
    h: usize,
    w: usize,
) {
    let (k, ph, pw) = (tile.shape()[0], tile.shape()[1], tile.shape()[2]);
    let rows = ph.min(h.saturating_sub(r0));
    let cols = pw.min(w.saturating_sub(c0));
    let t = tile.data();
    for c in 0..k {
        for i in 0..rows {
            let pix = (r0 + i) * w + c0;
            let src = &t[(c * ph + i) * pw..(c * ph + i) * pw + cols];
            let dst = &mut acc[c * h * w + pix..c * h * w + pix + cols];
            for ((d, &s), &n) in dst.iter_mut().zip(src).zip(&counts[pix..pix + cols]) {
                *d += (s - *d) / f64::from(n + 1);
            }
        }
    }
    for i in 0..rows {
        let pix = (r0 + i) * w + c0;
        counts[pix..pix + cols].iter_mut().for_each(|n| *n += 1);
    }
}
