use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{adam_step, forward_train, Checkpoint, LossBreakdown, ModelParams, OptimizerState};
use crate::tensor::{Tape, Tensor};
use crate::tiling::plan_grid;

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Omitted in deterministic mode so logs compare byte for byte.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_ms: Option<f64>,
}

type GradSum = (LossBreakdown, Vec<(String, Vec<f64>)>);

/// Mean loss and gradients over a batch of samples.
fn batch_gradients(
    params: &ModelParams,
    cfg: &RunConfig,
    batch: &[&Sample],
) -> Result<(LossBreakdown, Vec<(String, Tensor)>)> {
    let mut sum: Option<GradSum> = None;
    for s in batch {
        let (_, h, w) = s.image.chw()?;
        let grid = plan_grid(h, w, cfg.model.patch, cfg.model.overlap)?;
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let fwd = forward_train(&tape, &bound, &cfg.model, &s.image, &s.labels, &grid)?;
        let grads = bound.gradients(params, &tape.backward(&fwd.loss)?);
        sum = Some(match sum {
            None => (
                fwd.breakdown,
                grads.into_iter().map(|(n, g)| (n, g.to_vec())).collect(),
            ),
            Some((b, mut acc)) => {
                for ((_, a), (_, g)) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
                (
                    LossBreakdown::assemble(
                        b.main + fwd.breakdown.main,
                        b.aux_global + fwd.breakdown.aux_global,
                        b.aux_local + fwd.breakdown.aux_local,
                        b.coupling + fwd.breakdown.coupling,
                        b.lambda,
                    ),
                    acc,
                )
            }
        });
    }
    let (b, acc) = sum.ok_or_else(|| Error::Usage("empty batch".into()))?;
    let n = batch.len() as f64;
    let mean = LossBreakdown::assemble(b.main / n, b.aux_global / n, b.aux_local / n, b.coupling / n, b.lambda);
    let grads = acc
        .into_iter()
        .map(|(name, g)| {
            let shape = params.get(&name).expect("same layout").shape().to_vec();
            Ok((name, Tensor::new(&shape, g.into_iter().map(|v| v / n).collect())?))
        })
        .collect::<Result<_>>()?;
    Ok((mean, grads))
}

/// Trains from a seeded initialization, writing one JSON line per step to
/// `log` and, if given, the checkpoint to `ckpt_out` (every
/// `checkpoint_every` steps and at the end).
pub fn train(
    cfg: &RunConfig,
    data: &[Sample],
    log: &mut dyn Write,
    ckpt_out: Option<&Path>,
    deterministic: bool,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut state = OptimizerState::new(&params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();

    let snapshot = |params: &ModelParams, state: &OptimizerState| Checkpoint {
        config: cfg.model.clone(),
        params: params.clone(),
        optimizer: Some(state.clone()),
    };
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let batch: Vec<&Sample> = (0..cfg.batch)
            .map(|_| {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                }
                &data[order.pop().expect("refilled")]
            })
            .collect();
        let (loss, grads) = batch_gradients(&params, cfg, &batch)?;
        if !loss.total.is_finite() {
            return Err(Error::CheckFailed(format!("non-finite loss at step {step}")));
        }
        adam_step(&mut params, &grads, &mut state)?;
        let record = StepRecord {
            step,
            loss,
            step_ms: (!deterministic).then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Usage(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(Path::new("<log>"), e))?;
        if let Some(path) = ckpt_out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                snapshot(&params, &state).save(path)?;
            }
        }
    }
    let ck = snapshot(&params, &state);
    if let Some(path) = ckpt_out {
        ck.save(path)?;
    }
    Ok(ck)
}
