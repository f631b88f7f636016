use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::dataset::{list_files, stem, Sample};
use super::netpbm::load_labels;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsRecord};
use crate::model::{forward_infer, InferMode, ModelConfig, ModelParams};
use crate::tensor::ops::IGNORE_LABEL;

/// Predicts every sample and tallies one confusion matrix over all of them.
pub fn evaluate_model(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
    mode: InferMode,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for s in samples {
        let out = forward_infer(params, cfg, &s.image, mode)?;
        cm.accumulate(&out.classes.data, &s.labels.data, Some(IGNORE_LABEL))?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub records: Vec<MetricsRecord>,
    pub summary: MetricsRecord,
}

/// Scores each `NAME.pgm` in `pred_dir` against `gt_dir/NAME.pgm`.
/// Without `num_classes`, the class count is one more than the largest
/// label seen.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, num_classes: Option<usize>) -> Result<EvalReport> {
    let preds = list_files(pred_dir, "pgm")?;
    if preds.is_empty() {
        return Err(Error::Data(format!("no .pgm predictions in {}", pred_dir.display())));
    }
    let mut pairs = BTreeMap::new();
    for p in &preds {
        let name = stem(p);
        let gt = load_labels(&gt_dir.join(format!("{name}.pgm")))?;
        let pred = load_labels(p)?;
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::Data(format!(
                "{name}: prediction {}×{} vs ground truth {}×{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        pairs.insert(name, (pred, gt));
    }
    let k = num_classes.unwrap_or_else(|| {
        pairs
            .values()
            .flat_map(|(p, g)| p.data.iter().chain(&g.data))
            .filter(|&&v| v != IGNORE_LABEL)
            .max()
            .map_or(1, |&m| usize::from(m) + 1)
    });
    let mut total = ConfusionMatrix::new(k);
    let mut records = Vec::with_capacity(pairs.len());
    for (name, (pred, gt)) in &pairs {
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred.data, &gt.data, Some(IGNORE_LABEL))?;
        total.merge(&cm)?;
        records.push(MetricsRecord::from_matrix(name.clone(), &cm));
    }
    Ok(EvalReport {
        records,
        summary: MetricsRecord::from_matrix("summary", &total),
    })
}
