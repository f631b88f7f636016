//! Trains every combination of the attention toggles over a set of seeds.

use std::io::sink;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::Sample;
use super::evaluate::evaluate_model;
use super::train::train;
use crate::error::{Error, Result};
use crate::model::{AblationFlags, InferMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_self_attn: bool,
    pub use_mask: bool,
    /// mIoU per seed, in seed order.
    pub miou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn ablate(cfg: &RunConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<AblationTable> {
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|i| cfg.seed + i).collect();
    let mut rows = Vec::new();
    for flags in AblationFlags::ALL {
        let mut miou = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            run.model.flags = flags;
            let ck = train(&run, train_set, &mut sink(), None, true)?;
            let cm = evaluate_model(&ck.params, &run.model, test_set, InferMode::Patch)?;
            miou.push(cm.miou().unwrap_or(0.0));
        }
        rows.push(AblationRow {
            variant: flags.label().to_string(),
            use_self_attn: flags.use_self_attn,
            use_mask: flags.use_mask,
            miou,
        });
    }
    Ok(AblationTable { seeds, rows })
}

impl AblationTable {
    pub fn row(&self, flags: AblationFlags) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.use_self_attn == flags.use_self_attn && r.use_mask == flags.use_mask)
    }

    /// Seeds on which `a` scores at least as well as `b`.
    pub fn wins(&self, a: AblationFlags, b: AblationFlags) -> usize {
        match (self.row(a), self.row(b)) {
            (Some(a), Some(b)) => a.miou.iter().zip(&b.miou).filter(|(x, y)| x >= y).count(),
            _ => 0,
        }
    }

    /// `variant,use_self_attn,use_mask,seed_<s>…` with one row per variant.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string(), "use_self_attn".into(), "use_mask".into()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.variant.clone(), r.use_self_attn.to_string(), r.use_mask.to_string()];
            rec.extend(r.miou.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        let seeds = header
            .iter()
            .skip(3)
            .map(|h| {
                h.strip_prefix("seed_")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad seed column `{h}`")))
            })
            .collect::<Result<Vec<u64>>>()?;
        let parse_bool = |s: &str| s.parse::<bool>().map_err(|e| Error::Data(format!("`{s}`: {e}")));
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 3 + seeds.len() {
                return Err(Error::Data(format!("row has {} fields, expected {}", rec.len(), 3 + seeds.len())));
            }
            rows.push(AblationRow {
                variant: rec[0].to_string(),
                use_self_attn: parse_bool(&rec[1])?,
                use_mask: parse_bool(&rec[2])?,
                miou: rec
                    .iter()
                    .skip(3)
                    .map(|v| v.parse().map_err(|e| Error::Data(format!("`{v}`: {e}"))))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(AblationTable { seeds, rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
