use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Global,
    Local,
    /// Cross-branch fusion and aggregation; trained at the global rate.
    Fusion,
}

impl ParamGroup {
    fn of(name: &str) -> Self {
        if name.starts_with("global.") || name.starts_with("head_global.") {
            ParamGroup::Global
        } else if name.starts_with("local.") || name.starts_with("head_local.") {
            ParamGroup::Local
        } else {
            ParamGroup::Fusion
        }
    }
}

/// Expected `(name, shape, fan_in)` for every parameter; biases have
/// `fan_in == 0` and start at zero.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let d = cfg.d_model();
    let k = cfg.num_classes;
    let mut out = Vec::new();
    let mut branch = |prefix: &str, bb: &BackboneConfig| {
        let mut prev = cfg.in_channels;
        for (s, &ch) in bb.stage_channels.iter().enumerate() {
            out.push((format!("{prefix}.stage{s}.weight"), vec![ch, prev, 3, 3], prev * 9));
            out.push((format!("{prefix}.stage{s}.bias"), vec![ch], 0));
            prev = ch;
        }
        out.push((format!("{prefix}.proj.weight"), vec![d, prev, 1, 1], prev));
        out.push((format!("{prefix}.proj.bias"), vec![d], 0));
        for w in ["wq", "wk", "wv"] {
            out.push((format!("{prefix}.sa.{w}"), vec![d, d], d));
        }
    };
    branch("global", &cfg.global_backbone);
    branch("local", &cfg.local_backbone);
    for side in ["global", "local"] {
        for w in ["wq", "wk", "wv"] {
            out.push((format!("fuse.{side}.{w}"), vec![d, d], d));
        }
    }
    out.push(("agg.weight".into(), vec![k, 2 * d, 3, 3], 2 * d * 9));
    out.push(("agg.bias".into(), vec![k], 0));
    for head in ["head_global", "head_local"] {
        out.push((format!("{head}.weight"), vec![k, d, 1, 1], d));
        out.push((format!("{head}.bias"), vec![k], 0));
    }
    out
}

/// All named parameter tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Seeded init: weights uniform in `±√(1/fan_in)`, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    Tensor::uniform(&shape, -bound, bound, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    pub(crate) fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ModelParams { entries, index }
    }

    /// Checks names and shapes against what `cfg` requires.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg);
        if want.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                want.len(),
                self.entries.len()
            )));
        }
        for ((name, shape, _), (have_name, t)) in want.iter().zip(&self.entries) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {have_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name} is {:?}, got {:?}",
                self.entries[i].1.shape(),
                value.shape()
            )));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn group(name: &str) -> ParamGroup {
        ParamGroup::of(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Parameters as tape leaves (`track`) or as constants.
    pub fn bind(&self, tape: &Tape, track: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if track {
                    tape.leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters bound to one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Pairs `params` names, in order, with caller-made vars.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Usage(format!(
                "{} vars for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        let vars = params.names().map(String::from).zip(vars.iter().cloned()).collect();
        Ok(BoundParams { vars })
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Usage(format!("missing parameter {name}")))
    }

    /// Gradients for every parameter in `params` order (zeros where none flowed).
    pub fn gradients(&self, params: &ModelParams, grads: &Gradients) -> Vec<(String, Tensor)> {
        params
            .names()
            .map(|n| (n.to_string(), grads.get_or_zeros(&self.vars[n])))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 7).unwrap();
        let b = ModelParams::init(&cfg, 7).unwrap();
        let c = ModelParams::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.get("global.stage0.weight").unwrap();
        let bound = (1.0f64 / 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("agg.bias").unwrap().data().iter().all(|&v| v == 0.0));
        a.check_layout(&cfg).unwrap();
    }

    #[test]
    fn groups_follow_names() {
        assert_eq!(ModelParams::group("global.stage0.weight"), ParamGroup::Global);
        assert_eq!(ModelParams::group("head_local.bias"), ParamGroup::Local);
        assert_eq!(ModelParams::group("fuse.local.wq"), ParamGroup::Fusion);
        assert_eq!(ModelParams::group("agg.weight"), ParamGroup::Fusion);
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let mut other = cfg.clone();
        other.num_classes = 4;
        assert!(matches!(p.check_layout(&other), Err(Error::Checkpoint(_))));
    }
}
