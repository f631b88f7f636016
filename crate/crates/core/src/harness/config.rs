//! Flat `key = value` run configuration with `#` comments.

use std::fs;
use std::path::Path;

use super::synth::{DataSpec, SceneSpec};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Also save the checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub data: DataSpec,
    /// Seeds `seed, seed+1, …` used by the ablation.
    pub ablation_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            data: DataSpec {
                scene: SceneSpec {
                    height: 64,
                    width: 64,
                    num_classes: model.num_classes,
                    seed: 0,
                },
                train: 64,
                test: 16,
            },
            model,
            adam: AdamConfig::default(),
            batch: 1,
            steps: 500,
            seed: 0,
            checkpoint_every: 0,
            ablation_seeds: 5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected true/false, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').map(|v| item(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "in_channels" => m.in_channels = parse_num(key, value)?,
            "num_classes" => {
                m.num_classes = parse_num(key, value)?;
                self.data.scene.num_classes = m.num_classes;
            }
            "patch" => m.patch = parse_num(key, value)?,
            "overlap" => m.overlap = parse_num(key, value)?,
            "global_size" => m.global_size = parse_num(key, value)?,
            "d_model" => {
                let d = parse_num(key, value)?;
                m.global_backbone.d_model = d;
                m.local_backbone.d_model = d;
            }
            "global_stages" => m.global_backbone.stage_channels = parse_list(key, value, parse_num)?,
            "global_pool" => m.global_backbone.pool = parse_list(key, value, parse_bool)?,
            "local_stages" => m.local_backbone.stage_channels = parse_list(key, value, parse_num)?,
            "local_pool" => m.local_backbone.pool = parse_list(key, value, parse_bool)?,
            "use_self_attn" => m.flags.use_self_attn = parse_bool(key, value)?,
            "use_mask" => m.flags.use_mask = parse_bool(key, value)?,
            "lambda" => m.lambda = parse_num(key, value)?,
            "gamma" => m.gamma = parse_num(key, value)?,
            "lr_global" => self.adam.lr_global = parse_num(key, value)?,
            "lr_local" => self.adam.lr_local = parse_num(key, value)?,
            "beta1" => self.adam.beta1 = parse_num(key, value)?,
            "beta2" => self.adam.beta2 = parse_num(key, value)?,
            "eps" => self.adam.eps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "image_height" => self.data.scene.height = parse_num(key, value)?,
            "image_width" => self.data.scene.width = parse_num(key, value)?,
            "data_seed" => self.data.scene.seed = parse_num(key, value)?,
            "train_images" => self.data.train = parse_num(key, value)?,
            "test_images" => self.data.test = parse_num(key, value)?,
            "ablation_seeds" => self.ablation_seeds = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("key `batch` must be positive".into()));
        }
        if self.ablation_seeds == 0 {
            return Err(Error::Config("key `ablation_seeds` must be positive".into()));
        }
        let s = &self.data.scene;
        if s.height == 0 || s.width == 0 {
            return Err(Error::Config(format!(
                "keys `image_height`/`image_width`: {}×{} is not a valid image size",
                s.height, s.width
            )));
        }
        Ok(())
    }

    /// The configuration in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let lines = [
            ("in_channels", m.in_channels.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("patch", m.patch.to_string()),
            ("overlap", m.overlap.to_string()),
            ("global_size", m.global_size.to_string()),
            ("d_model", m.d_model().to_string()),
            ("global_stages", join(&m.global_backbone.stage_channels)),
            ("global_pool", join(&m.global_backbone.pool)),
            ("local_stages", join(&m.local_backbone.stage_channels)),
            ("local_pool", join(&m.local_backbone.pool)),
            ("use_self_attn", m.flags.use_self_attn.to_string()),
            ("use_mask", m.flags.use_mask.to_string()),
            ("lambda", m.lambda.to_string()),
            ("gamma", m.gamma.to_string()),
            ("lr_global", self.adam.lr_global.to_string()),
            ("lr_local", self.adam.lr_local.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("image_height", self.data.scene.height.to_string()),
            ("image_width", self.data.scene.width.to_string()),
            ("data_seed", self.data.scene.seed.to_string()),
            ("train_images", self.data.train.to_string()),
            ("test_images", self.data.test.to_string()),
            ("ablation_seeds", self.ablation_seeds.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_constants() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model.lambda, 0.15);
        assert_eq!(c.model.gamma, 6.0);
        assert_eq!(c.adam.lr_global, 1e-4);
        assert_eq!(c.adam.lr_local, 2e-5);
        assert_eq!((c.adam.beta1, c.adam.beta2), (0.9, 0.999));
        assert_eq!(c.batch, 1);
    }

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse(
            "# desk run\npatch = 16\noverlap=4 # trailing\n\nglobal_pool = true, false\nuse_mask = false\nlr_global = 0.01\n",
        )
        .unwrap();
        assert_eq!(c.model.patch, 16);
        assert_eq!(c.model.overlap, 4);
        assert_eq!(c.model.global_backbone.pool, vec![true, false]);
        assert!(!c.model.flags.use_mask);
        assert_eq!(c.adam.lr_global, 0.01);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("pach = 16").unwrap_err().to_string();
        assert!(err.contains("`pach`"), "{err}");
        let err = RunConfig::parse("steps = many").unwrap_err().to_string();
        assert!(err.contains("`steps`"), "{err}");
        let err = RunConfig::parse("batch = 0").unwrap_err().to_string();
        assert!(err.contains("`batch`"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string();
        assert!(err.contains("`seed`"), "{err}");
        let err = RunConfig::parse("overlap = 40").unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.adam.lr_global = 0.0123;
        c.model.flags.use_self_attn = false;
        c.data.train = 7;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
