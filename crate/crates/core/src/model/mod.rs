//! The dual-branch network, its losses and its optimizer.

mod adam;
mod checkpoint;
mod loss;
mod network;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, Moments, OptimizerState};
pub use checkpoint::Checkpoint;
pub use loss::{coupling_penalty, focal_loss, LossBreakdown};
pub use network::{
    argmax_classes, backbone_forward, forward_infer, forward_train, BranchOutputs,
    InferMode, InferOutput, InferReport, TrainForward,
};
pub use params::{BoundParams, ModelParams, ParamGroup};

/// Convolutional stand-in backbone: `conv3×3 + relu` stages, each optionally
/// followed by 2×2 average pooling, then a 1×1 projection to `d_model`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub pool: Vec<bool>,
    pub d_model: usize,
}

impl BackboneConfig {
    pub fn validate(&self, input: usize) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "stage_channels must be non-empty and positive, got {:?}",
                self.stage_channels
            )));
        }
        if self.pool.len() != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "{} pooling flags for {} stages",
                self.pool.len(),
                self.stage_channels.len()
            )));
        }
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        if self.output_size(input) == 0 {
            return Err(Error::Config(format!(
                "input of {input} px does not survive {} poolings",
                self.pool.iter().filter(|&&p| p).count()
            )));
        }
        Ok(())
    }

    /// Spatial extent of the final feature map for an `input`-pixel side.
    pub fn output_size(&self, input: usize) -> usize {
        self.pool.iter().fold(input, |s, &p| if p { s / 2 } else { s })
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.pool.iter().filter(|&&p| p).count()
    }
}

/// Mechanism toggles for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_self_attn: bool,
    pub use_mask: bool,
}

impl AblationFlags {
    pub const ALL: [AblationFlags; 4] = [
        AblationFlags { use_self_attn: false, use_mask: false },
        AblationFlags { use_self_attn: true, use_mask: false },
        AblationFlags { use_self_attn: false, use_mask: true },
        AblationFlags { use_self_attn: true, use_mask: true },
    ];

    pub fn label(&self) -> &'static str {
        match (self.use_mask, self.use_self_attn) {
            (false, false) => "no-attention",
            (false, true) => "self-attention",
            (true, false) => "mask",
            (true, true) => "mask+self-attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch: usize,
    pub overlap: usize,
    pub global_size: usize,
    pub global_backbone: BackboneConfig,
    pub local_backbone: BackboneConfig,
    pub flags: AblationFlags,
    /// Coupling-penalty weight.
    pub lambda: f64,
    /// Focal-loss focusing parameter, shared by the main and auxiliary losses.
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 3,
            patch: 32,
            overlap: 8,
            global_size: 32,
            global_backbone: BackboneConfig {
                stage_channels: vec![8, 16],
                pool: vec![true, false],
                d_model: 16,
            },
            local_backbone: BackboneConfig {
                stage_channels: vec![8, 16],
                pool: vec![true, false],
                d_model: 16,
            },
            flags: AblationFlags {
                use_self_attn: true,
                use_mask: true,
            },
            lambda: 0.15,
            gamma: 6.0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.global_backbone.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::Config(format!(
                "num_classes must lie in [1, 254], got {}",
                self.num_classes
            )));
        }
        if self.patch == 0 || self.overlap >= self.patch {
            return Err(Error::Config(format!(
                "overlap ({}) must be smaller than patch ({})",
                self.overlap, self.patch
            )));
        }
        if self.global_size == 0 {
            return Err(Error::Config("global_size must be positive".into()));
        }
        self.global_backbone.validate(self.global_size)?;
        self.local_backbone.validate(self.patch)?;
        if self.local_backbone.pool.last() == Some(&true) {
            return Err(Error::Config(
                "local branch must not pool after its last stage".into(),
            ));
        }
        if self.global_backbone.d_model != self.local_backbone.d_model {
            return Err(Error::Config(format!(
                "branch widths differ: global d_model {} vs local {}",
                self.global_backbone.d_model, self.local_backbone.d_model
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        Ok(())
    }
}
