//! Dual-branch semantic segmentation for very large images.
//!
//! A global branch sees a downsampled copy of the whole image; a local
//! branch sees full-resolution overlapping patches. The two exchange
//! information through bidirectional (optionally masked) cross-attention
//! before a 3×3 aggregation convolution produces the final class logits.

pub mod attention;
pub mod error;
pub mod harness;
pub mod ledger;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tiling;

pub use attention::{AttentionMask, AttentionWeights, TokenSeq};
pub use error::{Error, Result};
pub use ledger::AllocationLedger;
pub use metrics::{ClassMap, ConfusionMatrix};
pub use model::{BackboneConfig, BranchOutputs, LossBreakdown, ModelConfig, ModelParams};
pub use tensor::{Tape, Tensor, Var};
pub use tiling::TileGrid;
