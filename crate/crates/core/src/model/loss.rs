use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

/// Mean over labelled pixels of `−(1 − p_t)^γ · ln(p_t)`.
pub fn focal_loss(logits: &Tensor, targets: &[u8], gamma: f64) -> Result<f64> {
    ops::focal_loss(logits, targets, gamma).map(|(l, _)| l)
}

/// `‖x_loc − resize(x_glb)‖₂` with the global features bilinearly resized
/// to the local map's spatial extent.
pub fn coupling_penalty(x_loc: &Tensor, x_glb: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let v = coupling_on_tape(
        &tape,
        &Var::constant(x_loc.clone()),
        &Var::constant(x_glb.clone()),
    )?;
    Ok(v.value().item())
}

pub(crate) fn coupling_on_tape(tape: &Tape, x_loc: &Var, x_glb: &Var) -> Result<Var> {
    let (c, h, w) = x_loc.value().chw()?;
    let (cg, gh, gw) = x_glb.value().chw()?;
    if c != cg {
        return Err(Error::dim(format!(
            "coupling: {c} local channels vs {cg} global"
        )));
    }
    let aligned = if (gh, gw) == (h, w) {
        x_glb.clone()
    } else {
        tape.bilinear_resize(x_glb, h, w)?
    };
    let diff = tape.sub(x_loc, &aligned)?;
    Ok(tape.frobenius_norm(&diff))
}

/// Loss components of one forward pass. Auxiliary losses carry unit weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux_global: f64,
    pub aux_local: f64,
    pub coupling: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(main: f64, aux_global: f64, aux_local: f64, coupling: f64, lambda: f64) -> Self {
        LossBreakdown {
            main,
            aux_global,
            aux_local,
            coupling,
            lambda,
            total: main + aux_global + aux_local + lambda * coupling,
        }
    }
}
