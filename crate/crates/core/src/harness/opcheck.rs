//! Finite-difference checks of every differentiable tape operation, with
//! inputs drawn from [-2, 2].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{glca_fuse, scaled_dot_attention, AttentionMask};
use crate::error::Result;
use crate::tensor::{analytic_grads, max_relative_error_with_floor, numeric_grads, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-5;
const EPSILON: f64 = 1e-5;
/// Relative errors are taken against at least this magnitude, so gradients
/// far below finite-difference round-off (e.g. `(1 - p)^6` factors) are
/// judged on absolute error.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct OpError {
    pub op: String,
    pub max_rel_error: f64,
}

fn draw(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Contracts `y` with fixed pseudo-random weights so every output entry
/// gets a distinct cotangent.
fn probe(tape: &Tape, y: &Var) -> Result<Var> {
    let n = y.value().numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4).collect();
    let w = Var::constant(Tensor::new(y.shape(), w)?);
    Ok(tape.sum(&tape.mul(y, &w)?))
}

struct Suite {
    rng: ChaCha8Rng,
    results: Vec<OpError>,
}

impl Suite {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        draw(shape, &mut self.rng)
    }

    fn check<F>(&mut self, op: &str, f: F, inputs: &[Tensor]) -> Result<()>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let analytic = analytic_grads(&f, inputs)?;
        let numeric = numeric_grads(&f, inputs, EPSILON)?;
        self.results.push(OpError {
            op: op.to_string(),
            max_rel_error: max_relative_error_with_floor(&analytic, &numeric, FLOOR),
        });
        Ok(())
    }
}

/// Runs every operation's check and returns the error of each.
pub fn op_gradchecks(seed: u64) -> Result<Vec<OpError>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };

    let (a, b) = (s.draw(&[3, 4]), s.draw(&[4, 2]));
    s.check("matmul", |t, v| probe(t, &t.matmul(&v[0], &v[1])?), &[a.clone(), b])?;
    s.check("transpose", |t, v| probe(t, &t.transpose(&v[0])?), std::slice::from_ref(&a))?;
    s.check("reshape", |t, v| probe(t, &t.reshape(&v[0], &[2, 6])?), std::slice::from_ref(&a))?;
    s.check("slice_leading", |t, v| probe(t, &t.slice_leading(&v[0], 1, 3)?), std::slice::from_ref(&a))?;
    s.check("softmax_rows", |t, v| probe(t, &t.softmax_rows(&v[0])?), std::slice::from_ref(&a))?;
    s.check("frobenius_norm", |t, v| Ok(t.frobenius_norm(&v[0])), std::slice::from_ref(&a))?;
    s.check("scale+sum", |t, v| Ok(t.sum(&t.scale(&v[0], -1.5))), &[a])?;

    let (a, b) = (s.draw(&[2, 5]), s.draw(&[2, 5]));
    s.check("add", |t, v| probe(t, &t.add(&v[0], &v[1])?), &[a.clone(), b.clone()])?;
    s.check("sub", |t, v| probe(t, &t.sub(&v[0], &v[1])?), &[a.clone(), b.clone()])?;
    s.check("mul", |t, v| probe(t, &t.mul(&v[0], &v[1])?), &[a.clone(), b])?;
    let off_kink = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    s.check("relu", |t, v| probe(t, &t.relu(&v[0])), &[off_kink])?;

    let x = s.draw(&[2, 5, 6]);
    let k = s.draw(&[3, 2, 3, 3]);
    let bias = s.draw(&[2]);
    s.check("conv2d", |t, v| probe(t, &t.conv2d(&v[0], &v[1], 1)?), &[x.clone(), k.clone()])?;
    s.check("conv2d (no padding)", |t, v| probe(t, &t.conv2d(&v[0], &v[1], 0)?), &[x.clone(), k])?;
    s.check("add_channel_bias", |t, v| probe(t, &t.add_channel_bias(&v[0], &v[1])?), &[x.clone(), bias])?;
    let pooled = s.draw(&[2, 4, 6]);
    s.check("avg_pool2d", |t, v| probe(t, &t.avg_pool2d(&v[0], 2)?), &[pooled])?;
    s.check("bilinear up", |t, v| probe(t, &t.bilinear_resize(&v[0], 9, 7)?), std::slice::from_ref(&x))?;
    s.check("bilinear down", |t, v| probe(t, &t.bilinear_resize(&v[0], 3, 2)?), std::slice::from_ref(&x))?;
    s.check(
        "resample",
        |t, v| probe(t, &t.resample(&v[0], &[-0.3, 1.25, 4.9], &[0.5, 2.75])?),
        std::slice::from_ref(&x),
    )?;
    let y = s.draw(&[1, 5, 6]);
    s.check("concat_channels", |t, v| probe(t, &t.concat_channels(&[&v[0], &v[1]])?), &[x, y])?;

    let parts: Vec<Tensor> = (0..4).map(|_| s.draw(&[2, 4, 4])).collect();
    let origins = [(0, 0), (0, 2), (2, 0), (2, 2)];
    s.check(
        "stitch_mean",
        |t, v| {
            let refs: Vec<&Var> = v.iter().collect();
            probe(t, &t.stitch_mean(&refs, &origins, 6, 6)?)
        },
        &parts,
    )?;

    let logits = s.draw(&[3, 3, 4]);
    let targets: Vec<u8> = (0..12).map(|i| if i == 5 { 255 } else { (i % 3) as u8 }).collect();
    for gamma in [0.0, 2.0, 6.0] {
        s.check(
            &format!("focal_loss (γ={gamma})"),
            |t, v| t.focal_loss(&v[0], &targets, gamma),
            std::slice::from_ref(&logits),
        )?;
    }

    let (q, k, v) = (s.draw(&[3, 2]), s.draw(&[4, 2]), s.draw(&[4, 3]));
    let mask = AttentionMask::new(
        3,
        4,
        vec![true, false, true, true, false, true, false, false, true, true, true, false],
    )?;
    s.check(
        "scaled_dot_attention",
        |t, x| probe(t, &scaled_dot_attention(t, &x[0], &x[1], &x[2], None)?),
        &[q.clone(), k.clone(), v.clone()],
    )?;
    s.check(
        "scaled_dot_attention (masked)",
        |t, x| probe(t, &scaled_dot_attention(t, &x[0], &x[1], &x[2], Some(&mask))?),
        &[q, k, v],
    )?;

    let d = 2;
    let fuse_inputs: Vec<Tensor> = [3, 4, 4, 4, 3, 3].iter().map(|&n| s.draw(&[n, d])).collect();
    let mask_lg = mask.transpose()?;
    s.check(
        "glca_fuse",
        |t, x| {
            let (g, l) = glca_fuse(t, &x[0], &x[1], &x[2], &x[3], &x[4], &x[5], Some(&mask), Some(&mask_lg))?;
            let a = probe(t, &g)?;
            let b = probe(t, &l)?;
            t.add(&a, &b)
        },
        &fuse_inputs,
    )?;

    Ok(s.results)
}
