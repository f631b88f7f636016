//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! A [`Var`] pairs a value with an optional tape node. Operations whose
//! inputs are all untracked produce untracked results and record nothing,
//! so forward passes over constants (inference) retain no intermediates.

use std::cell::{Cell, RefCell};

use super::ops::{self, ConvGeom, Tap};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<NodeId>,
}

impl Var {
    /// An untracked value.
    pub fn constant(value: Tensor) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

type Slot = Option<NodeId>;

enum Op {
    Leaf,
    MatMul { a: Slot, b: Slot, av: Tensor, bv: Tensor },
    Transpose { x: Slot, m: usize, n: usize },
    Add { a: Slot, b: Slot },
    Sub { a: Slot, b: Slot },
    Mul { a: Slot, b: Slot, av: Tensor, bv: Tensor },
    Scale { x: Slot, s: f64 },
    Relu { x: Slot, y: Tensor },
    ChannelBias { x: Slot, b: Slot, c: usize },
    Softmax { x: Slot, y: Tensor },
    Conv { x: Slot, k: Slot, xv: Tensor, kv: Tensor, geom: ConvGeom },
    Concat { parts: Vec<(Slot, usize)> },
    Pool { x: Slot, c: usize, h: usize, w: usize, k: usize },
    Resample { x: Slot, c: usize, h: usize, w: usize, rows: Vec<Tap>, cols: Vec<Tap> },
    Reshape { x: Slot },
    Slice { x: Slot, offset: usize, total: usize },
    Sum { x: Slot, n: usize },
    Norm { x: Slot, xv: Tensor, norm: f64 },
    Focal { x: Slot, probs: Vec<f64>, targets: Vec<u8>, k: usize, gamma: f64 },
    Stitch { parts: Vec<Slot>, origins: Vec<(usize, usize)>, counts: Vec<u32>, c: usize, ph: usize, pw: usize, out_h: usize, out_w: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Ordered record of differentiable operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.node.and_then(|id| self.grads.get(id.0)?.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn any(slots: &[Slot]) -> bool {
    slots.iter().any(Option::is_some)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
        });
        Var {
            value,
            node: Some(id),
        }
    }

    fn record(&self, value: Tensor, inputs: &[Slot], op: impl FnOnce() -> Op) -> Var {
        if any(inputs) {
            self.push(value, op())
        } else {
            Var::constant(value)
        }
    }

    /// A tracked input whose gradient will be reported.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::matmul(&a.value, &b.value)?;
        Ok(self.record(y, &[a.node, b.node], || Op::MatMul {
            a: a.node,
            b: b.node,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    pub fn transpose(&self, x: &Var) -> Result<Var> {
        let (m, n) = x.value.mn()?;
        let y = ops::transpose(&x.value)?;
        Ok(self.record(y, &[x.node], || Op::Transpose { x: x.node, m, n }))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(&a.value, &b.value)?;
        Ok(self.record(y, &[a.node, b.node], || Op::Add { a: a.node, b: b.node }))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::sub(&a.value, &b.value)?;
        Ok(self.record(y, &[a.node, b.node], || Op::Sub { a: a.node, b: b.node }))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::mul(&a.value, &b.value)?;
        Ok(self.record(y, &[a.node, b.node], || Op::Mul {
            a: a.node,
            b: b.node,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    pub fn scale(&self, x: &Var, s: f64) -> Var {
        let y = ops::scale(&x.value, s);
        self.record(y, &[x.node], || Op::Scale { x: x.node, s })
    }

    pub fn relu(&self, x: &Var) -> Var {
        let y = ops::relu(&x.value);
        let saved = y.clone();
        self.record(y, &[x.node], || Op::Relu { x: x.node, y: saved })
    }

    pub fn add_channel_bias(&self, x: &Var, bias: &Var) -> Result<Var> {
        let y = ops::add_channel_bias(&x.value, &bias.value)?;
        let c = x.shape()[0];
        Ok(self.record(y, &[x.node, bias.node], || Op::ChannelBias {
            x: x.node,
            b: bias.node,
            c,
        }))
    }

    pub fn softmax_rows(&self, x: &Var) -> Result<Var> {
        let y = ops::softmax_rows(&x.value)?;
        let saved = y.clone();
        Ok(self.record(y, &[x.node], || Op::Softmax { x: x.node, y: saved }))
    }

    pub fn conv2d(&self, x: &Var, kernel: &Var, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(&x.value, &kernel.value, padding)?;
        let y = ops::conv2d(&x.value, &kernel.value, padding)?;
        Ok(self.record(y, &[x.node, kernel.node], || Op::Conv {
            x: x.node,
            k: kernel.node,
            xv: x.value.clone(),
            kv: kernel.value.clone(),
            geom,
        }))
    }

    pub fn concat_channels(&self, parts: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| &p.value).collect();
        let y = ops::concat_channels(&values)?;
        let slots: Vec<Slot> = parts.iter().map(|p| p.node).collect();
        Ok(self.record(y, &slots, || Op::Concat {
            parts: parts.iter().map(|p| (p.node, p.value.numel())).collect(),
        }))
    }

    pub fn avg_pool2d(&self, x: &Var, k: usize) -> Result<Var> {
        let (c, h, w) = x.value.chw()?;
        let y = ops::avg_pool2d(&x.value, k)?;
        Ok(self.record(y, &[x.node], || Op::Pool { x: x.node, c, h, w, k }))
    }

    pub fn resample(&self, x: &Var, rows: &[f64], cols: &[f64]) -> Result<Var> {
        let (c, h, w) = x.value.chw()?;
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::dim("resample: empty target grid"));
        }
        let rt: Vec<Tap> = rows.iter().map(|&s| Tap::at(s, h)).collect();
        let ct: Vec<Tap> = cols.iter().map(|&s| Tap::at(s, w)).collect();
        let y = ops::resample_taps(&x.value, &rt, &ct);
        Ok(self.record(y, &[x.node], || Op::Resample {
            x: x.node,
            c,
            h,
            w,
            rows: rt,
            cols: ct,
        }))
    }

    pub fn bilinear_resize(&self, x: &Var, target_h: usize, target_w: usize) -> Result<Var> {
        let (_, h, w) = x.value.chw()?;
        if target_h == 0 || target_w == 0 {
            return Err(Error::dim(format!(
                "bilinear_resize: target {target_h}×{target_w}"
            )));
        }
        self.resample(
            x,
            &ops::resize_coords(h, target_h),
            &ops::resize_coords(w, target_w),
        )
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = x.value.reshape(shape)?;
        Ok(self.record(y, &[x.node], || Op::Reshape { x: x.node }))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_leading(&self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let y = ops::slice_leading(&x.value, start, end)?;
        let per = x.value.numel() / x.shape()[0];
        let total = x.value.numel();
        Ok(self.record(y, &[x.node], || Op::Slice {
            x: x.node,
            offset: start * per,
            total,
        }))
    }

    pub fn sum(&self, x: &Var) -> Var {
        let n = x.value.numel();
        self.record(ops::sum(&x.value), &[x.node], || Op::Sum { x: x.node, n })
    }

    pub fn frobenius_norm(&self, x: &Var) -> Var {
        let y = ops::frobenius_norm(&x.value);
        let norm = y.item();
        self.record(y, &[x.node], || Op::Norm {
            x: x.node,
            xv: x.value.clone(),
            norm,
        })
    }

    pub fn focal_loss(&self, logits: &Var, targets: &[u8], gamma: f64) -> Result<Var> {
        let (loss, probs) = ops::focal_loss(&logits.value, targets, gamma)?;
        let k = logits.shape()[0];
        Ok(self.record(Tensor::scalar(loss), &[logits.node], || Op::Focal {
            x: logits.node,
            probs,
            targets: targets.to_vec(),
            k,
            gamma,
        }))
    }

    pub fn stitch_mean(
        &self,
        parts: &[&Var],
        origins: &[(usize, usize)],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| &p.value).collect();
        let (y, counts) = ops::stitch_mean(&values, origins, out_h, out_w)?;
        let (c, ph, pw) = values[0].chw()?;
        let slots: Vec<Slot> = parts.iter().map(|p| p.node).collect();
        Ok(self.record(y, &slots.clone(), || Op::Stitch {
            parts: slots,
            origins: origins.to_vec(),
            counts,
            c,
            ph,
            pw,
            out_h,
            out_w,
        }))
    }

    /// Propagates `d(loss)/d(loss) = 1` back through the record, visiting
    /// operations in exact reverse execution order. A tape can be consumed
    /// only once; a second call is a usage error.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !loss.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Usage("loss is not on the tape".into()))?;
        if self.consumed.replace(true) {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if root.0 >= nodes.len() {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], slot: Slot, g: impl FnOnce() -> Vec<f64>) {
            if let Some(id) = slot {
                let g = g();
                match &mut grads[id.0] {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                    empty => *empty = Some(g),
                }
            }
        }

        for (idx, node) in nodes.iter().enumerate().take(root.0 + 1).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul { a, b, av, bv } => {
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    acc(&mut grads, *a, || {
                        let mut da = vec![0.0; m * k];
                        ops::gemm_nt_acc(&gy, bv.data(), &mut da, m, n, k);
                        da
                    });
                    acc(&mut grads, *b, || {
                        let mut db = vec![0.0; k * n];
                        ops::gemm_tn_acc(av.data(), &gy, &mut db, k, m, n);
                        db
                    });
                }
                Op::Transpose { x, m, n } => {
                    acc(&mut grads, *x, || ops::transpose_raw(&gy, *n, *m));
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, || gy.clone());
                    acc(&mut grads, *b, || gy.clone());
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, *a, || gy.clone());
                    acc(&mut grads, *b, || gy.iter().map(|v| -v).collect());
                }
                Op::Mul { a, b, av, bv } => {
                    acc(&mut grads, *a, || gy.iter().zip(bv.data()).map(|(g, y)| g * y).collect());
                    acc(&mut grads, *b, || gy.iter().zip(av.data()).map(|(g, x)| g * x).collect());
                }
                Op::Scale { x, s } => {
                    acc(&mut grads, *x, || gy.iter().map(|g| g * s).collect());
                }
                Op::Relu { x, y } => {
                    acc(&mut grads, *x, || {
                        gy.iter()
                            .zip(y.data())
                            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                            .collect()
                    });
                }
                Op::ChannelBias { x, b, c } => {
                    acc(&mut grads, *b, || {
                        let per = gy.len() / c;
                        gy.chunks(per).map(|ch| ch.iter().sum()).collect()
                    });
                    acc(&mut grads, *x, || gy.clone());
                }
                Op::Softmax { x, y } => {
                    let n = y.shape()[1];
                    acc(&mut grads, *x, || ops::softmax_rows_backward(y.data(), &gy, n));
                }
                Op::Conv { x, k, xv, kv, geom } => {
                    let (dx, dk) = ops::conv2d_backward(
                        xv.data(),
                        kv.data(),
                        &gy,
                        geom,
                        x.is_some(),
                        k.is_some(),
                    );
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, || dx);
                    }
                    if let Some(dk) = dk {
                        acc(&mut grads, *k, || dk);
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &(slot, len) in parts {
                        acc(&mut grads, slot, || gy[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Pool { x, c, h, w, k } => {
                    acc(&mut grads, *x, || ops::avg_pool2d_backward(&gy, *c, *h, *w, *k));
                }
                Op::Resample { x, c, h, w, rows, cols } => {
                    acc(&mut grads, *x, || ops::resample_backward(&gy, *c, *h, *w, rows, cols));
                }
                Op::Reshape { x } => {
                    acc(&mut grads, *x, || gy.clone());
                }
                Op::Slice { x, offset, total } => {
                    acc(&mut grads, *x, || {
                        let mut d = vec![0.0; *total];
                        d[*offset..*offset + gy.len()].copy_from_slice(&gy);
                        d
                    });
                }
                Op::Sum { x, n } => {
                    acc(&mut grads, *x, || vec![gy[0]; *n]);
                }
                Op::Norm { x, xv, norm } => {
                    acc(&mut grads, *x, || {
                        if *norm == 0.0 {
                            vec![0.0; xv.numel()]
                        } else {
                            xv.data().iter().map(|v| gy[0] * v / norm).collect()
                        }
                    });
                }
                Op::Focal { x, probs, targets, k, gamma } => {
                    acc(&mut grads, *x, || {
                        ops::focal_loss_backward(probs, targets, *k, *gamma, gy[0])
                    });
                }
                Op::Stitch { parts, origins, counts, c, ph, pw, out_h, out_w } => {
                    for (slot, &(r0, c0)) in parts.iter().zip(origins) {
                        acc(&mut grads, *slot, || {
                            let mut d = vec![0.0; c * ph * pw];
                            let rows = (*ph).min(out_h.saturating_sub(r0));
                            let cols = (*pw).min(out_w.saturating_sub(c0));
                            for ch in 0..*c {
                                for i in 0..rows {
                                    for j in 0..cols {
                                        let (r, q) = (r0 + i, c0 + j);
                                        d[(ch * ph + i) * pw + j] = gy[(ch * out_h + r) * out_w + q]
                                            / f64::from(counts[r * out_w + q]);
                                    }
                                }
                            }
                            d
                        });
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(node.shape.clone(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1., -2., 3., 0.5]).unwrap());
        let loss = tape.sum(&x);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let tape = Tape::new();
        let v = vec![1., -2., 3., 0.5];
        let x = tape.leaf(Tensor::new(&[4], v.clone()).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        let g = tape.backward(&loss).unwrap();
        let expect: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
        assert_eq!(g.get(&x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let tape = Tape::new();
        let a = Var::constant(Tensor::eye(3));
        let b = tape.matmul(&a, &a).unwrap();
        assert!(!b.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.scale(&x, 2.0);
        assert!(tape.backward(&y).is_ok());
        assert!(matches!(tape.backward(&y), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(&x), Err(Error::Usage(_))));
    }

    #[test]
    fn gradient_shapes_match_leaves() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 3], 0.5));
        let b = tape.leaf(Tensor::full(&[3, 4], -0.25));
        let y = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&y);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&a).unwrap().shape(), &[2, 3]);
        assert_eq!(g.get(&b).unwrap().shape(), &[3, 4]);
    }
}
