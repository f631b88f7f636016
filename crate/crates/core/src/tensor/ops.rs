//! Forward kernels over [`Tensor`] plus the adjoint kernels the tape uses.
//!
//! Image-like tensors are `C×H×W`; token sequences and weight matrices are
//! `rows×cols`. All arithmetic is `f64`.

use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(zip_with(a, b, |x, y| x + y))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    Ok(zip_with(a, b, |x, y| x - y))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(zip_with(a, b, |x, y| x * y))
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    x.map(|v| v * s)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

/// Euclidean norm over all elements.
pub fn frobenius_norm(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `c[i][j] += Σ_p a[i][p]·b[p][j]`, row-major, `a: m×k`, `b: k×n`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a·bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose_raw(b, n, k);
    gemm_acc(a, &bt, c, m, k, n);
}

/// `c += aᵀ·b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.mn()?;
    let (k2, n) = b.mn()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner dimensions of {:?} and {:?} disagree",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.mn()?;
    Ok(Tensor::from_parts(vec![n, m], transpose_raw(x.data(), m, n)))
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.mn()?;
    let mut out = x.to_vec();
    for row in out.chunks_mut(n).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.shape()[0];
    if bias.numel() != c {
        return Err(Error::dim(format!(
            "bias of {} entries for {c} channels",
            bias.numel()
        )));
    }
    let per = x.numel() / c;
    let mut out = x.to_vec();
    for (chunk, &b) in out.chunks_mut(per).zip(bias.data()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, k: &Tensor, pad: usize) -> Result<Self> {
        let (c, h, w) = x.chw()?;
        let (o, kc, kh, kw) = match k.shape()[..] {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            _ => return Err(Error::dim(format!("kernel must be O×C×kh×kw, got {:?}", k.shape()))),
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d: kernel {:?} expects {kc} channels, input {:?} has {c}",
                k.shape(),
                x.shape()
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    /// Output index range `[lo, hi)` along one axis for which the input
    /// coordinate `out + tap - pad` lands inside `[0, len)`.
    fn valid(out_len: usize, len: usize, tap: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(tap);
        let hi = (len + pad).saturating_sub(tap).min(out_len);
        (lo, hi.max(lo))
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, kernel, padding)?;
    let (xs, ks) = (x.data(), kernel.data());
    let mut out = vec![0.0; g.o * g.oh * g.ow];
    for o in 0..g.o {
        let oplane = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        for c in 0..g.c {
            let xplane = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                let (i0, i1) = ConvGeom::valid(g.oh, g.h, ki, g.pad);
                for kj in 0..g.kw {
                    let wv = ks[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (j0, j1) = ConvGeom::valid(g.ow, g.w, kj, g.pad);
                    for i in i0..i1 {
                        let xr = i + ki - g.pad;
                        let xrow = &xplane[xr * g.w + j0 + kj - g.pad..xr * g.w + j1 + kj - g.pad];
                        let orow = &mut oplane[i * g.ow + j0..i * g.ow + j1];
                        for (ov, &xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.o, g.oh, g.ow], out))
}

/// Gradients of `conv2d` with respect to its input and its kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = want_dx.then(|| vec![0.0; g.c * g.h * g.w]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    for o in 0..g.o {
        let gplane = &dy[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        for c in 0..g.c {
            let xoff = c * g.h * g.w;
            for ki in 0..g.kh {
                let (i0, i1) = ConvGeom::valid(g.oh, g.h, ki, g.pad);
                for kj in 0..g.kw {
                    let kidx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                    let (j0, j1) = ConvGeom::valid(g.ow, g.w, kj, g.pad);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let xr = i + ki - g.pad;
                        let lo = xoff + xr * g.w + j0 + kj - g.pad;
                        let hi = xoff + xr * g.w + j1 + kj - g.pad;
                        let grow = &gplane[i * g.ow + j0..i * g.ow + j1];
                        if want_dk {
                            acc += x[lo..hi].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = k[kidx];
                            for (d, &gv) in dx[lo..hi].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Concatenates along the leading axis; trailing extents must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[1..] != tail {
            return Err(Error::dim(format!(
                "concat: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Ok(Tensor::from_parts(shape, data))
}

/// Rows `start..end` of the leading axis.
pub fn slice_leading(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let lead = x.shape()[0];
    if start >= end || end > lead {
        return Err(Error::dim(format!(
            "slice {start}..{end} of leading extent {lead}"
        )));
    }
    let per = x.numel() / lead;
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Ok(Tensor::from_parts(shape, x.data()[start * per..end * per].to_vec()))
}

/// Non-overlapping `k×k` mean pooling; trailing rows/columns that do not
/// fill a window are dropped.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if k == 0 || h < k || w < k {
        return Err(Error::dim(format!("avg_pool2d: window {k} on {h}×{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let xs = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for di in 0..k {
                    let row = ch * h * w + (i * k + di) * w + j * k;
                    s += xs[row..row + k].iter().sum::<f64>();
                }
                out[(ch * oh + i) * ow + j] = s * norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub(crate) fn avg_pool2d_backward(dy: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[(ch * oh + i) * ow + j] * norm;
                for di in 0..k {
                    let row = ch * h * w + (i * k + di) * w + j * k;
                    dx[row..row + k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

/// One linear-interpolation tap: `x[lo] + frac·(x[hi] − x[lo])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

impl Tap {
    /// Tap for continuous source coordinate `s` (pixel centers at integers),
    /// clamped to the valid range `[0, len − 1]`.
    pub fn at(s: f64, len: usize) -> Tap {
        let s = s.clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        Tap {
            lo,
            hi,
            frac: s - lo as f64,
        }
    }
}

/// Half-pixel-center source coordinates for resizing `src` samples to `dst`.
pub fn resize_coords(src: usize, dst: usize) -> Vec<f64> {
    let ratio = src as f64 / dst as f64;
    (0..dst).map(|o| (o as f64 + 0.5) * ratio - 0.5).collect()
}

/// Separable bilinear sampling of every channel at the given source row and
/// column coordinates (clamped at the borders).
pub fn resample(x: &Tensor, rows: &[f64], cols: &[f64]) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::dim("resample: empty target grid"));
    }
    let rt: Vec<Tap> = rows.iter().map(|&s| Tap::at(s, h)).collect();
    let ct: Vec<Tap> = cols.iter().map(|&s| Tap::at(s, w)).collect();
    Ok(resample_taps(x, &rt, &ct))
}

pub(crate) fn resample_taps(x: &Tensor, rt: &[Tap], ct: &[Tap]) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (rt.len(), ct.len());
    let xs = x.data();
    let mut out = vec![0.0; c * oh * ow];
    let mut row = vec![0.0; w];
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for (i, t) in rt.iter().enumerate() {
            let a = &plane[t.lo * w..(t.lo + 1) * w];
            let b = &plane[t.hi * w..(t.hi + 1) * w];
            for ((r, &av), &bv) in row.iter_mut().zip(a).zip(b) {
                *r = av + t.frac * (bv - av);
            }
            let orow = &mut out[(ch * oh + i) * ow..(ch * oh + i + 1) * ow];
            for (o, u) in orow.iter_mut().zip(ct) {
                *o = row[u.lo] + u.frac * (row[u.hi] - row[u.lo]);
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

pub(crate) fn resample_backward(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    rt: &[Tap],
    ct: &[Tap],
) -> Vec<f64> {
    let (oh, ow) = (rt.len(), ct.len());
    let mut dx = vec![0.0; c * h * w];
    let mut drow = vec![0.0; w];
    for ch in 0..c {
        for (i, t) in rt.iter().enumerate() {
            drow.iter_mut().for_each(|v| *v = 0.0);
            let grow = &dy[(ch * oh + i) * ow..(ch * oh + i + 1) * ow];
            for (&g, u) in grow.iter().zip(ct) {
                drow[u.lo] += g * (1.0 - u.frac);
                drow[u.hi] += g * u.frac;
            }
            let base = ch * h * w;
            for (j, &g) in drow.iter().enumerate() {
                dx[base + t.lo * w + j] += g * (1.0 - t.frac);
                dx[base + t.hi * w + j] += g * t.frac;
            }
        }
    }
    dx
}

pub fn bilinear_resize(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    if target_h == 0 || target_w == 0 {
        return Err(Error::dim(format!(
            "bilinear_resize: target {target_h}×{target_w}"
        )));
    }
    resample(x, &resize_coords(h, target_h), &resize_coords(w, target_w))
}

/// Places `C×ph×pw` parts at their origins on an `out_h×out_w` canvas and
/// averages overlapping contributions. Part pixels past the canvas edge are
/// discarded. Returns the output and the per-pixel cover counts.
///
/// The mean is accumulated incrementally (`m += (x − m)/k`), so identical
/// overlapping contributions reproduce their value exactly.
pub fn stitch_mean(
    parts: &[&Tensor],
    origins: &[(usize, usize)],
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, Vec<u32>)> {
    if parts.len() != origins.len() || parts.is_empty() {
        return Err(Error::dim(format!(
            "stitch: {} parts for {} origins",
            parts.len(),
            origins.len()
        )));
    }
    let (c, ph, pw) = parts[0].chw()?;
    let mut counts = vec![0u32; out_h * out_w];
    let mut acc = vec![0.0; c * out_h * out_w];
    for (p, &(r0, c0)) in parts.iter().zip(origins) {
        if p.shape() != parts[0].shape() {
            return Err(Error::dim(format!(
                "stitch: part {:?} differs from {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        let rows = ph.min(out_h.saturating_sub(r0));
        let cols = pw.min(out_w.saturating_sub(c0));
        let pd = p.data();
        for ch in 0..c {
            for i in 0..rows {
                let src = &pd[(ch * ph + i) * pw..(ch * ph + i) * pw + cols];
                let pix = (r0 + i) * out_w + c0;
                let dst_off = ch * out_h * out_w + pix;
                let dst = &mut acc[dst_off..dst_off + cols];
                for ((d, &s), &n) in dst.iter_mut().zip(src).zip(&counts[pix..pix + cols]) {
                    *d += (s - *d) / f64::from(n + 1);
                }
            }
        }
        for i in 0..rows {
            let pix = (r0 + i) * out_w + c0;
            counts[pix..pix + cols].iter_mut().for_each(|n| *n += 1);
        }
    }
    if counts.contains(&0) {
        return Err(Error::dim("stitch: some output pixels are not covered"));
    }
    Ok((Tensor::from_parts(vec![c, out_h, out_w], acc), counts))
}

/// Sentinel target value that focal loss skips.
pub const IGNORE_LABEL: u8 = 255;

/// Mean focal loss over non-ignored pixels of `K×H×W` logits, and the
/// per-pixel softmax probabilities (kept for the adjoint).
pub fn focal_loss(logits: &Tensor, targets: &[u8], gamma: f64) -> Result<(f64, Vec<f64>)> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    if targets.len() != n {
        return Err(Error::dim(format!(
            "focal loss: {} targets for {n} pixels",
            targets.len()
        )));
    }
    if gamma < 0.0 {
        return Err(Error::Config(format!("focal gamma must be ≥ 0, got {gamma}")));
    }
    let z = logits.data();
    let mut probs = vec![0.0; k * n];
    let mut total = 0.0;
    let mut valid = 0usize;
    for px in 0..n {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(z[c * n + px]);
        }
        let mut s = 0.0;
        for c in 0..k {
            let e = (z[c * n + px] - max).exp();
            probs[c * n + px] = e;
            s += e;
        }
        for c in 0..k {
            probs[c * n + px] /= s;
        }
        let t = targets[px];
        if t == IGNORE_LABEL {
            continue;
        }
        if usize::from(t) >= k {
            return Err(Error::Data(format!("label {t} outside [0, {k})")));
        }
        let p = probs[usize::from(t) * n + px];
        total += -(1.0 - p).powf(gamma) * p.max(1e-12).ln();
        valid += 1;
    }
    let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
    Ok((loss, probs))
}

pub(crate) fn focal_loss_backward(
    probs: &[f64],
    targets: &[u8],
    k: usize,
    gamma: f64,
    upstream: f64,
) -> Vec<f64> {
    let n = targets.len();
    let valid = targets.iter().filter(|&&t| t != IGNORE_LABEL).count();
    let mut dz = vec![0.0; k * n];
    if valid == 0 {
        return dz;
    }
    let norm = upstream / valid as f64;
    for (px, &t) in targets.iter().enumerate() {
        if t == IGNORE_LABEL {
            continue;
        }
        let t = usize::from(t);
        let p = probs[t * n + px];
        let q = 1.0 - p;
        // p · dL/dp, where L = −q^γ · ln(max(p, 1e-12))
        let from_weight = if gamma == 0.0 || q <= 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p * p.max(1e-12).ln()
        };
        let from_log = if p >= 1e-12 { -q.powf(gamma) } else { 0.0 };
        let coef = (from_weight + from_log) * norm;
        for c in 0..k {
            let delta = if c == t { 1.0 } else { 0.0 };
            dz[c * n + px] = coef * (delta - probs[c * n + px]);
        }
    }
    dz
}
