//! Self-attention, masked cross-attention and the bidirectional residual
//! global/local fusion.
//!
//! Everything here runs on the tape, so the same code serves training
//! (tracked weights) and inference (constants, nothing recorded).

use crate::error::{Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};
use crate::tiling::TileGrid;

/// Additive score for keys a query may not attend to.
pub const MASKED_SCORE: f64 = -1e9;

/// Learnable projections `W^Q`, `W^K`, `W^V` for one attention block.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl AttentionWeights {
    pub fn new(w_q: Var, w_k: Var, w_v: Var) -> Result<Self> {
        let (dq, dk) = w_q.value().mn()?;
        let (dk_in, dk2) = w_k.value().mn()?;
        let (dv_in, _) = w_v.value().mn()?;
        if dq != dk_in || dq != dv_in {
            return Err(Error::dim(format!(
                "projections disagree on input width: {:?} {:?} {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        if dk != dk2 {
            return Err(Error::dim(format!(
                "query/key projections {:?} and {:?} have different widths",
                w_q.shape(),
                w_k.shape()
            )));
        }
        Ok(AttentionWeights { w_q, w_k, w_v })
    }

    /// Untracked identity projections of width `d`.
    pub fn identity(d: usize) -> Self {
        let eye = || Var::constant(Tensor::eye(d));
        AttentionWeights {
            w_q: eye(),
            w_k: eye(),
            w_v: eye(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn d_v(&self) -> usize {
        self.w_v.shape()[1]
    }
}

/// Boolean `n_q × n_k` attend/ignore pattern. Every query row allows at
/// least one key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_q: usize, n_k: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n_q * n_k || n_q == 0 || n_k == 0 {
            return Err(Error::dim(format!(
                "mask of {} entries for {n_q}×{n_k}",
                allowed.len()
            )));
        }
        if let Some(row) = allowed.chunks(n_k).position(|r| !r.iter().any(|&a| a)) {
            return Err(Error::InvalidMask(format!(
                "query row {row} has no allowed key"
            )));
        }
        Ok(AttentionMask { n_q, n_k, allowed })
    }

    pub fn all(n_q: usize, n_k: usize) -> Self {
        AttentionMask {
            n_q,
            n_k,
            allowed: vec![true; n_q * n_k],
        }
    }

    /// Every query row set to the same key pattern.
    pub fn broadcast_row(n_q: usize, row: &[bool]) -> Result<Self> {
        let allowed = row.iter().copied().cycle().take(n_q * row.len()).collect();
        Self::new(n_q, row.len(), allowed)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_q, self.n_k)
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n_k + k]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn transpose(&self) -> Result<Self> {
        let mut t = vec![false; self.allowed.len()];
        for q in 0..self.n_q {
            for k in 0..self.n_k {
                t[k * self.n_q + q] = self.allows(q, k);
            }
        }
        Self::new(self.n_k, self.n_q, t)
    }

    /// `0` where allowed, [`MASKED_SCORE`] elsewhere.
    pub fn bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED_SCORE })
            .collect();
        Tensor::from_parts(vec![self.n_q, self.n_k], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    Global,
    LocalPatch(usize),
}

/// A feature map flattened to `n = h·w` tokens of width `d`.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub origin: TokenOrigin,
    pub spatial: (usize, usize),
}

impl TokenSeq {
    pub fn new(tokens: Var, origin: TokenOrigin, spatial: (usize, usize)) -> Result<Self> {
        let (n, _) = tokens.value().mn()?;
        if n != spatial.0 * spatial.1 {
            return Err(Error::dim(format!(
                "{n} tokens for a {}×{} grid",
                spatial.0, spatial.1
            )));
        }
        Ok(TokenSeq {
            tokens,
            origin,
            spatial,
        })
    }

    /// `d×h×w` map to `(h·w)×d` tokens in row-major spatial order.
    pub fn from_map(tape: &Tape, map: &Var, origin: TokenOrigin) -> Result<Self> {
        let (d, h, w) = map.value().chw()?;
        let flat = tape.reshape(map, &[d, h * w])?;
        let tokens = tape.transpose(&flat)?;
        Self::new(tokens, origin, (h, w))
    }

    pub fn to_map(&self, tape: &Tape) -> Result<Var> {
        let (h, w) = self.spatial;
        let d = self.width();
        let t = tape.transpose(&self.tokens)?;
        tape.reshape(&t, &[d, h, w])
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn with_tokens(&self, tokens: Var) -> Result<Self> {
        Self::new(tokens, self.origin, self.spatial)
    }
}

pub fn project_qkv(tape: &Tape, f: &TokenSeq, w: &AttentionWeights) -> Result<(Var, Var, Var)> {
    if f.width() != w.d_in() {
        return Err(Error::dim(format!(
            "tokens of width {} projected by weights expecting {}",
            f.width(),
            w.d_in()
        )));
    }
    Ok((
        tape.matmul(&f.tokens, &w.w_q)?,
        tape.matmul(&f.tokens, &w.w_k)?,
        tape.matmul(&f.tokens, &w.w_v)?,
    ))
}

/// Row-stochastic attention matrix `softmax(QKᵀ/√d_k + mask bias)`.
pub fn attention_matrix(
    tape: &Tape,
    q: &Var,
    k: &Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (n_q, d_k) = q.value().mn()?;
    let (n_k, d_k2) = k.value().mn()?;
    if d_k != d_k2 {
        return Err(Error::dim(format!(
            "query {:?} and key {:?} widths differ",
            q.shape(),
            k.shape()
        )));
    }
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, &kt)?;
    let mut scores = tape.scale(&raw, 1.0 / (d_k as f64).sqrt());
    if let Some(mask) = mask {
        if mask.dims() != (n_q, n_k) {
            return Err(Error::dim(format!(
                "mask {:?} for {n_q} queries × {n_k} keys",
                mask.dims()
            )));
        }
        scores = tape.add(&scores, &Var::constant(mask.bias()))?;
    }
    tape.softmax_rows(&scores)
}

pub fn scaled_dot_attention(
    tape: &Tape,
    q: &Var,
    k: &Var,
    v: &Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let n_k = k.shape()[0];
    if v.value().mn()?.0 != n_k {
        return Err(Error::dim(format!(
            "{n_k} keys but value shape {:?}",
            v.shape()
        )));
    }
    let a = attention_matrix(tape, q, k, mask)?;
    tape.matmul(&a, v)
}

/// Unmasked attention with queries, keys and values all projected from `f`.
pub fn self_attention(tape: &Tape, f: &TokenSeq, w: &AttentionWeights) -> Result<TokenSeq> {
    let (q, k, v) = project_qkv(tape, f, w)?;
    let out = scaled_dot_attention(tape, &q, &k, &v, None)?;
    f.with_tokens(out)
}

/// Bidirectional residual cross-attention:
///
/// ```text
/// q̂_g = softmax(q_g k_lᵀ / √d_k) v_l + q_g
/// q̂_l = softmax(q_l k_gᵀ / √d_k) v_g + q_l
/// ```
#[allow(clippy::too_many_arguments)]
pub fn glca_fuse(
    tape: &Tape,
    q_g: &Var,
    k_l: &Var,
    v_l: &Var,
    q_l: &Var,
    k_g: &Var,
    v_g: &Var,
    mask_gl: Option<&AttentionMask>,
    mask_lg: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let one_way = |q: &Var, k: &Var, v: &Var, mask| -> Result<Var> {
        let attended = scaled_dot_attention(tape, q, k, v, mask)?;
        if attended.shape() != q.shape() {
            return Err(Error::dim(format!(
                "attention output {:?} cannot be added to query {:?}",
                attended.shape(),
                q.shape()
            )));
        }
        tape.add(&attended, q)
    };
    let fused_g = one_way(q_g, k_l, v_l, mask_gl)?;
    let fused_l = one_way(q_l, k_g, v_g, mask_lg)?;
    Ok((fused_g, fused_l))
}

/// Projection weights for both directions of the fusion.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub global: AttentionWeights,
    pub local: AttentionWeights,
}

/// Projects both token sequences and applies [`glca_fuse`].
pub fn fuse_sequences(
    tape: &Tape,
    global: &TokenSeq,
    local: &TokenSeq,
    w: &FusionWeights,
    mask_gl: Option<&AttentionMask>,
    mask_lg: Option<&AttentionMask>,
) -> Result<(TokenSeq, TokenSeq)> {
    let (q_g, k_g, v_g) = project_qkv(tape, global, &w.global)?;
    let (q_l, k_l, v_l) = project_qkv(tape, local, &w.local)?;
    let (fg, fl) = glca_fuse(tape, &q_g, &k_l, &v_l, &q_l, &k_g, &v_g, mask_gl, mask_lg)?;
    Ok((global.with_tokens(fg)?, local.with_tokens(fl)?))
}

/// Global-grid cells whose image footprint overlaps tile `patch_index`,
/// optionally dilated by one cell in every direction.
pub fn patch_footprint(
    grid: &TileGrid,
    patch_index: usize,
    global_spatial: (usize, usize),
    dilate: bool,
) -> Result<Vec<bool>> {
    let (r0, c0) = grid.origin(patch_index)?;
    let (gh, gw) = global_spatial;
    let overlapping = |start: usize, image: usize, cells: usize| -> Vec<bool> {
        let end = (start + grid.patch).min(image) as f64;
        let start = start as f64;
        let cell = image as f64 / cells as f64;
        (0..cells)
            .map(|i| {
                let lo = i as f64 * cell;
                let hi = (i + 1) as f64 * cell;
                lo.max(start) < hi.min(end)
            })
            .collect()
    };
    let mut rows = overlapping(r0, grid.image_h, gh);
    let mut cols = overlapping(c0, grid.image_w, gw);
    if dilate {
        let grow = |v: &[bool]| -> Vec<bool> {
            (0..v.len())
                .map(|i| {
                    v[i] || (i > 0 && v[i - 1]) || (i + 1 < v.len() && v[i + 1])
                })
                .collect()
        };
        rows = grow(&rows);
        cols = grow(&cols);
    }
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| r && c))
        .collect())
}

/// Mask restricting the `n_queries` tokens of one patch to the global cells
/// around that patch (overlap dilated by one cell).
pub fn build_patch_mask(
    grid: &TileGrid,
    patch_index: usize,
    global_spatial: (usize, usize),
    n_queries: usize,
) -> Result<AttentionMask> {
    let row = patch_footprint(grid, patch_index, global_spatial, true)?;
    AttentionMask::broadcast_row(n_queries, &row)
}

/// Attention of fixed queries over keys/values that arrive in chunks, with
/// a running max and normaliser so that only `n_q × chunk` scores are live
/// at a time. Equivalent to attending over the concatenated keys.
pub struct StreamingAttention {
    q: Tensor,
    max: Vec<f64>,
    denom: Vec<f64>,
    acc: Vec<f64>,
    d_v: Option<usize>,
}

impl StreamingAttention {
    pub fn new(q: Tensor) -> Result<Self> {
        let (n_q, _) = q.mn()?;
        Ok(StreamingAttention {
            q,
            max: vec![f64::NEG_INFINITY; n_q],
            denom: vec![0.0; n_q],
            acc: Vec::new(),
            d_v: None,
        })
    }

    /// `allowed`, when given, is a row-major `n_q × n_k` pattern for this
    /// chunk only; rows may be entirely blocked within a single chunk.
    pub fn absorb(&mut self, k: &Tensor, v: &Tensor, allowed: Option<&[bool]>) -> Result<()> {
        let (n_q, d_k) = self.q.mn()?;
        let (n_k, d_k2) = k.mn()?;
        let (n_v, d_v) = v.mn()?;
        if d_k != d_k2 || n_k != n_v {
            return Err(Error::dim(format!(
                "streaming chunk k {:?} v {:?} for queries {:?}",
                k.shape(),
                v.shape(),
                self.q.shape()
            )));
        }
        if allowed.is_some_and(|a| a.len() != n_q * n_k) {
            return Err(Error::dim("streaming chunk mask has the wrong size"));
        }
        match self.d_v {
            None => {
                self.d_v = Some(d_v);
                self.acc = vec![0.0; n_q * d_v];
            }
            Some(d) if d != d_v => return Err(Error::dim("value width changed between chunks")),
            Some(_) => {}
        }
        let mut scores = ops::matmul(&self.q, &ops::transpose(k)?)?.to_vec();
        let inv = 1.0 / (d_k as f64).sqrt();
        for (i, s) in scores.iter_mut().enumerate() {
            *s *= inv;
            if allowed.is_some_and(|a| !a[i]) {
                *s += MASKED_SCORE;
            }
        }
        let vs = v.data();
        for qi in 0..n_q {
            let row = &mut scores[qi * n_k..(qi + 1) * n_k];
            let chunk_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let new_max = self.max[qi].max(chunk_max);
            let rescale = (self.max[qi] - new_max).exp();
            let acc = &mut self.acc[qi * d_v..(qi + 1) * d_v];
            acc.iter_mut().for_each(|a| *a *= rescale);
            self.denom[qi] *= rescale;
            for (j, s) in row.iter_mut().enumerate() {
                let e = (*s - new_max).exp();
                self.denom[qi] += e;
                for (a, &vv) in acc.iter_mut().zip(&vs[j * d_v..(j + 1) * d_v]) {
                    *a += e * vv;
                }
            }
            self.max[qi] = new_max;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Tensor> {
        let d_v = self
            .d_v
            .ok_or_else(|| Error::Usage("streaming attention saw no keys".into()))?;
        let mut out = self.acc;
        for (row, &den) in out.chunks_mut(d_v).zip(&self.denom) {
            row.iter_mut().for_each(|a| *a /= den);
        }
        Tensor::new(&[self.denom.len(), d_v], out)
    }
}
