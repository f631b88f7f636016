//! Overlapping patch layout, patch extraction, overlap-averaged stitching,
//! and downsampling for the global branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Square-patch layout over one image. Images smaller than a patch along
/// an axis are treated as zero-padded to the patch size on that axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub overlap: usize,
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len.max(patch) - patch;
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        let clamped = o.min(last);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if o + patch >= len {
            break;
        }
        o += stride;
    }
    out
}

pub fn plan_grid(image_h: usize, image_w: usize, patch: usize, overlap: usize) -> Result<TileGrid> {
    if patch == 0 || overlap >= patch {
        return Err(Error::Config(format!(
            "overlap ({overlap}) must be smaller than patch ({patch})"
        )));
    }
    if image_h == 0 || image_w == 0 {
        return Err(Error::Config(format!("image {image_h}×{image_w} is empty")));
    }
    let stride = patch - overlap;
    let rows = axis_origins(image_h, patch, stride);
    let cols = axis_origins(image_w, patch, stride);
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TileGrid {
        image_h,
        image_w,
        patch,
        overlap,
        origins,
    })
}

impl TileGrid {
    /// A grid with explicit origins; every patch must fit the padded image.
    pub fn from_origins(
        image_h: usize,
        image_w: usize,
        patch: usize,
        overlap: usize,
        origins: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let grid = TileGrid {
            image_h,
            image_w,
            patch,
            overlap,
            origins,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.overlap >= self.patch || self.origins.is_empty() {
            return Err(Error::Config(format!(
                "invalid grid: patch {} overlap {} with {} origins",
                self.patch,
                self.overlap,
                self.origins.len()
            )));
        }
        let (ph, pw) = self.padded_dims();
        if let Some(o) = self
            .origins
            .iter()
            .find(|&&(r, c)| r + self.patch > ph || c + self.patch > pw)
        {
            return Err(Error::Config(format!("origin {o:?} runs past the image")));
        }
        if self.coverage().contains(&0) {
            return Err(Error::Config("grid leaves pixels uncovered".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origin(&self, i: usize) -> Result<(usize, usize)> {
        self.origins.get(i).copied().ok_or_else(|| {
            Error::Usage(format!("patch index {i} out of range (grid has {})", self.len()))
        })
    }

    /// Image extent after padding up to the patch size.
    pub fn padded_dims(&self) -> (usize, usize) {
        (self.image_h.max(self.patch), self.image_w.max(self.patch))
    }

    pub fn is_padded(&self) -> bool {
        self.padded_dims() != (self.image_h, self.image_w)
    }

    /// Number of patches covering each image pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = (self.image_h, self.image_w);
        let mut counts = vec![0u32; h * w];
        for &(r, c) in &self.origins {
            for i in r..(r + self.patch).min(h) {
                for v in &mut counts[i * w + c..i * w + (c + self.patch).min(w)] {
                    *v += 1;
                }
            }
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid serializes")
    }
}

/// Copies tile `i` out of a `C×H×W` image, zero-filling past the image edge.
pub fn extract_patch(image: &Tensor, grid: &TileGrid, i: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if (h, w) != (grid.image_h, grid.image_w) {
        return Err(Error::dim(format!(
            "image {h}×{w} does not match grid {}×{}",
            grid.image_h, grid.image_w
        )));
    }
    let (r0, c0) = grid.origin(i)?;
    let p = grid.patch;
    let src = image.data();
    let mut out = vec![0.0; c * p * p];
    let rows = p.min(h.saturating_sub(r0));
    let cols = p.min(w.saturating_sub(c0));
    for ch in 0..c {
        for r in 0..rows {
            let s = (ch * h + r0 + r) * w + c0;
            let d = (ch * p + r) * p;
            out[d..d + cols].copy_from_slice(&src[s..s + cols]);
        }
    }
    Tensor::new(&[c, p, p], out)
}

/// Per-pixel mean of the patch outputs covering each pixel.
pub fn stitch(patch_outputs: &[Tensor], grid: &TileGrid) -> Result<Tensor> {
    if patch_outputs.len() != grid.len() {
        return Err(Error::dim(format!(
            "{} patch outputs for a grid of {}",
            patch_outputs.len(),
            grid.len()
        )));
    }
    let parts: Vec<&Tensor> = patch_outputs.iter().collect();
    let (out, _) = ops::stitch_mean(&parts, &grid.origins, grid.image_h, grid.image_w)?;
    Ok(out)
}

pub fn downsample_global(image: &Tensor, target: usize) -> Result<Tensor> {
    ops::bilinear_resize(image, target, target)
}

/// Nearest-neighbour resampling of a row-major class map (half-pixel
/// centres), used to build low-resolution targets.
pub fn nearest_resize_labels(labels: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    let pick = |o: usize, src: usize, dst: usize| -> usize {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
        s.min(src - 1)
    };
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let r = pick(i, h, th);
        for j in 0..tw {
            out.push(labels[r * w + pick(j, w, tw)]);
        }
    }
    out
}

/// Crops tile `i` out of a label map; pixels past the image edge get
/// `fill`.
pub fn extract_label_patch(labels: &[u8], grid: &TileGrid, i: usize, fill: u8) -> Result<Vec<u8>> {
    let (h, w) = (grid.image_h, grid.image_w);
    if labels.len() != h * w {
        return Err(Error::dim(format!("{} labels for a {h}×{w} grid", labels.len())));
    }
    let (r0, c0) = grid.origin(i)?;
    let p = grid.patch;
    let mut out = vec![fill; p * p];
    for r in 0..p.min(h.saturating_sub(r0)) {
        let cols = p.min(w.saturating_sub(c0));
        out[r * p..r * p + cols].copy_from_slice(&labels[(r0 + r) * w + c0..(r0 + r) * w + c0 + cols]);
    }
    Ok(out)
}
