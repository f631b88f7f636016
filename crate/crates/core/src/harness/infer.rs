use std::path::{Path, PathBuf};

use super::dataset::stem;
use super::netpbm::{load_image, save_labels, save_rgb, tensor_to_rgb};
use crate::error::Result;
use crate::metrics::ClassMap;
use crate::model::{forward_infer, Checkpoint, InferMode, InferReport};
use crate::tensor::Tensor;

/// Display colour of a class in overlays.
pub fn class_color(class: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    PALETTE[usize::from(class) % PALETTE.len()]
}

/// Half-and-half blend of the image with the class colours.
pub fn overlay(image: &Tensor, classes: &ClassMap) -> Result<Vec<u8>> {
    let rgb = tensor_to_rgb(image)?;
    Ok(rgb
        .chunks_exact(3)
        .zip(&classes.data)
        .flat_map(|(px, &c)| {
            let col = class_color(c);
            (0..3).map(move |i| ((u16::from(px[i]) + u16::from(col[i])) / 2) as u8)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct InferFiles {
    pub prediction: PathBuf,
    pub overlay: Option<PathBuf>,
    pub report: InferReport,
}

/// Predicts one image file, writing `NAME.pgm` (and `NAME_overlay.ppm`)
/// into `out_dir`.
pub fn infer_file(
    ckpt: &Checkpoint,
    image_path: &Path,
    mode: InferMode,
    out_dir: &Path,
    with_overlay: bool,
) -> Result<InferFiles> {
    let image = load_image(image_path)?;
    let out = forward_infer(&ckpt.params, &ckpt.config, &image, mode)?;
    let name = stem(image_path);
    let prediction = out_dir.join(format!("{name}.pgm"));
    save_labels(&prediction, &out.classes)?;
    let overlay_path = if with_overlay {
        let path = out_dir.join(format!("{name}_overlay.ppm"));
        save_rgb(&path, &overlay(&image, &out.classes)?, out.classes.w, out.classes.h)?;
        Some(path)
    } else {
        None
    };
    Ok(InferFiles {
        prediction,
        overlay: overlay_path,
        report: out.report,
    })
}
