use std::fs;
use std::path::{Path, PathBuf};

use super::netpbm::{load_image, load_labels};
use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub labels: ClassMap,
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Every `NAME.ppm` in `dir` with its `NAME.pgm` label map.
pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let images = list_files(dir, "ppm")?;
    if images.is_empty() {
        return Err(Error::Data(format!("no .ppm images in {}", dir.display())));
    }
    images
        .iter()
        .map(|path| {
            let image = load_image(path)?;
            let labels = load_labels(&path.with_extension("pgm"))?;
            let (_, h, w) = image.chw()?;
            if (labels.h, labels.w) != (h, w) {
                return Err(Error::Data(format!(
                    "{}: image is {h}×{w} but labels are {}×{}",
                    path.display(),
                    labels.h,
                    labels.w
                )));
            }
            Ok(Sample {
                name: stem(path),
                image,
                labels,
            })
        })
        .collect()
}
