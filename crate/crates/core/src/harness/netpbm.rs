//! Binary PPM (P6) images and PGM (P5) class maps, 8 bits per sample.

use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageFormat};

use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::tensor::Tensor;

fn encode(bytes: &[u8], w: usize, h: usize, subtype: PnmSubtype, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .encode(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Data(format!("netpbm encode: {e}")))?;
    Ok(out)
}

fn decode(bytes: &[u8], what: &str) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Data(format!("{what}: {e}")))
}

pub fn encode_ppm(rgb: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    if rgb.len() != 3 * w * h {
        return Err(Error::dim(format!("{} bytes for a {w}×{h} RGB image", rgb.len())));
    }
    encode(rgb, w, h, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

pub fn encode_pgm(gray: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    if gray.len() != w * h {
        return Err(Error::dim(format!("{} bytes for a {w}×{h} gray image", gray.len())));
    }
    encode(gray, w, h, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

/// Returns `(rgb, width, height)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let img = decode(bytes, "PPM")?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w as usize, h as usize))
}

/// Returns `(gray, width, height)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let img = decode(bytes, "PGM")?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w as usize, h as usize))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `3×H×W` tensor in `[0, 1]` to interleaved RGB bytes.
pub fn tensor_to_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::dim(format!("RGB output needs 3 channels, got {c}")));
    }
    let d = image.data();
    let plane = h * w;
    Ok((0..plane)
        .flat_map(|p| (0..3).map(move |ch| quantize(d[ch * plane + p])))
        .collect())
}

pub fn rgb_to_tensor(rgb: &[u8], w: usize, h: usize) -> Result<Tensor> {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = f64::from(px[ch]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (_, h, w) = image.chw()?;
    write(path, &encode_ppm(&tensor_to_rgb(image)?, w, h)?)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let (rgb, w, h) = decode_ppm(&read(path)?).map_err(|e| in_file(e, path))?;
    rgb_to_tensor(&rgb, w, h)
}

pub fn save_labels(path: &Path, labels: &ClassMap) -> Result<()> {
    write(path, &encode_pgm(&labels.data, labels.w, labels.h)?)
}

pub fn load_labels(path: &Path) -> Result<ClassMap> {
    let (gray, w, h) = decode_pgm(&read(path)?).map_err(|e| in_file(e, path))?;
    ClassMap::new(h, w, gray)
}

pub fn save_rgb(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    write(path, &encode_ppm(rgb, w, h)?)
}

fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_byte_value_round_trips() {
        let gray: Vec<u8> = (0..=255).collect();
        let bytes = encode_pgm(&gray, 16, 16).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(decode_pgm(&bytes).unwrap(), (gray.clone(), 16, 16));

        let rgb: Vec<u8> = (0..=255u8).flat_map(|v| [v, 255 - v, v.wrapping_mul(7)]).collect();
        let bytes = encode_ppm(&rgb, 32, 8).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(decode_ppm(&bytes).unwrap(), (rgb, 32, 8));
    }

    #[test]
    fn tensor_quantization_round_trips() {
        let rgb: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let t = rgb_to_tensor(&rgb, 5, 4).unwrap();
        assert_eq!(t.shape(), &[3, 4, 5]);
        assert_eq!(tensor_to_rgb(&t).unwrap(), rgb);
    }

    #[test]
    fn comments_in_headers_are_accepted() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (vec![7, 255], 2, 1));
    }

    #[test]
    fn garbage_is_a_data_error() {
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x01"), Err(Error::Data(_))));
        assert!(matches!(decode_pgm(b"hello"), Err(Error::Data(_))));
        assert!(matches!(encode_pgm(&[1, 2, 3], 2, 2), Err(Error::Dimension(_))));
    }
}
