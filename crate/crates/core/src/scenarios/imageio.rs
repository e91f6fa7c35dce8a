//! On-disk image and label formats.
//!
//! Images are single-channel 8/16-bit PNG or a raw little-endian float32
//! grid behind a 16-byte header (`CSB1`, `u32` height, `u32` width, `u32`
//! reserved). Label maps are 8-bit PNG holding class ids.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

pub const RAW_MAGIC: &[u8; 4] = b"CSB1";
const RAW_HEADER: usize = 16;

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * img.data.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in &img.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < RAW_HEADER || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Shape("missing CSB1 header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let body = &bytes[RAW_HEADER..];
    if body.len() != 4 * h * w {
        return Err(Error::Shape(format!(
            "CSB1 body has {} bytes, header declares {h}x{w} float32",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Image::from_vec(h, w, data)
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_raw(img)).map_err(|e| Error::io(path, e))
}

/// Read an image in either supported format; the raw format is recognised
/// by its magic, anything else must decode as single-channel PNG.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        return decode_raw(&bytes);
    }
    let dynamic = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let data: Vec<f64> = match dynamic {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Shape(format!(
                "{}: expected a single-channel PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::from_vec(h, w, data)
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    match reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode()? {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            LabelMap::from_vec(h, w, g.into_raw())
        }
        other => Err(Error::Shape(format!(
            "{}: label maps must be 8-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(label.width as u32, label.height as u32, label.data.clone())
        .ok_or_else(|| Error::Shape("label buffer does not match its dimensions".into()))?;
    img.save(path)?;
    Ok(())
}

/// Write an image as 16-bit PNG after min-max scaling; lossy, for viewing.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (((v - lo) / span) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, px)
        .ok_or_else(|| Error::Shape("image buffer does not match its dimensions".into()))?;
    buf.save(path)?;
    Ok(())
}
