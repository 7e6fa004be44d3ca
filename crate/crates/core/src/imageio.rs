//! Single-channel images, label masks and PFM score maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

/// Per-pixel class assignment: 0 is background, `c + 1` is class `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn background(width: usize, height: usize) -> Self {
        LabelMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    pub fn foreground_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn read_luma(path: &Path) -> Result<image::GrayImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(img.to_luma8())
}

fn write_luma(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Loads a PNG or PGM as grayscale.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let luma = read_luma(path)?;
    GrayImage::from_u8(luma.width() as usize, luma.height() as usize, luma.as_raw())
}

pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_luma(path.as_ref(), img.width, img.height, img.to_u8())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let luma = read_luma(path)?;
    Ok(LabelMask {
        width: luma.width() as usize,
        height: luma.height() as usize,
        data: luma.into_raw(),
    })
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_luma(path.as_ref(), mask.width, mask.height, mask.data.clone())
}

/// Writes a single-channel little-endian PFM (`Pf`, negative scale). Rows are
/// stored bottom to top as the format requires; `data` is top-to-bottom.
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if data.len() != width * height {
        return Err(Error::Shape(format!(
            "{} values for a {width}x{height} map",
            data.len()
        )));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    for y in (0..height).rev() {
        for &v in &data[y * width..(y + 1) * width] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    ensure_parent(path)?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a single-channel PFM written by [`write_pfm`] (either endianness).
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    if fields[0] != "Pf" {
        return Err(image_err(path, "not a single-channel PFM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| image_err(path, e));
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    let scale: f64 = fields[3].parse().map_err(|e| image_err(path, e))?;
    let payload = bytes
        .get(pos..pos + width * height * 4)
        .ok_or_else(|| image_err(path, "truncated PFM payload"))?;
    let mut data = vec![0.0; width * height];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row_from_bottom, x) = (i / width, i % width);
        data[(height - 1 - row_from_bottom) * width + x] = f64::from(v);
    }
    Ok((width, height, data))
}
