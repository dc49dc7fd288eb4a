//! MNIST IDX container parsing.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::DigitImage;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, msg: msg.into() })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => format_err(offset, "truncated header"),
    }
}

/// Image file: returns one 784-pixel buffer per image, scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return format_err(0, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != SIDE || cols != SIDE {
        return format_err(8, format!("image dimensions {rows}x{cols}, expected 28x28"));
    }
    let payload = &bytes[16..];
    let needed = count * PIXELS;
    if payload.len() < needed {
        return format_err(
            16 + payload.len(),
            format!("payload holds {} bytes, header promises {count} images ({needed} bytes)", payload.len()),
        );
    }
    if payload.len() > needed {
        return format_err(16 + needed, "trailing bytes after last image");
    }
    Ok(payload
        .chunks_exact(PIXELS)
        .map(|img| img.iter().map(|&b| b as f32 / 255.0).collect())
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return format_err(0, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return format_err(
            8 + payload.len().min(count),
            format!("header promises {count} labels, payload has {}", payload.len()),
        );
    }
    if let Some(pos) = payload.iter().position(|&b| b > 9) {
        return format_err(8 + pos, format!("label byte {} is not a digit", payload[pos]));
    }
    Ok(payload.to_vec())
}

/// Pairs an image file with its label file.
pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<Vec<DigitImage>> {
    let pixels = parse_idx_images(images)?;
    let digits = parse_idx_labels(labels)?;
    if pixels.len() != digits.len() {
        return format_err(4, format!("{} images but {} labels", pixels.len(), digits.len()));
    }
    Ok(pixels
        .into_iter()
        .zip(digits)
        .map(|(pixels, digit)| DigitImage { pixels, digit })
        .collect())
}

/// Reads a file, transparently inflating it if it is gzip-compressed.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} not found (also tried .gz)", dir.join(stem).display()),
    )))
}

/// MNIST training and test pools from a directory holding the four standard
/// files (`train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ...), plain
/// or gzip-compressed.
pub fn load_mnist_dir(dir: &Path) -> Result<(Vec<DigitImage>, Vec<DigitImage>)> {
    let load = |prefix: &str| -> Result<Vec<DigitImage>> {
        let images = read_maybe_gz(&locate(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
        let labels = read_maybe_gz(&locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
        parse_idx_pair(&images, &labels)
    };
    Ok((load("train")?, load("t10k")?))
}
