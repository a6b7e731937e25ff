//! Big-endian IDX containers as used by the MNIST distribution.

use std::fs;
use std::path::Path;

use super::LabeledData;
use crate::error::{Error, Result};
use crate::nn::{Activations, Shape};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw `u8` images, row-major per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format("idx", field, "file ends inside the header"))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(Error::format(
            "idx",
            "magic",
            format!("expected 0x{expected:08x}, found 0x{magic:08x}"),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() != expected {
        return Err(Error::format(
            "idx",
            "payload",
            format!(
                "{count} images of {rows}x{cols} need {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            "idx",
            "payload",
            format!("{count} labels need {count} bytes, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read(path)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read(path)?)
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::dim(
            "idx images",
            images.count * images.rows * images.cols,
            images.pixels.len(),
        ));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGE_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Images scaled to `[0, 1]` and zero-padded by `padding` pixels per side.
pub fn load_mnist_idx(image_path: &Path, label_path: &Path, padding: usize) -> Result<LabeledData> {
    let images = read_idx_images(image_path)?;
    let labels = read_idx_labels(label_path)?;
    if labels.len() != images.count {
        return Err(Error::format(
            "idx",
            "count",
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    let (h, w) = (images.rows + 2 * padding, images.cols + 2 * padding);
    let mut data = vec![0.0; images.count * h * w];
    for (n, img) in images
        .pixels
        .chunks_exact(images.rows * images.cols)
        .enumerate()
    {
        let dst = &mut data[n * h * w..(n + 1) * h * w];
        for r in 0..images.rows {
            for c in 0..images.cols {
                dst[(r + padding) * w + c + padding] = f64::from(img[r * images.cols + c]) / 255.0;
            }
        }
    }
    let shape = Shape::Image { h, w, c: 1 };
    LabeledData::new(
        Activations::new(images.count, shape, data)?,
        labels.into_iter().map(usize::from).collect(),
    )
}
