//! MNIST IDX files, optionally gzip compressed.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// File contents, transparently gunzipped when the gzip magic is present.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset: offset as u64, detail: detail.into() }
}

/// Checks the magic and returns the dimensions and the payload offset.
fn header(path: &Path, bytes: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, usize)> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| format_err(path, bytes.len(), format!("truncated header, need {} bytes", at + 4)))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_err(path, 0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let dims = (0..rank).map(|k| word(4 + 4 * k).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let expected = start + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(format_err(path, bytes.len(), format!("truncated: dimensions {dims:?} need {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(path, expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok((dims, start))
}

/// Images as `[N, 1, rows, cols]` with pixels divided by 255.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let (dims, start) = header(path, &bytes, IDX_IMAGES, 3)?;
    let data = bytes[start..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let (_, start) = header(path, &bytes, IDX_LABELS, 1)?;
    Ok(bytes[start..].to_vec())
}

/// Loads an image file and its label file into a 10-class dataset.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(image_path)?;
    let labels = read_idx_labels(label_path)?;
    if labels.len() != images.shape()[0] {
        return Err(format_err(label_path, 4, format!("{} labels for {} images", labels.len(), images.shape()[0])));
    }
    if let Some(at) = labels.iter().position(|&l| l > 9) {
        return Err(format_err(label_path, 8 + at, format!("label {} outside 0..=9", labels[at])));
    }
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10)
}

fn write(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut bytes = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("write_idx", format!("extent {d} too large")))?;
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `count` images of `rows × cols` raw bytes.
pub fn write_idx_images(path: &Path, pixels: &[u8], count: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::shape("write_idx_images", format!("{} bytes for {count}×{rows}×{cols}", pixels.len())));
    }
    write(path, IDX_IMAGES, &[count, rows, cols], pixels)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write(path, IDX_LABELS, &[labels.len()], labels)
}
