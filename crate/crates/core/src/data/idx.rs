//! IDX containers (MNIST layout): big-endian header, one byte per pixel or label.

use std::fs;
use std::path::Path;

use super::{Dataset, ImageGrid, ImageSet, Item, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated IDX header ({what})")))
}

fn record_id(index: usize) -> String {
    format!("{index:05}")
}

/// Parses an IDX image file already held in memory.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Vec<ImageGrid>> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(bytes, 4, "count")? as usize;
    let rows = read_u32_be(bytes, 8, "rows")? as usize;
    let cols = read_u32_be(bytes, 12, "cols")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Shape(format!(
            "IDX images are {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }
    let payload = &bytes[16..];
    let needed = count * IMAGE_PIXELS;
    if payload.len() < needed {
        return Err(Error::Format(format!(
            "truncated IDX payload: {} bytes for {count} images ({needed} needed)",
            payload.len()
        )));
    }
    payload[..needed]
        .chunks_exact(IMAGE_PIXELS)
        .map(|px| ImageGrid::new(px.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect()
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(bytes, 4, "count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "truncated IDX labels: {} bytes for {count} labels",
            payload.len()
        )));
    }
    Ok(payload[..count].to_vec())
}

/// Loads an unlabelled image set; ids are zero-padded record indices.
pub fn load_idx_images(path: &Path) -> Result<ImageSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let grids = decode_idx_images(&bytes)?;
    let items = grids
        .into_iter()
        .enumerate()
        .map(|(i, data)| Item {
            id: record_id(i),
            data,
            label: None,
        })
        .collect();
    Dataset::new(items, Vec::new(), IMAGE_PIXELS)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_idx_labels(&bytes)
}

/// Loads images with a companion label file. Class names are the decimal label values.
pub fn load_idx_labelled(images: &Path, labels: &Path) -> Result<ImageSet> {
    let set = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != set.len() {
        return Err(Error::Format(format!(
            "{} labels for {} images",
            labels.len(),
            set.len()
        )));
    }
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let classes = (0..n_classes).map(|c| c.to_string()).collect();
    let items = set
        .items()
        .iter()
        .zip(&labels)
        .map(|(item, &l)| Item {
            id: item.id.clone(),
            data: item.data.clone(),
            label: Some(l as usize),
        })
        .collect();
    Dataset::new(items, classes, IMAGE_PIXELS)
}

pub fn encode_idx_images(set: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.len() * IMAGE_PIXELS);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for item in set.items() {
        out.extend(
            item.data
                .pixels()
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    out
}

/// Writes pixels quantized to bytes. Item ids are not stored.
pub fn write_idx_images(set: &ImageSet, path: &Path) -> Result<()> {
    fs::write(path, encode_idx_images(set)).map_err(|e| Error::io(path, e))
}

/// Writes one label byte per item; class names must be the decimal values 0–255.
pub fn write_idx_labels(set: &ImageSet, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for item in set.items() {
        let label = item
            .label
            .ok_or_else(|| Error::Argument(format!("item {:?} has no label", item.id)))?;
        let value: u8 = set.classes()[label]
            .parse()
            .map_err(|_| Error::Argument(format!("class {:?} is not a byte", set.classes()[label])))?;
        out.push(value);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
