//! IDX files: big-endian `u32` magic (`0x00000803` for 3-d `u8` image
//! stacks, `0x00000801` for `u8` label vectors), big-endian `u32`
//! dimensions, then raw bytes.

use std::fs;
use std::path::Path;

use super::synthetic::{images_to_dataset, ImageSet};
use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::parse(offset as u64, "truncated IDX header"))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::parse(
            0,
            format!("bad IDX magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let end = header + len;
    if bytes.len() < end {
        return Err(Error::parse(
            bytes.len() as u64,
            format!(
                "truncated IDX payload: {} of {len} bytes present",
                bytes.len().saturating_sub(header)
            ),
        ));
    }
    if bytes.len() > end {
        return Err(Error::parse(end as u64, "unexpected trailing bytes"));
    }
    Ok(&bytes[header..end])
}

/// Parses an image file and a label file held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ImageSet> {
    check_magic(images, IDX_IMAGES_MAGIC)?;
    let count = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let pixels = payload(images, 16, count * rows * cols)?.to_vec();

    check_magic(labels, IDX_LABELS_MAGIC)?;
    let label_count = read_u32(labels, 4)? as usize;
    if label_count != count {
        return Err(Error::parse(
            4,
            format!("label count {label_count} does not match image count {count}"),
        ));
    }
    let labels = payload(labels, 8, count)?.to_vec();
    Ok(ImageSet {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Loads an IDX image/label pair as flattened `[0, 1]` features. The class
/// count is one more than the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let set = parse_idx(&fs::read(images)?, &fs::read(labels)?)?;
    let num_classes = set
        .labels
        .iter()
        .map(|&l| usize::from(l) + 1)
        .max()
        .unwrap_or(0);
    images_to_dataset(&set, num_classes, Split::Train)
}

pub fn encode_idx(set: &ImageSet) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + set.pixels.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [set.len(), set.rows, set.cols] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend_from_slice(&set.pixels);
    let mut labels = Vec::with_capacity(8 + set.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(set.len() as u32).to_be_bytes());
    labels.extend_from_slice(&set.labels);
    (images, labels)
}

pub fn write_idx(set: &ImageSet, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (i, l) = encode_idx(set);
    fs::write(images, i)?;
    fs::write(labels, l)?;
    Ok(())
}
