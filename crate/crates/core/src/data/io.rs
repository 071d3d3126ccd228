//! On-disk dataset layout:
//!
//! - `manifest.json`: format version, domain, class names, dims, count, seed
//!   and the CRC-32 of each binary file
//! - `images.bin`: `u8`, per example channel, then row, then column
//! - `labels.bin`: `u16` little-endian
//! - `masks.bin`: one bit per pixel, row-major, most significant bit first

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::DomainDataset;
use super::render::{Style, CLASS_NAMES};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

const IMAGES: &str = "images.bin";
const LABELS: &str = "labels.bin";
const MASKS: &str = "masks.bin";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub domain: String,
    pub style: Style,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub images: FileEntry,
    pub labels: FileEntry,
    pub masks: FileEntry,
}

fn entry(name: &str, bytes: &[u8]) -> FileEntry {
    FileEntry {
        name: name.to_string(),
        bytes: bytes.len() as u64,
        crc32: crc32fast::hash(bytes),
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len)
        .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
        .collect()
}

fn encode(ds: &DomainDataset) -> Result<(Manifest, Vec<u8>, Vec<u8>)> {
    let mut labels = Vec::with_capacity(ds.len() * 2);
    for &y in &ds.labels {
        let y = u16::try_from(y).map_err(|_| Error::Input(format!("label {y} exceeds u16")))?;
        labels.extend_from_slice(&y.to_le_bytes());
    }
    let masks = pack_bits(&ds.masks);
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        domain: ds.domain.clone(),
        style: ds.style,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        channels: ds.channels,
        height: ds.height,
        width: ds.width,
        count: ds.len(),
        seed: ds.seed,
        images: entry(IMAGES, &ds.images),
        labels: entry(LABELS, &labels),
        masks: entry(MASKS, &masks),
    };
    Ok((manifest, labels, masks))
}

pub fn save(ds: &DomainDataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (manifest, labels, masks) = encode(ds)?;
    fs::write(dir.join(IMAGES), &ds.images)?;
    fs::write(dir.join(LABELS), labels)?;
    fs::write(dir.join(MASKS), masks)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let raw = fs::read(dir.as_ref().join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn read_checked(dir: &Path, e: &FileEntry, expected_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(&e.name))?;
    if bytes.len() != expected_len || e.bytes != expected_len as u64 {
        return Err(Error::Integrity(format!(
            "{}: {} bytes on disk, manifest says {}, count implies {expected_len}",
            e.name,
            bytes.len(),
            e.bytes
        )));
    }
    let crc = crc32fast::hash(&bytes);
    if crc != e.crc32 {
        return Err(Error::Integrity(format!(
            "{}: checksum {crc:08x} does not match manifest {:08x}",
            e.name, e.crc32
        )));
    }
    Ok(bytes)
}

/// Loads and verifies a dataset; nothing is returned unless every file
/// matches its manifest entry.
pub fn load(dir: impl AsRef<Path>) -> Result<DomainDataset> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    if m.class_names.len() != CLASS_NAMES.len() {
        return Err(Error::Format(format!(
            "{} classes in manifest",
            m.class_names.len()
        )));
    }
    let pixels = m.height * m.width;
    let images = read_checked(dir, &m.images, m.count * m.channels * pixels)?;
    let label_bytes = read_checked(dir, &m.labels, m.count * 2)?;
    let mask_bytes = read_checked(dir, &m.masks, (m.count * pixels).div_ceil(8))?;
    let labels: Vec<usize> = label_bytes
        .chunks_exact(2)
        .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
        .collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= m.class_names.len()) {
        return Err(Error::Integrity(format!("label {bad} out of range")));
    }
    Ok(DomainDataset {
        domain: m.domain,
        style: m.style,
        seed: m.seed,
        channels: m.channels,
        height: m.height,
        width: m.width,
        images,
        labels,
        masks: unpack_bits(&mask_bytes, m.count * pixels),
    })
}
