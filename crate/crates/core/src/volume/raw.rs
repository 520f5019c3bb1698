//! Bare little-endian payloads whose dims are supplied out of band.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use byteorder::{ByteOrder as _, LittleEndian};

use super::{Convention, Dims, LabelVolume, Provenance, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Element {
    U8,
    I16,
    F32,
    F64,
}

impl Element {
    pub fn size(self) -> usize {
        match self {
            Element::U8 => 1,
            Element::I16 => 2,
            Element::F32 => 4,
            Element::F64 => 8,
        }
    }

    /// Widens a little-endian payload to f64.
    pub(crate) fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Element::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
            Element::I16 => bytes
                .chunks_exact(2)
                .map(|c| f64::from(LittleEndian::read_i16(c)))
                .collect(),
            Element::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(LittleEndian::read_f32(c)))
                .collect(),
            Element::F64 => bytes.chunks_exact(8).map(LittleEndian::read_f64).collect(),
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Element::U8 => "u8",
            Element::I16 => "i16",
            Element::F32 => "f32",
            Element::F64 => "f64",
        })
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Element::U8),
            "i16" => Ok(Element::I16),
            "f32" => Ok(Element::F32),
            "f64" => Ok(Element::F64),
            _ => Err(Error::InvalidArgument(format!("unknown element type '{s}'"))),
        }
    }
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub fn load_raw(path: impl AsRef<Path>, dims: Dims, element: Element) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_exact_len(path, dims.len() * element.size())?;
    Volume::new(dims, element.decode(&bytes), Provenance::File(path.to_path_buf()))
}

/// Writes the voxels as f64 little-endian.
pub fn save_raw(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = vec![0u8; volume.voxels().len() * 8];
    LittleEndian::write_f64_into(volume.voxels(), &mut bytes);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_labels_raw(path: impl AsRef<Path>, dims: Dims, convention: Convention) -> Result<LabelVolume> {
    let bytes = read_exact_len(path.as_ref(), dims.len())?;
    LabelVolume::new(dims, bytes, convention)
}

/// Writes one u8 class id per voxel.
pub fn save_labels_raw(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, labels.labels()).map_err(|e| Error::io(path, e))
}
