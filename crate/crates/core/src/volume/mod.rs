//! Intensity and label volumes, file formats, synthetic phantoms and splits.
//!
//! Voxel `(x, y, z)` is stored at `x + X·(y + Y·z)`, so an axial slice `z` is a
//! contiguous Y×X plane with `x` fastest.

mod nifti;
mod phantom;
mod raw;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use nifti::{load_nifti, write_nifti, ByteOrder, NiftiMeta};
pub use phantom::{generate_phantom, PhantomSpec, MIN_PHANTOM_SIDE};
pub use raw::{load_labels_raw, load_raw, save_labels_raw, save_raw, Element};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    pub fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per axial slice.
    pub fn slice_len(&self) -> usize {
        self.x * self.y
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.x * (y + self.y * z)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.x, self.y, self.z)
    }
}

/// Where a volume came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    File(PathBuf),
    Phantom { seed: u64 },
    Memory,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::File(p) => write!(f, "{}", p.display()),
            Provenance::Phantom { seed } => write!(f, "phantom:{seed}"),
            Provenance::Memory => f.write_str("memory"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f64>,
    pub provenance: Provenance,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if dims.x == 0 || dims.y == 0 || dims.z == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {dims}"
            )));
        }
        if voxels.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} voxels supplied for dims {dims}",
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "volume",
                layer: None,
            });
        }
        Ok(Self {
            dims,
            voxels,
            provenance,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.dims.index(x, y, z)]
    }

    /// Axial slice `z` as a Y×X row-major plane.
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.dims.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Applies `f` to every voxel; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Volume::new(
            self.dims,
            self.voxels.iter().map(|&v| f(v)).collect(),
            self.provenance.clone(),
        )
    }
}

/// Label numbering. `Model` (0 bg, 1 GM, 2 WM, 3 CSF) is used everywhere inside
/// the crate; `Ibsr` (0 bg, 1 CSF, 2 GM, 3 WM) only at file boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Convention {
    Ibsr,
    Model,
}

impl Convention {
    pub fn name(self) -> &'static str {
        match self {
            Convention::Ibsr => "ibsr",
            Convention::Model => "model",
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ibsr" => Ok(Convention::Ibsr),
            "model" => Ok(Convention::Model),
            _ => Err(Error::InvalidArgument(format!(
                "unknown label convention '{s}' (expected ibsr or model)"
            ))),
        }
    }
}

/// Tissue classes in the model convention.
pub const BACKGROUND: u8 = 0;
pub const GM: u8 = 1;
pub const WM: u8 = 2;
pub const CSF: u8 = 3;

const IBSR_TO_MODEL: [u8; 4] = [0, 3, 1, 2];
const MODEL_TO_IBSR: [u8; 4] = [0, 2, 3, 1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
    convention: Convention,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>, convention: Convention) -> Result<Self> {
        if dims.is_empty() || labels.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels supplied for dims {dims}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 3) {
            return Err(Error::InvalidLabel {
                label: bad as usize,
                classes: 4,
            });
        }
        Ok(Self {
            dims,
            labels,
            convention,
        })
    }

    /// Interprets an intensity volume holding integer class ids.
    pub fn from_volume(volume: &Volume, convention: Convention) -> Result<Self> {
        let labels = volume
            .voxels()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=3.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "label value {v} is not a class id in 0..=3"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(volume.dims(), labels, convention)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.dims.slice_len();
        &self.labels[z * n..(z + 1) * n]
    }

    /// Voxel count per class id.
    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        self.labels.iter().for_each(|&l| counts[l as usize] += 1);
        counts
    }

    pub fn ensure_convention(&self, expected: Convention) -> Result<()> {
        if self.convention != expected {
            return Err(Error::ConventionMismatch {
                expected: expected.to_string(),
                found: self.convention.to_string(),
            });
        }
        Ok(())
    }
}

pub fn remap_labels(lv: &LabelVolume, to: Convention) -> LabelVolume {
    let table = match (lv.convention, to) {
        (a, b) if a == b => return lv.clone(),
        (Convention::Ibsr, Convention::Model) => IBSR_TO_MODEL,
        _ => MODEL_TO_IBSR,
    };
    LabelVolume {
        dims: lv.dims,
        labels: lv.labels.iter().map(|&l| table[l as usize]).collect(),
        convention: to,
    }
}

/// Shuffles `ids` with `seed` and cuts it into train, validation and test groups.
pub fn split_volumes<T: Clone>(
    ids: &[T],
    train: usize,
    val: usize,
    test: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if train + val + test != ids.len() {
        return Err(Error::InvalidArgument(format!(
            "split {train}/{val}/{test} does not add up to {} volumes",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok((pick(0..train), pick(train..train + val), pick(train + val..ids.len())))
}
