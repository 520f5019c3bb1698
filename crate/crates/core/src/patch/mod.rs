//! Tri-slice 40×40 patches tiled at stride 10 over axial slices.
//!
//! A [`Dataset`] keeps normalized volumes and a list of patch origins;
//! patches are cut out on demand when a batch is assembled.

use crate::error::{Error, Result};
use crate::net::{INPUT_CHANNELS, PATCH_SIDE};
use crate::tensor::{Shape, Tensor};
use crate::volume::{Convention, LabelVolume, Volume, BACKGROUND};

pub const STRIDE: usize = 10;

/// Origins `0, stride, 2·stride, …` plus a clamped final origin `dim − patch`
/// so that the last window touches the border.
pub fn tile_positions(dim: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch and stride must be positive".into()));
    }
    if dim < patch {
        return Err(Error::InvalidArgument(format!(
            "dimension {dim} is smaller than the patch side {patch}"
        )));
    }
    let last = dim - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    Ok(origins)
}

/// Window origins for one axial slice of `height` rows by `width` columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub y_origins: Vec<usize>,
    pub x_origins: Vec<usize>,
}

impl TilePlan {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            height,
            width,
            y_origins: tile_positions(height, PATCH_SIDE, STRIDE)?,
            x_origins: tile_positions(width, PATCH_SIDE, STRIDE)?,
        })
    }

    pub fn for_volume(v: &Volume) -> Result<Self> {
        Self::new(v.dims().y, v.dims().x)
    }

    pub fn len(&self) -> usize {
        self.y_origins.len() * self.x_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(y, x)` origins, rows outermost.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.y_origins
            .iter()
            .flat_map(move |&y| self.x_origins.iter().map(move |&x| (y, x)))
    }

    /// Number of windows covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for (y0, x0) in self.origins() {
            for y in y0..y0 + PATCH_SIDE {
                counts[y * self.width + x0..y * self.width + x0 + PATCH_SIDE]
                    .iter_mut()
                    .for_each(|c| *c += 1);
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchOrigin {
    pub volume: usize,
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchStack {
    /// (3, 40, 40): slices z−1, z, z+1.
    pub input: Vec<f64>,
    /// (40, 40) labels of slice z.
    pub labels: Vec<u8>,
    pub origin: PatchOrigin,
}

fn check_window(v: &Volume, z: usize, y: usize, x: usize) -> Result<()> {
    let d = v.dims();
    if z >= d.z || y + PATCH_SIDE > d.y || x + PATCH_SIDE > d.x {
        return Err(Error::InvalidArgument(format!(
            "patch origin (z {z}, y {y}, x {x}) out of bounds for dims {d}"
        )));
    }
    Ok(())
}

/// Writes the (3, 40, 40) input stack at `(z, y, x)` into `out`; missing
/// neighbours at the first and last slice repeat the edge slice.
pub fn extract_input_into(v: &Volume, z: usize, y: usize, x: usize, out: &mut [f64]) -> Result<()> {
    check_window(v, z, y, x)?;
    let d = v.dims();
    let slices = [z.saturating_sub(1), z, (z + 1).min(d.z - 1)];
    for (c, &s) in slices.iter().enumerate() {
        let plane = v.slice(s);
        for r in 0..PATCH_SIDE {
            let src = &plane[(y + r) * d.x + x..(y + r) * d.x + x + PATCH_SIDE];
            out[(c * PATCH_SIDE + r) * PATCH_SIDE..(c * PATCH_SIDE + r + 1) * PATCH_SIDE].copy_from_slice(src);
        }
    }
    Ok(())
}

fn extract_labels_into(lv: &LabelVolume, z: usize, y: usize, x: usize, out: &mut [u8]) {
    let d = lv.dims();
    let plane = lv.slice(z);
    for r in 0..PATCH_SIDE {
        out[r * PATCH_SIDE..(r + 1) * PATCH_SIDE]
            .copy_from_slice(&plane[(y + r) * d.x + x..(y + r) * d.x + x + PATCH_SIDE]);
    }
}

pub fn extract_patch_stack(
    v: &Volume,
    labels: &LabelVolume,
    volume: usize,
    z: usize,
    y: usize,
    x: usize,
) -> Result<PatchStack> {
    if labels.dims() != v.dims() {
        return Err(Error::InvalidArgument(format!(
            "label dims {} differ from volume dims {}",
            labels.dims(),
            v.dims()
        )));
    }
    let mut input = vec![0.0; INPUT_CHANNELS * PATCH_SIDE * PATCH_SIDE];
    extract_input_into(v, z, y, x, &mut input)?;
    let mut out = vec![0; PATCH_SIDE * PATCH_SIDE];
    extract_labels_into(labels, z, y, x, &mut out);
    Ok(PatchStack {
        input,
        labels: out,
        origin: PatchOrigin { volume, z, y, x },
    })
}

/// Mean and standard deviation of a volume's nonzero voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn of(v: &Volume) -> Self {
        let tissue: Vec<f64> = v.voxels().iter().copied().filter(|&x| x != 0.0).collect();
        if tissue.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = tissue.len() as f64;
        let mean = tissue.iter().sum::<f64>() / n;
        let var = tissue.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Z-scores every voxel with the statistics of the volume's nonzero voxels.
pub fn normalize_volume(v: &Volume) -> Result<(Volume, NormStats)> {
    let stats = NormStats::of(v);
    Ok((v.map(|x| stats.apply(x))?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Default background filter: drop only patches that are entirely background.
pub const DEFAULT_MAX_BG_FRACTION: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub role: Role,
    volumes: Vec<Volume>,
    labels: Vec<LabelVolume>,
    stats: Vec<NormStats>,
    origins: Vec<PatchOrigin>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[PatchOrigin] {
        &self.origins
    }

    pub fn stats(&self) -> &[NormStats] {
        &self.stats
    }

    /// Normalized volumes in input order.
    pub fn volumes(&self) -> &[Volume] {
        &self.volumes
    }

    pub fn patch(&self, i: usize) -> PatchStack {
        let o = self.origins[i];
        extract_patch_stack(&self.volumes[o.volume], &self.labels[o.volume], o.volume, o.z, o.y, o.x)
            .expect("origins are validated at construction")
    }

    /// Fraction of background pixels in the label window of patch `i`.
    pub fn background_fraction(&self, i: usize) -> f64 {
        let o = self.origins[i];
        let mut window = vec![0; PATCH_SIDE * PATCH_SIDE];
        extract_labels_into(&self.labels[o.volume], o.z, o.y, o.x, &mut window);
        window.iter().filter(|&&l| l == BACKGROUND).count() as f64 / window.len() as f64
    }

    /// Stacks the listed patches into an (N, 3, 40, 40) tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let per = INPUT_CHANNELS * PATCH_SIDE * PATCH_SIDE;
        let plane = PATCH_SIDE * PATCH_SIDE;
        let mut data = vec![0.0; indices.len() * per];
        let mut labels = vec![0; indices.len() * plane];
        for (k, &i) in indices.iter().enumerate() {
            let o = self.origins[i];
            extract_input_into(
                &self.volumes[o.volume],
                o.z,
                o.y,
                o.x,
                &mut data[k * per..(k + 1) * per],
            )
            .expect("origins are validated at construction");
            extract_labels_into(
                &self.labels[o.volume],
                o.z,
                o.y,
                o.x,
                &mut labels[k * plane..(k + 1) * plane],
            );
        }
        let shape = Shape::new(indices.len(), INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE);
        (Tensor::new(shape, data).expect("sized above"), labels)
    }

    /// Keeps the patches selected by `keep`, preserving order.
    pub fn retain(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let kept: Vec<PatchOrigin> = (0..self.len()).filter(|&i| keep(i)).map(|i| self.origins[i]).collect();
        self.origins = kept;
    }

    /// First `n` patches, mainly for tests and smoke runs.
    pub fn truncated(&self, n: usize) -> Self {
        let mut d = self.clone();
        d.origins.truncate(n);
        d
    }
}

/// Drops patches whose background fraction reaches `max_bg_fraction`. With the
/// default 1.0 only fully background patches go. Returns the number dropped.
pub fn filter_background(ds: &mut Dataset, max_bg_fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&max_bg_fraction) {
        return Err(Error::InvalidArgument(format!(
            "max background fraction must lie in [0, 1], got {max_bg_fraction}"
        )));
    }
    let fractions: Vec<f64> = (0..ds.len()).map(|i| ds.background_fraction(i)).collect();
    let before = ds.len();
    ds.retain(|i| fractions[i] < max_bg_fraction);
    Ok(before - ds.len())
}

/// Normalizes each volume with its own statistics and enumerates every tile of
/// every axial slice, volume by volume, then z, y, x. Training sets are
/// background-filtered with `max_bg_fraction`.
pub fn build_dataset(volumes: &[Volume], labels: &[LabelVolume], role: Role, max_bg_fraction: f64) -> Result<Dataset> {
    if volumes.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} volumes but {} label volumes",
            volumes.len(),
            labels.len()
        )));
    }
    let mut ds = Dataset {
        role,
        volumes: Vec::with_capacity(volumes.len()),
        labels: labels.to_vec(),
        stats: Vec::with_capacity(volumes.len()),
        origins: Vec::new(),
    };
    for (i, (v, lv)) in volumes.iter().zip(labels).enumerate() {
        lv.ensure_convention(Convention::Model)?;
        if lv.dims() != v.dims() {
            return Err(Error::InvalidArgument(format!(
                "volume {i}: label dims {} differ from intensity dims {}",
                lv.dims(),
                v.dims()
            )));
        }
        let plan = TilePlan::for_volume(v)?;
        let (normalized, stats) = normalize_volume(v)?;
        for z in 0..v.dims().z {
            ds.origins
                .extend(plan.origins().map(|(y, x)| PatchOrigin { volume: i, z, y, x }));
        }
        ds.volumes.push(normalized);
        ds.stats.push(stats);
    }
    if role == Role::Train {
        filter_background(&mut ds, max_bg_fraction)?;
    }
    Ok(ds)
}
