//! Synthetic T1-like brain volumes with exact ground truth.
//!
//! Geometry in normalized ellipsoid coordinates: the outer surface is a
//! low-order deformation of the unit sphere, a thin CSF shell lines it, the
//! GM/WM boundary undulates sinusoidally around radius 0.62, and two CSF
//! ventricles sit in the WM core. The brain ellipsoid is taller than the
//! volume along z, so every axial slice cuts through tissue.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Convention, Dims, LabelVolume, Provenance, Volume, BACKGROUND, CSF, GM, WM};
use crate::error::{Error, Result};

/// Smallest in-plane extent; leaves room for a 40×40 patch with margin.
pub const MIN_PHANTOM_SIDE: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub seed: u64,
    /// Noise standard deviation as a fraction of the smallest gap between tissue means.
    pub noise_std: f64,
    /// Peak relative amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
    pub csf_mean: f64,
    pub gm_mean: f64,
    pub wm_mean: f64,
}

impl PhantomSpec {
    pub fn new(dims: Dims, seed: u64) -> Self {
        Self {
            dims,
            seed,
            noise_std: 0.1,
            bias_amplitude: 0.1,
            csf_mean: 0.25,
            gm_mean: 0.55,
            wm_mean: 0.85,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.x < MIN_PHANTOM_SIDE || d.y < MIN_PHANTOM_SIDE || d.z < 1 {
            return Err(Error::InvalidArgument(format!(
                "phantom dims {d} too small: need at least {MIN_PHANTOM_SIDE} in x and y and 1 in z"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(Error::InvalidArgument(format!(
                "bias_amplitude must lie in [0, 1), got {}",
                self.bias_amplitude
            )));
        }
        if !(0.0 < self.csf_mean
            && self.csf_mean < self.gm_mean
            && self.gm_mean < self.wm_mean
            && self.wm_mean.is_finite())
        {
            return Err(Error::InvalidArgument(
                "tissue means must satisfy 0 < CSF < GM < WM".into(),
            ));
        }
        Ok(())
    }
}

/// Per-seed shape parameters.
struct Geometry {
    center: [f64; 3],
    radii: [f64; 3],
    outer: [(f64, f64); 3],
    fold_freq: f64,
    fold_amp: f64,
    fold_phase: [f64; 2],
    ventricle_shift: f64,
}

impl Geometry {
    fn sample(dims: Dims, rng: &mut ChaCha8Rng) -> Self {
        let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
        let (x, y, z) = (dims.x as f64, dims.y as f64, dims.z as f64);
        Self {
            center: [
                (x - 1.0) / 2.0 + jitter(rng, 0.02 * x),
                (y - 1.0) / 2.0 + jitter(rng, 0.02 * y),
                (z - 1.0) / 2.0,
            ],
            radii: [
                0.43 * x * (1.0 + jitter(rng, 0.04)),
                0.45 * y * (1.0 + jitter(rng, 0.04)),
                // deep enough that the outermost slices still cut well inside the shell
                (0.9 * z).max(0.45 * x.min(y)),
            ],
            outer: [
                (rng.random_range(0.02..0.05), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(0.01..0.04), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(0.01..0.03), rng.random_range(0.0..2.0 * PI)),
            ],
            fold_freq: rng.random_range(5..=8) as f64,
            fold_amp: rng.random_range(0.06..0.10),
            fold_phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            ventricle_shift: jitter(rng, 0.04),
        }
    }

    fn label(&self, x: f64, y: f64, z: f64) -> u8 {
        let u = (x - self.center[0]) / self.radii[0];
        let v = (y - self.center[1]) / self.radii[1];
        let w = (z - self.center[2]) / self.radii[2];
        let theta = v.atan2(u);
        let phi = w.atan2(u.hypot(v));
        let [(a2, p2), (a3, p3), (ae, pe)] = self.outer;
        let surface = 1.0 + a2 * (2.0 * theta + p2).sin() + a3 * (3.0 * theta + p3).cos() + ae * (2.0 * phi + pe).sin();
        let r = (u * u + v * v + w * w).sqrt() / surface;
        if r > 1.0 {
            return BACKGROUND;
        }
        if r > 0.965 {
            return CSF;
        }
        let fold =
            (self.fold_freq * theta + self.fold_phase[0]).sin() * (0.7 + 0.3 * (3.0 * phi + self.fold_phase[1]).cos());
        if r >= 0.62 + self.fold_amp * fold {
            return GM;
        }
        let in_ventricle = |cx: f64| {
            let (du, dv, dw) = ((u - cx) / 0.07, (v + 0.05) / 0.22, w / 0.5);
            du * du + dv * dv + dw * dw <= 1.0
        };
        if in_ventricle(0.13 + self.ventricle_shift) || in_ventricle(-0.13 + self.ventricle_shift) {
            return CSF;
        }
        WM
    }
}

/// Sum of a few random low-frequency cosines, scaled into [−amp, amp].
struct BiasField {
    terms: Vec<([f64; 3], f64)>,
    amp: f64,
}

impl BiasField {
    fn sample(amp: f64, rng: &mut ChaCha8Rng) -> Self {
        let terms = (0..3)
            .map(|_| {
                let k = [
                    rng.random_range(0.5..1.5),
                    rng.random_range(0.5..1.5),
                    rng.random_range(0.0..1.0),
                ];
                (k, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { terms, amp }
    }

    /// `p` in unit-cube coordinates.
    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .terms
            .iter()
            .map(|(k, phase)| (PI * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + phase).cos())
            .sum();
        self.amp * s / self.terms.len() as f64
    }
}

/// Intensity volume plus its labels in the model convention.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let d = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = Geometry::sample(d, &mut rng);
    let bias = BiasField::sample(spec.bias_amplitude, &mut rng);
    let gap = (spec.gm_mean - spec.csf_mean).min(spec.wm_mean - spec.gm_mean);
    let noise = Normal::new(0.0, spec.noise_std * gap).expect("validated std");

    let mut labels = Vec::with_capacity(d.len());
    let mut voxels = Vec::with_capacity(d.len());
    for z in 0..d.z {
        for y in 0..d.y {
            for x in 0..d.x {
                let label = geometry.label(x as f64, y as f64, z as f64);
                let mean = match label {
                    GM => spec.gm_mean,
                    WM => spec.wm_mean,
                    CSF => spec.csf_mean,
                    _ => 0.0,
                };
                let value = if label == BACKGROUND {
                    0.0
                } else {
                    let p = [x as f64 / d.x as f64, y as f64 / d.y as f64, z as f64 / d.z as f64];
                    // keep tissue strictly positive so it stays distinguishable from air
                    (mean * (1.0 + bias.at(p)) + noise.sample(&mut rng)).max(1e-3)
                };
                labels.push(label);
                voxels.push(value);
            }
        }
    }
    Ok((
        Volume::new(d, voxels, Provenance::Phantom { seed: spec.seed })?,
        LabelVolume::new(d, labels, Convention::Model)?,
    ))
}
