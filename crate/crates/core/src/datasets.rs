//! Two-dimensional toy distributions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AgmError, Result};
use crate::samplers::MixtureForce;

/// Draws used for the cached empirical standard deviation.
pub const SIGMA_DATA_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetKind {
    /// `modes` equal-weight isotropic Gaussians evenly spaced on a circle.
    Mog { modes: usize, radius: f64, std: f64 },
    /// `rolls` interleaved spirals scaled into `[-4, 4]²`.
    SwissRoll { rolls: usize, noise: f64 },
    /// Isotropic Gaussian, mostly useful as a calibration stand-in.
    Gaussian { std: f64 },
}

impl DatasetKind {
    pub fn mog8() -> Self {
        DatasetKind::Mog { modes: 8, radius: 4.0, std: 0.2 }
    }

    pub fn swiss_roll() -> Self {
        DatasetKind::SwissRoll { rolls: 2, noise: 0.05 }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            DatasetKind::Mog { modes, radius, std } => modes >= 1 && radius >= 0.0 && std >= 0.0 && radius.is_finite() && std.is_finite(),
            DatasetKind::SwissRoll { rolls, noise } => rolls >= 1 && noise >= 0.0 && noise.is_finite(),
            DatasetKind::Gaussian { std } => std > 0.0 && std.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(AgmError::Config(format!("invalid dataset parameters {self:?}")))
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Mog { .. } => f.write_str("mog"),
            DatasetKind::SwissRoll { .. } => f.write_str("swissroll"),
            DatasetKind::Gaussian { .. } => f.write_str("gaussian"),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = AgmError;
    /// Default parameters for a named dataset.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mog" | "mog8" => Ok(DatasetKind::mog8()),
            "swissroll" | "swiss_roll" | "swiss-roll" => Ok(DatasetKind::swiss_roll()),
            "gaussian" => Ok(DatasetKind::Gaussian { std: 1.0 }),
            other => Err(AgmError::Config(format!("unknown dataset {other:?} (expected mog|swissroll|gaussian)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub seed: u64,
    sigma_data: f64,
}

impl ToyDataset {
    /// Builds the dataset and caches `sigma_data` from a seeded reference sample.
    pub fn new(kind: DatasetKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        let mut ds = ToyDataset { kind, seed, sigma_data: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = ds.sample(SIGMA_DATA_DRAWS, &mut rng);
        ds.sigma_data = population_std(&pts);
        if !(ds.sigma_data > 0.0) {
            return Err(AgmError::Config(format!("dataset {kind:?} has zero spread")));
        }
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        2
    }

    /// Population standard deviation over all coordinates of the reference sample.
    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    /// `n` points, row-major `n × 2`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (a, b) = self.point(rng);
            out.push(a);
            out.push(b);
        }
        out
    }

    fn point<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match self.kind {
            DatasetKind::Mog { modes, radius, std } => {
                let k = rng.random_range(0..modes);
                let (cx, cy) = mode_center(k, modes, radius);
                let mut normal = || -> f64 { StandardNormal.sample(rng) };
                (cx + std * normal(), cy + std * normal())
            }
            DatasetKind::SwissRoll { rolls, noise } => {
                let r = rng.random_range(0..rolls);
                let u: f64 = rng.random();
                let theta = SWISS_THETA_MIN + (SWISS_THETA_MAX - SWISS_THETA_MIN) * u.sqrt();
                let phase = 2.0 * PI * r as f64 / rolls as f64;
                let scale = 4.0 / SWISS_THETA_MAX;
                let mut normal = || -> f64 { StandardNormal.sample(rng) };
                (
                    scale * theta * (theta + phase).cos() + noise * normal(),
                    scale * theta * (theta + phase).sin() + noise * normal(),
                )
            }
            DatasetKind::Gaussian { std } => {
                let mut normal = || -> f64 { StandardNormal.sample(rng) };
                (std * normal(), std * normal())
            }
        }
    }

    /// Mode centres for mixture datasets.
    pub fn modes(&self) -> Vec<[f64; 2]> {
        match self.kind {
            DatasetKind::Mog { modes, radius, .. } => (0..modes)
                .map(|k| {
                    let (x, y) = mode_center(k, modes, radius);
                    [x, y]
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Exact marginal force for Gaussian and mixture datasets.
    pub fn mixture_force(&self) -> Option<MixtureForce> {
        match self.kind {
            DatasetKind::Mog { modes, std, .. } => {
                let centers = self.modes().into_iter().flatten().collect();
                MixtureForce::new(2, centers, vec![1.0; modes], std).ok()
            }
            DatasetKind::Gaussian { std } => MixtureForce::new(2, vec![0.0; 2], vec![1.0], std).ok(),
            DatasetKind::SwissRoll { .. } => None,
        }
    }

    /// Index of the nearest mode centre, `None` for datasets without modes.
    pub fn nearest_mode(&self, p: &[f64]) -> Option<usize> {
        nearest(&self.modes(), p)
    }

    /// Fraction of points assigned to each mode.
    pub fn occupancy(&self, points: &[f64]) -> Vec<f64> {
        let centers = self.modes();
        let mut counts = vec![0usize; centers.len()];
        let n = points.len() / 2;
        for p in points.chunks_exact(2) {
            if let Some(k) = nearest(&centers, p) {
                counts[k] += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
    }
}

const SWISS_THETA_MIN: f64 = 1.5 * PI;
const SWISS_THETA_MAX: f64 = 4.5 * PI;

fn mode_center(k: usize, modes: usize, radius: f64) -> (f64, f64) {
    let a = 2.0 * PI * k as f64 / modes as f64;
    (radius * a.cos(), radius * a.sin())
}

fn nearest(centers: &[[f64; 2]], p: &[f64]) -> Option<usize> {
    centers
        .iter()
        .enumerate()
        .map(|(k, c)| (k, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}
