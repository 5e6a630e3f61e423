use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::LabeledDataset;
use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::rng_from_seed;

pub const RING_RADIUS: f64 = 4.0;
pub const GRID_SPACING: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Ring,
    Grid,
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Geometry::Ring),
            "grid" => Ok(Geometry::Grid),
            other => Err(Error::config("dataset.geometry", format!("unknown geometry `{other}`"))),
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Geometry::Ring => "ring",
            Geometry::Grid => "grid",
        })
    }
}

/// Class centres in the plane.
pub fn class_means(k: usize, geometry: Geometry) -> Vec<[f64; 2]> {
    match geometry {
        Geometry::Ring => (0..k)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                [RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin()]
            })
            .collect(),
        Geometry::Grid => {
            let side = (k as f64).sqrt().ceil() as usize;
            let offset = (side as f64 - 1.0) / 2.0;
            (0..k)
                .map(|c| {
                    let (i, j) = (c % side, c / side);
                    [
                        (i as f64 - offset) * GRID_SPACING,
                        (j as f64 - offset) * GRID_SPACING,
                    ]
                })
                .collect()
        }
    }
}

/// Isotropic Gaussian blobs around the class centres. Row `i` belongs to
/// class `i % k`.
pub fn generate_toy_dataset(
    k: usize,
    n_per_class: usize,
    geometry: Geometry,
    noise_scale: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 classes, got {k}")));
    }
    if n_per_class < 2 {
        return Err(Error::Domain(format!("need at least 2 samples per class, got {n_per_class}")));
    }
    if !(noise_scale > 0.0) || !noise_scale.is_finite() {
        return Err(Error::Domain(format!("noise scale must be positive, got {noise_scale}")));
    }
    let means = class_means(k, geometry);
    let mut rng = rng_from_seed(seed);
    let n = k * n_per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for m in means[c] {
            data.push(m + noise_scale * rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(c);
    }
    LabeledDataset::new(Array::new(vec![n, 2], data)?, labels, k)
}
