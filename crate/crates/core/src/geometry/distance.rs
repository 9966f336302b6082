use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClosestPointIndex, TriangleMesh};
use crate::Result;

/// Mean and maximum of closest-point distances, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistance {
    pub mean: f64,
    pub max: f64,
}

/// One-sided distance from `a` to `b`: closest-point distances from `n_samples`
/// area-uniform samples on `a` to the surface `b`.
pub fn surface_distance(a: &TriangleMesh, b: &TriangleMesh, n_samples: usize, seed: u64) -> Result<SurfaceDistance> {
    let index = ClosestPointIndex::new(b)?;
    surface_distance_to(a, &index, n_samples, seed)
}

pub(crate) fn surface_distance_to(
    a: &TriangleMesh,
    b: &ClosestPointIndex,
    n_samples: usize,
    seed: u64,
) -> Result<SurfaceDistance> {
    let samples = a.sample_surface_points(n_samples, seed)?;
    let distances: Vec<f64> = samples
        .par_iter()
        .map(|p| b.closest_point(p).distance)
        .collect();
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    let max = distances.iter().copied().fold(0.0, f64::max);
    Ok(SurfaceDistance { mean, max })
}

/// Symmetric variant: the larger of the two one-sided means and maxima.
pub fn symmetric_surface_distance(
    a: &TriangleMesh,
    b: &TriangleMesh,
    n_samples: usize,
    seed: u64,
) -> Result<SurfaceDistance> {
    let ab = surface_distance(a, b, n_samples, seed)?;
    let ba = surface_distance(b, a, n_samples, seed)?;
    Ok(SurfaceDistance {
        mean: ab.mean.max(ba.mean),
        max: ab.max.max(ba.max),
    })
}
