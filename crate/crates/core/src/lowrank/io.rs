//! Model files: a JSON manifest plus little-endian float64 sidecars.
//!
//! ```text
//! model.gpm               manifest (format "gpmm-lowrank/1")
//! model.points.f64        n x 3 Nystrom points, row-major
//! model.weights.f64       n quadrature weights
//! model.basis.f64         (n d) x r basis weights, row-major
//! model.mean.f64          (n d) mean weights, posterior models only
//! ```
//!
//! The manifest embeds the kernel DSL, so loading needs nothing else; dataset paths in
//! the DSL should be absolute.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LowRankGp, MeanFunction, QuadratureSet};
use crate::geometry::{io::sibling, Point};
use crate::kernels::dsl::parse_kernel;
use crate::{Error, Result};

pub const FORMAT: &str = "gpmm-lowrank/1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelManifest {
    pub format: String,
    pub kernel_dsl: String,
    pub mean_ref: String,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub r: usize,
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
    /// The reference shape or image the model was built on, if any.
    pub domain: Option<PathBuf>,
    pub nystrom_points: String,
    pub quadrature_weights: String,
    pub eigenvector_matrix: String,
    pub mean_weights: Option<String>,
}

/// Writes raw little-endian float64 values.
pub fn write_f64s(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads raw little-endian float64 values, checking the count.
pub fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("expected {expected} float64 values, found {} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
        .collect())
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| m[(r, c)]))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Saves a model; `domain`, `n` and `seed` are recorded for provenance.
pub fn save_model(path: &Path, gp: &LowRankGp, domain: Option<&Path>, seed: u64) -> Result<()> {
    let dsl = gp
        .kernel_dsl()
        .ok_or_else(|| Error::invalid("the model has no kernel DSL text attached and cannot be saved"))?;
    let stem = stem(path);
    let names = [
        format!("{stem}.points.f64"),
        format!("{stem}.weights.f64"),
        format!("{stem}.basis.f64"),
        format!("{stem}.mean.f64"),
    ];
    let q = gp.quadrature();
    write_f64s(&sibling(path, &names[0]), q.points.iter().flat_map(|p| [p.x, p.y, p.z]))?;
    write_f64s(&sibling(path, &names[1]), q.weights.iter().copied())?;
    write_f64s(&sibling(path, &names[2]), row_major(gp.basis_weights()))?;
    if let Some(m) = gp.mean_weights() {
        write_f64s(&sibling(path, &names[3]), m.iter().copied())?;
    }
    let manifest = ModelManifest {
        format: FORMAT.into(),
        kernel_dsl: dsl.to_string(),
        mean_ref: gp.mean_function().reference().into(),
        dim: gp.dim(),
        n: q.len(),
        seed,
        r: gp.rank(),
        eigenvalues: gp.eigenvalues().to_vec(),
        total_variance: gp.total_variance(),
        domain: domain.map(|d| relative_to_manifest(path, d)),
        nystrom_points: names[0].clone(),
        quadrature_weights: names[1].clone(),
        eigenvector_matrix: names[2].clone(),
        mean_weights: gp.mean_weights().map(|_| names[3].clone()),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn manifest_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Domain paths below the manifest's directory are stored relative to it, so a model
/// directory can be moved and identical runs in different directories write identical files.
fn relative_to_manifest(manifest: &Path, domain: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let domain = abs(domain);
    let base = abs(manifest_dir(manifest));
    domain.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(domain)
}

/// Reads and checks a manifest; a relative domain path is resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<ModelManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(path, format!("unsupported model format '{}'", manifest.format)));
    }
    if let Some(d) = manifest.domain.as_mut().filter(|d| d.is_relative()) {
        *d = manifest_dir(path).join(&*d);
    }
    Ok(manifest)
}

/// Loads a model saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<(LowRankGp, ModelManifest)> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let kernel = parse_kernel(&manifest.kernel_dsl)?.compile(base)?;
    if kernel.dim() != manifest.dim {
        return Err(Error::format(path, "kernel output dimension does not match the manifest"));
    }
    let (n, nd, r) = (manifest.n, manifest.n * manifest.dim, manifest.r);
    if manifest.eigenvalues.len() != r {
        return Err(Error::format(path, "eigenvalue count does not match r"));
    }
    let coords = read_f64s(&sibling(path, &manifest.nystrom_points), n * 3)?;
    let points = coords.chunks_exact(3).map(|c| Point::new(c[0], c[1], c[2])).collect();
    let weights = read_f64s(&sibling(path, &manifest.quadrature_weights), n)?;
    let basis = DMatrix::from_row_slice(nd, r, &read_f64s(&sibling(path, &manifest.eigenvector_matrix), nd * r)?);
    let mean_weights = match &manifest.mean_weights {
        Some(name) => Some(DVector::from_vec(read_f64s(&sibling(path, name), nd)?)),
        None => None,
    };
    let mean = MeanFunction::from_reference(&manifest.mean_ref, &kernel)?;
    let gp = LowRankGp::from_parts(
        kernel,
        mean,
        QuadratureSet { points, weights },
        mean_weights,
        basis,
        manifest.eigenvalues.clone(),
        manifest.total_variance,
    )?
    .with_kernel_dsl(manifest.kernel_dsl.clone());
    Ok((gp, manifest))
}
