//! Discrete model files: a JSON manifest plus little-endian float64 sidecars.
//!
//! ```text
//! model.ssm                manifest (format "gpmm-discrete/1")
//! model.points.f64         N x 3 reference points, row-major
//! model.mean.f64           3N mean displacement, point-major (x, y, z per point)
//! model.basis.f64          3N x r basis, row-major, rows point-major
//! model.variances.f64      r variances
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::DiscreteModel;
use crate::geometry::{io::sibling, Point};
use crate::lowrank::io::{read_f64s, row_major, write_f64s};
use crate::{Error, Result};

pub const FORMAT: &str = "gpmm-discrete/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteManifest {
    pub format: String,
    pub n_points: usize,
    pub rank: usize,
    pub variances: Vec<f64>,
    pub points: String,
    pub mean: String,
    pub basis: String,
    pub variances_file: String,
}

pub fn save_discrete(path: &Path, model: &DiscreteModel) -> Result<()> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let names = [
        format!("{stem}.points.f64"),
        format!("{stem}.mean.f64"),
        format!("{stem}.basis.f64"),
        format!("{stem}.variances.f64"),
    ];
    write_f64s(&sibling(path, &names[0]), model.points.iter().flat_map(|p| [p.x, p.y, p.z]))?;
    write_f64s(&sibling(path, &names[1]), model.mean.iter().copied())?;
    write_f64s(&sibling(path, &names[2]), row_major(&model.basis))?;
    write_f64s(&sibling(path, &names[3]), model.variances.iter().copied())?;
    let [points, mean, basis, variances_file] = names;
    let manifest = DiscreteManifest {
        format: FORMAT.into(),
        n_points: model.points.len(),
        rank: model.rank(),
        variances: model.variances.clone(),
        points,
        mean,
        basis,
        variances_file,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_discrete(path: &Path) -> Result<DiscreteModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DiscreteManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::format(path, format!("unsupported model format '{}'", m.format)));
    }
    let (n, r) = (m.n_points, m.rank);
    let p = read_f64s(&sibling(path, &m.points), n * 3)?;
    let points = p.chunks_exact(3).map(|c| Point::new(c[0], c[1], c[2])).collect();
    let mean = DVector::from_vec(read_f64s(&sibling(path, &m.mean), n * 3)?);
    let basis = DMatrix::from_row_slice(n * 3, r, &read_f64s(&sibling(path, &m.basis), n * 3 * r)?);
    let model = DiscreteModel::new(points, mean, basis)?;
    let stored = read_f64s(&sibling(path, &m.variances_file), r)?;
    if stored != model.variances {
        return Err(Error::format(path, "stored variances do not match the basis"));
    }
    Ok(model)
}
