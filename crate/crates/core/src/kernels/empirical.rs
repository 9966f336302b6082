use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::Deserialize;

use crate::geometry::{io, Point, PointIndex, Vector};
use crate::{Error, Result};

/// One example deformation: a displacement vector at each reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub points: Vec<Point>,
    pub vectors: Vec<Vector>,
}

impl DeformationField {
    pub fn new(points: Vec<Point>, vectors: Vec<Vector>) -> Result<Self> {
        if points.len() != vectors.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} displacement vectors",
                points.len(),
                vectors.len()
            )));
        }
        Ok(DeformationField { points, vectors })
    }

    pub fn from_pairs(pairs: Vec<(Point, Vector)>) -> Self {
        let (points, vectors) = pairs.into_iter().unzip();
        DeformationField { points, vectors }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Checks that all fields live on the same reference points and returns them.
pub(crate) fn shared_reference(fields: &[DeformationField]) -> Result<Vec<Point>> {
    let first = fields.first().ok_or_else(|| Error::invalid("no deformation fields given"))?;
    if first.is_empty() {
        return Err(Error::invalid("deformation fields have no points"));
    }
    for (k, f) in fields.iter().enumerate() {
        if f.points.len() != f.vectors.len() {
            return Err(Error::DimensionMismatch(format!("field {k} has unequal point and vector counts")));
        }
        let same = f.points.len() == first.points.len()
            && f
                .points
                .iter()
                .zip(&first.points)
                .all(|(p, q)| (p - q).norm() <= 1e-9 * (1.0 + q.coords.norm()));
        if !same {
            return Err(Error::DimensionMismatch(format!(
                "field {k} is not defined on the same reference points as field 0"
            )));
        }
    }
    Ok(first.points.clone())
}

/// Sample covariance of example deformations,
/// `k(x, y) = 1/(n-1) sum_i (u_i(x) - mu(x)) (u_i(y) - mu(y))^T`,
/// evaluated off the reference points at the nearest reference point.
#[derive(Debug)]
pub struct EmpiricalKernel {
    index: PointIndex,
    mean: Vec<Vector>,
    /// `deviations[p * n + i] = (u_i(x_p) - mu(x_p)) / sqrt(n - 1)`
    deviations: Vec<Vector>,
    n_fields: usize,
    source: Option<PathBuf>,
}

#[derive(Deserialize)]
struct Manifest {
    reference: PathBuf,
    fields: Vec<PathBuf>,
}

impl EmpiricalKernel {
    pub fn new(fields: &[DeformationField]) -> Result<Self> {
        if fields.len() < 2 {
            return Err(Error::invalid("the sample covariance kernel needs at least 2 deformation fields"));
        }
        let points = shared_reference(fields)?;
        let n = fields.len();
        let norm = 1.0 / ((n - 1) as f64).sqrt();
        let mut mean = Vec::with_capacity(points.len());
        let mut deviations = Vec::with_capacity(points.len() * n);
        for p in 0..points.len() {
            let mu = fields.iter().map(|f| f.vectors[p]).sum::<Vector>() / n as f64;
            mean.push(mu);
            deviations.extend(fields.iter().map(|f| (f.vectors[p] - mu) * norm));
        }
        Ok(EmpiricalKernel {
            index: PointIndex::new(points),
            mean,
            deviations,
            n_fields: n,
            source: None,
        })
    }

    /// Loads a JSON manifest `{"reference": "ref.ply", "fields": ["a.csv", ...]}`; relative
    /// paths are resolved against the manifest's directory. Each CSV (`x,y,z,dx,dy,dz`) must
    /// list the reference vertices in order.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let reference = io::read_ply(&base.join(&manifest.reference))?;
        let mut fields = Vec::with_capacity(manifest.fields.len());
        for rel in &manifest.fields {
            let path = base.join(rel);
            let field = DeformationField::from_pairs(io::read_displacements(&path)?);
            let matches = field.points.len() == reference.vertices().len()
                && field
                    .points
                    .iter()
                    .zip(reference.vertices())
                    .all(|(p, q)| (p - q).norm() <= 1e-6 * (1.0 + q.coords.norm()));
            if !matches {
                return Err(Error::format(&path, "displacement points do not match the reference vertices"));
            }
            fields.push(DeformationField {
                points: reference.vertices().to_vec(),
                vectors: field.vectors,
            });
        }
        let mut kernel = Self::new(&fields)?;
        kernel.source = Some(manifest_path.to_path_buf());
        Ok(kernel)
    }

    /// Manifest this kernel was loaded from, if any.
    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn reference_points(&self) -> &[Point] {
        self.index.points()
    }

    fn nearest(&self, x: &Point) -> usize {
        self.index.nearest(x).expect("reference set is nonempty")
    }

    /// Sample mean `mu(x)` at the nearest reference point.
    pub fn mean_at(&self, x: &Point) -> Vector {
        self.mean[self.nearest(x)]
    }

    pub fn eval(&self, x: &Point, y: &Point) -> Matrix3<f64> {
        let (i, j) = (self.nearest(x), self.nearest(y));
        let n = self.n_fields;
        let dx = &self.deviations[i * n..(i + 1) * n];
        let dy = &self.deviations[j * n..(j + 1) * n];
        dx.iter().zip(dy).map(|(a, b)| a * b.transpose()).sum()
    }
}
