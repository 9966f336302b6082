use super::{Point, Vector};
use crate::{Error, Result};

/// A scalar volume on a regular axis-aligned grid. Voxel `(i, j, k)` has its centre at
/// `origin + (i, j, k) * spacing` and is stored at `i + dims[0] * (j + dims[1] * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    dims: [usize; 3],
    spacing: Vector,
    origin: Point,
    voxels: Vec<f64>,
    mask: Option<Vec<bool>>,
    out_of_domain: f64,
}

impl ScalarImage {
    pub fn new(dims: [usize; 3], spacing: Vector, origin: Point, voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("image dimensions must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("image spacing must be positive, got {spacing}")));
        }
        let count = dims[0] * dims[1] * dims[2];
        if voxels.len() != count {
            return Err(Error::DimensionMismatch(format!(
                "{} voxels for dimensions {dims:?}",
                voxels.len()
            )));
        }
        Ok(ScalarImage {
            dims,
            spacing,
            origin,
            voxels,
            mask: None,
            out_of_domain: 0.0,
        })
    }

    /// Samples `f` at every voxel centre.
    pub fn from_fn(dims: [usize; 3], spacing: Vector, origin: Point, f: impl Fn(&Point) -> f64) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = origin + Vector::new(i as f64 * spacing.x, j as f64 * spacing.y, k as f64 * spacing.z);
                    voxels.push(f(&p));
                }
            }
        }
        ScalarImage::new(dims, spacing, origin, voxels)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.voxels.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries for {} voxels",
                mask.len(),
                self.voxels.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_out_of_domain_value(mut self, value: f64) -> Self {
        self.out_of_domain = value;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vector {
        self.spacing
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn out_of_domain_value(&self) -> f64 {
        self.out_of_domain
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f64 {
        self.voxels[self.linear_index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point {
        self.origin
            + Vector::new(
                i as f64 * self.spacing.x,
                j as f64 * self.spacing.y,
                k as f64 * self.spacing.z,
            )
    }

    /// Centres of all voxels inside the mask (all voxels when unmasked), in storage order.
    pub fn masked_voxel_centers(&self) -> Vec<Point> {
        let mut out = Vec::new();
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let inside = self
                        .mask
                        .as_ref()
                        .is_none_or(|m| m[self.linear_index(i, j, k)]);
                    if inside {
                        out.push(self.voxel_center(i, j, k));
                    }
                }
            }
        }
        out
    }

    /// Cell index and fractional offset along every axis, or `None` outside the domain.
    fn locate(&self, x: &Point) -> Option<([usize; 3], [f64; 3])> {
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let mut c = (x[a] - self.origin[a]) / self.spacing[a];
            // Snap round-off so voxel centres hit stored values exactly.
            if (c - c.round()).abs() < 1e-9 {
                c = c.round();
            }
            let n = self.dims[a];
            if !c.is_finite() {
                return None;
            }
            if n == 1 {
                if c.abs() > 0.5 {
                    return None;
                }
                continue;
            }
            if c < 0.0 || c > (n - 1) as f64 {
                return None;
            }
            let i = (c.floor() as usize).min(n - 2);
            cell[a] = i;
            frac[a] = c - i as f64;
        }
        if let Some(mask) = &self.mask {
            let nearest: Vec<usize> = (0..3)
                .map(|a| {
                    if self.dims[a] == 1 {
                        0
                    } else {
                        cell[a] + usize::from(frac[a] >= 0.5)
                    }
                })
                .collect();
            if !mask[self.linear_index(nearest[0], nearest[1], nearest[2])] {
                return None;
            }
        }
        Some((cell, frac))
    }

    fn corner(&self, cell: &[usize; 3], offset: [usize; 3]) -> f64 {
        let idx = |a: usize| if self.dims[a] == 1 { 0 } else { cell[a] + offset[a] };
        self.voxel(idx(0), idx(1), idx(2))
    }

    /// Trilinear interpolation; the configured out-of-domain value outside the grid or mask.
    pub fn interpolate(&self, x: &Point) -> f64 {
        self.interpolate_with_gradient(x).0
    }

    /// Spatial gradient of the trilinear interpolant; zero outside the domain.
    pub fn gradient(&self, x: &Point) -> Vector {
        self.interpolate_with_gradient(x).1
    }

    pub fn interpolate_with_gradient(&self, x: &Point) -> (f64, Vector) {
        let Some((cell, f)) = self.locate(x) else {
            return (self.out_of_domain, Vector::zeros());
        };
        let mut c = [[[0.0; 2]; 2]; 2];
        for (di, plane) in c.iter_mut().enumerate() {
            for (dj, row) in plane.iter_mut().enumerate() {
                for (dk, v) in row.iter_mut().enumerate() {
                    *v = self.corner(&cell, [di, dj, dk]);
                }
            }
        }
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        // Reduce along z, then y, then x, keeping the partial derivatives.
        let mut cz = [[0.0; 2]; 2];
        let mut dz = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cz[i][j] = lerp(c[i][j][0], c[i][j][1], f[2]);
                dz[i][j] = c[i][j][1] - c[i][j][0];
            }
        }
        let mut cy = [0.0; 2];
        let mut dy = [0.0; 2];
        let mut dzy = [0.0; 2];
        for i in 0..2 {
            cy[i] = lerp(cz[i][0], cz[i][1], f[1]);
            dy[i] = cz[i][1] - cz[i][0];
            dzy[i] = lerp(dz[i][0], dz[i][1], f[1]);
        }
        let value = lerp(cy[0], cy[1], f[0]);
        let gx = cy[1] - cy[0];
        let gy = lerp(dy[0], dy[1], f[0]);
        let gz = lerp(dzy[0], dzy[1], f[0]);
        let mut grad = Vector::new(gx / self.spacing.x, gy / self.spacing.y, gz / self.spacing.z);
        for a in 0..3 {
            if self.dims[a] == 1 {
                grad[a] = 0.0;
            }
        }
        (value, grad)
    }
}
