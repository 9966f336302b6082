use std::f64::consts::PI;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{is_finite_point, Point, Vector};
use crate::{Error, Result};

/// Triangles with an area below this are treated as degenerate and dropped at load.
const DEGENERATE_AREA: f64 = 1e-14;

/// An indexed triangle mesh. Watertightness is not required.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
}

impl TriangleMesh {
    /// Builds a mesh, rejecting out-of-range indices and non-finite vertices.
    /// Degenerate (zero-area) triangles are dropped with a warning.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(p) = vertices.iter().find(|p| !is_finite_point(p)) {
            return Err(Error::invalid(format!("non-finite vertex {p}")));
        }
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!(
                "triangle {t:?} references a vertex outside 0..{n}"
            )));
        }
        let mut kept = Vec::with_capacity(triangles.len());
        let mut areas = Vec::with_capacity(triangles.len());
        let mut dropped = 0usize;
        for t in triangles {
            let area = triangle_area(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
            if area > DEGENERATE_AREA {
                kept.push(t);
                areas.push(area);
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            warn!("dropped {dropped} degenerate triangle(s)");
        }
        Ok(TriangleMesh {
            vertices,
            triangles: kept,
            areas,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle_areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn triangle(&self, i: usize) -> [Point; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    /// Same connectivity, vertices moved by `f`.
    pub fn map_vertices(&self, mut f: impl FnMut(usize, &Point) -> Point) -> Result<Self> {
        let vertices = self
            .vertices
            .iter()
            .enumerate()
            .map(|(i, p)| f(i, p))
            .collect();
        TriangleMesh::new(vertices, self.triangles.clone())
    }

    /// Same connectivity with vertices displaced by `displacements[i]`.
    pub fn displaced(&self, displacements: &[Vector]) -> Result<Self> {
        if displacements.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} displacements for {} vertices",
                displacements.len(),
                self.vertices.len()
            )));
        }
        self.map_vertices(|i, p| p + displacements[i])
    }

    pub fn translated(&self, t: &Vector) -> Result<Self> {
        self.map_vertices(|_, p| p + t)
    }

    /// Area-uniform random points: a triangle is chosen with probability proportional to
    /// its area, then a barycentric-uniform point inside it.
    pub fn sample_surface_points(&self, n: usize, seed: u64) -> Result<Vec<Point>> {
        Ok(self
            .sample_surface_points_with_triangles(n, seed)?
            .into_iter()
            .map(|(_, p)| p)
            .collect())
    }

    /// Like [`sample_surface_points`](Self::sample_surface_points), also reporting the
    /// triangle each point was drawn from.
    pub fn sample_surface_points_with_triangles(
        &self,
        n: usize,
        seed: u64,
    ) -> Result<Vec<(usize, Point)>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::invalid("cannot sample an empty mesh"));
        }
        let mut cumulative = Vec::with_capacity(self.areas.len());
        let mut acc = 0.0;
        for a in &self.areas {
            acc += a;
            cumulative.push(acc);
        }
        let total = acc;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random::<f64>() * total;
            let tri = cumulative
                .partition_point(|&c| c <= target)
                .min(cumulative.len() - 1);
            let [a, b, c] = self.triangle(tri);
            let r1 = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let p = a.coords * (1.0 - r1) + b.coords * (r1 * (1.0 - r2)) + c.coords * (r1 * r2);
            out.push((tri, Point::from(p)));
        }
        Ok(out)
    }

    /// Latitude/longitude tessellation of a sphere with `stacks` bands and `slices`
    /// segments per band.
    pub fn uv_sphere(center: Point, radius: f64, stacks: usize, slices: usize) -> Result<Self> {
        if stacks < 2 || slices < 3 || radius <= 0.0 {
            return Err(Error::invalid("uv_sphere needs stacks >= 2, slices >= 3, radius > 0"));
        }
        let mut vertices = vec![center + Vector::new(0.0, 0.0, radius)];
        for i in 1..stacks {
            let theta = PI * i as f64 / stacks as f64;
            for j in 0..slices {
                let phi = 2.0 * PI * j as f64 / slices as f64;
                vertices.push(
                    center
                        + radius
                            * Vector::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()),
                );
            }
        }
        vertices.push(center + Vector::new(0.0, 0.0, -radius));
        let south = vertices.len() - 1;
        let ring = |i: usize, j: usize| 1 + (i - 1) * slices + (j % slices);
        let mut triangles = Vec::new();
        for j in 0..slices {
            triangles.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..stacks - 1 {
            for j in 0..slices {
                let (a, b) = (ring(i, j), ring(i, j + 1));
                let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
                triangles.push([a, c, d]);
                triangles.push([a, d, b]);
            }
        }
        for j in 0..slices {
            triangles.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
        }
        TriangleMesh::new(vertices, triangles)
    }

    /// Subdivided icosahedron projected onto a sphere.
    pub fn icosphere(center: Point, radius: f64, subdivisions: usize) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::invalid("icosphere radius must be positive"));
        }
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vector> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vector::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoint = std::collections::HashMap::new();
            let mut mid = |a: usize, b: usize, verts: &mut Vec<Vector>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let vertices = verts.into_iter().map(|v| center + v * radius).collect();
        TriangleMesh::new(vertices, faces)
    }
}

pub(crate) fn triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_triangle() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Point::new(0.0, 0.0, 0.0),
                Point::new(1.0, 0.0, 0.0),
                Point::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_indices() {
        let err = TriangleMesh::new(vec![Point::origin()], vec![[0, 1, 2]]);
        assert!(err.is_err());
    }

    #[test]
    fn drops_degenerate_triangles() {
        let mesh = TriangleMesh::new(
            vec![
                Point::new(0.0, 0.0, 0.0),
                Point::new(1.0, 0.0, 0.0),
                Point::new(2.0, 0.0, 0.0),
                Point::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 1, 3]],
        )
        .unwrap();
        assert_eq!(mesh.triangles(), &[[0, 1, 3]]);
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(unit_triangle().sample_surface_points(0, 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = TriangleMesh::icosphere(Point::origin(), 1.0, 1).unwrap();
        assert_eq!(
            m.sample_surface_points(100, 7).unwrap(),
            m.sample_surface_points(100, 7).unwrap()
        );
        assert_ne!(
            m.sample_surface_points(100, 7).unwrap(),
            m.sample_surface_points(100, 8).unwrap()
        );
    }

    #[test]
    fn triangle_sample_centroid() {
        // The uniform measure on a triangle has its mean at the vertex centroid.
        let pts = unit_triangle().sample_surface_points(10_000, 3).unwrap();
        let mean = pts.iter().fold(Vector::zeros(), |acc, p| acc + p.coords) / pts.len() as f64;
        let centroid = Vector::new(1.0 / 3.0, 1.0 / 3.0, 0.0);
        assert!((mean - centroid).norm() < 0.02 * centroid.norm(), "{mean}");
    }

    #[test]
    fn samples_lie_on_their_triangle() {
        let m = TriangleMesh::uv_sphere(Point::origin(), 2.0, 6, 8).unwrap();
        for (t, p) in m.sample_surface_points_with_triangles(200, 1).unwrap() {
            let [a, b, c] = m.triangle(t);
            let n = (b - a).cross(&(c - a)).normalize();
            assert!((p - a).dot(&n).abs() < 1e-12);
        }
    }

    #[test]
    fn triangle_histogram_matches_area_fractions() {
        let m = TriangleMesh::uv_sphere(Point::origin(), 1.0, 5, 6).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; m.triangles().len()];
        for (t, _) in m.sample_surface_points_with_triangles(n, 11).unwrap() {
            counts[t] += 1;
        }
        let total = m.area();
        for (count, area) in counts.iter().zip(m.triangle_areas()) {
            let p = area / total;
            let expected = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (*count as f64 - expected).abs() <= 3.0 * sd,
                "count {count} expected {expected} sd {sd}"
            );
        }
    }

    #[test]
    fn sphere_builders_are_closed_and_on_radius() {
        let uv = TriangleMesh::uv_sphere(Point::new(1.0, 2.0, 3.0), 5.0, 10, 12).unwrap();
        assert_eq!(uv.vertices().len(), 2 + 9 * 12);
        for v in uv.vertices() {
            assert!(((v - Point::new(1.0, 2.0, 3.0)).norm() - 5.0).abs() < 1e-12);
        }
        let ico = TriangleMesh::icosphere(Point::origin(), 1.0, 2).unwrap();
        assert_eq!(ico.vertices().len(), 162);
        assert_eq!(ico.triangles().len(), 320);
        // Euler characteristic of a closed genus-0 surface.
        let edges = ico.triangles().len() * 3 / 2;
        assert_eq!(ico.vertices().len() + ico.triangles().len() - edges, 2);
    }
}
