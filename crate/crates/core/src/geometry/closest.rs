use super::{Point, TriangleMesh, Vector};
use crate::{Error, Result};

const LEAF_SIZE: usize = 4;

/// Closest point on the triangle `(a, b, c)` to `p`, by Voronoi-region classification
/// (three vertex regions, three edge regions, the face).
pub fn closest_point_on_triangle(p: &Point, a: &Point, b: &Point, c: &Point) -> Point {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Result of a nearest-surface-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub point: Point,
    pub distance: f64,
    pub triangle: usize,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vector,
    max: Vector,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Vector::repeat(f64::INFINITY),
            max: Vector::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    fn distance_squared(&self, p: &Vector) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over the triangles of a mesh, answering exact
/// point-to-surface nearest-point queries.
#[derive(Debug, Clone)]
pub struct ClosestPointIndex {
    triangles: Vec<[Point; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl ClosestPointIndex {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::invalid("closest-point index needs a nonempty mesh"));
        }
        let triangles: Vec<[Point; 3]> = (0..mesh.triangles().len()).map(|i| mesh.triangle(i)).collect();
        let centroids: Vec<Vector> = triangles
            .iter()
            .map(|t| (t[0].coords + t[1].coords + t[2].coords) / 3.0)
            .collect();
        let mut index = ClosestPointIndex {
            order: (0..triangles.len()).collect(),
            triangles,
            nodes: Vec::new(),
        };
        let n = index.order.len();
        index.build(&centroids, 0, n);
        Ok(index)
    }

    fn build(&mut self, centroids: &[Vector], start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &self.order[start..end] {
            for v in &self.triangles[t] {
                bounds.grow(&v.coords);
            }
            cbounds.grow(&centroids[t]);
        }
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return slot;
        }
        let extent = cbounds.max - cbounds.min;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        self.nodes.push(Node::Leaf { bounds, start, end });
        let left = self.build(centroids, start, mid);
        let right = self.build(centroids, mid, end);
        let mut merged = *self.nodes[left].bounds();
        merged.merge(self.nodes[right].bounds());
        self.nodes[slot] = Node::Inner {
            bounds: merged,
            left,
            right,
        };
        slot
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Exact nearest point on the triangle set. Ties go to the lowest triangle index.
    pub fn closest_point(&self, x: &Point) -> ClosestPoint {
        let mut best = ClosestPoint {
            point: *x,
            distance: f64::INFINITY,
            triangle: usize::MAX,
        };
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            match &self.nodes[node] {
                Node::Leaf { bounds, start, end } => {
                    if bounds.distance_squared(&x.coords) > best_d2 {
                        continue;
                    }
                    for &t in &self.order[*start..*end] {
                        let [a, b, c] = &self.triangles[t];
                        let q = closest_point_on_triangle(x, a, b, c);
                        let d2 = (q - x).norm_squared();
                        if d2 < best_d2 || (d2 == best_d2 && t < best.triangle) {
                            best_d2 = d2;
                            best = ClosestPoint {
                                point: q,
                                distance: 0.0,
                                triangle: t,
                            };
                        }
                    }
                }
                Node::Inner { bounds, left, right } => {
                    if bounds.distance_squared(&x.coords) > best_d2 {
                        continue;
                    }
                    let dl = self.nodes[*left].bounds().distance_squared(&x.coords);
                    let dr = self.nodes[*right].bounds().distance_squared(&x.coords);
                    // Visit the nearer child first.
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best.distance = best_d2.sqrt();
        best
    }

    /// Exhaustive scan over every triangle; the oracle for [`closest_point`](Self::closest_point).
    pub fn closest_point_brute_force(&self, x: &Point) -> ClosestPoint {
        let mut best = ClosestPoint {
            point: *x,
            distance: f64::INFINITY,
            triangle: usize::MAX,
        };
        let mut best_d2 = f64::INFINITY;
        for (t, [a, b, c]) in self.triangles.iter().enumerate() {
            let q = closest_point_on_triangle(x, a, b, c);
            let d2 = (q - x).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best = ClosestPoint {
                    point: q,
                    distance: 0.0,
                    triangle: t,
                };
            }
        }
        best.distance = best_d2.sqrt();
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

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
    fn empty_mesh_fails_at_construction() {
        let mesh = TriangleMesh::new(vec![], vec![]).unwrap();
        assert!(ClosestPointIndex::new(&mesh).is_err());
    }

    #[test]
    fn vertex_query_returns_vertex() {
        let mesh = TriangleMesh::icosphere(Point::origin(), 3.0, 2).unwrap();
        let index = ClosestPointIndex::new(&mesh).unwrap();
        for v in mesh.vertices() {
            let cp = index.closest_point(v);
            assert!(cp.distance < 1e-12);
            assert!((cp.point - v).norm() < 1e-12);
        }
    }

    #[test]
    fn above_vertex_region() {
        let index = ClosestPointIndex::new(&unit_triangle()).unwrap();
        let cp = index.closest_point(&Point::new(0.0, 0.0, 1.0));
        assert_eq!(cp.point, Point::new(0.0, 0.0, 0.0));
        assert_eq!(cp.distance, 1.0);
    }

    #[test]
    fn above_interior_projects_orthogonally() {
        let index = ClosestPointIndex::new(&unit_triangle()).unwrap();
        let cp = index.closest_point(&Point::new(0.25, 0.25, 0.7));
        assert!((cp.point - Point::new(0.25, 0.25, 0.0)).norm() < 1e-15);
        assert!((cp.distance - 0.7).abs() < 1e-15);
    }

    #[test]
    fn edge_regions() {
        let (a, b, c) = (
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
        );
        let q = closest_point_on_triangle(&Point::new(0.5, -1.0, 0.0), &a, &b, &c);
        assert!((q - Point::new(0.5, 0.0, 0.0)).norm() < 1e-15);
        let q = closest_point_on_triangle(&Point::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((q - Point::new(0.5, 0.5, 0.0)).norm() < 1e-15);
        let q = closest_point_on_triangle(&Point::new(-1.0, 0.5, 2.0), &a, &b, &c);
        assert!((q - Point::new(0.0, 0.5, 0.0)).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn bvh_matches_exhaustive_scan(
            seed in 0u64..1000,
            qx in -3.0f64..3.0, qy in -3.0f64..3.0, qz in -3.0f64..3.0,
        ) {
            // <= 200 triangles: a perturbed sphere so the tree is non-trivial.
            let sphere = TriangleMesh::uv_sphere(Point::origin(), 1.5, 8, 12).unwrap();
            let mesh = sphere.map_vertices(|i, p| {
                let k = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed);
                let jitter = ((k >> 33) as f64 / (1u64 << 31) as f64) - 0.5;
                p + p.coords * 0.2 * jitter
            }).unwrap();
            prop_assert!(mesh.triangles().len() <= 200);
            let index = ClosestPointIndex::new(&mesh).unwrap();
            let x = Point::new(qx, qy, qz);
            let fast = index.closest_point(&x);
            let slow = index.closest_point_brute_force(&x);
            prop_assert_eq!(fast.distance, slow.distance);
            prop_assert_eq!(fast.triangle, slow.triangle);
            prop_assert_eq!(fast.point, slow.point);
        }
    }
}
