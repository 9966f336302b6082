//! Reference and target geometry: triangle meshes, scalar volumes, landmarks, and the
//! nearest-point queries registration is built on.

mod closest;
mod distance;
mod image;
pub mod io;
mod mesh;
mod points;

pub use closest::{closest_point_on_triangle, ClosestPointIndex, ClosestPoint};
pub use distance::{surface_distance, symmetric_surface_distance, SurfaceDistance};
pub use image::ScalarImage;
pub use mesh::TriangleMesh;
pub use points::PointIndex;

use nalgebra::{Point3, Vector3};

/// A location in millimetres.
pub type Point = Point3<f64>;
/// A displacement in millimetres.
pub type Vector = Vector3<f64>;

/// A named point, as clicked on a reference or target shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub name: String,
    pub point: Point,
}

impl Landmark {
    pub fn new(name: impl Into<String>, point: Point) -> Self {
        Landmark {
            name: name.into(),
            point,
        }
    }
}

pub(crate) fn is_finite_point(p: &Point) -> bool {
    p.coords.iter().all(|c| c.is_finite())
}
