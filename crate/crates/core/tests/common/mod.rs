#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpmm::geometry::io::{write_landmarks, write_mhd, write_ply};
use gpmm::geometry::{Landmark, ScalarImage, TriangleMesh};
use gpmm::{Point, Vector};

pub fn gpmm_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_gpmm"))
}

pub fn run_gpmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(gpmm_bin())
        .args(args)
        .current_dir(dir)
        .env_remove("GPMM_THREADS")
        .output()
        .expect("gpmm binary runs")
}

pub fn blob(center: Point, width: f64) -> impl Fn(&Point) -> f64 {
    move |p: &Point| 100.0 * (-(p - center).norm_squared() / (2.0 * width * width)).exp()
}

/// Small inputs for every subcommand, written into `dir`.
pub fn write_fixtures(dir: &Path) {
    let sphere = TriangleMesh::icosphere(Point::origin(), 20.0, 2).unwrap();
    write_ply(&dir.join("ref.ply"), &sphere).unwrap();
    std::fs::write(dir.join("kernel.kdsl"), "# smooth deformations\ngauss(4, 15)\n").unwrap();
    std::fs::write(dir.join("kernel1d.kdsl"), "scalar(kgauss(0.1))\n").unwrap();

    let target = sphere
        .map_vertices(|_, p| Point::new(p.x * 1.1, p.y, p.z * 0.95) + Vector::new(0.5, 0.0, 0.0))
        .unwrap();
    write_ply(&dir.join("target.ply"), &target).unwrap();

    std::fs::create_dir_all(dir.join("training")).unwrap();
    for (k, s) in [0.9, 1.0, 1.1].iter().enumerate() {
        let m = sphere.map_vertices(|_, p| Point::new(p.x * s, p.y, p.z)).unwrap();
        write_ply(&dir.join(format!("training/t{k}.ply")), &m).unwrap();
    }

    let names = ["north", "south", "east"];
    let ref_points = [Point::new(0.0, 0.0, 20.0), Point::new(0.0, 0.0, -20.0), Point::new(20.0, 0.0, 0.0)];
    let shift = [Vector::new(0.5, 0.0, 0.0), Vector::new(0.0, 0.5, 0.0), Vector::new(1.0, 0.0, 0.0)];
    let lm = |pts: Vec<Point>| names.iter().zip(pts).map(|(n, p)| Landmark::new(*n, p)).collect::<Vec<_>>();
    write_landmarks(&dir.join("lm_ref.csv"), &lm(ref_points.to_vec())).unwrap();
    write_landmarks(&dir.join("lm_target.csv"), &lm(ref_points.iter().zip(&shift).map(|(p, s)| p + s).collect())).unwrap();

    let spacing = Vector::repeat(1.0);
    let reference = ScalarImage::from_fn([16, 16, 16], spacing, Point::origin(), blob(Point::new(7.5, 7.5, 7.5), 3.0)).unwrap();
    let moved = ScalarImage::from_fn([16, 16, 16], spacing, Point::origin(), blob(Point::new(8.0, 7.2, 7.5), 3.0)).unwrap();
    write_mhd(&dir.join("ref.mhd"), &reference).unwrap();
    write_mhd(&dir.join("target.mhd"), &moved).unwrap();
    std::fs::write(dir.join("image_kernel.kdsl"), "gauss(1, 6)\n").unwrap();
}
