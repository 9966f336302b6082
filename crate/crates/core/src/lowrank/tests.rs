use super::*;
use crate::kernels::{DeformationField, ScalarKernel};
use crate::linalg::{randomized_eigen, symmetric_eigen};
use nalgebra::Matrix3;
use rand::Rng;

fn cube_points(n: usize, side: f64, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Point::new(rng.random::<f64>() * side, rng.random::<f64>() * side, rng.random::<f64>() * side))
        .collect()
}

fn gauss_model(n: usize, r: usize, seed: u64) -> LowRankGp {
    let k = KernelExpr::gauss(2.0, 1.0).unwrap();
    let sampler = DomainSampler::Explicit(cube_points(n, 1.0, seed));
    build_lowrank(&k, MeanFunction::Zero, &sampler, n, r, RsvdOptions::default(), seed).unwrap()
}

#[test]
fn constant_kernel_collapses_to_three_components() {
    let s = 4.0;
    let k = KernelExpr::diag(Matrix3::identity() * s, ScalarKernel::constant(1.0).unwrap()).unwrap();
    let pts = cube_points(50, 10.0, 1);
    let gp = build_lowrank(&k, MeanFunction::Zero, &DomainSampler::Explicit(pts.clone()), 50, 6, RsvdOptions::default(), 1)
        .unwrap();
    assert_eq!(gp.rank(), 3);
    // Dense oracle: the Gram matrix has three eigenvalues n s, the rest zero.
    let dense = symmetric_eigen(gram_matrix(&k, &pts));
    for i in 0..3 {
        assert!((gp.eigenvalues()[i] - dense.values[i] / 50.0).abs() < 1e-10);
        assert!((gp.eigenvalues()[i] - s).abs() < 1e-10);
    }
    assert!(dense.values[3].abs() < 1e-9);
    let probe = Point::new(-3.0, 20.0, 7.0);
    for i in 0..3 {
        let a = gp.eigenfunction(i, &pts[0]);
        let b = gp.eigenfunction(i, &probe);
        assert!((a - b).norm() < 1e-9);
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn empirical_kernel_rank_is_bounded_by_sample_count() {
    let pts = cube_points(30, 5.0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fields: Vec<DeformationField> = (0..5)
        .map(|_| {
            let v = pts.iter().map(|_| Vector::new(rng.random(), rng.random(), rng.random())).collect();
            DeformationField::new(pts.clone(), v).unwrap()
        })
        .collect();
    let e = Arc::new(EmpiricalKernel::new(&fields).unwrap());
    let k = KernelExpr::empirical(e);
    let gp = build_lowrank(&k, MeanFunction::for_kernel(&k), &DomainSampler::Explicit(pts), 30, 20, RsvdOptions::default(), 4)
        .unwrap();
    assert!(gp.rank() <= 4, "rank {}", gp.rank());
    assert!(matches!(gp.mean_function(), MeanFunction::Empirical(_)));
}

#[test]
fn rank_requests_are_validated() {
    let k = KernelExpr::gauss(1.0, 1.0).unwrap();
    let s = DomainSampler::Explicit(cube_points(4, 1.0, 5));
    assert!(build_lowrank(&k, MeanFunction::Zero, &s, 4, 0, RsvdOptions::default(), 0).is_err());
    assert!(build_lowrank(&k, MeanFunction::Zero, &s, 4, 13, RsvdOptions::default(), 0).is_err());
    assert!(build_lowrank(&k, MeanFunction::Zero, &s, 4, 12, RsvdOptions::default(), 0).is_ok());
}

#[test]
fn coefficients_select_mean_and_basis() {
    let gp = gauss_model(60, 8, 6);
    let x = Point::new(0.3, 0.7, 0.1);
    let zero = gp.evaluate(DVector::zeros(8)).unwrap();
    assert_eq!(zero.at(&x), gp.mean_at(&x));
    let b = gp.basis_at(&x);
    for i in 0..8 {
        let mut e = DVector::zeros(8);
        e[i] = 1.0;
        let u = gp.evaluate(e).unwrap().at(&x) - gp.mean_at(&x);
        let col = Vector::new(b[(0, i)], b[(1, i)], b[(2, i)]);
        assert!((u - col).norm() < 1e-14);
        assert!((col - gp.eigenfunction(i, &x) * gp.eigenvalues()[i].sqrt()).norm() < 1e-12);
    }
    assert!(gp.evaluate(DVector::zeros(7)).is_err());
}

#[test]
fn sampling_is_reproducible() {
    let gp = gauss_model(40, 5, 7);
    let pts = cube_points(10, 1.0, 8);
    let a = gp.sample(11).at_points(&pts);
    let b = gp.sample(11).at_points(&pts);
    assert_eq!(a, b);
    assert_ne!(a, gp.sample(12).at_points(&pts));
    let single: Vec<Vector> = pts.iter().map(|p| gp.sample(11).at(p)).collect();
    for (u, v) in a.iter().zip(&single) {
        assert!((u - v).norm() < 1e-13);
    }
}

#[test]
fn sample_covariance_matches_truncated_mercer_sum() {
    let gp = gauss_model(80, 10, 9);
    let probes = cube_points(5, 1.0, 10);
    let (_, basis) = gp.mean_and_basis(&probes);
    let cov = truncated_covariance(&basis);
    let n_samples = 10_000;
    let mut acc = DMatrix::zeros(15, 15);
    let mut acc_sq = DMatrix::zeros(15, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..n_samples {
        let alpha = DVector::from_fn(gp.rank(), |_, _| StandardNormal.sample(&mut rng));
        let u = &basis * alpha;
        let outer = &u * u.transpose();
        acc_sq += outer.component_mul(&outer);
        acc += outer;
    }
    let mean = &acc / n_samples as f64;
    for i in 0..15 {
        for j in 0..15 {
            let var = acc_sq[(i, j)] / n_samples as f64 - mean[(i, j)].powi(2);
            let tol = 3.0 * (var / n_samples as f64).sqrt() + 1e-12;
            assert!((mean[(i, j)] - cov[(i, j)]).abs() <= tol, "({i},{j}) {} vs {}", mean[(i, j)], cov[(i, j)]);
        }
    }
}

#[test]
fn total_variance_examples() {
    let sampler = DomainSampler::Explicit(cube_points(10, 1.0, 12));
    let g = KernelExpr::gauss(100.0, 5.0).unwrap();
    assert_eq!(total_variance(&g, &sampler, 10, 0).unwrap(), 300.0);
    let h = KernelExpr::gauss(7.0, 1.0).unwrap();
    let sum = KernelExpr::sum(vec![g.clone(), h]).unwrap();
    assert!((total_variance(&sum, &sampler, 10, 0).unwrap() - 321.0).abs() < 1e-12);
    let w = crate::kernels::WeightFn::logistic(Vector::new(1.0, 0.0, 0.0), 0.5, 0.1).unwrap();
    let local = KernelExpr::localize(w.clone(), g);
    let pts = cube_points(10, 1.0, 12);
    let expected: f64 = pts.iter().map(|p| 300.0 * w.eval(p).powi(2)).sum::<f64>() / 10.0;
    assert!((total_variance(&local, &sampler, 10, 0).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn choose_rank_examples() {
    assert_eq!(choose_rank(&[8.0, 1.0, 1.0], 10.0, 0.75).unwrap(), 1);
    assert_eq!(choose_rank(&[8.0, 1.0, 1.0], 10.0, 0.95).unwrap(), 3);
    assert!(matches!(
        choose_rank(&[5.0, 3.0, 1.0], 10.0, 0.99),
        Err(Error::InsufficientSpectrum { .. })
    ));
    assert!(choose_rank(&[1.0], 1.0, 1.0).is_err());
}

#[test]
fn randomized_solver_matches_dense() {
    let k = KernelExpr::gauss(3.0, 0.8).unwrap();
    let g = gram_matrix(&k, &cube_points(100, 1.0, 13));
    let dense = symmetric_eigen(g.clone());
    let r = 20;
    let approx = randomized_eigen(&g, r + 10, 2, 14);
    for i in 0..r {
        let rel = (approx.values[i] - dense.values[i]).abs() / dense.values[i];
        assert!(rel < 1e-6, "component {i}: {rel:e}");
    }
}

#[test]
fn eigenfunctions_are_orthonormal_at_nystrom_points() {
    let gp = gauss_model(120, 15, 15);
    let (_, basis) = gp.mean_and_basis(gp.nystrom_points());
    let w = gp.quadrature_weights();
    for i in 0..gp.rank() {
        for j in 0..gp.rank() {
            let mut ip = 0.0;
            for (l, wl) in w.iter().enumerate() {
                for a in 0..3 {
                    ip += wl * basis[(3 * l + a, i)] * basis[(3 * l + a, j)];
                }
            }
            ip /= (gp.eigenvalues()[i] * gp.eigenvalues()[j]).sqrt();
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((ip - target).abs() <= 5e-2, "({i},{j}) {ip}");
        }
    }
    assert!(gp.eigenvalues().iter().sum::<f64>() <= gp.total_variance() * (1.0 + 1e-6));
}

#[test]
fn truncated_mercer_sum_reconstructs_kernel() {
    let s = 2.0;
    let k = KernelExpr::gauss(s, 1.0).unwrap();
    let sampler = DomainSampler::Explicit(cube_points(300, 1.0, 16));
    let full = build_lowrank(&k, MeanFunction::Zero, &sampler, 300, 120, RsvdOptions::default(), 16).unwrap();
    let r = choose_rank(full.eigenvalues(), full.total_variance(), 0.999).unwrap();
    let gp = full.truncate(r).unwrap();
    let xs = cube_points(20, 1.0, 17);
    let ys = cube_points(20, 1.0, 18);
    let (_, bx) = gp.mean_and_basis(&xs);
    let (_, by) = gp.mean_and_basis(&ys);
    let approx = &bx * by.transpose();
    for i in 0..20 {
        let exact = k.eval(&xs[i], &ys[i]);
        for a in 0..3 {
            for b in 0..3 {
                let err = (approx[(3 * i + a, 3 * i + b)] - exact[(a, b)]).abs();
                assert!(err <= 1e-2 * s, "pair {i} entry ({a},{b}) error {err}");
            }
        }
    }
}

#[test]
fn expected_truncation_error_is_the_tail_sum() {
    let full = gauss_model(100, 60, 19);
    let r = 6;
    let tail: f64 = full.eigenvalues()[r..].iter().sum();
    let tail_sq: f64 = full.eigenvalues()[r..].iter().map(|l| l * l).sum();
    let (_, basis) = full.mean_and_basis(full.nystrom_points());
    let w = full.quadrature_weights();
    let trials = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut alpha = DVector::from_fn(full.rank(), |_, _| StandardNormal.sample(&mut rng));
        alpha.rows_mut(0, r).fill(0.0);
        let diff = &basis * alpha;
        total += (0..w.len())
            .map(|l| w[l] * (diff[3 * l].powi(2) + diff[3 * l + 1].powi(2) + diff[3 * l + 2].powi(2)))
            .sum::<f64>();
    }
    let mean = total / trials as f64;
    let sd = (2.0 * tail_sq / trials as f64).sqrt();
    assert!((mean - tail).abs() <= 3.0 * sd, "{mean} vs {tail} (sd {sd})");
}

#[test]
fn truncate_keeps_leading_components() {
    let gp = gauss_model(40, 10, 21);
    let t = gp.truncate(4).unwrap();
    assert_eq!(t.eigenvalues(), &gp.eigenvalues()[..4]);
    let x = Point::new(0.5, 0.5, 0.5);
    assert_eq!(t.basis_at(&x), gp.basis_at(&x).columns(0, 4).into_owned());
    assert!(gp.truncate(0).is_err());
    assert!(gp.truncate(11).is_err());
}

#[test]
fn model_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let gp = gauss_model(30, 7, 22).with_kernel_dsl("gauss(2, 1)");
    let path = dir.path().join("m.gpm");
    io::save_model(&path, &gp, None, 22).unwrap();
    let (back, manifest) = io::load_model(&path).unwrap();
    assert_eq!(manifest.r, 7);
    assert_eq!(back.eigenvalues(), gp.eigenvalues());
    let pts = cube_points(9, 1.0, 23);
    assert_eq!(back.mean_and_basis(&pts), gp.mean_and_basis(&pts));

    let unsaved = gauss_model(10, 2, 1);
    assert!(io::save_model(&dir.path().join("x.gpm"), &unsaved, None, 0).is_err());
}

#[test]
fn domain_paths_are_stored_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let gp = gauss_model(30, 3, 24).with_kernel_dsl("gauss(2, 1)");
    let path = dir.path().join("models").join("m.gpm");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let inside = dir.path().join("models").join("shapes").join("ref.ply");
    io::save_model(&path, &gp, Some(&inside), 0).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().contains("\"shapes/ref.ply\""));
    assert_eq!(io::read_manifest(&path).unwrap().domain.unwrap(), inside);
    let outside = dir.path().join("ref.ply");
    io::save_model(&path, &gp, Some(&outside), 0).unwrap();
    assert_eq!(io::read_manifest(&path).unwrap().domain.unwrap(), outside);
}

#[test]
fn projection_experiment_with_complete_basis() {
    let k = KernelExpr::scalar(ScalarKernel::gaussian(0.02).unwrap());
    let probes: Vec<Point> = (0..40).map(|i| Point::new(i as f64 / 40.0, 0.0, 0.0)).collect();
    let gp = build_lowrank(&k, MeanFunction::Zero, &DomainSampler::Explicit(probes.clone()), 40, 40, RsvdOptions::default(), 0)
        .unwrap();
    let full = projection_error_experiment(&k, &gp, &probes, 5, 1).unwrap();
    assert_eq!(gp.rank(), 40);
    assert!(full.mean_error < 1e-6, "{}", full.mean_error);
    let small = projection_error_experiment(&k, &gp.truncate(3).unwrap(), &probes, 5, 1).unwrap();
    assert!(small.mean_error > full.mean_error);
}
