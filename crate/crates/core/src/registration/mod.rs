//! Model-based registration.
//!
//! A deformation `u = mu + sum_i alpha_i sqrt(lambda_i) phi_i` of a low-rank model is
//! fitted to a target by minimizing `D(alpha) + eta * |alpha|^2` over the coefficients.
//! For deformations in the model's span `|alpha|^2` is the squared RKHS norm of
//! `u - mu`, so the minimizer is the MAP estimate under the model prior with the
//! likelihood's scale absorbed into `eta`.

mod energy;

use nalgebra::DVector;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use energy::{
    energy_and_gradient, warp_image, Energy, EnergyValue, ImageEnergy, SurfaceEnergy, SURFACE_REFRESH_INTERVAL,
};

use crate::geometry::{Point, Vector};
use crate::linalg::least_squares;
use crate::lowrank::LowRankGp;
use crate::regression::{posterior_lowrank, ObservationSet};
use crate::{Error, Result};
use energy::evaluate;

/// Energies above this multiple of the initial energy abort the fit.
const DIVERGENCE_FACTOR: f64 = 1e3;

/// Window of the relative-decrease convergence test.
const STALL_WINDOW: usize = 5;

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Step size of stochastic gradient descent at iteration `t` (counted from zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSchedule {
    Constant(f64),
    /// `c / (1 + t / t0)`.
    Decay { c: f64, t0: f64 },
}

impl StepSchedule {
    pub fn step(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant(c) => c,
            StepSchedule::Decay { c, t0 } => c / (1.0 + t as f64 / t0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Steepest descent. With `line_search` the step starts at `step` and is halved until
    /// the Armijo condition holds, which makes the energy trace monotone; without it every
    /// iteration takes exactly `step`.
    GradientDescent { step: f64, line_search: bool },
    /// Limited-memory BFGS with an Armijo backtracking line search.
    Lbfgs { memory: usize },
    /// Gradient steps on random batches of integration points, drawn without
    /// replacement. A batch at least as large as the point set uses all points in order.
    Sgd { batch: usize, schedule: StepSchedule },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Lbfgs { memory: 10 }
    }
}

impl Optimizer {
    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::GradientDescent { .. } => "gd",
            Optimizer::Lbfgs { .. } => "lbfgs",
            Optimizer::Sgd { .. } => "sgd",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::GradientDescent { step, .. } => step > 0.0 && step.is_finite(),
            Optimizer::Lbfgs { memory } => memory > 0,
            Optimizer::Sgd { batch, schedule } => {
                batch > 0
                    && match schedule {
                        StepSchedule::Constant(c) => c > 0.0 && c.is_finite(),
                        StepSchedule::Decay { c, t0 } => c > 0.0 && c.is_finite() && t0 > 0.0,
                    }
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub optimizer: Optimizer,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Starting coefficients; zero (the model mean) when absent.
    pub init: Option<DVector<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            optimizer: Optimizer::default(),
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            init: None,
        }
    }
}

/// Outcome of a fit. `total_energy = data_term + eta * regularizer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: Vec<f64>,
    pub data_term: f64,
    /// `|alpha|^2`.
    pub regularizer: f64,
    pub eta: f64,
    pub total_energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub optimizer: String,
    /// Total energy at the start and after every full evaluation.
    pub energy_trace: Vec<f64>,
}

impl FitResult {
    pub fn coefficients(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }
}

fn stalled(trace: &[f64], tol: f64) -> bool {
    if trace.len() <= STALL_WINDOW {
        return false;
    }
    let old = trace[trace.len() - 1 - STALL_WINDOW];
    let new = trace[trace.len() - 1];
    old - new <= tol * old.abs().max(f64::MIN_POSITIVE)
}

#[derive(Default)]
struct LbfgsMemory {
    pairs: Vec<(DVector<f64>, DVector<f64>, f64)>,
}

impl LbfgsMemory {
    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: DVector<f64>, y: DVector<f64>, memory: usize) {
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if self.pairs.len() == memory {
                self.pairs.remove(0);
            }
            self.pairs.push((s, y, 1.0 / sy));
        }
    }

    /// Two-loop recursion: `-H g`.
    fn direction(&self, g: &DVector<f64>) -> DVector<f64> {
        let Some((s_last, y_last, _)) = self.pairs.last() else {
            return -g / g.norm().max(f64::MIN_POSITIVE);
        };
        let mut q = g.clone();
        let mut a = vec![0.0; self.pairs.len()];
        for (k, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            a[k] = rho * s.dot(&q);
            q.axpy(-a[k], y, 1.0);
        }
        let gamma = s_last.dot(y_last) / y_last.norm_squared();
        let mut z = q * gamma;
        for (k, (s, y, rho)) in self.pairs.iter().enumerate() {
            let b = rho * y.dot(&z);
            z.axpy(a[k] - b, s, 1.0);
        }
        -z
    }
}

/// Armijo backtracking along `dir` from `t0`. Returns the accepted step, point and value.
fn backtrack(
    energy: &dyn Energy,
    alpha: &DVector<f64>,
    cur: &EnergyValue,
    dir: &DVector<f64>,
    t0: f64,
) -> Option<(f64, DVector<f64>, EnergyValue)> {
    let slope = cur.gradient.dot(dir);
    if !(slope < 0.0) {
        return None;
    }
    let mut t = t0;
    for _ in 0..MAX_BACKTRACKS {
        let trial = alpha + dir * t;
        let value = evaluate(energy, &trial, None);
        if value.total.is_finite() && value.total <= cur.total + ARMIJO_C1 * t * slope {
            return Some((t, trial, value));
        }
        t *= 0.5;
    }
    None
}

/// Minimizes `energy` over the model coefficients.
///
/// Converges when the gradient norm drops to `tol` or the total energy decreased by
/// less than a relative `tol` over the last five evaluations. Energies with
/// correspondences refresh them every [`Energy::refresh_interval`] iterations and once
/// more before accepting convergence. A total energy above 1e3 times the initial one
/// aborts with [`Error::Divergence`].
pub fn fit(energy: &mut dyn Energy, opts: &FitOptions) -> Result<FitResult> {
    opts.optimizer.validate()?;
    if !(opts.tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be non-negative, got {}", opts.tol)));
    }
    let r = energy.rank();
    let mut alpha = match &opts.init {
        Some(a) if a.len() != r => {
            return Err(Error::DimensionMismatch(format!(
                "initial coefficients have length {}, the model has rank {r}",
                a.len()
            )))
        }
        Some(a) => a.clone(),
        None => DVector::zeros(r),
    };
    let n = energy.len();
    let interval = energy.refresh_interval();
    energy.refresh(&alpha);
    let mut cur = evaluate(energy, &alpha, None);
    let initial = cur.total;
    let mut trace = vec![initial];
    let mut memory = LbfgsMemory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut gd_step = match opts.optimizer {
        Optimizer::GradientDescent { step, .. } => step,
        _ => 1.0,
    };
    // Stochastic runs evaluate the full energy once per pass over the points.
    let check_every = match opts.optimizer {
        Optimizer::Sgd { batch, .. } => n.div_ceil(batch).max(1),
        _ => 1,
    };
    let mut since_refresh = 0;
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let checked = iterations % check_every == 0;
        if checked && (cur.gradient.norm() <= opts.tol || stalled(&trace, opts.tol)) {
            if interval.is_some() && since_refresh > 0 {
                let before = cur.total;
                energy.refresh(&alpha);
                since_refresh = 0;
                memory.clear();
                cur = evaluate(energy, &alpha, None);
                *trace.last_mut().expect("trace starts nonempty") = cur.total;
                let moved = before - cur.total > opts.tol * before.abs();
                if cur.gradient.norm() > opts.tol && moved {
                    continue;
                }
            }
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        if let Some(k) = interval {
            if since_refresh >= k {
                energy.refresh(&alpha);
                since_refresh = 0;
                memory.clear();
                cur = evaluate(energy, &alpha, None);
                if checked {
                    *trace.last_mut().expect("trace starts nonempty") = cur.total;
                }
            }
        }

        match opts.optimizer {
            Optimizer::GradientDescent { step, line_search: false } => {
                alpha -= &cur.gradient * step;
                cur = evaluate(energy, &alpha, None);
            }
            Optimizer::GradientDescent { line_search: true, .. } => {
                let dir = -&cur.gradient;
                match backtrack(energy, &alpha, &cur, &dir, gd_step) {
                    Some((t, a, v)) => {
                        // Try a longer step next time if the full one was accepted.
                        gd_step = if t == gd_step { t * 2.0 } else { t };
                        alpha = a;
                        cur = v;
                    }
                    None => {
                        log::debug!("gradient descent: no decrease possible at iteration {iterations}");
                        converged = true;
                        break;
                    }
                }
            }
            Optimizer::Lbfgs { memory: m } => {
                let mut dir = memory.direction(&cur.gradient);
                if cur.gradient.dot(&dir) >= 0.0 {
                    memory.clear();
                    dir = memory.direction(&cur.gradient);
                }
                let found = backtrack(energy, &alpha, &cur, &dir, 1.0).or_else(|| {
                    memory.clear();
                    backtrack(energy, &alpha, &cur, &memory.direction(&cur.gradient), 1.0)
                });
                match found {
                    Some((_, a, v)) => {
                        memory.push(&a - &alpha, &v.gradient - &cur.gradient, m);
                        alpha = a;
                        cur = v;
                    }
                    None => {
                        log::debug!("lbfgs: no decrease possible at iteration {iterations}");
                        converged = true;
                        break;
                    }
                }
            }
            Optimizer::Sgd { batch, schedule } => {
                let step = schedule.step(iterations);
                // A full batch makes every iteration a check, so `cur` is current.
                let g = if batch >= n {
                    cur.gradient.clone()
                } else {
                    let mut chosen = index::sample(&mut rng, n, batch).into_vec();
                    chosen.sort_unstable();
                    evaluate(energy, &alpha, Some(&chosen)).gradient
                };
                alpha -= g * step;
                if (iterations + 1) % check_every == 0 {
                    cur = evaluate(energy, &alpha, None);
                }
            }
        }
        iterations += 1;
        since_refresh += 1;
        if (iterations % check_every) == 0 {
            trace.push(cur.total);
            if !cur.total.is_finite() || (initial > 0.0 && cur.total > DIVERGENCE_FACTOR * initial) {
                return Err(Error::Divergence {
                    iteration: iterations,
                    energy: cur.total,
                    initial,
                });
            }
        }
    }

    log::info!(
        "{} fit: {iterations} iterations, energy {:.6e} -> {:.6e}, converged {converged}",
        opts.optimizer.name(),
        initial,
        cur.total
    );
    let cur = if iterations % check_every == 0 { cur } else { evaluate(energy, &alpha, None) };
    Ok(FitResult {
        alpha: alpha.iter().copied().collect(),
        data_term: cur.data,
        regularizer: cur.regularizer,
        eta: energy.eta(),
        total_energy: cur.total,
        iterations,
        converged,
        optimizer: opts.optimizer.name().to_string(),
        energy_trace: trace,
    })
}

/// A fit of the landmark posterior of a model.
#[derive(Debug, Clone)]
pub struct HybridFit {
    /// The posterior model; `result.alpha` are its coefficients.
    pub model: LowRankGp,
    pub result: FitResult,
}

/// Conditions `model` on `landmarks`, then fits the posterior model with the energy
/// `build` constructs for it. The landmark constraints hold for every coefficient
/// vector, so they are satisfied whatever the data term does.
pub fn hybrid_fit<E, F>(model: &LowRankGp, landmarks: &ObservationSet, build: F, opts: &FitOptions) -> Result<HybridFit>
where
    E: Energy,
    F: FnOnce(&LowRankGp) -> Result<E>,
{
    let posterior = posterior_lowrank(model, landmarks)?.model;
    let mut energy = build(&posterior)?;
    let result = fit(&mut energy, opts)?;
    Ok(HybridFit {
        model: posterior,
        result,
    })
}

/// Least-squares coefficients reproducing the displacements `values` at `points`,
/// e.g. to carry a deformation over to another model as a starting point.
pub fn project_coefficients(model: &LowRankGp, points: &[Point], values: &[Vector]) -> Result<DVector<f64>> {
    if points.len() != values.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points and {} displacement vectors",
            points.len(),
            values.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::invalid("cannot project an empty deformation"));
    }
    let (means, basis) = model.mean_and_basis(points);
    let rhs = nalgebra::DMatrix::from_fn(points.len() * 3, 1, |row, _| {
        let (j, a) = (row / 3, row % 3);
        values[j][a] - means[j][a]
    });
    Ok(least_squares(&basis, &rhs)?.column(0).into_owned())
}
