//! The `gpmm` command line.
//!
//! Every subcommand is deterministic for a fixed `--seed`. Errors go to standard error as
//! `ERROR[<code>]: <message>` with exit code 1 for usage and input errors and 2 for
//! numerical failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analytic::{compare_to_nystrom, AnalyticSpectrum};
use crate::geometry::io::{read_landmarks, read_mhd, read_ply, write_mhd, write_ply};
use crate::geometry::{Point, ScalarImage, TriangleMesh};
use crate::kernels::dsl::read_kernel_file;
use crate::kernels::{KernelExpr, ScalarKernel};
use crate::linalg::RsvdOptions;
use crate::lowrank::io::{load_model, save_model, ModelManifest};
use crate::lowrank::{build_lowrank, choose_rank, projection_error_experiment, DomainSampler, LowRankGp, MeanFunction};
use crate::registration::{
    fit, hybrid_fit, warp_image, FitOptions, FitResult, ImageEnergy, Optimizer, StepSchedule, SurfaceEnergy,
};
use crate::regression::{posterior_lowrank, ObservationSet};
use crate::shapemodel::io::load_discrete;
use crate::shapemodel::{compactness, discretize, generalization, specificity, DiscreteModel, SPECIFICITY_SAMPLES};
use crate::{Error, Result};

/// Rank computed before truncating to a variance fraction when no `--rank` is given.
pub const DEFAULT_RANK_CAP: usize = 300;

/// Environment variable overriding the worker-thread count when `--threads` is absent.
pub const THREADS_ENV: &str = "GPMM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gpmm", version, about = "Gaussian process morphable models: build, sample, condition, fit and evaluate")]
pub struct Cli {
    /// Seed for every random choice; identical seeds give identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (default: the GPMM_THREADS variable, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log progress to standard error; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a low-rank model from a kernel expression on a reference surface or image.
    BuildModel(BuildModel),
    /// Write random model instances as warped copies of the reference surface.
    Sample(Sample),
    /// Condition a model on landmark displacements.
    Posterior(PosteriorArgs),
    /// Fit a model to a target surface.
    FitSurface(FitSurface),
    /// Fit a model to a target image.
    FitImage(FitImage),
    /// Specificity and compactness of a model against training surfaces.
    EvalModel(EvalModel),
    /// Mean distance of model fits to held-out surfaces.
    Generalize(Generalize),
    /// Compare Nystrom eigenpairs of a 1D Gaussian kernel with the closed form.
    ValidateNystrom(ValidateNystrom),
    /// Relative error of representing exact process samples with a low-rank model.
    ProjectError(ProjectError),
}

#[derive(Debug, Args)]
pub struct BuildModel {
    /// Kernel expression file.
    #[arg(long)]
    pub kernel: PathBuf,
    /// Reference surface (.ply) or image (.mhd) the Nystrom points are drawn from.
    #[arg(long)]
    pub domain: PathBuf,
    /// Number of Nystrom points.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Number of components (an upper bound with --variance-fraction).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Keep the fewest components covering this fraction of the total variance.
    #[arg(long)]
    pub variance_fraction: Option<f64>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Sample {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Reference surface to warp (default: the model's domain).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Number of samples.
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    /// Output path prefix; sample i goes to <prefix><i>.ply.
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
pub struct PosteriorArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Landmarks on the reference (CSV name,x,y,z).
    #[arg(long)]
    pub landmarks_ref: PathBuf,
    /// Corresponding landmarks on the target, matched by name.
    #[arg(long)]
    pub landmarks_target: PathBuf,
    /// Landmark noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerKind {
    Lbfgs,
    Gd,
    Sgd,
}

#[derive(Debug, Args)]
pub struct FitSettings {
    /// Regularization weight.
    #[arg(long, default_value_t = 1e-3)]
    pub eta: f64,
    /// Optimizer.
    #[arg(long, value_enum, default_value_t = OptimizerKind::Lbfgs)]
    pub optimizer: OptimizerKind,
    /// Maximum number of iterations.
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Convergence tolerance on the gradient norm and relative energy decrease.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Initial step of gradient descent and constant of the stochastic step schedule.
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    /// Stochastic gradient descent batch size.
    #[arg(long, default_value_t = 1024)]
    pub batch: usize,
    /// Iterations over which the stochastic step halves.
    #[arg(long, default_value_t = 100.0)]
    pub decay: f64,
    /// Reference landmarks for a landmark-constrained fit.
    #[arg(long, requires = "landmarks_target")]
    pub landmarks_ref: Option<PathBuf>,
    /// Target landmarks, matched by name.
    #[arg(long, requires = "landmarks_ref")]
    pub landmarks_target: Option<PathBuf>,
    /// Landmark noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub landmark_sigma: f64,
}

#[derive(Debug, Args)]
pub struct FitSurface {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Target surface (.ply).
    #[arg(long)]
    pub target: PathBuf,
    /// Reference surface (default: the model's domain).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Integration points on the reference.
    #[arg(long, default_value_t = 5000)]
    pub points: usize,
    #[command(flatten)]
    pub fit: FitSettings,
    /// Output warped reference (.ply); the fit result goes next to it as .json.
    #[arg(long)]
    pub out: PathBuf,
    /// Fit result file (default: --out with extension .json).
    #[arg(long)]
    pub result: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitImage {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Target image (.mhd).
    #[arg(long)]
    pub target: PathBuf,
    /// Reference image (default: the model's domain).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Integration points in the reference mask.
    #[arg(long, default_value_t = 20000)]
    pub points: usize,
    /// Target value outside its grid or mask.
    #[arg(long, default_value_t = 0.0)]
    pub out_of_domain: f64,
    #[command(flatten)]
    pub fit: FitSettings,
    /// Output target image resampled into the reference frame (.mhd).
    #[arg(long)]
    pub out: PathBuf,
    /// Fit result file (default: --out with extension .json).
    #[arg(long)]
    pub result: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Specificity,
    Compactness,
}

#[derive(Debug, Args)]
pub struct EvalModel {
    /// Model file (.gpm low-rank or .ssm discrete).
    #[arg(long)]
    pub model: PathBuf,
    /// Reference surface whose vertices carry the model (default: the model's domain).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Directory of training surfaces (.ply).
    #[arg(long)]
    pub training: PathBuf,
    /// Metrics to compute.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Metric::Specificity, Metric::Compactness])]
    pub metrics: Vec<Metric>,
    /// Random instances for specificity.
    #[arg(long, default_value_t = SPECIFICITY_SAMPLES)]
    pub samples: usize,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Generalize {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Reference surface (default: the model's domain).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Directory of held-out surfaces (.ply).
    #[arg(long)]
    pub targets: PathBuf,
    /// Integration points on the reference.
    #[arg(long, default_value_t = 5000)]
    pub points: usize,
    #[command(flatten)]
    pub fit: FitSettings,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateNystrom {
    /// Kernel bandwidth of exp(-(x - y)^2 / sigma^2).
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Variance of the Gaussian measure.
    #[arg(long, default_value_t = 1.0)]
    pub s2: f64,
    /// Nystrom point counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1000])]
    pub n: Vec<usize>,
    /// Number of eigenpairs compared.
    #[arg(long, default_value_t = 20)]
    pub rank: usize,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectError {
    /// Kernel expression file.
    #[arg(long)]
    pub kernel: PathBuf,
    /// Reference surface (.ply) or image (.mhd); default: the interval on the x axis.
    #[arg(long)]
    pub domain: Option<PathBuf>,
    /// Interval end points for 1D kernels without --domain.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 1.0], allow_negative_numbers = true)]
    pub interval: Vec<f64>,
    /// Number of Nystrom points.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Fraction of the total variance the model keeps.
    #[arg(long, default_value_t = 0.99)]
    pub variance_fraction: f64,
    /// Upper bound on the number of components.
    #[arg(long, default_value_t = DEFAULT_RANK_CAP)]
    pub rank: usize,
    /// Number of probe points the samples are drawn at.
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
    /// Number of random samples.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            eprintln!("ERROR[1]: {}", text.trim_start_matches("error: ").trim_end());
            return 1;
        }
    };
    init_logging(cli.verbose);
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("ERROR[1]: {e}");
        return 1;
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = if e.is_numerical() { 2 } else { 1 };
            eprintln!("ERROR[{code}]: {e}");
            code
        }
    }
}

/// The clap command, for help rendering and introspection.
pub fn command() -> clap::Command {
    Cli::command()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let threads = match threads {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::invalid("the thread count must be at least 1"));
        }
        // The global pool can be configured once per process; later calls keep it.
        if rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::BuildModel(a) => build_model(a, seed),
        Command::Sample(a) => sample(a, seed),
        Command::Posterior(a) => posterior(a, seed),
        Command::FitSurface(a) => fit_surface(a, seed),
        Command::FitImage(a) => fit_image(a, seed),
        Command::EvalModel(a) => eval_model(a, seed),
        Command::Generalize(a) => generalize(a, seed),
        Command::ValidateNystrom(a) => validate_nystrom(a, seed),
        Command::ProjectError(a) => project_error(a, seed),
    }
}

fn extension(path: &Path) -> String {
    path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default()
}

fn domain_sampler(path: &Path) -> Result<DomainSampler> {
    match extension(path).as_str() {
        "ply" => Ok(DomainSampler::Surface(read_ply(path)?)),
        "mhd" => Ok(DomainSampler::ImageBox(read_mhd(path)?)),
        _ => Err(Error::invalid(format!("{}: the domain must be a .ply surface or an .mhd image", path.display()))),
    }
}

fn load_kernel(path: &Path) -> Result<(KernelExpr, String)> {
    let ast = read_kernel_file(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let kernel = ast.compile(base)?;
    Ok((kernel, ast.absolutize(base).to_string()))
}

fn reference_path(given: &Option<PathBuf>, manifest: &ModelManifest, what: &str) -> Result<PathBuf> {
    given
        .clone()
        .or_else(|| manifest.domain.clone())
        .ok_or_else(|| Error::invalid(format!("the model records no domain; pass --reference with the {what}")))
}

fn reference_mesh(given: &Option<PathBuf>, manifest: &ModelManifest) -> Result<TriangleMesh> {
    let path = reference_path(given, manifest, "reference surface")?;
    if extension(&path) != "ply" {
        return Err(Error::invalid(format!("{}: expected a .ply reference surface", path.display())));
    }
    read_ply(&path)
}

fn reference_image(given: &Option<PathBuf>, manifest: &ModelManifest) -> Result<ScalarImage> {
    let path = reference_path(given, manifest, "reference image")?;
    if extension(&path) != "mhd" {
        return Err(Error::invalid(format!("{}: expected an .mhd reference image", path.display())));
    }
    read_mhd(&path)
}

fn check_fraction(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("the variance fraction must lie in (0, 1], got {p}")))
    }
}

fn build_model(a: &BuildModel, seed: u64) -> Result<()> {
    let (kernel, dsl) = load_kernel(&a.kernel)?;
    let sampler = domain_sampler(&a.domain)?;
    let requested = match (a.rank, a.variance_fraction) {
        (Some(r), _) => r,
        (None, Some(_)) => DEFAULT_RANK_CAP,
        (None, None) => 200,
    };
    let available = a.n * kernel.dim();
    let r = requested.min(available);
    let mut gp = build_lowrank(&kernel, MeanFunction::for_kernel(&kernel), &sampler, a.n, r, RsvdOptions::default(), seed)?;
    if let Some(p) = a.variance_fraction {
        check_fraction(p)?;
        let keep = choose_rank(gp.eigenvalues(), gp.total_variance(), p)?;
        gp = gp.truncate(keep)?;
    }
    let gp = gp.with_kernel_dsl(dsl);
    save_model(&a.out, &gp, Some(&a.domain), seed)?;

    let total = gp.total_variance();
    let mut cumulative = 0.0;
    println!("component\teigenvalue\tcumulative_fraction");
    for (i, l) in gp.eigenvalues().iter().enumerate() {
        cumulative += l;
        println!("{i}\t{l:.9e}\t{:.6}", cumulative / total);
    }
    println!("rank {}; retained variance fraction {:.6}", gp.rank(), gp.retained_variance());
    Ok(())
}

fn sample(a: &Sample, seed: u64) -> Result<()> {
    let (gp, manifest) = load_model(&a.model)?;
    let mesh = reference_mesh(&a.reference, &manifest)?;
    for i in 0..a.count {
        let u = gp.sample(seed.wrapping_add(i as u64)).at_points(mesh.vertices());
        let path = PathBuf::from(format!("{}{i}.ply", a.out_prefix));
        write_ply(&path, &mesh.displaced(&u)?)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn landmark_observations(reference: &Path, target: &Path, sigma: f64) -> Result<ObservationSet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("the landmark noise must be non-negative, got {sigma}")));
    }
    ObservationSet::from_landmarks(&read_landmarks(reference)?, &read_landmarks(target)?, sigma * sigma)
}

fn posterior(a: &PosteriorArgs, seed: u64) -> Result<()> {
    let (gp, manifest) = load_model(&a.model)?;
    let obs = landmark_observations(&a.landmarks_ref, &a.landmarks_target, a.sigma)?;
    let post = posterior_lowrank(&gp, &obs)?.model;
    save_model(&a.out, &post, manifest.domain.as_deref(), seed)?;
    println!("conditioned on {} landmarks; posterior rank {}", obs.len(), post.rank());
    Ok(())
}

fn fit_options(s: &FitSettings, seed: u64) -> FitOptions {
    let optimizer = match s.optimizer {
        OptimizerKind::Lbfgs => Optimizer::Lbfgs { memory: 10 },
        OptimizerKind::Gd => Optimizer::GradientDescent {
            step: s.step,
            line_search: true,
        },
        OptimizerKind::Sgd => Optimizer::Sgd {
            batch: s.batch,
            schedule: StepSchedule::Decay { c: s.step, t0: s.decay },
        },
    };
    FitOptions {
        optimizer,
        max_iters: s.max_iters,
        tol: s.tol,
        seed,
        init: None,
    }
}

fn landmarks_of(s: &FitSettings) -> Result<Option<ObservationSet>> {
    match (&s.landmarks_ref, &s.landmarks_target) {
        (Some(r), Some(t)) => Ok(Some(landmark_observations(r, t, s.landmark_sigma)?)),
        _ => Ok(None),
    }
}

/// Fits with or without landmarks; returns the model the coefficients belong to.
fn run_fit<E, F>(gp: &LowRankGp, settings: &FitSettings, seed: u64, build: F) -> Result<(LowRankGp, FitResult)>
where
    E: crate::registration::Energy,
    F: Fn(&LowRankGp) -> Result<E>,
{
    let opts = fit_options(settings, seed);
    match landmarks_of(settings)? {
        Some(obs) => {
            let h = hybrid_fit(gp, &obs, build, &opts)?;
            Ok((h.model, h.result))
        }
        None => {
            let mut energy = build(gp)?;
            let result = fit(&mut energy, &opts)?;
            Ok((gp.clone(), result))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn fit_mesh(gp: &LowRankGp, reference: &TriangleMesh, target: &TriangleMesh, points: usize, s: &FitSettings, seed: u64) -> Result<(TriangleMesh, FitResult)> {
    let (model, result) = run_fit(gp, s, seed, |m| SurfaceEnergy::new(m, reference, target, s.eta, points, seed))?;
    let u = model.evaluate(result.coefficients())?.at_points(reference.vertices());
    Ok((reference.displaced(&u)?, result))
}

fn report_fit(result: &FitResult) {
    println!(
        "{} iterations, converged {}, energy {:.9e} (data {:.9e}, |alpha|^2 {:.9e})",
        result.iterations, result.converged, result.total_energy, result.data_term, result.regularizer
    );
}

fn fit_surface(a: &FitSurface, seed: u64) -> Result<()> {
    let (gp, manifest) = load_model(&a.model)?;
    let reference = reference_mesh(&a.reference, &manifest)?;
    let target = read_ply(&a.target)?;
    let (warped, result) = fit_mesh(&gp, &reference, &target, a.points, &a.fit, seed)?;
    write_ply(&a.out, &warped)?;
    write_json(&a.result.clone().unwrap_or_else(|| a.out.with_extension("json")), &result)?;
    report_fit(&result);
    Ok(())
}

fn fit_image(a: &FitImage, seed: u64) -> Result<()> {
    let (gp, manifest) = load_model(&a.model)?;
    let reference = reference_image(&a.reference, &manifest)?;
    let target = read_mhd(&a.target)?.with_out_of_domain_value(a.out_of_domain);
    let s = &a.fit;
    let (model, result) = run_fit(&gp, s, seed, |m| ImageEnergy::new(m, &reference, &target, s.eta, a.points, seed))?;
    let warped = warp_image(&model, &result.coefficients(), &reference, &target)?;
    write_mhd(&a.out, &warped)?;
    write_json(&a.result.clone().unwrap_or_else(|| a.out.with_extension("json")), &result)?;
    report_fit(&result);
    Ok(())
}

fn read_mesh_dir(dir: &Path) -> Result<Vec<TriangleMesh>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| extension(p) == "ply")
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("{}: no .ply files found", dir.display())));
    }
    paths.iter().map(|p| read_ply(p)).collect()
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    specificity: Option<f64>,
    /// Accumulated variance of the first m components, m = 1..=rank.
    #[serde(skip_serializing_if = "Option::is_none")]
    compactness: Option<Vec<f64>>,
}

fn print_report<T: Serialize>(report: &T, out: &Option<PathBuf>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    if let Some(path) = out {
        write_json(path, report)?;
    }
    Ok(())
}

fn eval_model(a: &EvalModel, seed: u64) -> Result<()> {
    let (model, reference): (DiscreteModel, TriangleMesh) = if extension(&a.model) == "ssm" {
        let path = a
            .reference
            .as_ref()
            .ok_or_else(|| Error::invalid("discrete models need --reference with the reference surface"))?;
        (load_discrete(&a.model)?, read_ply(path)?)
    } else {
        let (gp, manifest) = load_model(&a.model)?;
        let mesh = reference_mesh(&a.reference, &manifest)?;
        (discretize(&gp, mesh.vertices())?, mesh)
    };
    let training = read_mesh_dir(&a.training)?;
    let report = EvalReport {
        specificity: if a.metrics.contains(&Metric::Specificity) {
            Some(specificity(&model, &reference, &training, a.samples, seed)?)
        } else {
            None
        },
        compactness: a
            .metrics
            .contains(&Metric::Compactness)
            .then(|| (1..=model.rank()).map(|m| compactness(&model, m)).collect()),
    };
    print_report(&report, &a.out)
}

#[derive(Serialize)]
struct GeneralizationReport {
    generalization: f64,
    targets: usize,
}

fn generalize(a: &Generalize, seed: u64) -> Result<()> {
    let (gp, manifest) = load_model(&a.model)?;
    let reference = reference_mesh(&a.reference, &manifest)?;
    let targets = read_mesh_dir(&a.targets)?;
    let g = generalization(&targets, |t| Ok(fit_mesh(&gp, &reference, t, a.points, &a.fit, seed)?.0), seed)?;
    print_report(
        &GeneralizationReport {
            generalization: g,
            targets: targets.len(),
        },
        &a.out,
    )
}

#[derive(Serialize)]
struct NystromRow {
    n: usize,
    i: usize,
    lambda_analytic: f64,
    lambda_nystrom: f64,
    rel_err: f64,
    /// `lambda_{i+1} / lambda_i` of the Nystrom estimate; empty for the last index.
    ratio_nystrom: Option<f64>,
    ratio_analytic: f64,
    func_err: f64,
}

fn validate_nystrom(a: &ValidateNystrom, seed: u64) -> Result<()> {
    let spec = AnalyticSpectrum::new(a.sigma, a.s2)?;
    if a.rank == 0 || a.n.is_empty() {
        return Err(Error::invalid("validate-nystrom needs --rank >= 1 and at least one --n"));
    }
    let kernel = KernelExpr::scalar(ScalarKernel::gaussian(a.sigma)?);
    let sampler = DomainSampler::Gaussian1d { s2: a.s2 };
    let mut writer = csv::Writer::from_path(&a.out).map_err(|e| Error::format(&a.out, e.to_string()))?;
    for &n in &a.n {
        let gp = build_lowrank(&kernel, MeanFunction::Zero, &sampler, n, a.rank.min(n), RsvdOptions::default(), seed)?;
        let rows = compare_to_nystrom(&spec, &gp, a.rank - 1)?;
        let worst = rows.iter().take(9).map(|r| r.rel_err).fold(0.0, f64::max);
        println!("n = {n}: rank {}, max relative eigenvalue error over i <= 8: {worst:.3e}", gp.rank());
        for (k, r) in rows.iter().enumerate() {
            writer.serialize(NystromRow {
                n,
                i: r.i,
                lambda_analytic: r.lambda_analytic,
                lambda_nystrom: r.lambda_nystrom,
                rel_err: r.rel_err,
                ratio_nystrom: rows.get(k + 1).map(|next| next.lambda_nystrom / r.lambda_nystrom),
                ratio_analytic: spec.big_b,
                func_err: r.func_err,
            })?;
        }
    }
    writer.flush().map_err(|e| Error::io(&a.out, e))
}

fn interval_points(lo: f64, hi: f64, count: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Point::new(lo + (hi - lo) * rng.random::<f64>(), 0.0, 0.0)).collect()
}

#[derive(Serialize)]
struct ProjectErrorReport {
    rank: usize,
    retained_variance: f64,
    mean_error: f64,
    trial_errors: Vec<f64>,
    probes: usize,
}

fn project_error(a: &ProjectError, seed: u64) -> Result<()> {
    check_fraction(a.variance_fraction)?;
    let (kernel, _) = load_kernel(&a.kernel)?;
    let (sampler, probes) = match &a.domain {
        Some(d) => {
            let sampler = domain_sampler(d)?;
            let probes = sampler.sample(a.probes, seed.wrapping_add(2))?.points;
            (sampler, probes)
        }
        None => {
            let (lo, hi) = (a.interval[0], a.interval[1]);
            if !(hi > lo) {
                return Err(Error::invalid(format!("the interval must have lo < hi, got {lo},{hi}")));
            }
            let sampler = DomainSampler::Explicit(interval_points(lo, hi, a.n, seed));
            (sampler, interval_points(lo, hi, a.probes, seed.wrapping_add(2)))
        }
    };
    let r = a.rank.min(a.n * kernel.dim());
    let gp = build_lowrank(&kernel, MeanFunction::for_kernel(&kernel), &sampler, a.n, r, RsvdOptions::default(), seed)?;
    let keep = choose_rank(gp.eigenvalues(), gp.total_variance(), a.variance_fraction)?;
    let gp = gp.truncate(keep)?;
    let report = projection_error_experiment(&kernel, &gp, &probes, a.trials, seed.wrapping_add(3))?;
    print_report(
        &ProjectErrorReport {
            rank: gp.rank(),
            retained_variance: gp.retained_variance(),
            mean_error: report.mean_error,
            trial_errors: report.trial_errors,
            probes: report.probes,
        },
        &a.out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["gpmm", "no-such-command"]), 1);
        assert_eq!(run(["gpmm", "validate-nystrom"]), 1);
        assert_eq!(run(["gpmm", "--help"]), 0);
    }

    #[test]
    fn every_flag_has_help_text() {
        fn walk(cmd: &clap::Command) {
            for arg in cmd.get_arguments() {
                let id = arg.get_id().as_str();
                if id == "help" || id == "version" {
                    continue;
                }
                assert!(arg.get_help().is_some(), "{} --{id} has no help text", cmd.get_name());
            }
            for sub in cmd.get_subcommands() {
                walk(sub);
            }
        }
        walk(&command());
    }

    #[test]
    fn fit_settings_map_to_optimizers() {
        let cli = Cli::try_parse_from([
            "gpmm", "fit-surface", "--model", "m.gpm", "--target", "t.ply", "--out", "o.ply", "--optimizer", "sgd", "--batch", "64",
        ])
        .unwrap();
        let Command::FitSurface(f) = cli.command else { panic!() };
        let opts = fit_options(&f.fit, 3);
        assert_eq!(opts.optimizer, Optimizer::Sgd { batch: 64, schedule: StepSchedule::Decay { c: 1.0, t0: 100.0 } });
        assert_eq!(opts.seed, 3);
        assert!(landmarks_of(&f.fit).unwrap().is_none());
    }
}
