//! Experiment harness: seeded runs of every algorithm on the Lorenz 63
//! benchmark, the sweeps built on them, and CSV/SVG emission.
//!
//! Randomness for run `r` comes from one ChaCha8 generator seeded with the
//! batch seed, split into streams `(r << 8) | sub` where `sub` is
//! [`DATA_STREAM`], [`PRIOR_STREAM`], [`PERTURBATION_STREAM`] or
//! `ALGORITHM_STREAM_BASE + algorithm index`. Every algorithm therefore sees
//! the same data and the same prior for a given run.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{dvector, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{
    augmented_enkf_step, augmented_ukf_step, smc_ekf_step, AugmentedConfig, AugmentedEnsemble,
    AugmentedState, EnsembleConfig, ParticleCloud, SmcConfig,
};
use crate::ekf::{ekf_step, InnerFilterState};
use crate::error::{FilterError, Result};
use crate::gaussian::{GaussianBelief, PointRule};
use crate::models::{simulate_with_rng, standard_normal_vec, Lorenz63, Lorenz63Config, Trajectory};
use crate::nested::{NestedFilter, NestedFilterConfig, PNorm};

pub const DATA_STREAM: u64 = 0;
pub const PRIOR_STREAM: u64 = 1;
pub const PERTURBATION_STREAM: u64 = 2;
pub const ALGORITHM_STREAM_BASE: u64 = 10;

/// NMSE_θ level used to define "converged".
pub const CONVERGENCE_THRESHOLD: f64 = 1e-3;

/// `‖truth − estimate‖² / ‖truth‖²`.
pub fn nmse(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(FilterError::DimensionMismatch(format!(
            "truth has dimension {}, estimate {}",
            truth.len(),
            estimate.len()
        )));
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(FilterError::UndefinedNmse);
    }
    Ok((truth - estimate).norm_squared() / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    NestedUkfEkf,
    NestedCkfEkf,
    AugmentedUkf,
    AugmentedEnkf,
    SmcEkf,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::NestedUkfEkf,
        Algorithm::NestedCkfEkf,
        Algorithm::AugmentedUkf,
        Algorithm::AugmentedEnkf,
        Algorithm::SmcEkf,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::NestedUkfEkf => "nested_ukf_ekf",
            Algorithm::NestedCkfEkf => "nested_ckf_ekf",
            Algorithm::AugmentedUkf => "augmented_ukf",
            Algorithm::AugmentedEnkf => "augmented_enkf",
            Algorithm::SmcEkf => "smc_ekf",
        }
    }

    fn stream(&self) -> u64 {
        let idx = Algorithm::ALL.iter().position(|a| a == self).unwrap_or(0);
        ALGORITHM_STREAM_BASE + idx as u64
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Algorithm {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .iter()
            .find(|a| a.label() == s)
            .copied()
            .ok_or_else(|| {
                let known: Vec<_> = Algorithm::ALL.iter().map(|a| a.label()).collect();
                FilterError::InvalidArgument(format!(
                    "unknown algorithm '{s}' (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Lorenz63Config,
    pub theta_true: DVector<f64>,
    /// Half-width ε of the uniform draw of the prior mean around θ*.
    pub prior_offset: DVector<f64>,
    /// Continuous-time horizon.
    pub t_end: f64,
    pub algorithm: Algorithm,
    pub nested: NestedFilterConfig,
    pub seed: u64,
    pub n_runs: usize,
    pub x0_mean: DVector<f64>,
    pub x0_var: f64,
    pub enkf_members: usize,
    pub smc_particles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: Lorenz63Config::default(),
            theta_true: dvector![10.0, 28.0, 8.0 / 3.0],
            prior_offset: dvector![3.0, 1.0, 0.5],
            t_end: 10.0,
            algorithm: Algorithm::NestedUkfEkf,
            nested: NestedFilterConfig::default(),
            seed: 0,
            n_runs: 20,
            x0_mean: dvector![-6.0, -5.5, -24.5],
            x0_var: 1.0,
            enkf_members: 100,
            smc_particles: 120,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.nested.validate()?;
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(FilterError::InvalidArgument(
                "t_end must be finite and nonnegative".into(),
            ));
        }
        if self.n_runs == 0 {
            return Err(FilterError::InvalidArgument(
                "n_runs must be at least 1".into(),
            ));
        }
        if self.theta_true.len() != 3 || self.prior_offset.len() != 3 || self.x0_mean.len() != 3 {
            return Err(FilterError::DimensionMismatch(
                "theta_true, prior_offset and x0_mean need 3 entries".into(),
            ));
        }
        if self.prior_offset.iter().any(|e| !(*e >= 0.0)) || !(self.x0_var >= 0.0) {
            return Err(FilterError::InvalidArgument(
                "prior_offset and x0_var must be nonnegative".into(),
            ));
        }
        if self.enkf_members < 2 || self.smc_particles == 0 {
            return Err(FilterError::InvalidArgument(
                "need at least 2 ensemble members and 1 particle".into(),
            ));
        }
        Ok(())
    }

    /// Euler steps covering `t_end`.
    pub fn euler_steps(&self) -> usize {
        (self.t_end / self.model.delta).round() as usize
    }

    pub fn x0_prior(&self) -> Result<GaussianBelief> {
        GaussianBelief::isotropic(self.x0_mean.clone(), self.x0_var)
    }

    /// Applies one `key = value` setting. Vector values are comma lists and
    /// `observed` uses 1-based component numbers.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| FilterError::InvalidArgument(format!("invalid {what} '{value}'"));
        let float = |what: &str| value.trim().parse::<f64>().map_err(|_| bad(what));
        let uint = |what: &str| value.trim().parse::<usize>().map_err(|_| bad(what));
        let vector = |what: &str| -> Result<DVector<f64>> {
            let v = parse_list::<f64>(value).map_err(|_| bad(what))?;
            Ok(DVector::from_vec(v))
        };
        match key.trim() {
            "lambda" => self.nested.lambda = float("lambda")?,
            "norm" => self.nested.norm = value.trim().parse()?,
            "algorithm" => self.algorithm = value.trim().parse()?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad("seed"))?,
            "t_end" => self.t_end = float("t_end")?,
            "n_runs" => self.n_runs = uint("n_runs")?,
            "micro_steps" => self.nested.micro_steps = uint("micro_steps")?,
            "recursive" => {
                self.nested.recursive = value.trim().parse().map_err(|_| bad("recursive"))?
            }
            "theta_true" => self.theta_true = vector("theta_true")?,
            "prior_offset" => self.prior_offset = vector("prior_offset")?,
            "x0_mean" => self.x0_mean = vector("x0_mean")?,
            "x0_var" => self.x0_var = float("x0_var")?,
            "delta" => self.model.delta = float("delta")?,
            "sigma2" => self.model.sigma2 = float("sigma2")?,
            "sigma_y2" => self.model.sigma_y2 = float("sigma_y2")?,
            "k_o" => self.model.k_o = float("k_o")?,
            "m_o" => self.model.m_o = uint("m_o")?,
            "observed" => {
                let idx = parse_list::<usize>(value).map_err(|_| bad("observed"))?;
                if idx.contains(&0) {
                    return Err(bad("observed"));
                }
                self.model.observed = idx.into_iter().map(|i| i - 1).collect();
            }
            "enkf_members" => self.enkf_members = uint("enkf_members")?,
            "smc_particles" => self.smc_particles = uint("smc_particles")?,
            other => {
                return Err(FilterError::InvalidArgument(format!(
                    "unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Applies every setting of a config file on top of `self`.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_config_text(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, T::Err> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// Parses `key = value` lines; `#` starts a comment and blank lines are
/// skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FilterError::InvalidArgument(format!(
                "config line {}: expected 'key = value'",
                lineno + 1
            ))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(FilterError::InvalidArgument(format!(
                "config line {}: empty key",
                lineno + 1
            )));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Generator for sub-stream `sub` of run `run`.
pub fn run_rng(seed: u64, run: usize, sub: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((run as u64) << 8) | sub);
    rng
}

/// Prior mean `μ_θ ~ U(θ* − ε, θ* + ε)`.
pub fn draw_prior_mean(config: &RunConfig, run: usize) -> DVector<f64> {
    let mut rng = run_rng(config.seed, run, PRIOR_STREAM);
    DVector::from_iterator(
        config.theta_true.len(),
        config
            .theta_true
            .iter()
            .zip(config.prior_offset.iter())
            .map(|(t, e)| t + e * (2.0 * rng.random::<f64>() - 1.0)),
    )
}

pub fn simulate_run(config: &RunConfig, run: usize) -> Result<Trajectory> {
    let model = Lorenz63::new(config.model.clone())?;
    let mut rng = run_rng(config.seed, run, DATA_STREAM);
    simulate_with_rng(
        &model,
        &config.theta_true,
        &config.x0_prior()?,
        config.euler_steps(),
        &mut rng,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub t: f64,
    pub nmse_x: f64,
    pub nmse_theta: f64,
    pub theta_hat: [f64; 3],
    pub restart_count: usize,
    pub wall_ns: u64,
}

/// Per-run scalars derived from the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: usize,
    pub steps: usize,
    pub mean_nmse_x: f64,
    pub mean_nmse_theta: f64,
    pub final_quarter_nmse_x: f64,
    pub final_quarter_nmse_theta: f64,
    /// Averages over rows with `t > 5`.
    pub late_nmse_x: f64,
    pub late_nmse_theta: f64,
    pub final_theta: [f64; 3],
    pub final_nmse_theta: f64,
    /// First step index after which NMSE_θ stays below
    /// [`CONVERGENCE_THRESHOLD`].
    pub convergence_step: Option<usize>,
    pub total_restarts: usize,
    /// Whether no restart happened in the last quarter of the steps.
    pub final_quarter_restart_free: bool,
    pub wall_s: f64,
}

impl RunSummary {
    pub fn from_rows(run: usize, rows: &[ResultRow]) -> Self {
        let n = rows.len();
        let mean = |rs: &[ResultRow], f: fn(&ResultRow) -> f64| {
            if rs.is_empty() {
                f64::NAN
            } else {
                rs.iter().map(f).sum::<f64>() / rs.len() as f64
            }
        };
        let tail = &rows[n - n / 4..];
        let late: Vec<ResultRow> = rows.iter().filter(|r| r.t > 5.0).cloned().collect();
        let convergence_step = match rows
            .iter()
            .rposition(|r| !(r.nmse_theta < CONVERGENCE_THRESHOLD))
        {
            None if n > 0 => Some(0),
            None => None,
            Some(i) if i + 1 < n => Some(i + 1),
            Some(_) => None,
        };
        let last = rows.last();
        Self {
            run,
            steps: n,
            mean_nmse_x: mean(rows, |r| r.nmse_x),
            mean_nmse_theta: mean(rows, |r| r.nmse_theta),
            final_quarter_nmse_x: mean(tail, |r| r.nmse_x),
            final_quarter_nmse_theta: mean(tail, |r| r.nmse_theta),
            late_nmse_x: mean(&late, |r| r.nmse_x),
            late_nmse_theta: mean(&late, |r| r.nmse_theta),
            final_theta: last.map_or([f64::NAN; 3], |r| r.theta_hat),
            final_nmse_theta: last.map_or(f64::NAN, |r| r.nmse_theta),
            convergence_step,
            total_restarts: rows.iter().map(|r| r.restart_count).sum(),
            final_quarter_restart_free: tail.iter().all(|r| r.restart_count == 0),
            wall_s: rows.iter().map(|r| r.wall_ns).sum::<u64>() as f64 * 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    /// One row per assimilated observation, up to a failure if there was one.
    pub rows: Vec<ResultRow>,
    pub summary: RunSummary,
    pub failure: Option<FilterError>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

enum Runner<'m> {
    Nested(NestedFilter<'m, Lorenz63>),
    Ukf(AugmentedState, AugmentedConfig),
    Enkf(AugmentedEnsemble, EnsembleConfig, ChaCha8Rng),
    Smc(ParticleCloud, SmcConfig, ChaCha8Rng),
}

impl<'m> Runner<'m> {
    fn new(model: &'m Lorenz63, config: &RunConfig, run: usize) -> Result<Self> {
        let prior_theta = GaussianBelief::isotropic(draw_prior_mean(config, run), 1.0)?;
        let prior_x = config.x0_prior()?;
        let micro = config.model.m_o;
        let mut rng = run_rng(config.seed, run, config.algorithm.stream());
        Ok(match config.algorithm {
            Algorithm::NestedUkfEkf | Algorithm::NestedCkfEkf => {
                let mut nested = config.nested.clone();
                nested.micro_steps = micro;
                if config.algorithm == Algorithm::NestedCkfEkf {
                    nested.point_rule = PointRule::Cubature;
                }
                Runner::Nested(NestedFilter::new(model, &prior_theta, &prior_x, nested)?)
            }
            Algorithm::AugmentedUkf => Runner::Ukf(
                AugmentedState::from_priors(&prior_x, &prior_theta)?,
                AugmentedConfig::for_prior(&prior_theta, micro),
            ),
            Algorithm::AugmentedEnkf => {
                let mut cfg = EnsembleConfig::for_prior(&prior_theta, micro);
                cfg.size = config.enkf_members;
                let ensemble =
                    AugmentedEnsemble::from_priors(&prior_x, &prior_theta, cfg.size, &mut rng)?;
                Runner::Enkf(ensemble, cfg, rng)
            }
            Algorithm::SmcEkf => {
                let mut cfg = SmcConfig::for_prior(&prior_theta, micro);
                cfg.particles = config.smc_particles;
                let cloud =
                    ParticleCloud::initialize(&prior_theta, &prior_x, cfg.particles, &mut rng)?;
                Runner::Smc(cloud, cfg, rng)
            }
        })
    }

    /// Assimilates one observation; returns `(θ̂, x̂, restarts)`.
    fn step(
        &mut self,
        model: &Lorenz63,
        obs: &crate::models::Observation,
    ) -> Result<(DVector<f64>, DVector<f64>, usize)> {
        match self {
            Runner::Nested(f) => {
                let s = f.step(obs.clone())?;
                Ok((
                    f.theta_estimate().clone(),
                    f.state_estimate().clone(),
                    s.restart_count,
                ))
            }
            Runner::Ukf(state, cfg) => {
                *state = augmented_ukf_step(state, &obs.y, model, cfg)?;
                Ok((state.theta_mean(), state.state_mean(), 0))
            }
            Runner::Enkf(ensemble, cfg, rng) => {
                *ensemble = augmented_enkf_step(ensemble, &obs.y, model, cfg, rng)?;
                Ok((ensemble.theta_mean(), ensemble.state_mean(), 0))
            }
            Runner::Smc(cloud, cfg, rng) => {
                *cloud = smc_ekf_step(cloud, &obs.y, model, cfg, rng)?;
                Ok((cloud.theta_estimate(), cloud.state_estimate(), 0))
            }
        }
    }
}

/// Runs `config.algorithm` on run `run`'s data. Filter failures end the run
/// early and are reported in the outcome; configuration errors are returned.
pub fn run_single(config: &RunConfig, run: usize) -> Result<RunOutcome> {
    config.validate()?;
    let truth = simulate_run(config, run)?;
    run_on_data(config, run, &truth)
}

/// As [`run_single`] on an already simulated trajectory.
pub fn run_on_data(config: &RunConfig, run: usize, truth: &Trajectory) -> Result<RunOutcome> {
    let model = Lorenz63::new(config.model.clone())?;
    let mut runner = Runner::new(&model, config, run)?;
    let mut rows = Vec::with_capacity(truth.observations.len());
    let mut failure = None;
    for obs in &truth.observations {
        let start = Instant::now();
        let stepped = runner.step(&model, obs);
        let wall_ns = start.elapsed().as_nanos() as u64;
        let (theta_hat, x_hat, restart_count) = match stepped {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let row = nmse(&truth.states[obs.t], &x_hat).and_then(|nx| {
            let nt = nmse(&config.theta_true, &theta_hat)?;
            Ok(ResultRow {
                t: obs.t as f64 * config.model.delta,
                nmse_x: nx,
                nmse_theta: nt,
                theta_hat: [theta_hat[0], theta_hat[1], theta_hat[2]],
                restart_count,
                wall_ns,
            })
        });
        match row {
            Ok(r) => rows.push(r),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let summary = RunSummary::from_rows(run, &rows);
    Ok(RunOutcome {
        run,
        rows,
        summary,
        failure,
    })
}

/// Rows plus the time-averaged NMSEs of run 0.
pub fn run_experiment(config: &RunConfig) -> Result<(Vec<ResultRow>, f64, f64)> {
    let outcome = run_single(config, 0)?;
    if let Some(e) = outcome.failure {
        return Err(e);
    }
    let s = outcome.summary;
    Ok((outcome.rows, s.mean_nmse_x, s.mean_nmse_theta))
}

fn map_runs<T: Send>(n_runs: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_runs).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_runs).map(f).collect()
    }
}

/// Summaries of runs `0..config.n_runs`, in run order. Rows are dropped.
pub fn run_batch(config: &RunConfig) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    map_runs(config.n_runs, |run| {
        run_single(config, run).map(|mut o| {
            o.rows = Vec::new();
            o
        })
    })
    .into_iter()
    .collect()
}

/// Mean of `f` over successful runs, with run and failure counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub runs: usize,
    pub failures: usize,
}

pub fn aggregate(outcomes: &[RunOutcome], f: impl Fn(&RunSummary) -> f64) -> Aggregate {
    let ok: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.succeeded())
        .map(|o| f(&o.summary))
        .collect();
    Aggregate {
        mean: if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        },
        runs: outcomes.len(),
        failures: outcomes.len() - ok.len(),
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityRow {
    pub sigma_e2: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
    /// `mean_l2 / ‖θ*‖₂`.
    pub mean_rel_l2: f64,
    /// `mean_linf / ‖θ*‖₂`.
    pub mean_rel_linf: f64,
    pub mean_nmse_x: f64,
    pub runs: usize,
    pub failures: usize,
}

/// Default perturbation variances, with zero as the unperturbed reference.
pub const CONTINUITY_GRID: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 0.0];

/// For each variance, runs an EKF under `θ' = θ* + ε`, `ε ~ N(0, σ_e² I)`,
/// against data generated under θ*.
pub fn continuity_experiment(
    base: &RunConfig,
    grid: &[f64],
    n_runs: usize,
    seed: u64,
) -> Result<Vec<ContinuityRow>> {
    let mut config = base.clone();
    config.seed = seed;
    config.n_runs = n_runs;
    config.validate()?;
    if grid.iter().any(|s| !(*s >= 0.0)) {
        return Err(FilterError::InvalidArgument(
            "perturbation variances must be nonnegative".into(),
        ));
    }
    let model = Lorenz63::new(config.model.clone())?;
    let prior_x = config.x0_prior()?;
    let micro = config.model.m_o;
    // (‖ε‖₂, ‖ε‖∞, NMSE_x) per run and variance; None on failure.
    let per_run: Vec<Vec<Option<(f64, f64, f64)>>> = map_runs(n_runs, |run| {
        let truth = match simulate_run(&config, run) {
            Ok(t) => t,
            Err(_) => return vec![None; grid.len()],
        };
        let mut rng = run_rng(seed, run, PERTURBATION_STREAM);
        grid.iter()
            .map(|&var| {
                let eps = standard_normal_vec(&mut rng, 3) * var.sqrt();
                let theta = &config.theta_true + &eps;
                let mut state = InnerFilterState::from_prior(prior_x.clone(), theta.clone());
                let mut acc = 0.0;
                for obs in &truth.observations {
                    state = ekf_step(&state, &obs.y, &theta, &model, micro).ok()?.0;
                    acc += nmse(&truth.states[obs.t], state.belief.mean()).ok()?;
                }
                let n = truth.observations.len().max(1) as f64;
                Some((eps.norm(), eps.amax(), acc / n))
            })
            .collect()
    });
    let scale = config.theta_true.norm();
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &sigma_e2)| {
            let ok: Vec<(f64, f64, f64)> = per_run.iter().filter_map(|r| r[g]).collect();
            let m =
                |f: fn(&(f64, f64, f64)) -> f64| ok.iter().map(f).sum::<f64>() / ok.len() as f64;
            ContinuityRow {
                sigma_e2,
                mean_l2: m(|v| v.0),
                mean_linf: m(|v| v.1),
                mean_rel_l2: m(|v| v.0) / scale,
                mean_rel_linf: m(|v| v.1) / scale,
                mean_nmse_x: m(|v| v.2),
                runs: n_runs,
                failures: n_runs - ok.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub norm: PNorm,
    pub mean_nmse_theta: f64,
    pub mean_nmse_x: f64,
    pub mean_wall_s: f64,
    pub mean_restarts: f64,
    pub runs: usize,
    pub failures: usize,
}

pub const LAMBDA_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

impl LambdaRow {
    pub fn from_outcomes(lambda: f64, norm: PNorm, outcomes: &[RunOutcome]) -> Self {
        let t = aggregate(outcomes, |s| s.mean_nmse_theta);
        Self {
            lambda,
            norm,
            mean_nmse_theta: t.mean,
            mean_nmse_x: aggregate(outcomes, |s| s.mean_nmse_x).mean,
            mean_wall_s: aggregate(outcomes, |s| s.wall_s).mean,
            mean_restarts: aggregate(outcomes, |s| s.total_restarts as f64).mean,
            runs: t.runs,
            failures: t.failures,
        }
    }
}

/// Nested UKF-EKF over the full grid × norms factorial.
pub fn sweep_lambda(
    base: &RunConfig,
    grid: &[f64],
    norms: &[PNorm],
    n_runs: usize,
    seed: u64,
) -> Result<Vec<LambdaRow>> {
    let mut rows = Vec::new();
    for &norm in norms {
        for &lambda in grid {
            let mut config = base.clone();
            config.algorithm = Algorithm::NestedUkfEkf;
            config.nested.lambda = lambda;
            config.nested.norm = norm;
            config.n_runs = n_runs;
            config.seed = seed;
            rows.push(LambdaRow::from_outcomes(lambda, norm, &run_batch(&config)?));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub sigma_y2: f64,
    pub mean_nmse_theta: f64,
    pub mean_nmse_x: f64,
    pub late_nmse_theta: f64,
    pub late_nmse_x: f64,
    pub runs: usize,
    pub failures: usize,
}

pub const NOISE_GRID: [f64; 4] = [1.0, 2.0, 4.0, 10.0];

/// Nested UKF-EKF over observation-noise variances, reporting full-horizon
/// and `t > 5` averages.
pub fn noise_sweep(
    base: &RunConfig,
    grid: &[f64],
    n_runs: usize,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    grid.iter()
        .map(|&sigma_y2| {
            let mut config = base.clone();
            config.model.sigma_y2 = sigma_y2;
            config.n_runs = n_runs;
            config.seed = seed;
            let outcomes = run_batch(&config)?;
            let t = aggregate(&outcomes, |s| s.mean_nmse_theta);
            Ok(NoiseRow {
                sigma_y2,
                mean_nmse_theta: t.mean,
                mean_nmse_x: aggregate(&outcomes, |s| s.mean_nmse_x).mean,
                late_nmse_theta: aggregate(&outcomes, |s| s.late_nmse_theta).mean,
                late_nmse_x: aggregate(&outcomes, |s| s.late_nmse_x).mean,
                runs: t.runs,
                failures: t.failures,
            })
        })
        .collect()
}

/// Mean NMSE curves of one algorithm on one observation pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmCurve {
    pub algorithm: Algorithm,
    /// Zero-based observed components.
    pub observed: Vec<usize>,
    pub t: Vec<f64>,
    pub mean_nmse_x: Vec<f64>,
    pub mean_nmse_theta: Vec<f64>,
    pub runs: Vec<RunOutcome>,
}

impl AlgorithmCurve {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|o| !o.succeeded()).count()
    }

    pub fn mean_wall_s(&self) -> f64 {
        aggregate(&self.runs, |s| s.wall_s).mean
    }
}

/// Every algorithm on identical per-run data, for each observation pattern.
/// Curves average successful runs; per-run rows are dropped.
pub fn compare_algorithms(
    base: &RunConfig,
    algorithms: &[Algorithm],
    observed_variants: &[Vec<usize>],
    n_runs: usize,
    seed: u64,
) -> Result<Vec<AlgorithmCurve>> {
    let mut curves = Vec::new();
    for observed in observed_variants {
        let mut config = base.clone();
        config.model.observed = observed.clone();
        config.n_runs = n_runs;
        config.seed = seed;
        config.validate()?;
        let per_run: Vec<Result<Vec<RunOutcome>>> = map_runs(n_runs, |run| {
            let truth = simulate_run(&config, run)?;
            algorithms
                .iter()
                .map(|&algorithm| {
                    let mut c = config.clone();
                    c.algorithm = algorithm;
                    run_on_data(&c, run, &truth)
                })
                .collect()
        });
        let per_run = per_run.into_iter().collect::<Result<Vec<_>>>()?;
        for (k, &algorithm) in algorithms.iter().enumerate() {
            let mut runs: Vec<RunOutcome> = per_run.iter().map(|r| r[k].clone()).collect();
            let ok: Vec<&RunOutcome> = runs.iter().filter(|o| o.succeeded()).collect();
            let len = ok.iter().map(|o| o.rows.len()).min().unwrap_or(0);
            let t = ok
                .first()
                .map_or(Vec::new(), |o| o.rows[..len].iter().map(|r| r.t).collect());
            let avg = |f: fn(&ResultRow) -> f64| -> Vec<f64> {
                (0..len)
                    .map(|i| ok.iter().map(|o| f(&o.rows[i])).sum::<f64>() / ok.len() as f64)
                    .collect()
            };
            let mean_nmse_x = avg(|r| r.nmse_x);
            let mean_nmse_theta = avg(|r| r.nmse_theta);
            for o in &mut runs {
                o.rows = Vec::new();
            }
            curves.push(AlgorithmCurve {
                algorithm,
                observed: observed.clone(),
                t,
                mean_nmse_x,
                mean_nmse_theta,
                runs,
            });
        }
    }
    Ok(curves)
}

pub const ROW_HEADER: [&str; 8] = [
    "t",
    "nmse_x",
    "nmse_theta",
    "theta_hat_1",
    "theta_hat_2",
    "theta_hat_3",
    "restart_count",
    "wall_ns",
];

fn csv_error(e: csv::Error) -> FilterError {
    FilterError::InvalidArgument(format!("csv: {e}"))
}

/// Writes rows as CSV with the shortest round-tripping float formatting.
pub fn write_rows_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(ROW_HEADER).map_err(csv_error)?;
    for r in rows {
        out.write_record([
            r.t.to_string(),
            r.nmse_x.to_string(),
            r.nmse_theta.to_string(),
            r.theta_hat[0].to_string(),
            r.theta_hat[1].to_string(),
            r.theta_hat[2].to_string(),
            r.restart_count.to_string(),
            r.wall_ns.to_string(),
        ])
        .map_err(csv_error)?;
    }
    out.flush()
        .map_err(|e| FilterError::InvalidArgument(format!("write: {e}")))
}

pub fn read_rows_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().ne(ROW_HEADER) {
        return Err(FilterError::InvalidArgument("unexpected CSV header".into()));
    }
    let bad = |what: &str| FilterError::InvalidArgument(format!("bad {what} field"));
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(csv_error)?;
            let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(ROW_HEADER[i]));
            Ok(ResultRow {
                t: f(0)?,
                nmse_x: f(1)?,
                nmse_theta: f(2)?,
                theta_hat: [f(3)?, f(4)?, f(5)?],
                restart_count: rec[6].parse().map_err(|_| bad("restart_count"))?,
                wall_ns: rec[7].parse().map_err(|_| bad("wall_ns"))?,
            })
        })
        .collect()
}

/// Writes any table with a header as LF-terminated CSV.
pub fn write_table_csv<W: Write>(header: &[&str], records: &[Vec<String>], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(header).map_err(csv_error)?;
    for rec in records {
        out.write_record(rec).map_err(csv_error)?;
    }
    out.flush()
        .map_err(|e| FilterError::InvalidArgument(format!("write: {e}")))
}

/// A named line for [`write_svg_plot`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#d62728", "#1f77b4", "#e6a800", "#2ca02c", "#9467bd", "#8c564b",
];

/// Line plot with a logarithmic y axis (and optionally x axis). Points with
/// non-positive coordinates on a log axis are skipped.
pub fn write_svg_plot<W: Write>(
    series: &[Series],
    title: &str,
    x_label: &str,
    y_label: &str,
    log_x: bool,
    mut w: W,
) -> Result<()> {
    let (width, height, margin) = (720.0, 440.0, 64.0);
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let usable =
        |&(x, y): &(f64, f64)| y > 0.0 && y.is_finite() && x.is_finite() && (!log_x || x > 0.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| {
            s.points
                .iter()
                .filter(|p| usable(p))
                .map(|&(x, y)| (tx(x), y.log10()))
        })
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    y0 = y0.floor();
    y1 = y1.ceil().max(y0 + 1.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let px = |x: f64| margin + (x - x0) / (x1 - x0) * (width - 2.0 * margin);
    let py = |y: f64| height - margin - (y - y0) / (y1 - y0) * (height - 2.0 * margin);
    let io = |e: std::io::Error| FilterError::InvalidArgument(format!("write: {e}"));

    let mut s = String::new();
    s += &format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n");
    s += &format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        width / 2.0,
        escape(title)
    );
    for decade in (y0 as i32)..=(y1 as i32) {
        let y = py(decade as f64);
        s += &format!(
            "<line x1=\"{margin}\" x2=\"{}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">1e{decade}</text>\n",
            width - margin,
            margin - 6.0,
            y + 4.0
        );
    }
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let label = if log_x {
            format!("1e{xv:.1}")
        } else {
            format!("{xv:.3}")
        };
        s += &format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            px(xv),
            height - margin + 18.0
        );
    }
    s += &format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        width - 2.0 * margin,
        height - 2.0 * margin
    );
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        height - 16.0,
        escape(x_label)
    );
    s += &format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        height / 2.0,
        height / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| usable(p))
            .map(|&(x, y)| format!("{:.2},{:.2}", px(tx(x)), py(y.log10())))
            .collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        );
        let ly = margin + 16.0 + 16.0 * k as f64;
        s += &format!(
            "<line x1=\"{}\" x2=\"{}\" y1=\"{ly}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
            width - margin - 150.0,
            width - margin - 130.0,
            width - margin - 124.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s += "</svg>\n";
    w.write_all(s.as_bytes()).map_err(io)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Output formats of [`emit_results`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    SvgPlot,
}

/// Writes rows to `path` as CSV, or as NMSE_x/NMSE_θ curves over time.
pub fn emit_results(rows: &[ResultRow], path: &Path, format: EmitFormat) -> Result<()> {
    let with_path =
        |e: FilterError| FilterError::InvalidArgument(format!("{}: {e}", path.display()));
    let file = std::fs::File::create(path)
        .map_err(|e| FilterError::InvalidArgument(format!("{}: {e}", path.display())))?;
    let w = std::io::BufWriter::new(file);
    match format {
        EmitFormat::Csv => write_rows_csv(rows, w),
        EmitFormat::SvgPlot => {
            let series = [
                Series {
                    label: "NMSE_x".into(),
                    points: rows.iter().map(|r| (r.t, r.nmse_x)).collect(),
                },
                Series {
                    label: "NMSE_theta".into(),
                    points: rows.iter().map(|r| (r.t, r.nmse_theta)).collect(),
                },
            ];
            write_svg_plot(&series, "NMSE over time", "t", "NMSE", false, w)
        }
    }
    .map_err(with_path)
}
