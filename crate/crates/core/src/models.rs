//! State-space models with additive Gaussian noise, the stochastic Lorenz 63
//! benchmark and ground-truth simulation.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FilterError, Result};
use crate::gaussian::{covariance_sqrt, GaussianBelief};
use crate::linalg::{all_finite_vec, sandwich_add_in_place};

/// `x_t = f(x_{t-1}, θ) + v_t`, `y_t = g(x_t, θ) + r_t` with `v_t ~ N(0, V)`
/// and `r_t ~ N(0, R)`.
///
/// The `*_into` hooks exist for the prediction loop; the defaults forward to
/// the allocating versions.
pub trait StateSpaceModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    fn drift(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    fn drift_jacobian(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;
    fn observe(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    fn observation_jacobian(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;
    fn state_noise_cov(&self) -> &DMatrix<f64>;
    fn obs_noise_cov(&self) -> &DMatrix<f64>;

    fn drift_into(&self, x: &DVector<f64>, theta: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.drift(x, theta));
    }

    fn drift_jacobian_into(&self, x: &DVector<f64>, theta: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(&self.drift_jacobian(x, theta));
    }

    fn observe_into(&self, x: &DVector<f64>, theta: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.observe(x, theta));
    }

    fn observation_jacobian_into(
        &self,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        out: &mut DMatrix<f64>,
    ) {
        out.copy_from(&self.observation_jacobian(x, theta));
    }

    /// Runs `steps` linearized prediction steps in place:
    /// `C ← J(x) C J(x)ᵀ + V`, `x ← f(x, θ)`.
    fn linearized_predict(
        &self,
        x: &mut DVector<f64>,
        cov: &mut DMatrix<f64>,
        theta: &DVector<f64>,
        steps: usize,
        scratch: &mut PredictScratch,
    ) {
        let v = self.state_noise_cov();
        for _ in 0..steps {
            self.drift_jacobian_into(x, theta, &mut scratch.jac);
            self.drift_into(x, theta, &mut scratch.next);
            std::mem::swap(x, &mut scratch.next);
            sandwich_add_in_place(&scratch.jac, cov, v, &mut scratch.tmp);
        }
    }
}

/// Reusable buffers for [`StateSpaceModel::linearized_predict`].
#[derive(Debug, Clone)]
pub struct PredictScratch {
    pub next: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub tmp: DMatrix<f64>,
}

impl PredictScratch {
    pub fn new(state_dim: usize) -> Self {
        Self {
            next: DVector::zeros(state_dim),
            jac: DMatrix::zeros(state_dim, state_dim),
            tmp: DMatrix::zeros(state_dim, state_dim),
        }
    }
}

/// `x' = A x + B θ`, `y = H x` with constant noise covariances.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    pub transition: DMatrix<f64>,
    pub param_input: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub state_noise: DMatrix<f64>,
    pub obs_noise: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        transition: DMatrix<f64>,
        param_input: DMatrix<f64>,
        observation: DMatrix<f64>,
        state_noise: DMatrix<f64>,
        obs_noise: DMatrix<f64>,
    ) -> Result<Self> {
        let dx = transition.nrows();
        let ok = transition.ncols() == dx
            && param_input.nrows() == dx
            && observation.ncols() == dx
            && state_noise.shape() == (dx, dx)
            && obs_noise.shape() == (observation.nrows(), observation.nrows());
        if !ok {
            return Err(FilterError::DimensionMismatch(
                "inconsistent linear model matrices".into(),
            ));
        }
        Ok(Self {
            transition,
            param_input,
            observation,
            state_noise,
            obs_noise,
        })
    }
}

impl StateSpaceModel for LinearGaussianModel {
    fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.observation.nrows()
    }

    fn param_dim(&self) -> usize {
        self.param_input.ncols()
    }

    fn drift(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        &self.transition * x + &self.param_input * theta
    }

    fn drift_jacobian(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.transition.clone()
    }

    fn observe(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        &self.observation * x
    }

    fn observation_jacobian(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.observation.clone()
    }

    fn state_noise_cov(&self) -> &DMatrix<f64> {
        &self.state_noise
    }

    fn obs_noise_cov(&self) -> &DMatrix<f64> {
        &self.obs_noise
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lorenz63Config {
    /// Euler–Maruyama step in continuous-time units.
    pub delta: f64,
    /// State-noise scale σ²; the per-step covariance is σ²Δ·I.
    pub sigma2: f64,
    pub sigma_y2: f64,
    pub k_o: f64,
    /// Observed state components, zero-based and increasing.
    pub observed: Vec<usize>,
    /// Euler steps between observations.
    pub m_o: usize,
}

impl Default for Lorenz63Config {
    fn default() -> Self {
        Self {
            delta: 2e-4,
            sigma2: 0.1,
            sigma_y2: 1.0,
            k_o: 1.0,
            observed: vec![0, 2],
            m_o: 5,
        }
    }
}

impl Lorenz63Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FilterError::InvalidArgument(msg.to_string()));
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad("delta must be positive");
        }
        if !(self.sigma2 >= 0.0) || !(self.sigma_y2 >= 0.0) {
            return bad("noise variances must be nonnegative");
        }
        if !self.k_o.is_finite() {
            return bad("k_o must be finite");
        }
        if self.m_o == 0 {
            return bad("m_o must be at least 1");
        }
        if self.observed.is_empty() {
            return bad("observed indices must be non-empty");
        }
        if self.observed.iter().any(|&i| i > 2) || self.observed.windows(2).any(|w| w[0] >= w[1]) {
            return bad("observed indices must be distinct, increasing and within 1..=3");
        }
        Ok(())
    }
}

/// The stochastic Lorenz 63 system, discretized with Euler–Maruyama and
/// observed linearly in a subset of its coordinates.
#[derive(Debug, Clone)]
pub struct Lorenz63 {
    config: Lorenz63Config,
    state_noise: DMatrix<f64>,
    obs_noise: DMatrix<f64>,
    obs_matrix: DMatrix<f64>,
}

impl Lorenz63 {
    pub fn new(config: Lorenz63Config) -> Result<Self> {
        config.validate()?;
        let dy = config.observed.len();
        let state_noise = DMatrix::identity(3, 3) * (config.sigma2 * config.delta);
        let obs_noise = DMatrix::identity(dy, dy) * config.sigma_y2;
        let mut obs_matrix = DMatrix::zeros(dy, 3);
        for (row, &col) in config.observed.iter().enumerate() {
            obs_matrix[(row, col)] = config.k_o;
        }
        Ok(Self {
            config,
            state_noise,
            obs_noise,
            obs_matrix,
        })
    }

    pub fn config(&self) -> &Lorenz63Config {
        &self.config
    }

    /// `k_o · G`, the constant observation Jacobian.
    pub fn obs_matrix(&self) -> &DMatrix<f64> {
        &self.obs_matrix
    }
}

#[inline]
fn euler_step(x: &[f64], theta: &[f64], delta: f64, out: &mut [f64]) {
    let (s, r, b) = (theta[0], theta[1], theta[2]);
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    out[0] = x1 - delta * s * (x1 - x2);
    out[1] = x2 + delta * ((r - x3) * x1 - x2);
    out[2] = x3 + delta * (x1 * x2 - b * x3);
}

#[inline]
fn euler_jacobian(x: &[f64], theta: &[f64], delta: f64, out: &mut [f64]) {
    let (s, r, b) = (theta[0], theta[1], theta[2]);
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    // column-major
    out[0] = 1.0 - delta * s;
    out[1] = delta * (r - x3);
    out[2] = delta * x2;
    out[3] = delta * s;
    out[4] = 1.0 - delta;
    out[5] = delta * x1;
    out[6] = 0.0;
    out[7] = -delta * x1;
    out[8] = 1.0 - delta * b;
}

fn check_lorenz_inputs(x: &DVector<f64>, theta: &DVector<f64>, delta: f64) -> Result<()> {
    if x.len() != 3 || theta.len() != 3 {
        return Err(FilterError::DimensionMismatch(
            "Lorenz 63 needs 3-dimensional state and parameters".into(),
        ));
    }
    if !all_finite_vec(x) || !all_finite_vec(theta) || !delta.is_finite() {
        return Err(FilterError::NonFinite("Lorenz 63 input"));
    }
    Ok(())
}

/// One Euler step `f_Δ(x, θ)` of the Lorenz 63 drift with `θ = (S, R, B)`.
pub fn lorenz63_drift(x: &DVector<f64>, theta: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    check_lorenz_inputs(x, theta, delta)?;
    let mut out = DVector::zeros(3);
    euler_step(x.as_slice(), theta.as_slice(), delta, out.as_mut_slice());
    Ok(out)
}

/// Jacobian of [`lorenz63_drift`] with respect to the state.
pub fn lorenz63_jacobian(
    x: &DVector<f64>,
    theta: &DVector<f64>,
    delta: f64,
) -> Result<DMatrix<f64>> {
    check_lorenz_inputs(x, theta, delta)?;
    let mut out = DMatrix::zeros(3, 3);
    euler_jacobian(x.as_slice(), theta.as_slice(), delta, out.as_mut_slice());
    Ok(out)
}

/// `k_o` times the observed components of `x`, in index order.
pub fn linear_observation(x: &DVector<f64>, config: &Lorenz63Config) -> Result<DVector<f64>> {
    if x.len() != 3 {
        return Err(FilterError::DimensionMismatch(
            "state must be 3-dimensional".into(),
        ));
    }
    if !all_finite_vec(x) {
        return Err(FilterError::NonFinite("state"));
    }
    Ok(DVector::from_iterator(
        config.observed.len(),
        config.observed.iter().map(|&i| config.k_o * x[i]),
    ))
}

impl StateSpaceModel for Lorenz63 {
    fn state_dim(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        self.config.observed.len()
    }

    fn param_dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(3);
        euler_step(
            x.as_slice(),
            theta.as_slice(),
            self.config.delta,
            out.as_mut_slice(),
        );
        out
    }

    fn drift_jacobian(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(3, 3);
        euler_jacobian(
            x.as_slice(),
            theta.as_slice(),
            self.config.delta,
            out.as_mut_slice(),
        );
        out
    }

    fn observe(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        &self.obs_matrix * x
    }

    fn observation_jacobian(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.obs_matrix.clone()
    }

    fn state_noise_cov(&self) -> &DMatrix<f64> {
        &self.state_noise
    }

    fn obs_noise_cov(&self) -> &DMatrix<f64> {
        &self.obs_noise
    }

    fn drift_into(&self, x: &DVector<f64>, theta: &DVector<f64>, out: &mut DVector<f64>) {
        euler_step(
            x.as_slice(),
            theta.as_slice(),
            self.config.delta,
            out.as_mut_slice(),
        );
    }

    fn drift_jacobian_into(&self, x: &DVector<f64>, theta: &DVector<f64>, out: &mut DMatrix<f64>) {
        euler_jacobian(
            x.as_slice(),
            theta.as_slice(),
            self.config.delta,
            out.as_mut_slice(),
        );
    }

    fn observe_into(&self, x: &DVector<f64>, _theta: &DVector<f64>, out: &mut DVector<f64>) {
        for (row, &col) in self.config.observed.iter().enumerate() {
            out[row] = self.config.k_o * x[col];
        }
    }

    fn observation_jacobian_into(
        &self,
        _x: &DVector<f64>,
        _theta: &DVector<f64>,
        out: &mut DMatrix<f64>,
    ) {
        out.copy_from(&self.obs_matrix);
    }

    fn linearized_predict(
        &self,
        x: &mut DVector<f64>,
        cov: &mut DMatrix<f64>,
        theta: &DVector<f64>,
        steps: usize,
        _scratch: &mut PredictScratch,
    ) {
        let delta = self.config.delta;
        let q = self.config.sigma2 * delta;
        let th: [f64; 3] = [theta[0], theta[1], theta[2]];
        let mut xs: [f64; 3] = [x[0], x[1], x[2]];
        let mut c = [0.0; 9];
        c.copy_from_slice(cov.as_slice());
        let mut next = [0.0; 3];
        let mut jac = [0.0; 9];
        for _ in 0..steps {
            euler_jacobian(&xs, &th, delta, &mut jac);
            euler_step(&xs, &th, delta, &mut next);
            xs = next;
            c = lorenz_sandwich(&jac, &c, q);
        }
        x.as_mut_slice().copy_from_slice(&xs);
        cov.as_mut_slice().copy_from_slice(&c);
    }
}

/// `J C Jᵀ + q I` for 3×3 column-major arrays with `C` symmetric.
#[inline(always)]
fn lorenz_sandwich(j: &[f64; 9], c: &[f64; 9], q: f64) -> [f64; 9] {
    let mut t = [0.0; 9];
    for col in 0..3 {
        for row in 0..3 {
            t[row + 3 * col] =
                j[row] * c[3 * col] + j[row + 3] * c[1 + 3 * col] + j[row + 6] * c[2 + 3 * col];
        }
    }
    let mut out = [0.0; 9];
    for col in 0..3 {
        for row in 0..=col {
            let v = t[row] * j[col] + t[row + 3] * j[col + 3] + t[row + 6] * j[col + 6];
            out[row + 3 * col] = v;
            out[col + 3 * row] = v;
        }
    }
    out[0] += q;
    out[4] += q;
    out[8] += q;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Discrete time index of the state this observation measures.
    pub t: usize,
    pub y: DVector<f64>,
}

/// Hidden states `x_0..x_T` and the sparse observations taken along the way.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<Observation>,
}

impl Trajectory {
    pub fn write_states_csv<W: Write>(&self, w: W) -> Result<()> {
        let dx = self.states.first().map_or(3, |s| s.len());
        let header = std::iter::once("t".to_string()).chain((1..=dx).map(|i| format!("x{i}")));
        write_indexed_rows(w, header, self.states.iter().enumerate())
    }

    pub fn write_observations_csv<W: Write>(&self, w: W) -> Result<()> {
        let dy = self.observations.first().map_or(1, |o| o.y.len());
        let header = std::iter::once("t".to_string()).chain((1..=dy).map(|i| format!("y{i}")));
        write_indexed_rows(w, header, self.observations.iter().map(|o| (o.t, &o.y)))
    }

    pub fn read_states_csv<R: Read>(r: R) -> Result<Vec<DVector<f64>>> {
        Ok(read_indexed_rows(r)?.into_iter().map(|(_, v)| v).collect())
    }

    pub fn read_observations_csv<R: Read>(r: R) -> Result<Vec<Observation>> {
        Ok(read_indexed_rows(r)?
            .into_iter()
            .map(|(t, y)| Observation { t, y })
            .collect())
    }
}

fn io_error(e: impl std::fmt::Display) -> FilterError {
    FilterError::InvalidArgument(format!("csv: {e}"))
}

fn write_indexed_rows<'a, W: Write>(
    w: W,
    header: impl Iterator<Item = String>,
    rows: impl Iterator<Item = (usize, &'a DVector<f64>)>,
) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(header).map_err(io_error)?;
    for (t, v) in rows {
        let record = std::iter::once(t.to_string()).chain(v.iter().map(|x| x.to_string()));
        out.write_record(record).map_err(io_error)?;
    }
    out.flush().map_err(io_error)
}

fn read_indexed_rows<R: Read>(r: R) -> Result<Vec<(usize, DVector<f64>)>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(io_error)?;
        let mut fields = record.iter();
        let t = fields
            .next()
            .ok_or_else(|| io_error("empty record"))?
            .parse::<usize>()
            .map_err(io_error)?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(io_error))
            .collect::<Result<Vec<_>>>()?;
        rows.push((t, DVector::from_vec(values)));
    }
    Ok(rows)
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `x ~ N(mean, cov)`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    belief: &GaussianBelief,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let l = covariance_sqrt(belief.cov())?;
    Ok(belief.mean() + l * standard_normal_vec(rng, belief.dim()))
}

/// Simulates `t_steps` Euler–Maruyama steps from `x_0 ~ x0`, observing every
/// `m_o` steps (never at `t = 0`).
pub fn simulate_with_rng<R: Rng + ?Sized>(
    model: &Lorenz63,
    theta: &DVector<f64>,
    x0: &GaussianBelief,
    t_steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if theta.len() != 3 || x0.dim() != 3 {
        return Err(FilterError::DimensionMismatch(
            "Lorenz 63 needs 3-dimensional state and parameters".into(),
        ));
    }
    let cfg = &model.config;
    let state_sd = (cfg.sigma2 * cfg.delta).sqrt();
    let obs_sd = cfg.sigma_y2.sqrt();
    let dy = cfg.observed.len();

    let mut states = Vec::with_capacity(t_steps + 1);
    let mut observations = Vec::with_capacity(t_steps / cfg.m_o);
    let mut x = sample_gaussian(x0, rng)?;
    states.push(x.clone());
    let mut next = DVector::zeros(3);
    for t in 1..=t_steps {
        model.drift_into(&x, theta, &mut next);
        for i in 0..3 {
            next[i] += state_sd * rng.sample::<f64, _>(StandardNormal);
        }
        std::mem::swap(&mut x, &mut next);
        if !all_finite_vec(&x) {
            return Err(FilterError::FilterDiverged);
        }
        states.push(x.clone());
        if t % cfg.m_o == 0 {
            let mut y = model.observe(&x, theta);
            for i in 0..dy {
                y[i] += obs_sd * rng.sample::<f64, _>(StandardNormal);
            }
            observations.push(Observation { t, y });
        }
    }
    Ok(Trajectory {
        states,
        observations,
    })
}

/// Seeded ground truth: identical seeds give bitwise-identical trajectories.
pub fn simulate_ground_truth(
    model: &Lorenz63,
    theta: &DVector<f64>,
    x0: &GaussianBelief,
    t_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with_rng(model, theta, x0, t_steps, &mut rng)
}
