//! Comparison filters: state-augmented UKF and EnKF, and an SMC outer layer
//! over a bank of EKFs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::ekf::{ekf_step_with, EkfWorkspace, InnerFilterState};
use crate::error::{FilterError, Result};
use crate::gaussian::{
    covariance_sqrt, psd_repair, weighted_moments, GaussianBelief, PointRule, PsdRepairPolicy,
};
use crate::linalg::{symmetrize_in_place, SpdFactor};
use crate::models::{sample_gaussian, standard_normal_vec, StateSpaceModel};
use crate::nested::posterior_weights;

/// Belief over the stacked vector `(x; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub belief: GaussianBelief,
    state_dim: usize,
}

impl AugmentedState {
    /// Independent priors on the state and the parameters.
    pub fn from_priors(prior_x: &GaussianBelief, prior_theta: &GaussianBelief) -> Result<Self> {
        let (dx, dt) = (prior_x.dim(), prior_theta.dim());
        let mut mean = DVector::zeros(dx + dt);
        mean.rows_mut(0, dx).copy_from(prior_x.mean());
        mean.rows_mut(dx, dt).copy_from(prior_theta.mean());
        let mut cov = DMatrix::zeros(dx + dt, dx + dt);
        cov.view_mut((0, 0), (dx, dx)).copy_from(prior_x.cov());
        cov.view_mut((dx, dx), (dt, dt))
            .copy_from(prior_theta.cov());
        Ok(Self {
            belief: GaussianBelief::new(mean, cov)?,
            state_dim: dx,
        })
    }

    pub fn new(belief: GaussianBelief, state_dim: usize) -> Result<Self> {
        if state_dim > belief.dim() {
            return Err(FilterError::DimensionMismatch(
                "state dimension exceeds the augmented dimension".into(),
            ));
        }
        Ok(Self { belief, state_dim })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn state_mean(&self) -> DVector<f64> {
        self.belief.mean().rows(0, self.state_dim).into_owned()
    }

    pub fn theta_mean(&self) -> DVector<f64> {
        let n = self.belief.dim();
        self.belief
            .mean()
            .rows(self.state_dim, n - self.state_dim)
            .into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedConfig {
    pub micro_steps: usize,
    /// Standard deviation of the artificial parameter dynamics, added once
    /// per observation interval.
    pub jitter_std: DVector<f64>,
    pub point_rule: PointRule,
}

impl AugmentedConfig {
    /// Jitter of `1e-4` prior standard deviations per parameter.
    pub fn for_prior(prior_theta: &GaussianBelief, micro_steps: usize) -> Self {
        Self {
            micro_steps,
            jitter_std: prior_theta.cov().diagonal().map(|v| 1e-4 * v.sqrt()),
            point_rule: PointRule::default(),
        }
    }

    fn validate(&self, param_dim: usize) -> Result<()> {
        if self.micro_steps == 0 {
            return Err(FilterError::InvalidArgument(
                "micro_steps must be at least 1".into(),
            ));
        }
        if self.jitter_std.len() != param_dim {
            return Err(FilterError::DimensionMismatch(
                "jitter needs one entry per parameter".into(),
            ));
        }
        if self
            .jitter_std
            .iter()
            .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(FilterError::InvalidArgument(
                "jitter must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn check_augmented<M: StateSpaceModel + ?Sized>(
    dim: usize,
    state_dim: usize,
    model: &M,
) -> Result<()> {
    if state_dim != model.state_dim() || dim != model.state_dim() + model.param_dim() {
        return Err(FilterError::DimensionMismatch(
            "augmented dimension does not match the model".into(),
        ));
    }
    Ok(())
}

fn split(p: &DVector<f64>, dx: usize) -> (DVector<f64>, DVector<f64>) {
    (
        p.rows(0, dx).into_owned(),
        p.rows(dx, p.len() - dx).into_owned(),
    )
}

fn cross_moment(
    a: &[DVector<f64>],
    a_mean: &DVector<f64>,
    b: &[DVector<f64>],
    b_mean: &DVector<f64>,
    weights: impl Iterator<Item = f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((pa, pb), w) in a.iter().zip(b).zip(weights) {
        out.ger(w, &(pa - a_mean), &(pb - b_mean), 1.0);
    }
    out
}

/// `K = P_xy S⁻¹` for symmetric positive definite `S`.
fn kalman_gain(cross: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let factor = SpdFactor::new(s).ok_or(FilterError::DegenerateInnovation)?;
    let mut gain_t = cross.transpose();
    for mut col in gain_t.column_iter_mut() {
        let c = col.as_mut_slice();
        factor.forward(c);
        factor.backward(c);
    }
    Ok(gain_t.transpose())
}

/// Unscented prediction over one observation interval: each sigma point is
/// pushed through `micro_steps` drift steps with θ held fixed, then the
/// accumulated state noise `micro_steps·V` and the parameter jitter are added.
pub fn augmented_ukf_predict<M: StateSpaceModel + ?Sized>(
    state: &AugmentedState,
    model: &M,
    config: &AugmentedConfig,
) -> Result<AugmentedState> {
    let dx = state.state_dim;
    check_augmented(state.belief.dim(), dx, model)?;
    config.validate(model.param_dim())?;
    let set = config.point_rule.generate(&state.belief)?;
    let mut next = DVector::zeros(dx);
    let propagated: Vec<DVector<f64>> = set
        .points()
        .iter()
        .map(|p| {
            let (mut x, theta) = split(p, dx);
            for _ in 0..config.micro_steps {
                model.drift_into(&x, &theta, &mut next);
                std::mem::swap(&mut x, &mut next);
            }
            let mut out = p.clone();
            out.rows_mut(0, dx).copy_from(&x);
            out
        })
        .collect();
    let (mean, mut cov) = weighted_moments(&propagated, set.weights());
    {
        let mut block = cov.view_mut((0, 0), (dx, dx));
        block += model.state_noise_cov() * config.micro_steps as f64;
    }
    for (j, s) in config.jitter_std.iter().enumerate() {
        cov[(dx + j, dx + j)] += s * s;
    }
    if !mean.iter().all(|m| m.is_finite()) || !cov.iter().all(|c| c.is_finite()) {
        return Err(FilterError::FilterDiverged);
    }
    let cov = psd_repair(&cov, &PsdRepairPolicy::default())?;
    Ok(AugmentedState {
        belief: GaussianBelief::from_parts_unchecked(mean, cov),
        state_dim: dx,
    })
}

/// Unscented measurement update of the augmented belief.
pub fn augmented_ukf_update<M: StateSpaceModel + ?Sized>(
    predicted: &AugmentedState,
    y: &DVector<f64>,
    model: &M,
    config: &AugmentedConfig,
) -> Result<AugmentedState> {
    let dx = predicted.state_dim;
    check_augmented(predicted.belief.dim(), dx, model)?;
    if y.len() != model.obs_dim() {
        return Err(FilterError::DimensionMismatch(
            "observation dimension".into(),
        ));
    }
    let set = config.point_rule.generate(&predicted.belief)?;
    let ys: Vec<DVector<f64>> = set
        .points()
        .iter()
        .map(|p| {
            let (x, theta) = split(p, dx);
            model.observe(&x, &theta)
        })
        .collect();
    let (y_mean, syy) = weighted_moments(&ys, set.weights());
    let s = syy + model.obs_noise_cov();
    let (mean, cov) = predicted.belief.clone().into_parts();
    let cross = cross_moment(
        set.points(),
        &mean,
        &ys,
        &y_mean,
        set.weights().iter().copied(),
    );
    let gain = kalman_gain(&cross, &s)?;
    let mean = mean + &gain * (y - y_mean);
    let cov = cov - &gain * cross.transpose();
    if !mean.iter().all(|m| m.is_finite()) || !cov.iter().all(|c| c.is_finite()) {
        return Err(FilterError::FilterDiverged);
    }
    let cov = psd_repair(&cov, &PsdRepairPolicy::default())?;
    Ok(AugmentedState {
        belief: GaussianBelief::new(mean, cov)?,
        state_dim: dx,
    })
}

pub fn augmented_ukf_step<M: StateSpaceModel + ?Sized>(
    state: &AugmentedState,
    y: &DVector<f64>,
    model: &M,
    config: &AugmentedConfig,
) -> Result<AugmentedState> {
    let predicted = augmented_ukf_predict(state, model, config)?;
    augmented_ukf_update(&predicted, y, model, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub size: usize,
    pub micro_steps: usize,
    pub jitter_std: DVector<f64>,
}

impl EnsembleConfig {
    pub fn for_prior(prior_theta: &GaussianBelief, micro_steps: usize) -> Self {
        Self {
            size: 100,
            micro_steps,
            jitter_std: prior_theta.cov().diagonal().map(|v| 1e-4 * v.sqrt()),
        }
    }
}

/// Members of a state-augmented ensemble, each stacked as `(x; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEnsemble {
    pub members: Vec<DVector<f64>>,
    state_dim: usize,
}

impl AugmentedEnsemble {
    pub fn new(members: Vec<DVector<f64>>, state_dim: usize) -> Result<Self> {
        if members.len() < 2 {
            return Err(FilterError::InvalidArgument(
                "ensemble needs at least 2 members".into(),
            ));
        }
        let d = members[0].len();
        if state_dim > d || members.iter().any(|m| m.len() != d) {
            return Err(FilterError::DimensionMismatch("ragged ensemble".into()));
        }
        Ok(Self { members, state_dim })
    }

    pub fn from_priors<R: Rng + ?Sized>(
        prior_x: &GaussianBelief,
        prior_theta: &GaussianBelief,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let joint = AugmentedState::from_priors(prior_x, prior_theta)?;
        let members = (0..size)
            .map(|_| sample_gaussian(&joint.belief, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, prior_x.dim())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.members[0].len());
        for m in &self.members {
            mean += m;
        }
        mean / self.members.len() as f64
    }

    /// Sample covariance with the `N − 1` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let w = 1.0 / (self.members.len() - 1) as f64;
        let mut cov = cross_moment(
            &self.members,
            &mean,
            &self.members,
            &mean,
            std::iter::repeat(w),
        );
        symmetrize_in_place(&mut cov);
        cov
    }

    pub fn state_mean(&self) -> DVector<f64> {
        self.mean().rows(0, self.state_dim).into_owned()
    }

    pub fn theta_mean(&self) -> DVector<f64> {
        let mean = self.mean();
        mean.rows(self.state_dim, mean.len() - self.state_dim)
            .into_owned()
    }
}

/// Stochastic EnKF with perturbed observations over the augmented state.
pub fn augmented_enkf_step<M: StateSpaceModel + ?Sized, R: Rng + ?Sized>(
    ensemble: &AugmentedEnsemble,
    y: &DVector<f64>,
    model: &M,
    config: &EnsembleConfig,
    rng: &mut R,
) -> Result<AugmentedEnsemble> {
    let dx = ensemble.state_dim;
    check_augmented(ensemble.members[0].len(), dx, model)?;
    if y.len() != model.obs_dim() || config.jitter_std.len() != model.param_dim() {
        return Err(FilterError::DimensionMismatch(
            "observation or jitter dimension".into(),
        ));
    }
    if config.micro_steps == 0 {
        return Err(FilterError::InvalidArgument(
            "micro_steps must be at least 1".into(),
        ));
    }
    let v_sqrt = covariance_sqrt(model.state_noise_cov())?;
    let r_sqrt = covariance_sqrt(model.obs_noise_cov())?;
    let dt = model.param_dim();

    let mut forecast = Vec::with_capacity(ensemble.len());
    for member in &ensemble.members {
        let (mut x, mut theta) = split(member, dx);
        for _ in 0..config.micro_steps {
            x = model.drift(&x, &theta) + &v_sqrt * standard_normal_vec(rng, dx);
        }
        theta += standard_normal_vec(rng, dt).component_mul(&config.jitter_std);
        let mut out = member.clone();
        out.rows_mut(0, dx).copy_from(&x);
        out.rows_mut(dx, dt).copy_from(&theta);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(FilterError::FilterDiverged);
        }
        forecast.push(out);
    }
    let forecast = AugmentedEnsemble::new(forecast, dx)?;
    let mean = forecast.mean();
    let w = 1.0 / (forecast.len() - 1) as f64;
    let cov_trace: f64 = forecast
        .members
        .iter()
        .map(|m| (m - &mean).norm_squared() * w)
        .sum();
    if cov_trace == 0.0 {
        return Err(FilterError::EnsembleCollapse);
    }

    let ys: Vec<DVector<f64>> = forecast
        .members
        .iter()
        .map(|m| {
            let (x, theta) = split(m, dx);
            model.observe(&x, &theta)
        })
        .collect();
    let mut y_mean = DVector::zeros(y.len());
    for g in &ys {
        y_mean += g;
    }
    y_mean /= ys.len() as f64;
    let s = cross_moment(&ys, &y_mean, &ys, &y_mean, std::iter::repeat(w)) + model.obs_noise_cov();
    let cross = cross_moment(&forecast.members, &mean, &ys, &y_mean, std::iter::repeat(w));
    let gain = kalman_gain(&cross, &s)?;

    let members = forecast
        .members
        .iter()
        .zip(&ys)
        .map(|(m, g)| {
            let perturbed = y + &r_sqrt * standard_normal_vec(rng, y.len());
            m + &gain * (perturbed - g)
        })
        .collect();
    AugmentedEnsemble::new(members, dx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcConfig {
    pub particles: usize,
    /// Jitter scale `c`; each step perturbs θ with standard deviation `c/√N`.
    pub jitter_scale: DVector<f64>,
    pub micro_steps: usize,
    /// Resample when the effective sample size falls below this fraction of N.
    pub ess_fraction: f64,
}

impl SmcConfig {
    pub fn for_prior(prior_theta: &GaussianBelief, micro_steps: usize) -> Self {
        Self {
            particles: 120,
            jitter_scale: prior_theta.cov().diagonal().map(|v| 0.05 * v.sqrt()),
            micro_steps,
            ess_fraction: 0.5,
        }
    }
}

/// Weighted parameter particles, each carrying its own EKF.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub bank: Vec<InnerFilterState>,
}

impl ParticleCloud {
    pub fn initialize<R: Rng + ?Sized>(
        prior_theta: &GaussianBelief,
        prior_x: &GaussianBelief,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(FilterError::InvalidArgument(
                "need at least one particle".into(),
            ));
        }
        let particles = (0..n)
            .map(|_| sample_gaussian(prior_theta, rng))
            .collect::<Result<Vec<_>>>()?;
        let bank = particles
            .iter()
            .map(|p| InnerFilterState::from_prior(prior_x.clone(), p.clone()))
            .collect();
        Ok(Self {
            particles,
            weights: vec![1.0 / n as f64; n],
            bank,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn theta_estimate(&self) -> DVector<f64> {
        weighted_moments(&self.particles, &self.weights).0
    }

    pub fn state_estimate(&self) -> DVector<f64> {
        let means: Vec<DVector<f64>> = self.bank.iter().map(|f| f.belief.mean().clone()).collect();
        weighted_moments(&means, &self.weights).0
    }
}

/// Draws `n` indices with probabilities `weights` by inverting the
/// cumulative sum at sorted uniforms.
pub fn multinomial_resample<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    uniforms.sort_by(f64::total_cmp);
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let (mut idx, mut cum) = (0, weights[0] / total);
    for u in uniforms {
        while u >= cum && idx + 1 < weights.len() {
            idx += 1;
            cum += weights[idx] / total;
        }
        out.push(idx);
    }
    out
}

/// Jitter, per-particle EKF step, reweighting and conditional resampling.
pub fn smc_ekf_step<M: StateSpaceModel + ?Sized, R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    y: &DVector<f64>,
    model: &M,
    config: &SmcConfig,
    rng: &mut R,
) -> Result<ParticleCloud> {
    let n = cloud.len();
    if n == 0 || cloud.weights.len() != n || cloud.bank.len() != n {
        return Err(FilterError::InvalidArgument(
            "inconsistent particle cloud".into(),
        ));
    }
    if config.jitter_scale.len() != model.param_dim() {
        return Err(FilterError::DimensionMismatch(
            "jitter needs one entry per parameter".into(),
        ));
    }
    let jitter_std = &config.jitter_scale / (n as f64).sqrt();
    let mut ws = EkfWorkspace::for_model(model);
    let mut particles = Vec::with_capacity(n);
    let mut bank = Vec::with_capacity(n);
    let mut lls = Vec::with_capacity(n);
    for (theta, filter) in cloud.particles.iter().zip(&cloud.bank) {
        let theta = theta + standard_normal_vec(rng, theta.len()).component_mul(&jitter_std);
        let (state, ll) = ekf_step_with(&mut ws, filter, y, &theta, model, config.micro_steps)?;
        particles.push(theta);
        bank.push(state);
        lls.push(ll);
    }
    let (weights, _) = posterior_weights(&lls, &cloud.weights)?;
    let mut next = ParticleCloud {
        particles,
        weights,
        bank,
    };
    if next.effective_sample_size() < config.ess_fraction * n as f64 {
        let idx = multinomial_resample(&next.weights, n, rng);
        next = ParticleCloud {
            particles: idx.iter().map(|&i| next.particles[i].clone()).collect(),
            weights: vec![1.0 / n as f64; n],
            bank: idx.iter().map(|&i| next.bank[i].clone()).collect(),
        };
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearGaussianModel, Lorenz63, Lorenz63Config};
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-state model driven by one parameter, observed in the first state.
    fn driven_model() -> LinearGaussianModel {
        LinearGaussianModel::new(
            dmatrix![0.9, 0.1; -0.2, 0.8],
            dmatrix![0.5; 0.3],
            dmatrix![1.0, 0.0],
            dmatrix![0.2, 0.05; 0.05, 0.1],
            dmatrix![0.4],
        )
        .unwrap()
    }

    /// Exact Kalman filter on `(x; θ)` with identity parameter dynamics.
    fn augmented_kf(
        mut m: DVector<f64>,
        mut p: DMatrix<f64>,
        model: &LinearGaussianModel,
        jitter: &DVector<f64>,
        micro_steps: usize,
        ys: &[DVector<f64>],
    ) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let (dx, dt) = (model.transition.nrows(), model.param_input.ncols());
        let n = dx + dt;
        let mut f = DMatrix::identity(n, n);
        f.view_mut((0, 0), (dx, dx)).copy_from(&model.transition);
        f.view_mut((0, dx), (dx, dt)).copy_from(&model.param_input);
        let mut q = DMatrix::zeros(n, n);
        q.view_mut((0, 0), (dx, dx)).copy_from(&model.state_noise);
        let mut h = DMatrix::zeros(model.observation.nrows(), n);
        h.view_mut((0, 0), (model.observation.nrows(), dx))
            .copy_from(&model.observation);
        // One interval: x through the composed drift, accumulated noise added once.
        let f = f.pow(micro_steps as u32);
        let q = q * micro_steps as f64;
        let mut out = Vec::new();
        for y in ys {
            m = &f * m;
            p = &f * p * f.transpose() + &q;
            for j in 0..dt {
                p[(dx + j, dx + j)] += jitter[j] * jitter[j];
            }
            let s = &h * &p * h.transpose() + &model.obs_noise;
            let k = &p * h.transpose() * s.try_inverse().unwrap();
            m = &m + &k * (y - &h * &m);
            p = &p - &k * &h * &p;
            out.push((m.clone(), p.clone()));
        }
        out
    }

    fn linear_observations(
        model: &LinearGaussianModel,
        steps: usize,
        seed: u64,
    ) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = dvector![0.7];
        let mut x = dvector![0.5, -0.3];
        let (lv, lr) = (
            covariance_sqrt(&model.state_noise).unwrap(),
            covariance_sqrt(&model.obs_noise).unwrap(),
        );
        (0..steps)
            .map(|_| {
                x = model.drift(&x, &theta) + &lv * standard_normal_vec(&mut rng, 2);
                model.observe(&x, &theta) + &lr * standard_normal_vec(&mut rng, 1)
            })
            .collect()
    }

    #[test]
    fn augmented_ukf_matches_exact_augmented_kf() {
        let model = driven_model();
        let prior_x =
            GaussianBelief::new(dvector![0.0, 0.0], dmatrix![1.0, 0.2; 0.2, 0.5]).unwrap();
        let prior_theta = GaussianBelief::new(dvector![0.2], dmatrix![0.8]).unwrap();
        let ys = linear_observations(&model, 200, 4);
        for micro_steps in [1, 3] {
            let config = AugmentedConfig {
                micro_steps,
                jitter_std: dvector![0.01],
                point_rule: PointRule::default(),
            };
            let mut state = AugmentedState::from_priors(&prior_x, &prior_theta).unwrap();
            let oracle = augmented_kf(
                state.belief.mean().clone(),
                state.belief.cov().clone(),
                &model,
                &config.jitter_std,
                micro_steps,
                &ys,
            );
            for (y, (m, p)) in ys.iter().zip(&oracle) {
                state = augmented_ukf_step(&state, y, &model, &config).unwrap();
                assert!((state.belief.mean() - m).amax() < 1e-8);
                assert!((state.belief.cov() - p).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn noiseless_exact_prior_stays_at_truth() {
        let cfg = Lorenz63Config {
            sigma2: 0.0,
            ..Default::default()
        };
        let model = Lorenz63::new(cfg).unwrap();
        let theta = dvector![10.0, 28.0, 8.0 / 3.0];
        let mut x = dvector![-6.0, -5.5, -24.5];
        let prior_x = GaussianBelief::new(x.clone(), DMatrix::zeros(3, 3)).unwrap();
        let prior_theta = GaussianBelief::new(theta.clone(), DMatrix::zeros(3, 3)).unwrap();
        let config = AugmentedConfig {
            micro_steps: 5,
            jitter_std: DVector::zeros(3),
            point_rule: PointRule::default(),
        };
        let mut state = AugmentedState::from_priors(&prior_x, &prior_theta).unwrap();
        for _ in 0..50 {
            for _ in 0..5 {
                x = model.drift(&x, &theta);
            }
            let y = model.observe(&x, &theta);
            state = augmented_ukf_step(&state, &y, &model, &config).unwrap();
            assert!((state.state_mean() - &x).amax() < 1e-9);
            assert!((state.theta_mean() - &theta).amax() < 1e-12);
        }
    }

    #[test]
    fn parameter_block_prediction_is_identity_plus_jitter() {
        let model = Lorenz63::new(Lorenz63Config::default()).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![-6.0, -5.5, -24.5], 1.0).unwrap();
        let prior_theta = GaussianBelief::new(
            dvector![12.0, 27.0, 3.0],
            dmatrix![1.0, 0.1, 0.0; 0.1, 0.5, 0.0; 0.0, 0.0, 0.25],
        )
        .unwrap();
        let config = AugmentedConfig::for_prior(&prior_theta, 5);
        let state = AugmentedState::from_priors(&prior_x, &prior_theta).unwrap();
        let predicted = augmented_ukf_predict(&state, &model, &config).unwrap();
        assert!((predicted.theta_mean() - prior_theta.mean()).amax() < 1e-12);
        let block = predicted.belief.cov().view((3, 3), (3, 3)).into_owned();
        let expected =
            prior_theta.cov() + DMatrix::from_diagonal(&config.jitter_std.map(|s| s * s));
        assert!((block - expected).amax() < 1e-12);
    }

    fn scalar_model(a: f64, q: f64, r: f64) -> LinearGaussianModel {
        LinearGaussianModel::new(
            dmatrix![a],
            DMatrix::zeros(1, 0),
            dmatrix![1.0],
            dmatrix![q],
            dmatrix![r],
        )
        .unwrap()
    }

    #[test]
    fn enkf_detects_collapse() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let ensemble = AugmentedEnsemble::new(vec![dvector![1.0]; 5], 1).unwrap();
        let config = EnsembleConfig {
            size: 5,
            micro_steps: 1,
            jitter_std: DVector::zeros(0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err =
            augmented_enkf_step(&ensemble, &dvector![2.0], &model, &config, &mut rng).unwrap_err();
        assert_eq!(err, FilterError::EnsembleCollapse);
        assert!(AugmentedEnsemble::new(vec![dvector![1.0]], 1).is_err());
    }

    #[test]
    fn large_enkf_matches_kalman_posterior() {
        let (a, q, r, m0, p0, y) = (0.9, 0.5, 0.8, 1.0, 2.0, 2.5);
        let model = scalar_model(a, q, r);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = GaussianBelief::new(dvector![m0], dmatrix![p0]).unwrap();
        let empty = GaussianBelief::new(DVector::zeros(0), DMatrix::zeros(0, 0)).unwrap();
        let ensemble = AugmentedEnsemble::from_priors(&prior, &empty, 100_000, &mut rng).unwrap();
        let config = EnsembleConfig {
            size: 100_000,
            micro_steps: 1,
            jitter_std: DVector::zeros(0),
        };
        let post = augmented_enkf_step(&ensemble, &dvector![y], &model, &config, &mut rng).unwrap();
        let (mp, pp) = (a * m0, a * a * p0 + q);
        let k = pp / (pp + r);
        let exact_mean = mp + k * (y - mp);
        let exact_var = (1.0 - k) * pp;
        let mean = post.mean()[0];
        assert!(
            (mean - exact_mean).abs() < 0.01 * exact_mean.abs(),
            "{mean} vs {exact_mean}"
        );
        let var = post.covariance()[(0, 0)];
        assert!(
            (var - exact_var).abs() < 0.02 * exact_var,
            "{var} vs {exact_var}"
        );
    }

    #[test]
    fn enkf_is_deterministic_per_seed() {
        let model = Lorenz63::new(Lorenz63Config::default()).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![-6.0, -5.5, -24.5], 1.0).unwrap();
        let prior_theta = GaussianBelief::isotropic(dvector![11.0, 27.0, 3.0], 1.0).unwrap();
        let config = EnsembleConfig::for_prior(&prior_theta, 5);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut e =
                AugmentedEnsemble::from_priors(&prior_x, &prior_theta, 100, &mut rng).unwrap();
            for _ in 0..20 {
                e = augmented_enkf_step(&e, &dvector![-6.0, -24.0], &model, &config, &mut rng)
                    .unwrap();
            }
            e
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let cov = a.covariance();
        assert_eq!(cov, cov.transpose());
        assert!(cov.symmetric_eigenvalues().min() >= -1e-9);
    }

    #[test]
    fn identical_particles_keep_uniform_weights() {
        let model = Lorenz63::new(Lorenz63Config::default()).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![-6.0, -5.5, -24.5], 1.0).unwrap();
        let theta = dvector![10.0, 28.0, 8.0 / 3.0];
        let n = 10;
        let cloud = ParticleCloud {
            particles: vec![theta.clone(); n],
            weights: vec![0.1; n],
            bank: vec![InnerFilterState::from_prior(prior_x, theta); n],
        };
        let config = SmcConfig {
            particles: n,
            jitter_scale: DVector::zeros(3),
            micro_steps: 5,
            ess_fraction: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let next = smc_ekf_step(&cloud, &dvector![-6.5, -24.0], &model, &config, &mut rng).unwrap();
        assert!(next.weights.iter().all(|w| (w - 0.1).abs() < 1e-15));
    }

    #[test]
    fn smc_weights_stay_normalized() {
        let model = Lorenz63::new(Lorenz63Config::default()).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![-6.0, -5.5, -24.5], 1.0).unwrap();
        let prior_theta = GaussianBelief::isotropic(dvector![11.0, 27.0, 3.0], 1.0).unwrap();
        let config = SmcConfig::for_prior(&prior_theta, 5);
        assert_eq!(config.particles, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cloud = ParticleCloud::initialize(&prior_theta, &prior_x, 120, &mut rng).unwrap();
        let truth = crate::models::simulate_ground_truth(
            &model,
            &dvector![10.0, 28.0, 8.0 / 3.0],
            &prior_x,
            250,
            8,
        )
        .unwrap();
        for obs in &truth.observations {
            cloud = smc_ekf_step(&cloud, &obs.y, &model, &config, &mut rng).unwrap();
            let total: f64 = cloud.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(cloud.weights.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn resampling_preserves_weighted_mean() {
        let values = [-2.0, 0.5, 1.0, 3.0, 7.0];
        let weights = [0.1, 0.4, 0.2, 0.25, 0.05];
        let n = values.len();
        let target: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        let var: f64 = values
            .iter()
            .zip(&weights)
            .map(|(v, w)| w * (v - target).powi(2))
            .sum();
        let reps = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = 0.0;
        for _ in 0..reps {
            let idx = multinomial_resample(&weights, n, &mut rng);
            acc += idx.iter().map(|&i| values[i]).sum::<f64>() / n as f64;
        }
        let mean = acc / reps as f64;
        // Each resampled mean has variance var/n.
        let se = (var / n as f64 / reps as f64).sqrt();
        assert!(
            (mean - target).abs() < 3.0 * se,
            "{mean} vs {target} (se {se})"
        );
    }
}
