//! Nested Gaussian filter: a sigma-point layer over the static parameters
//! wrapped around a bank of EKFs over the dynamic state.
//!
//! Each outer step scores every reference point θⁱ by its predictive
//! likelihood `p(y_t | y_{1:t-1}, θⁱ)`, reweights the points, moment-matches
//! a new Gaussian over θ and draws fresh reference points from it. An inner
//! filter whose point barely moved (relative p-norm test against `lambda`)
//! continues from its previous belief; otherwise it is replayed from the
//! prior over the full observation history.

use nalgebra::{DMatrix, DVector};

use crate::ekf::{ekf_run_from_scratch_with, ekf_step_with, EkfWorkspace, InnerFilterState};
use crate::error::{FilterError, Result};
use crate::gaussian::{
    psd_repair, weighted_moments, GaussianBelief, PointRule, PsdRepairPolicy, SigmaPointSet,
};
use crate::models::{Observation, StateSpaceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PNorm {
    One,
    #[default]
    Two,
    Infinity,
}

impl PNorm {
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        match self {
            PNorm::One => v.iter().map(|x| x.abs()).sum(),
            PNorm::Two => v.norm(),
            PNorm::Infinity => v.amax(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PNorm::One => "1",
            PNorm::Two => "2",
            PNorm::Infinity => "inf",
        }
    }
}

impl std::str::FromStr for PNorm {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "one" => Ok(PNorm::One),
            "2" | "two" => Ok(PNorm::Two),
            "inf" | "infinity" | "max" => Ok(PNorm::Infinity),
            other => Err(FilterError::InvalidArgument(format!(
                "unknown norm '{other}'"
            ))),
        }
    }
}

/// How the state covariance estimate combines the inner filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateCovarianceForm {
    /// Weighted spread of the inner-filter means only.
    #[default]
    BetweenFilters,
    /// Spread of the means plus the weighted inner covariances.
    FullMixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedFilterConfig {
    pub lambda: f64,
    pub norm: PNorm,
    pub point_rule: PointRule,
    /// Drift steps between consecutive observations.
    pub micro_steps: usize,
    /// `false` replays every inner filter from the prior at every step.
    pub recursive: bool,
    pub state_covariance: StateCovarianceForm,
}

impl Default for NestedFilterConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            norm: PNorm::Two,
            point_rule: PointRule::default(),
            micro_steps: 5,
            recursive: true,
            state_covariance: StateCovarianceForm::default(),
        }
    }
}

impl NestedFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(FilterError::InvalidArgument(
                "lambda must be positive".into(),
            ));
        }
        if self.micro_steps == 0 {
            return Err(FilterError::InvalidArgument(
                "micro_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `true` when `‖θ_new − θ_old‖_p < λ‖θ_old‖_p`, i.e. the inner filter may
/// continue from its previous belief. A zero-norm `θ_old` always fails.
pub fn norm_test(
    theta_new: &DVector<f64>,
    theta_old: &DVector<f64>,
    lambda: f64,
    norm: PNorm,
) -> bool {
    let scale = norm.norm(theta_old);
    if scale == 0.0 {
        return false;
    }
    norm.norm(&(theta_new - theta_old)) < lambda * scale
}

/// Normalizes `w_i · exp(ℓ_i)` in the log domain.
///
/// Returns the posterior weights and `log Σ_i w_i exp(ℓ_i)`.
pub fn posterior_weights(
    log_likelihoods: &[f64],
    prior_weights: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if log_likelihoods.len() != prior_weights.len() {
        return Err(FilterError::DimensionMismatch(format!(
            "{} log-likelihoods but {} weights",
            log_likelihoods.len(),
            prior_weights.len()
        )));
    }
    if log_likelihoods
        .iter()
        .any(|l| l.is_nan() || *l == f64::INFINITY)
    {
        return Err(FilterError::NonFinite("log-likelihood"));
    }
    let max = log_likelihoods
        .iter()
        .zip(prior_weights)
        .filter(|(l, w)| **w != 0.0 && l.is_finite())
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(FilterError::LikelihoodUnderflow);
    }
    let scaled: Vec<f64> = log_likelihoods
        .iter()
        .zip(prior_weights)
        .map(|(l, w)| if *w == 0.0 { 0.0 } else { w * (l - max).exp() })
        .collect();
    let total: f64 = scaled.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(FilterError::LikelihoodUnderflow);
    }
    let weights = scaled.into_iter().map(|a| a / total).collect();
    Ok((weights, max + total.ln()))
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n != weights.len() {
        return Err(FilterError::DimensionMismatch(format!(
            "{n} entries but {} weights",
            weights.len()
        )));
    }
    if n == 0 {
        return Err(FilterError::InvalidArgument("nothing to average".into()));
    }
    Ok(())
}

/// Posterior mean and covariance of θ from reweighted reference points.
pub fn estimate_parameters(
    points: &SigmaPointSet,
    posterior_weights: &[f64],
) -> Result<GaussianBelief> {
    check_weights(points.len(), posterior_weights)?;
    let (mean, cov) = weighted_moments(points.points(), posterior_weights);
    let cov = psd_repair(&cov, &PsdRepairPolicy::default())?;
    GaussianBelief::new(mean, cov)
}

/// Posterior mean and covariance of the state from the inner-filter bank.
pub fn estimate_state(
    bank: &[InnerFilterState],
    posterior_weights: &[f64],
    form: StateCovarianceForm,
) -> Result<GaussianBelief> {
    check_weights(bank.len(), posterior_weights)?;
    let means: Vec<DVector<f64>> = bank.iter().map(|f| f.belief.mean().clone()).collect();
    let (mean, mut cov) = weighted_moments(&means, posterior_weights);
    if form == StateCovarianceForm::FullMixture {
        for (f, &w) in bank.iter().zip(posterior_weights) {
            cov += f.belief.cov() * w;
        }
    }
    GaussianBelief::new(mean, cov)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    /// Inner filters replayed from the prior during this step.
    pub restart_count: usize,
    /// `log p(y_t | y_{1:t-1})`.
    pub log_normalizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedFilterState {
    /// Gaussian approximation of `p(θ | y_{1:t})`.
    pub param_belief: GaussianBelief,
    /// Reference points used at the next step.
    pub points: SigmaPointSet,
    /// Reference points used at the last completed step.
    pub prev_points: SigmaPointSet,
    pub bank: Vec<InnerFilterState>,
    /// Gaussian approximation of `p(x_t | y_{1:t})`.
    pub state_belief: GaussianBelief,
    pub log_normalizer: f64,
    /// Posterior weights of the last completed step.
    pub posterior_weights: Vec<f64>,
    prior_x: GaussianBelief,
}

impl NestedFilterState {
    pub fn initialize(
        prior_theta: &GaussianBelief,
        prior_x: &GaussianBelief,
        config: &NestedFilterConfig,
    ) -> Result<Self> {
        config.validate()?;
        let points = config.point_rule.generate(prior_theta)?;
        let bank = points
            .points()
            .iter()
            .map(|p| InnerFilterState::from_prior(prior_x.clone(), p.clone()))
            .collect();
        Ok(Self {
            param_belief: prior_theta.clone(),
            prev_points: points.clone(),
            posterior_weights: points.weights().to_vec(),
            points,
            bank,
            state_belief: prior_x.clone(),
            log_normalizer: 0.0,
            prior_x: prior_x.clone(),
        })
    }

    pub fn prior_x(&self) -> &GaussianBelief {
        &self.prior_x
    }

    /// Number of observations assimilated so far.
    pub fn steps(&self) -> usize {
        self.bank.first().map_or(0, |f| f.last_obs_index)
    }

    /// Assimilates `history.last()`. `history` must hold every observation
    /// since the start, since restarted inner filters replay it.
    pub fn outer_step<M: StateSpaceModel + ?Sized>(
        &mut self,
        model: &M,
        history: &[Observation],
        config: &NestedFilterConfig,
    ) -> Result<StepSummary> {
        let obs = history
            .last()
            .ok_or_else(|| FilterError::InvalidArgument("empty observation history".into()))?;
        if history.len() != self.steps() + 1 {
            return Err(FilterError::InvalidArgument(format!(
                "history holds {} observations, expected {}",
                history.len(),
                self.steps() + 1
            )));
        }

        let mut ws = EkfWorkspace::for_model(model);
        let mut restart_count = 0;
        let mut bank = Vec::with_capacity(self.bank.len());
        let mut log_likelihoods = Vec::with_capacity(self.bank.len());
        for ((theta, prev), filter) in self
            .points
            .points()
            .iter()
            .zip(self.prev_points.points())
            .zip(&self.bank)
        {
            let (state, ll) =
                if config.recursive && norm_test(theta, prev, config.lambda, config.norm) {
                    ekf_step_with(&mut ws, filter, &obs.y, theta, model, config.micro_steps)?
                } else {
                    restart_count += 1;
                    let (state, ll) = ekf_run_from_scratch_with(
                        &mut ws,
                        theta,
                        model,
                        &self.prior_x,
                        history,
                        config.micro_steps,
                    )?;
                    (state, ll.expect("history is non-empty"))
                };
            bank.push(state);
            log_likelihoods.push(ll);
        }

        let (weights, log_normalizer) = posterior_weights(&log_likelihoods, self.points.weights())?;
        let param_belief = estimate_parameters(&self.points, &weights)?;
        let state_belief = estimate_state(&bank, &weights, config.state_covariance)?;
        let next_points = config.point_rule.generate(&param_belief)?;

        self.prev_points = std::mem::replace(&mut self.points, next_points);
        self.bank = bank;
        self.param_belief = param_belief;
        self.state_belief = state_belief;
        self.log_normalizer = log_normalizer;
        self.posterior_weights = weights;
        Ok(StepSummary {
            restart_count,
            log_normalizer,
        })
    }
}

/// Drives [`NestedFilterState`] over an observation sequence, keeping the
/// history needed for restarts.
pub struct NestedFilter<'m, M: StateSpaceModel + ?Sized> {
    model: &'m M,
    config: NestedFilterConfig,
    state: NestedFilterState,
    history: Vec<Observation>,
}

impl<'m, M: StateSpaceModel + ?Sized> NestedFilter<'m, M> {
    pub fn new(
        model: &'m M,
        prior_theta: &GaussianBelief,
        prior_x: &GaussianBelief,
        config: NestedFilterConfig,
    ) -> Result<Self> {
        if prior_theta.dim() != model.param_dim() || prior_x.dim() != model.state_dim() {
            return Err(FilterError::DimensionMismatch(
                "prior dimensions do not match the model".into(),
            ));
        }
        let state = NestedFilterState::initialize(prior_theta, prior_x, &config)?;
        Ok(Self {
            model,
            config,
            state,
            history: Vec::new(),
        })
    }

    pub fn step(&mut self, obs: Observation) -> Result<StepSummary> {
        self.history.push(obs);
        let result = self
            .state
            .outer_step(self.model, &self.history, &self.config);
        if result.is_err() {
            self.history.pop();
        }
        result
    }

    pub fn state(&self) -> &NestedFilterState {
        &self.state
    }

    pub fn config(&self) -> &NestedFilterConfig {
        &self.config
    }

    pub fn theta_estimate(&self) -> &DVector<f64> {
        self.state.param_belief.mean()
    }

    pub fn state_estimate(&self) -> &DVector<f64> {
        self.state.state_belief.mean()
    }

    pub fn param_cov(&self) -> &DMatrix<f64> {
        self.state.param_belief.cov()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearGaussianModel;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    #[test]
    fn norm_test_examples() {
        let old = dvector![10.0, 28.0, 8.0 / 3.0];
        assert!(norm_test(&old, &old, 1e-9, PNorm::Two));
        let new = &old + dvector![0.001, 0.0, 0.0];
        assert!(norm_test(&new, &old, 1e-3, PNorm::Two));
        assert_abs_diff_eq!(1e-3 * old.norm(), 0.029852, epsilon = 1e-6);
        assert!(!norm_test(
            &DVector::zeros(3),
            &dvector![3.0, 4.0, 0.0],
            1e-3,
            PNorm::Two
        ));
        assert!(!norm_test(
            &DVector::zeros(3),
            &DVector::zeros(3),
            1.0,
            PNorm::Infinity
        ));
    }

    #[test]
    fn p_norms() {
        let v = dvector![3.0, -4.0, 1.0];
        assert_eq!(PNorm::One.norm(&v), 8.0);
        assert_eq!(PNorm::Two.norm(&v), 26.0_f64.sqrt());
        assert_eq!(PNorm::Infinity.norm(&v), 4.0);
        assert_eq!("inf".parse::<PNorm>().unwrap(), PNorm::Infinity);
        assert!("3".parse::<PNorm>().is_err());
    }

    #[test]
    fn posterior_weight_examples() {
        let c = -3.7;
        let (w, _) = posterior_weights(&[c, c, c], &[1.0 / 3.0; 3]).unwrap();
        for x in &w {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let (w, log_norm) = posterior_weights(&[2.0_f64.ln(), 0.0], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(log_norm, 1.5_f64.ln(), epsilon = 1e-15);

        let err = posterior_weights(&[f64::NEG_INFINITY; 2], &[0.5, 0.5]).unwrap_err();
        assert_eq!(err.to_string(), "total likelihood underflow");
        assert!(posterior_weights(&[0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn zero_prior_weight_is_ignored() {
        let (w, _) = posterior_weights(&[5.0, -1.0, -2.0], &[0.0, 0.5, 0.5]).unwrap();
        assert_eq!(w[0], 0.0);
        assert_abs_diff_eq!(w[1] + w[2], 1.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn posterior_weights_normalize_and_shift(
            lls in prop::collection::vec(-800.0..50.0f64, 1..12),
            raw in prop::collection::vec(0.01..1.0f64, 12),
            shift in -1000.0..1000.0f64,
            scale in 0.1..10.0f64,
        ) {
            let n = lls.len();
            let total: f64 = raw[..n].iter().sum();
            let prior: Vec<f64> = raw[..n].iter().map(|w| w / total).collect();
            let (w, _) = posterior_weights(&lls, &prior).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));

            let shifted: Vec<f64> = lls.iter().map(|l| l + shift).collect();
            let (ws, _) = posterior_weights(&shifted, &prior).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() <= 1e-12);
            }

            let scaled_prior: Vec<f64> = prior.iter().map(|p| p * scale).collect();
            let total: f64 = scaled_prior.iter().sum();
            let renormalized: Vec<f64> = scaled_prior.iter().map(|p| p / total).collect();
            let (wr, _) = posterior_weights(&lls, &renormalized).unwrap();
            for (a, b) in w.iter().zip(&wr) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn parameter_estimate_examples() {
        let set = SigmaPointSet::new(vec![dvector![0.0], dvector![1.0]], vec![0.5, 0.5]).unwrap();
        let b = estimate_parameters(&set, &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(b.mean()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(b.cov()[(0, 0)], 0.1875, epsilon = 1e-15);

        let b = estimate_parameters(&set, &[0.0, 1.0]).unwrap();
        assert_eq!(b.mean()[0], 1.0);
        assert!(b.cov()[(0, 0)] <= 1e-12);

        let prior = GaussianBelief::new(
            dvector![10.0, 28.0, 2.5],
            dmatrix![1.0, 0.2, 0.0; 0.2, 2.0, 0.1; 0.0, 0.1, 0.5],
        )
        .unwrap();
        let set = PointRule::default().generate(&prior).unwrap();
        let b = estimate_parameters(&set, set.weights()).unwrap();
        assert!((b.mean() - prior.mean()).amax() < 1e-12);
        assert!((b.cov() - prior.cov()).amax() < 1e-12);
    }

    #[test]
    fn state_estimate_examples() {
        let filt = |m: f64| {
            InnerFilterState::from_prior(
                GaussianBelief::new(dvector![m], dmatrix![0.3]).unwrap(),
                dvector![1.0],
            )
        };
        let same = vec![filt(2.0), filt(2.0)];
        let b = estimate_state(&same, &[0.4, 0.6], StateCovarianceForm::BetweenFilters).unwrap();
        assert_eq!(b.mean()[0], 2.0);
        assert_eq!(b.cov()[(0, 0)], 0.0);

        let two = vec![filt(-1.0), filt(1.0)];
        let b = estimate_state(&two, &[0.5, 0.5], StateCovarianceForm::BetweenFilters).unwrap();
        assert_eq!(b.mean()[0], 0.0);
        assert_eq!(b.cov()[(0, 0)], 1.0);
        let b = estimate_state(&two, &[0.5, 0.5], StateCovarianceForm::FullMixture).unwrap();
        assert_abs_diff_eq!(b.cov()[(0, 0)], 1.3, epsilon = 1e-15);

        let b = estimate_state(&two, &[0.0, 1.0], StateCovarianceForm::BetweenFilters).unwrap();
        assert_eq!(b.mean()[0], 1.0);
        assert_eq!(b.cov()[(0, 0)], 0.0);
    }

    /// `x' = 0.9 x + θ`, `y = x`.
    fn drift_offset_model() -> LinearGaussianModel {
        LinearGaussianModel::new(
            dmatrix![0.9],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.2],
            dmatrix![0.5],
        )
        .unwrap()
    }

    fn obs(ys: &[f64]) -> Vec<Observation> {
        ys.iter()
            .enumerate()
            .map(|(k, &y)| Observation {
                t: k + 1,
                y: dvector![y],
            })
            .collect()
    }

    fn config(rule: PointRule, recursive: bool, lambda: f64) -> NestedFilterConfig {
        NestedFilterConfig {
            lambda,
            point_rule: rule,
            micro_steps: 1,
            recursive,
            ..Default::default()
        }
    }

    #[test]
    fn initialization_sizes() {
        let prior_theta = GaussianBelief::isotropic(dvector![10.0, 28.0, 2.7], 1.0).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![-6.0, -5.5, -24.5], 1.0).unwrap();
        let s =
            NestedFilterState::initialize(&prior_theta, &prior_x, &NestedFilterConfig::default())
                .unwrap();
        assert_eq!(s.points.len(), 7);
        assert_eq!(s.bank.len(), 7);
        assert!(s.bank.iter().all(|f| f.belief == prior_x));
        assert_eq!(s.prev_points, s.points);

        let cfg = NestedFilterConfig {
            point_rule: PointRule::Cubature,
            ..Default::default()
        };
        let s = NestedFilterState::initialize(&prior_theta, &prior_x, &cfg).unwrap();
        assert_eq!(s.points.len(), 6);

        let frozen = GaussianBelief::new(dvector![10.0, 28.0, 2.7], DMatrix::zeros(3, 3)).unwrap();
        let s = NestedFilterState::initialize(&frozen, &prior_x, &NestedFilterConfig::default())
            .unwrap();
        assert!(s.points.points().iter().all(|p| p == frozen.mean()));

        let bad = NestedFilterConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(NestedFilterState::initialize(&prior_theta, &prior_x, &bad).is_err());
    }

    #[test]
    fn single_point_rule_collapses() {
        let model = drift_offset_model();
        let prior_theta = GaussianBelief::isotropic(dvector![0.4], 1.0).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![0.0], 1.0).unwrap();
        let mut f = NestedFilter::new(
            &model,
            &prior_theta,
            &prior_x,
            config(PointRule::MeanOnly, true, 1e-3),
        )
        .unwrap();
        for o in obs(&[1.0, -0.3, 2.2]) {
            f.step(o).unwrap();
            assert_eq!(f.theta_estimate()[0], 0.4);
            assert!(f.param_cov()[(0, 0)] <= 1e-12);
        }
    }

    #[test]
    fn uninformative_likelihood_keeps_prior_moments() {
        // θ never enters the dynamics, so every point scores the same.
        let model = LinearGaussianModel::new(
            dmatrix![0.9],
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![0.2],
            dmatrix![0.5],
        )
        .unwrap();
        let prior_theta = GaussianBelief::isotropic(dvector![1.5], 0.7).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![0.0], 1.0).unwrap();
        let mut f = NestedFilter::new(
            &model,
            &prior_theta,
            &prior_x,
            config(PointRule::default(), true, 1e-3),
        )
        .unwrap();
        f.step(obs(&[0.8]).remove(0)).unwrap();
        assert_abs_diff_eq!(f.theta_estimate()[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.param_cov()[(0, 0)], 0.7, epsilon = 1e-12);
    }

    fn kalman_loglik_scalar(theta: f64, ys: &[f64]) -> f64 {
        // Independent scalar Kalman filter for x' = 0.9 x + θ + N(0, 0.2), y = x + N(0, 0.5).
        let (mut m, mut c) = (0.0, 1.0);
        let mut total = 0.0;
        for &y in ys {
            let mp = 0.9 * m + theta;
            let cp = 0.81 * c + 0.2;
            let s = cp + 0.5;
            total += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (y - mp).powi(2) / s);
            let k = cp / s;
            m = mp + k * (y - mp);
            c = (1.0 - k) * cp;
        }
        total
    }

    #[test]
    fn first_step_matches_three_atom_posterior() {
        let model = drift_offset_model();
        let prior_theta = GaussianBelief::isotropic(dvector![0.3], 0.5).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![0.0], 1.0).unwrap();
        let rule = PointRule::Unscented { kappa: Some(2.0) };
        let atoms = rule.generate(&prior_theta).unwrap();
        let ys = [1.4];
        let mut f =
            NestedFilter::new(&model, &prior_theta, &prior_x, config(rule, true, 1e-3)).unwrap();
        f.step(obs(&ys).remove(0)).unwrap();

        let unnorm: Vec<f64> = atoms
            .points()
            .iter()
            .zip(atoms.weights())
            .map(|(p, w)| w * kalman_loglik_scalar(p[0], &ys).exp())
            .collect();
        let z: f64 = unnorm.iter().sum();
        let expected: f64 = atoms
            .points()
            .iter()
            .zip(&unnorm)
            .map(|(p, u)| p[0] * u / z)
            .sum();
        assert_abs_diff_eq!(f.theta_estimate()[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(f.state().log_normalizer, z.ln(), epsilon = 1e-12);
    }

    #[test]
    fn non_recursive_mode_matches_incremental_for_fixed_points() {
        let model = drift_offset_model();
        let prior_theta = GaussianBelief::isotropic(dvector![0.3], 0.5).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![0.0], 1.0).unwrap();
        let ys = [1.4, 0.2, -0.7, 2.0, 1.1];
        let mut inc = NestedFilter::new(
            &model,
            &prior_theta,
            &prior_x,
            config(PointRule::MeanOnly, true, 1e-3),
        )
        .unwrap();
        let mut scratch = NestedFilter::new(
            &model,
            &prior_theta,
            &prior_x,
            config(PointRule::MeanOnly, false, 1e-3),
        )
        .unwrap();
        for o in obs(&ys) {
            let a = inc.step(o.clone()).unwrap();
            let b = scratch.step(o).unwrap();
            assert_eq!(a.restart_count, 0);
            assert_eq!(b.restart_count, 1);
            assert_eq!(a.log_normalizer, b.log_normalizer);
            assert_eq!(inc.state().state_belief, scratch.state().state_belief);
            assert_eq!(inc.state().param_belief, scratch.state().param_belief);
        }
    }

    #[test]
    fn history_must_line_up() {
        let model = drift_offset_model();
        let prior_theta = GaussianBelief::isotropic(dvector![0.3], 0.5).unwrap();
        let prior_x = GaussianBelief::isotropic(dvector![0.0], 1.0).unwrap();
        let cfg = config(PointRule::default(), true, 1e-3);
        let mut s = NestedFilterState::initialize(&prior_theta, &prior_x, &cfg).unwrap();
        assert!(s.outer_step(&model, &[], &cfg).is_err());
        assert!(s.outer_step(&model, &obs(&[1.0, 2.0]), &cfg).is_err());
        assert!(s.outer_step(&model, &obs(&[1.0]), &cfg).is_ok());
    }
}
