//! Extended Kalman filter conditional on a fixed parameter vector.
//!
//! This is the second-layer filter of the nested scheme: each reference point
//! of the outer layer owns one of these, and the predictive likelihood it
//! produces drives the outer reweighting.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::gaussian::{psd_repair, GaussianBelief, PsdRepairPolicy};
use crate::linalg::{backward_sub, chol_log_det, cholesky_into, forward_sub};
use crate::models::{Observation, PredictScratch, StateSpaceModel};

#[derive(Debug, Clone, PartialEq)]
pub struct InnerFilterState {
    /// Filtering belief over the state after the last assimilated observation.
    pub belief: GaussianBelief,
    /// Parameter vector the belief was conditioned on.
    pub last_theta: DVector<f64>,
    /// Number of observations assimilated so far.
    pub last_obs_index: usize,
}

impl InnerFilterState {
    pub fn from_prior(prior: GaussianBelief, theta: DVector<f64>) -> Self {
        Self {
            belief: prior,
            last_theta: theta,
            last_obs_index: 0,
        }
    }
}

enum CovStatus {
    Factored,
    NeedsRepair,
    NonFinite,
}

/// Symmetrizes and tries a Cholesky factorization into `probe`.
#[inline(always)]
fn symmetrize_and_probe(c: &mut [f64], probe: &mut [f64], n: usize) -> CovStatus {
    let c = &mut c[..n * n];
    if !c.iter().all(|v| v.is_finite()) {
        return CovStatus::NonFinite;
    }
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (c[i + j * n] + c[j + i * n]);
            c[i + j * n] = avg;
            c[j + i * n] = avg;
        }
    }
    if cholesky_into(c, probe, n) {
        CovStatus::Factored
    } else {
        CovStatus::NeedsRepair
    }
}

/// Buffers for one measurement update, all column-major slices.
struct UpdateBuffers<'a> {
    h: &'a [f64],
    r: &'a [f64],
    predicted_obs: &'a [f64],
    y: &'a [f64],
    cross: &'a mut [f64],
    s: &'a mut [f64],
    s_chol: &'a mut [f64],
    gain: &'a mut [f64],
    residual: &'a mut [f64],
    z: &'a mut [f64],
}

/// Computes the predictive log-likelihood and, when `apply` is set, the
/// Kalman update of `x` and `c`. `None` when the innovation covariance is
/// not positive definite.
#[inline(always)]
fn update_kernel(
    n: usize,
    dy: usize,
    x: &mut [f64],
    c: &mut [f64],
    buf: UpdateBuffers<'_>,
    apply: bool,
) -> Option<f64> {
    let x = &mut x[..n];
    let c = &mut c[..n * n];
    let h = &buf.h[..dy * n];
    let r = &buf.r[..dy * dy];
    let cross = &mut buf.cross[..n * dy];
    let s = &mut buf.s[..dy * dy];
    let gain = &mut buf.gain[..n * dy];
    let residual = &mut buf.residual[..dy];
    let z = &mut buf.z[..dy];

    // C̃ Hᵀ
    for k in 0..dy {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += c[i + j * n] * h[k + j * dy];
            }
            cross[i + k * n] = acc;
        }
    }
    for b in 0..dy {
        for a in 0..dy {
            let mut acc = r[a + b * dy];
            for j in 0..n {
                acc += h[a + j * dy] * cross[j + b * n];
            }
            s[a + b * dy] = acc;
        }
    }
    if !cholesky_into(s, buf.s_chol, dy) {
        return None;
    }
    let l = &buf.s_chol[..dy * dy];

    for k in 0..dy {
        residual[k] = buf.y[k] - buf.predicted_obs[k];
    }
    z.copy_from_slice(residual);
    forward_sub(l, z, dy);
    let maha: f64 = z.iter().map(|v| v * v).sum();
    let ll = -0.5 * (dy as f64 * (2.0 * PI).ln() + chol_log_det(l, dy) + maha);
    if !apply {
        return Some(ll);
    }

    // Row i of K solves S kᵢ = (C̃ Hᵀ)ᵢ since S is symmetric.
    for i in 0..n {
        for k in 0..dy {
            z[k] = cross[i + k * n];
        }
        forward_sub(l, z, dy);
        backward_sub(l, z, dy);
        for k in 0..dy {
            gain[i + k * n] = z[k];
        }
    }
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..dy {
            acc += gain[i + k * n] * residual[k];
        }
        x[i] += acc;
    }
    for j in 0..n {
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..dy {
                acc += gain[i + k * n] * cross[j + k * n];
            }
            c[i + j * n] -= acc;
        }
    }
    Some(ll)
}

/// Preallocated buffers for the predict/update cycle, so a long replay of
/// the filter does not touch the allocator.
#[derive(Debug, Clone)]
pub(crate) struct EkfWorkspace {
    predict: PredictScratch,
    probe: Vec<f64>,
    h: DMatrix<f64>,
    cross: Vec<f64>,
    s: Vec<f64>,
    s_chol: Vec<f64>,
    predicted_obs: DVector<f64>,
    gain: Vec<f64>,
    residual: Vec<f64>,
    z: Vec<f64>,
}

impl EkfWorkspace {
    pub(crate) fn new(state_dim: usize, obs_dim: usize) -> Self {
        let (n, dy) = (state_dim, obs_dim);
        Self {
            predict: PredictScratch::new(n),
            probe: vec![0.0; n * n],
            h: DMatrix::zeros(dy, n),
            cross: vec![0.0; n * dy],
            s: vec![0.0; dy * dy],
            s_chol: vec![0.0; dy * dy],
            predicted_obs: DVector::zeros(dy),
            gain: vec![0.0; n * dy],
            residual: vec![0.0; dy],
            z: vec![0.0; dy],
        }
    }

    pub(crate) fn for_model<M: StateSpaceModel + ?Sized>(model: &M) -> Self {
        Self::new(model.state_dim(), model.obs_dim())
    }

    /// Symmetrizes `cov`, falling back to an eigenvalue repair only when it
    /// does not factor as positive definite.
    fn stabilize(&mut self, cov: &mut DMatrix<f64>) -> Result<()> {
        let n = cov.nrows();
        let c = cov.as_mut_slice();
        let status = match n {
            1 => symmetrize_and_probe(c, &mut self.probe, 1),
            2 => symmetrize_and_probe(c, &mut self.probe, 2),
            3 => symmetrize_and_probe(c, &mut self.probe, 3),
            _ => symmetrize_and_probe(c, &mut self.probe, n),
        };
        match status {
            CovStatus::Factored => Ok(()),
            CovStatus::NonFinite => Err(FilterError::FilterDiverged),
            CovStatus::NeedsRepair => {
                *cov = psd_repair(cov, &PsdRepairPolicy::default())?;
                Ok(())
            }
        }
    }

    fn predict<M: StateSpaceModel + ?Sized>(
        &mut self,
        x: &mut DVector<f64>,
        cov: &mut DMatrix<f64>,
        theta: &DVector<f64>,
        model: &M,
        micro_steps: usize,
    ) -> Result<()> {
        model.linearized_predict(x, cov, theta, micro_steps, &mut self.predict);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FilterError::FilterDiverged);
        }
        self.stabilize(cov)
    }

    /// Predictive log-likelihood of `y`, updating `x` and `cov` in place
    /// when `apply` is set.
    fn update<M: StateSpaceModel + ?Sized>(
        &mut self,
        x: &mut DVector<f64>,
        cov: &mut DMatrix<f64>,
        y: &DVector<f64>,
        theta: &DVector<f64>,
        model: &M,
        apply: bool,
    ) -> Result<f64> {
        let (n, dy) = (x.len(), y.len());
        model.observation_jacobian_into(x, theta, &mut self.h);
        model.observe_into(x, theta, &mut self.predicted_obs);
        let buf = UpdateBuffers {
            h: self.h.as_slice(),
            r: model.obs_noise_cov().as_slice(),
            predicted_obs: self.predicted_obs.as_slice(),
            y: y.as_slice(),
            cross: &mut self.cross,
            s: &mut self.s,
            s_chol: &mut self.s_chol,
            gain: &mut self.gain,
            residual: &mut self.residual,
            z: &mut self.z,
        };
        let (xs, c) = (x.as_mut_slice(), cov.as_mut_slice());
        let ll = match (n, dy) {
            (1, 1) => update_kernel(1, 1, xs, c, buf, apply),
            (2, 1) => update_kernel(2, 1, xs, c, buf, apply),
            (2, 2) => update_kernel(2, 2, xs, c, buf, apply),
            (3, 1) => update_kernel(3, 1, xs, c, buf, apply),
            (3, 2) => update_kernel(3, 2, xs, c, buf, apply),
            (3, 3) => update_kernel(3, 3, xs, c, buf, apply),
            _ => update_kernel(n, dy, xs, c, buf, apply),
        }
        .ok_or(FilterError::DegenerateInnovation)?;
        if apply {
            if !x.iter().all(|v| v.is_finite()) {
                return Err(FilterError::FilterDiverged);
            }
            self.stabilize(cov)?;
        }
        Ok(ll)
    }

    /// Predict then update in place, returning the predictive log-likelihood.
    pub(crate) fn step<M: StateSpaceModel + ?Sized>(
        &mut self,
        x: &mut DVector<f64>,
        cov: &mut DMatrix<f64>,
        y: &DVector<f64>,
        theta: &DVector<f64>,
        model: &M,
        micro_steps: usize,
    ) -> Result<f64> {
        self.predict(x, cov, theta, model, micro_steps)?;
        self.update(x, cov, y, theta, model, true)
    }
}

fn check_dims<M: StateSpaceModel + ?Sized>(
    belief: &GaussianBelief,
    theta: &DVector<f64>,
    model: &M,
) -> Result<()> {
    if belief.dim() != model.state_dim() || theta.len() != model.param_dim() {
        return Err(FilterError::DimensionMismatch(
            "belief or parameter dimension does not match the model".into(),
        ));
    }
    Ok(())
}

fn check_obs<M: StateSpaceModel + ?Sized>(y: &DVector<f64>, model: &M) -> Result<()> {
    if y.len() != model.obs_dim() {
        return Err(FilterError::DimensionMismatch(format!(
            "observation has dimension {}, model expects {}",
            y.len(),
            model.obs_dim()
        )));
    }
    Ok(())
}

fn check_micro_steps(micro_steps: usize) -> Result<()> {
    if micro_steps == 0 {
        return Err(FilterError::InvalidArgument(
            "micro_steps must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Propagates the belief through `micro_steps` linearized drift steps:
/// `x ← f(x, θ)`, `C ← J C Jᵀ + V`.
pub fn ekf_predict<M: StateSpaceModel + ?Sized>(
    belief: &GaussianBelief,
    theta: &DVector<f64>,
    model: &M,
    micro_steps: usize,
) -> Result<GaussianBelief> {
    check_micro_steps(micro_steps)?;
    check_dims(belief, theta, model)?;
    let mut ws = EkfWorkspace::for_model(model);
    let (mut x, mut cov) = belief.clone().into_parts();
    ws.predict(&mut x, &mut cov, theta, model, micro_steps)?;
    Ok(GaussianBelief::from_parts_unchecked(x, cov))
}

/// Measurement update `x̂ = x̃ + K(y − g(x̃))`, `Ĉ = (I − K H) C̃` with
/// `K = C̃ Hᵀ (H C̃ Hᵀ + R)⁻¹`.
pub fn ekf_update<M: StateSpaceModel + ?Sized>(
    predicted: &GaussianBelief,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    model: &M,
) -> Result<GaussianBelief> {
    Ok(ekf_assimilate(predicted, y, theta, model)?.0)
}

/// `log N(y | g(x̃), H C̃ Hᵀ + R)`, exact for observation maps affine in x.
pub fn predictive_log_likelihood<M: StateSpaceModel + ?Sized>(
    predicted: &GaussianBelief,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    model: &M,
) -> Result<f64> {
    check_dims(predicted, theta, model)?;
    check_obs(y, model)?;
    let mut ws = EkfWorkspace::for_model(model);
    let (mut x, mut cov) = predicted.clone().into_parts();
    ws.update(&mut x, &mut cov, y, theta, model, false)
}

/// Update and predictive log-likelihood sharing one innovation factorization.
pub fn ekf_assimilate<M: StateSpaceModel + ?Sized>(
    predicted: &GaussianBelief,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    model: &M,
) -> Result<(GaussianBelief, f64)> {
    check_dims(predicted, theta, model)?;
    check_obs(y, model)?;
    let mut ws = EkfWorkspace::for_model(model);
    let (mut x, mut cov) = predicted.clone().into_parts();
    let ll = ws.update(&mut x, &mut cov, y, theta, model, true)?;
    Ok((GaussianBelief::from_parts_unchecked(x, cov), ll))
}

/// One predict/update cycle of a persistent filter under `theta`.
pub fn ekf_step<M: StateSpaceModel + ?Sized>(
    state: &InnerFilterState,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    model: &M,
    micro_steps: usize,
) -> Result<(InnerFilterState, f64)> {
    let mut ws = EkfWorkspace::for_model(model);
    ekf_step_with(&mut ws, state, y, theta, model, micro_steps)
}

pub(crate) fn ekf_step_with<M: StateSpaceModel + ?Sized>(
    ws: &mut EkfWorkspace,
    state: &InnerFilterState,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    model: &M,
    micro_steps: usize,
) -> Result<(InnerFilterState, f64)> {
    check_micro_steps(micro_steps)?;
    check_dims(&state.belief, theta, model)?;
    check_obs(y, model)?;
    let (mut x, mut cov) = state.belief.clone().into_parts();
    let ll = ws.step(&mut x, &mut cov, y, theta, model, micro_steps)?;
    Ok((
        InnerFilterState {
            belief: GaussianBelief::from_parts_unchecked(x, cov),
            last_theta: theta.clone(),
            last_obs_index: state.last_obs_index + 1,
        },
        ll,
    ))
}

/// Runs the filter under `theta` from the prior over every observation in
/// `observations`, returning the final state and the predictive
/// log-likelihood of the last observation (`None` when there is none).
pub fn ekf_run_from_scratch<M: StateSpaceModel + ?Sized>(
    theta: &DVector<f64>,
    model: &M,
    prior: &GaussianBelief,
    observations: &[Observation],
    micro_steps: usize,
) -> Result<(InnerFilterState, Option<f64>)> {
    let mut ws = EkfWorkspace::for_model(model);
    ekf_run_from_scratch_with(&mut ws, theta, model, prior, observations, micro_steps)
}

pub(crate) fn ekf_run_from_scratch_with<M: StateSpaceModel + ?Sized>(
    ws: &mut EkfWorkspace,
    theta: &DVector<f64>,
    model: &M,
    prior: &GaussianBelief,
    observations: &[Observation],
    micro_steps: usize,
) -> Result<(InnerFilterState, Option<f64>)> {
    check_micro_steps(micro_steps)?;
    check_dims(prior, theta, model)?;
    let (mut x, mut cov) = prior.clone().into_parts();
    let mut last_ll = None;
    for obs in observations {
        check_obs(&obs.y, model)?;
        last_ll = Some(ws.step(&mut x, &mut cov, &obs.y, theta, model, micro_steps)?);
    }
    Ok((
        InnerFilterState {
            belief: GaussianBelief::from_parts_unchecked(x, cov),
            last_theta: theta.clone(),
            last_obs_index: observations.len(),
        },
        last_ll,
    ))
}
