//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The exported functions are thin wrappers over plain Rust functions so the
//! numerics can be tested natively.

use nalgebra::{DMatrix, DVector};
use ngf_core::experiments::{draw_prior_mean, nmse, simulate_run, RunConfig};
use ngf_core::gaussian::{cubature_points, unscented_points, GaussianBelief};
use ngf_core::models::{Lorenz63, Observation};
use ngf_core::nested::{NestedFilterConfig, NestedFilterState, PNorm};
use wasm_bindgen::prelude::*;

fn demo_config(seed: u64, t_end: f64) -> RunConfig {
    RunConfig {
        seed,
        t_end,
        ..Default::default()
    }
}

/// Flattened `(x1, x2, x3)` triples of one simulated trajectory, keeping
/// every `stride`-th Euler step.
pub fn lorenz_trajectory(
    seed: u64,
    t_end: f64,
    sigma2: f64,
    stride: usize,
) -> Result<Vec<f64>, String> {
    if !(t_end > 0.0 && t_end <= 50.0) {
        return Err("t_end must lie in (0, 50]".into());
    }
    let mut config = demo_config(seed, t_end);
    config.model.sigma2 = sigma2;
    let truth = simulate_run(&config, 0).map_err(|e| e.to_string())?;
    Ok(truth
        .states
        .iter()
        .step_by(stride.max(1))
        .flat_map(|x| x.iter().copied().collect::<Vec<_>>())
        .collect())
}

/// Points and weights of a 2-D Gaussian under the unscented (`"ukf"`) or
/// cubature (`"ckf"`) rule, flattened as `(x, y, w)` triples.
pub fn sigma_point_triples(
    mean: &[f64],
    cov: &[f64],
    rule: &str,
    kappa: f64,
) -> Result<Vec<f64>, String> {
    if mean.len() != 2 || cov.len() != 4 {
        return Err("expected a 2-vector mean and a row-major 2x2 covariance".into());
    }
    let belief = GaussianBelief::new(
        DVector::from_column_slice(mean),
        DMatrix::from_row_slice(2, 2, cov),
    )
    .map_err(|e| e.to_string())?;
    let set = match rule {
        "ukf" => unscented_points(&belief, kappa),
        "ckf" => cubature_points(&belief),
        other => return Err(format!("unknown rule '{other}'")),
    }
    .map_err(|e| e.to_string())?;
    Ok(set
        .points()
        .iter()
        .zip(set.weights())
        .flat_map(|(p, w)| [p[0], p[1], *w])
        .collect())
}

/// Values per row returned by [`NestedRun::advance`].
pub const ROW_WIDTH: usize = 7;

/// A nested UKF-EKF run on simulated Lorenz 63 data that can be advanced a
/// few observations at a time.
#[wasm_bindgen]
pub struct NestedRun {
    model: Lorenz63,
    config: NestedFilterConfig,
    theta_true: DVector<f64>,
    delta: f64,
    states: Vec<DVector<f64>>,
    observations: Vec<Observation>,
    history: Vec<Observation>,
    filter: NestedFilterState,
}

impl NestedRun {
    pub fn create(seed: u64, t_end: f64, lambda: f64, max_norm: bool) -> Result<NestedRun, String> {
        if !(t_end > 0.0 && t_end <= 20.0) {
            return Err("t_end must lie in (0, 20]".into());
        }
        let mut run = demo_config(seed, t_end);
        run.nested.lambda = lambda;
        run.nested.norm = if max_norm {
            PNorm::Infinity
        } else {
            PNorm::Two
        };
        run.nested.micro_steps = run.model.m_o;
        run.validate().map_err(|e| e.to_string())?;
        let err = |e: ngf_core::FilterError| e.to_string();
        let model = Lorenz63::new(run.model.clone()).map_err(err)?;
        let truth = simulate_run(&run, 0).map_err(err)?;
        let prior_theta = GaussianBelief::isotropic(draw_prior_mean(&run, 0), 1.0).map_err(err)?;
        let filter =
            NestedFilterState::initialize(&prior_theta, &run.x0_prior().map_err(err)?, &run.nested)
                .map_err(err)?;
        Ok(NestedRun {
            model,
            config: run.nested,
            theta_true: run.theta_true,
            delta: run.model.delta,
            states: truth.states,
            observations: truth.observations,
            history: Vec::new(),
            filter,
        })
    }

    /// Assimilates up to `n` more observations. Each row holds `t`, the
    /// three parameter estimates, NMSE_θ, NMSE_x and the restart count.
    pub fn advance_rows(&mut self, n: usize) -> Result<Vec<f64>, String> {
        let mut out = Vec::with_capacity(n * ROW_WIDTH);
        for _ in 0..n {
            let Some(obs) = self.observations.get(self.history.len()).cloned() else {
                break;
            };
            self.history.push(obs.clone());
            let summary = self
                .filter
                .outer_step(&self.model, &self.history, &self.config)
                .map_err(|e| e.to_string())?;
            let theta = self.filter.param_belief.mean();
            let nmse_theta = nmse(&self.theta_true, theta).map_err(|e| e.to_string())?;
            let nmse_x = nmse(&self.states[obs.t], self.filter.state_belief.mean())
                .map_err(|e| e.to_string())?;
            out.extend_from_slice(&[
                obs.t as f64 * self.delta,
                theta[0],
                theta[1],
                theta[2],
                nmse_theta,
                nmse_x,
                summary.restart_count as f64,
            ]);
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl NestedRun {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, t_end: f64, lambda: f64, max_norm: bool) -> Result<NestedRun, JsError> {
        NestedRun::create(seed as u64, t_end, lambda, max_norm).map_err(|e| JsError::new(&e))
    }

    /// See [`NestedRun::advance_rows`]; rows are flattened.
    pub fn advance(&mut self, n: usize) -> Result<Vec<f64>, JsError> {
        self.advance_rows(n).map_err(|e| JsError::new(&e))
    }

    pub fn done(&self) -> bool {
        self.history.len() == self.observations.len()
    }

    pub fn total_steps(&self) -> usize {
        self.observations.len()
    }

    pub fn row_width(&self) -> usize {
        ROW_WIDTH
    }
}

#[wasm_bindgen]
pub fn simulate_lorenz(
    seed: u32,
    t_end: f64,
    sigma2: f64,
    stride: usize,
) -> Result<Vec<f64>, JsError> {
    lorenz_trajectory(seed as u64, t_end, sigma2, stride).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sigma_points(
    mean: &[f64],
    cov: &[f64],
    rule: &str,
    kappa: f64,
) -> Result<Vec<f64>, JsError> {
    sigma_point_triples(mean, cov, rule, kappa).map_err(|e| JsError::new(&e))
}
