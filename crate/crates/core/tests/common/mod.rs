// Shared by the integration tests and the acceptance binary; not every
// target uses every helper.
#![allow(dead_code)]

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use ngf_core::baselines::{augmented_ukf_step, AugmentedConfig, AugmentedState};
use ngf_core::ekf::{ekf_step, InnerFilterState};
use ngf_core::experiments::{
    read_rows_csv, run_single, simulate_run, write_rows_csv, ResultRow, RunConfig,
};
use ngf_core::gaussian::{
    cubature_points, default_kappa, moments_from_points, psd_repair, unscented_points,
    GaussianBelief, PointRule, PsdRepairPolicy,
};
use ngf_core::models::{lorenz63_drift, lorenz63_jacobian, LinearGaussianModel, Lorenz63};
use ngf_core::nested::{posterior_weights, NestedFilter, NestedFilterConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn chol(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().cholesky().expect("positive definite").l()
}

/// Draws `steps` observations from a linear-Gaussian model with parameter
/// vector `theta`, starting from `x0`.
pub fn simulate_linear(
    model: &LinearGaussianModel,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lq, lr) = (chol(&model.state_noise), chol(&model.obs_noise));
    let mut x = x0.clone();
    (0..steps)
        .map(|_| {
            x = &model.transition * &x
                + &model.param_input * theta
                + &lq * normal_vec(&mut rng, x.len());
            &model.observation * &x + &lr * normal_vec(&mut rng, model.observation.nrows())
        })
        .collect()
}

/// Textbook Kalman filter with an explicit inverse of the innovation
/// covariance. Returns the filtered mean and covariance after every step.
pub fn kalman_filter(
    model: &LinearGaussianModel,
    theta: &DVector<f64>,
    mut m: DVector<f64>,
    mut p: DMatrix<f64>,
    ys: &[DVector<f64>],
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let (a, b, h) = (&model.transition, &model.param_input, &model.observation);
    ys.iter()
        .map(|y| {
            m = a * &m + b * theta;
            p = a * &p * a.transpose() + &model.state_noise;
            let s = h * &p * h.transpose() + &model.obs_noise;
            let k = &p * h.transpose() * s.try_inverse().expect("invertible innovation covariance");
            m = &m + &k * (y - h * &m);
            p = &p - &k * h * &p;
            (m.clone(), p.clone())
        })
        .collect()
}

pub fn scalar_model() -> LinearGaussianModel {
    LinearGaussianModel::new(
        dmatrix![0.95],
        dmatrix![0.1],
        dmatrix![1.0],
        dmatrix![0.3],
        dmatrix![0.5],
    )
    .unwrap()
}

pub fn planar_model() -> LinearGaussianModel {
    LinearGaussianModel::new(
        dmatrix![0.9, 0.2; -0.1, 0.85],
        dmatrix![0.4, 0.0; 0.0, -0.2],
        dmatrix![1.0, 0.0; 0.5, 1.0],
        dmatrix![0.2, 0.03; 0.03, 0.1],
        dmatrix![0.6, 0.1; 0.1, 0.3],
    )
    .unwrap()
}

/// Largest entrywise gap between the inner EKF and the exact Kalman filter
/// over a 200-step seeded run.
pub fn ekf_kalman_gap(model: &LinearGaussianModel, seed: u64) -> f64 {
    let dx = model.transition.nrows();
    let theta = DVector::from_fn(model.param_input.ncols(), |i, _| 0.5 + i as f64);
    let x0 = DVector::from_element(dx, 0.3);
    let ys = simulate_linear(model, &theta, &x0, 200, seed);
    let prior = GaussianBelief::new(DVector::zeros(dx), DMatrix::identity(dx, dx) * 2.0).unwrap();
    let oracle = kalman_filter(
        model,
        &theta,
        prior.mean().clone(),
        prior.cov().clone(),
        &ys,
    );
    let mut state = InnerFilterState::from_prior(prior, theta.clone());
    let mut gap = 0.0_f64;
    for (y, (m, p)) in ys.iter().zip(&oracle) {
        state = ekf_step(&state, y, &theta, model, 1).unwrap().0;
        gap = gap
            .max((state.belief.mean() - m).amax())
            .max((state.belief.cov() - p).amax());
    }
    gap
}

/// Exact Kalman filter on the stacked `(x; θ)` vector with static
/// parameters plus a jitter variance added each step.
fn augmented_kalman(
    model: &LinearGaussianModel,
    prior: &GaussianBelief,
    jitter: &DVector<f64>,
    ys: &[DVector<f64>],
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let (dx, dt) = (model.transition.nrows(), model.param_input.ncols());
    let n = dx + dt;
    let mut f = DMatrix::identity(n, n);
    f.view_mut((0, 0), (dx, dx)).copy_from(&model.transition);
    f.view_mut((0, dx), (dx, dt)).copy_from(&model.param_input);
    let mut q = DMatrix::zeros(n, n);
    q.view_mut((0, 0), (dx, dx)).copy_from(&model.state_noise);
    for j in 0..dt {
        q[(dx + j, dx + j)] = jitter[j] * jitter[j];
    }
    let dy = model.observation.nrows();
    let mut h = DMatrix::zeros(dy, n);
    h.view_mut((0, 0), (dy, dx)).copy_from(&model.observation);
    let augmented =
        LinearGaussianModel::new(f, DMatrix::zeros(n, 0), h, q, model.obs_noise.clone()).unwrap();
    kalman_filter(
        &augmented,
        &DVector::zeros(0),
        prior.mean().clone(),
        prior.cov().clone(),
        ys,
    )
}

/// Largest entrywise gap between the augmented UKF and the exact augmented
/// Kalman filter over a 200-step seeded run of `model`.
pub fn augmented_ukf_kalman_gap(model: &LinearGaussianModel, seed: u64) -> f64 {
    let (dx, dt) = (model.transition.nrows(), model.param_input.ncols());
    let theta = DVector::from_element(dt, 0.7);
    let ys = simulate_linear(model, &theta, &DVector::from_element(dx, 0.2), 200, seed);
    let prior_x = GaussianBelief::new(DVector::zeros(dx), DMatrix::identity(dx, dx)).unwrap();
    let prior_theta = GaussianBelief::new(
        DVector::from_element(dt, 0.1),
        DMatrix::identity(dt, dt) * 0.8,
    )
    .unwrap();
    let config = AugmentedConfig {
        micro_steps: 1,
        jitter_std: DVector::from_element(dt, 0.01),
        point_rule: PointRule::default(),
    };
    let mut state = AugmentedState::from_priors(&prior_x, &prior_theta).unwrap();
    let oracle = augmented_kalman(model, &state.belief, &config.jitter_std, &ys);
    let mut gap = 0.0_f64;
    for (y, (m, p)) in ys.iter().zip(&oracle) {
        state = augmented_ukf_step(&state, y, model, &config).unwrap();
        gap = gap
            .max((state.belief.mean() - m).amax())
            .max((state.belief.cov() - p).amax());
    }
    gap
}

fn random_belief(rng: &mut ChaCha8Rng, d: usize) -> GaussianBelief {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    GaussianBelief::new(normal_vec(rng, d) * 3.0, cov).unwrap()
}

/// Worst moment-matching error of the unscented and cubature rules over
/// random beliefs in dimensions 1 to 6.
pub fn sigma_point_moment_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for c in 0..cases {
        let d = 1 + c % 6;
        let belief = random_belief(&mut rng, d);
        for set in [
            unscented_points(&belief, default_kappa(d)).unwrap(),
            cubature_points(&belief).unwrap(),
        ] {
            let m = moments_from_points(&set).unwrap();
            worst = worst
                .max((m.mean() - belief.mean()).amax())
                .max((m.cov() - belief.cov()).amax());
        }
    }
    worst
}

/// Worst `|Σw − 1|` and worst weight change under a common log-likelihood
/// shift, over random inputs.
pub fn posterior_weight_errors(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_err, mut shift_err) = (0.0_f64, 0.0_f64);
    for c in 0..cases {
        let n = 1 + c % 13;
        let ll: Vec<f64> = (0..n).map(|_| rng.random_range(-800.0..50.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let prior: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let (w, _) = posterior_weights(&ll, &prior).unwrap();
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        let shift = rng.random_range(-1e4..1e4);
        let shifted: Vec<f64> = ll.iter().map(|l| l + shift).collect();
        let (w2, _) = posterior_weights(&shifted, &prior).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            shift_err = shift_err.max((a - b).abs());
        }
    }
    (sum_err, shift_err)
}

/// Whether `psd_repair` is idempotent on random symmetric matrices,
/// including indefinite ones.
pub fn psd_repair_idempotent(cases: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = PsdRepairPolicy::default();
    (0..cases).all(|c| {
        let d = 1 + c % 6;
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = (&a + a.transpose()) * 0.5;
        let once = psd_repair(&m, &policy).unwrap();
        let twice = psd_repair(&once, &policy).unwrap();
        (&once - &twice).amax() <= 1e-12 * once.amax().max(1.0)
    })
}

/// Runs the nested filter on the first `n_obs` Lorenz observations twice,
/// recursively with a vanishing threshold and in replay mode, and reports
/// whether every estimate agrees bit for bit.
pub fn vanishing_lambda_matches_replay(n_obs: usize) -> bool {
    let mut config = RunConfig::default();
    config.t_end = n_obs as f64 * config.model.m_o as f64 * config.model.delta;
    let truth = simulate_run(&config, 0).unwrap();
    let model = Lorenz63::new(config.model.clone()).unwrap();
    let prior_theta = GaussianBelief::isotropic(dvector![12.0, 27.0, 3.0], 1.0).unwrap();
    let prior_x = config.x0_prior().unwrap();
    let make = |recursive: bool| NestedFilterConfig {
        lambda: f64::MIN_POSITIVE,
        recursive,
        micro_steps: config.model.m_o,
        ..Default::default()
    };
    let mut a = NestedFilter::new(&model, &prior_theta, &prior_x, make(true)).unwrap();
    let mut b = NestedFilter::new(&model, &prior_theta, &prior_x, make(false)).unwrap();
    truth.observations.len() == n_obs
        && truth.observations.iter().all(|obs| {
            a.step(obs.clone()).unwrap();
            b.step(obs.clone()).unwrap();
            a.theta_estimate() == b.theta_estimate()
                && a.state_estimate() == b.state_estimate()
                && a.param_cov() == b.param_cov()
        })
}

/// Worst gap between the Lorenz Jacobian and central finite differences,
/// relative to the Jacobian entry magnitude (floored at 1).
pub fn jacobian_fd_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = 2e-4;
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let x = normal_vec(&mut rng, 3) * 15.0;
        let theta = dvector![10.0, 28.0, 8.0 / 3.0] + normal_vec(&mut rng, 3);
        let j = lorenz63_jacobian(&x, &theta, delta).unwrap();
        for k in 0..3 {
            let mut up = x.clone();
            let mut down = x.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (lorenz63_drift(&up, &theta, delta).unwrap()
                - lorenz63_drift(&down, &theta, delta).unwrap())
                / (2.0 * h);
            for i in 0..3 {
                worst = worst.max((fd[i] - j[(i, k)]).abs() / j[(i, k)].abs().max(1.0));
            }
        }
    }
    worst
}

pub fn csv_round_trip_holds(cases: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases).all(|c| {
        let rows: Vec<ResultRow> = (0..c)
            .map(|i| ResultRow {
                t: i as f64 * 1e-3,
                nmse_x: rng.random::<f64>() * 10f64.powi(-rng.random_range(0..12)),
                nmse_theta: rng.sample::<f64, _>(StandardNormal).abs(),
                theta_hat: [rng.random(), rng.sample(StandardNormal), 1.0 / 3.0],
                restart_count: rng.random_range(0..10),
                wall_ns: rng.random(),
            })
            .collect();
        let mut buf = Vec::new();
        write_rows_csv(&rows, &mut buf).unwrap();
        read_rows_csv(buf.as_slice()).unwrap() == rows
    })
}

/// Two runs from the same seed give identical rows apart from wall time.
pub fn seed_determinism_holds() -> bool {
    let config = RunConfig {
        t_end: 0.2,
        seed: 11,
        ..Default::default()
    };
    let strip = |mut rows: Vec<ResultRow>| {
        for r in &mut rows {
            r.wall_ns = 0;
        }
        rows
    };
    let a = strip(run_single(&config, 3).unwrap().rows);
    let b = strip(run_single(&config, 3).unwrap().rows);
    !a.is_empty() && a == b
}
