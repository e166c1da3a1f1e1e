//! Jointly estimates the Lorenz 63 state and parameters from simulated
//! partial observations with the nested UKF-EKF filter.
//!
//! `cargo run --release -p ngf-core --example estimate_lorenz [t_end]`

use ngf_core::experiments::{draw_prior_mean, nmse, simulate_run, RunConfig};
use ngf_core::gaussian::GaussianBelief;
use ngf_core::models::Lorenz63;
use ngf_core::nested::{NestedFilter, NestedFilterConfig};

fn main() -> ngf_core::Result<()> {
    let t_end = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4.0);
    let config = RunConfig {
        t_end,
        seed: 7,
        ..Default::default()
    };
    let model = Lorenz63::new(config.model.clone())?;
    let truth = simulate_run(&config, 0)?;

    let prior_theta = GaussianBelief::isotropic(draw_prior_mean(&config, 0), 1.0)?;
    let filter_config = NestedFilterConfig {
        micro_steps: config.model.m_o,
        ..Default::default()
    };
    let mut filter = NestedFilter::new(&model, &prior_theta, &config.x0_prior()?, filter_config)?;
    println!("prior mean {:.3?}", prior_theta.mean().as_slice());

    let report_every = truth.observations.len() / 8;
    let mut restarts = 0;
    for (k, obs) in truth.observations.iter().enumerate() {
        restarts += filter.step(obs.clone())?.restart_count;
        if (k + 1) % report_every.max(1) == 0 {
            let theta = filter.theta_estimate();
            println!(
                "t = {:5.2}  theta = ({:7.4}, {:7.4}, {:6.4})  NMSE_theta {:.2e}  NMSE_x {:.2e}  restarts so far {restarts}",
                obs.t as f64 * config.model.delta,
                theta[0],
                theta[1],
                theta[2],
                nmse(&config.theta_true, theta)?,
                nmse(&truth.states[obs.t], filter.state_estimate())?,
            );
        }
    }
    Ok(())
}
