use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ngf_core::experiments::{
    compare_algorithms, continuity_experiment, emit_results, noise_sweep, run_single, simulate_run,
    sweep_lambda, write_rows_csv, write_svg_plot, write_table_csv, Algorithm, EmitFormat,
    RunConfig, Series, CONTINUITY_GRID, LAMBDA_GRID, NOISE_GRID,
};
use ngf_core::nested::PNorm;
use ngf_core::FilterError;

/// Nested Gaussian filters on the stochastic Lorenz 63 model.
#[derive(Parser, Debug)]
#[command(name = "ngf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one ground-truth trajectory and write the states as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Run index selecting the data sub-stream.
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Also write the observations to this CSV file.
        #[arg(long)]
        obs_out: Option<PathBuf>,
    },
    /// Run one configuration and write per-observation result rows.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Nested UKF-EKF over a grid of thresholds and norms.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Norms to sweep; repeat or comma-separate. Defaults to 2 and inf.
        #[arg(long, value_delimiter = ',', value_parser = ["1", "2", "inf"])]
        norm: Vec<String>,
        #[command(flatten)]
        plot: PlotArg,
    },
    /// Nested UKF-EKF over a grid of observation-noise variances.
    SweepNoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        plot: PlotArg,
    },
    /// Known-parameter EKF under perturbed parameters.
    Continuity {
        #[command(flatten)]
        common: Common,
        /// Comma-separated perturbation variances.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        plot: PlotArg,
    },
    /// Several algorithms on identical data; writes mean NMSE curves.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Algorithms to compare; repeat or comma-separate. Defaults to all
        /// but the cubature variant.
        #[arg(long, value_delimiter = ',')]
        algorithm: Vec<String>,
        /// Observed components (1-based, comma-separated); repeat for
        /// several patterns.
        #[arg(long)]
        observed: Vec<String>,
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<String>,
        #[arg(long, value_parser = ["1", "2", "inf"])]
        norm: Option<String>,
        #[command(flatten)]
        plot: PlotArg,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` file applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    t_end: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    n_runs: Option<String>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    #[arg(long, value_parser = ["1", "2", "inf"])]
    norm: Option<String>,
    #[arg(long)]
    algorithm: Option<String>,
}

#[derive(Args, Debug)]
struct PlotArg {
    /// Also write a log-scale SVG plot here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Format {
    Csv,
    Svg,
}

type Result<T> = std::result::Result<T, String>;

fn fail(e: FilterError) -> String {
    e.to_string()
}

impl Common {
    fn config(&self, extra: &[(&str, &Option<String>)]) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            let text =
                std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            config
                .apply_config_text(&text)
                .map_err(|e| format!("{}: {e}", path.display()))?;
        }
        let flags = [
            ("seed", &self.seed),
            ("t_end", &self.t_end),
            ("n_runs", &self.n_runs),
        ];
        for (key, value) in flags.iter().chain(extra) {
            if let Some(v) = value {
                config
                    .set(key, v)
                    .map_err(|e| format!("--{}: {e}", key.replace('_', "-")))?;
            }
        }
        config.validate().map_err(fail)?;
        Ok(config)
    }

    fn output(&self) -> Result<Box<dyn Write>> {
        match &self.out {
            Some(path) => {
                let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
                Ok(Box::new(BufWriter::new(file)))
            }
            None => Ok(Box::new(io::stdout().lock())),
        }
    }
}

impl FilterArgs {
    fn pairs(&self) -> [(&'static str, &Option<String>); 3] {
        [
            ("lambda", &self.lambda),
            ("norm", &self.norm),
            ("algorithm", &self.algorithm),
        ]
    }
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn write_plot(
    path: &Option<PathBuf>,
    series: &[Series],
    title: &str,
    x: &str,
    log_x: bool,
) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    write_svg_plot(series, title, x, "NMSE", log_x, BufWriter::new(file))
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn table(common: &Common, header: &[&str], records: &[Vec<String>]) -> Result<()> {
    write_table_csv(header, records, common.output()?).map_err(fail)
}

fn parse_observed(pattern: &str) -> Result<Vec<usize>> {
    pattern
        .split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(i) if i >= 1 => Ok(i - 1),
            _ => Err(format!("--observed: invalid component list '{pattern}'")),
        })
        .collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            common,
            run,
            obs_out,
        } => {
            let config = common.config(&[])?;
            let truth = simulate_run(&config, run).map_err(fail)?;
            truth.write_states_csv(common.output()?).map_err(fail)?;
            if let Some(path) = obs_out {
                let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                truth
                    .write_observations_csv(BufWriter::new(file))
                    .map_err(fail)?;
            }
            Ok(())
        }
        Command::Run {
            common,
            filter,
            run,
            format,
        } => {
            let config = common.config(&filter.pairs())?;
            let outcome = run_single(&config, run).map_err(fail)?;
            match (format, &common.out) {
                (Format::Csv, None) => {
                    write_rows_csv(&outcome.rows, io::stdout().lock()).map_err(fail)?
                }
                (Format::Csv, Some(path)) => {
                    emit_results(&outcome.rows, path, EmitFormat::Csv).map_err(fail)?
                }
                (Format::Svg, Some(path)) => {
                    emit_results(&outcome.rows, path, EmitFormat::SvgPlot).map_err(fail)?
                }
                (Format::Svg, None) => return Err("--format svg needs --out".into()),
            }
            let s = &outcome.summary;
            eprintln!(
                "{} run {run}: {} steps, mean NMSE_x {:.4e}, mean NMSE_theta {:.4e}, theta_hat ({:.4}, {:.4}, {:.4}), restarts {}, {:.2} s",
                config.algorithm, s.steps, s.mean_nmse_x, s.mean_nmse_theta, s.final_theta[0], s.final_theta[1], s.final_theta[2], s.total_restarts, s.wall_s
            );
            match outcome.failure {
                Some(e) => Err(format!("run {run} failed after {} steps: {e}", s.steps)),
                None => Ok(()),
            }
        }
        Command::SweepLambda {
            common,
            grid,
            norm,
            plot,
        } => {
            let config = common.config(&[])?;
            let norms: Vec<PNorm> = if norm.is_empty() {
                vec![PNorm::Two, PNorm::Infinity]
            } else {
                norm.iter()
                    .map(|n| n.parse().map_err(fail))
                    .collect::<Result<_>>()?
            };
            let grid = grid.unwrap_or(LAMBDA_GRID.to_vec());
            let rows =
                sweep_lambda(&config, &grid, &norms, config.n_runs, config.seed).map_err(fail)?;
            let records: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        fmt(r.lambda),
                        r.norm.label().into(),
                        fmt(r.mean_nmse_theta),
                        fmt(r.mean_nmse_x),
                        fmt(r.mean_wall_s),
                        fmt(r.mean_restarts),
                        r.runs.to_string(),
                        r.failures.to_string(),
                    ]
                })
                .collect();
            table(
                &common,
                &[
                    "lambda",
                    "norm",
                    "nmse_theta",
                    "nmse_x",
                    "wall_s",
                    "restarts",
                    "runs",
                    "failures",
                ],
                &records,
            )?;
            let series: Vec<Series> = norms
                .iter()
                .map(|n| Series {
                    label: format!("NMSE_theta, p={}", n.label()),
                    points: rows
                        .iter()
                        .filter(|r| r.norm == *n)
                        .map(|r| (r.lambda, r.mean_nmse_theta))
                        .collect(),
                })
                .collect();
            write_plot(
                &plot.plot,
                &series,
                "NMSE_theta versus lambda",
                "lambda",
                true,
            )
        }
        Command::SweepNoise {
            common,
            filter,
            grid,
            plot,
        } => {
            let config = common.config(&filter.pairs())?;
            let grid = grid.unwrap_or(NOISE_GRID.to_vec());
            let rows = noise_sweep(&config, &grid, config.n_runs, config.seed).map_err(fail)?;
            let records: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        fmt(r.sigma_y2),
                        fmt(r.mean_nmse_theta),
                        fmt(r.mean_nmse_x),
                        fmt(r.late_nmse_theta),
                        fmt(r.late_nmse_x),
                        r.runs.to_string(),
                        r.failures.to_string(),
                    ]
                })
                .collect();
            table(
                &common,
                &[
                    "sigma_y2",
                    "nmse_theta",
                    "nmse_x",
                    "late_nmse_theta",
                    "late_nmse_x",
                    "runs",
                    "failures",
                ],
                &records,
            )?;
            let series = [
                Series {
                    label: "NMSE_theta (t > 5)".into(),
                    points: rows
                        .iter()
                        .map(|r| (r.sigma_y2, r.late_nmse_theta))
                        .collect(),
                },
                Series {
                    label: "NMSE_x (t > 5)".into(),
                    points: rows.iter().map(|r| (r.sigma_y2, r.late_nmse_x)).collect(),
                },
            ];
            write_plot(
                &plot.plot,
                &series,
                "NMSE versus observation noise",
                "sigma_y^2",
                true,
            )
        }
        Command::Continuity { common, grid, plot } => {
            let config = common.config(&[])?;
            let grid = grid.unwrap_or(CONTINUITY_GRID.to_vec());
            let rows =
                continuity_experiment(&config, &grid, config.n_runs, config.seed).map_err(fail)?;
            let records: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        fmt(r.sigma_e2),
                        fmt(r.mean_l2),
                        fmt(r.mean_linf),
                        fmt(r.mean_rel_l2),
                        fmt(r.mean_rel_linf),
                        fmt(r.mean_nmse_x),
                        r.runs.to_string(),
                        r.failures.to_string(),
                    ]
                })
                .collect();
            table(
                &common,
                &[
                    "sigma_e2",
                    "mean_l2",
                    "mean_linf",
                    "mean_rel_l2",
                    "mean_rel_linf",
                    "nmse_x",
                    "runs",
                    "failures",
                ],
                &records,
            )?;
            let perturbed: Vec<_> = rows.iter().filter(|r| r.sigma_e2 > 0.0).collect();
            let series = [
                Series {
                    label: "relative 2-norm".into(),
                    points: perturbed
                        .iter()
                        .map(|r| (r.mean_rel_l2, r.mean_nmse_x))
                        .collect(),
                },
                Series {
                    label: "relative max-norm".into(),
                    points: perturbed
                        .iter()
                        .map(|r| (r.mean_rel_linf, r.mean_nmse_x))
                        .collect(),
                },
            ];
            write_plot(
                &plot.plot,
                &series,
                "NMSE_x versus parameter perturbation",
                "distance / |theta|",
                true,
            )
        }
        Command::Compare {
            common,
            algorithm,
            observed,
            lambda,
            norm,
            plot,
        } => {
            let config = common.config(&[("lambda", &lambda), ("norm", &norm)])?;
            let algorithms: Vec<Algorithm> = if algorithm.is_empty() {
                Algorithm::ALL
                    .into_iter()
                    .filter(|a| *a != Algorithm::NestedCkfEkf)
                    .collect()
            } else {
                algorithm
                    .iter()
                    .map(|a| a.parse().map_err(fail))
                    .collect::<Result<_>>()?
            };
            let patterns: Vec<Vec<usize>> = if observed.is_empty() {
                vec![config.model.observed.clone()]
            } else {
                observed
                    .iter()
                    .map(|p| parse_observed(p))
                    .collect::<Result<_>>()?
            };
            let curves =
                compare_algorithms(&config, &algorithms, &patterns, config.n_runs, config.seed)
                    .map_err(fail)?;
            let observed_label = |o: &[usize]| {
                o.iter()
                    .map(|i| (i + 1).to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let mut records = Vec::new();
            for c in &curves {
                for i in 0..c.t.len() {
                    records.push(vec![
                        observed_label(&c.observed),
                        c.algorithm.label().into(),
                        fmt(c.t[i]),
                        fmt(c.mean_nmse_x[i]),
                        fmt(c.mean_nmse_theta[i]),
                    ]);
                }
                eprintln!(
                    "observed {{{}}} {}: mean wall {:.2} s, {} of {} runs failed",
                    observed_label(&c.observed),
                    c.algorithm,
                    c.mean_wall_s(),
                    c.failures(),
                    c.runs.len()
                );
            }
            table(
                &common,
                &["observed", "algorithm", "t", "nmse_x", "nmse_theta"],
                &records,
            )?;
            let series: Vec<Series> = curves
                .iter()
                .map(|c| Series {
                    label: format!("{} {{{}}}", c.algorithm, observed_label(&c.observed)),
                    points: c
                        .t
                        .iter()
                        .copied()
                        .zip(c.mean_nmse_theta.iter().copied())
                        .collect(),
                })
                .collect();
            write_plot(&plot.plot, &series, "NMSE_theta over time", "t", false)
        }
    }
}

fn one_line(message: &str) -> String {
    message.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {}", one_line(&message));
            ExitCode::FAILURE
        }
    }
}
