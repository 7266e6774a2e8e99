//! Subcommand bodies. Each is a pure function of the config.

use std::path::Path;

use log::info;
use serde::Serialize;
use soc_lab::adjoint::{adjoints_table, solve_first_order_adjoint, solve_lean_adjoint};
use soc_lab::control::ControlFamily;
use soc_lab::oracle::solve_riccati;
use soc_lab::parallel::map_indexed;
use soc_lab::rng::derive_seed;
use soc_lab::simulate::trajectories_table;
use soc_lab::table::Table;
use soc_lab::train::{evaluate_checkpoint, Checkpoint, Trainer};
use soc_lab::{simulate_batch, ControlModel, ProblemSpec, TimeGrid};

use crate::checks::{self, Context, Status};
use crate::config::ExperimentConfig;
use crate::CliError;

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn ensure_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| failure(format!("{}: {e}", out.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| failure(format!("{}: {e}", path.display())))
}

fn write_table(path: &Path, table: &Table) -> Result<(), CliError> {
    write_text(path, &table.render())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(failure)?;
    write_text(path, &(text + "\n"))
}

/// Seed of the fresh evaluation sample, disjoint from the training batches.
fn eval_seed(master: u64) -> u64 {
    derive_seed(master, u64::MAX)
}

pub fn check(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    if cfg.checks.is_empty() {
        info!("no checks selected");
        return Ok(());
    }
    let problem = cfg.problem()?;
    let control = cfg.control(&problem)?;
    let ctx = Context {
        problem: &problem,
        control: &control,
        grid: cfg.time_grid()?,
        options: &cfg.check_options,
        seed: cfg.master_seed,
    };
    ensure_dir(out)?;
    let mut failed = Vec::new();
    for &name in &cfg.checks {
        let outcome = checks::run(name, &ctx).map_err(|e| failure(format!("{}: {e}", name.name())))?;
        write_table(&out.join(format!("check_{}.csv", name.name())), &outcome.table)?;
        println!("{} {}: {}", outcome.status.label(), name.name(), outcome.summary);
        if outcome.status == Status::Fail {
            failed.push(name.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(failure(format!("check failed: {}", failed.join(", "))))
    }
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let problem = cfg.problem()?;
    let control = cfg.control(&problem)?;
    let trainer = Trainer::new(&problem, control, cfg.training_config())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let grid = *trainer.grid();
    let history = trainer.run();
    ensure_dir(out)?;
    write_table(&out.join("history.csv"), &history.table())?;
    write_text(
        &out.join("checkpoint.json"),
        &(history.final_control.to_json().map_err(failure)? + "\n"),
    )?;
    if let Some((iter, reason)) = &history.aborted {
        return Err(failure(format!("training aborted at iteration {iter}: {reason}")));
    }
    let metrics = evaluate(&problem, &history.final_control, &grid, cfg)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "objective {:.6} ± {:.2e} over {} fresh paths",
        metrics.checkpoint.objective, metrics.checkpoint.objective_se, metrics.checkpoint.n_paths
    );
    Ok(())
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let problem = cfg.problem()?;
    let control = cfg.control(&problem)?;
    let grid = cfg.time_grid()?;
    let n = cfg.simulate.n_paths;
    let batch = simulate_batch(&problem, &control, &grid, cfg.master_seed, n, cfg.master_seed)
        .map_err(failure)?;
    let adjoints = map_indexed(0..n, |i| {
        let tr = &batch[i as usize];
        if problem.flags().diffusion_time_only {
            solve_lean_adjoint(&problem, tr)
        } else {
            solve_first_order_adjoint(&problem, &control, tr, None)
        }
    })
    .map_err(failure)?;
    ensure_dir(out)?;
    write_table(&out.join("trajectories.csv"), &trajectories_table(&batch))?;
    let pairs: Vec<_> = batch.iter().zip(&adjoints).collect();
    write_table(&out.join("adjoints.csv"), &adjoints_table(&pairs))?;
    println!("simulated {n} paths");
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Metrics {
    pub problem: String,
    pub control_family: String,
    pub n_params: usize,
    pub checkpoint: Checkpoint,
    /// `E[V(X₀, 0)]` for linear-quadratic problems.
    pub analytic_optimum: Option<f64>,
    /// `max_i ‖K_i - K*(t_i)‖_max` for linear feedback on linear-quadratic problems.
    pub max_gain_error: Option<f64>,
}

fn evaluate(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    cfg: &ExperimentConfig,
) -> Result<Metrics, CliError> {
    let checkpoint = evaluate_checkpoint(
        problem,
        control,
        grid,
        eval_seed(cfg.master_seed),
        cfg.train.eval_paths.max(2),
    )
    .map_err(failure)?;
    let riccati = match problem.lq_data() {
        Some(_) => Some(solve_riccati(problem, grid).map_err(failure)?),
        None => None,
    };
    let max_gain_error = match (&riccati, &control.family) {
        (Some(sol), ControlFamily::LinearFeedback { n_steps, .. }) if *n_steps == grid.n_steps() => {
            let opt = sol.optimal_control().map_err(failure)?;
            let dims = problem.dims();
            let block = dims.control * (dims.state + 1);
            let gains = dims.control * dims.state;
            let err = (0..*n_steps)
                .flat_map(|i| (0..gains).map(move |j| i * block + j))
                .map(|idx| (control.theta()[idx] - opt.theta()[idx]).abs())
                .fold(0.0, f64::max);
            Some(err)
        }
        _ => None,
    };
    Ok(Metrics {
        problem: problem.name().to_string(),
        control_family: control.family.tag().to_string(),
        n_params: control.n_params(),
        checkpoint,
        analytic_optimum: riccati.as_ref().map(|s| s.optimal_cost()),
        max_gain_error,
    })
}

pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let problem = cfg.problem()?;
    let control = cfg.control(&problem)?;
    let grid = cfg.time_grid()?;
    let metrics = evaluate(&problem, &control, &grid, cfg)?;
    ensure_dir(out)?;
    write_json(&out.join("report.json"), &metrics)?;
    if problem.lq_data().is_some() {
        let sol = solve_riccati(&problem, &grid).map_err(failure)?;
        write_table(&out.join("riccati.csv"), &sol.table())?;
    }
    println!(
        "objective {:.6} ± {:.2e}",
        metrics.checkpoint.objective, metrics.checkpoint.objective_se
    );
    Ok(())
}
