//! Pointwise Hamiltonians and the adjoint-matching losses.
//!
//! Losses take simulated trajectories and solved adjoints as fixed inputs, so
//! `θ` enters only through the re-evaluated control `u_θ(X_i, t_i)`. The
//! trajectory and adjoints are constants for differentiation (stopgrad).
//! Interval `i` pairs `(X_i, t_i)` with the adjoint at node `i + 1`, which is
//! the pairing under which the lean gradient equals the discrete pathwise
//! gradient of the cost.

use nalgebra::{DMatrix, DVector};

use crate::adjoint::{AdjointPath, MatrixAdjointPath};
use crate::control::ControlModel;
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::parallel::{chunks, map_indexed, mean_and_se};
use crate::problem::ProblemSpec;
use crate::simulate::{simulate_path, TimeGrid, Trajectory};
use crate::table::Table;

fn check_vec(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}

fn check_point(problem: &ProblemSpec, x: &[f64], u: &[f64], p: &[f64]) -> Result<()> {
    let dims = problem.dims();
    check_vec("hamiltonian state", dims.state, x.len())?;
    check_vec("hamiltonian control", dims.control, u.len())?;
    check_vec("hamiltonian costate", dims.state, p.len())
}

fn check_symmetric(entry: &str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.shape() != (d, d) {
        return Err(Error::Dimension {
            context: "hamiltonian matrix argument",
            expected: d,
            got: m.nrows(),
        });
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::validation(entry, "matrix argument is not symmetric"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `H̃ = f + ⟨b, p⟩`.
pub fn hamiltonian_simplified(
    problem: &ProblemSpec,
    x: &[f64],
    t: f64,
    u: &[f64],
    p: &[f64],
) -> Result<f64> {
    check_point(problem, x, u, p)?;
    Ok(problem.running_cost(x, u, t) + dot(problem.drift(x, u, t).as_slice(), p))
}

/// `H = f + ⟨b, p⟩ + ½ Tr(σσᵀ M)`.
pub fn hamiltonian_full(
    problem: &ProblemSpec,
    x: &[f64],
    t: f64,
    u: &[f64],
    p: &[f64],
    m: &DMatrix<f64>,
) -> Result<f64> {
    check_symmetric("M", m, problem.dims().state)?;
    let base = hamiltonian_simplified(problem, x, t, u, p)?;
    let sigma = problem.diffusion(x, u, t);
    Ok(base + 0.5 * (&sigma * sigma.transpose()).component_mul(m).sum())
}

/// `𝓗 = f + ⟨p, b⟩ + tr(σᵀ q)` with `q ∈ ℝ^{d×m}`.
pub fn hamiltonian_smp(
    problem: &ProblemSpec,
    x: &[f64],
    t: f64,
    u: &[f64],
    p: &[f64],
    q: &DMatrix<f64>,
) -> Result<f64> {
    let dims = problem.dims();
    if q.shape() != (dims.state, dims.noise) {
        return Err(Error::Dimension {
            context: "martingale integrand q",
            expected: dims.state * dims.noise,
            got: q.len(),
        });
    }
    let base = hamiltonian_simplified(problem, x, t, u, p)?;
    Ok(base + problem.diffusion(x, u, t).component_mul(q).sum())
}

/// `𝓗 + ½ Tr(ΔσᵀP Δσ)` with `Δσ = σ(x,u,t) - σ(x,u*,t)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_smp_generalized(
    problem: &ProblemSpec,
    x: &[f64],
    t: f64,
    u: &[f64],
    u_star: &[f64],
    p: &[f64],
    q: &DMatrix<f64>,
    big_p: &DMatrix<f64>,
) -> Result<f64> {
    check_symmetric("P", big_p, problem.dims().state)?;
    check_vec("reference control", problem.dims().control, u_star.len())?;
    let h = hamiltonian_smp(problem, x, t, u, p, q)?;
    let delta = problem.diffusion(x, u, t) - problem.diffusion(x, u_star, t);
    Ok(h + 0.5 * delta.tr_mul(&(big_p * &delta)).trace())
}

/// Discrete cost `dt Σ_i f(X_i, u_i, t_i) + g(X_N)` of a stored path.
pub fn pathwise_cost(problem: &ProblemSpec, traj: &Trajectory) -> f64 {
    let dt = traj.grid.dt();
    let running: f64 = (0..traj.n_steps())
        .map(|i| problem.running_cost(traj.state(i), traj.control(i), traj.grid.node(i)))
        .sum();
    running * dt + problem.terminal_cost(traj.terminal())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `E[∫f dt + g]` over paths `0..n_paths`.
pub fn soc_objective(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    master_seed: u64,
    n_paths: u64,
) -> Result<Objective> {
    if n_paths < 2 {
        return Err(Error::invalid("n_paths", "need at least 2 paths for an error estimate"));
    }
    let mut costs = Vec::with_capacity(n_paths as usize);
    for range in chunks(n_paths) {
        costs.extend(map_indexed(range, |idx| {
            let tr = simulate_path(problem, control, grid, master_seed, master_seed, idx)?;
            Ok(pathwise_cost(problem, &tr))
        })?);
    }
    let (mean, std_error) = mean_and_se(&costs);
    Ok(Objective { mean, std_error })
}

/// Adjoint data a loss is evaluated against, one entry per trajectory.
#[derive(Debug, Clone, Copy)]
pub enum AdjointInputs<'a> {
    Lean(&'a [AdjointPath]),
    Bam {
        first: &'a [AdjointPath],
        second: &'a [MatrixAdjointPath],
    },
    Quadratic(&'a [AdjointPath]),
}

/// Single-path contribution to a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PathLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub per_time: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss_value: f64,
    pub grad_theta: Vec<f64>,
    pub per_time_terms: Vec<f64>,
    pub n_paths_averaged: usize,
}

impl LossReport {
    /// Averages per-path terms in path order.
    pub fn from_paths(paths: &[PathLoss]) -> Self {
        let n = paths.len();
        let scale = 1.0 / n as f64;
        let n_params = paths.first().map_or(0, |p| p.grad.len());
        let n_steps = paths.first().map_or(0, |p| p.per_time.len());
        let mut grad = vec![0.0; n_params];
        let mut per_time = vec![0.0; n_steps];
        let mut loss = 0.0;
        for p in paths {
            loss += p.loss;
            for (g, v) in grad.iter_mut().zip(&p.grad) {
                *g += v;
            }
            for (g, v) in per_time.iter_mut().zip(&p.per_time) {
                *g += v;
            }
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        per_time.iter_mut().for_each(|g| *g *= scale);
        Self {
            loss_value: loss * scale,
            grad_theta: grad,
            per_time_terms: per_time,
            n_paths_averaged: n,
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_theta.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy)]
enum PathInput<'a> {
    Lean(&'a AdjointPath),
    Bam(&'a AdjointPath, &'a MatrixAdjointPath),
    Quadratic(&'a AdjointPath),
}

fn path_loss(
    problem: &ProblemSpec,
    control: &ControlModel,
    traj: &Trajectory,
    input: PathInput,
) -> Result<PathLoss> {
    let n = traj.n_steps();
    let dt = traj.grid.dt();
    let first = match input {
        PathInput::Lean(a) | PathInput::Quadratic(a) | PathInput::Bam(a, _) => a,
    };
    if first.n_nodes() != n + 1 || first.path_index != traj.path_index() {
        return Err(Error::invalid(
            "adjoints",
            format!("adjoint does not belong to path {}", traj.path_index()),
        ));
    }
    if let PathInput::Bam(_, second) = input {
        if second.values.len() != n + 1 || second.path_index != traj.path_index() {
            return Err(Error::invalid(
                "adjoints",
                format!("matrix adjoint does not belong to path {}", traj.path_index()),
            ));
        }
    }
    let mut grad = vec![0.0; control.n_params()];
    let mut per_time = Vec::with_capacity(n);
    for i in 0..n {
        let (x, t) = (traj.state(i), traj.grid.node(i));
        let u = control.eval(x, t)?;
        let us = u.as_slice();
        let p = first.vector(i + 1);
        let db = problem.derivatives(x, us, t);
        let (h, grad_u) = match input {
            PathInput::Quadratic(_) => {
                let residual = &u + db.drift_u.tr_mul(&p);
                (0.5 * residual.norm_squared(), residual)
            }
            PathInput::Lean(_) | PathInput::Bam(..) => {
                let mut h = problem.running_cost(x, us, t) + problem.drift(x, us, t).dot(&p);
                let mut gu = &db.cost_u + db.drift_u.tr_mul(&p);
                if let PathInput::Bam(_, second) = input {
                    let m = &second.values[i + 1];
                    let sigma = problem.diffusion(x, us, t);
                    h += 0.5 * (&sigma * sigma.transpose()).component_mul(m).sum();
                    for (k, su) in db.diffusion_u.iter().enumerate() {
                        let m_sigma: DVector<f64> = m * sigma.column(k);
                        gu += su.tr_mul(&m_sigma);
                    }
                }
                (h, gu)
            }
        };
        per_time.push(h);
        control
            .param_jacobian(x, t)?
            .accumulate_transpose(&grad_u, dt, &mut grad);
    }
    let loss = per_time.iter().sum::<f64>() * dt;
    Ok(PathLoss {
        loss,
        grad,
        per_time,
    })
}

/// Per-path loss terms, in batch order.
pub fn path_losses(
    problem: &ProblemSpec,
    control: &ControlModel,
    batch: &[Trajectory],
    inputs: AdjointInputs,
) -> Result<Vec<PathLoss>> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "no trajectories"));
    }
    let lens_ok = match inputs {
        AdjointInputs::Lean(a) | AdjointInputs::Quadratic(a) => a.len() == batch.len(),
        AdjointInputs::Bam { first, second } => {
            first.len() == batch.len() && second.len() == batch.len()
        }
    };
    if !lens_ok {
        return Err(Error::invalid("adjoints", "one adjoint per trajectory is required"));
    }
    if let AdjointInputs::Quadratic(_) = inputs {
        let flags = problem.flags();
        if !(flags.control_affine_quadratic && flags.diffusion_time_only) {
            return Err(Error::Unsupported {
                operation: "quadratic_am_loss",
                reason: "requires a control-affine quadratic problem with σ = σ(t)".into(),
            });
        }
    }
    map_indexed(0..batch.len() as u64, |idx| {
        let i = idx as usize;
        let input = match inputs {
            AdjointInputs::Lean(a) => PathInput::Lean(&a[i]),
            AdjointInputs::Quadratic(a) => PathInput::Quadratic(&a[i]),
            AdjointInputs::Bam { first, second } => PathInput::Bam(&first[i], &second[i]),
        };
        path_loss(problem, control, &batch[i], input)
    })
}

pub fn loss(
    problem: &ProblemSpec,
    control: &ControlModel,
    batch: &[Trajectory],
    inputs: AdjointInputs,
) -> Result<LossReport> {
    let paths = path_losses(problem, control, batch, inputs)?;
    let report = LossReport::from_paths(&paths);
    if !report.loss_value.is_finite() || report.grad_theta.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("loss", "non-finite loss or gradient"));
    }
    Ok(report)
}

/// `∫ H(X, t, u_θ, a, A) dt` averaged over the batch.
pub fn bam_loss(
    problem: &ProblemSpec,
    control: &ControlModel,
    batch: &[Trajectory],
    a_paths: &[AdjointPath],
    big_a_paths: &[MatrixAdjointPath],
) -> Result<LossReport> {
    loss(
        problem,
        control,
        batch,
        AdjointInputs::Bam {
            first: a_paths,
            second: big_a_paths,
        },
    )
}

/// `∫ H̃(X, t, u_θ, ã) dt` averaged over the batch.
pub fn lean_am_loss(
    problem: &ProblemSpec,
    control: &ControlModel,
    batch: &[Trajectory],
    lean: &[AdjointPath],
) -> Result<LossReport> {
    loss(problem, control, batch, AdjointInputs::Lean(lean))
}

/// `∫ ½‖u_θ + ∇₂bᵀã‖² dt`; the target is `-σᵀã` when the control enters as `σu`.
pub fn quadratic_am_loss(
    problem: &ProblemSpec,
    control: &ControlModel,
    batch: &[Trajectory],
    lean: &[AdjointPath],
) -> Result<LossReport> {
    loss(problem, control, batch, AdjointInputs::Quadratic(lean))
}

/// Columns `iter,loss,grad_norm,n_paths`.
pub fn loss_table(reports: &[LossReport]) -> Table {
    let mut t = Table::new(["iter", "loss", "grad_norm", "n_paths"]);
    for (i, r) in reports.iter().enumerate() {
        t.rows.push(vec![
            i.to_string(),
            fmt_f64(r.loss_value),
            fmt_f64(r.grad_norm()),
            r.n_paths_averaged.to_string(),
        ]);
    }
    t
}
