//! Independent ground truth: finite differences, Riccati, closed forms and
//! Monte Carlo diagnostics.
//!
//! Finite-difference oracles only re-run the forward simulator and sum costs
//! themselves; they never call into the adjoint or loss code they check.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::adjoint::solve_lean_adjoint;
use crate::control::ControlModel;
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::parallel::{chunks, map_indexed, mean_and_se};
use crate::problem::{LqData, ProblemSpec};
use crate::rng::{keyed_rng, standard_normal, Domain};
use crate::simulate::{simulate_forward, simulate_path, BrownianPath, TimeGrid, Trajectory};
use crate::table::Table;

/// Closure `(x, t) ↦ h(x, t) ∈ ℝᵐ` for the stochastic-integral term.
pub type HValue<'a> = &'a (dyn Fn(&[f64], f64) -> DVector<f64> + Sync);

fn cost_of(problem: &ProblemSpec, tr: &Trajectory, h: Option<HValue>) -> f64 {
    let dt = tr.grid.dt();
    let mut acc = 0.0;
    for i in 0..tr.n_steps() {
        let (x, t) = (tr.state(i), tr.grid.node(i));
        acc += problem.running_cost(x, tr.control(i), t) * dt;
        if let Some(h) = h {
            acc += h(x, t).iter().zip(tr.increment(i)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    acc + problem.terminal_cost(tr.terminal())
}

/// Discrete cost functional from `x0` at fixed noise, optionally with `Σ h·ΔB`.
pub fn pathwise_functional(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    noise: &BrownianPath,
    x0: &[f64],
    h: Option<HValue>,
) -> Result<f64> {
    let tr = simulate_forward(problem, control, grid, noise.clone(), x0)?;
    let v = cost_of(problem, &tr, h);
    if !v.is_finite() {
        return Err(Error::invalid("x0", "perturbed run produced a non-finite cost"));
    }
    Ok(v)
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("step", "must be positive"))
    }
}

/// Central differences of the pathwise cost over `x0`.
pub fn fd_pathwise_gradient(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    noise: &BrownianPath,
    x0: &[f64],
    step: f64,
) -> Result<DVector<f64>> {
    fd_pathwise_gradient_with_h(problem, control, grid, noise, x0, step, None)
}

pub fn fd_pathwise_gradient_with_h(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    noise: &BrownianPath,
    x0: &[f64],
    step: f64,
    h: Option<HValue>,
) -> Result<DVector<f64>> {
    check_step(step)?;
    let mut out = DVector::zeros(x0.len());
    for j in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[j] += step;
        let mut minus = x0.to_vec();
        minus[j] -= step;
        let fp = pathwise_functional(problem, control, grid, noise, &plus, h)?;
        let fm = pathwise_functional(problem, control, grid, noise, &minus, h)?;
        out[j] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

/// Central differences of [`fd_pathwise_gradient`], symmetrized.
///
/// The inner step is `step`; the outer step is `max(0.1√step, step)`.
pub fn fd_pathwise_hessian(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    noise: &BrownianPath,
    x0: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    check_step(step)?;
    let d = x0.len();
    let outer = (0.1 * step.sqrt()).max(step);
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut plus = x0.to_vec();
        plus[j] += outer;
        let mut minus = x0.to_vec();
        minus[j] -= outer;
        let gp = fd_pathwise_gradient(problem, control, grid, noise, &plus, step)?;
        let gm = fd_pathwise_gradient(problem, control, grid, noise, &minus, step)?;
        h.set_column(j, &((gp - gm) / (2.0 * outer)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Central differences of the pathwise cost over `θ` at fixed noise and `x0`.
pub fn fd_theta_gradient(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    noise: &BrownianPath,
    x0: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    check_step(step)?;
    (0..control.n_params())
        .map(|j| {
            let mut plus = control.clone();
            plus.theta[j] += step;
            let mut minus = control.clone();
            minus.theta[j] -= step;
            let fp = pathwise_functional(problem, &plus, grid, noise, x0, None)?;
            let fm = pathwise_functional(problem, &minus, grid, noise, x0, None)?;
            Ok((fp - fm) / (2.0 * step))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Riccati

const RICCATI_REFINE: usize = 10;
const ESCAPE_NORM: f64 = 1e12;

/// `V(x, t) = ½xᵀP(t)x + c(t)` for `f = ½xᵀQx + ½‖u‖²`, `b = Ax + Bu`, `σ` constant.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// `P(t_i)` at the coarse nodes.
    pub p: Vec<DMatrix<f64>>,
    pub c: Vec<f64>,
    /// `K_i = -BᵀP(t_i)`.
    pub gains: Vec<DMatrix<f64>>,
    data: LqData,
    horizon: f64,
    fine_p: Vec<DMatrix<f64>>,
    fine_c: Vec<f64>,
}

/// `dP/ds = AᵀP + PA - PBBᵀP + Q` in reversed time `s = T - t`.
fn riccati_rhs(data: &LqData, p: &DMatrix<f64>) -> DMatrix<f64> {
    let pb = p * &data.b;
    data.a.tr_mul(p) + p * &data.a - &pb * pb.transpose() + &data.q_run
}

fn offset_rhs(data: &LqData, p: &DMatrix<f64>) -> f64 {
    0.5 * (&data.sigma * data.sigma.transpose()).component_mul(p).sum()
}

pub fn solve_riccati(problem: &ProblemSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let data = problem.lq_data().ok_or_else(|| Error::Unsupported {
        operation: "solve_riccati",
        reason: "problem carries no linear-quadratic data".into(),
    })?;
    if (grid.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(Error::invalid("grid", "horizon differs from the problem horizon"));
    }
    solve_riccati_data(data, grid)
}

/// [`solve_riccati`] on raw data, without the definiteness checks of a problem.
pub fn solve_riccati_data(data: &LqData, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let n_fine = grid.n_steps() * RICCATI_REFINE;
    let h = grid.horizon() / n_fine as f64;
    // Index j of the fine arrays is time t = j·h.
    let mut fine_p = vec![DMatrix::zeros(0, 0); n_fine + 1];
    let mut fine_c = vec![0.0; n_fine + 1];
    fine_p[n_fine] = data.q_term.clone();
    for j in (0..n_fine).rev() {
        let p0 = &fine_p[j + 1];
        let k1 = riccati_rhs(data, p0);
        let p1 = p0 + &k1 * (0.5 * h);
        let k2 = riccati_rhs(data, &p1);
        let p2 = p0 + &k2 * (0.5 * h);
        let k3 = riccati_rhs(data, &p2);
        let p3 = p0 + &k3 * h;
        let k4 = riccati_rhs(data, &p3);
        let dc = (offset_rhs(data, p0)
            + 2.0 * offset_rhs(data, &p1)
            + 2.0 * offset_rhs(data, &p2)
            + offset_rhs(data, &p3))
            * (h / 6.0);
        let next = p0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) || next.amax() > ESCAPE_NORM {
            return Err(Error::FiniteEscape {
                escape_time: j as f64 * h,
            });
        }
        fine_c[j] = fine_c[j + 1] + dc;
        fine_p[j] = next;
    }
    let p: Vec<_> = (0..=grid.n_steps())
        .map(|i| fine_p[i * RICCATI_REFINE].clone())
        .collect();
    let c = (0..=grid.n_steps())
        .map(|i| fine_c[i * RICCATI_REFINE])
        .collect();
    let gains = p.iter().map(|pi| -(data.b.tr_mul(pi))).collect();
    Ok(RiccatiSolution {
        grid: *grid,
        p,
        c,
        gains,
        data: data.clone(),
        horizon: grid.horizon(),
        fine_p,
        fine_c,
    })
}

impl RiccatiSolution {
    fn bracket(&self, t: f64) -> Result<(usize, f64, f64)> {
        if !(-1e-12..=self.horizon * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let n = self.fine_p.len() - 1;
        let h = self.horizon / n as f64;
        let j = ((t / h).floor().max(0.0) as usize).min(n - 1);
        Ok((j, h, ((t - j as f64 * h) / h).clamp(0.0, 1.0)))
    }

    /// `P(t)` by cubic Hermite interpolation with exact end slopes.
    pub fn p_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (j, h, s) = self.bracket(t)?;
        let (p0, p1) = (&self.fine_p[j], &self.fine_p[j + 1]);
        // dP/dt = -rhs.
        let m0 = -riccati_rhs(&self.data, p0) * h;
        let m1 = -riccati_rhs(&self.data, p1) * h;
        let (s2, s3) = (s * s, s * s * s);
        Ok(p0 * (2.0 * s3 - 3.0 * s2 + 1.0)
            + m0 * (s3 - 2.0 * s2 + s)
            + p1 * (-2.0 * s3 + 3.0 * s2)
            + m1 * (s3 - s2))
    }

    pub fn c_at(&self, t: f64) -> Result<f64> {
        let (j, h, s) = self.bracket(t)?;
        let (c0, c1) = (self.fine_c[j], self.fine_c[j + 1]);
        let m0 = -offset_rhs(&self.data, &self.fine_p[j]) * h;
        let m1 = -offset_rhs(&self.data, &self.fine_p[j + 1]) * h;
        let (s2, s3) = (s * s, s * s * s);
        Ok(c0 * (2.0 * s3 - 3.0 * s2 + 1.0)
            + m0 * (s3 - 2.0 * s2 + s)
            + c1 * (-2.0 * s3 + 3.0 * s2)
            + m1 * (s3 - s2))
    }

    pub fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        let xv = DVector::from_column_slice(x);
        Ok(0.5 * xv.dot(&(self.p_at(t)? * &xv)) + self.c_at(t)?)
    }

    /// `∂_t V = -½xᵀ(AᵀP + PA - PBBᵀP + Q)x - ½Tr(σσᵀP)`.
    pub fn value_time_derivative(&self, x: &[f64], t: f64) -> Result<f64> {
        let p = self.p_at(t)?;
        let xv = DVector::from_column_slice(x);
        Ok(-0.5 * xv.dot(&(riccati_rhs(&self.data, &p) * &xv)) - offset_rhs(&self.data, &p))
    }

    /// Analytic optimum `E[V(X₀, 0)]` for `X₀ ~ N(m, Σ)`.
    pub fn optimal_cost(&self) -> f64 {
        let m = &self.data.x0_mean;
        let second = &self.data.x0_cov + m * m.transpose();
        0.5 * self.p[0].component_mul(&second).sum() + self.c[0]
    }

    /// `q*(t_i) = P(t_i) σ`.
    pub fn martingale_integrand(&self, i: usize) -> DMatrix<f64> {
        &self.p[i] * &self.data.sigma
    }

    /// The optimal feedback as a `linear_feedback` control on `grid`.
    pub fn optimal_control(&self) -> Result<ControlModel> {
        let d = self.data.a.nrows();
        let k = self.data.b.ncols();
        let n = self.grid.n_steps();
        let mut theta = Vec::with_capacity(n * k * (d + 1));
        for gain in &self.gains[..n] {
            for j in 0..k {
                theta.extend(gain.row(j).iter().copied());
            }
            theta.extend(std::iter::repeat_n(0.0, k));
        }
        ControlModel::with_theta(
            crate::control::ControlFamily::LinearFeedback {
                state_dim: d,
                control_dim: k,
                n_steps: n,
                horizon: self.horizon,
            },
            theta,
        )
    }

    /// Largest per-interval Simpson residual of the Riccati ODE on the coarse grid.
    pub fn coarse_residual(&self) -> f64 {
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        (0..n)
            .map(|i| {
                let (pa, pb) = (&self.p[i], &self.p[i + 1]);
                let pm = &self.fine_p[i * RICCATI_REFINE + RICCATI_REFINE / 2];
                let simpson = (riccati_rhs(&self.data, pa)
                    + riccati_rhs(&self.data, pm) * 4.0
                    + riccati_rhs(&self.data, pb))
                    / 6.0;
                ((pa - pb) / dt - simpson).amax()
            })
            .fold(0.0, f64::max)
    }

    /// Largest per-step RK4 defect on the internal grid, re-checked by halving the step.
    pub fn fine_residual(&self) -> f64 {
        let n = self.fine_p.len() - 1;
        let h = self.horizon / n as f64;
        let rk = |p0: &DMatrix<f64>, h: f64| {
            let k1 = riccati_rhs(&self.data, p0);
            let k2 = riccati_rhs(&self.data, &(p0 + &k1 * (0.5 * h)));
            let k3 = riccati_rhs(&self.data, &(p0 + &k2 * (0.5 * h)));
            let k4 = riccati_rhs(&self.data, &(p0 + &k3 * h));
            p0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        };
        (0..n)
            .map(|j| {
                let half = rk(&rk(&self.fine_p[j + 1], 0.5 * h), 0.5 * h);
                (half - &self.fine_p[j]).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn table(&self) -> Table {
        let d = self.data.a.nrows();
        let header = ["i", "t"]
            .into_iter()
            .map(String::from)
            .chain((0..d * d).map(|e| format!("p_{}_{}", e / d, e % d)))
            .chain(std::iter::once("c".to_string()));
        let mut t = Table::new(header);
        for i in 0..=self.grid.n_steps() {
            let mut row = vec![i.to_string(), fmt_f64(self.grid.node(i))];
            for e in 0..d * d {
                row.push(fmt_f64(self.p[i][(e / d, e % d)]));
            }
            row.push(fmt_f64(self.c[i]));
            t.rows.push(row);
        }
        t
    }
}

// ---------------------------------------------------------------------------
// Tilted Gaussian

/// Mean and variance of `N(0, 1) · exp(-½λx²)` renormalized.
pub fn tilted_gaussian_target(lambda: f64) -> Result<(f64, f64)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", "must be non-negative"));
    }
    Ok((0.0, 1.0 / (1.0 + lambda)))
}

// ---------------------------------------------------------------------------
// HJB residual

/// Residual `∂_tJ + min_u H(x, t; u, ∂_xJ, ∂_x²J)` on a 1-d grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbNode {
    pub t: f64,
    pub x: f64,
    pub value: f64,
    pub residual: f64,
    /// Standard error of `residual` across replicate groups (0 for analytic values).
    pub noise_floor: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbReport {
    pub nodes: Vec<HjbNode>,
}

impl HjbReport {
    pub fn max_abs_residual(&self) -> f64 {
        self.nodes.iter().map(|n| n.residual.abs()).fold(0.0, f64::max)
    }

    /// Largest `|residual| / noise_floor` over nodes with a positive floor.
    pub fn max_noise_ratio(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.noise_floor > 0.0)
            .map(|n| n.residual.abs() / n.noise_floor)
            .fold(0.0, f64::max)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["t", "x", "value", "residual", "noise_floor", "reliable"]);
        for n in &self.nodes {
            t.rows.push(vec![
                fmt_f64(n.t),
                fmt_f64(n.x),
                fmt_f64(n.value),
                fmt_f64(n.residual),
                fmt_f64(n.noise_floor),
                n.reliable.to_string(),
            ]);
        }
        t
    }
}

/// `min_u f + b·p + ½σ²m` for `d = k = m = 1`, closed form in the quadratic case.
fn min_hamiltonian_1d(problem: &ProblemSpec, x: f64, t: f64, p: f64, m: f64) -> f64 {
    let h = |u: f64| {
        let sig = problem.diffusion(&[x], &[u], t)[(0, 0)];
        problem.running_cost(&[x], &[u], t) + problem.drift(&[x], &[u], t)[0] * p + 0.5 * sig * sig * m
    };
    if problem.flags().control_affine_quadratic {
        let bu = problem.derivatives(&[x], &[0.0], t).drift_u[(0, 0)];
        return h(-bu * p);
    }
    // Golden-section refinement after a coarse scan of [-10, 10].
    let coarse = (0..=400).map(|j| -10.0 + 0.05 * j as f64);
    let best = coarse.min_by(|a, b| h(*a).total_cmp(&h(*b))).unwrap_or(0.0);
    let (mut lo, mut hi) = (best - 0.05, best + 0.05);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if h(a) < h(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    h(0.5 * (lo + hi))
}

/// HJB residual of an analytic value function on the grid, using its own derivatives.
pub fn hjb_residual_analytic(
    problem: &ProblemSpec,
    riccati: &RiccatiSolution,
    x_grid: &[f64],
    t_grid: &[f64],
) -> Result<HjbReport> {
    if problem.dims().state != 1 {
        return Err(Error::Unsupported {
            operation: "hjb_residual",
            reason: "only d = 1 is supported".into(),
        });
    }
    let mut nodes = Vec::new();
    for &t in t_grid {
        let p = riccati.p_at(t)?[(0, 0)];
        for &x in x_grid {
            let residual = riccati.value_time_derivative(&[x], t)?
                + min_hamiltonian_1d(problem, x, t, p * x, p);
            nodes.push(HjbNode {
                t,
                x,
                value: riccati.value(&[x], t)?,
                residual,
                noise_floor: 0.0,
                reliable: true,
            });
        }
    }
    Ok(HjbReport { nodes })
}

/// Replicate groups used for the Monte Carlo noise floor.
pub const HJB_GROUPS: u64 = 8;

/// Monte Carlo HJB residual of the cost-to-go of `control` on a uniform 1-d grid.
///
/// `J(x, t_j)` is estimated by simulating from every node with common random
/// numbers, derivatives are central differences over the grid itself, and the
/// noise floor is the standard error of the residual across
/// [`HJB_GROUPS`] independent replicate groups of `n_paths / HJB_GROUPS` paths.
/// `t_grid` must consist of nodes of `sim_grid`; residuals are reported at
/// interior `(x, t)` nodes only.
pub fn hjb_residual_1d(
    problem: &ProblemSpec,
    control: &ControlModel,
    sim_grid: &TimeGrid,
    x_grid: &[f64],
    t_grid: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<HjbReport> {
    if problem.dims().state != 1 || problem.dims().noise != 1 {
        return Err(Error::Unsupported {
            operation: "hjb_residual",
            reason: "only d = m = 1 is supported".into(),
        });
    }
    if x_grid.len() < 3 || t_grid.len() < 3 {
        return Err(Error::invalid("grid", "need at least 3 nodes per axis"));
    }
    let per_group = n_paths / HJB_GROUPS;
    if per_group < 2 {
        return Err(Error::invalid("n_paths", "too few paths for replicate groups"));
    }
    if per_group < 1000 {
        warn!("hjb_residual_1d: {per_group} paths per group; second differences will be noisy");
    }
    let dt = sim_grid.dt();
    let start_steps: Vec<usize> = t_grid
        .iter()
        .map(|t| {
            let s = (t / dt).round();
            if (s * dt - t).abs() > 1e-9 * sim_grid.horizon().max(1.0) || s as usize > sim_grid.n_steps() {
                Err(Error::invalid("t_grid", "times must be nodes of the simulation grid"))
            } else {
                Ok(s as usize)
            }
        })
        .collect::<Result<_>>()?;
    let hx = x_grid[1] - x_grid[0];
    let ht = t_grid[1] - t_grid[0];
    let n_steps = sim_grid.n_steps();
    let nx = x_grid.len();

    // values[g][tj][xl]
    let mut values = vec![vec![vec![0.0; nx]; t_grid.len()]; HJB_GROUPS as usize];
    for (tj, &s0) in start_steps.iter().enumerate() {
        for g in 0..HJB_GROUPS {
            let range = g * per_group..(g + 1) * per_group;
            let mut sums = vec![0.0; nx];
            for chunk in chunks(range.end - range.start) {
                let chunk = chunk.start + range.start..chunk.end + range.start;
                let partial = map_indexed(chunk, |idx| {
                    // Increments are keyed by absolute step, so every start time
                    // and start point sees the same noise.
                    let mut rng = keyed_rng(seed, Domain::Brownian, idx);
                    let incs: Vec<f64> = (0..n_steps).map(|_| dt.sqrt() * standard_normal(&mut rng)).collect();
                    let mut costs = vec![0.0; nx];
                    for (l, &x0) in x_grid.iter().enumerate() {
                        let mut x = x0;
                        let mut acc = 0.0;
                        for (s, db) in incs.iter().enumerate().skip(s0) {
                            let t = sim_grid.node(s);
                            let u = control.eval(&[x], t)?;
                            acc += problem.running_cost(&[x], u.as_slice(), t) * dt;
                            let b = problem.drift(&[x], u.as_slice(), t)[0];
                            let sig = problem.diffusion(&[x], u.as_slice(), t)[(0, 0)];
                            x += b * dt + sig * db;
                        }
                        costs[l] = acc + problem.terminal_cost(&[x]);
                    }
                    Ok(costs)
                })?;
                for c in partial {
                    for (s, v) in sums.iter_mut().zip(c) {
                        *s += v;
                    }
                }
            }
            for l in 0..nx {
                values[g as usize][tj][l] = sums[l] / per_group as f64;
            }
        }
    }

    let mut nodes = Vec::new();
    for tj in 1..t_grid.len() - 1 {
        for l in 1..nx - 1 {
            let (t, x) = (t_grid[tj], x_grid[l]);
            let residuals: Vec<f64> = (0..HJB_GROUPS as usize)
                .map(|g| {
                    let v = &values[g];
                    let dtj = (v[tj + 1][l] - v[tj - 1][l]) / (2.0 * ht);
                    let dxj = (v[tj][l + 1] - v[tj][l - 1]) / (2.0 * hx);
                    let dxx = (v[tj][l + 1] - 2.0 * v[tj][l] + v[tj][l - 1]) / (hx * hx);
                    dtj + min_hamiltonian_1d(problem, x, t, dxj, dxx)
                })
                .collect();
            let (mean, se) = mean_and_se(&residuals);
            let value = (0..HJB_GROUPS as usize).map(|g| values[g][tj][l]).sum::<f64>() / HJB_GROUPS as f64;
            nodes.push(HjbNode {
                t,
                x,
                value,
                residual: mean,
                noise_floor: se,
                reliable: per_group >= 1000 && se.is_finite(),
            });
        }
    }
    Ok(HjbReport { nodes })
}

// ---------------------------------------------------------------------------
// SMP representation

pub const SMP_BINS: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct SmpTimeRow {
    pub i: usize,
    pub t: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub riccati_p: f64,
    /// Constructed `q*(t_i) = P(t_i)σ` (first entry).
    pub q_star: f64,
    pub bins_used: usize,
}

impl SmpTimeRow {
    pub fn within(&self, n_se: f64) -> bool {
        (self.slope - self.riccati_p).abs() <= n_se * self.slope_se
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmpReport {
    pub rows: Vec<SmpTimeRow>,
}

impl SmpReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["i", "t", "slope", "slope_se", "riccati_p", "q_star", "bins"]);
        for r in &self.rows {
            t.rows.push(vec![
                r.i.to_string(),
                fmt_f64(r.t),
                fmt_f64(r.slope),
                fmt_f64(r.slope_se),
                fmt_f64(r.riccati_p),
                fmt_f64(r.q_star),
                r.bins_used.to_string(),
            ]);
        }
        t
    }
}

/// Slope and standard error from least squares through `SMP_BINS` equal-count bin means.
pub fn binned_slope(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, usize)> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let n = xs.len();
    let mut bx = Vec::new();
    let mut by = Vec::new();
    for b in 0..SMP_BINS {
        let (lo, hi) = (b * n / SMP_BINS, (b + 1) * n / SMP_BINS);
        if hi <= lo {
            warn!("binned_slope: empty bin {b} skipped");
            continue;
        }
        let cnt = (hi - lo) as f64;
        bx.push(order[lo..hi].iter().map(|&k| xs[k]).sum::<f64>() / cnt);
        by.push(order[lo..hi].iter().map(|&k| ys[k]).sum::<f64>() / cnt);
    }
    let m = bx.len();
    if m < 3 {
        return None;
    }
    let mx = bx.iter().sum::<f64>() / m as f64;
    let my = by.iter().sum::<f64>() / m as f64;
    let sxx: f64 = bx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Some((f64::NAN, f64::NAN, m));
    }
    let sxy: f64 = bx.iter().zip(&by).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = bx
        .iter()
        .zip(&by)
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum();
    let se = (rss / (m as f64 - 2.0) / sxx).sqrt();
    Some((slope, se, m))
}

/// Under the Riccati-optimal feedback, regresses `ã_i` on `X_i` at the given nodes.
pub fn smp_representation_check(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    nodes: &[usize],
    n_paths: u64,
    seed: u64,
) -> Result<SmpReport> {
    let riccati = solve_riccati(problem, grid)?;
    let control = riccati.optimal_control()?;
    let mut xs = vec![Vec::with_capacity(n_paths as usize); nodes.len()];
    let mut ys = vec![Vec::with_capacity(n_paths as usize); nodes.len()];
    for range in chunks(n_paths) {
        let pairs = map_indexed(range, |idx| {
            let tr = simulate_path(problem, &control, grid, seed, seed, idx)?;
            let lean = solve_lean_adjoint(problem, &tr)?;
            Ok(nodes
                .iter()
                .map(|&i| (tr.state(i)[0], lean.value(i)[0]))
                .collect::<Vec<_>>())
        })?;
        for path in pairs {
            for (k, (x, y)) in path.into_iter().enumerate() {
                xs[k].push(x);
                ys[k].push(y);
            }
        }
    }
    let mut rows = Vec::new();
    for (k, &i) in nodes.iter().enumerate() {
        let Some((slope, slope_se, bins_used)) = binned_slope(&xs[k], &ys[k]) else {
            warn!("smp_representation_check: node {i} skipped, not enough bins");
            continue;
        };
        rows.push(SmpTimeRow {
            i,
            t: grid.node(i),
            slope,
            slope_se,
            riccati_p: riccati.p[i][(0, 0)],
            q_star: riccati.martingale_integrand(i)[(0, 0)],
            bins_used,
        });
    }
    Ok(SmpReport { rows })
}

// ---------------------------------------------------------------------------
// Memorylessness

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemorylessReport {
    pub corr: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Sample correlation of `X₀` and `X_T` (first components) under the zero control.
pub fn memorylessness_check(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    n_paths: u64,
    seed: u64,
) -> Result<MemorylessReport> {
    if n_paths < 1000 {
        return Err(Error::invalid("n_paths", "need at least 1000 paths"));
    }
    let dims = problem.dims();
    let zero = ControlModel::zero(dims.state, dims.control, problem.horizon());
    let mut pairs = Vec::with_capacity(n_paths as usize);
    for range in chunks(n_paths) {
        pairs.extend(map_indexed(range, |idx| {
            let tr = simulate_path(problem, &zero, grid, seed, seed, idx)?;
            Ok((tr.state(0)[0], tr.terminal()[0]))
        })?);
    }
    let n = pairs.len() as f64;
    let m0 = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let m1 = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut s00, mut s11, mut s01) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        s00 += (a - m0) * (a - m0);
        s11 += (b - m1) * (b - m1);
        s01 += (a - m0) * (b - m1);
    }
    let corr = s01 / (s00 * s11).sqrt();
    let threshold = 3.0 / n.sqrt();
    Ok(MemorylessReport {
        corr,
        threshold,
        pass: corr.is_finite() && corr.abs() <= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_ou_tilt_problem, scalar_lq};
    use crate::simulate::sample_brownian;

    #[test]
    fn fd_gradient_of_static_problem_is_x0() {
        let p = scalar_lq(0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let g = TimeGrid::new(10, 1.0).unwrap();
        let c = ControlModel::zero(1, 1, 1.0);
        let noise = sample_brownian(&g, 1, 1, 0).unwrap();
        let grad = fd_pathwise_gradient(&p, &c, &g, &noise, &[0.7], 1e-5).unwrap();
        assert!((grad[0] - 0.7).abs() < 1e-9);
        assert!(fd_pathwise_gradient(&p, &c, &g, &noise, &[0.7], 0.0).is_err());
    }

    #[test]
    fn fd_gradient_matches_exponential_propagation() {
        // b = a x, σ const, g = ½x²: ∂J/∂x0 = (1 + a dt)^{2N} x0 + noise term.
        let a: f64 = 0.5;
        let p = scalar_lq(a, 1.0, 0.3, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let g = TimeGrid::new(1000, 1.0).unwrap();
        let c = ControlModel::zero(1, 1, 1.0);
        let noise = sample_brownian(&g, 1, 2, 0).unwrap();
        let tr = simulate_forward(&p, &c, &g, noise.clone(), &[0.8]).unwrap();
        let fd = fd_pathwise_gradient(&p, &c, &g, &noise, &[0.8], 1e-5).unwrap();
        let expect = (1.0 + a * g.dt()).powi(1000) * tr.terminal()[0];
        assert!((fd[0] / expect - 1.0).abs() < 1e-6);
        assert!((fd[0] / (a.exp() * tr.terminal()[0]) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn fd_error_shrinks_quadratically() {
        // Cubic terminal cost on a static path: FD error is step²·g'''/6.
        let p = crate::problem::scalar_geometric(Default::default(), 1.0).unwrap();
        let g = TimeGrid::new(50, 1.0).unwrap();
        let c = ControlModel::linear_feedback(1, 1, 50, 1.0).unwrap().randomized(4, 0.5);
        let noise = sample_brownian(&g, 1, 2, 0).unwrap();
        let fine = fd_pathwise_gradient(&p, &c, &g, &noise, &[1.1], 1e-4).unwrap()[0];
        let e1 = (fd_pathwise_gradient(&p, &c, &g, &noise, &[1.1], 0.2).unwrap()[0] - fine).abs();
        let e2 = (fd_pathwise_gradient(&p, &c, &g, &noise, &[1.1], 0.1).unwrap()[0] - fine).abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn fd_hessian_is_symmetric_and_vanishes_for_linear_cost() {
        let p = scalar_lq(0.2, 1.0, 0.4, 0.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let g = TimeGrid::new(20, 1.0).unwrap();
        let c = ControlModel::zero(1, 1, 1.0);
        let noise = sample_brownian(&g, 1, 2, 0).unwrap();
        let h = fd_pathwise_hessian(&p, &c, &g, &noise, &[0.3], 1e-4).unwrap();
        assert!(h[(0, 0)].abs() <= 1e-3);
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn riccati_closed_form() {
        let p = scalar_lq(0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let g = TimeGrid::new(100, 1.0).unwrap();
        let sol = solve_riccati(&p, &g).unwrap();
        assert!((sol.p[0][(0, 0)] / 0.5 - 1.0).abs() < 1e-6);
        assert_eq!(sol.p[100], DMatrix::identity(1, 1));
        assert!((sol.gains[0][(0, 0)] + 0.5).abs() < 1e-6);
        for i in 0..=100 {
            let t = g.node(i);
            assert!((sol.p[i][(0, 0)] - 1.0 / (2.0 - t)).abs() < 1e-9);
            // c(t) = ½ ln(1 + (T-t)).
            assert!((sol.c[i] - 0.5 * (2.0 - t).ln()).abs() < 1e-9);
        }
        assert!((sol.optimal_cost() - (0.25 + 0.5 * 2f64.ln())).abs() < 1e-9);
        assert!(sol.coarse_residual() < 1e-6);
        assert!(sol.fine_residual() < 1e-8);
        let mid = sol.p_at(0.123_456).unwrap()[(0, 0)];
        assert!((mid - 1.0 / (2.0 - 0.123_456)).abs() < 1e-10);
    }

    #[test]
    fn riccati_zero_costs() {
        let p = scalar_lq(0.4, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let sol = solve_riccati(&p, &TimeGrid::new(10, 1.0).unwrap()).unwrap();
        assert!(sol.p.iter().all(|m| m[(0, 0)] == 0.0));
        assert!(sol.c.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn riccati_detects_finite_escape() {
        let p = scalar_lq(0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let mut data = p.lq_data().unwrap().clone();
        data.q_term = DMatrix::from_element(1, 1, -2.0);
        // P(s) = -2/(1 - 2s) escapes at s = ½, i.e. t = T - ½.
        match solve_riccati_data(&data, &TimeGrid::new(100, 1.0).unwrap()) {
            Err(Error::FiniteEscape { escape_time }) => assert!((escape_time - 0.5).abs() < 0.01),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tilted_targets() {
        assert_eq!(tilted_gaussian_target(0.0).unwrap(), (0.0, 1.0));
        assert_eq!(tilted_gaussian_target(1.0).unwrap(), (0.0, 0.5));
        assert_eq!(tilted_gaussian_target(3.0).unwrap(), (0.0, 0.25));
        assert!(tilted_gaussian_target(-1.0).is_err());
    }

    #[test]
    fn tilted_target_matches_quadrature() {
        for lambda in [0.0, 0.5, 1.0, 3.0] {
            let (h, n) = (1e-3, 20_000);
            let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for j in -n..=n {
                let x = j as f64 * h;
                let w = (-0.5 * x * x).exp() * (-0.5 * lambda * x * x).exp();
                z += w;
                m1 += w * x;
                m2 += w * x * x;
            }
            let (mean, var) = tilted_gaussian_target(lambda).unwrap();
            assert!((m1 / z - mean).abs() < 1e-8);
            assert!((m2 / z - var).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_hjb_residual_is_tiny() {
        let p = scalar_lq(0.3, 1.0, 0.8, 0.5, 1.0, 1.0, 0.0, 1.0).unwrap();
        let g = TimeGrid::new(50, 1.0).unwrap();
        let sol = solve_riccati(&p, &g).unwrap();
        let xs: Vec<f64> = (0..21).map(|j| -2.0 + 0.2 * j as f64).collect();
        let ts: Vec<f64> = (0..21).map(|j| 0.05 * j as f64).collect();
        let rep = hjb_residual_analytic(&p, &sol, &xs, &ts).unwrap();
        assert_eq!(rep.nodes.len(), 441);
        assert!(rep.max_abs_residual() <= 1e-4, "{}", rep.max_abs_residual());
    }

    #[test]
    fn null_problem_has_zero_mc_residual() {
        let p = scalar_lq(0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let g = TimeGrid::new(20, 1.0).unwrap();
        let c = ControlModel::zero(1, 1, 1.0);
        let xs = [-1.0, 0.0, 1.0];
        let ts = [0.0, 0.5, 1.0];
        let rep = hjb_residual_1d(&p, &c, &g, &xs, &ts, 80, 1).unwrap();
        assert!(rep.nodes.iter().all(|n| n.residual == 0.0 && n.value == 0.0));
    }

    #[test]
    fn memorylessness_examples() {
        let long = make_ou_tilt_problem(1.0, 0.0, 5.0).unwrap();
        let rep = memorylessness_check(&long, &TimeGrid::new(250, 5.0).unwrap(), 10_000, 3).unwrap();
        assert!(rep.pass, "{rep:?}");
        let short = make_ou_tilt_problem(1.0, 0.0, 0.1).unwrap();
        let rep = memorylessness_check(&short, &TimeGrid::new(10, 0.1).unwrap(), 10_000, 3).unwrap();
        assert!(!rep.pass && (rep.corr - (-0.1f64).exp()).abs() < 0.02);
        let frozen = scalar_lq(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let rep = memorylessness_check(&frozen, &TimeGrid::new(10, 1.0).unwrap(), 1000, 3).unwrap();
        assert!(!rep.pass && (rep.corr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binned_slope_of_exact_line() {
        let xs: Vec<f64> = (0..2100).map(|i| i as f64 * 0.01).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 2.0).collect();
        let (slope, se, bins) = binned_slope(&xs, &ys).unwrap();
        assert!((slope - 0.5).abs() < 1e-12 && se < 1e-10 && bins == 21);
    }
}
