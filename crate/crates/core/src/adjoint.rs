//! Backward adjoint solvers along stored Euler–Maruyama paths.
//!
//! Each recursion is the exact reverse-mode derivative of the forward scheme
//! `X_{i+1} = X_i + b(X_i, u_i, t_i) dt + σ(X_i, u_i, t_i) ΔB_i`, so the
//! coefficients of step `i` are evaluated at `(X_i, u_i, t_i)` and act on the
//! adjoint at node `i + 1`. Pathwise derivatives of the discrete cost
//! `Σ f dt + g(X_N)` are therefore reproduced to rounding error, and the Itô
//! correction of the continuous adjoint SDE appears on its own as `dt → 0`.

use nalgebra::{DMatrix, DVector};

use crate::control::ControlModel;
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::problem::{DerivativeBundle, ProblemSpec, SecondOrderBundle};
use crate::simulate::Trajectory;
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointKind {
    Lean,
    Full,
    FullWithH,
}

/// Vector adjoint values at nodes `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub kind: AdjointKind,
    pub path_index: u64,
    state_dim: usize,
    values: Vec<f64>,
}

impl AdjointPath {
    fn from_backward(kind: AdjointKind, path_index: u64, mut rev: Vec<DVector<f64>>) -> Self {
        rev.reverse();
        let state_dim = rev[0].len();
        let values = rev.iter().flat_map(|v| v.iter().copied()).collect();
        Self {
            kind,
            path_index,
            state_dim,
            values,
        }
    }

    pub fn from_values(
        kind: AdjointKind,
        path_index: u64,
        state_dim: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if state_dim == 0 || values.is_empty() || !values.len().is_multiple_of(state_dim) {
            return Err(Error::invalid("values", "length must be a positive multiple of d"));
        }
        Ok(Self {
            kind,
            path_index,
            state_dim,
            values,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.state_dim
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.state_dim..(i + 1) * self.state_dim]
    }
    pub fn vector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.value(i))
    }
}

/// Symmetric matrix adjoint values at nodes `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixAdjointPath {
    pub path_index: u64,
    pub values: Vec<DMatrix<f64>>,
}

/// Per-step propagators and their products back from the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatorPath {
    /// `M_iᵀ = (I + dt ∇₁b(X_i, u_i, t_i))ᵀ` for `i = 0..N`.
    pub steps: Vec<DMatrix<f64>>,
    /// `Φ_i = M_iᵀ M_{i+1}ᵀ ⋯ M_{N-1}ᵀ`, with `Φ_N = I`.
    pub cumulative: Vec<DMatrix<f64>>,
}

type HFn<'a> = dyn Fn(&[f64], f64) -> DMatrix<f64> + Sync + 'a;
type HValFn<'a> = dyn Fn(&[f64], f64) -> DVector<f64> + Sync + 'a;

/// Stochastic-integral functional `∫ h(X_t, t)·dB_t` added to the cost.
pub struct HTerm<'a> {
    /// `h(x, t) ∈ ℝᵐ`.
    pub value: Box<HValFn<'a>>,
    /// `∇_x h(x, t)`, a `d×m` matrix whose column `k` is `∇h_k`.
    pub gradient: Option<Box<HFn<'a>>>,
}

fn check_bundle(problem: &ProblemSpec, db: &DerivativeBundle) -> Result<()> {
    let dims = problem.dims();
    let (d, k, m) = (dims.state, dims.control, dims.noise);
    let shape_ok = db.drift_x.shape() == (d, d)
        && db.drift_u.shape() == (d, k)
        && db.cost_x.len() == d
        && db.cost_u.len() == k;
    if !shape_ok {
        return Err(Error::MissingDerivative("drift/cost Jacobians"));
    }
    if db.diffusion_x.len() != m || db.diffusion_u.len() != m {
        return Err(Error::MissingDerivative("diffusion column Jacobians"));
    }
    Ok(())
}

fn check_traj(problem: &ProblemSpec, traj: &Trajectory) -> Result<()> {
    if traj.state_dim() != problem.dims().state {
        return Err(Error::Dimension {
            context: "trajectory state dimension",
            expected: problem.dims().state,
            got: traj.state_dim(),
        });
    }
    Ok(())
}

/// Closed-loop first-order coefficients at one step.
struct TotalJacobians {
    drift_x: DMatrix<f64>,
    cost_x: DVector<f64>,
    /// `G_k = ∂σ_k/∂x + ∂σ_k/∂u · ∇_x u`.
    g: Vec<DMatrix<f64>>,
}

fn total_jacobians(db: &DerivativeBundle, du_dx: &DMatrix<f64>) -> TotalJacobians {
    TotalJacobians {
        drift_x: &db.drift_x + &db.drift_u * du_dx,
        cost_x: &db.cost_x + du_dx.tr_mul(&db.cost_u),
        g: db
            .diffusion_x
            .iter()
            .zip(&db.diffusion_u)
            .map(|(sx, su)| sx + su * du_dx)
            .collect(),
    }
}

/// `ã_i = ã_{i+1} + dt (∇₁bᵀ ã_{i+1} + ∇₁f)`, `ã_N = ∇g(X_N)`.
pub fn solve_lean_adjoint(problem: &ProblemSpec, traj: &Trajectory) -> Result<AdjointPath> {
    check_traj(problem, traj)?;
    let n = traj.n_steps();
    let dt = traj.grid.dt();
    let mut a = problem.terminal_grad(traj.terminal());
    let mut rev = Vec::with_capacity(n + 1);
    rev.push(a.clone());
    for i in (0..n).rev() {
        let db = problem.derivatives(traj.state(i), traj.control(i), traj.grid.node(i));
        if i == n - 1 {
            check_bundle(problem, &db)?;
        }
        a = &a + (db.drift_x.tr_mul(&a) + &db.cost_x) * dt;
        rev.push(a.clone());
    }
    Ok(AdjointPath::from_backward(
        AdjointKind::Lean,
        traj.path_index(),
        rev,
    ))
}

/// Full adjoint with closed-loop derivatives; `h` adds `Σ_k ∇h_k ΔB^k` per step.
pub fn solve_first_order_adjoint(
    problem: &ProblemSpec,
    control: &ControlModel,
    traj: &Trajectory,
    h: Option<&HTerm>,
) -> Result<AdjointPath> {
    check_traj(problem, traj)?;
    let h_grad = match h {
        Some(term) => Some(
            term.gradient
                .as_deref()
                .ok_or(Error::MissingDerivative("h_term gradient"))?,
        ),
        None => None,
    };
    let n = traj.n_steps();
    let dt = traj.grid.dt();
    let mut a = problem.terminal_grad(traj.terminal());
    let mut rev = Vec::with_capacity(n + 1);
    rev.push(a.clone());
    for i in (0..n).rev() {
        let (x, t) = (traj.state(i), traj.grid.node(i));
        let db = problem.derivatives(x, traj.control(i), t);
        if i == n - 1 {
            check_bundle(problem, &db)?;
        }
        let tot = total_jacobians(&db, &control.state_jacobian(x, t)?);
        let det = &a + (tot.drift_x.tr_mul(&a) + &tot.cost_x) * dt;
        let inc = traj.increment(i);
        let mut noise = DVector::zeros(a.len());
        for (gk, dbk) in tot.g.iter().zip(inc) {
            noise += gk.tr_mul(&a) * *dbk;
        }
        if let Some(grad) = h_grad {
            let gh = grad(x, t);
            for (col, dbk) in gh.column_iter().zip(inc) {
                noise += col * *dbk;
            }
        }
        a = det + noise;
        rev.push(a.clone());
    }
    let kind = if h.is_some() {
        AdjointKind::FullWithH
    } else {
        AdjointKind::Full
    };
    Ok(AdjointPath::from_backward(kind, traj.path_index(), rev))
}

/// Hessian of `x ↦ F(x, u(x))` given the partial blocks of `F` and `u`.
fn closed_loop_hessian(
    f_xx: &DMatrix<f64>,
    f_xu: &DMatrix<f64>,
    f_uu: &DMatrix<f64>,
    f_u: &[f64],
    du_dx: &DMatrix<f64>,
    u_hess: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let cross = f_xu * du_dx;
    let mut out = f_xx + &cross + cross.transpose() + du_dx.tr_mul(&(f_uu * du_dx));
    for (fj, hj) in f_u.iter().zip(u_hess) {
        if *fj != 0.0 {
            out += hj * *fj;
        }
    }
    out
}

fn check_second_order(problem: &ProblemSpec, so: &SecondOrderBundle) -> Result<()> {
    let dims = problem.dims();
    let ok = so.drift_xx.len() == dims.state
        && so.diffusion_xx.len() == dims.state * dims.noise
        && so.cost_xx.shape() == (dims.state, dims.state);
    if ok {
        Ok(())
    } else {
        Err(Error::MissingDerivative("second-order bundle"))
    }
}

/// Pathwise Hessian recursion
/// `A_i = J_iᵀ A_{i+1} J_i + Σ_j a_{i+1}^j (dt ∇²b_j + Σ_k ∇²σ_{jk} ΔB^k) + dt ∇²f`,
/// with `J_i = I + dt ∇b + Σ_k G_k ΔB^k` and all derivatives closed-loop.
pub fn solve_second_order_adjoint(
    problem: &ProblemSpec,
    control: &ControlModel,
    traj: &Trajectory,
    first: &AdjointPath,
) -> Result<MatrixAdjointPath> {
    check_traj(problem, traj)?;
    let n = traj.n_steps();
    if first.n_nodes() != n + 1 {
        return Err(Error::Dimension {
            context: "first-order adjoint length",
            expected: n + 1,
            got: first.n_nodes(),
        });
    }
    let d = problem.dims().state;
    let m = problem.dims().noise;
    let dt = traj.grid.dt();
    let mut big_a = problem.terminal_hess(traj.terminal());
    let mut rev = Vec::with_capacity(n + 1);
    rev.push(big_a.clone());
    for i in (0..n).rev() {
        let (x, u, t) = (traj.state(i), traj.control(i), traj.grid.node(i));
        let db = problem.derivatives(x, u, t);
        let so = problem
            .second_order(x, u, t)
            .ok_or(Error::MissingDerivative("second-order bundle"))?;
        if i == n - 1 {
            check_bundle(problem, &db)?;
            check_second_order(problem, &so)?;
        }
        let du_dx = control.state_jacobian(x, t)?;
        let u_hess = control.state_hessians(x, t)?;
        let tot = total_jacobians(&db, &du_dx);
        let inc = traj.increment(i);
        let mut jac = DMatrix::identity(d, d) + &tot.drift_x * dt;
        for (gk, dbk) in tot.g.iter().zip(inc) {
            jac += gk * *dbk;
        }
        let next_a = first.value(i + 1);
        let mut next = jac.tr_mul(&(&big_a * &jac));
        for (j, aj) in next_a.iter().enumerate() {
            if *aj == 0.0 {
                continue;
            }
            let drift_u_row: Vec<f64> = db.drift_u.row(j).iter().copied().collect();
            let mut weight = closed_loop_hessian(
                &so.drift_xx[j],
                &so.drift_xu[j],
                &so.drift_uu[j],
                &drift_u_row,
                &du_dx,
                &u_hess,
            ) * dt;
            for (k, dbk) in inc.iter().enumerate() {
                let idx = j * m + k;
                let sig_u_row: Vec<f64> = db.diffusion_u[k].row(j).iter().copied().collect();
                weight += closed_loop_hessian(
                    &so.diffusion_xx[idx],
                    &so.diffusion_xu[idx],
                    &so.diffusion_uu[idx],
                    &sig_u_row,
                    &du_dx,
                    &u_hess,
                ) * *dbk;
            }
            next += weight * *aj;
        }
        next += closed_loop_hessian(
            &so.cost_xx,
            &so.cost_xu,
            &so.cost_uu,
            db.cost_u.as_slice(),
            &du_dx,
            &u_hess,
        ) * dt;
        big_a = (&next + next.transpose()) * 0.5;
        rev.push(big_a.clone());
    }
    rev.reverse();
    Ok(MatrixAdjointPath {
        path_index: traj.path_index(),
        values: rev,
    })
}

/// Propagators of the lean recursion; only defined when `σ` depends on `t` alone.
pub fn fundamental_matrix(problem: &ProblemSpec, traj: &Trajectory) -> Result<PropagatorPath> {
    check_traj(problem, traj)?;
    if !problem.flags().diffusion_time_only {
        return Err(Error::Unsupported {
            operation: "fundamental_matrix",
            reason: "the diffusion depends on the state or the control".into(),
        });
    }
    let n = traj.n_steps();
    let d = problem.dims().state;
    let dt = traj.grid.dt();
    let steps: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let db = problem.derivatives(traj.state(i), traj.control(i), traj.grid.node(i));
            (DMatrix::identity(d, d) + db.drift_x * dt).transpose()
        })
        .collect();
    let mut cumulative = vec![DMatrix::identity(d, d); n + 1];
    for i in (0..n).rev() {
        cumulative[i] = &steps[i] * &cumulative[i + 1];
    }
    Ok(PropagatorPath { steps, cumulative })
}

/// `ã_i = Φ_i ∇g(X_N) + dt Σ_{j≥i} Φ_{i,j} ∇₁f(X_j, u_j, t_j)` with `Φ_{i,j} = M_iᵀ⋯M_{j-1}ᵀ`.
pub fn feynman_kac_lean(
    problem: &ProblemSpec,
    traj: &Trajectory,
    props: &PropagatorPath,
) -> Result<AdjointPath> {
    check_traj(problem, traj)?;
    let n = traj.n_steps();
    if props.steps.len() != n || props.cumulative.len() != n + 1 {
        return Err(Error::Dimension {
            context: "propagator grid",
            expected: n,
            got: props.steps.len(),
        });
    }
    let dt = traj.grid.dt();
    let d = problem.dims().state;
    let grad_g = problem.terminal_grad(traj.terminal());
    let sources: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            problem
                .derivatives(traj.state(j), traj.control(j), traj.grid.node(j))
                .cost_x
                * dt
        })
        .collect();
    let mut rev = Vec::with_capacity(n + 1);
    rev.push(grad_g.clone());
    for i in (0..n).rev() {
        let mut acc = &props.cumulative[i] * &grad_g;
        let mut prod = DMatrix::<f64>::identity(d, d);
        for j in i..n {
            if j > i {
                prod = &prod * &props.steps[j - 1];
            }
            acc += &prod * &sources[j];
        }
        rev.push(acc);
    }
    Ok(AdjointPath::from_backward(
        AdjointKind::Lean,
        traj.path_index(),
        rev,
    ))
}

/// Pathwise `∇_θ` of `Σ_i f(X_i, u_i, t_i) dt + g(X_N)` at fixed noise, given the
/// closed-loop adjoint of the same path.
pub fn theta_gradient_via_adjoint(
    problem: &ProblemSpec,
    control: &ControlModel,
    traj: &Trajectory,
    adjoint: &AdjointPath,
) -> Result<Vec<f64>> {
    check_traj(problem, traj)?;
    let n = traj.n_steps();
    if adjoint.n_nodes() != n + 1 || adjoint.state_dim() != traj.state_dim() {
        return Err(Error::Dimension {
            context: "adjoint path",
            expected: n + 1,
            got: adjoint.n_nodes(),
        });
    }
    let dt = traj.grid.dt();
    let mut grad = vec![0.0; control.n_params()];
    for i in 0..n {
        let (x, t) = (traj.state(i), traj.grid.node(i));
        let db = problem.derivatives(x, traj.control(i), t);
        let a = adjoint.vector(i + 1);
        let mut v = (db.drift_u.tr_mul(&a) + &db.cost_u) * dt;
        for (su, dbk) in db.diffusion_u.iter().zip(traj.increment(i)) {
            v += su.tr_mul(&a) * *dbk;
        }
        control.param_jacobian(x, t)?.accumulate_transpose(&v, 1.0, &mut grad);
    }
    Ok(grad)
}

/// Columns `path,i,t,a_0..a_{d-1}`.
pub fn adjoints_table(paths: &[(&Trajectory, &AdjointPath)]) -> Table {
    let d = paths.first().map(|p| p.1.state_dim()).unwrap_or(0);
    let header = ["path", "i", "t"]
        .into_iter()
        .map(String::from)
        .chain((0..d).map(|j| format!("a_{j}")));
    let mut table = Table::new(header);
    for (traj, adj) in paths {
        for i in 0..adj.n_nodes() {
            let mut row = vec![
                adj.path_index.to_string(),
                i.to_string(),
                fmt_f64(traj.grid.node(i)),
            ];
            row.extend(adj.value(i).iter().map(|v| fmt_f64(*v)));
            table.rows.push(row);
        }
    }
    table
}
