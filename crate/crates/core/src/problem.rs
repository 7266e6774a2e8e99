//! Stochastic optimal control problem definitions.
//!
//! A problem is a controlled SDE `dX = b(X,u,t) dt + σ(X,u,t) dB` on `[0, T]`
//! with running cost `f(X,u,t)`, terminal cost `g(X_T)` and initial law `P₀`.
//! Derivatives are supplied analytically through [`Dynamics`] and checked
//! against central finite differences when a [`ProblemSpec`] is built.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, standard_normal, Domain, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub state: usize,
    pub control: usize,
    pub noise: usize,
}

impl Dims {
    pub fn new(state: usize, control: usize, noise: usize) -> Self {
        Self {
            state,
            control,
            noise,
        }
    }
}

/// First-order partial derivatives of the coefficients at one `(x, u, t)`.
///
/// `diffusion_x[k]` is the Jacobian of column `k` of `σ` with respect to `x`
/// (`d×d`), `diffusion_u[k]` the Jacobian with respect to `u` (`d×k`).
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub drift_x: DMatrix<f64>,
    pub drift_u: DMatrix<f64>,
    pub cost_x: DVector<f64>,
    pub cost_u: DVector<f64>,
    pub diffusion_x: Vec<DMatrix<f64>>,
    pub diffusion_u: Vec<DMatrix<f64>>,
}

/// Second-order partial derivatives, needed by the matrix adjoint.
///
/// Per state component `i`: `drift_xx[i]` is `∂²b_i/∂x²`, `drift_xu[i]` is the
/// `d×k` block `∂²b_i/∂x∂u`, `drift_uu[i]` is `∂²b_i/∂u²`. Diffusion entries are
/// indexed by `i * m + k` for `σ_{ik}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderBundle {
    pub drift_xx: Vec<DMatrix<f64>>,
    pub drift_xu: Vec<DMatrix<f64>>,
    pub drift_uu: Vec<DMatrix<f64>>,
    pub cost_xx: DMatrix<f64>,
    pub cost_xu: DMatrix<f64>,
    pub cost_uu: DMatrix<f64>,
    pub diffusion_xx: Vec<DMatrix<f64>>,
    pub diffusion_xu: Vec<DMatrix<f64>>,
    pub diffusion_uu: Vec<DMatrix<f64>>,
}

impl SecondOrderBundle {
    pub fn zeros(dims: Dims) -> Self {
        let (d, k, m) = (dims.state, dims.control, dims.noise);
        Self {
            drift_xx: vec![DMatrix::zeros(d, d); d],
            drift_xu: vec![DMatrix::zeros(d, k); d],
            drift_uu: vec![DMatrix::zeros(k, k); d],
            cost_xx: DMatrix::zeros(d, d),
            cost_xu: DMatrix::zeros(d, k),
            cost_uu: DMatrix::zeros(k, k),
            diffusion_xx: vec![DMatrix::zeros(d, d); d * m],
            diffusion_xu: vec![DMatrix::zeros(d, k); d * m],
            diffusion_uu: vec![DMatrix::zeros(k, k); d * m],
        }
    }
}

/// Problem callbacks. Implementations must be pure: the batch routines call
/// them concurrently from several workers.
pub trait Dynamics: Send + Sync {
    fn drift(&self, x: &[f64], u: &[f64], t: f64) -> DVector<f64>;
    /// `d×m` diffusion matrix.
    fn diffusion(&self, x: &[f64], u: &[f64], t: f64) -> DMatrix<f64>;
    fn running_cost(&self, x: &[f64], u: &[f64], t: f64) -> f64;
    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn terminal_grad(&self, x: &[f64]) -> DVector<f64>;
    fn terminal_hess(&self, x: &[f64]) -> DMatrix<f64>;
    fn derivatives(&self, x: &[f64], u: &[f64], t: f64) -> DerivativeBundle;
    fn second_order(&self, _x: &[f64], _u: &[f64], _t: f64) -> Option<SecondOrderBundle> {
        None
    }
    /// Draw `X₀ ~ P₀`.
    fn sample_initial(&self, rng: &mut SeededRng) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    /// `σ(x, u, t) = σ(t)`.
    pub diffusion_time_only: bool,
    /// Drift affine in `u` and `f(x,u,t) - f(x,0,t) = ½‖u‖²`.
    pub control_affine_quadratic: bool,
}

/// Matrices of a linear-quadratic instance, kept for the Riccati oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LqData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub q_run: DMatrix<f64>,
    pub q_term: DMatrix<f64>,
    pub x0_mean: DVector<f64>,
    pub x0_cov: DMatrix<f64>,
}

#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    dims: Dims,
    horizon: f64,
    flags: Capabilities,
    lq: Option<Arc<LqData>>,
    model: Arc<dyn Dynamics>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("horizon", &self.horizon)
            .field("flags", &self.flags)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn state_dim(&self) -> usize {
        self.dims.state
    }
    pub fn control_dim(&self) -> usize {
        self.dims.control
    }
    pub fn noise_dim(&self) -> usize {
        self.dims.noise
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn flags(&self) -> Capabilities {
        self.flags
    }
    pub fn lq_data(&self) -> Option<&LqData> {
        self.lq.as_deref()
    }
    pub fn model(&self) -> &Arc<dyn Dynamics> {
        &self.model
    }

    pub fn drift(&self, x: &[f64], u: &[f64], t: f64) -> DVector<f64> {
        self.model.drift(x, u, t)
    }
    pub fn diffusion(&self, x: &[f64], u: &[f64], t: f64) -> DMatrix<f64> {
        self.model.diffusion(x, u, t)
    }
    pub fn running_cost(&self, x: &[f64], u: &[f64], t: f64) -> f64 {
        self.model.running_cost(x, u, t)
    }
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.model.terminal_cost(x)
    }
    pub fn terminal_grad(&self, x: &[f64]) -> DVector<f64> {
        self.model.terminal_grad(x)
    }
    pub fn terminal_hess(&self, x: &[f64]) -> DMatrix<f64> {
        self.model.terminal_hess(x)
    }
    pub fn derivatives(&self, x: &[f64], u: &[f64], t: f64) -> DerivativeBundle {
        self.model.derivatives(x, u, t)
    }
    pub fn second_order(&self, x: &[f64], u: &[f64], t: f64) -> Option<SecondOrderBundle> {
        self.model.second_order(x, u, t)
    }
    pub fn sample_initial(&self, rng: &mut SeededRng) -> DVector<f64> {
        self.model.sample_initial(rng)
    }

    /// Replace the model, keeping the metadata, and re-run validation. Used to
    /// wrap a model in a decorator such as [`SignFlip`].
    pub fn with_model(&self, model: Arc<dyn Dynamics>) -> Result<Self> {
        let spec = Self {
            model,
            ..self.clone()
        };
        validate_derivatives(&spec, VALIDATION_PROBES, VALIDATION_SEED)?;
        Ok(spec)
    }
}

pub const VALIDATION_PROBES: usize = 32;
const VALIDATION_SEED: u64 = 0x5EED;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Linear-quadratic family

#[derive(Debug, Clone)]
struct LqModel {
    data: LqData,
    x0_factor: DMatrix<f64>,
}

fn col(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

impl Dynamics for LqModel {
    fn drift(&self, x: &[f64], u: &[f64], _t: f64) -> DVector<f64> {
        &self.data.a * col(x) + &self.data.b * col(u)
    }
    fn diffusion(&self, _x: &[f64], _u: &[f64], _t: f64) -> DMatrix<f64> {
        self.data.sigma.clone()
    }
    fn running_cost(&self, x: &[f64], u: &[f64], _t: f64) -> f64 {
        let x = col(x);
        let state = 0.5 * x.dot(&(&self.data.q_run * &x));
        state + 0.5 * u.iter().map(|v| v * v).sum::<f64>()
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        let x = col(x);
        0.5 * x.dot(&(&self.data.q_term * &x))
    }
    fn terminal_grad(&self, x: &[f64]) -> DVector<f64> {
        &self.data.q_term * col(x)
    }
    fn terminal_hess(&self, _x: &[f64]) -> DMatrix<f64> {
        self.data.q_term.clone()
    }
    fn derivatives(&self, x: &[f64], u: &[f64], _t: f64) -> DerivativeBundle {
        let d = x.len();
        let k = u.len();
        let m = self.data.sigma.ncols();
        DerivativeBundle {
            drift_x: self.data.a.clone(),
            drift_u: self.data.b.clone(),
            cost_x: &self.data.q_run * col(x),
            cost_u: col(u),
            diffusion_x: vec![DMatrix::zeros(d, d); m],
            diffusion_u: vec![DMatrix::zeros(d, k); m],
        }
    }
    fn second_order(&self, x: &[f64], u: &[f64], _t: f64) -> Option<SecondOrderBundle> {
        let dims = Dims::new(x.len(), u.len(), self.data.sigma.ncols());
        let mut so = SecondOrderBundle::zeros(dims);
        so.cost_xx = self.data.q_run.clone();
        so.cost_uu = DMatrix::identity(dims.control, dims.control);
        Some(so)
    }
    fn sample_initial(&self, rng: &mut SeededRng) -> DVector<f64> {
        let d = self.data.x0_mean.len();
        let z = DVector::from_fn(d, |_, _| standard_normal(rng));
        &self.data.x0_mean + &self.x0_factor * z
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::validation(name, "matrix is not square"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::validation(name, "matrix is not symmetric"));
    }
    Ok(())
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(name, m)?;
    let eig = m.clone().symmetric_eigen();
    let scale = m.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::validation(name, "matrix is not positive semidefinite"));
    }
    Ok(())
}

/// Symmetric square root factor `L` with `L Lᵀ = cov` (works for singular covariances).
fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// `dX = (A X + B u) dt + σ dB`, `f = ½xᵀQ_run x + ½‖u‖²`, `g = ½xᵀQ_term x`,
/// `X₀ ~ N(x0_mean, x0_cov)`.
pub fn make_lq_problem(data: LqData, horizon: f64) -> Result<ProblemSpec> {
    make_lq_named("lq", data, horizon)
}

fn make_lq_named(name: &str, data: LqData, horizon: f64) -> Result<ProblemSpec> {
    let d = data.a.nrows();
    if !data.a.is_square() {
        return Err(Error::validation("A", "drift matrix must be square"));
    }
    if data.b.nrows() != d {
        return Err(Error::Dimension {
            context: "B_mat rows",
            expected: d,
            got: data.b.nrows(),
        });
    }
    if data.sigma.nrows() != d {
        return Err(Error::Dimension {
            context: "sigma rows",
            expected: d,
            got: data.sigma.nrows(),
        });
    }
    if data.x0_mean.len() != d {
        return Err(Error::Dimension {
            context: "x0_mean",
            expected: d,
            got: data.x0_mean.len(),
        });
    }
    check_psd("Q_run", &data.q_run)?;
    check_psd("Q_term", &data.q_term)?;
    check_psd("x0_cov", &data.x0_cov)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon", "must be positive and finite"));
    }
    let dims = Dims::new(d, data.b.ncols(), data.sigma.ncols());
    let model = LqModel {
        x0_factor: psd_factor(&data.x0_cov),
        data: data.clone(),
    };
    let spec = ProblemSpec {
        name: name.to_string(),
        dims,
        horizon,
        flags: Capabilities {
            diffusion_time_only: true,
            control_affine_quadratic: true,
        },
        lq: Some(Arc::new(data)),
        model: Arc::new(model),
    };
    validate_problem(&spec)?;
    Ok(spec)
}

/// Scalar LQ convenience: `dX = (a X + b u) dt + σ dB`, `f = ½ q_run x² + ½u²`,
/// `g = ½ q_term x²`, `X₀ ~ N(m0, v0)`.
pub fn scalar_lq(
    a: f64,
    b: f64,
    sigma: f64,
    q_run: f64,
    q_term: f64,
    horizon: f64,
    x0_mean: f64,
    x0_var: f64,
) -> Result<ProblemSpec> {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    make_lq_problem(
        LqData {
            a: s(a),
            b: s(b),
            sigma: s(sigma),
            q_run: s(q_run),
            q_term: s(q_term),
            x0_mean: DVector::from_element(1, x0_mean),
            x0_cov: s(x0_var),
        },
        horizon,
    )
}

/// Reward-tilted sampling from a stationary Ornstein–Uhlenbeck base:
/// `dX = (-θX + √(2θ) u) dt + √(2θ) dB`, `f = ½u²`, `g = ½λx²`, `X₀ ~ N(0, 1)`.
///
/// The optimally controlled terminal law is `N(0, 1/(1+λ))` once `θT` is
/// large enough for `X₀` and `X_T` to decouple.
pub fn make_ou_tilt_problem(theta: f64, lambda: f64, horizon: f64) -> Result<ProblemSpec> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::validation("theta", "OU rate must be positive"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::validation("lambda", "tilt strength must be nonnegative"));
    }
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let vol = (2.0 * theta).sqrt();
    make_lq_named(
        "ou_tilt",
        LqData {
            a: s(-theta),
            b: s(vol),
            sigma: s(vol),
            q_run: s(0.0),
            q_term: s(lambda),
            x0_mean: DVector::zeros(1),
            x0_cov: s(1.0),
        },
        horizon,
    )
}

// ---------------------------------------------------------------------------
// General controlled diffusions

/// Build a problem from arbitrary callbacks. Derivatives are probed against
/// finite differences and the capability flags are inferred by probing.
pub fn make_controlled_diffusion_problem(
    name: &str,
    dims: Dims,
    horizon: f64,
    model: Arc<dyn Dynamics>,
) -> Result<ProblemSpec> {
    if dims.state == 0 || dims.control == 0 || dims.noise == 0 {
        return Err(Error::invalid("dims", "all dimensions must be positive"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon", "must be positive and finite"));
    }
    let mut spec = ProblemSpec {
        name: name.to_string(),
        dims,
        horizon,
        flags: Capabilities::default(),
        lq: None,
        model,
    };
    // The quadratic flag is only claimed together with σ = σ(t): the
    // regression target -σ(t)ᵀã is meaningless otherwise.
    let time_only = probe_time_only(&spec, VALIDATION_SEED).is_ok();
    spec.flags = Capabilities {
        diffusion_time_only: time_only,
        control_affine_quadratic: time_only
            && probe_affine_quadratic(&spec, VALIDATION_SEED).is_ok(),
    };
    validate_problem(&spec)?;
    Ok(spec)
}

/// `b = u·x`, `σ = ν·x·(1 + κu)`, `f = ½u²`, `g = (x-1)²` with `X₀ ~ N(m0, s0²)`.
///
/// `κ = 0` gives the control-independent geometric noise; `κ ≠ 0` couples the
/// noise to the control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGeometric {
    pub nu: f64,
    pub coupling: f64,
    pub x0_mean: f64,
    pub x0_std: f64,
}

impl Default for ScalarGeometric {
    fn default() -> Self {
        Self {
            nu: 0.2,
            coupling: 0.0,
            x0_mean: 1.0,
            x0_std: 0.2,
        }
    }
}

impl Dynamics for ScalarGeometric {
    fn drift(&self, x: &[f64], u: &[f64], _t: f64) -> DVector<f64> {
        DVector::from_element(1, u[0] * x[0])
    }
    fn diffusion(&self, x: &[f64], u: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.nu * x[0] * (1.0 + self.coupling * u[0]))
    }
    fn running_cost(&self, _x: &[f64], u: &[f64], _t: f64) -> f64 {
        0.5 * u[0] * u[0]
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        (x[0] - 1.0).powi(2)
    }
    fn terminal_grad(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_element(1, 2.0 * (x[0] - 1.0))
    }
    fn terminal_hess(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0)
    }
    fn derivatives(&self, x: &[f64], u: &[f64], _t: f64) -> DerivativeBundle {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        DerivativeBundle {
            drift_x: s(u[0]),
            drift_u: s(x[0]),
            cost_x: DVector::zeros(1),
            cost_u: DVector::from_element(1, u[0]),
            diffusion_x: vec![s(self.nu * (1.0 + self.coupling * u[0]))],
            diffusion_u: vec![s(self.nu * self.coupling * x[0])],
        }
    }
    fn second_order(&self, _x: &[f64], _u: &[f64], _t: f64) -> Option<SecondOrderBundle> {
        let mut so = SecondOrderBundle::zeros(Dims::new(1, 1, 1));
        so.drift_xu[0][(0, 0)] = 1.0;
        so.cost_uu[(0, 0)] = 1.0;
        so.diffusion_xu[0][(0, 0)] = self.nu * self.coupling;
        Some(so)
    }
    fn sample_initial(&self, rng: &mut SeededRng) -> DVector<f64> {
        DVector::from_element(1, self.x0_mean + self.x0_std * standard_normal(rng))
    }
}

pub fn scalar_geometric(params: ScalarGeometric, horizon: f64) -> Result<ProblemSpec> {
    if !params.nu.is_finite() || !params.coupling.is_finite() {
        return Err(Error::validation("nu", "parameters must be finite"));
    }
    make_controlled_diffusion_problem(
        "scalar_geometric",
        Dims::new(1, 1, 1),
        horizon,
        Arc::new(params),
    )
}

// ---------------------------------------------------------------------------
// Validation

/// Names of the derivative entries, used in validation errors and by [`SignFlip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BundleEntry {
    DriftX,
    DriftU,
    CostX,
    CostU,
    DiffusionX,
    DiffusionU,
    TerminalGrad,
    TerminalHess,
}

impl BundleEntry {
    pub const ALL: [BundleEntry; 8] = [
        BundleEntry::DriftX,
        BundleEntry::DriftU,
        BundleEntry::CostX,
        BundleEntry::CostU,
        BundleEntry::DiffusionX,
        BundleEntry::DiffusionU,
        BundleEntry::TerminalGrad,
        BundleEntry::TerminalHess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BundleEntry::DriftX => "drift_x",
            BundleEntry::DriftU => "drift_u",
            BundleEntry::CostX => "cost_x",
            BundleEntry::CostU => "cost_u",
            BundleEntry::DiffusionX => "diffusion_x",
            BundleEntry::DiffusionU => "diffusion_u",
            BundleEntry::TerminalGrad => "terminal_grad",
            BundleEntry::TerminalHess => "terminal_hess",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = fd.iter().map(|v| v.abs()).fold(1.0, f64::max);
    diff / scale
}

fn perturbed(v: &[f64], j: usize, h: f64) -> Vec<f64> {
    let mut w = v.to_vec();
    w[j] += h;
    w
}

/// Central difference Jacobian of a vector-valued map (columns = inputs).
fn fd_jacobian(n_out: usize, at: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(n_out, at.len());
    for j in 0..at.len() {
        let plus = f(&perturbed(at, j, FD_STEP));
        let minus = f(&perturbed(at, j, -FD_STEP));
        for i in 0..n_out {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * FD_STEP);
        }
    }
    jac
}

struct Probe {
    x: Vec<f64>,
    u: Vec<f64>,
    t: f64,
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x={:?}, u={:?}, t={}", self.x, self.u, self.t)
    }
}

fn probes(spec: &ProblemSpec, n: usize, seed: u64) -> Vec<Probe> {
    let mut rng = keyed_rng(seed, Domain::Probe, 0);
    let dims = spec.dims;
    (0..n)
        .map(|_| {
            let center = spec.sample_initial(&mut rng);
            Probe {
                x: (0..dims.state)
                    .map(|i| center[i] + 0.5 * standard_normal(&mut rng))
                    .collect(),
                u: (0..dims.control)
                    .map(|_| 0.5 * standard_normal(&mut rng))
                    .collect(),
                t: rng.random::<f64>() * spec.horizon,
            }
        })
        .collect()
}

fn check_entry(entry: &str, probe: &Probe, analytic: &[f64], fd: &[f64]) -> Result<()> {
    let err = rel_err(analytic, fd);
    if !(err <= FD_REL_TOL) {
        return Err(Error::validation(
            entry,
            format!("finite-difference mismatch {err:.3e} at probe {probe}"),
        ));
    }
    Ok(())
}

/// Check every supplied derivative against central finite differences of
/// its callback at `n_probes` random points.
pub fn validate_derivatives(spec: &ProblemSpec, n_probes: usize, seed: u64) -> Result<()> {
    let Dims {
        state: d,
        control: _,
        noise: m,
    } = spec.dims;
    for p in probes(spec, n_probes, seed) {
        let (x, u, t) = (&p.x[..], &p.u[..], p.t);
        let sig = spec.diffusion(x, u, t);
        if sig.nrows() != d || sig.ncols() != m {
            return Err(Error::validation(
                "diffusion",
                format!("shape {}x{} != {d}x{m} at probe {p}", sig.nrows(), sig.ncols()),
            ));
        }
        let db = spec.derivatives(x, u, t);
        let fd_bx = fd_jacobian(d, x, |xx| spec.drift(xx, u, t).as_slice().to_vec());
        check_entry("drift_x", &p, db.drift_x.as_slice(), fd_bx.as_slice())?;
        let fd_bu = fd_jacobian(d, u, |uu| spec.drift(x, uu, t).as_slice().to_vec());
        check_entry("drift_u", &p, db.drift_u.as_slice(), fd_bu.as_slice())?;
        let fd_fx = fd_jacobian(1, x, |xx| vec![spec.running_cost(xx, u, t)]);
        check_entry("cost_x", &p, db.cost_x.as_slice(), fd_fx.as_slice())?;
        let fd_fu = fd_jacobian(1, u, |uu| vec![spec.running_cost(x, uu, t)]);
        check_entry("cost_u", &p, db.cost_u.as_slice(), fd_fu.as_slice())?;
        if db.diffusion_x.len() != m || db.diffusion_u.len() != m {
            return Err(Error::validation(
                "diffusion_x",
                "one Jacobian per diffusion column is required",
            ));
        }
        for c in 0..m {
            let fd_sx = fd_jacobian(d, x, |xx| {
                spec.diffusion(xx, u, t).column(c).iter().copied().collect()
            });
            check_entry("diffusion_x", &p, db.diffusion_x[c].as_slice(), fd_sx.as_slice())?;
            let fd_su = fd_jacobian(d, u, |uu| {
                spec.diffusion(x, uu, t).column(c).iter().copied().collect()
            });
            check_entry("diffusion_u", &p, db.diffusion_u[c].as_slice(), fd_su.as_slice())?;
        }
        let fd_g = fd_jacobian(1, x, |xx| vec![spec.terminal_cost(xx)]);
        check_entry("terminal_grad", &p, spec.terminal_grad(x).as_slice(), fd_g.as_slice())?;
        let hess = spec.terminal_hess(x);
        let fd_gg = fd_jacobian(d, x, |xx| spec.terminal_grad(xx).as_slice().to_vec());
        check_entry("terminal_hess", &p, hess.as_slice(), fd_gg.as_slice())?;
        check_symmetric("terminal_hess", &hess)?;

        if let Some(so) = spec.second_order(x, u, t) {
            validate_second_order(spec, &p, &so)?;
        }
    }
    Ok(())
}

fn validate_second_order(spec: &ProblemSpec, p: &Probe, so: &SecondOrderBundle) -> Result<()> {
    let Dims {
        state: d,
        control: k,
        noise: m,
    } = spec.dims;
    let (x, u, t) = (&p.x[..], &p.u[..], p.t);
    // Row i of ∂x(drift_x) etc.; the first-order bundle is the function being differenced.
    let bx = |xx: &[f64], uu: &[f64]| spec.derivatives(xx, uu, t);
    for i in 0..d {
        let fd_xx = fd_jacobian(d, x, |xx| bx(xx, u).drift_x.row(i).iter().copied().collect());
        check_entry("drift_xx", p, so.drift_xx[i].as_slice(), fd_xx.as_slice())?;
        check_symmetric("drift_xx", &so.drift_xx[i])?;
        // ∂/∂u of row i of drift_x gives (d×k) mixed block.
        let fd_xu = fd_jacobian(d, u, |uu| bx(x, uu).drift_x.row(i).iter().copied().collect());
        check_entry("drift_xu", p, so.drift_xu[i].as_slice(), fd_xu.as_slice())?;
        let fd_uu = fd_jacobian(k, u, |uu| bx(x, uu).drift_u.row(i).iter().copied().collect());
        check_entry("drift_uu", p, so.drift_uu[i].as_slice(), fd_uu.as_slice())?;
    }
    let fd_fxx = fd_jacobian(d, x, |xx| bx(xx, u).cost_x.as_slice().to_vec());
    check_entry("cost_xx", p, so.cost_xx.as_slice(), fd_fxx.as_slice())?;
    check_symmetric("cost_xx", &so.cost_xx)?;
    let fd_fxu = fd_jacobian(d, u, |uu| bx(x, uu).cost_x.as_slice().to_vec());
    check_entry("cost_xu", p, so.cost_xu.as_slice(), fd_fxu.as_slice())?;
    let fd_fuu = fd_jacobian(k, u, |uu| bx(x, uu).cost_u.as_slice().to_vec());
    check_entry("cost_uu", p, so.cost_uu.as_slice(), fd_fuu.as_slice())?;
    for i in 0..d {
        for c in 0..m {
            let idx = i * m + c;
            let fd_xx = fd_jacobian(d, x, |xx| {
                bx(xx, u).diffusion_x[c].row(i).iter().copied().collect()
            });
            check_entry("diffusion_xx", p, so.diffusion_xx[idx].as_slice(), fd_xx.as_slice())?;
            check_symmetric("diffusion_xx", &so.diffusion_xx[idx])?;
            let fd_xu = fd_jacobian(d, u, |uu| {
                bx(x, uu).diffusion_x[c].row(i).iter().copied().collect()
            });
            check_entry("diffusion_xu", p, so.diffusion_xu[idx].as_slice(), fd_xu.as_slice())?;
            let fd_uu = fd_jacobian(k, u, |uu| {
                bx(x, uu).diffusion_u[c].row(i).iter().copied().collect()
            });
            check_entry("diffusion_uu", p, so.diffusion_uu[idx].as_slice(), fd_uu.as_slice())?;
        }
    }
    Ok(())
}

/// `σ` must not vary with `(x, u)`: 8 random pairs per probed time give identical matrices.
pub fn probe_time_only(spec: &ProblemSpec, seed: u64) -> Result<()> {
    let ps = probes(spec, 8 * 4, seed ^ 0x71);
    for group in ps.chunks(8) {
        let t = group[0].t;
        let reference = spec.diffusion(&group[0].x, &group[0].u, t);
        for p in &group[1..] {
            if spec.diffusion(&p.x, &p.u, t) != reference {
                return Err(Error::validation(
                    "diffusion_time_only",
                    format!("diffusion varies with (x, u) at t={t}"),
                ));
            }
        }
    }
    Ok(())
}

/// Drift affine in `u` (probed at `u` and `2u`) and running cost `f(x,0,t) + ½‖u‖²`.
pub fn probe_affine_quadratic(spec: &ProblemSpec, seed: u64) -> Result<()> {
    let zero = vec![0.0; spec.dims.control];
    for p in probes(spec, 16, seed ^ 0xAF) {
        let u2: Vec<f64> = p.u.iter().map(|v| 2.0 * v).collect();
        let b0 = spec.drift(&p.x, &zero, p.t);
        let b1 = spec.drift(&p.x, &p.u, p.t) - &b0;
        let b2 = spec.drift(&p.x, &u2, p.t) - &b0;
        let scale = b2.amax().max(1.0);
        if (b2 - 2.0 * b1).amax() > 1e-12 * scale {
            return Err(Error::validation(
                "control_affine_quadratic",
                format!("drift is not affine in u at probe {p}"),
            ));
        }
        let f0 = spec.running_cost(&p.x, &zero, p.t);
        let f1 = spec.running_cost(&p.x, &p.u, p.t);
        let half_sq = 0.5 * p.u.iter().map(|v| v * v).sum::<f64>();
        if ((f1 - f0) - half_sq).abs() > 1e-12 * f1.abs().max(1.0) {
            return Err(Error::validation(
                "control_affine_quadratic",
                format!("running cost is not f(x,t) + ½‖u‖² at probe {p}"),
            ));
        }
    }
    Ok(())
}

fn validate_problem(spec: &ProblemSpec) -> Result<()> {
    if spec.flags.diffusion_time_only {
        probe_time_only(spec, VALIDATION_SEED)?;
    }
    if spec.flags.control_affine_quadratic {
        probe_affine_quadratic(spec, VALIDATION_SEED)?;
    }
    validate_derivatives(spec, VALIDATION_PROBES, VALIDATION_SEED)
}

/// Decorator that negates one first-order derivative entry. It exists to
/// exercise the validator end to end.
pub struct SignFlip {
    pub inner: Arc<dyn Dynamics>,
    pub entry: BundleEntry,
}

impl Dynamics for SignFlip {
    fn drift(&self, x: &[f64], u: &[f64], t: f64) -> DVector<f64> {
        self.inner.drift(x, u, t)
    }
    fn diffusion(&self, x: &[f64], u: &[f64], t: f64) -> DMatrix<f64> {
        self.inner.diffusion(x, u, t)
    }
    fn running_cost(&self, x: &[f64], u: &[f64], t: f64) -> f64 {
        self.inner.running_cost(x, u, t)
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.inner.terminal_cost(x)
    }
    fn terminal_grad(&self, x: &[f64]) -> DVector<f64> {
        let g = self.inner.terminal_grad(x);
        if self.entry == BundleEntry::TerminalGrad {
            -g
        } else {
            g
        }
    }
    fn terminal_hess(&self, x: &[f64]) -> DMatrix<f64> {
        let h = self.inner.terminal_hess(x);
        if self.entry == BundleEntry::TerminalHess {
            -h
        } else {
            h
        }
    }
    fn derivatives(&self, x: &[f64], u: &[f64], t: f64) -> DerivativeBundle {
        let mut db = self.inner.derivatives(x, u, t);
        match self.entry {
            BundleEntry::DriftX => db.drift_x = -db.drift_x,
            BundleEntry::DriftU => db.drift_u = -db.drift_u,
            BundleEntry::CostX => db.cost_x = -db.cost_x,
            BundleEntry::CostU => db.cost_u = -db.cost_u,
            BundleEntry::DiffusionX => db.diffusion_x.iter_mut().for_each(|m| *m = -m.clone()),
            BundleEntry::DiffusionU => db.diffusion_u.iter_mut().for_each(|m| *m = -m.clone()),
            BundleEntry::TerminalGrad | BundleEntry::TerminalHess => {}
        }
        db
    }
    fn second_order(&self, _x: &[f64], _u: &[f64], _t: f64) -> Option<SecondOrderBundle> {
        // The flipped first-order entries would make the inner second-order
        // bundle inconsistent, so it is withheld.
        None
    }
    fn sample_initial(&self, rng: &mut SeededRng) -> DVector<f64> {
        self.inner.sample_initial(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_lq() -> ProblemSpec {
        scalar_lq(0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn lq_drift_and_cost_spot_values() {
        let p = unit_lq();
        assert_eq!(p.drift(&[2.0], &[3.0], 0.5)[0], 3.0);
        assert_eq!(p.running_cost(&[5.0], &[2.0], 0.0), 2.0);
        assert!(p.flags().diffusion_time_only && p.flags().control_affine_quadratic);
    }

    #[test]
    fn lq_drift_jacobian_is_a() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let data = LqData {
            a: a.clone(),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            sigma: DMatrix::identity(2, 2) * 0.3,
            q_run: DMatrix::identity(2, 2),
            q_term: DMatrix::identity(2, 2),
            x0_mean: DVector::zeros(2),
            x0_cov: DMatrix::identity(2, 2),
        };
        let p = make_lq_problem(data, 1.0).unwrap();
        for x in [[0.3, -1.0], [2.0, 5.0]] {
            assert_eq!(p.derivatives(&x, &[0.7], 0.1).drift_x, a);
        }
    }

    #[test]
    fn lq_rejects_non_symmetric_cost() {
        let data = LqData {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::identity(2, 2),
            sigma: DMatrix::identity(2, 2),
            q_run: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            q_term: DMatrix::identity(2, 2),
            x0_mean: DVector::zeros(2),
            x0_cov: DMatrix::identity(2, 2),
        };
        match make_lq_problem(data, 1.0) {
            Err(Error::Validation { entry, .. }) => assert_eq!(entry, "Q_run"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn ou_tilt_basics() {
        let p = make_ou_tilt_problem(1.5, 0.0, 5.0).unwrap();
        assert_eq!(p.drift(&[1.0], &[0.0], 2.0)[0], -1.5);
        assert_eq!(p.terminal_cost(&[3.0]), 0.0);
        assert!(make_ou_tilt_problem(0.0, 1.0, 1.0).is_err());
        assert!(make_ou_tilt_problem(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn scalar_geometric_flags_and_values() {
        let p = scalar_geometric(ScalarGeometric::default(), 1.0).unwrap();
        assert!(!p.flags().diffusion_time_only);
        assert!(!p.flags().control_affine_quadratic);
        for u in [-1.0, 0.0, 2.5] {
            assert!((p.diffusion(&[2.0], &[u], 0.3)[(0, 0)] - 0.4).abs() < 1e-15);
            assert!((p.derivatives(&[2.0], &[u], 0.3).diffusion_x[0][(0, 0)] - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn validator_names_flipped_entry() {
        let p = scalar_geometric(ScalarGeometric::default(), 1.0).unwrap();
        let flipped = SignFlip {
            inner: p.model().clone(),
            entry: BundleEntry::DriftX,
        };
        match p.with_model(Arc::new(flipped)) {
            Err(Error::Validation { entry, detail }) => {
                assert_eq!(entry, "drift_x");
                assert!(detail.contains("probe"));
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn builtins_pass_validation_at_32_probes() {
        let lq = unit_lq();
        let ou = make_ou_tilt_problem(1.0, 1.0, 5.0).unwrap();
        let geo = scalar_geometric(
            ScalarGeometric {
                coupling: 0.7,
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        for p in [lq, ou, geo] {
            validate_derivatives(&p, 32, 99).unwrap();
        }
    }

    #[test]
    fn lq_affine_probe_is_exact() {
        // The running cost is assembled so that f(x,u) - f(x,0) reproduces ½‖u‖²
        // up to one rounding; check it against a strict tolerance at many points.
        let p = unit_lq();
        probe_affine_quadratic(&p, 1).unwrap();
        probe_affine_quadratic(&p, 2).unwrap();
    }
}
