//! Parametric Markov controls `u_θ(x, t)` with exact Jacobians.
//!
//! Three families share one flat parameter vector `θ`:
//!
//! * `linear_feedback`: `u = K(t_i) x + k(t_i)` with gains held constant over
//!   each grid interval,
//! * `feature_linear`: `u_j = Σ_l θ_{j,l} φ_l(x, t)` over a fixed feature list,
//! * `one_hidden_layer`: `u = W₂ tanh(W₁ z + b₁) + b₂` with `z = (x, t, T - t)`.
//!
//! The parameter Jacobian of `linear_feedback` only touches the block of the
//! active interval, so [`ParamJacobian`] stores a dense column block plus an
//! offset instead of a full `k×|θ|` matrix.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, standard_normal, Domain};

pub const MAX_HIDDEN_WIDTH: usize = 64;

/// Time factor of a feature, written in terms of elapsed time `t` and time to go `T - t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeBasis {
    /// `t^elapsed · (T - t)^remaining`.
    Monomial { elapsed: u32, remaining: u32 },
    /// `exp(-rate · (T - t))`.
    ExpRemaining { rate: f64 },
}

impl TimeBasis {
    pub const ONE: TimeBasis = TimeBasis::Monomial {
        elapsed: 0,
        remaining: 0,
    };

    fn eval(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            TimeBasis::Monomial { elapsed, remaining } => {
                t.powi(elapsed as i32) * (horizon - t).powi(remaining as i32)
            }
            TimeBasis::ExpRemaining { rate } => (-rate * (horizon - t)).exp(),
        }
    }
}

/// `φ(x, t) = x_state · time(t)`, or just `time(t)` when `state` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feature {
    #[serde(default)]
    pub state: Option<usize>,
    pub time: TimeBasis,
}

impl Feature {
    pub fn constant() -> Self {
        Self {
            state: None,
            time: TimeBasis::ONE,
        }
    }

    pub fn state(index: usize, time: TimeBasis) -> Self {
        Self {
            state: Some(index),
            time,
        }
    }

    fn eval(&self, x: &[f64], t: f64, horizon: f64) -> f64 {
        let tf = self.time.eval(t, horizon);
        match self.state {
            Some(j) => x[j] * tf,
            None => tf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlFamily {
    LinearFeedback {
        state_dim: usize,
        control_dim: usize,
        n_steps: usize,
        horizon: f64,
    },
    FeatureLinear {
        state_dim: usize,
        control_dim: usize,
        horizon: f64,
        features: Vec<Feature>,
    },
    OneHiddenLayer {
        state_dim: usize,
        control_dim: usize,
        horizon: f64,
        width: usize,
    },
}

impl ControlFamily {
    pub fn tag(&self) -> &'static str {
        match self {
            ControlFamily::LinearFeedback { .. } => "linear_feedback",
            ControlFamily::FeatureLinear { .. } => "feature_linear",
            ControlFamily::OneHiddenLayer { .. } => "one_hidden_layer",
        }
    }

    pub fn state_dim(&self) -> usize {
        match *self {
            ControlFamily::LinearFeedback { state_dim, .. }
            | ControlFamily::FeatureLinear { state_dim, .. }
            | ControlFamily::OneHiddenLayer { state_dim, .. } => state_dim,
        }
    }

    pub fn control_dim(&self) -> usize {
        match *self {
            ControlFamily::LinearFeedback { control_dim, .. }
            | ControlFamily::FeatureLinear { control_dim, .. }
            | ControlFamily::OneHiddenLayer { control_dim, .. } => control_dim,
        }
    }

    pub fn horizon(&self) -> f64 {
        match *self {
            ControlFamily::LinearFeedback { horizon, .. }
            | ControlFamily::FeatureLinear { horizon, .. }
            | ControlFamily::OneHiddenLayer { horizon, .. } => horizon,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ControlFamily::LinearFeedback {
                state_dim,
                control_dim,
                n_steps,
                ..
            } => n_steps * control_dim * (state_dim + 1),
            ControlFamily::FeatureLinear {
                control_dim,
                features,
                ..
            } => control_dim * features.len(),
            ControlFamily::OneHiddenLayer {
                state_dim,
                control_dim,
                width,
                ..
            } => width * (state_dim + 2) + width + control_dim * width + control_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.state_dim() == 0 || self.control_dim() == 0 {
            return Err(Error::validation("control", "dimensions must be positive"));
        }
        if !(self.horizon() > 0.0 && self.horizon().is_finite()) {
            return Err(Error::validation("control", "horizon must be positive"));
        }
        match self {
            ControlFamily::LinearFeedback { n_steps, .. } if *n_steps == 0 => {
                Err(Error::validation("linear_feedback", "n_steps must be positive"))
            }
            ControlFamily::FeatureLinear {
                features,
                state_dim,
                ..
            } => {
                for f in features {
                    if let Some(j) = f.state {
                        if j >= *state_dim {
                            return Err(Error::validation(
                                "feature_linear",
                                format!("feature refers to state {j} but d = {state_dim}"),
                            ));
                        }
                    }
                    if let TimeBasis::ExpRemaining { rate } = f.time {
                        if !rate.is_finite() {
                            return Err(Error::validation("feature_linear", "rate must be finite"));
                        }
                    }
                }
                Ok(())
            }
            ControlFamily::OneHiddenLayer { width, .. }
                if *width == 0 || *width > MAX_HIDDEN_WIDTH =>
            {
                Err(Error::validation(
                    "one_hidden_layer",
                    format!("width must lie in 1..={MAX_HIDDEN_WIDTH}"),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// `∂u/∂θ` restricted to the contiguous column range where it can be nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamJacobian {
    pub offset: usize,
    /// `k × width` block for columns `offset..offset + width`.
    pub block: DMatrix<f64>,
}

impl ParamJacobian {
    pub fn to_dense(&self, n_params: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.block.nrows(), n_params);
        out.columns_mut(self.offset, self.block.ncols())
            .copy_from(&self.block);
        out
    }

    /// `grad += scale · (∂u/∂θ)ᵀ v`.
    pub fn accumulate_transpose(&self, v: &DVector<f64>, scale: f64, grad: &mut [f64]) {
        let block = &self.block;
        for c in 0..block.ncols() {
            let mut s = 0.0;
            for r in 0..block.nrows() {
                s += block[(r, c)] * v[r];
            }
            grad[self.offset + c] += scale * s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlModel {
    pub family: ControlFamily,
    pub theta: Vec<f64>,
}

fn sech2(s: f64) -> f64 {
    1.0 - s * s
}

impl ControlModel {
    /// Zero-initialised control of the given family.
    pub fn new(family: ControlFamily) -> Result<Self> {
        family.validate()?;
        let n = family.n_params();
        Ok(Self {
            family,
            theta: vec![0.0; n],
        })
    }

    pub fn with_theta(family: ControlFamily, theta: Vec<f64>) -> Result<Self> {
        let mut c = Self::new(family)?;
        c.set_theta(theta)?;
        Ok(c)
    }

    /// The uncontrolled process: a feature-linear control with no features.
    pub fn zero(state_dim: usize, control_dim: usize, horizon: f64) -> Self {
        Self {
            family: ControlFamily::FeatureLinear {
                state_dim,
                control_dim,
                horizon,
                features: Vec::new(),
            },
            theta: Vec::new(),
        }
    }

    pub fn linear_feedback(
        state_dim: usize,
        control_dim: usize,
        n_steps: usize,
        horizon: f64,
    ) -> Result<Self> {
        Self::new(ControlFamily::LinearFeedback {
            state_dim,
            control_dim,
            n_steps,
            horizon,
        })
    }

    pub fn feature_linear(
        state_dim: usize,
        control_dim: usize,
        horizon: f64,
        features: Vec<Feature>,
    ) -> Result<Self> {
        Self::new(ControlFamily::FeatureLinear {
            state_dim,
            control_dim,
            horizon,
            features,
        })
    }

    pub fn one_hidden_layer(
        state_dim: usize,
        control_dim: usize,
        horizon: f64,
        width: usize,
    ) -> Result<Self> {
        Self::new(ControlFamily::OneHiddenLayer {
            state_dim,
            control_dim,
            horizon,
            width,
        })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }
    pub fn state_dim(&self) -> usize {
        self.family.state_dim()
    }
    pub fn control_dim(&self) -> usize {
        self.family.control_dim()
    }
    pub fn horizon(&self) -> f64 {
        self.family.horizon()
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.family.n_params() {
            return Err(Error::Dimension {
                context: "control parameters",
                expected: self.family.n_params(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("theta", "parameters must be finite"));
        }
        self.theta = theta;
        Ok(())
    }

    /// Families whose output is linear in `θ` (needed by the exact MSA step).
    pub fn is_linear_in_theta(&self) -> bool {
        !matches!(self.family, ControlFamily::OneHiddenLayer { .. })
    }

    /// Random parameters with i.i.d. `N(0, scale²)` entries.
    pub fn randomized(&self, seed: u64, scale: f64) -> Self {
        let mut rng = keyed_rng(seed, Domain::Init, 0);
        let theta = (0..self.n_params())
            .map(|_| scale * standard_normal(&mut rng))
            .collect();
        Self {
            family: self.family.clone(),
            theta,
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let horizon = self.horizon();
        let slack = 1e-12 * horizon.max(1.0);
        if !(t >= -slack && t <= horizon + slack) {
            return Err(Error::TimeOutOfRange { t, horizon });
        }
        Ok(())
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                context: "control input",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Grid interval holding `t` for the piecewise-constant feedback family.
    fn interval(n_steps: usize, horizon: f64, t: f64) -> usize {
        let dt = horizon / n_steps as f64;
        let raw = (t / dt + 1e-7).floor();
        (raw.max(0.0) as usize).min(n_steps - 1)
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        self.check_state(x)?;
        self.check_time(t)?;
        let th = &self.theta;
        Ok(match &self.family {
            &ControlFamily::LinearFeedback {
                state_dim: d,
                control_dim: k,
                n_steps,
                horizon,
            } => {
                let base = Self::interval(n_steps, horizon, t) * k * (d + 1);
                DVector::from_fn(k, |j, _| {
                    let row = &th[base + j * d..base + (j + 1) * d];
                    let gain: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    gain + th[base + k * d + j]
                })
            }
            ControlFamily::FeatureLinear {
                control_dim: k,
                horizon,
                features,
                ..
            } => {
                let phi: Vec<f64> = features.iter().map(|f| f.eval(x, t, *horizon)).collect();
                let l = phi.len();
                DVector::from_fn(*k, |j, _| {
                    th[j * l..(j + 1) * l]
                        .iter()
                        .zip(&phi)
                        .map(|(a, b)| a * b)
                        .sum()
                })
            }
            ControlFamily::OneHiddenLayer { .. } => self.mlp_forward(x, t).output,
        })
    }

    /// `(∂u/∂θ, ∂u/∂x)` at `(x, t)`.
    pub fn jacobians(&self, x: &[f64], t: f64) -> Result<(ParamJacobian, DMatrix<f64>)> {
        Ok((self.param_jacobian(x, t)?, self.state_jacobian(x, t)?))
    }

    pub fn param_jacobian(&self, x: &[f64], t: f64) -> Result<ParamJacobian> {
        self.check_state(x)?;
        self.check_time(t)?;
        Ok(match &self.family {
            &ControlFamily::LinearFeedback {
                state_dim: d,
                control_dim: k,
                n_steps,
                horizon,
            } => {
                let width = k * (d + 1);
                let mut block = DMatrix::zeros(k, width);
                for j in 0..k {
                    for c in 0..d {
                        block[(j, j * d + c)] = x[c];
                    }
                    block[(j, k * d + j)] = 1.0;
                }
                ParamJacobian {
                    offset: Self::interval(n_steps, horizon, t) * width,
                    block,
                }
            }
            ControlFamily::FeatureLinear {
                control_dim: k,
                horizon,
                features,
                ..
            } => {
                let l = features.len();
                let mut block = DMatrix::zeros(*k, k * l);
                for (li, f) in features.iter().enumerate() {
                    let phi = f.eval(x, t, *horizon);
                    for j in 0..*k {
                        block[(j, j * l + li)] = phi;
                    }
                }
                ParamJacobian { offset: 0, block }
            }
            &ControlFamily::OneHiddenLayer {
                state_dim: d,
                control_dim: k,
                width: h,
                ..
            } => {
                let fw = self.mlp_forward(x, t);
                let n_in = d + 2;
                let layout = MlpLayout::new(d, k, h);
                let mut block = DMatrix::zeros(k, self.n_params());
                for j in 0..k {
                    for hh in 0..h {
                        let w2 = self.theta[layout.w2 + j * h + hh];
                        let s = fw.hidden[hh];
                        let back = w2 * sech2(s);
                        for c in 0..n_in {
                            block[(j, layout.w1 + hh * n_in + c)] = back * fw.input[c];
                        }
                        block[(j, layout.b1 + hh)] = back;
                        block[(j, layout.w2 + j * h + hh)] = s;
                    }
                    block[(j, layout.b2 + j)] = 1.0;
                }
                ParamJacobian { offset: 0, block }
            }
        })
    }

    /// `∂u/∂x`, a `k×d` matrix.
    pub fn state_jacobian(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        self.check_time(t)?;
        let th = &self.theta;
        Ok(match &self.family {
            &ControlFamily::LinearFeedback {
                state_dim: d,
                control_dim: k,
                n_steps,
                horizon,
            } => {
                let base = Self::interval(n_steps, horizon, t) * k * (d + 1);
                DMatrix::from_row_slice(k, d, &th[base..base + k * d])
            }
            ControlFamily::FeatureLinear {
                state_dim: d,
                control_dim: k,
                horizon,
                features,
            } => {
                let l = features.len();
                let mut jac = DMatrix::zeros(*k, *d);
                for (li, f) in features.iter().enumerate() {
                    if let Some(c) = f.state {
                        let tf = f.time.eval(t, *horizon);
                        for j in 0..*k {
                            jac[(j, c)] += th[j * l + li] * tf;
                        }
                    }
                }
                jac
            }
            &ControlFamily::OneHiddenLayer {
                state_dim: d,
                control_dim: k,
                width: h,
                ..
            } => {
                let fw = self.mlp_forward(x, t);
                let layout = MlpLayout::new(d, k, h);
                let n_in = d + 2;
                DMatrix::from_fn(k, d, |j, c| {
                    (0..h)
                        .map(|hh| {
                            th[layout.w2 + j * h + hh]
                                * sech2(fw.hidden[hh])
                                * th[layout.w1 + hh * n_in + c]
                        })
                        .sum()
                })
            }
        })
    }

    /// `∇²_x u_j` for each output `j` (each `d×d`).
    pub fn state_hessians(&self, x: &[f64], t: f64) -> Result<Vec<DMatrix<f64>>> {
        self.check_state(x)?;
        self.check_time(t)?;
        let d = self.state_dim();
        let k = self.control_dim();
        Ok(match &self.family {
            ControlFamily::LinearFeedback { .. } | ControlFamily::FeatureLinear { .. } => {
                vec![DMatrix::zeros(d, d); k]
            }
            &ControlFamily::OneHiddenLayer { width: h, .. } => {
                let fw = self.mlp_forward(x, t);
                let layout = MlpLayout::new(d, k, h);
                let n_in = d + 2;
                let th = &self.theta;
                (0..k)
                    .map(|j| {
                        DMatrix::from_fn(d, d, |a, b| {
                            (0..h)
                                .map(|hh| {
                                    let s = fw.hidden[hh];
                                    th[layout.w2 + j * h + hh]
                                        * (-2.0 * s * sech2(s))
                                        * th[layout.w1 + hh * n_in + a]
                                        * th[layout.w1 + hh * n_in + b]
                                })
                                .sum()
                        })
                    })
                    .collect()
            }
        })
    }

    fn mlp_forward(&self, x: &[f64], t: f64) -> MlpForward {
        let ControlFamily::OneHiddenLayer {
            state_dim: d,
            control_dim: k,
            horizon,
            width: h,
        } = self.family
        else {
            unreachable!("mlp_forward on a non-network family")
        };
        let layout = MlpLayout::new(d, k, h);
        let n_in = d + 2;
        let mut input = x.to_vec();
        input.push(t);
        input.push(horizon - t);
        let th = &self.theta;
        let hidden: Vec<f64> = (0..h)
            .map(|hh| {
                let w = &th[layout.w1 + hh * n_in..layout.w1 + (hh + 1) * n_in];
                let z: f64 = w.iter().zip(&input).map(|(a, b)| a * b).sum();
                (z + th[layout.b1 + hh]).tanh()
            })
            .collect();
        let output = DVector::from_fn(k, |j, _| {
            let w = &th[layout.w2 + j * h..layout.w2 + (j + 1) * h];
            w.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + th[layout.b2 + j]
        });
        MlpForward {
            input,
            hidden,
            output,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ControlModel = serde_json::from_str(text)?;
        c.family.validate()?;
        if c.theta.len() != c.family.n_params() {
            return Err(Error::Dimension {
                context: "control parameters",
                expected: c.family.n_params(),
                got: c.theta.len(),
            });
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

struct MlpLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl MlpLayout {
    fn new(d: usize, k: usize, h: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + h * (d + 2);
        let w2 = b1 + h;
        let b2 = w2 + k * h;
        Self { w1, b1, w2, b2 }
    }
}

struct MlpForward {
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: DVector<f64>,
}

/// Uniform probe in `[-2, 2]^d × [0, T]` used by tests and the Jacobian check.
pub fn random_probe(seed: u64, index: u64, state_dim: usize, horizon: f64) -> (Vec<f64>, f64) {
    let mut rng = keyed_rng(seed, Domain::Probe, index);
    let x = (0..state_dim)
        .map(|_| rng.random::<f64>() * 4.0 - 2.0)
        .collect();
    (x, rng.random::<f64>() * horizon)
}
