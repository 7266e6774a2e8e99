//! Training loop: sample a batch under the frozen control, solve adjoints,
//! follow the loss gradient.

use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    solve_first_order_adjoint, solve_lean_adjoint, solve_second_order_adjoint, AdjointPath,
    MatrixAdjointPath,
};
use crate::control::ControlModel;
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::hamiltonians::{loss, pathwise_cost, AdjointInputs, LossReport};
use crate::parallel::{chunks, map_indexed, mean_and_se};
use crate::problem::ProblemSpec;
use crate::rng::derive_seed;
use crate::simulate::{simulate_batch, simulate_path, TimeGrid, Trajectory};
use crate::table::Table;

/// Losses beyond this magnitude abort training.
pub const LOSS_ABORT: f64 = 1e6;
const MSA_COND_WARN: f64 = 1e10;
const MSA_CHUNK: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    LeanAm,
    Bam,
    QuadraticAm,
}

impl LossChoice {
    pub fn name(self) -> &'static str {
        match self {
            LossChoice::LeanAm => "lean_am",
            LossChoice::Bam => "bam",
            LossChoice::QuadraticAm => "quadratic_am",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub n_iters: usize,
    pub paths_per_iter: u64,
    pub step_size: f64,
    /// Euler steps on `[0, T]`.
    pub n_steps: usize,
    pub master_seed: u64,
    pub resample_noise_each_iter: bool,
    pub trust_region_radius: Option<f64>,
    pub loss: LossChoice,
    /// Replace the gradient step by the exact least-squares fit of the quadratic target.
    pub msa_exact: bool,
    pub momentum: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_iters: 100,
            paths_per_iter: 1024,
            step_size: 0.1,
            n_steps: 50,
            master_seed: 0,
            resample_noise_each_iter: true,
            trust_region_radius: None,
            loss: LossChoice::LeanAm,
            msa_exact: false,
            momentum: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::invalid("n_iters", "must be at least 1"));
        }
        if self.paths_per_iter == 0 {
            return Err(Error::invalid("paths_per_iter", "must be at least 1"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if let Some(r) = self.trust_region_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::invalid("trust_region_radius", "must be positive"));
            }
        }
        if self.msa_exact && self.loss != LossChoice::QuadraticAm {
            return Err(Error::invalid("msa_exact", "requires loss = quadratic_am"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean pathwise cost of the iteration's batch under the frozen control.
    pub objective: f64,
    pub objective_se: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingHistory {
    pub records: Vec<IterationRecord>,
    pub final_control: ControlModel,
    /// Iteration and reason, when training stopped early.
    pub aborted: Option<(usize, String)>,
}

impl TrainingHistory {
    /// Columns `iter,loss,grad_norm,objective,objective_se,step_norm`.
    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "iter",
            "loss",
            "grad_norm",
            "objective",
            "objective_se",
            "step_norm",
        ]);
        for r in &self.records {
            t.rows.push(vec![
                r.iter.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.grad_norm),
                fmt_f64(r.objective),
                fmt_f64(r.objective_se),
                fmt_f64(r.step_norm),
            ]);
        }
        t
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.table().save(path)
    }
}

/// Adjoints matching one batch, in batch order.
#[derive(Debug, Clone)]
pub struct BatchAdjoints {
    pub first: Vec<AdjointPath>,
    pub second: Option<Vec<MatrixAdjointPath>>,
}

pub struct Trainer<'a> {
    problem: &'a ProblemSpec,
    grid: TimeGrid,
    config: TrainingConfig,
    control: ControlModel,
    velocity: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(problem: &'a ProblemSpec, control: ControlModel, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let dims = problem.dims();
        if control.state_dim() != dims.state {
            return Err(Error::Dimension {
                context: "control state_dim",
                expected: dims.state,
                got: control.state_dim(),
            });
        }
        if control.control_dim() != dims.control {
            return Err(Error::Dimension {
                context: "control control_dim",
                expected: dims.control,
                got: control.control_dim(),
            });
        }
        if (control.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
            return Err(Error::invalid("control", "horizon differs from the problem horizon"));
        }
        if config.loss == LossChoice::QuadraticAm {
            let f = problem.flags();
            if !(f.control_affine_quadratic && f.diffusion_time_only) {
                return Err(Error::Unsupported {
                    operation: "quadratic_am",
                    reason: "requires a control-affine quadratic problem with σ = σ(t)".into(),
                });
            }
        }
        if config.msa_exact && !control.is_linear_in_theta() {
            return Err(Error::Unsupported {
                operation: "msa_exact",
                reason: "control family is not linear in θ".into(),
            });
        }
        let grid = TimeGrid::new(config.n_steps, problem.horizon())?;
        let velocity = vec![0.0; control.n_params()];
        Ok(Self {
            problem,
            grid,
            config,
            control,
            velocity,
        })
    }

    pub fn control(&self) -> &ControlModel {
        &self.control
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn batch_seed(&self, iter: usize) -> u64 {
        if self.config.resample_noise_each_iter {
            derive_seed(self.config.master_seed, iter as u64)
        } else {
            self.config.master_seed
        }
    }

    /// Batch under the current (frozen) control.
    pub fn sample(&self, iter: usize) -> Result<Vec<Trajectory>> {
        let seed = self.batch_seed(iter);
        simulate_batch(
            self.problem,
            &self.control,
            &self.grid,
            seed,
            self.config.paths_per_iter,
            seed,
        )
    }

    pub fn adjoints(&self, batch: &[Trajectory]) -> Result<BatchAdjoints> {
        let idx = 0..batch.len() as u64;
        match self.config.loss {
            LossChoice::LeanAm | LossChoice::QuadraticAm => Ok(BatchAdjoints {
                first: map_indexed(idx, |i| solve_lean_adjoint(self.problem, &batch[i as usize]))?,
                second: None,
            }),
            LossChoice::Bam => {
                let pairs = map_indexed(idx, |i| {
                    let tr = &batch[i as usize];
                    let first = solve_first_order_adjoint(self.problem, &self.control, tr, None)?;
                    let second =
                        solve_second_order_adjoint(self.problem, &self.control, tr, &first)?;
                    Ok((first, second))
                })?;
                let (first, second) = pairs.into_iter().unzip();
                Ok(BatchAdjoints {
                    first,
                    second: Some(second),
                })
            }
        }
    }

    pub fn loss_report(&self, batch: &[Trajectory], adjoints: &BatchAdjoints) -> Result<LossReport> {
        let inputs = match (self.config.loss, &adjoints.second) {
            (LossChoice::LeanAm, _) => AdjointInputs::Lean(&adjoints.first),
            (LossChoice::QuadraticAm, _) => AdjointInputs::Quadratic(&adjoints.first),
            (LossChoice::Bam, Some(second)) => AdjointInputs::Bam {
                first: &adjoints.first,
                second,
            },
            (LossChoice::Bam, None) => {
                return Err(Error::invalid("adjoints", "bam needs second-order adjoints"))
            }
        };
        loss(self.problem, &self.control, batch, inputs)
    }

    /// One iteration; the control is updated in place.
    pub fn step(&mut self, iter: usize) -> Result<IterationRecord> {
        let abort = |reason: String| Error::TrainingAborted { iter, reason };
        let batch = self.sample(iter).map_err(|e| abort(e.to_string()))?;
        let costs: Vec<f64> = batch.iter().map(|tr| pathwise_cost(self.problem, tr)).collect();
        let (objective, objective_se) = mean_and_se(&costs);
        let adjoints = self.adjoints(&batch).map_err(|e| abort(e.to_string()))?;
        let report = self
            .loss_report(&batch, &adjoints)
            .map_err(|e| abort(e.to_string()))?;
        if !report.loss_value.is_finite() || report.loss_value.abs() > LOSS_ABORT {
            return Err(abort(format!("loss {} out of range", report.loss_value)));
        }
        let old = self.control.theta().to_vec();
        let mut step: Vec<f64> = if self.config.msa_exact {
            let fitted = msa_exact_step(self.problem, &self.control, &batch, &adjoints.first)?;
            fitted.theta().iter().zip(&old).map(|(n, o)| n - o).collect()
        } else {
            let mu = self.config.momentum;
            for (v, g) in self.velocity.iter_mut().zip(&report.grad_theta) {
                *v = mu * *v + g;
            }
            self.velocity.iter().map(|v| -self.config.step_size * v).collect()
        };
        let mut step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        if let Some(r) = self.config.trust_region_radius {
            if step_norm > r {
                let scale = r / step_norm;
                step.iter_mut().for_each(|s| *s *= scale);
                step_norm = r;
            }
        }
        let theta: Vec<f64> = old.iter().zip(&step).map(|(o, s)| o + s).collect();
        self.control
            .set_theta(theta)
            .map_err(|e| abort(e.to_string()))?;
        Ok(IterationRecord {
            iter,
            loss: report.loss_value,
            grad_norm: report.grad_norm(),
            objective,
            objective_se,
            step_norm,
        })
    }

    /// Runs all iterations, stopping at the first failure.
    pub fn run(mut self) -> TrainingHistory {
        let mut records = Vec::with_capacity(self.config.n_iters);
        let mut aborted = None;
        for iter in 0..self.config.n_iters {
            match self.step(iter) {
                Ok(rec) => {
                    if iter % 10 == 0 || iter + 1 == self.config.n_iters {
                        info!(
                            "iter {iter}: loss {:.6e} grad {:.3e} objective {:.6} ± {:.2e}",
                            rec.loss, rec.grad_norm, rec.objective, rec.objective_se
                        );
                    }
                    records.push(rec);
                }
                Err(e) => {
                    warn!("training aborted at iteration {iter}: {e}");
                    let reason = match e {
                        Error::TrainingAborted { reason, .. } => reason,
                        other => other.to_string(),
                    };
                    aborted = Some((iter, reason));
                    break;
                }
            }
        }
        TrainingHistory {
            records,
            final_control: self.control,
            aborted,
        }
    }
}

/// Trains `control` and fails with [`Error::TrainingAborted`] on early termination.
pub fn train(
    problem: &ProblemSpec,
    control: ControlModel,
    config: TrainingConfig,
) -> Result<TrainingHistory> {
    let history = Trainer::new(problem, control, config)?.run();
    match &history.aborted {
        Some((iter, reason)) => Err(Error::TrainingAborted {
            iter: *iter,
            reason: reason.clone(),
        }),
        None => Ok(history),
    }
}

/// Exact minimizer of the batch quadratic AM loss for controls linear in `θ`.
///
/// Solves the normal equations `(Σ dt ΦᵀΦ) θ = Σ dt Φᵀ(-∇₂bᵀã)` by SVD; a
/// rank-deficient or ill-conditioned system falls back to the pseudoinverse
/// with a warning.
pub fn msa_exact_step(
    problem: &ProblemSpec,
    control: &ControlModel,
    batch: &[Trajectory],
    lean: &[AdjointPath],
) -> Result<ControlModel> {
    if !control.is_linear_in_theta() {
        return Err(Error::Unsupported {
            operation: "msa_exact_step",
            reason: "control family is not linear in θ".into(),
        });
    }
    let f = problem.flags();
    if !(f.control_affine_quadratic && f.diffusion_time_only) {
        return Err(Error::Unsupported {
            operation: "msa_exact_step",
            reason: "requires a control-affine quadratic problem with σ = σ(t)".into(),
        });
    }
    if batch.is_empty() || batch.len() != lean.len() {
        return Err(Error::invalid("adjoints", "one adjoint per trajectory is required"));
    }
    let n = control.n_params();
    let n_paths = batch.len() as u64;
    let n_chunks = n_paths.div_ceil(MSA_CHUNK);
    let parts = map_indexed(0..n_chunks, |c| {
        let mut g = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for p in (c * MSA_CHUNK) as usize..((c + 1) * MSA_CHUNK).min(n_paths) as usize {
            let (tr, a) = (&batch[p], &lean[p]);
            if a.path_index != tr.path_index() || a.n_nodes() != tr.n_steps() + 1 {
                return Err(Error::invalid("adjoints", "adjoint does not match its trajectory"));
            }
            let dt = tr.grid.dt();
            for i in 0..tr.n_steps() {
                let (x, t) = (tr.state(i), tr.grid.node(i));
                let u = control.eval(x, t)?;
                let db = problem.derivatives(x, u.as_slice(), t);
                let y = -db.drift_u.tr_mul(&a.vector(i + 1));
                let jac = control.param_jacobian(x, t)?;
                let w = jac.block.ncols();
                let o = jac.offset;
                let mut gv = g.view_mut((o, o), (w, w));
                gv += jac.block.tr_mul(&jac.block) * dt;
                let mut rv = rhs.rows_mut(o, w);
                rv += jac.block.tr_mul(&y) * dt;
            }
        }
        Ok((g, rhs))
    })?;
    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (gp, rp) in parts {
        g += gp;
        rhs += rp;
    }
    let scale = 1.0 / n_paths as f64;
    g *= scale;
    rhs *= scale;
    let svd = g.svd(true, true);
    let s_max = svd.singular_values.max();
    let tol = s_max * n as f64 * f64::EPSILON;
    let s_min = svd.singular_values.min();
    if s_min <= tol {
        warn!("msa_exact_step: normal equations are rank deficient; using the pseudoinverse");
    } else if s_max / s_min > MSA_COND_WARN {
        warn!(
            "msa_exact_step: normal equations are ill-conditioned (cond {:.3e})",
            s_max / s_min
        );
    }
    let theta = svd
        .solve(&rhs, tol)
        .map_err(|e| Error::invalid("normal equations", e))?;
    let mut out = control.clone();
    out.set_theta(theta.iter().copied().collect())?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub objective: f64,
    pub objective_se: f64,
    /// First state component at `T`.
    pub terminal_mean: f64,
    pub terminal_mean_se: f64,
    pub terminal_var: f64,
    pub n_paths: u64,
}

/// Fresh-sample metrics of a control: objective and terminal moments.
pub fn evaluate_checkpoint(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    seed: u64,
    n_paths: u64,
) -> Result<Checkpoint> {
    if n_paths < 2 {
        return Err(Error::invalid("n_paths", "need at least 2 paths"));
    }
    let mut costs = Vec::with_capacity(n_paths as usize);
    let mut terminal = Vec::with_capacity(n_paths as usize);
    for range in chunks(n_paths) {
        let part = map_indexed(range, |idx| {
            let tr = simulate_path(problem, control, grid, seed, seed, idx)?;
            Ok((pathwise_cost(problem, &tr), tr.terminal()[0]))
        })?;
        for (c, x) in part {
            costs.push(c);
            terminal.push(x);
        }
    }
    let (objective, objective_se) = mean_and_se(&costs);
    let (terminal_mean, terminal_mean_se) = mean_and_se(&terminal);
    let terminal_var = terminal
        .iter()
        .map(|x| (x - terminal_mean).powi(2))
        .sum::<f64>()
        / (n_paths - 1) as f64;
    Ok(Checkpoint {
        objective,
        objective_se,
        terminal_mean,
        terminal_mean_se,
        terminal_var,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::quadratic_am_loss;
    use crate::problem::{scalar_geometric, scalar_lq};

    fn lq() -> ProblemSpec {
        scalar_lq(0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let c: TrainingConfig = serde_json::from_str(r#"{"n_iters": 3, "loss": "bam"}"#).unwrap();
        assert_eq!(c.n_iters, 3);
        assert_eq!(c.loss, LossChoice::Bam);
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"n_iter": 3}"#).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainingConfig { n_iters: 0, ..Default::default() },
            TrainingConfig { step_size: -1.0, ..Default::default() },
            TrainingConfig { momentum: 1.0, ..Default::default() },
            TrainingConfig { trust_region_radius: Some(0.0), ..Default::default() },
            TrainingConfig { msa_exact: true, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(TrainingConfig::default().validate().is_ok());
    }

    #[test]
    fn quadratic_rejected_on_state_dependent_noise() {
        let p = scalar_geometric(Default::default(), 1.0).unwrap();
        let c = ControlModel::linear_feedback(1, 1, 10, 1.0).unwrap();
        let cfg = TrainingConfig {
            loss: LossChoice::QuadraticAm,
            n_steps: 10,
            ..Default::default()
        };
        assert!(matches!(Trainer::new(&p, c, cfg), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn msa_step_zeroes_quadratic_gradient() {
        let p = lq();
        let c = ControlModel::linear_feedback(1, 1, 10, 1.0).unwrap();
        let g = TimeGrid::new(10, 1.0).unwrap();
        let batch = simulate_batch(&p, &c, &g, 3, 64, 3).unwrap();
        let lean: Vec<_> = batch.iter().map(|t| solve_lean_adjoint(&p, t).unwrap()).collect();
        let fitted = msa_exact_step(&p, &c, &batch, &lean).unwrap();
        let rep = quadratic_am_loss(&p, &fitted, &batch, &lean).unwrap();
        assert!(rep.grad_norm() < 1e-10, "{}", rep.grad_norm());
    }

    #[test]
    fn msa_step_handles_rank_deficiency() {
        // X₀ = 0 and σ = 0 make every state zero, so feedback gains are unidentified.
        let p = scalar_lq(0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let c = ControlModel::linear_feedback(1, 1, 5, 1.0).unwrap();
        let g = TimeGrid::new(5, 1.0).unwrap();
        let batch = simulate_batch(&p, &c, &g, 3, 8, 3).unwrap();
        let lean: Vec<_> = batch.iter().map(|t| solve_lean_adjoint(&p, t).unwrap()).collect();
        let fitted = msa_exact_step(&p, &c, &batch, &lean).unwrap();
        assert!(fitted.theta().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trainer_descends_and_records() {
        let p = lq();
        let c = ControlModel::linear_feedback(1, 1, 20, 1.0).unwrap();
        let cfg = TrainingConfig {
            n_iters: 30,
            paths_per_iter: 512,
            step_size: 10.0,
            n_steps: 20,
            master_seed: 9,
            ..Default::default()
        };
        let hist = train(&p, c, cfg).unwrap();
        assert_eq!(hist.records.len(), 30);
        assert!(hist.records.iter().all(|r| r.loss.is_finite() && r.step_norm.is_finite()));
        let first = hist.records[0].objective;
        let last = hist.records[29].objective;
        assert!(last < first, "{first} -> {last}");
        let table = hist.table().render();
        assert!(table.starts_with("iter,loss,grad_norm,objective,objective_se,step_norm\n"));
        assert_eq!(table.lines().count(), 31);
    }

    #[test]
    fn trust_region_caps_steps() {
        let p = lq();
        let c = ControlModel::linear_feedback(1, 1, 10, 1.0).unwrap();
        let cfg = TrainingConfig {
            n_iters: 5,
            paths_per_iter: 64,
            step_size: 1e3,
            n_steps: 10,
            trust_region_radius: Some(0.01),
            ..Default::default()
        };
        let hist = train(&p, c, cfg).unwrap();
        assert!(hist.records.iter().all(|r| r.step_norm <= 0.01 + 1e-15));
    }

    #[test]
    fn divergence_aborts_with_iteration() {
        let p = lq();
        let c = ControlModel::linear_feedback(1, 1, 10, 1.0).unwrap();
        let cfg = TrainingConfig {
            n_iters: 50,
            paths_per_iter: 64,
            step_size: 1e4,
            n_steps: 10,
            ..Default::default()
        };
        let hist = Trainer::new(&p, c.clone(), cfg.clone()).unwrap().run();
        let (iter, _) = hist.aborted.clone().expect("should abort");
        assert_eq!(hist.records.len(), iter);
        assert!(matches!(train(&p, c, cfg), Err(Error::TrainingAborted { .. })));
    }

    #[test]
    fn fixed_noise_reuses_seed() {
        let p = lq();
        let c = ControlModel::linear_feedback(1, 1, 10, 1.0).unwrap();
        let cfg = TrainingConfig {
            resample_noise_each_iter: false,
            master_seed: 5,
            n_steps: 10,
            ..Default::default()
        };
        let t = Trainer::new(&p, c, cfg).unwrap();
        assert_eq!(t.batch_seed(0), t.batch_seed(7));
    }

    #[test]
    fn checkpoint_of_zero_control_on_static_problem() {
        // σ = 0, b = u, u = 0: X_T = X₀ ~ N(0, 1) and J = ½X₀².
        let p = scalar_lq(0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let c = ControlModel::zero(1, 1, 1.0);
        let g = TimeGrid::new(10, 1.0).unwrap();
        let ck = evaluate_checkpoint(&p, &c, &g, 1, 20_000).unwrap();
        assert!((ck.objective - 0.5).abs() < 4.0 * ck.objective_se);
        assert!((ck.terminal_var - 1.0).abs() < 0.05);
        assert!(ck.terminal_mean.abs() < 4.0 * ck.terminal_mean_se);
    }
}
