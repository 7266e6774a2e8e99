//! The invariant suite behind `soc-lab check`, one CSV per check.

use soc_lab::adjoint::{
    feynman_kac_lean, fundamental_matrix, solve_first_order_adjoint, solve_lean_adjoint,
    solve_second_order_adjoint,
};
use soc_lab::hamiltonians::{path_losses, AdjointInputs};
use soc_lab::oracle::{
    fd_pathwise_gradient, fd_pathwise_hessian, hjb_residual_1d, hjb_residual_analytic,
    memorylessness_check, smp_representation_check, solve_riccati,
};
use soc_lab::parallel::{chunks, map_indexed, mean_and_se};
use soc_lab::simulate::{simulate_batch, simulate_path};
use soc_lab::table::Table;
use soc_lab::{
    bam_loss, fmt_f64, lean_am_loss, quadratic_am_loss, theta_gradient_via_adjoint, ControlModel,
    ProblemSpec, Result, TimeGrid,
};

use crate::config::{CheckName, CheckOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Reported but not gated.
    Info,
    Skipped,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
            Status::Skipped => "SKIP",
        }
    }
}

pub struct Outcome {
    pub status: Status,
    pub summary: String,
    pub table: Table,
}

pub struct Context<'a> {
    pub problem: &'a ProblemSpec,
    pub control: &'a ControlModel,
    pub grid: TimeGrid,
    pub options: &'a CheckOptions,
    pub seed: u64,
}

fn gate(pass: bool) -> Status {
    if pass {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn skipped(reason: &str) -> Outcome {
    let mut table = Table::new(["status", "reason"]);
    table.rows.push(vec!["skipped".into(), reason.into()]);
    Outcome {
        status: Status::Skipped,
        summary: reason.into(),
        table,
    }
}

fn rel_or_abs(diff: f64, scale: f64) -> f64 {
    if scale > 1e-12 {
        diff / scale
    } else {
        diff
    }
}

pub fn run(name: CheckName, ctx: &Context) -> Result<Outcome> {
    match name {
        CheckName::AdjointFd => adjoint_fd(ctx),
        CheckName::HessianFd => hessian_fd(ctx),
        CheckName::FirstVariation => first_variation(ctx),
        CheckName::Collapse => collapse(ctx),
        CheckName::FeynmanKac => feynman_kac(ctx),
        CheckName::Smp => smp(ctx),
        CheckName::Memorylessness => memoryless(ctx),
        CheckName::Hjb => hjb(ctx),
    }
}

fn adjoint_fd(ctx: &Context) -> Result<Outcome> {
    let d = ctx.problem.dims().state;
    let header = ["path".to_string(), "rel_err".to_string()]
        .into_iter()
        .chain((0..d).map(|j| format!("adjoint_{j}")))
        .chain((0..d).map(|j| format!("fd_{j}")));
    let mut table = Table::new(header);
    let mut worst: f64 = 0.0;
    for idx in 0..ctx.options.fd_paths {
        let tr = simulate_path(ctx.problem, ctx.control, &ctx.grid, ctx.seed, ctx.seed, idx)?;
        let a = solve_first_order_adjoint(ctx.problem, ctx.control, &tr, None)?;
        let fd = fd_pathwise_gradient(
            ctx.problem,
            ctx.control,
            &ctx.grid,
            &tr.noise,
            tr.state(0),
            ctx.options.fd_step,
        )?;
        let a0 = a.vector(0);
        let err = rel_or_abs((&a0 - &fd).norm(), fd.norm());
        worst = worst.max(err);
        let mut row = vec![idx.to_string(), fmt_f64(err)];
        row.extend(a0.iter().map(|v| fmt_f64(*v)));
        row.extend(fd.iter().map(|v| fmt_f64(*v)));
        table.rows.push(row);
    }
    Ok(Outcome {
        status: gate(worst <= 1e-3),
        summary: format!("worst rel err {worst:.3e} (≤ 1e-3)"),
        table,
    })
}

fn hessian_fd(ctx: &Context) -> Result<Outcome> {
    let mut table = Table::new(["path", "rel_err"]);
    let mut worst: f64 = 0.0;
    let x = vec![0.0; ctx.problem.dims().state];
    let u = vec![0.0; ctx.problem.dims().control];
    if ctx.problem.second_order(&x, &u, 0.0).is_none() {
        return Ok(skipped("problem supplies no second-order derivatives"));
    }
    for idx in 0..ctx.options.fd_paths.min(8) {
        let tr = simulate_path(ctx.problem, ctx.control, &ctx.grid, ctx.seed, ctx.seed, idx)?;
        let a = solve_first_order_adjoint(ctx.problem, ctx.control, &tr, None)?;
        let big = solve_second_order_adjoint(ctx.problem, ctx.control, &tr, &a)?;
        let fd = fd_pathwise_hessian(
            ctx.problem,
            ctx.control,
            &ctx.grid,
            &tr.noise,
            tr.state(0),
            ctx.options.fd_step,
        )?;
        let err = rel_or_abs((&big.values[0] - &fd).norm(), fd.norm());
        worst = worst.max(err);
        table.rows.push(vec![idx.to_string(), fmt_f64(err)]);
    }
    Ok(Outcome {
        status: gate(worst <= 1e-2),
        summary: format!("worst rel err {worst:.3e} (≤ 1e-2)"),
        table,
    })
}

fn first_variation(ctx: &Context) -> Result<Outcome> {
    let x = vec![0.0; ctx.problem.dims().state];
    let u = vec![0.0; ctx.problem.dims().control];
    if ctx.problem.second_order(&x, &u, 0.0).is_none() {
        return Ok(skipped("problem supplies no second-order derivatives"));
    }
    let n = ctx.control.n_params();
    let n_paths = ctx.options.mc_paths;
    let mut direct = vec![Vec::with_capacity(n_paths as usize); n];
    let mut matched = vec![Vec::with_capacity(n_paths as usize); n];
    for range in chunks(n_paths) {
        let part = map_indexed(range, |idx| {
            let tr = simulate_path(ctx.problem, ctx.control, &ctx.grid, ctx.seed, ctx.seed, idx)?;
            let a = solve_first_order_adjoint(ctx.problem, ctx.control, &tr, None)?;
            let big = solve_second_order_adjoint(ctx.problem, ctx.control, &tr, &a)?;
            let g = theta_gradient_via_adjoint(ctx.problem, ctx.control, &tr, &a)?;
            let bam = path_losses(
                ctx.problem,
                ctx.control,
                std::slice::from_ref(&tr),
                AdjointInputs::Bam {
                    first: std::slice::from_ref(&a),
                    second: std::slice::from_ref(&big),
                },
            )?;
            Ok((g, bam.into_iter().next().map(|l| l.grad).unwrap_or_default()))
        })?;
        for (g, b) in part {
            for c in 0..n {
                direct[c].push(g[c]);
                matched[c].push(b[c]);
            }
        }
    }
    let mut table = Table::new([
        "component",
        "direct",
        "direct_se",
        "bam",
        "bam_se",
        "ratio",
    ]);
    let mut worst: f64 = 0.0;
    for c in 0..n {
        let (m1, s1) = mean_and_se(&direct[c]);
        let (m2, s2) = mean_and_se(&matched[c]);
        let combined = (s1 * s1 + s2 * s2).sqrt();
        let ratio = rel_or_abs((m1 - m2).abs(), combined);
        worst = worst.max(ratio);
        table.rows.push(vec![
            c.to_string(),
            fmt_f64(m1),
            fmt_f64(s1),
            fmt_f64(m2),
            fmt_f64(s2),
            fmt_f64(ratio),
        ]);
    }
    Ok(Outcome {
        status: gate(worst <= 3.0),
        summary: format!("worst |Δ|/combined SE {worst:.3e} (≤ 3)"),
        table,
    })
}

fn collapse(ctx: &Context) -> Result<Outcome> {
    let flags = ctx.problem.flags();
    if !flags.diffusion_time_only {
        return Ok(skipped("diffusion depends on the state or control"));
    }
    let x = vec![0.0; ctx.problem.dims().state];
    let u = vec![0.0; ctx.problem.dims().control];
    if ctx.problem.second_order(&x, &u, 0.0).is_none() {
        return Ok(skipped("problem supplies no second-order derivatives"));
    }
    let n_paths = ctx.options.mc_paths.min(1024);
    let batch = simulate_batch(ctx.problem, ctx.control, &ctx.grid, ctx.seed, n_paths, ctx.seed)?;
    let lean = map_indexed(0..n_paths, |i| solve_lean_adjoint(ctx.problem, &batch[i as usize]))?;
    let second = map_indexed(0..n_paths, |i| {
        solve_second_order_adjoint(ctx.problem, ctx.control, &batch[i as usize], &lean[i as usize])
    })?;
    let am = lean_am_loss(ctx.problem, ctx.control, &batch, &lean)?;
    let bam = bam_loss(ctx.problem, ctx.control, &batch, &lean, &second)?;
    let quad = if flags.control_affine_quadratic {
        Some(quadratic_am_loss(ctx.problem, ctx.control, &batch, &lean)?)
    } else {
        None
    };
    let mut table = Table::new(["component", "lean_am", "bam", "quadratic_am"]);
    let mut worst: f64 = 0.0;
    for c in 0..am.grad_theta.len() {
        worst = worst.max((am.grad_theta[c] - bam.grad_theta[c]).abs());
        let q = quad.as_ref().map(|q| q.grad_theta[c]);
        if let Some(q) = q {
            worst = worst.max((am.grad_theta[c] - q).abs());
        }
        table.rows.push(vec![
            c.to_string(),
            fmt_f64(am.grad_theta[c]),
            fmt_f64(bam.grad_theta[c]),
            q.map(fmt_f64).unwrap_or_default(),
        ]);
    }
    Ok(Outcome {
        status: gate(worst <= 1e-12),
        summary: format!("max gradient gap {worst:.3e} (≤ 1e-12)"),
        table,
    })
}

fn feynman_kac(ctx: &Context) -> Result<Outcome> {
    if !ctx.problem.flags().diffusion_time_only {
        return Ok(skipped("diffusion depends on the state or control"));
    }
    let mut table = Table::new(["path", "max_rel_dev"]);
    let mut worst: f64 = 0.0;
    for idx in 0..ctx.options.fd_paths {
        let tr = simulate_path(ctx.problem, ctx.control, &ctx.grid, ctx.seed, ctx.seed, idx)?;
        let lean = solve_lean_adjoint(ctx.problem, &tr)?;
        let fk = feynman_kac_lean(ctx.problem, &tr, &fundamental_matrix(ctx.problem, &tr)?)?;
        let dev = (0..lean.n_nodes())
            .map(|i| {
                let (a, b) = (lean.vector(i), fk.vector(i));
                rel_or_abs((&a - &b).norm(), b.norm())
            })
            .fold(0.0, f64::max);
        worst = worst.max(dev);
        table.rows.push(vec![idx.to_string(), fmt_f64(dev)]);
    }
    Ok(Outcome {
        status: gate(worst <= 1e-10),
        summary: format!("max rel deviation {worst:.3e} (≤ 1e-10)"),
        table,
    })
}

fn scalar_lq(ctx: &Context) -> bool {
    ctx.problem.lq_data().is_some() && ctx.problem.dims().state == 1
}

fn smp(ctx: &Context) -> Result<Outcome> {
    if !scalar_lq(ctx) {
        return Ok(skipped("needs a scalar linear-quadratic problem"));
    }
    let n = ctx.grid.n_steps();
    let nodes: Vec<usize> = [1, 3, 5, 7, 9]
        .iter()
        .map(|k| (k * n / 10).clamp(1, n - 1))
        .collect();
    let rep = smp_representation_check(ctx.problem, &ctx.grid, &nodes, ctx.options.mc_paths, ctx.seed)?;
    let worst = rep
        .rows
        .iter()
        .map(|r| rel_or_abs((r.slope - r.riccati_p).abs(), r.slope_se))
        .fold(0.0, f64::max);
    let ok = !rep.rows.is_empty() && rep.rows.iter().all(|r| r.within(3.0));
    Ok(Outcome {
        status: gate(ok),
        summary: format!("worst |slope - P| {worst:.2} SE (≤ 3)"),
        table: rep.table(),
    })
}

fn memoryless(ctx: &Context) -> Result<Outcome> {
    let rep = memorylessness_check(ctx.problem, &ctx.grid, ctx.options.mc_paths.max(1000), ctx.seed)?;
    let mut table = Table::new(["corr", "threshold", "memoryless"]);
    table.rows.push(vec![
        fmt_f64(rep.corr),
        fmt_f64(rep.threshold),
        rep.pass.to_string(),
    ]);
    Ok(Outcome {
        status: Status::Info,
        summary: format!("corr(X0, XT) {:.3e}, threshold {:.3e}", rep.corr, rep.threshold),
        table,
    })
}

fn hjb(ctx: &Context) -> Result<Outcome> {
    if scalar_lq(ctx) {
        let riccati = solve_riccati(ctx.problem, &ctx.grid)?;
        let xs: Vec<f64> = (0..21).map(|j| -2.0 + 0.2 * j as f64).collect();
        let h = ctx.grid.horizon();
        let ts: Vec<f64> = (0..21).map(|j| h * j as f64 / 20.0).collect();
        let rep = hjb_residual_analytic(ctx.problem, &riccati, &xs, &ts)?;
        let worst = rep.max_abs_residual();
        return Ok(Outcome {
            status: gate(worst <= 1e-4),
            summary: format!("analytic max residual {worst:.3e} (≤ 1e-4)"),
            table: rep.table(),
        });
    }
    let dims = ctx.problem.dims();
    if dims.state != 1 || dims.noise != 1 || ctx.grid.n_steps() < 4 {
        return Ok(skipped("needs d = m = 1 and at least 4 steps"));
    }
    let stride = ctx.grid.n_steps() / 4;
    let ts: Vec<f64> = (0..5).map(|j| ctx.grid.node(j * stride)).collect();
    let xs = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let rep = hjb_residual_1d(
        ctx.problem,
        ctx.control,
        &ctx.grid,
        &xs,
        &ts,
        ctx.options.mc_paths,
        ctx.seed,
    )?;
    Ok(Outcome {
        status: Status::Info,
        summary: format!(
            "MC max |R| {:.3e}, {:.2}× noise floor",
            rep.max_abs_residual(),
            rep.max_noise_ratio()
        ),
        table: rep.table(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_ratios_use_absolute_scale() {
        assert_eq!(rel_or_abs(1e-3, 0.0), 1e-3);
        assert_eq!(rel_or_abs(1e-3, 2.0), 5e-4);
    }
}
