//! Time grids, keyed Brownian increments and Euler–Maruyama paths.

use std::ops::Range;

use nalgebra::DVector;

use crate::control::ControlModel;
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::parallel::map_indexed;
use crate::problem::ProblemSpec;
use crate::rng::{keyed_rng, standard_normal, Domain};
use crate::table::Table;

/// Uniform grid `t_i = i·dt` on `[0, T]` with the last node pinned to `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n_steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be at least 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", "must be positive and finite"));
        }
        Ok(Self { n_steps, horizon })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }
}

/// Increments `ΔB_i ~ N(0, dt·I_m)`, stored row-major by step.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub master_seed: u64,
    pub path_index: u64,
    noise_dim: usize,
    increments: Vec<f64>,
}

impl BrownianPath {
    /// Wraps explicit increments, e.g. a zero path for deterministic checks.
    pub fn from_increments(noise_dim: usize, increments: Vec<f64>) -> Result<Self> {
        if noise_dim == 0 || !increments.len().is_multiple_of(noise_dim) {
            return Err(Error::invalid("increments", "length must be a multiple of m"));
        }
        Ok(Self {
            master_seed: 0,
            path_index: 0,
            noise_dim,
            increments,
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.noise_dim
    }
    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[i * self.noise_dim..(i + 1) * self.noise_dim]
    }
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

pub fn sample_brownian(
    grid: &TimeGrid,
    noise_dim: usize,
    master_seed: u64,
    path_index: u64,
) -> Result<BrownianPath> {
    if noise_dim == 0 {
        return Err(Error::invalid("m", "noise dimension must be at least 1"));
    }
    let sd = grid.dt().sqrt();
    let mut rng = keyed_rng(master_seed, Domain::Brownian, path_index);
    let increments = (0..grid.n_steps() * noise_dim)
        .map(|_| sd * standard_normal(&mut rng))
        .collect();
    Ok(BrownianPath {
        master_seed,
        path_index,
        noise_dim,
        increments,
    })
}

/// States at nodes `0..=N`, left-endpoint controls at nodes `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub noise: BrownianPath,
    state_dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
}

impl Trajectory {
    pub fn path_index(&self) -> u64 {
        self.noise.path_index
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }
    pub fn control(&self, i: usize) -> &[f64] {
        &self.controls[i * self.control_dim..(i + 1) * self.control_dim]
    }
    pub fn terminal(&self) -> &[f64] {
        self.state(self.n_steps())
    }
    pub fn increment(&self, i: usize) -> &[f64] {
        self.noise.increment(i)
    }
}

/// One Euler–Maruyama step `x + b·dt + σ·ΔB`.
pub fn euler_step(
    problem: &ProblemSpec,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    db: &[f64],
) -> DVector<f64> {
    let b = problem.drift(x, u, t);
    let sigma = problem.diffusion(x, u, t);
    let noise = &sigma * DVector::from_column_slice(db);
    DVector::from_fn(x.len(), |r, _| x[r] + (b[r] * dt + noise[r]))
}

pub fn simulate_forward(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    noise: BrownianPath,
    x0: &[f64],
) -> Result<Trajectory> {
    let dims = problem.dims();
    let (d, k) = (dims.state, dims.control);
    let checks = [
        ("initial state", d, x0.len()),
        ("control state dimension", d, control.state_dim()),
        ("control output dimension", k, control.control_dim()),
        ("noise dimension", dims.noise, noise.noise_dim()),
        ("noise length", grid.n_steps(), noise.n_steps()),
    ];
    for (context, expected, got) in checks {
        if expected != got {
            return Err(Error::Dimension {
                context,
                expected,
                got,
            });
        }
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut states = Vec::with_capacity((n + 1) * d);
    let mut controls = Vec::with_capacity(n * k);
    states.extend_from_slice(x0);
    for i in 0..n {
        let t = grid.node(i);
        let x = &states[i * d..(i + 1) * d];
        let u = control.eval(x, t)?;
        let next = euler_step(problem, x, u.as_slice(), t, dt, noise.increment(i));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation {
                path: noise.path_index,
                step: i + 1,
            });
        }
        controls.extend_from_slice(u.as_slice());
        states.extend_from_slice(next.as_slice());
    }
    Ok(Trajectory {
        grid: *grid,
        noise,
        state_dim: d,
        control_dim: k,
        states,
        controls,
    })
}

/// Simulates `path_index ∈ range` with `X₀ ~ P₀` drawn from the `x0_seed` stream.
pub fn simulate_range(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    master_seed: u64,
    x0_seed: u64,
    range: Range<u64>,
) -> Result<Vec<Trajectory>> {
    map_indexed(range, |idx| {
        simulate_path(problem, control, grid, master_seed, x0_seed, idx)
    })
}

pub fn simulate_path(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    master_seed: u64,
    x0_seed: u64,
    idx: u64,
) -> Result<Trajectory> {
    let noise = sample_brownian(grid, problem.dims().noise, master_seed, idx)?;
    let x0 = problem.sample_initial(&mut keyed_rng(x0_seed, Domain::InitialState, idx));
    simulate_forward(problem, control, grid, noise, x0.as_slice())
}

pub fn simulate_batch(
    problem: &ProblemSpec,
    control: &ControlModel,
    grid: &TimeGrid,
    master_seed: u64,
    n_paths: u64,
    x0_seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths", "must be at least 1"));
    }
    simulate_range(problem, control, grid, master_seed, x0_seed, 0..n_paths)
}

/// Columns `path,i,t,x_0..x_{d-1},u_0..u_{k-1}`; the terminal row leaves `u` empty.
pub fn trajectories_table(paths: &[Trajectory]) -> Table {
    let (d, k) = paths
        .first()
        .map(|p| (p.state_dim, p.control_dim))
        .unwrap_or((0, 0));
    let header = ["path", "i", "t"]
        .into_iter()
        .map(String::from)
        .chain((0..d).map(|j| format!("x_{j}")))
        .chain((0..k).map(|j| format!("u_{j}")));
    let mut table = Table::new(header);
    for p in paths {
        for i in 0..=p.n_steps() {
            let mut row = vec![
                p.path_index().to_string(),
                i.to_string(),
                fmt_f64(p.grid.node(i)),
            ];
            row.extend(p.state(i).iter().map(|v| fmt_f64(*v)));
            if i < p.n_steps() {
                row.extend(p.control(i).iter().map(|v| fmt_f64(*v)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), k));
            }
            table.rows.push(row);
        }
    }
    table
}
