//! Fixtures shared by the benchmarks in `benches/`.

use soc_lab::problem::{scalar_geometric, scalar_lq, ScalarGeometric};
use soc_lab::{ControlModel, ProblemSpec, Result, TimeGrid};

/// Scalar LQ with a random linear-feedback control on `n_steps` intervals.
pub fn lq_fixture(n_steps: usize) -> Result<(ProblemSpec, ControlModel, TimeGrid)> {
    let problem = scalar_lq(0.3, 1.0, 0.5, 1.0, 1.0, 1.0, 0.5, 0.2)?;
    let control = ControlModel::linear_feedback(1, 1, n_steps, 1.0)?.randomized(1, 0.3);
    Ok((problem, control, TimeGrid::new(n_steps, 1.0)?))
}

/// State- and control-dependent noise, where the full adjoint is required.
pub fn geometric_fixture(n_steps: usize) -> Result<(ProblemSpec, ControlModel, TimeGrid)> {
    let problem = scalar_geometric(
        ScalarGeometric {
            coupling: 0.5,
            ..Default::default()
        },
        1.0,
    )?;
    let control = ControlModel::one_hidden_layer(1, 1, 1.0, 8)?.randomized(1, 0.3);
    Ok((problem, control, TimeGrid::new(n_steps, 1.0)?))
}
