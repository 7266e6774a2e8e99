//! Stochastic optimal control by adjoint matching.
//!
//! Controlled SDEs are simulated with Euler–Maruyama, adjoint processes are
//! integrated backward along stored paths, and parametric controls are fitted
//! by Hamiltonian-based losses. Linear-quadratic problems come with an exact
//! Riccati solution for checking every stage.

pub mod adjoint;
pub mod control;
pub mod error;
pub mod hamiltonians;
pub mod oracle;
pub mod parallel;
pub mod problem;
pub mod rng;
pub mod simulate;
pub mod table;
pub mod train;

pub use adjoint::{
    feynman_kac_lean, fundamental_matrix, solve_first_order_adjoint, solve_lean_adjoint,
    solve_second_order_adjoint, theta_gradient_via_adjoint, AdjointKind, AdjointPath, HTerm,
    MatrixAdjointPath, PropagatorPath,
};
pub use control::{ControlFamily, ControlModel, Feature, ParamJacobian, TimeBasis};
pub use error::{Error, Result};
pub use hamiltonians::{
    bam_loss, hamiltonian_full, hamiltonian_simplified, hamiltonian_smp,
    hamiltonian_smp_generalized, lean_am_loss, pathwise_cost, quadratic_am_loss, soc_objective,
    AdjointInputs, LossReport, Objective,
};
pub use problem::{
    make_controlled_diffusion_problem, make_lq_problem, make_ou_tilt_problem, Capabilities,
    DerivativeBundle, Dims, Dynamics, LqData, ProblemSpec, SecondOrderBundle,
};
pub use oracle::{solve_riccati, RiccatiSolution};
pub use simulate::{simulate_batch, simulate_forward, BrownianPath, TimeGrid, Trajectory};
pub use train::{
    evaluate_checkpoint, msa_exact_step, train, Checkpoint, LossChoice, Trainer, TrainingConfig,
    TrainingHistory,
};
pub use table::fmt_f64;
