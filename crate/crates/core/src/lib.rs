//! Symbol-level precoding for the MU-MISO downlink.
//!
//! Three ways to meet per-user SINR targets at minimum transmit power:
//!
//! * [`solvers::solve_blp`], conventional block-level precoding via uplink-downlink duality;
//! * [`solvers::solve_slp_strict`], strict-phase symbol-level precoding solved by a
//!   null-space log-barrier Newton method, with [`solvers::kkt_oracle`] as an exact check;
//! * [`net`], an unrolled proximal interior-point network trained without labels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod model;
pub mod net;
pub mod oracles;
pub mod prox;
pub mod solvers;
pub mod subspace;
pub mod train;

pub use error::{Error, Result};
pub use experiment::{BenchRecord, CheckResult, Method, SampleRow, TimeRecord};
pub use model::{
    apply_skew, complex_to_real, db_to_linear, draw_channels, im_residual, re_margin,
    real_to_complex, rotate_and_lift, rotate_and_lift_with, transmit_power, ChannelSet,
    LiftedProblem, PskSymbols, RealPrecoder, RotationConvention,
};
pub use net::{
    network_forward, Checkpoint, ForwardTape, LayerParams, LossBreakdown, NetConfig, NetProblem,
    NetworkParams, ProxComposition,
};
pub use prox::{
    barrier_value, prox_barrier, prox_grad_gamma, prox_grad_mu, prox_jacobian_v, prox_sweep,
    ProxInputs, ProxResult,
};
pub use solvers::{
    check_feasibility, dual_to_primal, feasible_relative, kkt_oracle, solve_blp, solve_slp_strict,
    BlpOptions, BlpReport, FeasibilityReport, SolveOptions, SolveReport, SolveStatus,
};
pub use subspace::{JointProxOptions, JointProxResult, PhaseSubspace};
pub use train::{
    adam_step, generate_dataset, infer, train, AdamState, EpochStats, Inference, Predictor,
    TrainConfig, TrainHistory, TrainRun,
};
