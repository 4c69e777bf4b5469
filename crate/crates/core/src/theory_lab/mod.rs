//! Tabular verification of the proximal policy update on finite MDPs with a
//! gridded 1-D action space.

mod iterate;
mod mdp;
mod prox;

pub use iterate::{contraction_fit, envelope_ratio, fit_ratio, wppg_iterate, ContractionFit, IterationRecord, StepMode, Trajectory, NOISE_FLOOR};
pub use mdp::{
    discounted_visitation, evaluate_soft, optimal_gap_identity, optimal_soft_policy, perf_diff_check, stationary_distribution, FiniteMdp, PerfDiff, SoftValues,
    TabularPolicy,
};
pub use prox::{exact_prox_step, prox_objective, split_step, ProxConfig, ProxOutcome, ProxSolver};
