//! Policy optimization with Wasserstein proximal updates: networks, actors, critics, entropy
//! estimation, 1-D optimal transport and a tabular verification lab.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod entropy_est;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod numeric;
pub mod ot1d;
pub mod policy;
pub mod theory_lab;

pub use agent::{Algo, Checkpoint, CurveRow, TrainConfig, TrainOutcome};
pub use entropy_est::EntropyConfig;
pub use envs::{Env, EnvKind};
pub use error::{Error, Result};
pub use nn::{Activation, MlpNet};
pub use numeric::{Mat, Rng};
pub use ot1d::{ActionGrid, GridDistribution};
pub use policy::{ActionBox, Actor, ExplicitActor, ImplicitActor};
