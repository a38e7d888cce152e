//! Distributed evolution strategies for stochastic black-box optimization.
//!
//! Workers run a comparison-based (1+1)-ES on local minibatches; a server
//! averages their displacements with momentum. The crate also carries the
//! zeroth-order gradient baselines, a server-side ES-CSA, LIBSVM data
//! loading and the benchmarking/profile tooling used to compare them.

pub mod baselines;
pub mod bench;
pub mod dataio;
pub mod error;
pub mod localsolver;
pub mod mutation;
pub mod objective;
pub mod run;
pub mod server;
pub mod stream;

pub use error::{DesError, Result};
pub use mutation::{MutationKind, MutationModel};
pub use objective::{BatchObjective, Dataset, LossKind, SparseExample};
pub use run::{Problem, RunSetup};
pub use server::{run_des, DesConfig};
pub use stream::{Purpose, RngStream};
