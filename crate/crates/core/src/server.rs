//! Synchronous DES rounds.
//!
//! Every round the server broadcasts `x_t` and the round's initial step to
//! `M` workers. Each worker draws one minibatch from its shard and runs the
//! local ES on it for `K` iterations. The server then averages the workers'
//! final points into a displacement `d`, folds it into the momentum
//! `m <- beta m + (1 - beta) d` and moves `x <- x + m`.
//!
//! Workers run on the rayon pool; their randomness comes from streams keyed
//! by `(seed, t, i)`, so results do not depend on the pool size.

use log::warn;
use rayon::prelude::*;

use crate::bench::RunRecord;
use crate::dataio::PartitionPlan;
use crate::error::{DesError, Result};
use crate::localsolver::{initial_step, run_local_es, LocalConfig, WorkerResult};
use crate::mutation::{MutationKind, MutationModel};
use crate::run::{draw_minibatch, drive, mean_of, Problem, RunSetup};
use crate::stream::Purpose;

/// Largest momentum with a convergence guarantee, `sqrt(1 / (2 sqrt 2))`
/// (exclusive).
pub const MAX_SAFE_MOMENTUM: f64 = 0.594_603_557_501_360_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesConfig {
    pub setup: RunSetup,
    pub beta: f64,
    pub mutation: MutationKind,
    /// `l` for the mixture models.
    pub mixture_size: usize,
    /// Permits `beta` up to (but excluding) 1.
    pub allow_unsafe_momentum: bool,
}

impl DesConfig {
    pub fn new(setup: RunSetup, beta: f64, mutation: MutationKind, mixture_size: usize) -> Result<Self> {
        let cfg = Self {
            setup,
            beta,
            mutation,
            mixture_size,
            allow_unsafe_momentum: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// As [`DesConfig::new`] but accepting any `beta` in `[0, 1)`.
    pub fn new_unsafe(setup: RunSetup, beta: f64, mutation: MutationKind, mixture_size: usize) -> Result<Self> {
        let cfg = Self {
            setup,
            beta,
            mutation,
            mixture_size,
            allow_unsafe_momentum: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup.validate()?;
        let limit = if self.allow_unsafe_momentum {
            1.0
        } else {
            MAX_SAFE_MOMENTUM
        };
        if !(self.beta >= 0.0 && self.beta < limit) {
            return Err(DesError::invalid("beta", format!("{} outside [0, {limit})", self.beta)));
        }
        if self.mutation.is_mixture() && self.mixture_size == 0 {
            return Err(DesError::invalid("l", "mixture size must be positive"));
        }
        Ok(())
    }

    /// Non-fatal departures from the settings the convergence theory needs.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let rounds = self.setup.rounds as f64;
        if (self.setup.batch_size as f64) < rounds.sqrt() {
            out.push(format!(
                "minibatch size {} is below sqrt(T) = {:.2}",
                self.setup.batch_size,
                rounds.sqrt()
            ));
        }
        if self.beta >= MAX_SAFE_MOMENTUM {
            out.push(format!("momentum {} exceeds the safe bound", self.beta));
        }
        out
    }

    pub fn model(&self, dim: usize) -> Result<MutationModel> {
        MutationModel::new(self.mutation, dim, self.mixture_size)
    }

    pub fn algorithm_id(&self) -> &'static str {
        match self.mutation {
            MutationKind::StandardGaussian => "des",
            MutationKind::MixtureGaussian => "des-mg",
            MutationKind::MixtureRademacher => "des-mr",
        }
    }
}

/// `(x_t, m_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: Vec<f64>,
    pub momentum: Vec<f64>,
    pub round: usize,
}

impl ServerState {
    /// Zero start with zero momentum.
    pub fn new(dim: usize) -> Self {
        Self {
            x: vec![0.0; dim],
            momentum: vec![0.0; dim],
            round: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// Candidate evaluations over all workers, `M K b`.
    pub evals: u64,
    /// Starting-point evaluations over all workers, `M b`.
    pub reference_evals: u64,
    pub accepted: Vec<usize>,
    pub initial_step: f64,
    pub displacement: Vec<f64>,
}

/// `beta m + (1 - beta) d`.
pub fn momentum_update(m: &[f64], d: &[f64], beta: f64) -> Vec<f64> {
    m.iter().zip(d).map(|(mi, di)| beta * mi + (1.0 - beta) * di).collect()
}

/// `(1/M) sum_i v_i - x`.
pub fn displacement(x: &[f64], finals: &[Vec<f64>]) -> Vec<f64> {
    mean_of(finals).iter().zip(x).map(|(m, xi)| m - xi).collect()
}

/// One worker's share of round `t`.
pub fn worker_round(
    state: &ServerState,
    cfg: &DesConfig,
    problem: &Problem<'_>,
    shard: &[usize],
    worker: usize,
) -> Result<WorkerResult> {
    let setup = &cfg.setup;
    let t = state.round;
    let mut rng = setup.stream(t, worker, Purpose::Minibatch).rng();
    let batch = draw_minibatch(shard, setup.batch_size, &mut rng)?;
    let obj = problem.objective()?;
    let bound = obj.bind(&batch);
    let local = LocalConfig::new(
        setup.local_iters,
        cfg.model(problem.dim())?,
        initial_step(setup.alpha, t),
    )?;
    run_local_es(&state.x, &local, &bound, &setup.stream(t, worker, Purpose::Mutation))
}

/// Runs one synchronous round and returns the next state.
pub fn des_round(
    state: &ServerState,
    cfg: &DesConfig,
    problem: &Problem<'_>,
    partition: &PartitionPlan,
) -> Result<(ServerState, RoundMetrics)> {
    if partition.workers() != cfg.setup.workers {
        return Err(DesError::invalid(
            "partition",
            format!("{} shards for {} workers", partition.workers(), cfg.setup.workers),
        ));
    }
    if state.x.len() != problem.dim() {
        return Err(DesError::DimensionMismatch {
            expected: problem.dim(),
            actual: state.x.len(),
        });
    }
    let results = (0..cfg.setup.workers)
        .into_par_iter()
        .map(|i| worker_round(state, cfg, problem, partition.shard(i), i))
        .collect::<Result<Vec<_>>>()?;

    let finals: Vec<Vec<f64>> = results.iter().map(|r| r.v_final.clone()).collect();
    let d = displacement(&state.x, &finals);
    let momentum = momentum_update(&state.momentum, &d, cfg.beta);
    let x = state.x.iter().zip(&momentum).map(|(x, m)| x + m).collect();
    let metrics = RoundMetrics {
        evals: results.iter().map(|r| r.evals_used).sum(),
        reference_evals: results.iter().map(|r| r.reference_evals).sum(),
        accepted: results.iter().map(|r| r.accepted_count).collect(),
        initial_step: initial_step(cfg.setup.alpha, state.round),
        displacement: d,
    };
    Ok((
        ServerState {
            x,
            momentum,
            round: state.round + 1,
        },
        metrics,
    ))
}

/// Full DES run from `x_0 = 0`.
pub fn run_des(cfg: &DesConfig, problem: &Problem<'_>) -> Result<RunRecord> {
    cfg.validate()?;
    for w in cfg.warnings() {
        warn!("{}: {w}", cfg.algorithm_id());
    }
    let partition = cfg.setup.partition(problem.train.len())?;
    let mut state = ServerState::new(problem.dim());
    let echo = format!(
        "alpha={} beta={} M={} K={} b={} l={} seed={}",
        cfg.setup.alpha,
        cfg.beta,
        cfg.setup.workers,
        cfg.setup.local_iters,
        cfg.setup.batch_size,
        cfg.mixture_size,
        cfg.setup.seed
    );
    drive(cfg.algorithm_id(), echo, &cfg.setup, problem, |_, _| {
        let (next, metrics) = des_round(&state, cfg, problem, &partition)?;
        state = next;
        Ok((state.x.clone(), metrics.evals))
    })
}
