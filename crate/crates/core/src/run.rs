//! Shared pieces of every distributed run: the problem being solved, the
//! common round/budget settings and the round loop that records metrics.

use std::time::Instant;

use rand::Rng;

use crate::bench::{MetricRow, RunRecord};
use crate::dataio::{partition_uniform, PartitionPlan};
use crate::error::{DesError, Result};
use crate::objective::{classification_error, Dataset, EvalCounter, LossKind, Minibatch, RegularizedObjective};
use crate::stream::{Purpose, RngStream};

/// Regularization used throughout the benchmark protocol.
pub const DEFAULT_REG: f64 = 1e-6;

/// A loss over a train/test pair.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub loss: LossKind,
    pub reg: f64,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub counter: Option<&'a EvalCounter>,
}

impl<'a> Problem<'a> {
    pub fn new(loss: LossKind, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(DesError::DimensionMismatch {
                expected: train.dim(),
                actual: test.dim(),
            });
        }
        Ok(Self {
            loss,
            reg: DEFAULT_REG,
            train,
            test,
            counter: None,
        })
    }

    pub fn with_reg(mut self, reg: f64) -> Self {
        self.reg = reg;
        self
    }

    pub fn with_counter(mut self, counter: &'a EvalCounter) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    /// Training objective; counted when a counter is attached.
    pub fn objective(&self) -> Result<RegularizedObjective<'a>> {
        let obj = RegularizedObjective::new(self.loss, self.reg, self.train)?;
        Ok(match self.counter {
            Some(c) => obj.with_counter(c),
            None => obj,
        })
    }

    /// `(train loss, train 0/1 error, test 0/1 error)` at `x`. Not counted.
    pub fn snapshot(&self, x: &[f64]) -> Result<(f64, f64, f64)> {
        let loss = self.objective()?.eval_full(x)?;
        Ok((
            loss,
            classification_error(x, self.train)?,
            classification_error(x, self.test)?,
        ))
    }
}

/// Settings shared by DES and the baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSetup {
    /// `M`
    pub workers: usize,
    /// `T`
    pub rounds: usize,
    /// `K`
    pub local_iters: usize,
    /// `b`
    pub batch_size: usize,
    /// Initial step-size `alpha`.
    pub alpha: f64,
    pub seed: u64,
    /// Total evaluation budget; the run stops after the round that reaches it.
    pub budget: Option<u64>,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(DesError::invalid("M", "need at least one worker"));
        }
        if self.local_iters == 0 {
            return Err(DesError::invalid("K", "need at least one local iteration"));
        }
        if self.batch_size == 0 {
            return Err(DesError::invalid("b", "minibatch size must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DesError::invalid("alpha", "must be positive and finite"));
        }
        Ok(())
    }

    /// Evaluations one round is meant to cost: `M K b`.
    pub fn evals_per_round(&self) -> u64 {
        (self.workers * self.local_iters * self.batch_size) as u64
    }

    pub fn stream(&self, round: usize, worker: usize, purpose: Purpose) -> RngStream {
        RngStream::new(self.seed, round as u64, worker as u64, purpose)
    }

    pub fn partition(&self, n_train: usize) -> Result<PartitionPlan> {
        partition_uniform(n_train, self.workers, &self.stream(0, 0, Purpose::Partition))
    }
}

/// `b` indices drawn uniformly with replacement from `shard`.
pub fn draw_minibatch<R: Rng + ?Sized>(shard: &[usize], size: usize, rng: &mut R) -> Result<Minibatch> {
    if shard.is_empty() {
        return Err(DesError::Empty("worker shard"));
    }
    Minibatch::new((0..size).map(|_| shard[rng.random_range(0..shard.len())]).collect())
}

/// Runs rounds until `setup.rounds` or the budget is reached, recording a
/// row before the first round and after each one. `round_fn(t, x_t)`
/// returns `x_{t+1}` and the evaluations the round spent.
pub(crate) fn drive<F>(
    algorithm: &str,
    config: String,
    setup: &RunSetup,
    problem: &Problem<'_>,
    mut round_fn: F,
) -> Result<RunRecord>
where
    F: FnMut(usize, &[f64]) -> Result<(Vec<f64>, u64)>,
{
    let start = Instant::now();
    let mut record = RunRecord::new(algorithm, config);
    let mut x = vec![0.0; problem.dim()];
    let mut cum_evals = 0u64;
    let row = |round: usize, cum_evals: u64, x: &[f64], start: &Instant| -> Result<MetricRow> {
        let (train_loss, train_err, test_err) = problem.snapshot(x)?;
        Ok(MetricRow {
            round,
            cum_evals,
            train_loss,
            train_err,
            test_err,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };
    record.push(row(0, 0, &x, &start)?)?;
    for t in 0..setup.rounds {
        if setup.budget.is_some_and(|b| cum_evals >= b) {
            break;
        }
        let (next, evals) = round_fn(t, &x)?;
        if next.len() != x.len() {
            return Err(DesError::DimensionMismatch {
                expected: x.len(),
                actual: next.len(),
            });
        }
        x = next;
        cum_evals += evals;
        record.push(row(t + 1, cum_evals, &x, &start)?)?;
    }
    Ok(record)
}

/// Coordinatewise mean of equally sized vectors.
pub(crate) fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let count = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    mean
}
