//! Comparison algorithms under the same evaluation accounting as DES.
//!
//! The three gradient-estimation methods spend `K' = floor(K/2)` central
//! differences per worker per round, two minibatch evaluations each, so a
//! round costs `M K b` evaluations for even `K`. ES-CSA spends its budget on
//! a population of `lambda = round(M K b / N)` points, each evaluated on
//! every shard.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bench::RunRecord;
use crate::error::{DesError, Result};
use crate::objective::BatchObjective;
use crate::run::{draw_minibatch, drive, mean_of, Problem, RunSetup};
use crate::stream::Purpose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    /// Finite-difference radius.
    pub mu: f64,
    /// Random directions averaged per estimate.
    pub directions: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            mu: 1e-6,
            directions: 1,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(DesError::invalid("mu", "radius must be positive"));
        }
        if self.directions == 0 {
            return Err(DesError::invalid("directions", "need at least one direction"));
        }
        Ok(())
    }
}

/// `((f(x + mu u) - f(x - mu u)) / (2 mu)) u` for a fixed direction `u`.
pub fn central_difference<O: BatchObjective + ?Sized>(obj: &O, x: &[f64], u: &[f64], mu: f64) -> Result<Vec<f64>> {
    let plus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + mu * b).collect();
    let minus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - mu * b).collect();
    let slope = (obj.value(&plus)? - obj.value(&minus)?) / (2.0 * mu);
    Ok(u.iter().map(|ui| slope * ui).collect())
}

/// Gaussian-smoothing gradient estimate averaged over
/// `smoothing.directions` draws of `u ~ N(0, I)`.
pub fn zo_grad_central<O, R>(obj: &O, x: &[f64], smoothing: &SmoothingConfig, rng: &mut R) -> Result<Vec<f64>>
where
    O: BatchObjective + ?Sized,
    R: Rng + ?Sized,
{
    smoothing.validate()?;
    let mut grad = vec![0.0; x.len()];
    let scale = 1.0 / smoothing.directions as f64;
    for _ in 0..smoothing.directions {
        let u: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let g = central_difference(obj, x, &u, smoothing.mu)?;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += scale * gi;
        }
    }
    Ok(grad)
}

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign_plus(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Majority vote: the sign of the sum of the workers' sign vectors.
pub fn majority_vote(signs: &[Vec<f64>]) -> Vec<f64> {
    let mut total = vec![0.0; signs[0].len()];
    for s in signs {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    total.into_iter().map(sign_plus).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub setup: RunSetup,
    pub smoothing: SmoothingConfig,
}

impl BaselineConfig {
    pub fn new(setup: RunSetup) -> Self {
        Self {
            setup,
            smoothing: SmoothingConfig::default(),
        }
    }

    /// `K' = floor(K / 2)` local steps.
    pub fn half_iters(&self) -> usize {
        self.setup.local_iters / 2
    }

    fn validate(&self, algorithm: &str) -> Result<()> {
        self.setup.validate()?;
        self.smoothing.validate()?;
        if self.half_iters() == 0 {
            return Err(DesError::invalid("K", "gradient baselines need K >= 2"));
        }
        if !self.setup.local_iters.is_multiple_of(2) {
            warn!(
                "{algorithm}: odd K = {} runs {} steps; {} evaluations per worker per round are forfeited",
                self.setup.local_iters,
                self.half_iters(),
                self.setup.batch_size
            );
        }
        Ok(())
    }

    fn echo(&self) -> String {
        let s = &self.setup;
        format!(
            "alpha={} M={} K={} b={} mu={} seed={}",
            s.alpha, s.workers, s.local_iters, s.batch_size, self.smoothing.mu, s.seed
        )
    }

    fn evals_per_worker(&self) -> u64 {
        (2 * self.half_iters() * self.smoothing.directions * self.setup.batch_size) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalDescent {
    /// One minibatch for the whole round, step `alpha / ((k+1) sqrt(t+1))`.
    FixedBatch,
    /// A fresh minibatch per step, step `alpha / sqrt((k+1)(t+1))`.
    FreshBatch,
}

fn run_fed_zo(cfg: &BaselineConfig, problem: &Problem<'_>, mode: LocalDescent, algorithm: &str) -> Result<RunRecord> {
    cfg.validate(algorithm)?;
    let setup = cfg.setup;
    let partition = setup.partition(problem.train.len())?;
    let obj = problem.objective()?;
    drive(algorithm, cfg.echo(), &setup, problem, |t, x| {
        let finals = (0..setup.workers)
            .into_par_iter()
            .map(|i| {
                let shard = partition.shard(i);
                let mut batch_rng = setup.stream(t, i, Purpose::Minibatch).rng();
                let mut dir_rng = setup.stream(t, i, Purpose::Smoothing).rng();
                let mut batch = draw_minibatch(shard, setup.batch_size, &mut batch_rng)?;
                let mut v = x.to_vec();
                let tf = (t + 1) as f64;
                for k in 0..cfg.half_iters() {
                    let kf = (k + 1) as f64;
                    let step = match mode {
                        LocalDescent::FixedBatch => setup.alpha / (kf * tf.sqrt()),
                        LocalDescent::FreshBatch => {
                            if k > 0 {
                                batch = draw_minibatch(shard, setup.batch_size, &mut batch_rng)?;
                            }
                            setup.alpha / (kf * tf).sqrt()
                        }
                    };
                    let g = zo_grad_central(&obj.bind(&batch), &v, &cfg.smoothing, &mut dir_rng)?;
                    for (vi, gi) in v.iter_mut().zip(g) {
                        *vi -= step * gi;
                    }
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((mean_of(&finals), setup.workers as u64 * cfg.evals_per_worker()))
    })
}

/// Federated zeroth-order gradient descent on one fixed minibatch per round.
pub fn run_fed_zo_gd(cfg: &BaselineConfig, problem: &Problem<'_>) -> Result<RunRecord> {
    run_fed_zo(cfg, problem, LocalDescent::FixedBatch, "fed-zo-gd")
}

/// Federated zeroth-order SGD with a fresh minibatch per local step.
pub fn run_fed_zo_sgd(cfg: &BaselineConfig, problem: &Problem<'_>) -> Result<RunRecord> {
    run_fed_zo(cfg, problem, LocalDescent::FreshBatch, "fed-zo-sgd")
}

/// Zeroth-order signSGD with majority vote: each worker uploads the sign of
/// its averaged estimates and the server steps `alpha / sqrt(t+1)` along the
/// voted sign.
pub fn run_zo_signsgd(cfg: &BaselineConfig, problem: &Problem<'_>) -> Result<RunRecord> {
    const ALGORITHM: &str = "zo-signsgd";
    cfg.validate(ALGORITHM)?;
    let setup = cfg.setup;
    let partition = setup.partition(problem.train.len())?;
    let obj = problem.objective()?;
    drive(ALGORITHM, cfg.echo(), &setup, problem, |t, x| {
        let signs = (0..setup.workers)
            .into_par_iter()
            .map(|i| {
                let shard = partition.shard(i);
                let mut batch_rng = setup.stream(t, i, Purpose::Minibatch).rng();
                let mut dir_rng = setup.stream(t, i, Purpose::Smoothing).rng();
                let mut avg = vec![0.0; x.len()];
                let scale = 1.0 / cfg.half_iters() as f64;
                for _ in 0..cfg.half_iters() {
                    let batch = draw_minibatch(shard, setup.batch_size, &mut batch_rng)?;
                    let g = zo_grad_central(&obj.bind(&batch), x, &cfg.smoothing, &mut dir_rng)?;
                    for (a, gi) in avg.iter_mut().zip(g) {
                        *a += scale * gi;
                    }
                }
                Ok(avg.into_iter().map(sign_plus).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let step = setup.alpha / ((t + 1) as f64).sqrt();
        let vote = majority_vote(&signs);
        let next = x.iter().zip(vote).map(|(xi, s)| xi - step * s).collect();
        Ok((next, setup.workers as u64 * cfg.evals_per_worker()))
    })
}

/// Equal-weight recombination of the `weights.len()` best points.
pub fn recombine(points: &[Vec<f64>], fitness: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let order = rank(fitness)?;
    let mut out = vec![0.0; points[0].len()];
    for (&w, &idx) in weights.iter().zip(&order) {
        for (o, p) in out.iter_mut().zip(&points[idx]) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Indices sorted by ascending fitness; ties keep sampling order.
fn rank(fitness: &[f64]) -> Result<Vec<usize>> {
    if fitness.iter().any(|f| f.is_nan()) {
        return Err(DesError::NanObjective {
            context: "population fitness".into(),
        });
    }
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
    Ok(order)
}

/// A `(mu/mu, lambda)`-ES with cumulative step-size adaptation and
/// identity covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaState {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub path: Vec<f64>,
    pub lambda: usize,
    pub weights: Vec<f64>,
    pub c_sigma: f64,
    pub d_sigma: f64,
    /// `E||N(0, I)||`.
    pub chi_n: f64,
}

impl CsaState {
    pub fn new(mean: Vec<f64>, sigma: f64, lambda: usize) -> Result<Self> {
        if lambda < 2 {
            return Err(DesError::invalid("lambda", "population needs at least 2 members"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DesError::invalid("sigma", "step-size must be positive"));
        }
        let n = mean.len() as f64;
        let parents = lambda / 2;
        let mu_eff = parents as f64;
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        Ok(Self {
            path: vec![0.0; mean.len()],
            mean,
            sigma,
            lambda,
            weights: vec![1.0 / mu_eff; parents],
            c_sigma,
            d_sigma,
            chi_n: n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n)),
        })
    }

    pub fn parents(&self) -> usize {
        self.weights.len()
    }

    fn mu_eff(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Samples the population `mean + sigma u_j`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        (0..self.lambda)
            .map(|_| (0..self.mean.len()).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    /// Selection, recombination and the step-size update for a population
    /// of unit directions and their fitness values.
    pub fn tell(&mut self, directions: &[Vec<f64>], fitness: &[f64]) -> Result<()> {
        if directions.len() != self.lambda || fitness.len() != self.lambda {
            return Err(DesError::invalid("population", "size differs from lambda"));
        }
        let y_w = recombine(directions, fitness, &self.weights)?;
        for (m, y) in self.mean.iter_mut().zip(&y_w) {
            *m += self.sigma * y;
        }
        let c = self.c_sigma;
        let gain = (c * (2.0 - c) * self.mu_eff()).sqrt();
        for (p, y) in self.path.iter_mut().zip(&y_w) {
            *p = (1.0 - c) * *p + gain * y;
        }
        let norm = self.path.iter().map(|p| p * p).sum::<f64>().sqrt();
        self.sigma *= ((c / self.d_sigma) * (norm / self.chi_n - 1.0)).exp();
        Ok(())
    }

    pub fn candidates(&self, directions: &[Vec<f64>]) -> Vec<Vec<f64>> {
        directions
            .iter()
            .map(|u| self.mean.iter().zip(u).map(|(m, ui)| m + self.sigma * ui).collect())
            .collect()
    }

    /// One generation against a plain objective.
    pub fn step<R, F>(&mut self, rng: &mut R, mut f: F) -> Result<()>
    where
        R: Rng + ?Sized,
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let dirs = self.sample(rng);
        let fitness = self
            .candidates(&dirs)
            .iter()
            .map(|c| f(c))
            .collect::<Result<Vec<_>>>()?;
        self.tell(&dirs, &fitness)
    }
}

/// `round(M K b / N_train)`.
pub fn csa_population(setup: &RunSetup, n_train: usize) -> Result<usize> {
    let lambda = (setup.evals_per_round() as f64 / n_train as f64).round() as usize;
    if lambda < 2 {
        return Err(DesError::invalid(
            "lambda",
            format!(
                "M K b / N = {} / {n_train} rounds to {lambda}; raise M, K or b so the population has at least 2 members",
                setup.evals_per_round()
            ),
        ));
    }
    Ok(lambda)
}

/// Server-side ES-CSA: the server samples the population, every worker
/// evaluates all of it on its whole shard, and the summed shard losses give
/// the full training objective of each candidate.
pub fn run_es_csa(setup: &RunSetup, problem: &Problem<'_>) -> Result<RunRecord> {
    const ALGORITHM: &str = "es-csa";
    setup.validate()?;
    let n_train = problem.train.len();
    let lambda = csa_population(setup, n_train)?;
    if !setup.evals_per_round().is_multiple_of(n_train as u64) {
        warn!(
            "{ALGORITHM}: M K b = {} is not a multiple of N = {n_train}; rounds cost {} evaluations",
            setup.evals_per_round(),
            lambda * n_train
        );
    }
    let partition = setup.partition(n_train)?;
    let obj = problem.objective()?;
    let mut state = CsaState::new(vec![0.0; problem.dim()], setup.alpha, lambda)?;
    let echo = format!(
        "alpha={} M={} K={} b={} lambda={lambda} seed={}",
        setup.alpha, setup.workers, setup.local_iters, setup.batch_size, setup.seed
    );
    drive(ALGORITHM, echo, setup, problem, |t, _| {
        let dirs = state.sample(&mut setup.stream(t, 0, Purpose::Population).rng());
        let candidates = state.candidates(&dirs);
        let shard_sums = (0..setup.workers)
            .into_par_iter()
            .map(|i| {
                candidates
                    .iter()
                    .map(|c| obj.loss_sum(c, partition.shard(i)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let fitness: Vec<f64> = candidates
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let total: f64 = shard_sums.iter().map(|s| s[j]).sum();
                total / n_train as f64 + obj.regularizer(c)
            })
            .collect();
        state.tell(&dirs, &fitness)?;
        Ok((state.mean.clone(), (lambda * n_train) as u64))
    })
}
