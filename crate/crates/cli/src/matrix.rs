//! Experiment matrix expansion and execution.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use des_core::baselines::{run_es_csa, run_fed_zo_gd, run_fed_zo_sgd, run_zo_signsgd, BaselineConfig};
use des_core::bench::{
    aggregate_runs, compute_profiles, write_metrics, write_profiles, LabelledRun, Metric, ProfileCurve,
};
use des_core::dataio::{read_libsvm_file, split_train_test, synth_dataset, ParseOptions, SplitSpec};
use des_core::{run_des, Dataset, DesConfig, DesError, LossKind, MutationKind, Problem, Purpose, RngStream, RunSetup};
use log::warn;
use rayon::prelude::*;

use crate::spec::{AlgoKind, AlgorithmSpec, DataSource, DatasetSpec, ExperimentSpec};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const PROFILE_FILE: &str = "profile.csv";

/// One hyperparameter point of one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub kind: AlgoKind,
    pub alpha: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub model: MutationKind,
    pub mixture: usize,
    pub allow_unsafe_momentum: bool,
    pub smoothing: des_core::baselines::SmoothingConfig,
}

impl Variant {
    /// The `algo` column, e.g. `des-mg(alpha=1;beta=0.5;l=8;b=1000)`.
    pub fn label(&self) -> String {
        let mut s = String::new();
        match self.kind {
            AlgoKind::Des => {
                let id = match self.model {
                    MutationKind::StandardGaussian => "des",
                    MutationKind::MixtureGaussian => "des-mg",
                    MutationKind::MixtureRademacher => "des-mr",
                };
                write!(s, "{id}(alpha={};beta={}", self.alpha, self.beta).unwrap();
                if self.model.is_mixture() {
                    write!(s, ";l={}", self.mixture).unwrap();
                }
            }
            kind => write!(s, "{}(alpha={}", kind.name(), self.alpha).unwrap(),
        }
        write!(s, ";b={})", self.batch_size).unwrap();
        s
    }
}

/// Every hyperparameter combination of `algo`, in declaration order.
pub fn expand_variants(algo: &AlgorithmSpec, default_batch: usize) -> Vec<Variant> {
    let batches = algo.batch_size.clone().unwrap_or_else(|| vec![default_batch]);
    let is_des = algo.kind == AlgoKind::Des;
    let betas = if is_des { algo.beta.clone() } else { vec![0.0] };
    let models = if is_des {
        algo.models.clone()
    } else {
        vec![MutationKind::StandardGaussian]
    };
    let mut out = Vec::new();
    for &alpha in &algo.alpha {
        for &batch_size in &batches {
            for &beta in &betas {
                for &model in &models {
                    let mixtures = if model.is_mixture() {
                        algo.mixture.clone()
                    } else {
                        vec![0]
                    };
                    for mixture in mixtures {
                        out.push(Variant {
                            kind: algo.kind,
                            alpha,
                            batch_size,
                            beta,
                            model,
                            mixture,
                            allow_unsafe_momentum: algo.allow_unsafe_momentum,
                            smoothing: algo.smoothing,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub dataset: usize,
    pub loss: LossKind,
    pub variant: Variant,
    pub seed: u64,
}

impl Cell {
    pub fn instance(&self, spec: &ExperimentSpec) -> String {
        format!("{}/{}", spec.datasets[self.dataset].name, self.loss.name())
    }
}

/// The full cross-product datasets x losses x variants x seeds.
pub fn expand(spec: &ExperimentSpec) -> Vec<Cell> {
    let variants: Vec<Variant> = spec
        .algorithms
        .iter()
        .flat_map(|a| expand_variants(a, spec.batch_size))
        .collect();
    let mut cells = Vec::new();
    for dataset in 0..spec.datasets.len() {
        for &loss in &spec.losses {
            for variant in &variants {
                for &seed in &spec.seeds {
                    cells.push(Cell {
                        dataset,
                        loss,
                        variant: variant.clone(),
                        seed,
                    });
                }
            }
        }
    }
    cells
}

/// Train/test split of a dataset, or why it could not be built.
pub type LoadedData = Result<(Dataset, Dataset), String>;

pub fn load_dataset(d: &DatasetSpec, train_fraction: f64, base: &Path) -> LoadedData {
    let full = match &d.source {
        DataSource::File { path, labels, dim } => {
            let path = if path.is_absolute() {
                path.clone()
            } else {
                base.join(path)
            };
            let opts = ParseOptions {
                labels: *labels,
                dim: *dim,
            };
            read_libsvm_file(&path, &opts).map_err(|e| format!("{}: {e}", path.display()))?
        }
        DataSource::Synthetic { kind, dim, examples } => {
            let stream = RngStream::new(d.seed, 0, 0, Purpose::Synthesis);
            synth_dataset(*kind, *dim, *examples, &stream)
                .map_err(|e| e.to_string())?
                .data
        }
    };
    let split = SplitSpec {
        train_fraction,
        stream: RngStream::new(d.seed, 0, 0, Purpose::Split),
    };
    split_train_test(&full, &split).map_err(|e| e.to_string())
}

/// `T = floor(E N / (M K b))`.
pub fn rounds_for(epochs: usize, n_train: usize, setup: &RunSetup) -> usize {
    ((epochs as u128 * n_train as u128) / setup.evals_per_round() as u128) as usize
}

pub fn run_cell(spec: &ExperimentSpec, cell: &Cell, data: &LoadedData) -> Result<LabelledRun, String> {
    let (train, test) = data.as_ref().map_err(|e| format!("dataset unavailable: {e}"))?;
    let (k, e) = spec.iterations_for(train.dim());
    let v = &cell.variant;
    let mut setup = RunSetup {
        workers: spec.workers,
        rounds: 0,
        local_iters: k,
        batch_size: v.batch_size,
        alpha: v.alpha,
        seed: cell.seed,
        budget: None,
    };
    setup.rounds = rounds_for(e, train.len(), &setup);
    if setup.rounds == 0 {
        warn!(
            "{} on {}: E N = {} is below M K b = {}; only the starting point is recorded",
            v.label(),
            cell.instance(spec),
            e * train.len(),
            setup.evals_per_round()
        );
    }
    let problem = Problem::new(cell.loss, train, test)
        .map_err(|e| e.to_string())?
        .with_reg(spec.reg);
    let record = match v.kind {
        AlgoKind::Des => {
            let cfg = if v.allow_unsafe_momentum {
                DesConfig::new_unsafe(setup, v.beta, v.model, v.mixture)
            } else {
                DesConfig::new(setup, v.beta, v.model, v.mixture)
            };
            cfg.and_then(|c| run_des(&c, &problem))
        }
        AlgoKind::EsCsa => run_es_csa(&setup, &problem),
        kind => {
            let cfg = BaselineConfig {
                setup,
                smoothing: v.smoothing,
            };
            match kind {
                AlgoKind::FedZoGd => run_fed_zo_gd(&cfg, &problem),
                AlgoKind::FedZoSgd => run_fed_zo_sgd(&cfg, &problem),
                _ => run_zo_signsgd(&cfg, &problem),
            }
        }
    }
    .map_err(|e: DesError| e.to_string())?;
    let record = if spec.record_wall_time {
        record
    } else {
        record.without_timing()
    };
    Ok(LabelledRun {
        algorithm: v.label(),
        instance: cell.instance(spec),
        seed: cell.seed,
        record,
    })
}

#[derive(Debug)]
pub struct CellFailure {
    pub algorithm: String,
    pub instance: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug)]
pub struct MatrixOutcome {
    pub runs: Vec<LabelledRun>,
    pub failures: Vec<CellFailure>,
    pub profiles: Vec<ProfileCurve>,
}

impl MatrixOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

/// Runs every cell on a pool of `threads` threads (all cores when `None`)
/// and writes `metrics.csv` and `profile.csv` to `out`. Relative dataset
/// paths resolve against `base`.
pub fn run_matrix(
    spec: &ExperimentSpec,
    base: &Path,
    out: &Path,
    threads: Option<usize>,
) -> Result<MatrixOutcome, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start thread pool: {e}")))?;
    let cells = expand(spec);
    let results = pool.install(|| {
        let data: Vec<LoadedData> = spec
            .datasets
            .par_iter()
            .map(|d| load_dataset(d, spec.train_fraction, base))
            .collect();
        for (d, loaded) in spec.datasets.iter().zip(&data) {
            if let Err(e) = loaded {
                warn!("dataset {}: {e}", d.name);
            }
        }
        cells
            .par_iter()
            .map(|c| run_cell(spec, c, &data[c.dataset]))
            .collect::<Vec<_>>()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(run) => runs.push(run),
            Err(reason) => {
                warn!(
                    "{} on {} seed {}: {reason}",
                    cell.variant.label(),
                    cell.instance(spec),
                    cell.seed
                );
                failures.push(CellFailure {
                    algorithm: cell.variant.label(),
                    instance: cell.instance(spec),
                    seed: cell.seed,
                    reason,
                });
            }
        }
    }

    let profiles = profile_complete(&runs, spec.delta).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let io = |e: DesError| CliError::Runtime(e.to_string());
    let create = |name: &str| {
        let path = out.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    };
    write_metrics(create(METRICS_FILE)?, &runs).map_err(io)?;
    write_profiles(create(PROFILE_FILE)?, &profiles).map_err(io)?;
    Ok(MatrixOutcome {
        runs,
        failures,
        profiles,
    })
}

/// Profiles over the algorithms that have runs on every instance; others
/// are dropped with a warning.
pub fn profile_complete(runs: &[LabelledRun], delta: f64) -> Result<Vec<ProfileCurve>, DesError> {
    if runs.is_empty() {
        return Ok(Vec::new());
    }
    let instances: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.instance.as_str()).collect();
    let mut covered: std::collections::BTreeMap<&str, std::collections::BTreeSet<&str>> = Default::default();
    for r in runs {
        covered.entry(&r.algorithm).or_default().insert(&r.instance);
    }
    let complete: Vec<LabelledRun> = runs
        .iter()
        .filter(|r| covered[r.algorithm.as_str()].len() == instances.len())
        .cloned()
        .collect();
    for (algo, seen) in &covered {
        if seen.len() != instances.len() {
            warn!("{algo} is missing instances and is left out of the profiles");
        }
    }
    if complete.is_empty() {
        return Ok(Vec::new());
    }
    compute_profiles(&complete, delta)
}

/// Median final training loss and test error per (algorithm, instance).
pub fn summary_table(outcome: &MatrixOutcome) -> String {
    let mut groups: Vec<((&str, &str), Vec<&LabelledRun>)> = Vec::new();
    for run in &outcome.runs {
        let key = (run.algorithm.as_str(), run.instance.as_str());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(run),
            None => groups.push((key, vec![run])),
        }
    }
    let algo_w = groups.iter().map(|((a, _), _)| a.len()).max().unwrap_or(4).max(9);
    let inst_w = groups.iter().map(|((_, i), _)| i.len()).max().unwrap_or(8).max(8);
    let mut s = String::new();
    writeln!(
        s,
        "{:<algo_w$}  {:<inst_w$}  {:>5}  {:>6}  {:>12}  {:>10}",
        "algorithm", "instance", "seeds", "rounds", "final loss", "test err"
    )
    .unwrap();
    for ((algo, inst), runs) in &groups {
        let records: Vec<_> = runs.iter().map(|r| &r.record).collect();
        let last = |m: Metric| {
            aggregate_runs(&records, m)
                .ok()
                .and_then(|a| a.median.last().copied())
                .unwrap_or(f64::NAN)
        };
        let rounds = records[0].rows.last().map_or(0, |r| r.round);
        writeln!(
            s,
            "{algo:<algo_w$}  {inst:<inst_w$}  {:>5}  {rounds:>6}  {:>12.6}  {:>10.4}",
            runs.len(),
            last(Metric::TrainLoss),
            last(Metric::TestError)
        )
        .unwrap();
    }
    for f in &outcome.failures {
        writeln!(
            s,
            "FAILED {} on {} seed {}: {}",
            f.algorithm, f.instance, f.seed, f.reason
        )
        .unwrap();
    }
    s
}
