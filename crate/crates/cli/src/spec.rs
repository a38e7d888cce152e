//! Experiment specification files.
//!
//! A spec is a TOML document. Unset keys take the benchmark protocol
//! defaults; `K` and `E` follow the dimension of each dataset unless set.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! losses = ["LR", "NSVM"]
//!
//! [[datasets]]
//! name = "syn20"
//! synthetic = { kind = "separable", dim = 20, examples = 4000 }
//!
//! [[algorithms]]
//! name = "des"
//! alpha = [0.1, 1, 10]
//! model = ["gaussian", "mixture-gaussian"]
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use des_core::baselines::SmoothingConfig;
use des_core::dataio::{LabelRule, SynthKind};
use des_core::server::MAX_SAFE_MOMENTUM;
use des_core::{LossKind, MutationKind};
use serde::Deserialize;
use toml::{Table, Value};

use crate::CliError;

pub const DEFAULT_WORKERS: usize = 10;
pub const DEFAULT_BATCH: usize = 1000;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_MIXTURE: usize = 8;
pub const DEFAULT_ALPHAS: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// `(K, E)` for a problem of dimension `n`: `(100, 1000)` up to
/// `n = 100`, `(500, 5000)` beyond.
pub fn protocol_iterations(dim: usize) -> (usize, usize) {
    if dim <= 100 {
        (100, 1000)
    } else {
        (500, 5000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AlgoKind {
    Des,
    FedZoGd,
    FedZoSgd,
    ZoSignSgd,
    EsCsa,
}

impl AlgoKind {
    pub const ALL: [AlgoKind; 5] = [
        AlgoKind::Des,
        AlgoKind::FedZoGd,
        AlgoKind::FedZoSgd,
        AlgoKind::ZoSignSgd,
        AlgoKind::EsCsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::Des => "des",
            AlgoKind::FedZoGd => "fed-zo-gd",
            AlgoKind::FedZoSgd => "fed-zo-sgd",
            AlgoKind::ZoSignSgd => "zo-signsgd",
            AlgoKind::EsCsa => "es-csa",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    fn uses_smoothing(self) -> bool {
        matches!(self, AlgoKind::FedZoGd | AlgoKind::FedZoSgd | AlgoKind::ZoSignSgd)
    }
}

pub fn model_name(kind: MutationKind) -> &'static str {
    match kind {
        MutationKind::StandardGaussian => "gaussian",
        MutationKind::MixtureGaussian => "mixture-gaussian",
        MutationKind::MixtureRademacher => "mixture-rademacher",
    }
}

fn model_from_name(name: &str) -> Option<MutationKind> {
    [
        MutationKind::StandardGaussian,
        MutationKind::MixtureGaussian,
        MutationKind::MixtureRademacher,
    ]
    .into_iter()
    .find(|k| model_name(*k) == name)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File {
        path: PathBuf,
        labels: LabelRule,
        dim: Option<usize>,
    },
    Synthetic {
        kind: SynthKind,
        dim: usize,
        examples: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DataSource,
    /// Seeds synthesis and the train/test split.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSpec {
    pub kind: AlgoKind,
    pub alpha: Vec<f64>,
    /// `None` uses the experiment-wide `b`.
    pub batch_size: Option<Vec<usize>>,
    pub beta: Vec<f64>,
    pub models: Vec<MutationKind>,
    pub mixture: Vec<usize>,
    pub allow_unsafe_momentum: bool,
    pub smoothing: SmoothingConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub datasets: Vec<DatasetSpec>,
    pub losses: Vec<LossKind>,
    pub algorithms: Vec<AlgorithmSpec>,
    /// `M`
    pub workers: usize,
    /// `b`
    pub batch_size: usize,
    /// `K`; chosen per dataset when unset.
    pub local_iters: Option<usize>,
    /// `E`; chosen per dataset when unset.
    pub epochs: Option<usize>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    pub train_fraction: f64,
    pub reg: f64,
    pub out: PathBuf,
    /// Write elapsed wall time; otherwise the column is zero and output is
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl ExperimentSpec {
    /// `(K, E)` for a dataset of dimension `dim`.
    pub fn iterations_for(&self, dim: usize) -> (usize, usize) {
        let (k, e) = protocol_iterations(dim);
        (self.local_iters.unwrap_or(k), self.epochs.unwrap_or(e))
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    datasets: Vec<RawDataset>,
    losses: Option<OneOrMany<String>>,
    algorithms: Vec<RawAlgorithm>,
    workers: Option<usize>,
    batch_size: Option<usize>,
    local_iters: Option<usize>,
    epochs: Option<usize>,
    seeds: Option<OneOrMany<u64>>,
    delta: Option<f64>,
    train_fraction: Option<f64>,
    reg: Option<f64>,
    out: Option<PathBuf>,
    #[serde(default)]
    record_wall_time: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    name: String,
    path: Option<PathBuf>,
    synthetic: Option<RawSynthetic>,
    /// `label > threshold` is positive for labels outside `{-1,1}`/`{0,1}`.
    label_threshold: Option<f64>,
    /// Threshold every label, not only non-binary ones.
    #[serde(default)]
    force_threshold: bool,
    dim: Option<usize>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    kind: String,
    dim: usize,
    examples: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgorithm {
    name: String,
    alpha: Option<OneOrMany<f64>>,
    batch_size: Option<OneOrMany<usize>>,
    beta: Option<OneOrMany<f64>>,
    model: Option<OneOrMany<String>>,
    l: Option<OneOrMany<usize>>,
    #[serde(default)]
    allow_unsafe_momentum: bool,
    mu: Option<f64>,
    directions: Option<usize>,
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Field {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Reads, overrides and validates a spec file.
pub fn load_spec(path: &Path, overrides: &[String]) -> Result<ExperimentSpec, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read spec {}: {e}", path.display())))?;
    parse_spec(&text, overrides)
}

pub fn parse_spec(text: &str, overrides: &[String]) -> Result<ExperimentSpec, CliError> {
    let mut table: Table = text
        .parse()
        .map_err(|e| CliError::Validation(format!("spec is not valid TOML: {e}")))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let raw: RawSpec = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(e.message().to_string()))?;
    validate(raw)
}

/// Applies `dotted.key=value`. Numeric segments index into arrays; the
/// value is read as TOML and falls back to a plain string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().unwrap();
    let mut slot: &mut Value = table
        .entry(parents.first().copied().unwrap_or(*last))
        .or_insert_with(|| Value::Table(Table::new()));
    if parents.is_empty() {
        *slot = value;
        return Ok(());
    }
    for part in parents.iter().skip(1).chain(std::iter::once(last)) {
        slot = match slot {
            Value::Table(t) => t.entry(*part).or_insert_with(|| Value::Table(Table::new())),
            Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| CliError::Validation(format!("`{part}` in `{key}` is not an array index")))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| CliError::Validation(format!("index {i} in `{key}` out of range ({len} entries)")))?
            }
            _ => return Err(CliError::Validation(format!("`{key}` descends into a scalar"))),
        };
    }
    *slot = value;
    Ok(())
}

fn distinct<T: PartialOrd + Copy + std::fmt::Debug>(field: &str, values: &[T]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(field_err(field, "must not be empty"));
    }
    for (i, a) in values.iter().enumerate() {
        if values[..i].iter().any(|b| b == a) {
            return Err(field_err(field, format!("duplicate value {a:?}")));
        }
    }
    Ok(())
}

fn validate(raw: RawSpec) -> Result<ExperimentSpec, CliError> {
    if raw.datasets.is_empty() {
        return Err(field_err("datasets", "at least one dataset is required"));
    }
    let mut names = BTreeSet::new();
    let mut datasets = Vec::new();
    for (i, d) in raw.datasets.into_iter().enumerate() {
        let at = |f: &str| format!("datasets.{i}.{f}");
        if d.name.is_empty() || d.name.contains([',', '/', '"']) {
            return Err(field_err(at("name"), "must be nonempty without `,`, `/` or quotes"));
        }
        if !names.insert(d.name.clone()) {
            return Err(field_err(at("name"), format!("duplicate dataset `{}`", d.name)));
        }
        let source = match (d.path, d.synthetic) {
            (Some(path), None) => {
                let labels = match (d.label_threshold, d.force_threshold) {
                    (Some(t), true) => LabelRule::Threshold(t),
                    (Some(t), false) => LabelRule::AutoOr(t),
                    (None, false) => LabelRule::Auto,
                    (None, true) => return Err(field_err(at("force_threshold"), "needs label_threshold")),
                };
                DataSource::File {
                    path,
                    labels,
                    dim: d.dim,
                }
            }
            (None, Some(s)) => {
                if d.label_threshold.is_some() || d.force_threshold || d.dim.is_some() {
                    return Err(field_err(
                        at("synthetic"),
                        "label and dimension options apply to files only",
                    ));
                }
                let kind = match s.kind.as_str() {
                    "separable" => SynthKind::SeparableLinear,
                    "noisy" => SynthKind::NoisyLinear,
                    other => {
                        return Err(field_err(
                            at("synthetic.kind"),
                            format!("`{other}` is not `separable` or `noisy`"),
                        ))
                    }
                };
                if s.dim == 0 {
                    return Err(field_err(at("synthetic.dim"), "must be positive"));
                }
                if s.examples < 2 {
                    return Err(field_err(at("synthetic.examples"), "need at least 2 examples"));
                }
                DataSource::Synthetic {
                    kind,
                    dim: s.dim,
                    examples: s.examples,
                }
            }
            _ => return Err(field_err(at("path"), "give exactly one of `path` or `synthetic`")),
        };
        datasets.push(DatasetSpec {
            name: d.name,
            source,
            seed: d.seed,
        });
    }

    let losses = match raw.losses {
        None => vec![LossKind::Logistic],
        Some(l) => l
            .into_vec()
            .iter()
            .map(|name| {
                LossKind::from_name(name)
                    .ok_or_else(|| field_err("losses", format!("`{name}` is not one of LR, NSVM, LSVM")))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    distinct("losses", &losses.iter().map(|l| l.name()).collect::<Vec<_>>())?;

    let workers = raw.workers.unwrap_or(DEFAULT_WORKERS);
    if workers == 0 {
        return Err(field_err("workers", "must be positive"));
    }
    let batch_size = raw.batch_size.unwrap_or(DEFAULT_BATCH);
    if batch_size == 0 {
        return Err(field_err("batch_size", "must be positive"));
    }
    if raw.local_iters == Some(0) {
        return Err(field_err("local_iters", "must be positive"));
    }
    let seeds = raw.seeds.map_or_else(|| (0..8).collect(), OneOrMany::into_vec);
    distinct("seeds", &seeds)?;
    let delta = raw.delta.unwrap_or(DEFAULT_DELTA);
    if !(delta > 0.0 && delta < 1.0) {
        return Err(field_err("delta", format!("{delta} not in (0, 1)")));
    }
    let train_fraction = raw.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION);
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(field_err("train_fraction", format!("{train_fraction} not in (0, 1)")));
    }
    let reg = raw.reg.unwrap_or(des_core::run::DEFAULT_REG);
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(field_err("reg", "must be nonnegative"));
    }

    if raw.algorithms.is_empty() {
        return Err(field_err("algorithms", "at least one algorithm is required"));
    }
    let mut algorithms = Vec::new();
    for (i, a) in raw.algorithms.into_iter().enumerate() {
        algorithms.push(validate_algorithm(i, a)?);
    }

    Ok(ExperimentSpec {
        datasets,
        losses,
        algorithms,
        workers,
        batch_size,
        local_iters: raw.local_iters,
        epochs: raw.epochs,
        seeds,
        delta,
        train_fraction,
        reg,
        out: raw.out.unwrap_or_else(|| PathBuf::from("results")),
        record_wall_time: raw.record_wall_time,
    })
}

fn validate_algorithm(i: usize, a: RawAlgorithm) -> Result<AlgorithmSpec, CliError> {
    let at = |f: &str| format!("algorithms.{i}.{f}");
    let kind = AlgoKind::from_name(&a.name).ok_or_else(|| {
        let known: Vec<_> = AlgoKind::ALL.iter().map(|k| k.name()).collect();
        field_err(at("name"), format!("`{}` is not one of {}", a.name, known.join(", ")))
    })?;
    let is_des = kind == AlgoKind::Des;
    let only_des = |present: bool, f: &str| {
        if present && !is_des {
            Err(field_err(at(f), format!("not used by {}", kind.name())))
        } else {
            Ok(())
        }
    };
    only_des(a.beta.is_some(), "beta")?;
    only_des(a.model.is_some(), "model")?;
    only_des(a.l.is_some(), "l")?;
    only_des(a.allow_unsafe_momentum, "allow_unsafe_momentum")?;
    if !kind.uses_smoothing() && (a.mu.is_some() || a.directions.is_some()) {
        return Err(field_err(at("mu"), format!("smoothing is not used by {}", kind.name())));
    }

    let alpha = a.alpha.map_or_else(|| DEFAULT_ALPHAS.to_vec(), OneOrMany::into_vec);
    distinct(&at("alpha"), &alpha)?;
    if let Some(bad) = alpha.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(field_err(at("alpha"), format!("{bad} is not positive")));
    }
    let batch_size = a.batch_size.map(OneOrMany::into_vec);
    if let Some(b) = &batch_size {
        distinct(&at("batch_size"), b)?;
        if b.contains(&0) {
            return Err(field_err(at("batch_size"), "must be positive"));
        }
    }
    let beta = a.beta.map_or_else(|| vec![DEFAULT_BETA], OneOrMany::into_vec);
    distinct(&at("beta"), &beta)?;
    for &b in &beta {
        if !(0.0..1.0).contains(&b) {
            return Err(field_err(at("beta"), format!("{b} not in [0, 1)")));
        }
        if b >= MAX_SAFE_MOMENTUM && !a.allow_unsafe_momentum {
            return Err(field_err(
                at("beta"),
                format!("{b} is at or above the safe bound {MAX_SAFE_MOMENTUM:.4}; set allow_unsafe_momentum"),
            ));
        }
    }
    let models = match a.model {
        None => vec![MutationKind::StandardGaussian],
        Some(m) => m
            .into_vec()
            .iter()
            .map(|name| {
                model_from_name(name).ok_or_else(|| {
                    field_err(
                        at("model"),
                        format!("`{name}` is not gaussian, mixture-gaussian or mixture-rademacher"),
                    )
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    distinct(&at("model"), &models.iter().map(|m| model_name(*m)).collect::<Vec<_>>())?;
    let mixture = a.l.map_or_else(|| vec![DEFAULT_MIXTURE], OneOrMany::into_vec);
    distinct(&at("l"), &mixture)?;
    if mixture.contains(&0) {
        return Err(field_err(at("l"), "must be positive"));
    }
    let mut smoothing = SmoothingConfig::default();
    if let Some(mu) = a.mu {
        smoothing.mu = mu;
    }
    if let Some(d) = a.directions {
        smoothing.directions = d;
    }
    smoothing.validate().map_err(|e| field_err(at("mu"), e.to_string()))?;

    Ok(AlgorithmSpec {
        kind,
        alpha,
        batch_size,
        beta,
        models,
        mixture,
        allow_unsafe_momentum: a.allow_unsafe_momentum,
        smoothing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [[datasets]]
        name = "syn"
        synthetic = { kind = "separable", dim = 20, examples = 100 }

        [[algorithms]]
        name = "des"
    "#;

    fn field_of(err: CliError) -> String {
        match err {
            CliError::Field { field, .. } => field,
            other => panic!("expected a field error, got {other}"),
        }
    }

    #[test]
    fn defaults_follow_protocol() {
        let spec = parse_spec(MINIMAL, &[]).unwrap();
        assert_eq!(spec.workers, 10);
        assert_eq!(spec.batch_size, 1000);
        assert_eq!(spec.algorithms[0].beta, vec![0.5]);
        assert_eq!(spec.algorithms[0].mixture, vec![8]);
        assert_eq!(spec.algorithms[0].alpha, vec![0.1, 1.0, 10.0]);
        assert_eq!(spec.losses, vec![LossKind::Logistic]);
        assert_eq!(spec.seeds, (0..8).collect::<Vec<_>>());
        assert_eq!(spec.delta, 0.1);
        assert_eq!(spec.iterations_for(20), (100, 1000));
        assert_eq!(spec.iterations_for(100), (100, 1000));
        assert_eq!(spec.iterations_for(101), (500, 5000));
    }

    #[test]
    fn beta_out_of_range_names_field() {
        let err = parse_spec(MINIMAL, &["algorithms.0.beta=1.5".into()]).unwrap_err();
        assert_eq!(field_of(err), "algorithms.0.beta");
        let err = parse_spec(MINIMAL, &["algorithms.0.beta=0.8".into()]).unwrap_err();
        assert_eq!(field_of(err), "algorithms.0.beta");
        let ok = parse_spec(
            MINIMAL,
            &[
                "algorithms.0.beta=0.8".into(),
                "algorithms.0.allow_unsafe_momentum=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(ok.algorithms[0].beta, vec![0.8]);
    }

    #[test]
    fn delta_checked() {
        for d in ["0", "1", "-0.5"] {
            let err = parse_spec(MINIMAL, &[format!("delta={d}")]).unwrap_err();
            assert_eq!(field_of(err), "delta");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_spec(&format!("{MINIMAL}\nsurprise = 1"), &[]).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");
        let err = parse_spec(MINIMAL, &["algorithms.0.gamma=2".into()]).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn overrides() {
        let spec = parse_spec(
            MINIMAL,
            &[
                "workers=4".into(),
                "seeds=[3, 5]".into(),
                "algorithms.0.alpha=2".into(),
                "algorithms.0.model=[\"gaussian\", \"mixture-rademacher\"]".into(),
                "datasets.0.synthetic.kind=noisy".into(),
            ],
        )
        .unwrap();
        assert_eq!(spec.workers, 4);
        assert_eq!(spec.seeds, vec![3, 5]);
        assert_eq!(spec.algorithms[0].alpha, vec![2.0]);
        assert_eq!(spec.algorithms[0].models.len(), 2);
        assert!(matches!(
            spec.datasets[0].source,
            DataSource::Synthetic {
                kind: SynthKind::NoisyLinear,
                ..
            }
        ));
        assert!(parse_spec(MINIMAL, &["algorithms.3.alpha=1".into()]).is_err());
        assert!(parse_spec(MINIMAL, &["workers".into()]).is_err());
    }

    #[test]
    fn matrix_fields_validated() {
        let err = parse_spec(MINIMAL, &["seeds=[1, 1]".into()]).unwrap_err();
        assert_eq!(field_of(err), "seeds");
        let err = parse_spec(MINIMAL, &["seeds=[]".into()]).unwrap_err();
        assert_eq!(field_of(err), "seeds");
        let err = parse_spec(MINIMAL, &["losses=[\"LR\", \"hinge\"]".into()]).unwrap_err();
        assert_eq!(field_of(err), "losses");
        let err = parse_spec(MINIMAL, &["algorithms.0.name=\"cma\"".into()]).unwrap_err();
        assert_eq!(field_of(err), "algorithms.0.name");
    }

    #[test]
    fn options_must_apply() {
        let err = parse_spec(
            MINIMAL,
            &["algorithms.0.name=\"es-csa\"".into(), "algorithms.0.beta=0.2".into()],
        )
        .unwrap_err();
        assert_eq!(field_of(err), "algorithms.0.beta");
        let err = parse_spec(MINIMAL, &["algorithms.0.mu=0.001".into()]).unwrap_err();
        assert_eq!(field_of(err), "algorithms.0.mu");
    }

    #[test]
    fn dataset_sources() {
        let text = r#"
            [[datasets]]
            name = "a9a"
            path = "a9a.txt"
            label_threshold = 4

            [[algorithms]]
            name = "zo-signsgd"
            mu = 0.001
        "#;
        let spec = parse_spec(text, &[]).unwrap();
        assert_eq!(
            spec.datasets[0].source,
            DataSource::File {
                path: "a9a.txt".into(),
                labels: LabelRule::AutoOr(4.0),
                dim: None
            }
        );
        assert_eq!(spec.algorithms[0].smoothing.mu, 0.001);
        let both = format!("{text}\n");
        let err = parse_spec(
            &both,
            &["datasets.0.synthetic={kind=\"noisy\", dim=2, examples=4}".into()],
        )
        .unwrap_err();
        assert_eq!(field_of(err), "datasets.0.path");
    }
}
