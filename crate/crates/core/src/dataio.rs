//! LIBSVM parsing, train/test splitting, worker partitioning and synthetic
//! data.
//!
//! LIBSVM indices are 1-based on disk and 0-based in memory.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DesError, Result};
use crate::objective::{Dataset, SparseExample};
use crate::stream::RngStream;

/// How raw labels become `{-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LabelRule {
    /// Keep `{-1,+1}`, map `{0,1}` to `{-1,+1}`, and fall back to
    /// `label > threshold` for anything else if a threshold is given.
    #[default]
    Auto,
    AutoOr(f64),
    /// Always `label > threshold`.
    Threshold(f64),
}

impl LabelRule {
    /// The multi-class digit transform: digits above 4 are positive.
    pub const DIGITS_ABOVE_FOUR: LabelRule = LabelRule::Threshold(4.0);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub labels: LabelRule,
    /// Overrides the inferred dimension (max index seen).
    pub dim: Option<usize>,
}

struct RawLine {
    line: usize,
    label: f64,
    indices: Vec<u32>,
    values: Vec<f64>,
}

fn parse_line(line_no: usize, text: &str) -> Result<Option<RawLine>> {
    let text = text.split('#').next().unwrap_or("");
    let mut tokens = text.split_whitespace();
    let Some(label_tok) = tokens.next() else {
        return Ok(None);
    };
    let err = |reason: String| DesError::Parse { line: line_no, reason };
    let label: f64 = label_tok
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite())
        .ok_or_else(|| err(format!("invalid label `{label_tok}`")))?;

    let mut indices = Vec::new();
    let mut values = Vec::new();
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| err(format!("expected `index:value`, got `{tok}`")))?;
        let idx: i64 = idx.parse().map_err(|_| err(format!("non-numeric index `{idx}`")))?;
        if idx <= 0 || idx > i64::from(u32::MAX) {
            return Err(err(format!("index {idx} out of range (indices are 1-based)")));
        }
        let val: f64 = val
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err(format!("invalid value `{val}`")))?;
        let zero_based = (idx - 1) as u32;
        if indices.last().is_some_and(|&prev| prev >= zero_based) {
            return Err(err(format!("indices not strictly increasing at index {idx}")));
        }
        indices.push(zero_based);
        values.push(val);
    }
    Ok(Some(RawLine {
        line: line_no,
        label,
        indices,
        values,
    }))
}

fn map_labels(raw: &[RawLine], rule: LabelRule) -> Result<Vec<i8>> {
    let threshold = |t: f64| raw.iter().map(|r| if r.label > t { 1 } else { -1 }).collect();
    match rule {
        LabelRule::Threshold(t) => Ok(threshold(t)),
        LabelRule::Auto | LabelRule::AutoOr(_) => {
            if raw.iter().all(|r| r.label == 1.0 || r.label == -1.0) {
                Ok(raw.iter().map(|r| r.label as i8).collect())
            } else if raw.iter().all(|r| r.label == 0.0 || r.label == 1.0) {
                Ok(raw.iter().map(|r| if r.label == 1.0 { 1 } else { -1 }).collect())
            } else if let LabelRule::AutoOr(t) = rule {
                Ok(threshold(t))
            } else {
                let bad = raw
                    .iter()
                    .find(|r| ![-1.0, 0.0, 1.0].contains(&r.label))
                    .unwrap_or(&raw[0]);
                Err(DesError::Parse {
                    line: bad.line,
                    reason: format!("label {} is not binary; configure a label threshold", bad.label),
                })
            }
        }
    }
}

/// Parses LIBSVM text. Blank lines and `#` comments are skipped.
pub fn parse_libsvm<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<Dataset> {
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(parsed) = parse_line(i + 1, &line?)? {
            raw.push(parsed);
        }
    }
    if raw.is_empty() {
        return Err(DesError::Empty("no examples in LIBSVM input"));
    }
    let labels = map_labels(&raw, opts.labels)?;
    let inferred = raw
        .iter()
        .filter_map(|r| r.indices.last())
        .map(|&i| i as usize + 1)
        .max()
        .unwrap_or(1);
    let dim = match opts.dim {
        Some(d) if d < inferred => {
            return Err(DesError::invalid(
                "n",
                format!("override {d} is below the largest index {inferred}"),
            ))
        }
        Some(d) => d,
        None => inferred,
    };
    let examples = raw
        .into_iter()
        .zip(labels)
        .map(|(r, label)| {
            SparseExample::new(r.indices, r.values, label).map_err(|e| DesError::Parse {
                line: r.line,
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, dim)
}

pub fn parse_libsvm_str(text: &str, opts: &ParseOptions) -> Result<Dataset> {
    parse_libsvm(text.as_bytes(), opts)
}

/// Reads a LIBSVM file, transparently decompressing gzip input.
pub fn read_libsvm_file(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<Dataset> {
    let mut file = BufReader::new(File::open(path.as_ref())?);
    let gzipped = file.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    if gzipped {
        parse_libsvm(BufReader::new(GzDecoder::new(file)), opts)
    } else {
        parse_libsvm(file, opts)
    }
}

/// Writes `data` in LIBSVM format; floats use their shortest exact form.
pub fn write_libsvm<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    for e in data.examples() {
        write!(out, "{}", if e.label() > 0.0 { "+1" } else { "-1" })?;
        for (&i, &v) in e.indices().iter().zip(e.values()) {
            write!(out, " {}:{}", i + 1, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stream: RngStream,
}

/// Seeded shuffle, then the first `round(fraction * N)` examples train.
pub fn split_train_test(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(DesError::invalid("train_fraction", format!("{f} not in (0, 1)")));
    }
    let n = data.len();
    if n < 2 {
        return Err(DesError::invalid("dataset", "need at least two examples to split"));
    }
    let n_train = (f * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DesError::invalid(
            "train_fraction",
            format!("{f} of {n} examples leaves an empty side"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut spec.stream.rng());
    Ok((data.subset(&order[..n_train])?, data.subset(&order[n_train..])?))
}

/// Disjoint worker shards over training-set indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn shard(&self, worker: usize) -> &[usize] {
        &self.shards[worker]
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }
}

/// Seeded shuffle of `0..n_train`, dealt round-robin to `workers` shards.
pub fn partition_uniform(n_train: usize, workers: usize, stream: &RngStream) -> Result<PartitionPlan> {
    if workers == 0 {
        return Err(DesError::invalid("M", "need at least one worker"));
    }
    if workers > n_train {
        return Err(DesError::invalid(
            "M",
            format!("{workers} workers but only {n_train} training examples"),
        ));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut stream.rng());
    let mut shards = vec![Vec::with_capacity(n_train / workers + 1); workers];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % workers].push(idx);
    }
    Ok(PartitionPlan { shards })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Labels are the sign of a hidden linear score.
    SeparableLinear,
    /// As `SeparableLinear`, with each label flipped with probability 0.1.
    NoisyLinear,
}

pub const NOISY_FLIP_RATE: f64 = 0.1;

/// Fraction of coordinates that are nonzero in a synthetic example.
pub const SYNTH_DENSITY: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: Dataset,
    /// The hidden weight vector.
    pub truth: Vec<f64>,
}

/// Generates `examples` points in dimension `dim`. Features are Gaussian on
/// a random subset of coordinates (at least one per example).
pub fn synth_dataset(kind: SynthKind, dim: usize, examples: usize, stream: &RngStream) -> Result<Synthetic> {
    if dim == 0 || examples == 0 {
        return Err(DesError::invalid("synthetic", "n and N must be positive"));
    }
    let mut rng = stream.rng();
    let truth: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(examples);
    for _ in 0..examples {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for j in 0..dim {
            if rng.random::<f64>() < SYNTH_DENSITY {
                indices.push(j as u32);
                values.push(rng.sample(StandardNormal));
            }
        }
        if indices.is_empty() {
            indices.push(rng.random_range(0..dim) as u32);
            values.push(rng.sample(StandardNormal));
        }
        let score: f64 = indices.iter().zip(&values).map(|(&j, v)| truth[j as usize] * v).sum();
        let mut label: i8 = if score >= 0.0 { 1 } else { -1 };
        if kind == SynthKind::NoisyLinear && rng.random::<f64>() < NOISY_FLIP_RATE {
            label = -label;
        }
        out.push(SparseExample::new(indices, values, label)?);
    }
    Ok(Synthetic {
        data: Dataset::new(out, dim)?,
        truth,
    })
}
