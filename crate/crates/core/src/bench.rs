//! Run records, multi-seed aggregation and Dolan-Moré performance profiles.
//!
//! Metrics persist as CSV with one row per
//! `(algo, instance, seed, round)`; floats are written with 17 significant
//! digits so values survive a write/read cycle exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use crate::error::{DesError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub cum_evals: u64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wall_ms: f64,
}

/// Per-round metrics of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub algorithm: String,
    /// Human-readable echo of the configuration that produced the run.
    pub config: String,
    pub rows: Vec<MetricRow>,
}

impl RunRecord {
    pub fn new(algorithm: impl Into<String>, config: impl Into<String>) -> Self {
        Self {
            algorithm: algorithm.into(),
            config: config.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.round <= last.round || row.cum_evals < last.cum_evals {
                return Err(DesError::invalid(
                    "rows",
                    "rounds must increase and evaluations must not decrease",
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_loss)
    }

    /// Rows with the wall-clock column zeroed, for byte-stable output.
    pub fn without_timing(mut self) -> Self {
        for row in &mut self.rows {
            row.wall_ms = 0.0;
        }
        self
    }
}

/// Is the decrease `f_x0 - f_achieved` more than `delta` of the best
/// decrease `f_x0 - f_best`?
pub fn solved(f_x0: f64, f_achieved: f64, f_best: f64, delta: f64) -> Result<bool> {
    check_delta(delta)?;
    // compared against the threshold value so that e.g. 0.95 vs 1 - 0.05
    // lands exactly on the boundary
    Ok(f_achieved < f_x0 - delta * (f_x0 - f_best))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DesError::invalid("delta", format!("{delta} not in (0, 1)")));
    }
    Ok(())
}

/// A run tagged with where it belongs in an experiment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledRun {
    pub algorithm: String,
    pub instance: String,
    pub seed: u64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    TrainLoss,
    TrainError,
    TestError,
}

impl Metric {
    fn of(self, row: &MetricRow) -> f64 {
        match self {
            Metric::TrainLoss => row.train_loss,
            Metric::TrainError => row.train_err,
            Metric::TestError => row.test_err,
        }
    }
}

/// Median and quartile band per round across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub rounds: Vec<usize>,
    pub median: Vec<f64>,
    pub p25: Vec<f64>,
    pub p75: Vec<f64>,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn aggregate_runs(records: &[&RunRecord], metric: Metric) -> Result<Aggregate> {
    let first = records.first().ok_or(DesError::Empty("no runs to aggregate"))?;
    let rounds: Vec<usize> = first.rows.iter().map(|r| r.round).collect();
    for rec in records {
        if rec.rows.len() != rounds.len() || rec.rows.iter().zip(&rounds).any(|(r, &t)| r.round != t) {
            return Err(DesError::invalid("records", "runs have mismatched round grids"));
        }
    }
    let mut agg = Aggregate {
        rounds,
        median: Vec::new(),
        p25: Vec::new(),
        p75: Vec::new(),
    };
    let mut column = Vec::with_capacity(records.len());
    for pos in 0..agg.rounds.len() {
        column.clear();
        column.extend(records.iter().map(|r| metric.of(&r.rows[pos])));
        column.sort_by(f64::total_cmp);
        agg.median.push(percentile(&column, 0.5));
        agg.p25.push(percentile(&column, 0.25));
        agg.p75.push(percentile(&column, 0.75));
    }
    Ok(agg)
}

/// `rho(tau)` as a right-continuous step function.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileCurve {
    pub algorithm: String,
    /// `(tau, rho)` pairs: the value at `tau = 1` followed by every jump.
    pub breakpoints: Vec<(f64, f64)>,
}

impl ProfileCurve {
    pub fn rho_at(&self, tau: f64) -> f64 {
        self.breakpoints
            .iter()
            .take_while(|(t, _)| *t <= tau)
            .last()
            .map_or(0.0, |(_, r)| *r)
    }
}

/// Performance ratios and profiles over `(algorithm, instance)` cells.
///
/// Each cell's curve is the per-round median training loss over its seeds.
/// An instance's best value is the minimum training loss seen in any run of
/// any algorithm at any round. A cell's cost is the first round at which it
/// counts as [`solved`]; unsolved cells get an infinite ratio.
pub fn compute_profiles(runs: &[LabelledRun], delta: f64) -> Result<Vec<ProfileCurve>> {
    check_delta(delta)?;
    if runs.is_empty() {
        return Err(DesError::Empty("no runs to profile"));
    }
    let mut cells: BTreeMap<(&str, &str), Vec<&RunRecord>> = BTreeMap::new();
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for run in runs {
        cells
            .entry((run.algorithm.as_str(), run.instance.as_str()))
            .or_default()
            .push(&run.record);
        let lowest = run
            .record
            .rows
            .iter()
            .map(|r| r.train_loss)
            .fold(f64::INFINITY, f64::min);
        let slot = best.entry(run.instance.as_str()).or_insert(f64::INFINITY);
        *slot = slot.min(lowest);
    }
    let algorithms: BTreeSet<&str> = cells.keys().map(|k| k.0).collect();
    let instances: BTreeSet<&str> = cells.keys().map(|k| k.1).collect();

    let mut cost: BTreeMap<(&str, &str), Option<usize>> = BTreeMap::new();
    for &a in &algorithms {
        for &i in &instances {
            let records = cells
                .get(&(a, i))
                .ok_or_else(|| DesError::invalid("records", format!("missing runs for algorithm {a} on {i}")))?;
            let curve = aggregate_runs(records, Metric::TrainLoss)?;
            let Some(&f_x0) = curve.median.first() else {
                return Err(DesError::Empty("run without rows"));
            };
            let mut first = None;
            for (pos, &f) in curve.median.iter().enumerate() {
                if solved(f_x0, f, best[i], delta)? {
                    first = Some(curve.rounds[pos]);
                    break;
                }
            }
            cost.insert((a, i), first);
        }
    }

    let mut curves = Vec::with_capacity(algorithms.len());
    for &a in &algorithms {
        let mut ratios: Vec<f64> = Vec::new();
        for &i in &instances {
            let best_rounds = algorithms.iter().filter_map(|&b| cost[&(b, i)]).min();
            if let (Some(r), Some(min)) = (cost[&(a, i)], best_rounds) {
                // a solved cell never solves at round 0, so min >= 1
                ratios.push(r as f64 / min.max(1) as f64);
            }
        }
        ratios.sort_by(f64::total_cmp);
        let total = instances.len() as f64;
        let count_le = |tau: f64| ratios.iter().filter(|&&r| r <= tau).count() as f64 / total;
        let mut breakpoints = vec![(1.0, count_le(1.0))];
        for &r in &ratios {
            if r > breakpoints.last().unwrap().0 {
                breakpoints.push((r, count_le(r)));
            }
        }
        curves.push(ProfileCurve {
            algorithm: a.to_string(),
            breakpoints,
        });
    }
    Ok(curves)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub const METRICS_HEADER: [&str; 9] = [
    "algo",
    "instance",
    "seed",
    "round",
    "cum_evals",
    "train_loss",
    "train_err",
    "test_err",
    "wall_ms",
];

pub const PROFILE_HEADER: [&str; 3] = ["algo", "tau", "rho"];

pub fn write_metrics<W: Write>(out: W, runs: &[LabelledRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for run in runs {
        for row in &run.record.rows {
            w.write_record([
                run.algorithm.clone(),
                run.instance.clone(),
                run.seed.to_string(),
                row.round.to_string(),
                row.cum_evals.to_string(),
                fmt_f64(row.train_loss),
                fmt_f64(row.train_err),
                fmt_f64(row.test_err),
                fmt_f64(row.wall_ms),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics CSV back into runs, in order of first appearance.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<LabelledRun>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(DesError::Parse {
            line: 1,
            reason: format!("unexpected header, want {}", METRICS_HEADER.join(",")),
        });
    }
    let mut runs: Vec<LabelledRun> = Vec::new();
    let mut index: BTreeMap<(String, String, u64), usize> = BTreeMap::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| DesError::Parse {
            line,
            reason: format!("invalid {what}"),
        };
        let float = |i: usize, what: &str| field(i).parse::<f64>().map_err(|_| bad(what));
        let seed: u64 = field(2).parse().map_err(|_| bad("seed"))?;
        let row = MetricRow {
            round: field(3).parse().map_err(|_| bad("round"))?,
            cum_evals: field(4).parse().map_err(|_| bad("cum_evals"))?,
            train_loss: float(5, "train_loss")?,
            train_err: float(6, "train_err")?,
            test_err: float(7, "test_err")?,
            wall_ms: float(8, "wall_ms")?,
        };
        let key = (field(0).to_string(), field(1).to_string(), seed);
        let pos = *index.entry(key.clone()).or_insert_with(|| {
            runs.push(LabelledRun {
                algorithm: key.0.clone(),
                instance: key.1.clone(),
                seed,
                record: RunRecord::new(key.0.clone(), ""),
            });
            runs.len() - 1
        });
        runs[pos].record.push(row).map_err(|e| DesError::Parse {
            line,
            reason: e.to_string(),
        })?;
    }
    Ok(runs)
}

pub fn write_profiles<W: Write>(out: W, curves: &[ProfileCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROFILE_HEADER)?;
    for c in curves {
        for &(tau, rho) in &c.breakpoints {
            w.write_record([c.algorithm.clone(), fmt_f64(tau), fmt_f64(rho)])?;
        }
    }
    w.flush()?;
    Ok(())
}
