//! The worker-side (1+1)-ES with a diminishing step-size schedule.
//!
//! Each iteration perturbs the parent, evaluates the candidate once on the
//! fixed objective and keeps it if it is no worse. The parent value is
//! cached, so a run of `K` iterations costs `K` evaluations after the one
//! initial evaluation of the starting point.

use crate::error::{DesError, Result};
use crate::mutation::{MutationModel, MutationSampler};
use crate::objective::BatchObjective;
use crate::stream::RngStream;

/// Round-level initial step `alpha / (t+1)^(1/4)`.
pub fn initial_step(alpha: f64, round: usize) -> f64 {
    alpha / ((round + 1) as f64).powf(0.25)
}

/// Step at round `t`, iteration `k`: `alpha (t+1)^(-1/4) (k+1)^(-1/2)`.
pub fn step_size(alpha: f64, round: usize, iter: usize) -> f64 {
    iteration_step(initial_step(alpha, round), iter)
}

#[inline]
fn iteration_step(initial: f64, iter: usize) -> f64 {
    initial / ((iter + 1) as f64).sqrt()
}

/// Comparison-based acceptance: ties accept.
pub fn accept(f_parent: f64, f_candidate: f64) -> Result<bool> {
    if f_parent.is_nan() || f_candidate.is_nan() {
        return Err(DesError::NanObjective {
            context: format!("comparing parent {f_parent} with candidate {f_candidate}"),
        });
    }
    Ok(f_candidate <= f_parent)
}

#[derive(Debug, Clone, Copy)]
pub struct LocalConfig {
    pub iterations: usize,
    pub model: MutationModel,
    pub initial_step: f64,
}

impl LocalConfig {
    pub fn new(iterations: usize, model: MutationModel, initial_step: f64) -> Result<Self> {
        if iterations == 0 {
            return Err(DesError::invalid("K", "need at least one local iteration"));
        }
        if !(initial_step > 0.0 && initial_step.is_finite()) {
            return Err(DesError::invalid("alpha", "initial step-size must be positive"));
        }
        Ok(Self {
            iterations,
            model,
            initial_step,
        })
    }
}

/// Output of one worker for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerResult {
    pub v_final: Vec<f64>,
    /// Candidate evaluations, `K * cost`.
    pub evals_used: u64,
    /// The evaluation of the starting point, `cost`.
    pub reference_evals: u64,
    pub accepted_count: usize,
    /// Parent objective value before iteration 0 and after each iteration.
    pub parent_values: Vec<f64>,
}

/// Anything that yields mutation vectors as sparse entries.
pub trait PerturbationSource {
    fn next_into(&mut self, out: &mut Vec<(usize, f64)>);
}

impl PerturbationSource for MutationSampler {
    fn next_into(&mut self, out: &mut Vec<(usize, f64)>) {
        self.draw_into(out);
    }
}

/// Runs the local ES with mutations drawn from `stream`.
pub fn run_local_es<O: BatchObjective + ?Sized>(
    x_start: &[f64],
    cfg: &LocalConfig,
    obj: &O,
    stream: &RngStream,
) -> Result<WorkerResult> {
    let mut sampler = MutationSampler::new(cfg.model, stream);
    run_local_es_with(x_start, cfg, obj, &mut sampler, |_, _, _| {})
}

/// As [`run_local_es`] with an explicit mutation source and a hook called
/// after every iteration with `(k, parent, f(parent))`.
pub fn run_local_es_with<O, S, F>(
    x_start: &[f64],
    cfg: &LocalConfig,
    obj: &O,
    source: &mut S,
    mut observe: F,
) -> Result<WorkerResult>
where
    O: BatchObjective + ?Sized,
    S: PerturbationSource + ?Sized,
    F: FnMut(usize, &[f64], f64),
{
    if x_start.len() != obj.dim() {
        return Err(DesError::DimensionMismatch {
            expected: obj.dim(),
            actual: x_start.len(),
        });
    }
    if cfg.iterations == 0 {
        return Err(DesError::invalid("K", "need at least one local iteration"));
    }
    let mut v = x_start.to_vec();
    let mut f_parent = obj.reference_value(&v)?;
    if f_parent.is_nan() {
        return Err(DesError::NanObjective {
            context: "starting point".into(),
        });
    }
    let mut parent_values = Vec::with_capacity(cfg.iterations + 1);
    parent_values.push(f_parent);

    let mut entries = Vec::new();
    let mut saved: Vec<(usize, f64)> = Vec::new();
    let mut accepted_count = 0;
    for k in 0..cfg.iterations {
        let step = iteration_step(cfg.initial_step, k);
        entries.clear();
        source.next_into(&mut entries);

        // perturb in place; only the touched coordinates are saved
        saved.clear();
        for &(i, u) in &entries {
            saved.push((i, v[i]));
            v[i] += step * u;
        }
        let f_candidate = obj.value(&v)?;
        let keep = accept(f_parent, f_candidate).map_err(|_| DesError::NanObjective {
            context: format!("local iteration {k}"),
        })?;
        if keep {
            f_parent = f_candidate;
            accepted_count += 1;
        } else {
            for &(i, old) in saved.iter().rev() {
                v[i] = old;
            }
        }
        parent_values.push(f_parent);
        observe(k, &v, f_parent);
    }

    Ok(WorkerResult {
        v_final: v,
        evals_used: cfg.iterations as u64 * obj.cost(),
        reference_evals: obj.cost(),
        accepted_count,
        parent_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mutation::MutationKind;
    use crate::objective::FnObjective;
    use crate::stream::Purpose;

    struct Fixed(Vec<Vec<f64>>);

    impl PerturbationSource for Fixed {
        fn next_into(&mut self, out: &mut Vec<(usize, f64)>) {
            let u = self.0.remove(0);
            out.extend(u.into_iter().enumerate());
        }
    }

    fn sphere(dim: usize) -> FnObjective<impl Fn(&[f64]) -> f64> {
        FnObjective::new(dim, |x: &[f64]| x.iter().map(|v| v * v).sum())
    }

    fn cfg(k: usize, alpha: f64, dim: usize) -> LocalConfig {
        LocalConfig::new(k, MutationModel::standard(dim).unwrap(), alpha).unwrap()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(step_size(1.0, 0, 0), 1.0);
        assert_eq!(step_size(2.0, 15, 3), 0.5);
        assert_eq!(step_size(1.0, 0, 3), 0.5);
    }

    #[test]
    fn acceptance_rule() {
        assert!(accept(1.0, 0.5).unwrap());
        assert!(accept(1.0, 1.0).unwrap());
        assert!(!accept(1.0, 1.1).unwrap());
        assert!(accept(f64::NAN, 1.0).is_err());
        assert!(accept(1.0, f64::NAN).is_err());
    }

    #[test]
    fn config_validation() {
        let model = MutationModel::standard(2).unwrap();
        assert!(LocalConfig::new(0, model, 1.0).is_err());
        assert!(LocalConfig::new(1, model, 0.0).is_err());
        assert!(LocalConfig::new(1, model, f64::INFINITY).is_err());
    }

    #[test]
    fn forced_improving_step() {
        let mut src = Fixed(vec![vec![-1.0, 0.0]]);
        let r = run_local_es_with(&[1.0, 0.0], &cfg(1, 1.0, 2), &sphere(2), &mut src, |_, _, _| {}).unwrap();
        assert_eq!(r.v_final, vec![0.0, 0.0]);
        assert_eq!(r.accepted_count, 1);
        assert_eq!(r.parent_values, vec![1.0, 0.0]);
        assert_eq!(r.evals_used, 1);
        assert_eq!(r.reference_evals, 1);
    }

    #[test]
    fn forced_worsening_step_is_rejected() {
        let start = [0.3, -0.7];
        let mut src = Fixed(vec![vec![1.0, -1.0]]);
        let r = run_local_es_with(&start, &cfg(1, 1.0, 2), &sphere(2), &mut src, |_, _, _| {}).unwrap();
        // bitwise restore
        assert_eq!(r.v_final, start.to_vec());
        assert_eq!(r.accepted_count, 0);
    }

    #[test]
    fn nan_objective_aborts() {
        let obj = FnObjective::new(1, |x: &[f64]| if x[0] > 0.5 { f64::NAN } else { 1.0 });
        let mut src = Fixed(vec![vec![1.0]]);
        let err = run_local_es_with(&[0.0], &cfg(1, 1.0, 1), &obj, &mut src, |_, _, _| {}).unwrap_err();
        assert!(matches!(err, DesError::NanObjective { .. }));
    }

    #[test]
    fn dimension_checked() {
        let stream = RngStream::new(0, 0, 0, Purpose::Mutation);
        assert!(run_local_es(&[0.0; 3], &cfg(2, 1.0, 3), &sphere(2), &stream).is_err());
    }

    #[test]
    fn monotone_and_deterministic() {
        for kind in [
            MutationKind::StandardGaussian,
            MutationKind::MixtureGaussian,
            MutationKind::MixtureRademacher,
        ] {
            let model = MutationModel::new(kind, 8, 2).unwrap();
            let cfg = LocalConfig::new(200, model, 2.0).unwrap();
            let stream = RngStream::new(7, 1, 2, Purpose::Mutation);
            let start = [1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0, 2.0];
            let obj = FnObjective::new(8, |x: &[f64]| {
                x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum()
            });
            let a = run_local_es(&start, &cfg, &obj, &stream).unwrap();
            let b = run_local_es(&start, &cfg, &obj, &stream).unwrap();
            assert_eq!(a, b);
            assert!(a.parent_values.windows(2).all(|w| w[1] <= w[0]));
            assert!(a.accepted_count > 0 && a.accepted_count <= 200);
            assert_eq!(a.evals_used, 200);
        }
    }

    #[test]
    fn mixture_steps_touch_few_coordinates() {
        let model = MutationModel::new(MutationKind::MixtureRademacher, 100, 2).unwrap();
        let cfg = LocalConfig::new(1, model, 0.1).unwrap();
        let stream = RngStream::new(1, 0, 0, Purpose::Mutation);
        let obj = FnObjective::new(100, |_: &[f64]| 0.0);
        let r = run_local_es(&vec![0.0; 100], &cfg, &obj, &stream).unwrap();
        assert!(r.v_final.iter().filter(|v| **v != 0.0).count() <= 2);
    }
}
