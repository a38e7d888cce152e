//! Regularized finite-sum classification losses.
//!
//! `f(x) = (1/N) sum_i loss(y_i x^T z_i) + (reg/2) ||x||^2` over sparse
//! examples, for the logistic, tanh (nonconvex SVM) and hinge losses.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DesError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `log(1 + exp(-m))`
    Logistic,
    /// `1 - tanh(m)`
    NonconvexSvm,
    /// `max(0, 1 - m)`
    LinearSvm,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Logistic, LossKind::NonconvexSvm, LossKind::LinearSvm];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logistic => "LR",
            LossKind::NonconvexSvm => "NSVM",
            LossKind::LinearSvm => "LSVM",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "LR" => Some(LossKind::Logistic),
            "NSVM" => Some(LossKind::NonconvexSvm),
            "LSVM" => Some(LossKind::LinearSvm),
            _ => None,
        }
    }

    /// Loss as a function of the signed margin `m = y x^T z`.
    #[inline]
    pub fn value(self, margin: f64) -> f64 {
        match self {
            LossKind::Logistic => (-margin.abs()).exp().ln_1p() + (-margin).max(0.0),
            LossKind::NonconvexSvm => 1.0 - margin.tanh(),
            LossKind::LinearSvm => (1.0 - margin).max(0.0),
        }
    }

    /// Derivative with respect to the margin. The hinge kink gets 0.
    #[inline]
    pub fn derivative(self, margin: f64) -> f64 {
        match self {
            LossKind::Logistic => -1.0 / (1.0 + margin.exp()),
            LossKind::NonconvexSvm => {
                let t = margin.tanh();
                -(1.0 - t * t)
            }
            LossKind::LinearSvm => {
                if 1.0 - margin > 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A labelled sparse point. Indices are 0-based and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExample {
    indices: Vec<u32>,
    values: Vec<f64>,
    label: f64,
}

impl SparseExample {
    pub fn new(indices: Vec<u32>, values: Vec<f64>, label: i8) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(DesError::invalid(
                "example",
                format!("{} indices but {} values", indices.len(), values.len()),
            ));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DesError::invalid("example", "indices not strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DesError::invalid("example", "non-finite feature value"));
        }
        if label != 1 && label != -1 {
            return Err(DesError::invalid("label", format!("{label} is not -1 or +1")));
        }
        Ok(Self {
            indices,
            values,
            label: f64::from(label),
        })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `-1.0` or `+1.0`.
    pub fn label(&self) -> f64 {
        self.label
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| x[i as usize] * v)
            .sum()
    }

    /// Smallest dimension this example fits in.
    pub fn min_dim(&self) -> usize {
        self.indices.last().map_or(0, |&i| i as usize + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<SparseExample>,
    dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<SparseExample>, dim: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(DesError::Empty("dataset has no examples"));
        }
        if dim == 0 {
            return Err(DesError::invalid("n", "dimension must be positive"));
        }
        if let Some(bad) = examples.iter().position(|e| e.min_dim() > dim) {
            return Err(DesError::invalid(
                "n",
                format!("example {bad} has an index beyond dimension {dim}"),
            ));
        }
        Ok(Self { examples, dim })
    }

    pub fn examples(&self) -> &[SparseExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &SparseExample {
        &self.examples[i]
    }

    /// Copies the selected examples into a new dataset of the same dimension.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.examples[i].clone()).collect(), self.dim)
    }

    pub fn with_dim(mut self, dim: usize) -> Result<Dataset> {
        if self.examples.iter().any(|e| e.min_dim() > dim) {
            return Err(DesError::invalid("n", format!("dimension {dim} too small")));
        }
        self.dim = dim;
        Ok(self)
    }
}

/// Indices into a [`Dataset`]; duplicates allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch(Vec<usize>);

impl Minibatch {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(DesError::Empty("minibatch"));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A scalar function of `x` whose evaluations the solvers count.
pub trait BatchObjective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Evaluation of a reference point (a solver's starting parent) rather
    /// than a search candidate. Counted apart from the budget.
    fn reference_value(&self, x: &[f64]) -> Result<f64> {
        self.value(x)
    }

    /// How many component-function evaluations one call to `value` costs.
    fn cost(&self) -> u64;
}

/// Wraps a plain closure as a unit-cost objective.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64> BatchObjective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x)?;
        Ok((self.f)(x))
    }

    fn cost(&self) -> u64 {
        1
    }
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(DesError::DimensionMismatch {
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Shared tally of per-example loss evaluations made by an optimizer.
#[derive(Debug, Default)]
pub struct EvalCounter {
    budgeted: AtomicU64,
    reference: AtomicU64,
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluations of search candidates and gradient probes.
    pub fn budgeted(&self) -> u64 {
        self.budgeted.load(Ordering::Relaxed)
    }

    /// Evaluations of the points a local search starts from.
    pub fn reference(&self) -> u64 {
        self.reference.load(Ordering::Relaxed)
    }

    fn add(&self, reference: bool, count: usize) {
        let slot = if reference { &self.reference } else { &self.budgeted };
        slot.fetch_add(count as u64, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegularizedObjective<'a> {
    pub loss: LossKind,
    pub reg: f64,
    pub data: &'a Dataset,
    counter: Option<&'a EvalCounter>,
}

impl<'a> RegularizedObjective<'a> {
    pub fn new(loss: LossKind, reg: f64, data: &'a Dataset) -> Result<Self> {
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(DesError::invalid("lambda_p", "must be finite and nonnegative"));
        }
        Ok(Self {
            loss,
            reg,
            data,
            counter: None,
        })
    }

    /// Counts every optimizer-facing evaluation into `counter`.
    /// [`eval_full`](Self::eval_full) stays uncounted.
    pub fn with_counter(mut self, counter: &'a EvalCounter) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn regularizer(&self, x: &[f64]) -> f64 {
        if self.reg == 0.0 {
            return 0.0;
        }
        0.5 * self.reg * x.iter().map(|v| v * v).sum::<f64>()
    }

    /// Sum of unregularized losses over the given examples.
    pub fn loss_sum(&self, x: &[f64], indices: &[usize]) -> Result<f64> {
        self.counted_sum(x, indices, false)
    }

    fn counted_sum(&self, x: &[f64], indices: &[usize], reference: bool) -> Result<f64> {
        check_dim(self.dim(), x)?;
        if let Some(c) = self.counter {
            c.add(reference, indices.len());
        }
        Ok(indices
            .iter()
            .map(|&i| {
                let e = self.data.get(i);
                self.loss.value(e.label() * e.dot(x))
            })
            .sum())
    }

    /// Minibatch objective `f_B(x)`.
    pub fn eval(&self, x: &[f64], batch: &Minibatch) -> Result<f64> {
        let total = self.loss_sum(x, batch.indices())?;
        Ok(total / batch.len() as f64 + self.regularizer(x))
    }

    /// [`eval`](Self::eval), tallied as a reference evaluation.
    pub fn eval_reference(&self, x: &[f64], batch: &Minibatch) -> Result<f64> {
        let total = self.counted_sum(x, batch.indices(), true)?;
        Ok(total / batch.len() as f64 + self.regularizer(x))
    }

    /// Full-data objective.
    pub fn eval_full(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let total: f64 = self
            .data
            .examples()
            .iter()
            .map(|e| self.loss.value(e.label() * e.dot(x)))
            .sum();
        Ok(total / self.data.len() as f64 + self.regularizer(x))
    }

    /// Gradient of [`eval`](Self::eval); a subgradient for the hinge loss.
    pub fn analytic_gradient(&self, x: &[f64], batch: &Minibatch) -> Result<Vec<f64>> {
        check_dim(self.dim(), x)?;
        let mut grad = vec![0.0; x.len()];
        let inv_b = 1.0 / batch.len() as f64;
        for &i in batch.indices() {
            let e = self.data.get(i);
            let coef = self.loss.derivative(e.label() * e.dot(x)) * e.label() * inv_b;
            for (&j, &v) in e.indices().iter().zip(e.values()) {
                grad[j as usize] += coef * v;
            }
        }
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += self.reg * xi;
        }
        Ok(grad)
    }

    pub fn bind(&self, batch: &'a Minibatch) -> BoundObjective<'a> {
        BoundObjective { obj: *self, batch }
    }
}

/// A regularized objective restricted to one fixed minibatch.
#[derive(Debug, Clone, Copy)]
pub struct BoundObjective<'a> {
    obj: RegularizedObjective<'a>,
    batch: &'a Minibatch,
}

impl BatchObjective for BoundObjective<'_> {
    fn dim(&self) -> usize {
        self.obj.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.obj.eval(x, self.batch)
    }

    fn reference_value(&self, x: &[f64]) -> Result<f64> {
        self.obj.eval_reference(x, self.batch)
    }

    fn cost(&self) -> u64 {
        self.batch.len() as u64
    }
}

/// Fraction of examples whose predicted sign differs from the label.
/// A zero score predicts `+1`.
pub fn classification_error(x: &[f64], data: &Dataset) -> Result<f64> {
    check_dim(data.dim(), x)?;
    let wrong = data
        .examples()
        .iter()
        .filter(|e| {
            let predicted = if e.dot(x) >= 0.0 { 1.0 } else { -1.0 };
            predicted != e.label()
        })
        .count();
    Ok(wrong as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(i: u32, label: i8) -> SparseExample {
        SparseExample::new(vec![i], vec![1.0], label).unwrap()
    }

    fn mixed() -> Dataset {
        Dataset::new(
            vec![
                SparseExample::new(vec![0, 2], vec![0.5, -2.0], 1).unwrap(),
                SparseExample::new(vec![1], vec![3.0], -1).unwrap(),
                SparseExample::new(vec![0, 1, 2], vec![-1.0, 0.25, 0.75], -1).unwrap(),
                SparseExample::new(vec![2], vec![1.5], 1).unwrap(),
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn example_invariants() {
        assert!(SparseExample::new(vec![2, 1], vec![1.0, 1.0], 1).is_err());
        assert!(SparseExample::new(vec![1, 1], vec![1.0, 1.0], 1).is_err());
        assert!(SparseExample::new(vec![1], vec![f64::NAN], 1).is_err());
        assert!(SparseExample::new(vec![1], vec![1.0], 0).is_err());
        assert!(SparseExample::new(vec![1], vec![1.0, 2.0], 1).is_err());
        assert!(Dataset::new(vec![unit(3, 1)], 3).is_err());
        assert!(Dataset::new(vec![], 3).is_err());
    }

    #[test]
    fn losses_at_origin() {
        let data = mixed();
        let batch = Minibatch::new(vec![0, 1, 1, 3]).unwrap();
        let x = [0.0; 3];
        let lr = RegularizedObjective::new(LossKind::Logistic, 0.0, &data).unwrap();
        assert_eq!(lr.eval(&x, &batch).unwrap(), std::f64::consts::LN_2);
        let nsvm = RegularizedObjective::new(LossKind::NonconvexSvm, 0.0, &data).unwrap();
        assert_eq!(nsvm.eval(&x, &batch).unwrap(), 1.0);
        let lsvm = RegularizedObjective::new(LossKind::LinearSvm, 0.0, &data).unwrap();
        assert_eq!(lsvm.eval(&x, &batch).unwrap(), 1.0);
    }

    #[test]
    fn full_eval_cases() {
        let single = Dataset::new(vec![unit(0, 1)], 2).unwrap();
        let obj = RegularizedObjective::new(LossKind::Logistic, 0.0, &single).unwrap();
        assert_eq!(obj.eval_full(&[0.0, 0.0]).unwrap(), std::f64::consts::LN_2);

        let data = mixed();
        let doubled = Dataset::new(data.examples().iter().chain(data.examples()).cloned().collect(), 3).unwrap();
        let x = [0.3, -1.2, 0.7];
        for loss in LossKind::ALL {
            let a = RegularizedObjective::new(loss, 1e-3, &data).unwrap();
            let b = RegularizedObjective::new(loss, 1e-3, &doubled).unwrap();
            assert_relative_eq!(a.eval_full(&x).unwrap(), b.eval_full(&x).unwrap(), epsilon = 1e-15);
        }

        // hinge is zero for margins >= 1, leaving only the regularizer
        let easy = Dataset::new(vec![unit(0, 1)], 2).unwrap();
        let obj = RegularizedObjective::new(LossKind::LinearSvm, 1e-6, &easy).unwrap();
        assert_relative_eq!(obj.eval_full(&[1.0, 1.0]).unwrap(), 1e-6, max_relative = 1e-12);
    }

    #[test]
    fn counter_tallies_batch_evaluations() {
        let data = mixed();
        let counter = EvalCounter::new();
        let obj = RegularizedObjective::new(LossKind::Logistic, 0.0, &data)
            .unwrap()
            .with_counter(&counter);
        let batch = Minibatch::new(vec![0, 0, 2]).unwrap();
        let x = [0.1, 0.2, 0.3];
        obj.eval(&x, &batch).unwrap();
        obj.eval(&x, &batch).unwrap();
        obj.loss_sum(&x, &[1, 2]).unwrap();
        obj.eval_reference(&x, &batch).unwrap();
        obj.eval_full(&x).unwrap();
        assert_eq!(counter.budgeted(), 8);
        assert_eq!(counter.reference(), 3);
        let bound = obj.bind(&batch);
        assert_eq!(bound.cost(), 3);
        assert_eq!(bound.reference_value(&x).unwrap(), bound.value(&x).unwrap());
        assert_eq!(counter.reference(), 6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let data = mixed();
        let obj = RegularizedObjective::new(LossKind::Logistic, 0.0, &data).unwrap();
        let batch = Minibatch::new(vec![0]).unwrap();
        assert!(matches!(
            obj.eval(&[0.0; 2], &batch),
            Err(DesError::DimensionMismatch { expected: 3, actual: 2 })
        ));
        assert!(obj.eval_full(&[0.0; 4]).is_err());
        assert!(classification_error(&[0.0; 4], &data).is_err());
        assert!(RegularizedObjective::new(LossKind::Logistic, -1.0, &data).is_err());
        assert!(Minibatch::new(vec![]).is_err());
    }

    #[test]
    fn batch_eval_is_mean_plus_regularizer() {
        let data = mixed();
        let batch = Minibatch::new(vec![3, 0, 0, 2, 1]).unwrap();
        let x = [0.4, -0.1, 2.0];
        for loss in LossKind::ALL {
            let obj = RegularizedObjective::new(loss, 0.01, &data).unwrap();
            let mut direct = 0.0;
            for &i in batch.indices() {
                let e = data.get(i);
                let score: f64 = e
                    .indices()
                    .iter()
                    .zip(e.values())
                    .map(|(&j, v)| x[j as usize] * v)
                    .sum();
                direct += loss.value(e.label() * score);
            }
            direct = direct / 5.0 + 0.005 * x.iter().map(|v| v * v).sum::<f64>();
            assert_relative_eq!(obj.eval(&x, &batch).unwrap(), direct, max_relative = 1e-14);
        }
    }

    #[test]
    fn logistic_is_stable_for_large_margins() {
        assert_eq!(LossKind::Logistic.value(1e4), 0.0);
        assert_relative_eq!(LossKind::Logistic.value(-1e4), 1e4);
        assert!(LossKind::Logistic.value(-800.0).is_finite());
        for m in [-50.0, -3.0, -0.1, 0.0, 0.7, 20.0] {
            assert!(LossKind::ALL.iter().all(|l| l.value(m) >= 0.0));
        }
    }

    #[test]
    fn gradients_at_origin() {
        let data = Dataset::new(vec![unit(0, 1)], 3).unwrap();
        let batch = Minibatch::new(vec![0]).unwrap();
        let lr = RegularizedObjective::new(LossKind::Logistic, 0.0, &data).unwrap();
        assert_eq!(lr.analytic_gradient(&[0.0; 3], &batch).unwrap(), vec![-0.5, 0.0, 0.0]);
        let nsvm = RegularizedObjective::new(LossKind::NonconvexSvm, 0.0, &data).unwrap();
        assert_eq!(nsvm.analytic_gradient(&[0.0; 3], &batch).unwrap(), vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn hinge_kink_subgradient_is_regularizer_only() {
        let data = Dataset::new(vec![unit(0, 1)], 2).unwrap();
        let batch = Minibatch::new(vec![0]).unwrap();
        let obj = RegularizedObjective::new(LossKind::LinearSvm, 0.5, &data).unwrap();
        // margin exactly 1
        let g = obj.analytic_gradient(&[1.0, 2.0], &batch).unwrap();
        assert_eq!(g, vec![0.5, 1.0]);
        let g = obj.analytic_gradient(&[0.0, 0.0], &batch).unwrap();
        assert_eq!(g, vec![-1.0, 0.0]);
    }

    fn random_example(rng: &mut ChaCha8Rng, dim: usize) -> SparseExample {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for j in 0..dim {
            if rng.random::<f64>() < 0.6 {
                indices.push(j as u32);
                values.push(rng.random_range(-1.5..1.5));
            }
        }
        let label = if rng.random::<bool>() { 1 } else { -1 };
        SparseExample::new(indices, values, label).unwrap()
    }

    #[test]
    fn smooth_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 6;
        let h = 1e-6;
        for _ in 0..100 {
            let data = Dataset::new(vec![random_example(&mut rng, dim)], dim).unwrap();
            let batch = Minibatch::new(vec![0]).unwrap();
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            for loss in [LossKind::Logistic, LossKind::NonconvexSvm] {
                let obj = RegularizedObjective::new(loss, 1e-2, &data).unwrap();
                let grad = obj.analytic_gradient(&x, &batch).unwrap();
                let fd: Vec<f64> = (0..dim)
                    .map(|j| {
                        let mut plus = x.clone();
                        let mut minus = x.clone();
                        plus[j] += h;
                        minus[j] -= h;
                        (obj.eval(&plus, &batch).unwrap() - obj.eval(&minus, &batch).unwrap()) / (2.0 * h)
                    })
                    .collect();
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                let err = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(err <= 1e-5 * norm.max(1e-3), "{loss:?}: {err} vs {norm}");
            }
        }
    }

    #[test]
    fn classification_error_cases() {
        let balanced = Dataset::new(vec![unit(0, 1), unit(1, -1), unit(0, -1), unit(1, 1)], 2).unwrap();
        assert_eq!(classification_error(&[0.0, 0.0], &balanced).unwrap(), 0.5);

        let separable = Dataset::new(vec![unit(0, 1), unit(1, -1)], 2).unwrap();
        assert_eq!(classification_error(&[1.0, -1.0], &separable).unwrap(), 0.0);

        let data = mixed();
        let x = [0.2, -0.7, 0.1];
        let scaled: Vec<f64> = x.iter().map(|v| 10.0 * v).collect();
        assert_eq!(
            classification_error(&x, &data).unwrap(),
            classification_error(&scaled, &data).unwrap()
        );
    }
}
