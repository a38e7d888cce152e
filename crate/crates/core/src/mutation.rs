//! Mutation distributions.
//!
//! Three models generate the perturbation `u` added to a parent solution:
//! the standard Gaussian `N(0, I)`, and two sparse mixtures that pick `l`
//! coordinates uniformly with replacement and put a scaled Gaussian or
//! Rademacher value on each. The mixture scale `sqrt(n / l)` keeps the
//! covariance equal to the identity.
//!
//! Draws are emitted as lists of `(coordinate, value)` entries so that a
//! mixture draw costs `O(l)` regardless of `n`. A coordinate picked twice
//! appears twice; consumers sum the entries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DesError, Result};
use crate::stream::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MutationKind {
    StandardGaussian,
    MixtureGaussian,
    MixtureRademacher,
}

impl MutationKind {
    pub fn is_mixture(self) -> bool {
        !matches!(self, MutationKind::StandardGaussian)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationModel {
    kind: MutationKind,
    dim: usize,
    mixture_size: usize,
    scale: f64,
}

impl MutationModel {
    /// `mixture_size` is ignored for [`MutationKind::StandardGaussian`].
    pub fn new(kind: MutationKind, dim: usize, mixture_size: usize) -> Result<Self> {
        if dim == 0 {
            return Err(DesError::invalid("n", "dimension must be positive"));
        }
        let mixture_size = if kind.is_mixture() {
            if mixture_size == 0 {
                return Err(DesError::invalid("l", "mixture size must be positive"));
            }
            mixture_size
        } else {
            1
        };
        Ok(Self {
            kind,
            dim,
            mixture_size,
            scale: (dim as f64 / mixture_size as f64).sqrt(),
        })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(MutationKind::StandardGaussian, dim, 1)
    }

    pub fn kind(&self) -> MutationKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mixture_size(&self) -> usize {
        self.mixture_size
    }

    /// `sqrt(n / l)` for mixtures, 1 for the standard Gaussian.
    pub fn scale(&self) -> f64 {
        if self.kind.is_mixture() {
            self.scale
        } else {
            1.0
        }
    }

    /// Appends one draw of `u` to `out` as `(coordinate, value)` entries.
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<(usize, f64)>) {
        match self.kind {
            MutationKind::StandardGaussian => {
                out.extend((0..self.dim).map(|i| (i, rng.sample::<f64, _>(StandardNormal))));
            }
            MutationKind::MixtureGaussian => {
                for _ in 0..self.mixture_size {
                    let r = rng.random_range(0..self.dim);
                    let z: f64 = rng.sample(StandardNormal);
                    out.push((r, self.scale * z));
                }
            }
            MutationKind::MixtureRademacher => {
                for _ in 0..self.mixture_size {
                    let r = rng.random_range(0..self.dim);
                    let z = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    out.push((r, self.scale * z));
                }
            }
        }
    }
}

/// A model bound to its own generator; one per worker per round.
#[derive(Debug, Clone)]
pub struct MutationSampler {
    model: MutationModel,
    rng: ChaCha8Rng,
}

impl MutationSampler {
    pub fn new(model: MutationModel, stream: &RngStream) -> Self {
        Self {
            model,
            rng: stream.rng(),
        }
    }

    pub fn model(&self) -> &MutationModel {
        &self.model
    }

    pub fn draw_into(&mut self, out: &mut Vec<(usize, f64)>) {
        self.model.draw_into(&mut self.rng, out);
    }

    pub fn next_dense(&mut self) -> Vec<f64> {
        let mut entries = Vec::new();
        self.draw_into(&mut entries);
        densify(self.model.dim, &entries)
    }
}

fn densify(dim: usize, entries: &[(usize, f64)]) -> Vec<f64> {
    let mut u = vec![0.0; dim];
    for &(i, v) in entries {
        u[i] += v;
    }
    u
}

/// First draw of the stream as a dense vector.
pub fn sample(model: &MutationModel, stream: &RngStream) -> Vec<f64> {
    MutationSampler::new(*model, stream).next_dense()
}

/// Monte-Carlo summary of a mutation model.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub num_samples: usize,
    /// Sample covariance matrix, row-major `n x n`.
    pub covariance: Vec<f64>,
    /// Estimate of `E[|y^T u|^4]`.
    pub fourth_moment: f64,
    /// Standard error of `fourth_moment`.
    pub fourth_moment_se: f64,
}

impl MomentEstimate {
    pub fn dim(&self) -> usize {
        (self.covariance.len() as f64).sqrt() as usize
    }

    pub fn variance(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.covariance[i * n + i]).collect()
    }

    pub fn covariance_at(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.dim() + j]
    }
}

/// Estimates the covariance of `u` and the fourth moment of its projection
/// on `probe` from `num_samples` draws.
pub fn empirical_moments(
    model: &MutationModel,
    stream: &RngStream,
    probe: &[f64],
    num_samples: usize,
) -> Result<MomentEstimate> {
    let n = model.dim();
    if probe.len() != n {
        return Err(DesError::DimensionMismatch {
            expected: n,
            actual: probe.len(),
        });
    }
    if num_samples < 10_000 {
        return Err(DesError::invalid("num_samples", "need at least 10^4 samples"));
    }
    let mut sampler = MutationSampler::new(*model, stream);
    let mut sums = vec![0.0; n];
    let mut cross = vec![0.0; n * n];
    let (mut m4, mut m8) = (0.0, 0.0);

    let mut entries = Vec::new();
    let mut merged: Vec<(usize, f64)> = Vec::new();
    for _ in 0..num_samples {
        entries.clear();
        sampler.draw_into(&mut entries);
        entries.sort_unstable_by_key(|&(i, _)| i);
        merged.clear();
        for &(i, v) in &entries {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => merged.push((i, v)),
            }
        }
        let mut proj = 0.0;
        for (a, &(i, vi)) in merged.iter().enumerate() {
            sums[i] += vi;
            proj += probe[i] * vi;
            for &(j, vj) in &merged[a..] {
                cross[i * n + j] += vi * vj;
            }
        }
        let p4 = proj.powi(4);
        m4 += p4;
        m8 += p4 * p4;
    }

    let count = num_samples as f64;
    let mut covariance = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let c = cross[i * n + j] / count - (sums[i] / count) * (sums[j] / count);
            covariance[i * n + j] = c;
            covariance[j * n + i] = c;
        }
    }
    let fourth_moment = m4 / count;
    let var4 = (m8 / count - fourth_moment * fourth_moment).max(0.0) * count / (count - 1.0);
    Ok(MomentEstimate {
        num_samples,
        covariance,
        fourth_moment,
        fourth_moment_se: (var4 / count).sqrt(),
    })
}
