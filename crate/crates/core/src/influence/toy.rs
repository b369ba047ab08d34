//! Least-squares regression on fixed features.
//!
//! The loss is convex with a closed-form minimizer, so leave-one-out
//! retraining is exact and cheap. It is the reference against which
//! self-influence scores are validated.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::HessianState;

#[derive(Clone, Debug)]
pub struct ConvexToy {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub corrupted: Option<usize>,
}

impl ConvexToy {
    /// `n` points with standard-normal-like features, labels from a random
    /// linear model plus small noise, and label `corrupted` shifted by
    /// `corruption`.
    pub fn generate(n: usize, d: usize, corrupted: Option<usize>, corruption: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 {
            // Box–Muller
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let v: f64 = rng.random();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        };
        let w = DVector::from_fn(d, |_, _| normal());
        let features = DMatrix::from_fn(n, d, |_, _| normal());
        let mut labels = &features * &w;
        for y in labels.iter_mut() {
            *y += 0.1 * normal();
        }
        if let Some(c) = corrupted {
            labels[c] += corruption;
        }
        Self {
            features,
            labels,
            corrupted,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Minimizer of the mean squared error, optionally without point `skip`.
    pub fn fit(&self, skip: Option<usize>) -> Result<DVector<f64>> {
        let d = self.features.ncols();
        let mut xtx = DMatrix::zeros(d, d);
        let mut xty = DVector::zeros(d);
        for i in (0..self.len()).filter(|&i| Some(i) != skip) {
            let x = self.features.row(i).transpose();
            xtx += &x * x.transpose();
            xty += &x * self.labels[i];
        }
        xtx.cholesky()
            .map(|c| c.solve(&xty))
            .ok_or_else(|| Error::Numerical("toy features are rank deficient".into()))
    }

    pub fn loss(&self, theta: &DVector<f64>, i: usize) -> f64 {
        (self.features.row(i).dot(&theta.transpose()) - self.labels[i]).powi(2)
    }

    pub fn gradient(&self, theta: &DVector<f64>, i: usize) -> Vec<f64> {
        let r = self.features.row(i).dot(&theta.transpose()) - self.labels[i];
        self.features.row(i).iter().map(|x| 2.0 * r * x).collect()
    }

    /// Gradient of the mean loss.
    pub fn mean_gradient(&self, theta: &DVector<f64>) -> Vec<f64> {
        let n = self.len() as f64;
        let mut g = vec![0.0; self.features.ncols()];
        for i in 0..self.len() {
            for (a, b) in g.iter_mut().zip(self.gradient(theta, i)) {
                *a += b / n;
            }
        }
        g
    }

    /// Exact Hessian of the mean loss, `(2/N) XᵀX`.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.features.transpose() * &self.features * (2.0 / self.len() as f64)
    }

    /// Self-influence of every point under the exact damped Hessian.
    pub fn self_influence(&self, damping: f64) -> Result<Vec<f64>> {
        let theta = self.fit(None)?;
        let h = HessianState::dense(self.hessian(), damping, String::new())?;
        Ok((0..self.len()).map(|i| h.score(&self.gradient(&theta, i))).collect())
    }

    /// Exact leave-one-out loss increase of every point.
    pub fn loo_deltas(&self) -> Result<Vec<f64>> {
        let theta = self.fit(None)?;
        (0..self.len())
            .map(|i| Ok(self.loss(&self.fit(Some(i))?, i) - self.loss(&theta, i)))
            .collect()
    }
}

/// Fractional ranks (ties share their mean rank), 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Index of the largest value (first on ties).
pub fn argmax(v: &[f64]) -> Option<usize> {
    v.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &x)| match best {
            Some((_, b)) if b >= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}
