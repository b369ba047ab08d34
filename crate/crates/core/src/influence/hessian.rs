//! Curvature for influence scores: dense damped matrices over the last layer
//! and low-rank eigen-approximations over all parameters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum Curvature {
    /// `H` and the Cholesky factor of `H + λI`.
    Dense {
        matrix: DMatrix<f64>,
        factor: Cholesky<f64, Dyn>,
    },
    /// Eigenvalues (descending) and unit eigenvectors as columns.
    LowRank {
        eigenvalues: Vec<f64>,
        vectors: DMatrix<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct HessianState {
    curvature: Curvature,
    damping: f64,
    fingerprint: String,
}

impl HessianState {
    /// Factor `H + λI`; fails when a pivot is not positive.
    pub fn dense(h: DMatrix<f64>, damping: f64, fingerprint: String) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::InvalidInput("curvature must be square".into()));
        }
        let h = (&h + h.transpose()) * 0.5;
        let n = h.nrows();
        let damped = &h + DMatrix::identity(n, n) * damping;
        let factor = Cholesky::new(damped).ok_or_else(|| {
            Error::Numerical(format!(
                "H + {damping}·I is not positive definite; increase the damping"
            ))
        })?;
        if factor.l_dirty().diagonal().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Numerical(
                "non-positive pivot after damping; increase the damping".into(),
            ));
        }
        Ok(Self {
            curvature: Curvature::Dense { matrix: h, factor },
            damping,
            fingerprint,
        })
    }

    pub fn from_eigenpairs(
        eigenvalues: Vec<f64>,
        vectors: DMatrix<f64>,
        damping: f64,
        fingerprint: String,
    ) -> Result<Self> {
        if eigenvalues.len() != vectors.ncols() {
            return Err(Error::InvalidInput("eigenpair count mismatch".into()));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput("eigenvalues must be sorted descending".into()));
        }
        if eigenvalues.iter().any(|&l| !(l + damping > 0.0)) {
            return Err(Error::Numerical(
                "damped eigenvalue is not positive; increase the damping".into(),
            ));
        }
        Ok(Self {
            curvature: Curvature::LowRank { eigenvalues, vectors },
            damping,
            fingerprint,
        })
    }

    /// Top-`rank` eigenpairs of `(1/N) Σ g gᵀ` over the given gradients.
    pub fn low_rank_from_gradients(
        grads: &[Vec<f64>],
        rank: usize,
        damping: f64,
        seed: u64,
        fingerprint: String,
    ) -> Result<Self> {
        let dim = grads.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::InvalidInput("no gradients for the curvature".into()));
        }
        let g = Array2::from_shape_fn((grads.len(), dim), |(i, j)| grads[i][j]);
        let n = grads.len() as f64;
        let apply = |v: &[f64], out: &mut [f64]| {
            let gv = g.dot(&Array1::from(v.to_vec()));
            let w = g.t().dot(&gv);
            for (o, x) in out.iter_mut().zip(w.iter()) {
                *o = x / n;
            }
        };
        let (vals, vecs) = lanczos_top_eigenpairs(dim, apply, rank, seed, 1e-10);
        Self::from_eigenpairs(vals, vecs, damping, fingerprint)
    }

    pub fn curvature(&self) -> &Curvature {
        &self.curvature
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        match &self.curvature {
            Curvature::Dense { matrix, .. } => matrix.nrows(),
            Curvature::LowRank { vectors, .. } => vectors.nrows(),
        }
    }

    /// Keep only the leading `rank` eigenpairs of a low-rank state.
    pub fn truncated(&self, rank: usize) -> Self {
        match &self.curvature {
            Curvature::LowRank { eigenvalues, vectors } => {
                let r = rank.min(eigenvalues.len());
                Self {
                    curvature: Curvature::LowRank {
                        eigenvalues: eigenvalues[..r].to_vec(),
                        vectors: vectors.columns(0, r).into_owned(),
                    },
                    damping: self.damping,
                    fingerprint: self.fingerprint.clone(),
                }
            }
            Curvature::Dense { .. } => self.clone(),
        }
    }

    /// `gᵀ (H + λI)⁻¹ g`, or its projection onto the stored eigenpairs.
    pub fn score(&self, g: &[f64]) -> f64 {
        let g = DVector::from_column_slice(g);
        let s = match &self.curvature {
            Curvature::Dense { factor, .. } => g.dot(&factor.solve(&g)),
            Curvature::LowRank { eigenvalues, vectors } => eigenvalues
                .iter()
                .enumerate()
                .map(|(k, &l)| vectors.column(k).dot(&g).powi(2) / (l + self.damping))
                .sum(),
        };
        s.max(0.0)
    }
}

/// `(1/N) Σ g gᵀ`.
pub fn fisher(grads: &[&[f64]]) -> DMatrix<f64> {
    let dim = grads.first().map_or(0, |g| g.len());
    let g = Array2::from_shape_fn((grads.len(), dim), |(i, j)| grads[i][j]);
    let h = g.t().dot(&g) / grads.len().max(1) as f64;
    DMatrix::from_fn(dim, dim, |i, j| h[(i, j)])
}

/// Symmetrized central-difference Jacobian of `grad` at `theta`.
pub fn central_difference_hessian(
    theta: &[f64],
    step: f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
) -> DMatrix<f64> {
    let n = theta.len();
    let mut h = DMatrix::zeros(n, n);
    let mut t = theta.to_vec();
    for j in 0..n {
        t[j] = theta[j] + step;
        let gp = grad(&t);
        t[j] = theta[j] - step;
        let gm = grad(&t);
        t[j] = theta[j];
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    // two passes keep the basis orthogonal to working precision
    for _ in 0..2 {
        for q in basis {
            let c = dot(w, q);
            w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, basis);
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            return Some(v);
        }
    }
    None
}

/// Leading `rank` eigenpairs of a symmetric positive semi-definite operator
/// given by `apply(v, out)`, by Lanczos with full reorthogonalization.
///
/// The Krylov basis grows until the residual `|β_m s_mk|` of each wanted
/// Ritz pair drops below `tol · θ_1`, or the basis spans the whole space.
/// An invariant subspace restarts the recurrence from a fresh random
/// direction orthogonal to the basis, so a full-dimension run recovers the
/// complete spectrum. Returns eigenvalues in descending order and unit
/// eigenvectors as matrix columns.
pub fn lanczos_top_eigenpairs(
    dim: usize,
    apply: impl Fn(&[f64], &mut [f64]),
    rank: usize,
    seed: u64,
    tol: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let rank = rank.min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut q = random_unit(dim, &mut rng, &basis).expect("dim >= 1");
    let mut w = vec![0.0; dim];
    let mut check_at = (2 * rank + 10).min(dim);
    loop {
        apply(&q, &mut w);
        let a = dot(&w, &q);
        basis.push(q.clone());
        alpha.push(a);
        orthogonalize(&mut w, &basis);
        let b = dot(&w, &w).sqrt();
        let full = basis.len() == dim;
        let scale = alpha.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        let breakdown = b <= 1e-12 * scale;

        if full || basis.len() >= check_at {
            let (vals, vecs) = tridiagonal_eigen(&alpha, &beta);
            let m = alpha.len();
            let converged = full
                || (0..rank).all(|k| (b * vecs[(m - 1, k)]).abs() <= tol * vals[0].abs().max(1e-300));
            if converged {
                let qmat = DMatrix::from_fn(dim, m, |i, j| basis[j][i]);
                let ritz = &qmat * vecs.columns(0, rank);
                let vals: Vec<f64> = vals[..rank].iter().map(|&l| l.max(0.0)).collect();
                return (vals, ritz);
            }
            check_at = (basis.len() + rank.max(10)).min(dim);
        }

        if breakdown {
            match random_unit(dim, &mut rng, &basis) {
                Some(v) => {
                    beta.push(0.0);
                    q = v;
                }
                None => {
                    // basis already spans the space numerically
                    let (vals, vecs) = tridiagonal_eigen(&alpha, &beta);
                    let m = alpha.len();
                    let r = rank.min(m);
                    let qmat = DMatrix::from_fn(dim, m, |i, j| basis[j][i]);
                    let ritz = &qmat * vecs.columns(0, r);
                    return (vals[..r].iter().map(|&l| l.max(0.0)).collect(), ritz);
                }
            }
        } else {
            beta.push(b);
            q = w.iter().map(|x| x / b).collect();
        }
    }
}

/// Eigenpairs of the symmetric tridiagonal matrix, sorted descending.
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(m, m, |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Up to `k` sorted indices drawn without replacement from `0..n`.
pub(crate) fn subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn random_grads(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn dense_of(grads: &[Vec<f64>], damping: f64) -> HessianState {
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        HessianState::dense(fisher(&refs), damping, String::new()).unwrap()
    }

    #[test]
    fn single_ray_curvature_is_rank_one() {
        let g = vec![vec![1.0, -2.0, 0.5]];
        let h = fisher(&[g[0].as_slice()]);
        assert_eq!(h[(0, 1)], -2.0);
        assert_eq!(h.rank(1e-12), 1);
        let s = dense_of(&g, 1e-2);
        let Curvature::Dense { factor, .. } = s.curvature() else { panic!() };
        // squared Cholesky pivots of H + λI are at least λ
        assert!(factor.l_dirty().diagonal().iter().all(|d| d * d >= 1e-2 - 1e-15));
    }

    #[test]
    fn zero_curvature_reduces_to_scaled_norm() {
        let s = HessianState::dense(DMatrix::zeros(3, 3), 0.5, String::new()).unwrap();
        assert!((s.score(&[1.0, 2.0, 2.0]) - 9.0 / 0.5).abs() < 1e-12);
        assert_eq!(s.score(&[0.0; 3]), 0.0);
    }

    #[test]
    fn indefinite_curvature_is_a_numerical_error() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            HessianState::dense(h, 1e-2, String::new()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn full_rank_lanczos_matches_dense() {
        let grads = random_grads(12, 20, 3);
        let dense = dense_of(&grads, 1e-2);
        let lr = HessianState::low_rank_from_gradients(&grads, 20, 1e-2, 9, String::new()).unwrap();
        for g in &grads {
            let (a, b) = (dense.score(g), lr.score(g));
            assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn lanczos_top_pairs_match_symmetric_eigen() {
        let grads = random_grads(40, 30, 5);
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let h = fisher(&refs);
        let mut exact: Vec<f64> = SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().collect();
        exact.sort_by(|a, b| b.total_cmp(a));
        let lr = HessianState::low_rank_from_gradients(&grads, 5, 1e-2, 1, String::new()).unwrap();
        let Curvature::LowRank { eigenvalues, vectors } = lr.curvature() else { panic!() };
        for k in 0..5 {
            assert!((eigenvalues[k] - exact[k]).abs() < 1e-8 * exact[0]);
            let v = vectors.column(k);
            let r = &h * v - v * eigenvalues[k];
            assert!(r.norm() < 1e-6 * exact[0]);
        }
    }

    #[test]
    fn fd_hessian_of_quadratic_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = central_difference_hessian(&[0.3, -0.2], 1e-3, |t| {
            let v = &a * DVector::from_column_slice(t);
            v.as_slice().to_vec()
        });
        assert!((h - a).norm() < 1e-10);
    }

    #[test]
    fn subsample_is_sorted_and_distinct() {
        let s = subsample(100, 10, 2);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(5, 10, 2), vec![0, 1, 2, 3, 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scores_are_non_negative(seed in 0u64..1000, lambda in 1e-6f64..10.0) {
            let grads = random_grads(8, 6, seed);
            let s = dense_of(&grads, lambda);
            for g in &grads {
                prop_assert!(s.score(g) >= 0.0);
            }
        }

        #[test]
        fn larger_damping_never_raises_scores(seed in 0u64..1000, l1 in 1e-4f64..1.0, f in 1.0f64..100.0) {
            let grads = random_grads(10, 5, seed);
            let (a, b) = (dense_of(&grads, l1), dense_of(&grads, l1 * f));
            for g in &grads {
                prop_assert!(b.score(g) <= a.score(g) * (1.0 + 1e-10));
            }
        }

        #[test]
        fn low_rank_scores_grow_with_rank_up_to_dense(seed in 0u64..1000) {
            let grads = random_grads(15, 10, seed);
            let dense = dense_of(&grads, 1e-2);
            let full = HessianState::low_rank_from_gradients(&grads, 10, 1e-2, seed, String::new()).unwrap();
            for g in &grads {
                let d = dense.score(g);
                let mut prev = 0.0;
                for r in 1..=10 {
                    let s = full.truncated(r).score(g);
                    prop_assert!(s >= prev * (1.0 - 1e-12));
                    prop_assert!(s <= d * (1.0 + 1e-8));
                    prev = s;
                }
                prop_assert!((prev - d).abs() <= 1e-6 * d.max(1.0));
            }
        }

        #[test]
        fn gradient_rescaling_preserves_order(seed in 0u64..1000, c in 0.1f64..10.0) {
            let grads = random_grads(12, 4, seed);
            let s = dense_of(&grads, 1e-2);
            let base: Vec<f64> = grads.iter().map(|g| s.score(g)).collect();
            let scaled: Vec<f64> = grads
                .iter()
                .map(|g| s.score(&g.iter().map(|x| c * x).collect::<Vec<_>>()))
                .collect();
            for i in 0..base.len() {
                for j in 0..base.len() {
                    if base[i] > base[j] * (1.0 + 1e-9) {
                        prop_assert!(scaled[i] > scaled[j]);
                    }
                }
                prop_assert!((scaled[i] - c * c * base[i]).abs() <= 1e-9 * scaled[i].max(1.0));
            }
        }
    }
}
