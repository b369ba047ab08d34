//! Threshold and rank-based selection of high-scoring pixels.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};

use super::ScoreMap;

/// Result of a histogram Otsu split. Values in bins `>= bin` form the upper
/// class; `threshold` is the left edge of that bin in score units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtsuSplit {
    pub threshold: f64,
    pub bin: usize,
    pub bins: usize,
    pub min: f64,
    pub max: f64,
}

impl OtsuSplit {
    pub fn bin_of(&self, v: f64) -> usize {
        bin_index(v, self.min, self.max, self.bins)
    }

    /// True for values in the upper class.
    pub fn is_upper(&self, v: f64) -> bool {
        self.bin_of(v) >= self.bin
    }
}

fn bin_index(v: f64, min: f64, max: f64, bins: usize) -> usize {
    let f = (v - min) / (max - min) * bins as f64;
    (f.floor().max(0.0) as usize).min(bins - 1)
}

/// Histogram of `scores` over `[min, max]` in `bins` equal-width bins.
pub fn histogram(scores: &[f64], bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    if bins < 2 {
        return Err(Error::InvalidInput("otsu needs at least 2 bins".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::InvalidInput(
            "otsu needs at least two distinct values".into(),
        ));
    }
    let mut hist = vec![0u64; bins];
    for &s in scores {
        hist[bin_index(s, min, max, bins)] += 1;
    }
    Ok((hist, min, max))
}

/// Split index `k` in `1..bins` maximizing between-class variance of a
/// histogram, with bin indices as class values. Ties go to the lowest `k`.
///
/// For class counts `n0, n1` and index sums `s0, s1` the between-class
/// variance is `(s0·n1 − s1·n0)² / (N² n0 n1)`; candidates are compared as
/// exact integer fractions.
pub fn otsu_bin(hist: &[u64]) -> Option<usize> {
    let n: u64 = hist.iter().sum();
    let s: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 1..hist.len() {
        n0 += hist[k - 1];
        s0 += (k as u128 - 1) * hist[k - 1] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = s - s0;
        let diff = (s0 * n1 as u128).abs_diff(s1 * n0 as u128);
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => compare_fractions(num, den, bn, bd) == Ordering::Greater,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

/// Compare `a/b` with `c/d` for positive denominators.
fn compare_fractions(a: u128, b: u128, c: u128, d: u128) -> Ordering {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l.cmp(&r),
        // only reachable for pools far beyond image scale
        _ => (a as f64 / b as f64)
            .partial_cmp(&(c as f64 / d as f64))
            .unwrap_or(Ordering::Equal),
    }
}

/// Otsu split of `scores` into two classes.
pub fn otsu_split(scores: &[f64], bins: usize) -> Result<OtsuSplit> {
    let (hist, min, max) = histogram(scores, bins)?;
    let bin = otsu_bin(&hist).ok_or_else(|| {
        Error::InvalidInput("otsu needs at least two occupied bins".into())
    })?;
    Ok(OtsuSplit {
        threshold: min + (max - min) * bin as f64 / bins as f64,
        bin,
        bins,
        min,
        max,
    })
}

pub fn otsu_threshold(scores: &[f64], bins: usize) -> Result<f64> {
    otsu_split(scores, bins).map(|s| s.threshold)
}

/// Flag every valid pixel in the upper Otsu class of `map`.
pub fn otsu_mask(map: &ScoreMap, bins: usize) -> Result<Vec<Mask>> {
    let scores: Vec<f64> = map.valid_scores().map(|(_, s)| s).collect();
    let split = otsu_split(&scores, bins)?;
    Ok(map.mask_where(|s| split.is_upper(s)))
}

/// Number of pixels selected by a top-`k`% rule over `n` candidates.
pub fn topk_count(n: usize, k_percent: f64) -> usize {
    let exact = k_percent / 100.0 * n as f64;
    let rounded = exact.round();
    // absorb representation error such as 0.07 * 100 = 7.000000000000001
    let c = if (exact - rounded).abs() < 1e-9 * n.max(1) as f64 {
        rounded
    } else {
        exact.ceil()
    };
    (c.max(0.0) as usize).min(n)
}

/// Flag the `⌈k% · N⌉` highest-scoring valid pixels across all views. Ties
/// are broken by `(view, y, x)` ascending.
pub fn topk_mask(map: &ScoreMap, k_percent: f64) -> Result<Vec<Mask>> {
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::InvalidInput(format!(
            "k must lie in [0, 100], got {k_percent}"
        )));
    }
    let mut cands: Vec<((usize, usize, usize), f64)> = map.valid_scores().collect();
    let count = topk_count(cands.len(), k_percent);
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (w, h) = map.dims();
    let mut masks = vec![Grid::filled(w, h, false); map.view_count()];
    for &((v, y, x), _) in &cands[..count] {
        *masks[v].get_mut(x, y) = true;
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::ScoreMetric;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive argmax of ω0·ω1·(μ0 − μ1)² over all bin boundaries.
    fn brute_force_otsu(hist: &[u64]) -> Option<usize> {
        let n: u64 = hist.iter().sum();
        let mut best = None;
        let mut best_var = -1.0;
        for k in 1..hist.len() {
            let n0: u64 = hist[..k].iter().sum();
            let n1 = n - n0;
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let m0 = (0..k).map(|i| i as f64 * hist[i] as f64).sum::<f64>() / n0 as f64;
            let m1 = (k..hist.len()).map(|i| i as f64 * hist[i] as f64).sum::<f64>() / n1 as f64;
            let var = (n0 as f64 / n as f64) * (n1 as f64 / n as f64) * (m0 - m1).powi(2);
            if var > best_var * (1.0 + 1e-12) {
                best_var = var;
                best = Some(k);
            }
        }
        best
    }

    #[test]
    fn separated_clusters() {
        let mut s = vec![0.0; 50];
        s.extend(vec![10.0; 50]);
        let t = otsu_threshold(&s, 256).unwrap();
        assert!(t > 0.0 && t < 10.0);
    }

    #[test]
    fn constant_input_is_rejected() {
        assert!(otsu_threshold(&[3.0; 10], 256).is_err());
    }

    #[test]
    fn matches_exhaustive_search_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let bins = rng.random_range(2..=256);
            let hist: Vec<u64> = (0..bins)
                .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..500) })
                .collect();
            assert_eq!(otsu_bin(&hist), brute_force_otsu(&hist), "{hist:?}");
        }
    }

    #[test]
    fn ties_prefer_lower_threshold() {
        // symmetric: splitting before bin 1 or before bin 2 is equivalent
        assert_eq!(otsu_bin(&[5, 0, 5]), Some(1));
    }

    proptest! {
        #[test]
        fn affine_rescaling_keeps_flagged_set(
            scores in prop::collection::vec(0.0f64..100.0, 2..200),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
        ) {
            prop_assume!(scores.iter().any(|&s| s != scores[0]));
            let s1 = otsu_split(&scores, 256).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let s2 = otsu_split(&scaled, 256).unwrap();
            let bins1: Vec<usize> = scores.iter().map(|&s| s1.bin_of(s)).collect();
            let bins2: Vec<usize> = scaled.iter().map(|&s| s2.bin_of(s)).collect();
            // bin edges scale with the data, up to rounding right at an edge
            let moved = bins1.iter().zip(&bins2).filter(|(x, y)| x != y).count();
            prop_assume!(moved == 0);
            let f1: Vec<bool> = scores.iter().map(|&s| s1.is_upper(s)).collect();
            let f2: Vec<bool> = scaled.iter().map(|&s| s2.is_upper(s)).collect();
            prop_assert_eq!(f1, f2);
        }
    }

    fn map_from(values: Vec<Vec<f64>>, w: usize, h: usize) -> ScoreMap {
        let views = values.into_iter().map(|v| Grid::from_vec(w, h, v).unwrap()).collect();
        ScoreMap::new(ScoreMetric::Loss, views, None).unwrap()
    }

    #[test]
    fn topk_counts() {
        assert_eq!(topk_count(100, 5.0), 5);
        assert_eq!(topk_count(101, 5.0), 6);
        assert_eq!(topk_count(1000, 7.0), 70);
        assert_eq!(topk_count(10, 0.0), 0);
        assert_eq!(topk_count(10, 100.0), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = map_from(
            (0..3).map(|_| (0..400).map(|_| rng.random::<f64>()).collect()).collect(),
            20,
            20,
        );
        for k in [0.0, 5.0, 10.0, 33.3, 100.0] {
            let m = topk_mask(&map, k).unwrap();
            let n: usize = m.iter().map(|g| g.count()).sum();
            assert_eq!(n, (k / 100.0 * 1200.0f64).ceil() as usize, "k = {k}");
        }
    }

    #[test]
    fn topk_selects_highest_with_index_tiebreak() {
        let map = map_from(vec![vec![1.0, 5.0, 5.0, 0.0], vec![5.0, 2.0, 0.0, 0.0]], 2, 2);
        let m = topk_mask(&map, 25.0).unwrap(); // 2 of 8
        assert!(*m[0].get(1, 0) && *m[0].get(0, 1));
        assert!(!*m[1].get(0, 0));
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let map = map_from(vec![vec![1.0; 4]], 2, 2);
        assert!(topk_mask(&map, 101.0).is_err());
    }
}
