use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MIN_KEPT_FRACTION;
use crate::raster::{Grid, Mask, RgbImage};
use crate::synth::Dataset;

fn ensure_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    b.ensure_dims(a.dims(), "compared image")
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]; `+inf` when equal.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ensure_same(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2)))
        .sum();
    let mse = sum / (3 * a.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub(crate) fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region correlation with the separable window.
fn filter(img: &Grid<f64>, k: &[f64]) -> Grid<f64> {
    let n = k.len();
    let (w, h) = img.dims();
    let rows = Grid::from_fn(w - n + 1, h, |x, y| (0..n).map(|i| k[i] * img.get(x + i, y)).sum::<f64>());
    Grid::from_fn(w - n + 1, h - n + 1, |x, y| (0..n).map(|i| k[i] * rows.get(x, y + i)).sum::<f64>())
}

/// Mean structural similarity over every full 11×11 Gaussian window
/// (σ = 1.5) and the three channels; dynamic range 1.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ensure_same(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = ssim_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = a.map(|p| p[c]);
        let y = b.map(|p| p[c]);
        let mx = filter(&x, &k);
        let my = filter(&y, &k);
        let sxx = filter(&x.map(|v| v * v), &k);
        let syy = filter(&y.map(|v| v * v), &k);
        let sxy = filter(&Grid::from_fn(w, h, |i, j| x.get(i, j) * y.get(i, j)), &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx.as_slice()[i], my.as_slice()[i]);
            let vx = sxx.as_slice()[i] - ux * ux;
            let vy = syy.as_slice()[i] - uy * uy;
            let cxy = sxy.as_slice()[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub predicted: usize,
    pub actual: usize,
}

/// Set metrics of `pred` against `gt` over all views jointly. An empty
/// prediction has precision 1, an empty ground truth has recall 1, and two
/// empty sets have IoU 1.
pub fn mask_metrics(pred: &[Mask], gt: &[Mask]) -> Result<MaskMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!("{} predicted views, {} ground-truth views", pred.len(), gt.len())));
    }
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (v, (p, g)) in pred.iter().zip(gt).enumerate() {
        p.ensure_dims(g.dims(), &format!("predicted mask {v}"))?;
        for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
            tp += usize::from(a && b);
            np += usize::from(a);
            ng += usize::from(b);
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(MaskMetrics {
        precision: ratio(tp, np),
        recall: ratio(tp, ng),
        iou: ratio(tp, np + ng - tp),
        predicted: np,
        actual: ng,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub kept: usize,
    pub total: usize,
    pub keep_fraction: f64,
}

/// Keep mask `¬mask`. Fails when fewer than 1% of pixels would remain.
pub fn prune(dataset: &Dataset, mask: &[Mask]) -> Result<(Vec<Mask>, PruneReport)> {
    if mask.len() != dataset.view_count() {
        return Err(Error::InvalidInput(format!(
            "mask has {} views, dataset has {}",
            mask.len(),
            dataset.view_count()
        )));
    }
    let keep: Vec<Mask> = mask
        .iter()
        .enumerate()
        .map(|(v, m)| {
            m.ensure_dims(dataset.dims(), &format!("distraction mask {v}"))?;
            Ok(m.map(|&p| !p))
        })
        .collect::<Result<_>>()?;
    let total = dataset.pixel_count();
    let kept: usize = keep.iter().map(Grid::count).sum();
    if (kept as f64) < MIN_KEPT_FRACTION * total as f64 || kept == 0 {
        return Err(Error::TooFewKept { kept, total });
    }
    Ok((
        keep,
        PruneReport {
            kept,
            total,
            keep_fraction: kept as f64 / total as f64,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_values() {
        let a = Grid::filled(4, 3, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|p| p.map(|v| v + 0.1));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (x, y) = (random_image(&mut rng, 7, 5), random_image(&mut rng, 7, 5));
            let mse = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).sum::<f64>() / 105.0;
            assert!((psnr(&x, &y).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        }
        assert!(psnr(&a, &Grid::filled(3, 4, [0.5; 3])).is_err());
    }

    /// Direct double loop over every window position.
    fn ssim_oracle(a: &RgbImage, b: &RgbImage) -> f64 {
        let k = ssim_kernel();
        let (w, h) = a.dims();
        let n = SSIM_WINDOW;
        let mut vals = Vec::new();
        for c in 0..3 {
            for y0 in 0..=h - n {
                for x0 in 0..=w - n {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..n {
                        for i in 0..n {
                            let wt = k[i] * k[j];
                            let p = a.get(x0 + i, y0 + j)[c];
                            let q = b.get(x0 + i, y0 + j)[c];
                            mx += wt * p;
                            my += wt * q;
                            xx += wt * p * p;
                            yy += wt * q * q;
                            xy += wt * p * q;
                        }
                    }
                    let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    vals.push(
                        (2.0 * mx * my + 1e-4) * (2.0 * cv + 9e-4) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4)),
                    );
                }
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = Grid::filled(16, 13, [0.2; 3]);
        let b = a.map(|p| p.map(|v| v + 0.5));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 1.0);
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (x, y) = (random_image(&mut rng, 17, 14), random_image(&mut rng, 17, 14));
            let s = ssim(&x, &y).unwrap();
            assert!((s - ssim_oracle(&x, &y)).abs() < 1e-9);
            assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        }
        assert!(ssim(&Grid::filled(10, 20, [0.0; 3]), &Grid::filled(10, 20, [0.0; 3])).is_err());
    }

    #[test]
    fn mask_metric_cases() {
        let gt = vec![Grid::from_fn(4, 4, |x, _| x < 2)];
        let m = mask_metrics(&gt, &gt).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (1.0, 1.0, 1.0));
        let none = vec![Grid::filled(4, 4, false)];
        assert_eq!(mask_metrics(&none, &gt).unwrap().recall, 0.0);
        let m = mask_metrics(&none, &none).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (1.0, 1.0, 1.0));
        assert_eq!(mask_metrics(&gt, &none).unwrap().precision, 0.0);
        // 8 vs 8 pixels, 4 shared: iou 4 / 12
        let shifted = vec![Grid::from_fn(4, 4, |x, _| (1..3).contains(&x))];
        let m = mask_metrics(&shifted, &gt).unwrap();
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.precision, m.recall), (0.5, 0.5));
    }
}
