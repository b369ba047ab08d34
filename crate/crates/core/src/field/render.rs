//! Volume rendering by quadrature and its exact reverse-mode gradient.
//!
//! For samples `t_0 < ... < t_{N-1}` on `[t_near, t_far]` with
//! `δ_i = t_{i+1} - t_i` (and `δ_{N-1} = t_far - t_{N-1}`):
//!
//! ```text
//! α_i = 1 - exp(-σ_i δ_i)      T_i = Π_{j<i} (1 - α_j)      w_i = T_i α_i
//! C   = Σ w_i c_i + T_N · background
//! D   = Σ w_i t_i + T_N · t_far
//! ```

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::par;
use crate::raster::Rgb;

use super::loss::{loss_gradient, loss_per_ray, LossKind};
use super::mlp::{encode_batch, logistic, softplus, FieldParams, Forward};

/// Rays per batched forward pass; also the unit of parallel work.
pub(crate) const RAY_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub t_near: f64,
    pub t_far: f64,
    pub n_samples: usize,
    pub background: Rgb,
    /// Jitter sample positions within their bins while training.
    pub stratified: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            t_near: 2.0,
            t_far: 6.0,
            n_samples: 64,
            background: [0.0; 3],
            stratified: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_near > 0.0 && self.t_near < self.t_far) {
            return Err(Error::Config(format!(
                "render interval must satisfy 0 < t_near < t_far (got {}, {})",
                self.t_near, self.t_far
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        Ok(())
    }

    /// Sample positions; `jitter[i]` in `[0,1)` places sample `i` in its bin,
    /// `None` uses bin midpoints.
    pub fn sample_positions(&self, jitter: Option<&[f64]>) -> Vec<f64> {
        let n = self.n_samples;
        let step = (self.t_far - self.t_near) / n as f64;
        (0..n)
            .map(|i| {
                let u = jitter.map_or(0.5, |j| j[i]);
                self.t_near + (i as f64 + u) * step
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedRay {
    pub color: Rgb,
    pub depth: f64,
    pub final_transmittance: f64,
    pub weights: Vec<f64>,
}

/// Per-ray quantities kept for the backward pass.
struct Composite {
    ts: Vec<f64>,
    delta: Vec<f64>,
    colors: Vec<Rgb>,
    /// `T_0 .. T_N`
    trans: Vec<f64>,
    weights: Vec<f64>,
    color: Rgb,
    depth: f64,
}

impl Composite {
    fn new(
        cfg: &RenderConfig,
        ts: Vec<f64>,
        sigma_raw: &[f64],
        rgb_raw: ndarray::ArrayView2<'_, f64>,
    ) -> Self {
        let n = ts.len();
        let mut delta = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 < n { ts[i + 1] } else { cfg.t_far };
            delta.push(next - ts[i]);
        }
        let colors: Vec<Rgb> = rgb_raw
            .rows()
            .into_iter()
            .map(|r| [logistic(r[0]), logistic(r[1]), logistic(r[2])])
            .collect();
        let mut trans = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n);
        let mut t_acc = 1.0;
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        for i in 0..n {
            trans.push(t_acc);
            let keep = (-softplus(sigma_raw[i]) * delta[i]).exp();
            let w = t_acc * (1.0 - keep);
            weights.push(w);
            for k in 0..3 {
                color[k] += w * colors[i][k];
            }
            depth += w * ts[i];
            t_acc *= keep;
        }
        trans.push(t_acc);
        for (c, b) in color.iter_mut().zip(cfg.background) {
            *c += t_acc * b;
        }
        depth += t_acc * cfg.t_far;
        Self {
            ts,
            delta,
            colors,
            trans,
            weights,
            color,
            depth,
        }
    }

    fn rendered(&self) -> RenderedRay {
        RenderedRay {
            color: self.color,
            depth: self.depth,
            final_transmittance: *self.trans.last().expect("non-empty"),
            weights: self.weights.clone(),
        }
    }

    /// Gradients of a loss with upstream `d_color` w.r.t. the raw network
    /// outputs of every sample of this ray.
    fn backward(
        &self,
        cfg: &RenderConfig,
        sigma_raw: &[f64],
        d_color: &Rgb,
        d_sigma_raw: &mut [f64],
        mut d_rgb_raw: ndarray::ArrayViewMut2<'_, f64>,
    ) {
        let n = self.ts.len();
        let t_final = self.trans[n];
        // suffix = Σ_{i>k} w_i c_i + T_N · background
        let mut suffix = [
            t_final * cfg.background[0],
            t_final * cfg.background[1],
            t_final * cfg.background[2],
        ];
        for k in (0..n).rev() {
            let c = &self.colors[k];
            let mut dot = 0.0;
            for j in 0..3 {
                dot += (self.trans[k + 1] * c[j] - suffix[j]) * d_color[j];
            }
            d_sigma_raw[k] = self.delta[k] * dot * logistic(sigma_raw[k]);
            for j in 0..3 {
                d_rgb_raw[(k, j)] = self.weights[k] * d_color[j] * c[j] * (1.0 - c[j]);
                suffix[j] += self.weights[k] * c[j];
            }
        }
    }
}

/// Forward pass over every sample of `rays`; `jitter` holds
/// `rays.len() * n_samples` bin offsets or is `None` for midpoints.
fn forward_rays(
    params: &FieldParams,
    rays: &[Ray],
    cfg: &RenderConfig,
    jitter: Option<&[f64]>,
) -> (Vec<Vec<f64>>, Forward) {
    let n = cfg.n_samples;
    let mut positions = Vec::with_capacity(rays.len() * n);
    let mut directions = Vec::with_capacity(rays.len() * n);
    let mut all_ts = Vec::with_capacity(rays.len());
    for (r, ray) in rays.iter().enumerate() {
        let ts = cfg.sample_positions(jitter.map(|j| &j[r * n..(r + 1) * n]));
        let d = [ray.direction.x, ray.direction.y, ray.direction.z];
        for &t in &ts {
            let p = ray.at(t);
            positions.push([p.x, p.y, p.z]);
            directions.push(d);
        }
        all_ts.push(ts);
    }
    let (pos, dir) = encode_batch(&params.arch().encoding, &positions, &directions);
    (all_ts, params.forward(pos, dir.view()))
}

fn composites(
    params: &FieldParams,
    rays: &[Ray],
    cfg: &RenderConfig,
    jitter: Option<&[f64]>,
) -> (Vec<Composite>, Forward) {
    let n = cfg.n_samples;
    let (all_ts, fwd) = forward_rays(params, rays, cfg, jitter);
    let sig = fwd.sigma_raw.as_slice().expect("contiguous");
    let comps = all_ts
        .into_iter()
        .enumerate()
        .map(|(r, ts)| {
            Composite::new(
                cfg,
                ts,
                &sig[r * n..(r + 1) * n],
                fwd.rgb_raw.slice(ndarray::s![r * n..(r + 1) * n, ..]),
            )
        })
        .collect();
    (comps, fwd)
}

/// Render one ray with deterministic midpoint samples.
pub fn render_ray(params: &FieldParams, ray: &Ray, cfg: &RenderConfig) -> RenderedRay {
    let (comps, _) = composites(params, std::slice::from_ref(ray), cfg, None);
    comps[0].rendered()
}

/// Render many rays with midpoint samples, in parallel over chunks.
pub fn render_rays(params: &FieldParams, rays: &[Ray], cfg: &RenderConfig) -> Vec<RenderedRay> {
    let chunks: Vec<&[Ray]> = rays.chunks(RAY_CHUNK).collect();
    par::map_slice(&chunks, |chunk| {
        composites(params, chunk, cfg, None)
            .0
            .iter()
            .map(Composite::rendered)
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Loss and full parameter gradient for one ray.
#[derive(Clone, Debug)]
pub struct RayGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    last_layer: std::ops::Range<usize>,
}

impl RayGradient {
    /// View of the gradient restricted to the final color layer.
    pub fn last_layer_grad(&self) -> &[f64] {
        &self.grad[self.last_layer.clone()]
    }
}

/// Photometric loss settings shared by training and scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub charbonnier_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Charbonnier,
            charbonnier_eps: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn l2() -> Self {
        Self {
            kind: LossKind::L2,
            ..Self::default()
        }
    }

    pub fn eval(&self, rendered: &Rgb, target: &Rgb) -> f64 {
        loss_per_ray(rendered, target, self.kind, self.charbonnier_eps)
    }

    pub fn gradient(&self, rendered: &Rgb, target: &Rgb) -> Rgb {
        loss_gradient(rendered, target, self.kind, self.charbonnier_eps)
    }
}

/// Accumulate `Σ_r ∂ℓ_r/∂θ` over one chunk into `grad`; returns `Σ_r ℓ_r`.
fn chunk_gradient(
    params: &FieldParams,
    rays: &[Ray],
    targets: &[Rgb],
    cfg: &RenderConfig,
    loss: &LossConfig,
    jitter: Option<&[f64]>,
    grad: &mut [f64],
) -> f64 {
    let n = cfg.n_samples;
    let (comps, fwd) = composites(params, rays, cfg, jitter);
    let mut d_sigma = Array1::zeros(rays.len() * n);
    let mut d_rgb = Array2::zeros((rays.len() * n, 3));
    let sig = fwd.sigma_raw.as_slice().expect("contiguous");
    let mut total = 0.0;
    for (r, (comp, target)) in comps.iter().zip(targets).enumerate() {
        total += loss.eval(&comp.color, target);
        let dc = loss.gradient(&comp.color, target);
        comp.backward(
            cfg,
            &sig[r * n..(r + 1) * n],
            &dc,
            &mut d_sigma.as_slice_mut().expect("contiguous")[r * n..(r + 1) * n],
            d_rgb.slice_mut(ndarray::s![r * n..(r + 1) * n, ..]),
        );
    }
    params.backward(&fwd, d_sigma.view(), &d_rgb, grad);
    total
}

/// Exact gradient of `loss ∘ render_ray` for one ray (midpoint samples).
pub fn backprop_ray(
    params: &FieldParams,
    ray: &Ray,
    target: &Rgb,
    cfg: &RenderConfig,
    loss: &LossConfig,
) -> RayGradient {
    let mut grad = vec![0.0; params.len()];
    let l = chunk_gradient(
        params,
        std::slice::from_ref(ray),
        std::slice::from_ref(target),
        cfg,
        loss,
        None,
        &mut grad,
    );
    RayGradient {
        loss: l,
        grad,
        last_layer: params.last_layer().range(),
    }
}

/// Sum of per-ray losses and gradients over a batch. Work is split into
/// fixed chunks whose partial gradients are added in chunk order, so the
/// result does not depend on the thread count.
pub fn batch_gradient(
    params: &FieldParams,
    rays: &[Ray],
    targets: &[Rgb],
    cfg: &RenderConfig,
    loss: &LossConfig,
    jitter: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let n = cfg.n_samples;
    let chunk_count = rays.len().div_ceil(RAY_CHUNK);
    let partials = par::map_range(chunk_count, |c| {
        let lo = c * RAY_CHUNK;
        let hi = (lo + RAY_CHUNK).min(rays.len());
        let mut g = vec![0.0; params.len()];
        let l = chunk_gradient(
            params,
            &rays[lo..hi],
            &targets[lo..hi],
            cfg,
            loss,
            jitter.map(|j| &j[lo * n..hi * n]),
            &mut g,
        );
        (l, g)
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in partials {
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (total, grad)
}

/// Midpoint render of one pixel together with its loss and the gradient of
/// that loss with respect to the last layer only.
#[derive(Clone, Debug)]
pub struct PixelEval {
    pub color: Rgb,
    pub depth: f64,
    pub loss: f64,
    pub last_layer_grad: Vec<f64>,
}

/// Forward-only evaluation of `loss` and its last-layer gradient for many
/// rays. Only the final affine layer is differentiated, which needs the
/// cached color-branch activations but no backward pass through the trunk.
pub fn last_layer_evals(
    params: &FieldParams,
    rays: &[Ray],
    targets: &[Rgb],
    cfg: &RenderConfig,
    loss: &LossConfig,
) -> Vec<PixelEval> {
    let n = cfg.n_samples;
    let last = params.last_layer();
    let chunks: Vec<usize> = (0..rays.len().div_ceil(RAY_CHUNK)).collect();
    par::map_slice(&chunks, |&c| {
        let lo = c * RAY_CHUNK;
        let hi = (lo + RAY_CHUNK).min(rays.len());
        let (comps, fwd) = composites(params, &rays[lo..hi], cfg, None);
        comps
            .iter()
            .enumerate()
            .map(|(r, comp)| {
                let target = &targets[lo + r];
                let dc = loss.gradient(&comp.color, target);
                let mut g = vec![0.0; last.range().len()];
                let (gw, gb) = g.split_at_mut(last.inputs * 3);
                for s in 0..n {
                    let row = r * n + s;
                    let h = fwd.color_hidden.row(row);
                    let cs = &comp.colors[s];
                    let w = comp.weights[s];
                    let mut d = [0.0; 3];
                    for j in 0..3 {
                        d[j] = w * dc[j] * cs[j] * (1.0 - cs[j]);
                        gb[j] += d[j];
                    }
                    for (i, &hv) in h.iter().enumerate() {
                        if hv != 0.0 {
                            for j in 0..3 {
                                gw[i * 3 + j] += hv * d[j];
                            }
                        }
                    }
                }
                PixelEval {
                    color: comp.color,
                    depth: comp.depth,
                    loss: loss.eval(&comp.color, target),
                    last_layer_grad: g,
                }
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{EncodingConfig, FieldArch};
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_arch() -> FieldArch {
        FieldArch {
            encoding: EncodingConfig {
                pos_frequencies: 2,
                dir_frequencies: 1,
            },
            trunk_width: 12,
            trunk_depth: 2,
            color_width: 10,
        }
    }

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray {
            origin: Vec3::from(o),
            direction: Vec3::from(d).normalize(),
            pixel: (0, 0),
            view_id: 0,
        }
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
        let mut d = [0.0; 3];
        for v in &mut d {
            *v = rng.random_range(-1.0..1.0);
        }
        ray(
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                -3.0,
            ],
            [d[0] * 0.3, d[1] * 0.3, 1.0],
        )
    }

    /// Field with σ ≡ softplus(sigma_bias) and c ≡ logistic(color_bias).
    fn homogeneous(sigma: f64, color_bias: [f64; 3]) -> FieldParams {
        let mut p = FieldParams::zeros(tiny_arch()).unwrap();
        // invert softplus so the density is exactly `sigma`
        let raw = (sigma.exp() - 1.0).ln();
        let dl = p.density_layer();
        p.values_mut()[dl.bias()][0] = raw;
        let ol = p.last_layer();
        p.values_mut()[ol.bias()].copy_from_slice(&color_bias);
        p
    }

    #[test]
    fn zero_density_renders_background() {
        let mut p = FieldParams::zeros(tiny_arch()).unwrap();
        let dl = p.density_layer();
        p.values_mut()[dl.bias()][0] = -800.0;
        let cfg = RenderConfig {
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let r = render_ray(&p, &ray([0.0; 3], [0.0, 0.0, 1.0]), &cfg);
        assert_eq!(r.final_transmittance, 1.0);
        assert_eq!(r.color, [0.1, 0.2, 0.3]);
        assert_eq!(r.depth, cfg.t_far);
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        let p = homogeneous(1.0, [0.0; 3]);
        let cfg = RenderConfig {
            t_near: 1.0,
            t_far: 3.0,
            n_samples: 256,
            background: [0.0; 3],
            stratified: false,
        };
        let r = render_ray(&p, &ray([0.0; 3], [0.0, 0.0, 1.0]), &cfg);
        let expected = 0.5 * (1.0 - (-2.0f64).exp());
        for k in 0..3 {
            assert!((r.color[k] - expected).abs() < 1e-3 * 0.5, "{}", r.color[k]);
        }
    }

    #[test]
    fn weights_partition_unity() {
        let p = FieldParams::init(tiny_arch(), 9).unwrap();
        let cfg = RenderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rays: Vec<Ray> = (0..100).map(|_| random_ray(&mut rng)).collect();
        for r in render_rays(&p, &rays, &cfg) {
            let s: f64 = r.weights.iter().sum::<f64>() + r.final_transmittance;
            assert!((s - 1.0).abs() < 1e-6);
            assert!(r.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let p = FieldParams::init(tiny_arch(), 2).unwrap();
        let cfg = RenderConfig::default();
        let rr = ray([0.1, 0.0, -3.0], [0.05, 0.1, 1.0]);
        let target = render_ray(&p, &rr, &cfg).color;
        let g = backprop_ray(&p, &rr, &target, &cfg, &LossConfig::l2());
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    fn loss_at(p: &FieldParams, r: &Ray, target: &Rgb, cfg: &RenderConfig, loss: &LossConfig) -> f64 {
        loss.eval(&render_ray(p, r, cfg).color, target)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = RenderConfig {
            n_samples: 16,
            background: [0.2, 0.1, 0.3],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = FieldParams::init(tiny_arch(), 7).unwrap();
        for loss in [LossConfig::l2(), LossConfig::default()] {
            for _ in 0..3 {
                let r = random_ray(&mut rng);
                let target = [0.9, 0.1, 0.4];
                let g = backprop_ray(&p, &r, &target, &cfg, &loss);
                for _ in 0..20 {
                    let idx = rng.random_range(0..p.len());
                    let h = 1e-4;
                    let mut a = p.clone();
                    a.values_mut()[idx] += h;
                    let mut b = p.clone();
                    b.values_mut()[idx] -= h;
                    let fd = (loss_at(&a, &r, &target, &cfg, &loss) - loss_at(&b, &r, &target, &cfg, &loss))
                        / (2.0 * h);
                    let an = g.grad[idx];
                    let scale = fd.abs().max(an.abs()).max(1e-6);
                    assert!((fd - an).abs() / scale < 1e-4, "param {idx}: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn last_layer_fast_path_matches_full_backprop() {
        let cfg = RenderConfig {
            n_samples: 24,
            ..Default::default()
        };
        let p = FieldParams::init(tiny_arch(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rays: Vec<Ray> = (0..40).map(|_| random_ray(&mut rng)).collect();
        let targets: Vec<Rgb> = (0..40).map(|i| [0.02 * i as f64, 0.5, 0.3]).collect();
        let loss = LossConfig::default();
        let evals = last_layer_evals(&p, &rays, &targets, &cfg, &loss);
        for (i, e) in evals.iter().enumerate() {
            let full = backprop_ray(&p, &rays[i], &targets[i], &cfg, &loss);
            assert!((full.loss - e.loss).abs() < 1e-12);
            for (a, b) in full.last_layer_grad().iter().zip(&e.last_layer_grad) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_ray_gradients() {
        let cfg = RenderConfig {
            n_samples: 8,
            ..Default::default()
        };
        let p = FieldParams::init(tiny_arch(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rays: Vec<Ray> = (0..37).map(|_| random_ray(&mut rng)).collect();
        let targets: Vec<Rgb> = vec![[0.5, 0.2, 0.8]; 37];
        let loss = LossConfig::l2();
        let (l, g) = batch_gradient(&p, &rays, &targets, &cfg, &loss, None);
        let mut l2 = 0.0;
        let mut g2 = vec![0.0; p.len()];
        for (r, t) in rays.iter().zip(&targets) {
            let rg = backprop_ray(&p, r, t, &cfg, &loss);
            l2 += rg.loss;
            for (a, b) in g2.iter_mut().zip(&rg.grad) {
                *a += b;
            }
        }
        assert!((l - l2).abs() < 1e-10);
        for (a, b) in g.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn density_path_gradient_ignores_direction() {
        // backpropagate a density-only signal for two viewing directions
        let p = FieldParams::init(tiny_arch(), 5).unwrap();
        let enc = p.arch().encoding;
        let xs = [[0.1, 0.2, 0.3], [-0.4, 0.0, 0.9]];
        let mut grads = Vec::new();
        for d in [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]] {
            let (pos, dir) = encode_batch(&enc, &xs, &[d, d]);
            let fwd = p.forward(pos, dir.view());
            let mut g = vec![0.0; p.len()];
            p.backward(&fwd, Array1::from(vec![1.0, -0.5]).view(), &Array2::zeros((2, 3)), &mut g);
            grads.push(g);
        }
        let path = p.density_path();
        assert_eq!(&grads[0][path.clone()], &grads[1][path.clone()]);
        assert!(grads[0][path.end..].iter().all(|&v| v == 0.0));
    }
}
