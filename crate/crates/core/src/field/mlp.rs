//! The radiance-field MLP.
//!
//! Encoded position feeds a ReLU trunk. The density head reads only the
//! trunk output, so σ cannot depend on the viewing direction. The color
//! branch concatenates the trunk output with the encoded direction, applies
//! one ReLU layer and a final affine layer to RGB logits; that final layer is
//! the "last layer" slice used for influence scores.
//!
//! All parameters live in one flat vector. Each layer stores a row-major
//! `inputs x outputs` weight block followed by its bias.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::encoding::{encode_into, EncodingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldArch {
    pub encoding: EncodingConfig,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub color_width: usize,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            trunk_width: 64,
            trunk_depth: 4,
            color_width: 64,
        }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_width == 0 || self.trunk_depth == 0 || self.color_width == 0 {
            return Err(Error::Config(
                "field widths and depth must be positive".into(),
            ));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let w = self.trunk_width;
        let mut dims = Vec::with_capacity(self.trunk_depth + 3);
        dims.push((self.encoding.pos_dim(), w));
        for _ in 1..self.trunk_depth {
            dims.push((w, w));
        }
        dims.push((w, 1));
        dims.push((w + self.encoding.dir_dim(), self.color_width));
        dims.push((self.color_width, 3));
        dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias(&self) -> Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.bias().end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    arch: FieldArch,
    layers: Vec<LayerShape>,
    values: Vec<f64>,
}

fn layout(arch: &FieldArch) -> (Vec<LayerShape>, usize) {
    let mut offset = 0;
    let layers = arch
        .layer_dims()
        .into_iter()
        .map(|(inputs, outputs)| {
            let l = LayerShape {
                inputs,
                outputs,
                offset,
            };
            offset += inputs * outputs + outputs;
            l
        })
        .collect();
    (layers, offset)
}

impl FieldParams {
    /// Glorot-uniform weights and zero biases from `seed`.
    pub fn init(arch: FieldArch, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in p.layers.clone() {
            let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for v in &mut p.values[l.weights()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn zeros(arch: FieldArch) -> Result<Self> {
        arch.validate()?;
        let (layers, n) = layout(&arch);
        Ok(Self {
            arch,
            layers,
            values: vec![0.0; n],
        })
    }

    pub fn from_values(arch: FieldArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let (layers, n) = layout(&arch);
        if values.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} parameters, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            layers,
            values,
        })
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn density_layer(&self) -> LayerShape {
        self.layers[self.arch.trunk_depth]
    }

    pub(crate) fn color_hidden_layer(&self) -> LayerShape {
        self.layers[self.arch.trunk_depth + 1]
    }

    /// The final color-head affine layer (weights then bias).
    pub fn last_layer(&self) -> LayerShape {
        self.layers[self.arch.trunk_depth + 2]
    }

    /// Parameters the density depends on: the trunk and the density head.
    pub fn density_path(&self) -> Range<usize> {
        0..self.density_layer().range().end
    }

    fn weight_view(&self, l: LayerShape) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.inputs, l.outputs), &self.values[l.weights()]).expect("layout")
    }

    fn bias_view(&self, l: LayerShape) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[l.bias()])
    }

    /// Content hash over architecture and values.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cached activations of one batched forward pass over `n` samples.
pub(crate) struct Forward {
    pub inputs: Array2<f64>,
    /// Post-ReLU trunk outputs, one per trunk layer.
    pub trunk: Vec<Array2<f64>>,
    pub color_in: Array2<f64>,
    pub color_hidden: Array2<f64>,
    pub sigma_raw: Array1<f64>,
    pub rgb_raw: Array2<f64>,
}

fn affine(a: &ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut z = Array2::zeros((a.nrows(), w.ncols()));
    z.rows_mut().into_iter().for_each(|mut r| r.assign(&b));
    general_mat_mul(1.0, a, &w, 1.0, &mut z);
    z
}

fn relu_in_place(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

/// `grad[W] += aᵀ dz`, `grad[b] += Σ_rows dz`.
fn accumulate(a: &ArrayView2<'_, f64>, dz: &Array2<f64>, l: LayerShape, grad: &mut [f64]) {
    let (w_part, rest) = grad[l.offset..l.bias().end].split_at_mut(l.inputs * l.outputs);
    let mut gw = ArrayViewMut2::from_shape((l.inputs, l.outputs), w_part).expect("layout");
    general_mat_mul(1.0, &a.t(), dz, 1.0, &mut gw);
    for (g, s) in rest.iter_mut().zip(dz.sum_axis(Axis(0)).iter()) {
        *g += s;
    }
}

impl FieldParams {
    /// Forward pass for `n` samples given encoded positions and directions.
    pub(crate) fn forward(&self, inputs: Array2<f64>, dir_enc: ArrayView2<'_, f64>) -> Forward {
        let depth = self.arch.trunk_depth;
        let width = self.arch.trunk_width;
        let n = inputs.nrows();
        let mut trunk: Vec<Array2<f64>> = Vec::with_capacity(depth);
        for i in 0..depth {
            let l = self.layers[i];
            let prev = if i == 0 { inputs.view() } else { trunk[i - 1].view() };
            let mut z = affine(&prev, self.weight_view(l), self.bias_view(l));
            relu_in_place(&mut z);
            trunk.push(z);
        }
        let feat = trunk.last().expect("depth >= 1");
        let dl = self.density_layer();
        let sigma_raw = affine(&feat.view(), self.weight_view(dl), self.bias_view(dl))
            .index_axis_move(Axis(1), 0);

        let mut color_in = Array2::zeros((n, width + dir_enc.ncols()));
        color_in.slice_mut(s![.., ..width]).assign(feat);
        color_in.slice_mut(s![.., width..]).assign(&dir_enc);
        let cl = self.color_hidden_layer();
        let mut color_hidden = affine(&color_in.view(), self.weight_view(cl), self.bias_view(cl));
        relu_in_place(&mut color_hidden);
        let ol = self.last_layer();
        let rgb_raw = affine(&color_hidden.view(), self.weight_view(ol), self.bias_view(ol));
        Forward {
            inputs,
            trunk,
            color_in,
            color_hidden,
            sigma_raw,
            rgb_raw,
        }
    }

    /// Accumulate parameter gradients into `grad` given upstream gradients
    /// with respect to the raw density and RGB logits.
    pub(crate) fn backward(
        &self,
        fwd: &Forward,
        d_sigma_raw: ArrayView1<'_, f64>,
        d_rgb_raw: &Array2<f64>,
        grad: &mut [f64],
    ) {
        let depth = self.arch.trunk_depth;
        let width = self.arch.trunk_width;

        let ol = self.last_layer();
        accumulate(&fwd.color_hidden.view(), d_rgb_raw, ol, grad);
        let mut d_hidden = d_rgb_raw.dot(&self.weight_view(ol).t());
        d_hidden.zip_mut_with(&fwd.color_hidden, |d, &h| {
            if h <= 0.0 {
                *d = 0.0
            }
        });

        let cl = self.color_hidden_layer();
        accumulate(&fwd.color_in.view(), &d_hidden, cl, grad);
        let w_color = self.weight_view(cl);
        let mut d_feat = d_hidden.dot(&w_color.slice(s![..width, ..]).t());

        let dl = self.density_layer();
        let feat = fwd.trunk.last().expect("depth >= 1");
        let d_sigma = d_sigma_raw.to_owned().insert_axis(Axis(1));
        accumulate(&feat.view(), &d_sigma, dl, grad);
        let w_density = self.weight_view(dl);
        // rank-one update: d_feat += d_sigma * w_densityᵀ
        for (mut row, &ds) in d_feat.rows_mut().into_iter().zip(d_sigma_raw.iter()) {
            row.scaled_add(ds, &w_density.column(0));
        }

        let mut d_act = d_feat;
        for i in (0..depth).rev() {
            let l = self.layers[i];
            d_act.zip_mut_with(&fwd.trunk[i], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            let prev = if i == 0 { fwd.inputs.view() } else { fwd.trunk[i - 1].view() };
            accumulate(&prev, &d_act, l, grad);
            if i > 0 {
                d_act = d_act.dot(&self.weight_view(l).t());
            }
        }
    }
}

/// Encode sample positions and per-sample directions into input matrices.
pub(crate) fn encode_batch(
    enc: &EncodingConfig,
    positions: &[[f64; 3]],
    directions: &[[f64; 3]],
) -> (Array2<f64>, Array2<f64>) {
    let n = positions.len();
    let mut pos = Array2::zeros((n, enc.pos_dim()));
    let mut dir = Array2::zeros((n, enc.dir_dim()));
    for (i, (p, d)) in positions.iter().zip(directions).enumerate() {
        encode_into(p, enc.pos_frequencies, pos.row_mut(i).as_slice_mut().expect("row-major"));
        encode_into(d, enc.dir_frequencies, dir.row_mut(i).as_slice_mut().expect("row-major"));
    }
    (pos, dir)
}

/// Evaluate the field at one point: `(rgb, σ)`.
pub fn field_eval(params: &FieldParams, x: &[f64; 3], d: &[f64; 3]) -> ([f64; 3], f64) {
    let (pos, dir) = encode_batch(&params.arch.encoding, &[*x], &[*d]);
    let f = params.forward(pos, dir.view());
    let rgb = [
        logistic(f.rgb_raw[(0, 0)]),
        logistic(f.rgb_raw[(0, 1)]),
        logistic(f.rgb_raw[(0, 2)]),
    ];
    (rgb, softplus(f.sigma_raw[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> FieldArch {
        FieldArch {
            encoding: EncodingConfig {
                pos_frequencies: 2,
                dir_frequencies: 1,
            },
            trunk_width: 8,
            trunk_depth: 2,
            color_width: 6,
        }
    }

    #[test]
    fn layout_is_contiguous_and_last_layer_is_color_head() {
        let p = FieldParams::init(FieldArch::default(), 0).unwrap();
        let mut end = 0;
        for l in p.layers() {
            assert_eq!(l.offset, end);
            end = l.range().end;
        }
        assert_eq!(end, p.len());
        let last = p.last_layer();
        assert_eq!((last.inputs, last.outputs), (64, 3));
        assert_eq!(last.range().len(), 65 * 3);
        assert_eq!(last.range().end, p.len());
    }

    #[test]
    fn density_ignores_direction() {
        let p = FieldParams::init(small_arch(), 3).unwrap();
        for i in 0..20 {
            let x = [0.1 * i as f64, -0.3, 0.7 - 0.05 * i as f64];
            let (c1, s1) = field_eval(&p, &x, &[0.0, 0.0, 1.0]);
            let (c2, s2) = field_eval(&p, &x, &[0.6, 0.8, 0.0]);
            assert_eq!(s1, s2);
            assert!(s1 >= 0.0);
            assert!(c1.iter().chain(&c2).all(|&c| c > 0.0 && c < 1.0));
        }
    }

    #[test]
    fn zero_weights_expose_biases() {
        let mut p = FieldParams::zeros(small_arch()).unwrap();
        let dl = p.density_layer();
        let ol = p.last_layer();
        p.values_mut()[dl.bias()][0] = 0.4;
        p.values_mut()[ol.bias()].copy_from_slice(&[-1.0, 0.0, 2.0]);
        let (c, s) = field_eval(&p, &[0.3, 0.2, 0.1], &[0.0, 1.0, 0.0]);
        assert!((s - (1.0 + 0.4f64.exp()).ln()).abs() < 1e-15);
        assert!((c[0] - logistic(-1.0)).abs() < 1e-15);
        assert_eq!(c[1], 0.5);
        assert!((c[2] - logistic(2.0)).abs() < 1e-15);
    }

    #[test]
    fn outputs_finite_in_bounded_region() {
        let p = FieldParams::init(FieldArch::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut x = [0.0; 3];
            for v in &mut x {
                *v = rng.random_range(-5.7..5.7);
            }
            let (c, s) = field_eval(&p, &x, &[0.0, 0.0, 1.0]);
            assert!(s.is_finite() && c.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn stable_activations() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
    }

    #[test]
    fn from_values_checks_length() {
        assert!(FieldParams::from_values(small_arch(), vec![0.0; 3]).is_err());
    }
}
