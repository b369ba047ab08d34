use serde::{Deserialize, Serialize};

use crate::raster::Rgb;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    #[default]
    Charbonnier,
}

/// Photometric loss between a rendered and a target color.
pub fn loss_per_ray(rendered: &Rgb, target: &Rgb, kind: LossKind, charbonnier_eps: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..3 {
        let r = rendered[k] - target[k];
        acc += match kind {
            LossKind::L2 => r * r,
            LossKind::Charbonnier => (r * r + charbonnier_eps * charbonnier_eps).sqrt(),
        };
    }
    acc
}

/// Gradient of [`loss_per_ray`] with respect to the rendered color.
pub fn loss_gradient(rendered: &Rgb, target: &Rgb, kind: LossKind, charbonnier_eps: f64) -> Rgb {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let r = rendered[k] - target[k];
        g[k] = match kind {
            LossKind::L2 => 2.0 * r,
            LossKind::Charbonnier => r / (r * r + charbonnier_eps * charbonnier_eps).sqrt(),
        };
    }
    g
}
