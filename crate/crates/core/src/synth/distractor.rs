//! Image-space distractors: opaque saturated shapes composited into a view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask, Rgb, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    /// Probability that a given view receives any distractors.
    pub per_view_probability: f64,
    /// Inclusive range for the number of shapes in a contaminated view.
    pub count_range: (usize, usize),
    /// Shapes drawn uniformly from this list.
    pub shapes: Vec<ShapeKind>,
    /// Shape extent (disk diameter, rectangle side) as a fraction of the
    /// image diagonal, drawn uniformly from this range.
    pub size_range: (f64, f64),
    pub seed: u64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            per_view_probability: 0.5,
            count_range: (1, 1),
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle],
            size_range: (0.15, 0.2),
            seed: 0,
        }
    }
}

impl DistractorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_view_probability) {
            return Err(Error::InvalidInput(format!(
                "per_view_probability {} outside [0,1]",
                self.per_view_probability
            )));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::InvalidInput("count_range min > max".into()));
        }
        let (a, b) = self.size_range;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "size_range ({a}, {b}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::InvalidInput("no distractor shapes allowed".into()));
        }
        Ok(())
    }
}

/// One placed shape; coordinates in continuous pixel units.
#[derive(Clone, Debug, PartialEq)]
pub enum PlacedShape {
    Disk { cx: f64, cy: f64, radius: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl PlacedShape {
    /// Whether the pixel center `(x + 0.5, y + 0.5)` lies inside.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            PlacedShape::Disk { cx, cy, radius } => {
                (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius
            }
            PlacedShape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
        }
    }
}

fn saturated_color(rng: &mut impl Rng) -> Rgb {
    // fully saturated, full value hue
    let h = rng.random_range(0.0..6.0f64);
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Sample the shapes for one view of size `width x height`.
pub fn sample_shapes(
    spec: &DistractorSpec,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Vec<(PlacedShape, Rgb)> {
    if !rng.random_bool(spec.per_view_probability) {
        return Vec::new();
    }
    let diag = ((width * width + height * height) as f64).sqrt();
    let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let extent = |rng: &mut dyn rand::RngCore| {
            let (a, b) = spec.size_range;
            let f = if a < b { rng.random_range(a..=b) } else { a };
            f * diag
        };
        // centers are drawn so the shape lies inside the image when it fits
        let center = |rng: &mut dyn rand::RngCore, half_w: f64, half_h: f64| {
            let cx = if 2.0 * half_w < w {
                rng.random_range(half_w..=w - half_w)
            } else {
                w / 2.0
            };
            let cy = if 2.0 * half_h < h {
                rng.random_range(half_h..=h - half_h)
            } else {
                h / 2.0
            };
            (cx, cy)
        };
        let shape = match kind {
            ShapeKind::Disk => {
                let radius = extent(rng) / 2.0;
                let (cx, cy) = center(rng, radius, radius);
                PlacedShape::Disk { cx, cy, radius }
            }
            ShapeKind::Rectangle => {
                let sw = extent(rng);
                let sh = extent(rng);
                let (cx, cy) = center(rng, sw / 2.0, sh / 2.0);
                PlacedShape::Rect {
                    x0: cx - sw / 2.0,
                    y0: cy - sh / 2.0,
                    x1: cx + sw / 2.0,
                    y1: cy + sh / 2.0,
                }
            }
        };
        out.push((shape, saturated_color(rng)));
    }
    out
}

/// Composite sampled distractors into `image`. Deterministic in `rng_seed`.
pub fn inject_distractors(
    image: &RgbImage,
    spec: &DistractorSpec,
    rng_seed: u64,
) -> Result<(RgbImage, Mask)> {
    if image.is_empty() {
        return Err(Error::InvalidInput("cannot inject into an empty image".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shapes = sample_shapes(spec, image.width(), image.height(), &mut rng);
    let mut out = image.clone();
    let mut mask = Grid::filled(image.width(), image.height(), false);
    for (shape, color) in &shapes {
        for y in 0..image.height() {
            for x in 0..image.width() {
                if shape.covers(x, y) {
                    *out.get_mut(x, y) = *color;
                    *mask.get_mut(x, y) = true;
                }
            }
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize) -> RgbImage {
        Grid::filled(w, h, [0.5, 0.5, 0.5])
    }

    #[test]
    fn zero_probability_is_identity() {
        let spec = DistractorSpec {
            per_view_probability: 0.0,
            ..Default::default()
        };
        let img = gray(32, 32);
        let (out, mask) = inject_distractors(&img, &spec, 7).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn radius_five_disk_pixel_count() {
        let diag = (2.0f64 * 64.0 * 64.0).sqrt();
        let spec = DistractorSpec {
            per_view_probability: 1.0,
            count_range: (1, 1),
            shapes: vec![ShapeKind::Disk],
            size_range: (10.0 / diag, 10.0 / diag),
            seed: 0,
        };
        for seed in 0..50 {
            let (_, mask) = inject_distractors(&gray(64, 64), &spec, seed).unwrap();
            let n = mask.count();
            assert!((69..=81).contains(&n), "seed {seed}: {n} pixels");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = DistractorSpec {
            per_view_probability: 1.0,
            count_range: (1, 3),
            ..Default::default()
        };
        let a = inject_distractors(&gray(40, 30), &spec, 99).unwrap();
        let b = inject_distractors(&gray(40, 30), &spec, 99).unwrap();
        assert_eq!(a, b);
        let c = inject_distractors(&gray(40, 30), &spec, 100).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn mask_marks_exactly_the_changed_pixels() {
        let spec = DistractorSpec {
            per_view_probability: 1.0,
            count_range: (2, 2),
            ..Default::default()
        };
        let img = gray(48, 48);
        let (out, mask) = inject_distractors(&img, &spec, 3).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                if *mask.get(x, y) {
                    assert_ne!(out.get(x, y), img.get(x, y));
                } else {
                    assert_eq!(out.get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let img = gray(8, 8);
        let mut spec = DistractorSpec {
            per_view_probability: 1.5,
            ..Default::default()
        };
        assert!(inject_distractors(&img, &spec, 0).is_err());
        spec.per_view_probability = 0.5;
        spec.size_range = (0.3, 0.1);
        assert!(inject_distractors(&img, &spec, 0).is_err());
        spec.size_range = (0.1, 0.2);
        spec.count_range = (3, 1);
        assert!(inject_distractors(&img, &spec, 0).is_err());
    }
}
