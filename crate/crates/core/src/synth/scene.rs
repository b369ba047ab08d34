//! Analytically ray-traced scenes made of spheres and axis-aligned boxes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray, Vec3};
use crate::par;
use crate::raster::{Grid, Rgb, RgbImage};

/// Two-tone 3D checker applied in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    pub cell: f64,
    pub albedo: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: Rgb,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checker: Option<Checker>,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        albedo: Rgb,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checker: Option<Checker>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: Rgb,
    pub ambient: f64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub primitive: usize,
}

fn color_ok(c: &Rgb) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        let (albedo, checker) = match self {
            Primitive::Sphere {
                radius,
                albedo,
                checker,
                ..
            } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidInput(format!("sphere radius {radius} <= 0")));
                }
                (albedo, checker)
            }
            Primitive::Box {
                min,
                max,
                albedo,
                checker,
            } => {
                if !(0..3).all(|k| min[k] < max[k]) {
                    return Err(Error::InvalidInput(format!(
                        "box min {min:?} not below max {max:?}"
                    )));
                }
                (albedo, checker)
            }
        };
        if !color_ok(albedo) || checker.as_ref().is_some_and(|c| !color_ok(&c.albedo)) {
            return Err(Error::InvalidInput("albedo outside [0,1]".into()));
        }
        if checker.as_ref().is_some_and(|c| !(c.cell > 0.0)) {
            return Err(Error::InvalidInput("checker cell must be positive".into()));
        }
        Ok(())
    }

    /// Smallest `t > t_min` where the ray enters the primitive, with the outward normal.
    fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vec3::from_row_slice(center);
                let oc = origin - c;
                let b = oc.dot(dir);
                let cc = oc.norm_squared() - radius * radius;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = -b - sq;
                let t1 = -b + sq;
                let t = if t0 > t_min {
                    t0
                } else if t1 > t_min {
                    t1
                } else {
                    return None;
                };
                let n = (origin + dir * t - c) / *radius;
                Some((t, n))
            }
            Primitive::Box { min, max, .. } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                let mut enter_axis = 0;
                let mut exit_axis = 0;
                for k in 0..3 {
                    if dir[k].abs() < 1e-300 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[k];
                    let mut a = (min[k] - origin[k]) * inv;
                    let mut b = (max[k] - origin[k]) * inv;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t_enter {
                        t_enter = a;
                        enter_axis = k;
                    }
                    if b < t_exit {
                        t_exit = b;
                        exit_axis = k;
                    }
                }
                if t_enter > t_exit {
                    return None;
                }
                let (t, axis) = if t_enter > t_min {
                    (t_enter, enter_axis)
                } else if t_exit > t_min {
                    (t_exit, exit_axis)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[axis] = if t == t_enter { -dir[axis].signum() } else { dir[axis].signum() };
                Some((t, n))
            }
        }
    }

    fn albedo_at(&self, p: &Vec3, normal: &Vec3) -> Rgb {
        let (albedo, checker) = match self {
            Primitive::Sphere {
                albedo, checker, ..
            }
            | Primitive::Box {
                albedo, checker, ..
            } => (albedo, checker),
        };
        match checker {
            None => *albedo,
            Some(ch) => {
                // sample just inside the surface so faces on cell planes are stable
                let q = p - normal * 1e-7;
                let parity = (q.x / ch.cell).floor() as i64
                    + (q.y / ch.cell).floor() as i64
                    + (q.z / ch.cell).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    *albedo
                } else {
                    ch.albedo
                }
            }
        }
    }
}

/// Direction toward the fixed directional light.
pub fn light_direction() -> Vec3 {
    Vec3::new(1.0, 1.0, 1.0).normalize()
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>, background: Rgb, ambient: f64, near: f64, far: f64) -> Result<Self> {
        let s = Self {
            primitives,
            background,
            ambient,
            near,
            far,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        if !color_ok(&self.background) {
            return Err(Error::InvalidInput("background outside [0,1]".into()));
        }
        if !(self.ambient > 0.0 && self.ambient <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "ambient {} outside (0, 1]",
                self.ambient
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidInput(format!(
                "depth bounds must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// Nearest intersection along `origin + t dir` with `t > t_min`.
    pub fn first_hit(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.intersect(origin, dir, t_min) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Shaded color and hit distance for one ray; `far` and background on a miss.
    pub fn trace(&self, ray: &Ray) -> (Rgb, f64) {
        match self.first_hit(&ray.origin, &ray.direction, 0.0) {
            Some(hit) if hit.t <= self.far => {
                let albedo = self.primitives[hit.primitive].albedo_at(&hit.point, &hit.normal);
                let lambert = hit.normal.dot(&light_direction()).max(0.0);
                let shade = self.ambient + (1.0 - self.ambient) * lambert;
                ([albedo[0] * shade, albedo[1] * shade, albedo[2] * shade], hit.t)
            }
            _ => (self.background, self.far),
        }
    }

    /// True when nothing blocks the segment from `eye` to `point` (up to `tol`).
    pub fn visible(&self, eye: &Vec3, point: &Vec3, tol: f64) -> bool {
        let d = point - eye;
        let dist = d.norm();
        let dir = d / dist;
        match self.first_hit(eye, &dir, 0.0) {
            Some(hit) => hit.t >= dist - tol,
            None => true,
        }
    }

    /// Hex SHA-256 of the canonical JSON description.
    pub fn description_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Render the clean image and the hit-distance map of `scene` from `camera`.
pub fn render_clean(scene: &AnalyticScene, camera: &Camera) -> (RgbImage, Grid<f64>) {
    let (w, h) = (camera.width, camera.height);
    let pixels = par::map_range(w * h, |i| scene.trace(&camera.ray_unchecked(i % w, i / w)));
    let (colors, depths): (Vec<Rgb>, Vec<f64>) = pixels.into_iter().unzip();
    (
        Grid::from_vec(w, h, colors).expect("sized"),
        Grid::from_vec(w, h, depths).expect("sized"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn axis_camera(f: f64, size: usize) -> Camera {
        Camera::new(
            0,
            f,
            f,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
            Matrix3::identity(),
            Vec3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let scene = AnalyticScene::new(vec![], [0.2, 0.3, 0.4], 0.5, 0.1, 9.0).unwrap();
        let (img, depth) = render_clean(&scene, &axis_camera(50.0, 16));
        assert!(img.as_slice().iter().all(|c| *c == [0.2, 0.3, 0.4]));
        assert!(depth.as_slice().iter().all(|&d| d == 9.0));
    }

    #[test]
    fn sphere_silhouette_and_center_depth() {
        let (d, r, f) = (5.0, 1.0, 40.0);
        let scene = AnalyticScene::new(
            vec![Primitive::Sphere {
                center: [0.0, 0.0, d],
                radius: r,
                albedo: [1.0, 1.0, 1.0],
                checker: None,
            }],
            [0.0; 3],
            0.3,
            0.1,
            20.0,
        )
        .unwrap();
        let cam = axis_camera(f, 64);
        let (_, depth) = render_clean(&scene, &cam);
        // closed-form silhouette radius in pixels
        let expected = f * r / (d * d - r * r).sqrt();
        let mut max_hit = 0.0f64;
        let mut min_miss = f64::INFINITY;
        for y in 0..64 {
            for x in 0..64 {
                let rr = ((x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2)).sqrt();
                if *depth.get(x, y) < 20.0 {
                    max_hit = max_hit.max(rr);
                } else {
                    min_miss = min_miss.min(rr);
                }
            }
        }
        assert!((max_hit - expected).abs() <= 1.0, "{max_hit} vs {expected}");
        assert!((min_miss - expected).abs() <= 1.0, "{min_miss} vs {expected}");

        // pixel (31,31)'s ray is not exactly axial; use an axial camera with cx = 31.5
        let cam = Camera::new(0, f, f, 31.5, 31.5, 64, 64, Matrix3::identity(), Vec3::zeros()).unwrap();
        let (_, depth) = render_clean(&scene, &cam);
        assert!((depth.get(31, 31) - (d - r)).abs() < 1e-9);
    }

    #[test]
    fn box_hits_face_with_outward_normal() {
        let prim = Primitive::Box {
            min: [-1.0, -1.0, 2.0],
            max: [1.0, 1.0, 3.0],
            albedo: [0.5; 3],
            checker: None,
        };
        let (t, n) = prim
            .intersect(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.0), 0.0)
            .unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert_eq!(n, Vec3::new(0.0, 0.0, -1.0));
        assert!(prim
            .intersect(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0), 0.0)
            .is_none());
    }

    #[test]
    fn visibility_blocked_by_occluder() {
        let scene = AnalyticScene::new(
            vec![Primitive::Sphere {
                center: [0.0, 0.0, 2.0],
                radius: 0.5,
                albedo: [1.0; 3],
                checker: None,
            }],
            [0.0; 3],
            0.3,
            0.1,
            20.0,
        )
        .unwrap();
        assert!(!scene.visible(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 5.0), 1e-6));
        assert!(scene.visible(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.5), 1e-6));
    }

    #[test]
    fn invalid_scenes_rejected() {
        let bad_sphere = Primitive::Sphere {
            center: [0.0; 3],
            radius: 0.0,
            albedo: [0.5; 3],
            checker: None,
        };
        assert!(AnalyticScene::new(vec![bad_sphere], [0.0; 3], 0.3, 0.1, 2.0).is_err());
        let bad_box = Primitive::Box {
            min: [0.0; 3],
            max: [1.0, 0.0, 1.0],
            albedo: [0.5; 3],
            checker: None,
        };
        assert!(AnalyticScene::new(vec![bad_box], [0.0; 3], 0.3, 0.1, 2.0).is_err());
        assert!(AnalyticScene::new(vec![], [1.5, 0.0, 0.0], 0.3, 0.1, 2.0).is_err());
        assert!(AnalyticScene::new(vec![], [0.0; 3], 0.0, 0.1, 2.0).is_err());
    }
}
