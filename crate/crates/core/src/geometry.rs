//! Pinhole cameras, ray generation and point projection.
//!
//! Cameras store the world-to-camera transform `x_cam = R x_world + t`.
//! Pixel `(px, py)` covers `[px, px+1) x [py, py+1)` and its center sits at
//! `(px + 0.5, py + 0.5)`; rendering and reprojection both use that center.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_json, write_json_atomically};

pub type Vec3 = Vector3<f64>;

const ROTATION_TOL: f64 = 1e-9;
/// Points closer than this to the image plane are treated as behind the camera.
const MIN_DEPTH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    rotation: Matrix3<f64>,
    translation: Vec3,
    pub view_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (usize, usize),
    pub view_id: usize,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Continuous image coordinates and camera-frame depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl Projection {
    /// Integer pixel whose center is nearest to the projection.
    pub fn nearest_pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let px = (self.x - 0.5).round();
        let py = (self.y - 0.5).round();
        if px < 0.0 || py < 0.0 || px >= width as f64 || py >= height as f64 {
            return None;
        }
        Some((px as usize, py as usize))
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= ROTATION_TOL) {
        return Err(Error::InvalidInput(format!(
            "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if !((det - 1.0).abs() <= ROTATION_TOL) {
        return Err(Error::InvalidInput(format!(
            "rotation determinant is {det}, expected +1"
        )));
    }
    Ok(())
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        view_id: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vec3,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image size must be non-zero".into()));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidInput(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("translation must be finite".into()));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            view_id,
        })
    }

    /// Camera at `eye` looking toward `target`, image `y` pointing along `-up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        view_id: usize,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        // rows are the camera axes expressed in world coordinates
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Self::new(
            view_id,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn ray_for_pixel(&self, px: usize, py: usize) -> Result<Ray> {
        if px >= self.width || py >= self.height {
            return Err(Error::InvalidInput(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_unchecked(px, py))
    }

    pub(crate) fn ray_unchecked(&self, px: usize, py: usize) -> Ray {
        let cam_dir = Vec3::new(
            (px as f64 + 0.5 - self.cx) / self.fx,
            (py as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let direction = (self.rotation.transpose() * cam_dir).normalize();
        Ray {
            origin: self.center(),
            direction,
            pixel: (px, py),
            view_id: self.view_id,
        }
    }

    pub fn project_point(&self, point: &Vec3) -> Option<Projection> {
        let pc = self.rotation * point + self.translation;
        if pc.z <= MIN_DEPTH {
            return None;
        }
        let x = self.fx * pc.x / pc.z + self.cx;
        let y = self.fy * pc.y / pc.z + self.cy;
        if !(x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64) {
            return None;
        }
        Some(Projection { x, y, depth: pc.z })
    }
}

/// One entry of `cameras.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub view_id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            view_id: c.view_id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        Camera::new(
            r.view_id,
            r.fx,
            r.fy,
            r.cx,
            r.cy,
            r.width,
            r.height,
            Matrix3::from_row_slice(&r.rotation),
            Vec3::from_row_slice(&r.translation),
        )
    }
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    write_json_atomically(path, &records)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = read_json(path)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Camera::try_from(r).map_err(|e| Error::BadField {
                path: path.to_path_buf(),
                field: format!("[{i}]"),
                reason: e.to_string(),
            })
        })
        .collect()
}
