//! Ready-made scenes and camera rigs used by the CLI, tests and benchmarks.

use crate::geometry::{Camera, Vec3};

use super::scene::{AnalyticScene, Checker, Primitive};

/// Checkered ground slab with two spheres and a box.
pub fn benchmark_scene() -> AnalyticScene {
    AnalyticScene::new(
        vec![
            Primitive::Box {
                min: [-2.2, -2.2, -0.2],
                max: [2.2, 2.2, 0.0],
                albedo: [0.78, 0.74, 0.66],
                checker: Some(Checker {
                    cell: 1.1,
                    albedo: [0.32, 0.38, 0.44],
                }),
            },
            Primitive::Sphere {
                center: [0.35, -0.3, 0.45],
                radius: 0.45,
                albedo: [0.85, 0.35, 0.25],
                checker: None,
            },
            Primitive::Sphere {
                center: [-0.6, 0.45, 0.3],
                radius: 0.3,
                albedo: [0.25, 0.45, 0.85],
                checker: None,
            },
            Primitive::Box {
                min: [0.3, 0.55, 0.0],
                max: [0.8, 1.05, 0.6],
                albedo: [0.35, 0.7, 0.35],
                checker: None,
            },
        ],
        [0.05, 0.05, 0.08],
        0.35,
        2.8,
        7.5,
    )
    .expect("preset scene is valid")
}

/// Two unit-diameter spheres 0.6 apart, for occlusion checks.
pub fn two_sphere_scene() -> AnalyticScene {
    AnalyticScene::new(
        vec![
            Primitive::Sphere {
                center: [-0.8, 0.0, 0.0],
                radius: 0.5,
                albedo: [0.9, 0.4, 0.3],
                checker: None,
            },
            Primitive::Sphere {
                center: [0.8, 0.0, 0.0],
                radius: 0.5,
                albedo: [0.3, 0.5, 0.9],
                checker: None,
            },
        ],
        [0.0, 0.0, 0.0],
        0.35,
        1.0,
        8.0,
    )
    .expect("preset scene is valid")
}

/// Cameras on a ring around the z axis looking at `target`.
pub fn ring(
    azimuths: impl IntoIterator<Item = f64>,
    first_id: usize,
    distance: f64,
    elevation: f64,
    target: Vec3,
    size: usize,
) -> Vec<Camera> {
    azimuths
        .into_iter()
        .enumerate()
        .map(|(i, az)| {
            let eye = target
                + Vec3::new(
                    distance * elevation.cos() * az.cos(),
                    distance * elevation.cos() * az.sin(),
                    distance * elevation.sin(),
                );
            Camera::look_at(first_id + i, eye, target, Vec3::z(), 1.2 * size as f64, size, size)
                .expect("ring camera is valid")
        })
        .collect()
}

/// `n_train` training cameras evenly spaced on a ring plus `n_test` held-out
/// cameras placed between them, all `size x size`.
pub fn ring_cameras(n_train: usize, n_test: usize, size: usize) -> (Vec<Camera>, Vec<Camera>) {
    let tau = std::f64::consts::TAU;
    let target = Vec3::new(0.0, 0.0, 0.25);
    let elevation = 35f64.to_radians();
    let train = ring(
        (0..n_train).map(|i| i as f64 * tau / n_train as f64),
        0,
        4.5,
        elevation,
        target,
        size,
    );
    let test = ring(
        (0..n_test).map(|j| (j as f64 + 0.37) * tau / n_test.max(1) as f64),
        0,
        4.5,
        elevation + 0.08,
        target,
        size,
    );
    (train, test)
}

/// Low ring around the two-sphere scene, so spheres occlude each other.
pub fn two_sphere_cameras(n: usize, size: usize) -> Vec<Camera> {
    let tau = std::f64::consts::TAU;
    ring(
        (0..n).map(|i| i as f64 * tau / n as f64),
        0,
        4.0,
        10f64.to_radians(),
        Vec3::zeros(),
        size,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render_clean;

    #[test]
    fn benchmark_views_mostly_hit_geometry() {
        let scene = benchmark_scene();
        let (train, test) = ring_cameras(20, 5, 32);
        for cam in train.iter().chain(&test) {
            let (_, depth) = render_clean(&scene, cam);
            let hits = depth.as_slice().iter().filter(|&&d| d < scene.far).count();
            assert!(hits * 2 > depth.len(), "view {} sees mostly background", cam.view_id);
            // geometry must lie inside the rendering interval
            assert!(depth.as_slice().iter().all(|&d| d >= scene.near));
        }
    }
}
