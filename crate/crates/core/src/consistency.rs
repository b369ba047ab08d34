//! Cross-view consistency of per-pixel scores.
//!
//! Each pixel is lifted to a surface point at its expected depth and
//! reprojected into the other views. A corresponding pixel counts only when
//! its own lifted point lies within `occlusion_threshold` of the query point,
//! which rejects views where the point is hidden. The query is flagged when
//! its score falls outside `μ ± 3σ` of the scores gathered this way.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_rays, FieldParams, RenderConfig};
use crate::geometry::{Camera, Vec3};
use crate::influence::ScoreMap;
use crate::par;
use crate::raster::{
    load_gray8_png, read_json, save_gray8_png, write_json_atomically, Grid, Mask,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagMode {
    /// Each pixel is judged once, against its own correspondence set.
    #[default]
    Query,
    /// Every set votes on all of its members; majority decides.
    MemberVote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub occlusion_threshold: f64,
    pub min_correspondences: usize,
    pub sigma_floor: f64,
    /// Extra floor on σ as a multiple of the median valid score; 0 disables it.
    #[serde(default)]
    pub relative_sigma_floor: f64,
    pub include_self: bool,
    #[serde(default)]
    pub mode: FlagMode,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            occlusion_threshold: 0.1,
            min_correspondences: 4,
            sigma_floor: 1e-12,
            relative_sigma_floor: 0.0,
            include_self: true,
            mode: FlagMode::Query,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.occlusion_threshold > 0.0) {
            return Err(Error::Config("occlusion_threshold must be positive".into()));
        }
        if self.min_correspondences == 0 {
            return Err(Error::Config("min_correspondences must be at least 1".into()));
        }
        if !(self.sigma_floor >= 0.0) {
            return Err(Error::Config("sigma_floor must be non-negative".into()));
        }
        if !(self.relative_sigma_floor >= 0.0 && self.relative_sigma_floor.is_finite()) {
            return Err(Error::Config("relative_sigma_floor must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Copy whose `sigma_floor` also covers the relative floor for `scores`.
    pub fn resolved(&self, scores: &ScoreMap) -> Self {
        let mut c = self.clone();
        if self.relative_sigma_floor > 0.0 {
            let mut v: Vec<f64> = scores.valid_scores().map(|(_, s)| s).collect();
            if !v.is_empty() {
                let mid = v.len() / 2;
                let (_, median, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
                c.sigma_floor = c.sigma_floor.max(self.relative_sigma_floor * *median);
            }
        }
        c
    }
}

/// Lifted surface point of every pixel of every view.
#[derive(Clone, Debug)]
pub struct SurfaceMaps {
    cameras: Vec<Camera>,
    points: Vec<Grid<Vec3>>,
}

impl SurfaceMaps {
    /// Points at the given ray-parameter depths.
    pub fn from_depths(cameras: &[Camera], depths: &[Grid<f64>]) -> Result<Self> {
        if cameras.len() != depths.len() {
            return Err(Error::InvalidInput("one depth map per camera is required".into()));
        }
        let points = cameras
            .iter()
            .zip(depths)
            .map(|(cam, d)| {
                d.ensure_dims((cam.width, cam.height), &format!("depth of view {}", cam.view_id))?;
                Ok(Grid::from_fn(cam.width, cam.height, |x, y| {
                    cam.ray_unchecked(x, y).at(*d.get(x, y))
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cameras: cameras.to_vec(),
            points,
        })
    }

    /// Points at the expected termination depth of a trained field.
    pub fn from_field(params: &FieldParams, cameras: &[Camera], rcfg: &RenderConfig) -> Result<Self> {
        let depths = expected_depths(params, cameras, rcfg);
        Self::from_depths(cameras, &depths)
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn point(&self, view: usize, x: usize, y: usize) -> Vec3 {
        *self.points[view].get(x, y)
    }
}

/// Midpoint-rendered expected depth of every pixel of every camera.
pub fn expected_depths(params: &FieldParams, cameras: &[Camera], rcfg: &RenderConfig) -> Vec<Grid<f64>> {
    let mut mid = rcfg.clone();
    mid.stratified = false;
    cameras
        .iter()
        .map(|cam| {
            let rays: Vec<_> = (0..cam.pixel_count())
                .map(|i| cam.ray_unchecked(i % cam.width, i / cam.width))
                .collect();
            let d = render_rays(params, &rays, &mid).into_iter().map(|r| r.depth).collect();
            Grid::from_vec(cam.width, cam.height, d).expect("sized")
        })
        .collect()
}

/// Surface point and depth of one pixel under a trained field.
pub fn lift_pixel(
    params: &FieldParams,
    camera: &Camera,
    pixel: (usize, usize),
    rcfg: &RenderConfig,
) -> Result<(Vec3, f64)> {
    let ray = camera.ray_for_pixel(pixel.0, pixel.1)?;
    let mut mid = rcfg.clone();
    mid.stratified = false;
    let depth = crate::field::render_ray(params, &ray, &mid).depth;
    Ok((ray.at(depth), depth))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Member {
    pub view_id: usize,
    pub pixel: (usize, usize),
    pub score: f64,
    pub depth_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub query_view: usize,
    pub query_pixel: (usize, usize),
    pub query_score: f64,
    pub surface_point: Vec3,
    pub members: Vec<Member>,
}

impl CorrespondenceSet {
    /// Population mean and standard deviation of member scores.
    pub fn stats(&self) -> (f64, f64) {
        mean_std(self.members.iter().map(|m| m.score))
    }
}

fn mean_std(scores: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = scores.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = scores.clone().sum::<f64>() / n;
    let var = scores.map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Correspondences of one query pixel.
///
/// Members from views whose score is unavailable at the corresponding pixel
/// are skipped. Returns `None` when the query pixel itself has no score.
pub fn build_correspondences(
    query_view: usize,
    pixel: (usize, usize),
    surfaces: &SurfaceMaps,
    scores: &ScoreMap,
    cfg: &ConsistencyConfig,
) -> Option<CorrespondenceSet> {
    let query_score = scores.get(query_view, pixel.0, pixel.1)?;
    let x = surfaces.point(query_view, pixel.0, pixel.1);
    let mut members = Vec::new();
    for (v, cam) in surfaces.cameras.iter().enumerate() {
        if v == query_view {
            continue;
        }
        let Some(p) = cam.project_point(&x).and_then(|pr| pr.nearest_pixel(cam.width, cam.height))
        else {
            continue;
        };
        let dist = (surfaces.point(v, p.0, p.1) - x).norm();
        if dist < cfg.occlusion_threshold {
            if let Some(score) = scores.get(v, p.0, p.1) {
                members.push(Member {
                    view_id: v,
                    pixel: p,
                    score,
                    depth_distance: dist,
                });
            }
        }
    }
    if cfg.include_self {
        members.push(Member {
            view_id: query_view,
            pixel,
            score: query_score,
            depth_distance: 0.0,
        });
    }
    Some(CorrespondenceSet {
        query_view,
        query_pixel: pixel,
        query_score,
        surface_point: x,
        members,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagState {
    Flagged,
    Clean,
    Undetermined,
}

/// Outside-`μ ± 3σ` test of `score` against member statistics.
fn outside(score: f64, mean: f64, std: f64, cfg: &ConsistencyConfig) -> bool {
    let s = std.max(cfg.sigma_floor);
    !(score > mean - 3.0 * s && score < mean + 3.0 * s)
}

pub fn flag_query(set: &CorrespondenceSet, cfg: &ConsistencyConfig) -> FlagState {
    if set.members.len() < cfg.min_correspondences {
        return FlagState::Undetermined;
    }
    let (mean, std) = set.stats();
    if outside(set.query_score, mean, std, cfg) {
        FlagState::Flagged
    } else {
        FlagState::Clean
    }
}

/// Pixel flags plus the pixels for which no decision could be made.
#[derive(Clone, Debug, PartialEq)]
pub struct FlagMap {
    pub flagged: Vec<Mask>,
    pub undetermined: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    pub views: Vec<ViewFlagCounts>,
    pub flagged: usize,
    pub undetermined: usize,
    pub clean: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFlagCounts {
    pub view_id: usize,
    pub flagged: usize,
    pub undetermined: usize,
    pub clean: usize,
}

impl FlagMap {
    pub fn state(&self, view: usize, x: usize, y: usize) -> FlagState {
        if *self.flagged[view].get(x, y) {
            FlagState::Flagged
        } else if *self.undetermined[view].get(x, y) {
            FlagState::Undetermined
        } else {
            FlagState::Clean
        }
    }

    pub fn summary(&self) -> FlagSummary {
        let views: Vec<ViewFlagCounts> = self
            .flagged
            .iter()
            .zip(&self.undetermined)
            .enumerate()
            .map(|(v, (f, u))| {
                let flagged = f.count();
                let undetermined = u.count();
                ViewFlagCounts {
                    view_id: v,
                    flagged,
                    undetermined,
                    clean: f.len() - flagged - undetermined,
                }
            })
            .collect();
        FlagSummary {
            flagged: views.iter().map(|c| c.flagged).sum(),
            undetermined: views.iter().map(|c| c.undetermined).sum(),
            clean: views.iter().map(|c| c.clean).sum(),
            views,
        }
    }

    /// `view_NNNN.png` per view (0 clean, 128 undetermined, 255 flagged)
    /// and `summary.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for v in 0..self.flagged.len() {
            let (w, h) = self.flagged[v].dims();
            let g = Grid::from_fn(w, h, |x, y| match self.state(v, x, y) {
                FlagState::Clean => 0u8,
                FlagState::Undetermined => 128,
                FlagState::Flagged => 255,
            });
            save_gray8_png(&dir.join(format!("view_{v:04}.png")), &g)?;
        }
        write_json_atomically(&dir.join("summary.json"), &self.summary())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let summary: FlagSummary = read_json(&dir.join("summary.json"))?;
        let mut flagged = Vec::new();
        let mut undetermined = Vec::new();
        for v in 0..summary.views.len() {
            let path = dir.join(format!("view_{v:04}.png"));
            let g = load_gray8_png(&path)?;
            if g.as_slice().iter().any(|&b| !matches!(b, 0 | 128 | 255)) {
                return Err(Error::BadField {
                    path,
                    field: "pixel".into(),
                    reason: "flag maps hold only 0, 128 and 255".into(),
                });
            }
            flagged.push(g.map(|&b| b == 255));
            undetermined.push(g.map(|&b| b == 128));
        }
        Ok(Self {
            flagged,
            undetermined,
        })
    }
}

/// Flag every pixel of every view.
pub fn flag_all(surfaces: &SurfaceMaps, scores: &ScoreMap, cfg: &ConsistencyConfig) -> Result<FlagMap> {
    cfg.validate()?;
    let cfg = &cfg.resolved(scores);
    if scores.view_count() != surfaces.cameras.len() {
        return Err(Error::InvalidInput(format!(
            "{} score views for {} cameras",
            scores.view_count(),
            surfaces.cameras.len()
        )));
    }
    let (w, h) = scores.dims();
    for cam in &surfaces.cameras {
        if (cam.width, cam.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                context: format!("camera {}", cam.view_id),
                expected: (w, h),
                found: (cam.width, cam.height),
            });
        }
    }
    let views = surfaces.cameras.len();
    let per_view = par::map_range(views, |v| {
        (0..w * h)
            .map(|i| build_correspondences(v, (i % w, i / w), surfaces, scores, cfg))
            .collect::<Vec<_>>()
    });
    let mut flagged = vec![Grid::filled(w, h, false); views];
    let mut undetermined = vec![Grid::filled(w, h, true); views];
    match cfg.mode {
        FlagMode::Query => {
            for (v, sets) in per_view.iter().enumerate() {
                for (i, set) in sets.iter().enumerate() {
                    let state = set.as_ref().map_or(FlagState::Undetermined, |s| flag_query(s, cfg));
                    flagged[v].as_mut_slice()[i] = state == FlagState::Flagged;
                    undetermined[v].as_mut_slice()[i] = state == FlagState::Undetermined;
                }
            }
        }
        FlagMode::MemberVote => {
            let mut votes = vec![vec![(0u32, 0u32); w * h]; views];
            for set in per_view.iter().flatten().flatten() {
                if set.members.len() < cfg.min_correspondences {
                    continue;
                }
                let (mean, std) = set.stats();
                for m in &set.members {
                    let slot = &mut votes[m.view_id][m.pixel.1 * w + m.pixel.0];
                    slot.0 += 1;
                    slot.1 += u32::from(outside(m.score, mean, std, cfg));
                }
            }
            for v in 0..views {
                for (i, &(seen, against)) in votes[v].iter().enumerate() {
                    undetermined[v].as_mut_slice()[i] = seen == 0;
                    flagged[v].as_mut_slice()[i] = seen > 0 && 2 * against > seen;
                }
            }
        }
    }
    Ok(FlagMap {
        flagged,
        undetermined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::ScoreMetric;
    use crate::synth::{presets, render_clean};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_with(scores: &[f64], query: f64) -> CorrespondenceSet {
        CorrespondenceSet {
            query_view: 0,
            query_pixel: (0, 0),
            query_score: query,
            surface_point: Vec3::zeros(),
            members: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Member {
                    view_id: i,
                    pixel: (0, 0),
                    score: s,
                    depth_distance: 0.0,
                })
                .collect(),
        }
    }

    /// Direct evaluation of the indicator.
    fn brute_force(scores: &[f64], query: f64, m_min: usize, floor: f64) -> FlagState {
        if scores.len() < m_min {
            return FlagState::Undetermined;
        }
        let n = scores.len() as f64;
        let mu = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n).sqrt().max(floor);
        if query <= mu - 3.0 * sd || query >= mu + 3.0 * sd { FlagState::Flagged } else { FlagState::Clean }
    }

    #[test]
    fn equal_scores_are_clean() {
        let cfg = ConsistencyConfig::default();
        assert_eq!(flag_query(&set_with(&[2.0; 6], 2.0), &cfg), FlagState::Clean);
    }

    #[test]
    fn too_few_members_is_undetermined() {
        let cfg = ConsistencyConfig::default();
        assert_eq!(flag_query(&set_with(&[1.0, 9.0], 9.0), &cfg), FlagState::Undetermined);
    }

    #[test]
    fn flag_matches_direct_formula_on_random_sets() {
        let cfg = ConsistencyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(0..30);
            let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            if rng.random_bool(0.3) {
                s.iter_mut().for_each(|x| *x = 1.0);
            }
            let q = if rng.random_bool(0.5) { rng.random_range(0.0..5.0) } else { 1.0 };
            s.push(q);
            assert_eq!(
                flag_query(&set_with(&s, q), &cfg),
                brute_force(&s, q, cfg.min_correspondences, cfg.sigma_floor)
            );
        }
    }

    #[test]
    fn lone_outlier_needs_enough_members() {
        // with n members one outlier sits √(n−1) σ from the mean
        let cfg = ConsistencyConfig::default();
        let mut s = vec![1.0; 8];
        s.push(5.0);
        assert_eq!(flag_query(&set_with(&s, 5.0), &cfg), FlagState::Clean);
        let mut s = vec![1.0; 9];
        s.push(5.0);
        assert_eq!(flag_query(&set_with(&s, 5.0), &cfg), FlagState::Flagged);
    }

    #[test]
    fn relative_floor_scales_with_median_score() {
        // median 2.0, so a relative floor of 0.5 puts σ at no less than 1.0
        let views = vec![Grid::from_fn(2, 2, |x, y| [1.0, 2.0, 2.0, 9.0][y * 2 + x])];
        let scores = ScoreMap::new(ScoreMetric::Loss, views, None).unwrap();
        let cfg = ConsistencyConfig {
            relative_sigma_floor: 0.5,
            ..ConsistencyConfig::default()
        };
        assert_eq!(cfg.resolved(&scores).sigma_floor, 1.0);
        let off = ConsistencyConfig::default();
        assert_eq!(off.resolved(&scores).sigma_floor, off.sigma_floor);

        let mut s = vec![1.0; 12];
        s.push(1.5);
        assert_eq!(flag_query(&set_with(&s, 1.5), &off), FlagState::Flagged);
        assert_eq!(flag_query(&set_with(&s, 1.5), &cfg.resolved(&scores)), FlagState::Clean);
    }

    fn analytic_surfaces(cams: &[Camera]) -> SurfaceMaps {
        let scene = presets::two_sphere_scene();
        let depths: Vec<_> = cams.iter().map(|c| render_clean(&scene, c).1).collect();
        SurfaceMaps::from_depths(cams, &depths).unwrap()
    }

    #[test]
    fn twin_cameras_correspond_pixel_to_pixel() {
        let cam = presets::two_sphere_cameras(4, 24).remove(0);
        let mut twin = cam.clone();
        twin.view_id = 1;
        let surfaces = analytic_surfaces(&[cam.clone(), twin]);
        let scores = ScoreMap::new(ScoreMetric::Loss, vec![Grid::filled(24, 24, 1.0); 2], None).unwrap();
        for (x, y) in [(12, 12), (3, 17), (20, 5)] {
            let set = build_correspondences(0, (x, y), &surfaces, &scores, &ConsistencyConfig::default()).unwrap();
            let other: Vec<_> = set.members.iter().filter(|m| m.view_id == 1).collect();
            if surfaces.point(0, x, y).norm() < 5.0 {
                assert_eq!(other.len(), 1);
                assert_eq!(other[0].pixel, (x, y));
                assert!(other[0].depth_distance < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_frame_views_are_absent() {
        let cams = presets::two_sphere_cameras(2, 16); // opposite sides
        let surfaces = analytic_surfaces(&cams);
        let scores = ScoreMap::new(ScoreMetric::Loss, vec![Grid::filled(16, 16, 1.0); 2], None).unwrap();
        // background of view 0 lies at the far bound, behind view 1's camera
        let set = build_correspondences(0, (0, 0), &surfaces, &scores, &ConsistencyConfig::default()).unwrap();
        assert!(set.members.iter().all(|m| m.view_id == 0));
    }

    #[test]
    fn single_view_without_self_is_undetermined() {
        let cams = presets::two_sphere_cameras(1, 8);
        let surfaces = analytic_surfaces(&cams);
        let scores = ScoreMap::new(ScoreMetric::Loss, vec![Grid::filled(8, 8, 1.0)], None).unwrap();
        let cfg = ConsistencyConfig {
            include_self: false,
            ..Default::default()
        };
        let flags = flag_all(&surfaces, &scores, &cfg).unwrap();
        assert_eq!(flags.undetermined[0].count(), 64);
        assert_eq!(flags.flagged[0].count(), 0);
    }

    #[test]
    fn occluded_members_are_filtered() {
        let scene = presets::two_sphere_scene();
        let cams = presets::two_sphere_cameras(12, 32);
        let surfaces = analytic_surfaces(&cams);
        let scores = ScoreMap::new(ScoreMetric::Loss, vec![Grid::filled(32, 32, 1.0); 12], None).unwrap();
        let cfg = ConsistencyConfig::default();
        let (mut occluded, mut leaked) = (0, 0);
        for v in 0..cams.len() {
            for y in 0..32 {
                for x in 0..32 {
                    let p = surfaces.point(v, x, y);
                    if (cams[v].center() - p).norm() >= scene.far - 1e-9 {
                        continue;
                    }
                    let set = build_correspondences(v, (x, y), &surfaces, &scores, &cfg).unwrap();
                    for (u, cam) in cams.iter().enumerate() {
                        if u == v || cam.project_point(&p).is_none() {
                            continue;
                        }
                        if !scene.visible(&cam.center(), &p, 1e-6) {
                            occluded += 1;
                            leaked += set.members.iter().filter(|m| m.view_id == u).count();
                        }
                    }
                }
            }
        }
        assert!(occluded > 1000);
        assert!(leaked as f64 <= 0.01 * occluded as f64, "{leaked} of {occluded}");
    }

    #[test]
    fn flag_map_roundtrip_and_determinism() {
        let cams = presets::two_sphere_cameras(6, 16);
        let surfaces = analytic_surfaces(&cams);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let views = (0..6).map(|_| Grid::from_fn(16, 16, |_, _| rng.random::<f64>())).collect();
        let scores = ScoreMap::new(ScoreMetric::Loss, views, None).unwrap();
        for mode in [FlagMode::Query, FlagMode::MemberVote] {
            let cfg = ConsistencyConfig {
                mode,
                min_correspondences: 2,
                ..Default::default()
            };
            let a = flag_all(&surfaces, &scores, &cfg).unwrap();
            assert_eq!(a, flag_all(&surfaces, &scores, &cfg).unwrap());
            let dir = tempfile::tempdir().unwrap();
            a.save(dir.path()).unwrap();
            assert_eq!(FlagMap::load(dir.path()).unwrap(), a);
            for (f, u) in a.flagged.iter().zip(&a.undetermined) {
                assert!(f.as_slice().iter().zip(u.as_slice()).all(|(&f, &u)| !(f && u)));
            }
        }
    }

    #[test]
    fn empty_field_lifts_to_far_bound() {
        let mut params = FieldParams::zeros(crate::field::FieldArch::default()).unwrap();
        let bias = params.density_layer().bias();
        params.values_mut()[bias].fill(-800.0);
        let cam = presets::two_sphere_cameras(1, 8).remove(0);
        let rcfg = RenderConfig::default();
        let (p, d) = lift_pixel(&params, &cam, (3, 4), &rcfg).unwrap();
        assert_eq!(d, rcfg.t_far);
        let ray = cam.ray_for_pixel(3, 4).unwrap();
        assert!((p - ray.at(rcfg.t_far)).norm() < 1e-12);
        assert_eq!(lift_pixel(&params, &cam, (3, 4), &rcfg).unwrap(), (p, d));
    }

    proptest::proptest! {
        #[test]
        fn adding_a_mean_member_never_flags_a_clean_query(
            scores in proptest::collection::vec(0.0f64..10.0, 4..30),
            q in 0.0f64..10.0,
        ) {
            let cfg = ConsistencyConfig::default();
            let mut s = scores.clone();
            s.push(q);
            let before = set_with(&s, q);
            let (mu, sd) = before.stats();
            s.push(mu);
            let after = set_with(&s, q);
            let (mu2, sd2) = after.stats();
            proptest::prop_assert!((mu2 - mu).abs() <= 1e-9 * mu.abs().max(1.0));
            proptest::prop_assert!(sd2 <= sd + 1e-12);
            if flag_query(&before, &cfg) == FlagState::Clean && (q - mu).abs() < 3.0 * sd2 * (1.0 - 1e-9) {
                proptest::prop_assert_eq!(flag_query(&after, &cfg), FlagState::Clean);
            }
        }
    }
}
