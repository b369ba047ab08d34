//! On-disk multi-view datasets.
//!
//! Layout under the dataset root:
//!
//! ```text
//! views/view_%04d.png      contaminated training views
//! clean/view_%04d.png      the same views without distractors (optional)
//! gt_masks/view_%04d.png   8-bit single channel, 255 = distractor (optional)
//! test/view_%04d.png       held-out clean views (optional)
//! cameras.json             training cameras
//! test_cameras.json        held-out cameras (optional)
//! manifest.json
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{load_cameras, save_cameras, Camera};
use crate::par;
use crate::raster::{
    load_mask_png, load_rgb_png, read_json, save_mask_png, save_rgb_png, write_json_atomically,
    Mask, RgbImage,
};

use super::distractor::{inject_distractors, DistractorSpec};
use super::scene::{render_clean, AnalyticScene};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const TEST_CAMERAS_FILE: &str = "test_cameras.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub view_count: usize,
    pub width: usize,
    pub height: usize,
    pub views: Vec<String>,
    #[serde(default)]
    pub clean: Vec<String>,
    #[serde(default)]
    pub gt_masks: Vec<String>,
    pub cameras: String,
    #[serde(default)]
    pub test_views: Vec<String>,
    #[serde(default)]
    pub test_cameras: Option<String>,
    pub seed: u64,
    pub scene_hash: String,
}

/// One training view with its optional ground truth.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: RgbImage,
    pub clean: Option<RgbImage>,
    pub gt_mask: Option<Mask>,
}

#[derive(Clone, Debug)]
pub struct TestView {
    pub camera: Camera,
    pub image: RgbImage,
}

/// In-memory multi-view dataset. All training views share one image size.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: Vec<View>,
    pub test_views: Vec<TestView>,
    width: usize,
    height: usize,
}

/// Address of one training pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelId {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

impl Dataset {
    pub fn new(views: Vec<View>, test_views: Vec<TestView>) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset has no views".into()))?;
        let dims = first.image.dims();
        for (i, v) in views.iter().enumerate() {
            let ctx = format!("view {i}");
            v.image.ensure_dims(dims, &ctx)?;
            if (v.camera.width, v.camera.height) != dims {
                return Err(Error::DimensionMismatch {
                    context: format!("camera of {ctx}"),
                    expected: dims,
                    found: (v.camera.width, v.camera.height),
                });
            }
            if let Some(c) = &v.clean {
                c.ensure_dims(dims, &format!("clean {ctx}"))?;
            }
            if let Some(m) = &v.gt_mask {
                m.ensure_dims(dims, &format!("mask {ctx}"))?;
            }
        }
        for (i, t) in test_views.iter().enumerate() {
            if (t.camera.width, t.camera.height) != t.image.dims() {
                return Err(Error::DimensionMismatch {
                    context: format!("test view {i}"),
                    expected: (t.camera.width, t.camera.height),
                    found: t.image.dims(),
                });
            }
        }
        Ok(Self {
            views,
            test_views,
            width: dims.0,
            height: dims.1,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.views.len() * self.pixels_per_view()
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    /// Flat index `view * W * H + y * W + x`.
    #[inline]
    pub fn flat_index(&self, p: PixelId) -> usize {
        p.view * self.pixels_per_view() + p.y * self.width + p.x
    }

    #[inline]
    pub fn pixel_id(&self, flat: usize) -> PixelId {
        let ppv = self.pixels_per_view();
        let view = flat / ppv;
        let r = flat % ppv;
        PixelId {
            view,
            x: r % self.width,
            y: r / self.width,
        }
    }

    pub fn target(&self, p: PixelId) -> [f64; 3] {
        *self.views[p.view].image.get(p.x, p.y)
    }

    pub fn gt_masks(&self) -> Option<Vec<Mask>> {
        self.views.iter().map(|v| v.gt_mask.clone()).collect()
    }
}

fn view_file(dir: &str, i: usize) -> String {
    format!("{dir}/view_{i:04}.png")
}

/// Render `cameras` (and the held-out `test_cameras`) of `scene`, contaminate
/// the training views, and write everything under `out_dir`.
pub fn generate_dataset(
    scene: &AnalyticScene,
    cameras: &[Camera],
    test_cameras: &[Camera],
    spec: &DistractorSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let dataset = synthesize(scene, cameras, test_cameras, spec)?;
    write_dataset(&dataset, out_dir, spec.seed, &scene.description_hash())
}

/// In-memory counterpart of [`generate_dataset`].
pub fn synthesize(
    scene: &AnalyticScene,
    cameras: &[Camera],
    test_cameras: &[Camera],
    spec: &DistractorSpec,
) -> Result<Dataset> {
    scene.validate()?;
    spec.validate()?;
    let rendered = par::map_slice(cameras, |cam| {
        let (clean, _) = render_clean(scene, cam);
        // each view gets its own stream derived from the dataset seed
        let view_seed = spec
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(cam.view_id as u64);
        inject_distractors(&clean, spec, view_seed).map(|(img, mask)| View {
            camera: cam.clone(),
            image: img,
            clean: Some(clean),
            gt_mask: Some(mask),
        })
    });
    let views = rendered.into_iter().collect::<Result<Vec<_>>>()?;
    let test_views = par::map_slice(test_cameras, |cam| TestView {
        camera: cam.clone(),
        image: render_clean(scene, cam).0,
    });
    Dataset::new(views, test_views)
}

pub fn write_dataset(
    dataset: &Dataset,
    out_dir: &Path,
    seed: u64,
    scene_hash: &str,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = dataset.view_count();
    let mut manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        view_count: n,
        width: dataset.width(),
        height: dataset.height(),
        views: (0..n).map(|i| view_file("views", i)).collect(),
        clean: Vec::new(),
        gt_masks: Vec::new(),
        cameras: CAMERAS_FILE.to_string(),
        test_views: (0..dataset.test_views.len())
            .map(|i| view_file("test", i))
            .collect(),
        test_cameras: None,
        seed,
        scene_hash: scene_hash.to_string(),
    };
    for (i, v) in dataset.views.iter().enumerate() {
        save_rgb_png(&out_dir.join(&manifest.views[i]), &v.image)?;
    }
    if dataset.views.iter().all(|v| v.clean.is_some()) {
        manifest.clean = (0..n).map(|i| view_file("clean", i)).collect();
        for (i, v) in dataset.views.iter().enumerate() {
            save_rgb_png(&out_dir.join(&manifest.clean[i]), v.clean.as_ref().unwrap())?;
        }
    }
    if dataset.views.iter().all(|v| v.gt_mask.is_some()) {
        manifest.gt_masks = (0..n).map(|i| view_file("gt_masks", i)).collect();
        for (i, v) in dataset.views.iter().enumerate() {
            save_mask_png(&out_dir.join(&manifest.gt_masks[i]), v.gt_mask.as_ref().unwrap())?;
        }
    }
    save_cameras(&out_dir.join(CAMERAS_FILE), &dataset.cameras())?;
    if !dataset.test_views.is_empty() {
        let cams: Vec<Camera> = dataset.test_views.iter().map(|t| t.camera.clone()).collect();
        save_cameras(&out_dir.join(TEST_CAMERAS_FILE), &cams)?;
        manifest.test_cameras = Some(TEST_CAMERAS_FILE.to_string());
        for (i, t) in dataset.test_views.iter().enumerate() {
            save_rgb_png(&out_dir.join(&manifest.test_views[i]), &t.image)?;
        }
    }
    write_json_atomically(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let mut manifest: DatasetManifest = read_json(&path)?;
    manifest.root = root.to_path_buf();
    let bad = |field: &str, reason: String| Error::BadField {
        path: path.clone(),
        field: field.to_string(),
        reason,
    };
    if manifest.views.len() != manifest.view_count {
        return Err(bad(
            "views",
            format!(
                "{} entries for view_count {}",
                manifest.views.len(),
                manifest.view_count
            ),
        ));
    }
    for (field, list) in [("clean", &manifest.clean), ("gt_masks", &manifest.gt_masks)] {
        if !list.is_empty() && list.len() != manifest.view_count {
            return Err(bad(field, format!("{} entries for {} views", list.len(), manifest.view_count)));
        }
    }
    Ok(manifest)
}

fn load_sized_rgb(path: &Path, dims: (usize, usize)) -> Result<RgbImage> {
    let img = load_rgb_png(path)?;
    img.ensure_dims(dims, &path.display().to_string())?;
    Ok(img)
}

/// Load a dataset written by [`write_dataset`]. Clean views and masks that
/// are listed but missing on disk are treated as absent.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = load_manifest(root)?;
    let dims = (manifest.width, manifest.height);
    let cameras = load_cameras(&root.join(&manifest.cameras))?;
    if cameras.len() != manifest.view_count {
        return Err(Error::BadField {
            path: root.join(&manifest.cameras),
            field: "length".into(),
            reason: format!("{} cameras for {} views", cameras.len(), manifest.view_count),
        });
    }
    let mut views = Vec::with_capacity(manifest.view_count);
    for (i, camera) in cameras.into_iter().enumerate() {
        if (camera.width, camera.height) != dims {
            return Err(Error::DimensionMismatch {
                context: format!("{} entry {i}", manifest.cameras),
                expected: dims,
                found: (camera.width, camera.height),
            });
        }
        let image = load_sized_rgb(&root.join(&manifest.views[i]), dims)?;
        let clean = match manifest.clean.get(i).map(|f| root.join(f)) {
            Some(p) if p.exists() => Some(load_sized_rgb(&p, dims)?),
            _ => None,
        };
        let gt_mask = match manifest.gt_masks.get(i).map(|f| root.join(f)) {
            Some(p) if p.exists() => {
                let m = load_mask_png(&p)?;
                m.ensure_dims(dims, &p.display().to_string())?;
                Some(m)
            }
            _ => None,
        };
        views.push(View {
            camera,
            image,
            clean,
            gt_mask,
        });
    }
    let mut test_views = Vec::new();
    if let Some(tc) = &manifest.test_cameras {
        let cams = load_cameras(&root.join(tc))?;
        if cams.len() != manifest.test_views.len() {
            return Err(Error::BadField {
                path: root.join(tc),
                field: "length".into(),
                reason: format!("{} cameras for {} test views", cams.len(), manifest.test_views.len()),
            });
        }
        for (camera, file) in cams.into_iter().zip(&manifest.test_views) {
            let image = load_sized_rgb(&root.join(file), (camera.width, camera.height))?;
            test_views.push(TestView { camera, image });
        }
    }
    Dataset::new(views, test_views)
}
