//! Ground-truth multi-view datasets with known distractor masks.

mod dataset;
mod distractor;
pub mod presets;
mod scene;

pub use dataset::{
    generate_dataset, load_dataset, load_manifest, synthesize, write_dataset, Dataset,
    DatasetManifest, PixelId, TestView, View, CAMERAS_FILE, MANIFEST_FILE, TEST_CAMERAS_FILE,
};
pub use distractor::{inject_distractors, sample_shapes, DistractorSpec, PlacedShape, ShapeKind};
pub use scene::{light_direction, render_clean, AnalyticScene, Checker, Hit, Primitive};
