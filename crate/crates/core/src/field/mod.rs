//! The radiance field: encoding, MLP, volume rendering, losses and training.

mod checkpoint;
mod encoding;
mod loss;
mod mlp;
mod render;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use encoding::{encode, encode_into, encoded_dim, EncodingConfig};
pub use loss::{loss_gradient, loss_per_ray, LossKind};
pub use mlp::{field_eval, FieldArch, FieldParams, LayerShape};
pub use render::{
    backprop_ray, batch_gradient, last_layer_evals, render_ray, render_rays, LossConfig,
    PixelEval, RayGradient, RenderConfig, RenderedRay,
};
pub use train::{kept_pixels, train, TrainConfig, TrainLog, TrainLogEntry, MIN_KEPT_FRACTION};



pub(crate) use train::ray_and_target;
