//! Small vision transformer with prototype and patch projection heads.

pub mod checkpoint;
pub mod config;
pub mod heads;
pub mod ops;
pub mod params;
pub mod rope;
pub mod vit;

pub use checkpoint::{load_params, save_params};
pub use config::BackboneConfig;
pub use heads::{dino_embedding, ibot_project, normalize_prototypes, prototype_logits};
pub use params::ParamSet;
pub use rope::rope_rotate;
pub use vit::{encode, images_to_tensor, patchify, Features};
