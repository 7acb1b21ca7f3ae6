//! Procedural stand-in for a material render farm: the same material rendered
//! over several semantically paired geometries and lighting conditions.

pub mod dataset;
pub mod geometry;
pub mod lighting;
pub mod material;
pub mod render;
pub mod scene;

pub use dataset::{generate_dataset, DatasetConfig, LoadedDataset, Manifest, SampleRecord, SceneRecord};
pub use geometry::{GeometryTemplate, HeightFn};
pub use lighting::LightingCondition;
pub use material::{bake_maps, make_material, Family, MaterialMaps, MaterialSpec};
pub use render::{render, RenderSample};
pub use scene::{make_selection_scene, patch_labels, SelectionScene};
