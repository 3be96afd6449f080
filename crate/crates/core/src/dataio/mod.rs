//! Manifests, the binary feature container, model files and the synthetic
//! dataset generator.

pub mod container;
pub mod manifest;
pub mod model_io;
pub mod synth;

pub use container::{read_features, write_features, FeatureFile, Section};
pub use manifest::{load_manifest, FeatureRef, Manifest, ManifestObject};
pub use model_io::{
    load_adapters, load_backbone, load_descriptors, save_adapters, save_backbone, save_descriptors,
    save_merged, DescriptorSet,
};
pub use synth::{gen_synthetic, generate, SynthConfig, SynthData};
