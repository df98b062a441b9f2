//! Synthetic ground truth, file formats and experiment configuration.

pub mod config;
pub mod io;
pub mod scene;

pub use config::{ExperimentConfig, OutputNames, PoseNoiseSpec, CONFIG_FORMAT_VERSION};
pub use io::{
    covariance_csv, encode_cloud, load_cloud, loss_csv, metrics_csv, parse_cloud, parse_covariance_csv,
    save_cloud, CloudFormat,
};
pub use scene::{
    synth_corridor, synth_scene, CorridorSequence, CorridorSpec, Primitive, SceneSpec,
    SyntheticScene,
};
