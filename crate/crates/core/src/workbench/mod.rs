//! Synthetic scenes, dataset I/O, metrics and evaluation behind the
//! command-line driver.

pub mod cameras;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod gradsuite;
pub mod image_io;
pub mod metrics;
pub mod ply;
pub mod synth;

pub use cameras::{interpolate_pose, load_cameras, save_cameras};
pub use config::{load_config, set_key};
pub use dataset::{load_dataset, save_dataset, GroundTruth, Meta};
pub use evaluate::{evaluate_ground_truth, evaluate_model, EvalReport, ViewMetrics};
pub use gradsuite::gradient_suite;
pub use image_io::{read_image, read_pfm, write_image, write_pfm};
pub use metrics::{psnr, PSNR_CAP};
pub use ply::{load_pointcloud, write_pointcloud, PointCloud};
pub use synth::{gen_scene, RigSpec, SceneDataset, SyntheticScene, View};
