//! End-to-end harness: configuration, synthetic scenes, the toy camera
//! branch, weight bundles and the pipeline driver.

pub mod bench;
pub mod config;
pub mod coverage;
pub mod model;
pub mod pipeline;
pub mod scene;

pub use bench::{time_stage, BenchFixture, BenchStage, StageTiming};
pub use coverage::{project_depth_labels, rig_coverage, DepthLabels};
pub use config::{ModelWidths, SceneConfig};
pub use model::{load_weights, save_weights, toy_backbone, Backbone, Model};
pub use pipeline::{check_shapes, run_pipeline, DumpOptions, PipelineOutput, ShapePlan};
pub use scene::{gen_scene, Frame, GtBox, Scene};
