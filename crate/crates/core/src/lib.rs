//! Camera-only 3-D object detection in bird's-eye view.
//!
//! The pipeline lifts multi-camera image features into a BEV grid using
//! CRF-modulated depth distributions, fuses a window of past BEV frames,
//! and decodes objects from a center heatmap with ROI refinement by
//! spatial cross-attention into the camera features.
//!
//! Everything is deterministic: fixed reduction orders, a splitmix64 RNG,
//! and parallel loops that only ever write disjoint outputs.

pub mod bvnx;
pub mod camera;
pub mod decoder;
pub mod depth_crf;
pub mod error;
pub mod harness;
pub mod image;
pub mod nn;
pub mod res2fusion;
pub mod rng;
pub mod tensor;
pub mod view_transform;

pub use camera::{CameraModel, CameraRig, Intrinsics};
pub use decoder::{Detection, DetectionSet, Heatmap, ObjectDecoder};
pub use depth_crf::{CrfParams, DepthBins, DepthVolume};
pub use error::{Error, Result, Stage};
pub use image::RgbImage;
pub use nn::{ConvSpec, MlpSpec};
pub use res2fusion::{FusionConfig, FusionStack};
pub use rng::Rng;
pub use tensor::Tensor;
pub use view_transform::{BevGrid, BevSpec, PoolIndex};
