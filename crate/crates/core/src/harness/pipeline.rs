//! End-to-end driver: per-camera branch for every frame, BEV pooling,
//! temporal fusion and the object decoder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::decoder::{CameraInputs, DetectionSet, Heatmap};
use crate::depth_crf::{map_labeling, modulate, patch_colors, DepthVolume};
use crate::error::{Error, Result, Stage, StageExt};
use crate::image::RgbImage;
use crate::nn::conv2d;
use crate::res2fusion::{fuse, FusionStack};
use crate::tensor::Tensor;
use crate::view_transform::{build_frustum, lift, pool, precompute_pool_index, BevGrid, FrustumFeatures, PoolIndex};

use super::config::SceneConfig;
use super::coverage::rig_coverage;
use super::model::{toy_backbone, Model};
use super::scene::Scene;

/// Tensor dimensions every stage boundary must have for a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// `[C_img, H', W']` per camera
    pub features: [usize; 3],
    /// `[cameras, K, H', W']`
    pub depth: [usize; 4],
    /// `[C_img, G, G]` per frame
    pub frame_bev: [usize; 3],
    /// `[C_bev, G, G]` after fusion
    pub fused_bev: [usize; 3],
    /// `[classes, G, G]`
    pub heatmap: [usize; 3],
}

impl ShapePlan {
    pub fn new(cfg: &SceneConfig) -> Self {
        let (h, w, g, m) = (cfg.feature_height(), cfg.feature_width(), cfg.bev_grid, &cfg.model);
        Self {
            features: [m.feature_channels, h, w],
            depth: [cfg.cameras, cfg.depth_bins, h, w],
            frame_bev: [m.feature_channels, g, g],
            fused_bev: [m.bev_channels, g, g],
            heatmap: [m.classes, g, g],
        }
    }
}

/// Fail-fast check of scene, config and weights against each other before
/// any computation runs.
pub fn check_shapes(scene: &Scene, cfg: &SceneConfig, model: &Model) -> Result<ShapePlan> {
    cfg.validate()?;
    if scene.frames.len() != cfg.frames {
        return Err(Error::shape("scene frames", cfg.frames, scene.frames.len()));
    }
    for (f, frame) in scene.frames.iter().enumerate() {
        if frame.images.len() != cfg.cameras {
            return Err(Error::shape(format!("frame {f} cameras"), cfg.cameras, frame.images.len()));
        }
        for (c, img) in frame.images.iter().enumerate() {
            if img.width != cfg.image_width {
                return Err(Error::shape(format!("frame {f} camera {c} image width"), cfg.image_width, img.width));
            }
            if img.height != cfg.image_height {
                return Err(Error::shape(format!("frame {f} camera {c} image height"), cfg.image_height, img.height));
            }
        }
    }
    model.validate(cfg)?;
    Ok(ShapePlan::new(cfg))
}

/// Output of one camera for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraBranch {
    pub features: Tensor,
    pub depth: DepthVolume,
    pub frustum: FrustumFeatures,
}

/// Backbone, depth logits, CRF modulation and lift for one image.
pub fn camera_branch(image: &RgbImage, camera: usize, cfg: &SceneConfig, model: &Model, plan: &ShapePlan) -> Result<CameraBranch> {
    let features = toy_backbone(image, cfg.stride, &model.backbone).stage(Stage::Backbone)?;
    features.expect_dims(&plan.features).stage(Stage::Backbone)?;
    let logits = conv2d(&features, &model.depth_head).stage(Stage::DepthHead)?;
    logits.expect_dims(&plan.depth[1..]).stage(Stage::DepthHead)?;
    let colors = patch_colors(image, cfg.stride).stage(Stage::Crf)?;
    let depth = modulate(&logits, &colors, &cfg.bins(), &cfg.crf).stage(Stage::Crf)?.with_camera(camera);
    let frustum = lift(&features, &depth).stage(Stage::Lift)?;
    Ok(CameraBranch { features, depth, frustum })
}

/// Pool index for the static rig of `cfg`.
pub fn rig_pool_index(cfg: &SceneConfig) -> Result<PoolIndex> {
    let frusta: Vec<_> = cfg
        .rig()
        .cameras
        .iter()
        .map(|cam| build_frustum(cam, cfg.feature_height(), cfg.feature_width(), cfg.stride, &cfg.bins()))
        .collect();
    precompute_pool_index(&frusta, &cfg.bev())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub detections: DetectionSet,
    pub heatmap: Heatmap,
    /// current frame, one per camera
    pub depth: Vec<DepthVolume>,
    /// pooled BEV per frame, chronological
    pub frame_bev: Vec<BevGrid>,
    /// after fusion and the post-fusion block
    pub fused_bev: BevGrid,
    /// feature-map coverage of the current frame's range points
    pub coverage: f64,
}

pub fn run_pipeline(scene: &Scene, cfg: &SceneConfig, model: &Model) -> Result<PipelineOutput> {
    let plan = check_shapes(scene, cfg, model)?;
    let cams = cfg.cameras;
    let branches: Vec<CameraBranch> = (0..cfg.frames * cams)
        .into_par_iter()
        .map(|i| camera_branch(&scene.frames[i / cams].images[i % cams], i % cams, cfg, model, &plan))
        .collect::<Result<_>>()?;

    let spec = cfg.bev();
    let index = rig_pool_index(cfg).stage(Stage::Pool)?;
    let frame_bev: Vec<BevGrid> = branches
        .chunks(cams)
        .map(|frame| {
            let frusta: Vec<FrustumFeatures> = frame.iter().map(|b| b.frustum.clone()).collect();
            let bev = pool(&frusta, &index, &spec)?;
            bev.expect_dims(&plan.frame_bev)?;
            Ok(bev)
        })
        .collect::<Result<_>>()
        .stage(Stage::Pool)?;

    let fused_bev = FusionStack::new(frame_bev.clone())
        .and_then(|stack| fuse(&stack, &model.fusion))
        .and_then(|bev| model.post.forward(&bev))
        .and_then(|bev| bev.expect_dims(&plan.fused_bev).map(|_| bev))
        .stage(Stage::Fusion)?;

    let current = &branches[(cfg.frames - 1) * cams..];
    let features: Vec<Tensor> = current.iter().map(|b| b.features.clone()).collect();
    let depth: Vec<DepthVolume> = current.iter().map(|b| b.depth.clone()).collect();
    let rig = cfg.rig();
    let inputs = CameraInputs { rig: &rig, features: &features, depth: &depth, stride: cfg.stride };
    let decoded = model.decoder.decode(&fused_bev, &spec, &inputs, &cfg.decoder).stage(Stage::Decoder)?;
    decoded.heatmap.tensor().expect_dims(&plan.heatmap).stage(Stage::Decoder)?;

    let coverage = rig_coverage(
        &scene.current().lidar,
        &rig.cameras,
        cfg.feature_height(),
        cfg.feature_width(),
        cfg.stride,
        &cfg.bins(),
    );
    Ok(PipelineOutput {
        detections: decoded.detections,
        heatmap: decoded.heatmap,
        depth,
        frame_bev,
        fused_bev,
        coverage,
    })
}

/// Nearest-neighbor enlargement by an integer factor.
pub fn upscale(img: &RgbImage, factor: usize) -> RgbImage {
    let mut out = RgbImage::new(img.width * factor, img.height * factor);
    for y in 0..out.height {
        for x in 0..out.width {
            out.put(x, y, img.get(x / factor, y / factor));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DumpOptions {
    pub depth: bool,
    pub heatmap: bool,
}

impl PipelineOutput {
    /// Writes `detections.txt`, `summary.txt` and the requested image dumps;
    /// returns the written paths.
    pub fn write(&self, dir: impl AsRef<Path>, cfg: &SceneConfig, dumps: DumpOptions) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let written = (|| -> Result<Vec<PathBuf>> {
            fs::create_dir_all(dir)?;
            let mut paths = Vec::new();
            let det = dir.join("detections.txt");
            fs::write(&det, self.detections.to_text())?;
            paths.push(det);

            let mut summary = String::new();
            writeln!(summary, "detections = {}", self.detections.len()).unwrap();
            writeln!(summary, "coverage = {:.6}", self.coverage).unwrap();
            let s = dir.join("summary.txt");
            fs::write(&s, summary)?;
            paths.push(s);

            if dumps.depth {
                for d in &self.depth {
                    let img = upscale(&map_labeling(d).to_image(cfg.depth_bins), cfg.stride);
                    let p = dir.join(format!("depth_cam{}.ppm", d.camera));
                    img.write_ppm(&p)?;
                    paths.push(p);
                }
            }
            if dumps.heatmap {
                let p = dir.join("heatmap.ppm");
                upscale(&self.heatmap.to_image(), 4).write_ppm(&p)?;
                paths.push(p);
            }
            Ok(paths)
        })();
        written.stage(Stage::Io)
    }
}
