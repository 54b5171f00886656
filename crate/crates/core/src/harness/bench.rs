//! Wall-time measurement of individual pipeline stages on a generated
//! scene.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::decoder::CameraInputs;
use crate::depth_crf::{modulate, patch_colors, PatchColorMap};
use crate::error::{Error, Result};
use crate::nn::conv2d;
use crate::res2fusion::{fuse, FusionStack};
use crate::tensor::Tensor;
use crate::view_transform::{lift, pool, PoolIndex};

use super::config::SceneConfig;
use super::model::{toy_backbone, Model};
use super::pipeline::{rig_pool_index, run_pipeline, PipelineOutput};
use super::scene::{gen_scene, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchStage {
    Crf,
    Pool,
    Fusion,
    Decoder,
}

impl BenchStage {
    pub const ALL: [BenchStage; 4] = [BenchStage::Crf, BenchStage::Pool, BenchStage::Fusion, BenchStage::Decoder];
}

impl fmt::Display for BenchStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchStage::Crf => "crf",
            BenchStage::Pool => "pool",
            BenchStage::Fusion => "fusion",
            BenchStage::Decoder => "decoder",
        })
    }
}

impl FromStr for BenchStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchStage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected crf, pool, fusion or decoder")))
    }
}

/// Inputs of every benchmarked stage, computed once.
pub struct BenchFixture {
    pub cfg: SceneConfig,
    pub scene: Scene,
    pub model: Model,
    pub index: PoolIndex,
    pub output: PipelineOutput,
    /// current-frame backbone features, one per camera
    pub features: Vec<Tensor>,
    /// current-frame depth logits and patch colors, one per camera
    pub logits: Vec<(Tensor, PatchColorMap)>,
}

impl BenchFixture {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        let scene = gen_scene(cfg)?;
        let model = Model::init(cfg, cfg.seed);
        let output = run_pipeline(&scene, cfg, &model)?;
        let index = rig_pool_index(cfg)?;
        let images = &scene.current().images;
        let features: Vec<Tensor> = images
            .iter()
            .map(|img| toy_backbone(img, cfg.stride, &model.backbone))
            .collect::<Result<_>>()?;
        let logits = features
            .iter()
            .zip(images)
            .map(|(f, img)| Ok((conv2d(f, &model.depth_head)?, patch_colors(img, cfg.stride)?)))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), scene, model, index, output, features, logits })
    }

    /// Runs one stage once over the whole rig (or BEV).
    pub fn run(&self, stage: BenchStage) -> Result<()> {
        let cfg = &self.cfg;
        match stage {
            BenchStage::Crf => {
                for (logits, colors) in &self.logits {
                    modulate(logits, colors, &cfg.bins(), &cfg.crf)?;
                }
            }
            BenchStage::Pool => {
                let frusta: Vec<_> = self
                    .features
                    .iter()
                    .zip(&self.output.depth)
                    .map(|(f, d)| lift(f, d))
                    .collect::<Result<_>>()?;
                pool(&frusta, &self.index, &cfg.bev())?;
            }
            BenchStage::Fusion => {
                let stack = FusionStack::new(self.output.frame_bev.clone())?;
                self.model.post.forward(&fuse(&stack, &self.model.fusion)?)?;
            }
            BenchStage::Decoder => {
                let rig = cfg.rig();
                let inputs = CameraInputs { rig: &rig, features: &self.features, depth: &self.output.depth, stride: cfg.stride };
                self.model.decoder.decode(&self.output.fused_bev, &cfg.bev(), &inputs, &cfg.decoder)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: BenchStage,
    pub repeat: usize,
    pub total: Duration,
    pub min: Duration,
}

impl StageTiming {
    pub fn mean(&self) -> Duration {
        self.total / self.repeat.max(1) as u32
    }
}

impl fmt::Display for StageTiming {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} repeat={:<4} mean={:>10.3} ms  min={:>10.3} ms",
            self.stage,
            self.repeat,
            self.mean().as_secs_f64() * 1e3,
            self.min.as_secs_f64() * 1e3
        )
    }
}

pub fn time_stage(fixture: &BenchFixture, stage: BenchStage, repeat: usize) -> Result<StageTiming> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let mut total = Duration::ZERO;
    let mut min = Duration::MAX;
    for _ in 0..repeat {
        let start = Instant::now();
        fixture.run(stage)?;
        let dt = start.elapsed();
        total += dt;
        min = min.min(dt);
    }
    Ok(StageTiming { stage, repeat, total, min })
}
