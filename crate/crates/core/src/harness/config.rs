//! Scene and model configuration: one `key = value` pair per line with
//! dotted keys, `#` starts a comment. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::camera::CameraRig;
use crate::decoder::{default_heights, DecoderConfig};
use crate::depth_crf::{CrfKernel, CrfParams, DepthBins, KernelKind};
use crate::error::{Error, Result};
use crate::res2fusion::{group_count, CascadeInput};
use crate::view_transform::BevSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub cameras: usize,
    pub camera_hfov_deg: f64,
    pub camera_height: f64,
    pub camera_radius: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub stride: usize,
    pub depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub bev_grid: usize,
    pub bev_extent: f64,
    pub frames: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub crf: CrfParams,
    pub fusion_window: usize,
    pub fusion_cascade: CascadeInput,
    pub model: ModelWidths,
    pub decoder: DecoderConfig,
    pub decoder_points: usize,
}

/// Channel widths of the learned parts; the reference architecture leaves
/// these open, so they are plain configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelWidths {
    pub feature_channels: usize,
    pub fusion_channels: usize,
    pub bev_channels: usize,
    pub head_channels: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        Self {
            feature_channels: 16,
            fusion_channels: 16,
            bev_channels: 16,
            head_channels: 16,
            mlp_hidden: 16,
            classes: 3,
        }
    }
}

/// Depth-network stride for an input height: 8 up to 256 rows, else 16.
pub fn default_stride(image_height: usize) -> usize {
    if image_height <= 256 {
        8
    } else {
        16
    }
}

impl Default for SceneConfig {
    /// Desk configuration: 6 cameras at 64×176, stride 8, 8 depth bins,
    /// 32×32 BEV over ±8 m, 9 frames fused in windows of 3.
    fn default() -> Self {
        Self {
            seed: 7,
            cameras: 6,
            camera_hfov_deg: 70.0,
            camera_height: 1.5,
            camera_radius: 0.5,
            image_width: 176,
            image_height: 64,
            stride: default_stride(64),
            depth_bins: 8,
            depth_min: 1.0,
            depth_max: 9.0,
            bev_grid: 32,
            bev_extent: 8.0,
            frames: 9,
            objects_min: 2,
            objects_max: 6,
            crf: CrfParams::default(),
            fusion_window: 3,
            fusion_cascade: CascadeInput::Convolved,
            model: ModelWidths::default(),
            decoder: DecoderConfig::default(),
            decoder_points: 2,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "cameras",
    "camera.hfov_deg",
    "camera.height",
    "camera.radius",
    "image.width",
    "image.height",
    "stride",
    "depth.bins",
    "depth.min",
    "depth.max",
    "bev.grid",
    "bev.extent",
    "frames",
    "objects.min",
    "objects.max",
    "crf.iterations",
    "crf.window",
    "crf.appearance.weight",
    "crf.appearance.theta",
    "crf.spatial.weight",
    "crf.spatial.theta",
    "fusion.window",
    "fusion.cascade",
    "model.feature_channels",
    "model.fusion_channels",
    "model.bev_channels",
    "model.head_channels",
    "model.mlp_hidden",
    "model.classes",
    "decoder.tau",
    "decoder.top_n",
    "decoder.heights",
    "decoder.points",
    "decoder.depth_embedding",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if pairs.insert(key.to_owned(), value.to_owned()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }

        let mut cfg = Self::default();
        let mut stride_set = false;
        let mut appearance = cfg.crf.kernels[0];
        let mut spatial = cfg.crf.kernels[1];
        for (key, value) in &pairs {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "seed" => cfg.seed = parse(k, v)?,
                "cameras" => cfg.cameras = parse(k, v)?,
                "camera.hfov_deg" => cfg.camera_hfov_deg = parse(k, v)?,
                "camera.height" => cfg.camera_height = parse(k, v)?,
                "camera.radius" => cfg.camera_radius = parse(k, v)?,
                "image.width" => cfg.image_width = parse(k, v)?,
                "image.height" => cfg.image_height = parse(k, v)?,
                "stride" => {
                    cfg.stride = parse(k, v)?;
                    stride_set = true;
                }
                "depth.bins" => cfg.depth_bins = parse(k, v)?,
                "depth.min" => cfg.depth_min = parse(k, v)?,
                "depth.max" => cfg.depth_max = parse(k, v)?,
                "bev.grid" => cfg.bev_grid = parse(k, v)?,
                "bev.extent" => cfg.bev_extent = parse(k, v)?,
                "frames" => cfg.frames = parse(k, v)?,
                "objects.min" => cfg.objects_min = parse(k, v)?,
                "objects.max" => cfg.objects_max = parse(k, v)?,
                "crf.iterations" => cfg.crf.iterations = parse(k, v)?,
                "crf.window" => cfg.crf.window_radius = parse(k, v)?,
                "crf.appearance.weight" => appearance.weight = parse(k, v)?,
                "crf.appearance.theta" => appearance.bandwidth = parse(k, v)?,
                "crf.spatial.weight" => spatial.weight = parse(k, v)?,
                "crf.spatial.theta" => spatial.bandwidth = parse(k, v)?,
                "fusion.window" => cfg.fusion_window = parse(k, v)?,
                "fusion.cascade" => {
                    cfg.fusion_cascade = match v {
                        "convolved" => CascadeInput::Convolved,
                        "reduced" => CascadeInput::Reduced,
                        _ => return Err(Error::Config(format!("{k}: expected convolved or reduced, got {v:?}"))),
                    }
                }
                "model.feature_channels" => cfg.model.feature_channels = parse(k, v)?,
                "model.fusion_channels" => cfg.model.fusion_channels = parse(k, v)?,
                "model.bev_channels" => cfg.model.bev_channels = parse(k, v)?,
                "model.head_channels" => cfg.model.head_channels = parse(k, v)?,
                "model.mlp_hidden" => cfg.model.mlp_hidden = parse(k, v)?,
                "model.classes" => cfg.model.classes = parse(k, v)?,
                "decoder.tau" => cfg.decoder.tau = parse(k, v)?,
                "decoder.top_n" => {
                    let n: usize = parse(k, v)?;
                    cfg.decoder.top_n = (n > 0).then_some(n);
                }
                "decoder.heights" => cfg.decoder.heights = default_heights(parse(k, v)?),
                "decoder.points" => cfg.decoder_points = parse(k, v)?,
                "decoder.depth_embedding" => cfg.decoder.depth_embedding = parse_bool(k, v)?,
                _ => unreachable!("key list and match disagree on {k}"),
            }
        }
        if !stride_set {
            cfg.stride = default_stride(cfg.image_height);
        }
        cfg.crf.kernels = vec![
            CrfKernel { kind: KernelKind::Appearance, ..appearance },
            CrfKernel { kind: KernelKind::Spatial, ..spatial },
        ];
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let lines = [
            format!("seed = {}", self.seed),
            format!("cameras = {}", self.cameras),
            format!("camera.hfov_deg = {}", self.camera_hfov_deg),
            format!("camera.height = {}", self.camera_height),
            format!("camera.radius = {}", self.camera_radius),
            format!("image.width = {}", self.image_width),
            format!("image.height = {}", self.image_height),
            format!("stride = {}", self.stride),
            format!("depth.bins = {}", self.depth_bins),
            format!("depth.min = {}", self.depth_min),
            format!("depth.max = {}", self.depth_max),
            format!("bev.grid = {}", self.bev_grid),
            format!("bev.extent = {}", self.bev_extent),
            format!("frames = {}", self.frames),
            format!("objects.min = {}", self.objects_min),
            format!("objects.max = {}", self.objects_max),
            format!("crf.iterations = {}", self.crf.iterations),
            format!("crf.window = {}", self.crf.window_radius),
            format!("crf.appearance.weight = {}", self.crf.kernels[0].weight),
            format!("crf.appearance.theta = {}", self.crf.kernels[0].bandwidth),
            format!("crf.spatial.weight = {}", self.crf.kernels[1].weight),
            format!("crf.spatial.theta = {}", self.crf.kernels[1].bandwidth),
            format!("fusion.window = {}", self.fusion_window),
            format!(
                "fusion.cascade = {}",
                match self.fusion_cascade {
                    CascadeInput::Convolved => "convolved",
                    CascadeInput::Reduced => "reduced",
                }
            ),
            format!("model.feature_channels = {}", m.feature_channels),
            format!("model.fusion_channels = {}", m.fusion_channels),
            format!("model.bev_channels = {}", m.bev_channels),
            format!("model.head_channels = {}", m.head_channels),
            format!("model.mlp_hidden = {}", m.mlp_hidden),
            format!("model.classes = {}", m.classes),
            format!("decoder.tau = {}", self.decoder.tau),
            format!("decoder.top_n = {}", self.decoder.top_n.unwrap_or(0)),
            format!("decoder.heights = {}", self.decoder.heights.len()),
            format!("decoder.points = {}", self.decoder_points),
            format!("decoder.depth_embedding = {}", self.decoder.depth_embedding),
        ];
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.cameras == 0 {
            return fail("cameras must be at least 1".into());
        }
        if !(self.camera_hfov_deg > 1.0 && self.camera_hfov_deg < 179.0) {
            return fail(format!("camera.hfov_deg must be in (1, 179), got {}", self.camera_hfov_deg));
        }
        if self.stride != 8 && self.stride != 16 {
            return fail(format!("stride must be 8 or 16, got {}", self.stride));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return fail("image dims must be positive".into());
        }
        if self.image_width % self.stride != 0 || self.image_height % self.stride != 0 {
            return fail(format!(
                "image {}x{} is not divisible by stride {}",
                self.image_width, self.image_height, self.stride
            ));
        }
        if self.depth_bins < 2 {
            return fail(format!("depth.bins must be at least 2, got {}", self.depth_bins));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return fail(format!("depth range [{}, {}] is invalid", self.depth_min, self.depth_max));
        }
        BevSpec::new(self.bev_grid, self.bev_extent)?;
        if self.bev_grid % 2 != 0 {
            return fail(format!("bev.grid must be even, got {}", self.bev_grid));
        }
        if self.frames == 0 || self.frames > 64 {
            return fail(format!("frames must be in 1..=64, got {}", self.frames));
        }
        if self.objects_min > self.objects_max {
            return fail("objects.min exceeds objects.max".into());
        }
        if self.fusion_window == 0 || self.fusion_window > self.frames {
            return fail(format!("fusion.window must be in 1..=frames, got {}", self.fusion_window));
        }
        let m = &self.model;
        if [m.feature_channels, m.fusion_channels, m.bev_channels, m.head_channels, m.mlp_hidden, m.classes].contains(&0) {
            return fail("model widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.decoder.tau) {
            return fail(format!("decoder.tau must be in [0, 1), got {}", self.decoder.tau));
        }
        if self.decoder.heights.is_empty() || self.decoder_points == 0 {
            return fail("decoder.heights and decoder.points must be positive".into());
        }
        self.crf.validate()
    }

    pub fn feature_height(&self) -> usize {
        self.image_height / self.stride
    }

    pub fn feature_width(&self) -> usize {
        self.image_width / self.stride
    }

    pub fn bins(&self) -> DepthBins {
        DepthBins::uniform(self.depth_bins, self.depth_min, self.depth_max).expect("validated depth bins")
    }

    pub fn bev(&self) -> BevSpec {
        BevSpec { grid: self.bev_grid, extent: self.bev_extent }
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig::surround(
            self.cameras,
            self.image_width,
            self.image_height,
            self.camera_hfov_deg.to_radians(),
            self.camera_height,
            self.camera_radius,
        )
    }

    pub fn fusion_groups(&self) -> usize {
        group_count(self.frames, self.fusion_window)
    }
}
