//! The toy camera branch and the full set of learned parameters, addressed
//! by dotted names in a BVNX weight bundle.

use std::path::Path;

use crate::bvnx::{self, Bundle, Entry};
use crate::decoder::{AttnSpec, ObjectDecoder, RegressionHeads};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::{conv2d, init_uniform, Activation, ConvSpec, Dense, MlpSpec};
use crate::res2fusion::{FusionConfig, PostFusion};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::SceneConfig;

/// Number of stride-2 convolutions in the backbone (total stride 8).
pub const BACKBONE_LAYERS: usize = 3;
/// Heatmap bias at initialization, `sigmoid(-4.6) ≈ 0.01`.
pub const HEATMAP_PRIOR_BIAS: f32 = -4.6;
/// Scale of the (averaging) initial heatmap kernel.
pub const HEATMAP_GAIN: f32 = 10.0;
/// Response threshold of the initial color-opponent filters.
const OPPONENT_THRESHOLD: f32 = 0.1;

/// Fixed stack of three stride-2 3×3 convolutions with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub convs: Vec<ConvSpec>,
}

/// Channel widths through the backbone for `out` output channels.
pub fn backbone_widths(out: usize) -> [usize; BACKBONE_LAYERS + 1] {
    [3, (out / 2).max(4), out, out]
}

impl Backbone {
    pub fn random(out: usize, rng: &mut Rng) -> Self {
        let w = backbone_widths(out);
        Self {
            convs: (0..BACKBONE_LAYERS).map(|i| ConvSpec::random(w[i], w[i + 1], 3, 2, 1, rng)).collect(),
        }
    }

    pub fn zeros(out: usize) -> Self {
        let w = backbone_widths(out);
        Self {
            convs: (0..BACKBONE_LAYERS).map(|i| ConvSpec::zeros(w[i], w[i + 1], 3, 2, 1)).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.len() != BACKBONE_LAYERS {
            return Err(Error::shape("backbone layers", BACKBONE_LAYERS, self.convs.len()));
        }
        let mut prev = 3;
        for (i, c) in self.convs.iter().enumerate() {
            if c.in_channels != prev {
                return Err(Error::shape(format!("backbone.conv.{i} input channels"), prev, c.in_channels));
            }
            if c.kernel_size != 3 || c.stride != 2 || c.padding != 1 {
                return Err(Error::Invalid(format!("backbone.conv.{i} must be 3x3, stride 2, padding 1")));
            }
            prev = c.out_channels;
        }
        Ok(())
    }
}

/// `[C, H/n, W/n]` features of an RGB image at stride `n` (8 or 16; stride
/// 16 average-pools the input 2×2 first).
pub fn toy_backbone(image: &RgbImage, stride: usize, backbone: &Backbone) -> Result<Tensor> {
    if stride != 8 && stride != 16 {
        return Err(Error::Invalid(format!("backbone stride must be 8 or 16, got {stride}")));
    }
    for (axis, v) in [("image width", image.width), ("image height", image.height)] {
        if v % stride != 0 {
            return Err(Error::Invalid(format!("{axis} {v} is not divisible by stride {stride}")));
        }
    }
    backbone.validate()?;
    let mut x = image.to_tensor();
    if stride == 16 {
        x = avg_pool2(&x)?;
    }
    for conv in &backbone.convs {
        x = conv2d(&x, conv)?;
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(x)
}

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let (y, xx) = ((i % (oh * ow)) / ow, i % ow);
        let at = |dy: usize, dx: usize| d[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
        (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * 0.25
    }))
}

/// Every learned parameter of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    /// 3×3 conv, `C_img → K` depth logits
    pub depth_head: ConvSpec,
    pub fusion: FusionConfig,
    pub post: PostFusion,
    pub decoder: ObjectDecoder,
}

fn attn_spec(cfg: &SceneConfig, rng: Option<&mut Rng>) -> AttnSpec {
    let c = cfg.model.bev_channels;
    let fc = cfg.model.feature_channels;
    let (h, p) = (cfg.decoder.heights.len(), cfg.decoder_points);
    let id = Activation::Identity;
    match rng {
        Some(rng) => AttnSpec {
            queries: init_uniform(&[crate::decoder::ROI_CELLS, c], c, rng),
            points: p,
            offset_proj: Dense::random(c, h * p * 2, id, rng),
            weight_proj: Dense::random(c, h * p, id, rng),
            value_proj: Dense::random(fc, c, id, rng),
            output_proj: Dense::random(c, c, id, rng),
        },
        None => AttnSpec {
            queries: Tensor::zeros(&[crate::decoder::ROI_CELLS, c]),
            points: p,
            offset_proj: Dense::zeros(c, h * p * 2, id),
            weight_proj: Dense::zeros(c, h * p, id),
            value_proj: Dense::zeros(fc, c, id),
            output_proj: Dense::zeros(c, c, id),
        },
    }
}

fn depth_mlp(cfg: &SceneConfig, rng: Option<&mut Rng>) -> MlpSpec {
    let (k, hid, out) = (cfg.depth_bins, cfg.model.mlp_hidden, cfg.model.feature_channels);
    let layers = match rng {
        Some(rng) => vec![
            Dense::random(k, hid, Activation::Relu, rng),
            Dense::random(hid, out, Activation::Identity, rng),
        ],
        None => vec![Dense::zeros(k, hid, Activation::Relu), Dense::zeros(hid, out, Activation::Identity)],
    };
    MlpSpec::new(layers).expect("chained widths")
}

fn zero_fusion(cfg: &SceneConfig) -> FusionConfig {
    let m = &cfg.model;
    let g = cfg.fusion_groups();
    let w = cfg.fusion_window;
    FusionConfig {
        window: w,
        reduce: (0..g).map(|_| ConvSpec::zeros(w * m.feature_channels, m.fusion_channels, 1, 1, 0)).collect(),
        cascade: (1..g).map(|_| ConvSpec::zeros(m.fusion_channels, m.fusion_channels, 3, 1, 1)).collect(),
        final_conv: ConvSpec::zeros(g * m.fusion_channels, m.bev_channels, 1, 1, 0),
        cascade_input: cfg.fusion_cascade,
    }
}

impl Model {
    /// All-zero parameters with the shapes `cfg` implies.
    pub fn zeros(cfg: &SceneConfig) -> Self {
        let m = &cfg.model;
        Self {
            backbone: Backbone::zeros(m.feature_channels),
            depth_head: ConvSpec::zeros(m.feature_channels, cfg.depth_bins, 3, 1, 1),
            fusion: zero_fusion(cfg),
            post: PostFusion {
                down: ConvSpec::zeros(m.bev_channels, m.bev_channels, 3, 2, 1),
                merge: ConvSpec::zeros(2 * m.bev_channels, m.bev_channels, 1, 1, 0),
            },
            decoder: ObjectDecoder {
                heatmap: ConvSpec::zeros(m.bev_channels, m.classes, 3, 1, 1),
                attention: attn_spec(cfg, None),
                depth_mlp: depth_mlp(cfg, None),
                heads: RegressionHeads::zeros(m.bev_channels, m.head_channels),
            },
        }
    }

    /// Plain uniform fan-in initialization of every parameter.
    pub fn random(cfg: &SceneConfig, seed: u64) -> Self {
        let m = &cfg.model;
        let mut rng = Rng::new(seed);
        let rng = &mut rng;
        let mut fusion = FusionConfig::random(
            cfg.frames,
            cfg.fusion_window,
            m.feature_channels,
            m.fusion_channels,
            m.bev_channels,
            rng,
        );
        fusion.cascade_input = cfg.fusion_cascade;
        Self {
            backbone: Backbone::random(m.feature_channels, rng),
            depth_head: ConvSpec::random(m.feature_channels, cfg.depth_bins, 3, 1, 1, rng),
            fusion,
            post: PostFusion::random(m.bev_channels, m.bev_channels, rng),
            decoder: ObjectDecoder {
                heatmap: ConvSpec::random(m.bev_channels, m.classes, 3, 1, 1, rng),
                attention: attn_spec(cfg, Some(rng)),
                depth_mlp: depth_mlp(cfg, Some(rng)),
                heads: RegressionHeads::random(m.bev_channels, m.head_channels, rng),
            },
        }
    }

    /// Untrained starting point for the synthetic scenes. The first backbone
    /// layer holds thresholded color-opponent filters (silent on ground and
    /// sky); every later conv on the feature and BEV path averages its
    /// inputs with random non-negative weights and no bias; the heatmap
    /// starts at a low prior. Background therefore gives exactly zero BEV
    /// features and no detections, while boxes raise the heatmap. Depth,
    /// attention and regression weights stay plainly random.
    pub fn init(cfg: &SceneConfig, seed: u64) -> Self {
        let mut model = Self::random(cfg, seed);
        let mut rng = Rng::new(seed).fork(0x0B5E);
        const OPPONENTS: [[f32; 3]; 3] = [[1.0, -0.5, -0.5], [-0.5, 1.0, -0.5], [0.5, 0.5, -1.0]];
        let first = &mut model.backbone.convs[0];
        for o in 0..first.out_channels {
            let scale = rng.uniform_f32(0.5, 1.5);
            let opp = OPPONENTS[o % OPPONENTS.len()];
            for (i, &v) in opp.iter().enumerate() {
                for t in 0..9 {
                    first.weight.set(&[o, i, t / 3, t % 3], scale * v / 9.0);
                }
            }
            first.bias.set(&[o], -scale * OPPONENT_THRESHOLD);
        }
        let zero_bias = |c: &mut ConvSpec| c.bias = Tensor::zeros(&[c.out_channels]);
        let positive = |c: &mut ConvSpec| {
            let per_out = c.in_channels * c.kernel_size * c.kernel_size;
            for row in c.weight.data_mut().chunks_exact_mut(per_out) {
                let sum: f32 = row.iter().map(|v| v.abs()).sum();
                row.iter_mut().for_each(|v| *v = v.abs() / sum);
            }
            c.bias = Tensor::zeros(&[c.out_channels]);
        };
        model.backbone.convs[1..].iter_mut().for_each(positive);
        zero_bias(&mut model.depth_head);
        model.fusion.reduce.iter_mut().for_each(positive);
        model.fusion.cascade.iter_mut().for_each(positive);
        positive(&mut model.fusion.final_conv);
        positive(&mut model.post.down);
        positive(&mut model.post.merge);
        positive(&mut model.decoder.heatmap);
        model.decoder.heatmap.weight.data_mut().iter_mut().for_each(|v| *v *= HEATMAP_GAIN);
        model.decoder.heatmap.bias = Tensor::full(&[cfg.model.classes], HEATMAP_PRIOR_BIAS);
        model
    }

    /// Calls `f` on every parameter tensor with its dotted name, in a fixed
    /// order.
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        let conv = |name: String, c: &mut ConvSpec, f: &mut dyn FnMut(String, &mut Tensor)| {
            f(format!("{name}.weight"), &mut c.weight);
            f(format!("{name}.bias"), &mut c.bias);
        };
        for (i, c) in self.backbone.convs.iter_mut().enumerate() {
            conv(format!("backbone.conv.{i}"), c, f);
        }
        conv("depth.head".into(), &mut self.depth_head, f);
        for (i, c) in self.fusion.reduce.iter_mut().enumerate() {
            conv(format!("res2fusion.reduce.{i}"), c, f);
        }
        for (i, c) in self.fusion.cascade.iter_mut().enumerate() {
            conv(format!("res2fusion.cascade.{}", i + 1), c, f);
        }
        conv("res2fusion.final".into(), &mut self.fusion.final_conv, f);
        conv("res2fusion.post.down".into(), &mut self.post.down, f);
        conv("res2fusion.post.merge".into(), &mut self.post.merge, f);
        let d = &mut self.decoder;
        conv("decoder.heatmap".into(), &mut d.heatmap, f);
        let a = &mut d.attention;
        f("decoder.attn.queries".into(), &mut a.queries);
        for (name, dense) in [
            ("sampling_offsets", &mut a.offset_proj),
            ("attention_weights", &mut a.weight_proj),
            ("value_proj", &mut a.value_proj),
            ("output_proj", &mut a.output_proj),
        ] {
            f(format!("decoder.attn.{name}.weight"), &mut dense.weight);
            f(format!("decoder.attn.{name}.bias"), &mut dense.bias);
        }
        for (l, dense) in d.depth_mlp.layers.iter_mut().enumerate() {
            f(format!("decoder.depth_mlp.{l}.weight"), &mut dense.weight);
            f(format!("decoder.depth_mlp.{l}.bias"), &mut dense.bias);
        }
        let h = &mut d.heads;
        for (name, c) in [
            ("shared", &mut h.shared),
            ("offset", &mut h.offset),
            ("z", &mut h.z),
            ("size", &mut h.size),
            ("rot", &mut h.rot),
            ("vel", &mut h.vel),
        ] {
            conv(format!("decoder.head.{name}"), c, f);
        }
    }

    /// Dotted parameter names and shapes `cfg` implies, in bundle order.
    pub fn expected_shapes(cfg: &SceneConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        Self::zeros(cfg).visit(&mut |name, t| out.push((name, t.dims().to_vec())));
        out
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut bundle = Bundle::new();
        self.clone().visit(&mut |name, t| {
            bundle.insert(name, Entry::F32(t.clone()));
        });
        bundle
    }

    /// Rebuilds a model for `cfg`, rejecting unknown names, reporting every
    /// missing name and checking each shape.
    pub fn from_bundle(bundle: &Bundle, cfg: &SceneConfig) -> Result<Self> {
        let expected = Self::expected_shapes(cfg);
        let names: Vec<String> = expected.iter().map(|(n, _)| n.clone()).collect();
        let unknown: Vec<String> = bundle.keys().filter(|k| !names.contains(k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownWeights { unknown, expected: names });
        }
        let missing: Vec<String> = names.iter().filter(|n| !bundle.contains_key(*n)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingWeights(missing));
        }
        let mut model = Self::zeros(cfg);
        let mut failure = None;
        model.visit(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match &bundle[&name] {
                Entry::F32(t) if t.dims() == slot.dims() => *slot = t.clone(),
                Entry::F32(t) => {
                    let axis = (0..slot.rank().max(t.rank()))
                        .find(|&i| slot.dims().get(i) != t.dims().get(i))
                        .unwrap_or(0);
                    failure = Some(Error::shape(
                        format!("{name} dim {axis} (expected {:?}, got {:?})", slot.dims(), t.dims()),
                        slot.dims().get(axis).copied().unwrap_or(0),
                        t.dims().get(axis).copied().unwrap_or(0),
                    ));
                }
                Entry::U32(_) => failure = Some(Error::Invalid(format!("{name} must be an f32 tensor"))),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    /// Checks every inter-stage channel count against `cfg`.
    pub fn validate(&self, cfg: &SceneConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        let mut i = 0;
        let mut failure = None;
        self.clone().visit(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match expected.get(i) {
                Some((n, dims)) if *n == name && dims.as_slice() == t.dims() => {}
                Some((n, dims)) if *n == name => {
                    let axis = (0..dims.len()).find(|&a| t.dims().get(a) != Some(&dims[a])).unwrap_or(0);
                    failure = Some(Error::shape(
                        format!("{name} dim {axis}"),
                        dims[axis],
                        t.dims().get(axis).copied().unwrap_or(0),
                    ));
                }
                _ => failure = Some(Error::Invalid(format!("unexpected parameter {name}"))),
            }
            i += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if i != expected.len() {
            return Err(Error::shape("parameter count", expected.len(), i));
        }
        self.backbone.validate()?;
        if self.fusion.cascade_input != cfg.fusion_cascade || self.fusion.window != cfg.fusion_window {
            return Err(Error::Config("fusion settings of the model disagree with the config".into()));
        }
        self.fusion.validate(cfg.frames, cfg.model.feature_channels)
    }
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    bvnx::write_bundle(path, &model.to_bundle())
}

pub fn load_weights(path: impl AsRef<Path>, cfg: &SceneConfig) -> Result<Model> {
    Model::from_bundle(&bvnx::read_bundle(path)?, cfg)
}
