//! Temporal BEV aggregation with windowed groups and a Res2Net-style
//! multi-scale convolution cascade. Frames are never warped by ego motion;
//! the enlarged receptive field of the cascade absorbs object motion.
//!
//! Groups are indexed from the present: group 0 holds the `w` most recent
//! frames (ending at the current frame), group `g - 1` the oldest. The
//! oldest group is zero-padded on its old side when `k mod w != 0`.

use crate::error::{Error, Result};
use crate::nn::{conv2d, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::view_transform::BevGrid;

/// Chronological BEV frames; the last one is the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionStack {
    frames: Vec<BevGrid>,
}

impl FusionStack {
    pub fn new(frames: Vec<BevGrid>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Invalid("fusion stack needs at least one frame".into()))?;
        let (c, h, w) = first.chw()?;
        if h != w {
            return Err(Error::shape("BEV width", h, w));
        }
        for f in &frames {
            f.expect_dims(&[c, h, w])?;
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.frames[0].dims()[0]
    }

    pub fn grid(&self) -> usize {
        self.frames[0].dims()[1]
    }

    pub fn frames(&self) -> &[BevGrid] {
        &self.frames
    }

    pub fn current(&self) -> &BevGrid {
        self.frames.last().unwrap()
    }
}

/// What each cascade stage adds to its own reduced group before the 3×3
/// convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CascadeInput {
    /// The already-convolved output of the next-older group (hierarchical).
    #[default]
    Convolved,
    /// The reduced, unconvolved next-older group.
    Reduced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub window: usize,
    /// one 1×1 reduction per group, `w·C → C'`
    pub reduce: Vec<ConvSpec>,
    /// 3×3 convolutions for groups `1..g`; `cascade[i - 1]` serves group `i`
    pub cascade: Vec<ConvSpec>,
    /// 1×1, `g·C' → C_out`
    pub final_conv: ConvSpec,
    pub cascade_input: CascadeInput,
}

pub fn group_count(frames: usize, window: usize) -> usize {
    frames.div_ceil(window)
}

impl FusionConfig {
    pub fn groups(&self) -> usize {
        self.reduce.len()
    }

    pub fn reduced_channels(&self) -> usize {
        self.reduce[0].out_channels
    }

    /// Random weights for `frames` frames of `channels` channels.
    pub fn random(frames: usize, window: usize, channels: usize, reduced: usize, out: usize, rng: &mut Rng) -> Self {
        let g = group_count(frames, window);
        Self {
            window,
            reduce: (0..g).map(|_| ConvSpec::random(window * channels, reduced, 1, 1, 0, rng)).collect(),
            cascade: (1..g).map(|_| ConvSpec::random(reduced, reduced, 3, 1, 1, rng)).collect(),
            final_conv: ConvSpec::random(g * reduced, out, 1, 1, 0, rng),
            cascade_input: CascadeInput::default(),
        }
    }

    /// Checks the channel arithmetic against a stack of `frames` × `channels`.
    pub fn validate(&self, frames: usize, channels: usize) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("fusion window must be at least 1".into()));
        }
        let g = group_count(frames, self.window);
        if self.reduce.len() != g {
            return Err(Error::shape("fusion reduce kernels", g, self.reduce.len()));
        }
        if self.cascade.len() != g - 1 {
            return Err(Error::shape("fusion cascade kernels", g - 1, self.cascade.len()));
        }
        let reduced = self.reduce[0].out_channels;
        for (i, r) in self.reduce.iter().enumerate() {
            if r.in_channels != self.window * channels {
                return Err(Error::shape(format!("res2fusion.reduce.{i} input channels"), self.window * channels, r.in_channels));
            }
            if r.out_channels != reduced {
                return Err(Error::shape(format!("res2fusion.reduce.{i} output channels"), reduced, r.out_channels));
            }
            if r.kernel_size != 1 || r.stride != 1 {
                return Err(Error::Invalid(format!("res2fusion.reduce.{i} must be a stride-1 1x1 conv")));
            }
        }
        for (i, c) in self.cascade.iter().enumerate() {
            if c.in_channels != reduced || c.out_channels != reduced {
                return Err(Error::shape(format!("res2fusion.cascade.{} channels", i + 1), reduced, c.in_channels));
            }
            if c.kernel_size != 3 || c.stride != 1 || c.padding != 1 {
                return Err(Error::Invalid(format!("res2fusion.cascade.{} must be a same-size 3x3 conv", i + 1)));
            }
        }
        if self.final_conv.in_channels != g * reduced {
            return Err(Error::shape("res2fusion.final input channels", g * reduced, self.final_conv.in_channels));
        }
        if self.final_conv.kernel_size != 1 || self.final_conv.stride != 1 {
            return Err(Error::Invalid("res2fusion.final must be a stride-1 1x1 conv".into()));
        }
        Ok(())
    }
}

/// Splits the stack into `⌈k / w⌉` channel-concatenated groups, group 0
/// being the most recent. Frames keep chronological order inside a group.
pub fn partition(stack: &FusionStack, window: usize) -> Result<Vec<Tensor>> {
    if window == 0 {
        return Err(Error::Invalid("window must be at least 1".into()));
    }
    let k = stack.len();
    let g = group_count(k, window);
    let (c, s) = (stack.channels(), stack.grid());
    let zeros = Tensor::zeros(&[c, s, s]);
    let mut groups = Vec::with_capacity(g);
    for i in 0..g {
        // slots in chronological order; slot index counts back from the present
        let parts: Vec<&Tensor> = (0..window)
            .rev()
            .map(|back| {
                let age = i * window + back;
                if age < k {
                    &stack.frames[k - 1 - age]
                } else {
                    &zeros
                }
            })
            .collect();
        groups.push(Tensor::concat_channels(&parts)?);
    }
    Ok(groups)
}

pub fn reduce_groups(groups: &[Tensor], reduce: &[ConvSpec]) -> Result<Vec<Tensor>> {
    if groups.len() != reduce.len() {
        return Err(Error::shape("reduce kernel count", groups.len(), reduce.len()));
    }
    groups.iter().zip(reduce).map(|(g, spec)| conv2d(g, spec)).collect()
}

/// Hierarchical cascade from the oldest group towards the present:
/// the oldest group is convolved alone, each middle group is convolved
/// after adding its older neighbour, and group 0 passes through.
pub fn multiscale_cascade(reduced: &[Tensor], cascade: &[ConvSpec], input: CascadeInput) -> Result<Vec<Tensor>> {
    let g = reduced.len();
    if g == 0 {
        return Ok(Vec::new());
    }
    if cascade.len() != g - 1 {
        return Err(Error::shape("cascade kernel count", g - 1, cascade.len()));
    }
    for r in &reduced[1..] {
        r.expect_dims(reduced[0].dims())?;
    }
    let mut out: Vec<Option<Tensor>> = vec![None; g];
    out[0] = Some(reduced[0].clone());
    for i in (1..g).rev() {
        let spec = &cascade[i - 1];
        let y = if i == g - 1 {
            conv2d(&reduced[i], spec)?
        } else {
            let older = match input {
                CascadeInput::Convolved => out[i + 1].as_ref().unwrap(),
                CascadeInput::Reduced => &reduced[i + 1],
            };
            conv2d(&reduced[i].add(older)?, spec)?
        };
        out[i] = Some(y);
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Partition → reduce → cascade → concat (oldest first) → final 1×1.
pub fn fuse(stack: &FusionStack, config: &FusionConfig) -> Result<BevGrid> {
    config.validate(stack.len(), stack.channels())?;
    let groups = partition(stack, config.window)?;
    let reduced = reduce_groups(&groups, &config.reduce)?;
    let cascaded = multiscale_cascade(&reduced, &config.cascade, config.cascade_input)?;
    let ordered: Vec<&Tensor> = cascaded.iter().rev().collect();
    conv2d(&Tensor::concat_channels(&ordered)?, &config.final_conv)
}

/// Chebyshev radius over which an impulse entering `group` reaches the
/// fused output: one cell per 3×3 stage on its longest path.
pub fn receptive_radius(group: usize, groups: usize, input: CascadeInput) -> usize {
    if group == 0 || groups <= 1 {
        return 0;
    }
    match input {
        CascadeInput::Convolved => group,
        CascadeInput::Reduced => 1,
    }
}

/// Stride-2 3×3 conv with ReLU, nearest ×2 upsample, concat with the input
/// and a 1×1 merge: the single multi-scale block applied after fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct PostFusion {
    pub down: ConvSpec,
    pub merge: ConvSpec,
}

impl PostFusion {
    pub fn random(channels: usize, out: usize, rng: &mut Rng) -> Self {
        Self {
            down: ConvSpec::random(channels, channels, 3, 2, 1, rng),
            merge: ConvSpec::random(2 * channels, out, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, bev: &BevGrid) -> Result<BevGrid> {
        let (_, h, w) = bev.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Invalid(format!("post-fusion block needs an even grid, got {h}x{w}")));
        }
        if self.down.stride != 2 || self.down.kernel_size != 3 || self.down.padding != 1 {
            return Err(Error::Invalid("res2fusion.post.down must be a 3x3 stride-2 conv with padding 1".into()));
        }
        let mut down = conv2d(bev, &self.down)?;
        down.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let dc = self.down.out_channels;
        let (dh, dw) = (h / 2, w / 2);
        let up = Tensor::from_fn(&[dc, h, w], |i| {
            let ch = i / (h * w);
            let (y, x) = ((i % (h * w)) / w, i % w);
            down.data()[(ch * dh + y / 2) * dw + x / 2]
        });
        let merged = Tensor::concat_channels(&[bev, &up])?;
        if merged.dims()[0] != self.merge.in_channels {
            return Err(Error::shape("res2fusion.post.merge input channels", merged.dims()[0], self.merge.in_channels));
        }
        conv2d(&merged, &self.merge)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(c: usize, s: usize, value: f32) -> Tensor {
        Tensor::full(&[c, s, s], value)
    }

    fn stack_of(k: usize) -> FusionStack {
        // frame f (0 = oldest) is filled with f + 1
        FusionStack::new((0..k).map(|f| frame(2, 4, f as f32 + 1.0)).collect()).unwrap()
    }

    fn slot_values(group: &Tensor, c: usize) -> Vec<f32> {
        let (gc, h, w) = group.chw().unwrap();
        (0..gc / c).map(|slot| group.data()[slot * c * h * w]).collect()
    }

    #[test]
    fn partition_nine_by_three() {
        let groups = partition(&stack_of(9), 3).unwrap();
        assert_eq!(groups.len(), 3);
        assert_eq!(slot_values(&groups[0], 2), vec![7.0, 8.0, 9.0]);
        assert_eq!(slot_values(&groups[1], 2), vec![4.0, 5.0, 6.0]);
        assert_eq!(slot_values(&groups[2], 2), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn partition_pads_oldest_group() {
        let groups = partition(&stack_of(8), 3).unwrap();
        assert_eq!(groups.len(), 3);
        assert_eq!(slot_values(&groups[0], 2), vec![6.0, 7.0, 8.0]);
        assert_eq!(slot_values(&groups[2], 2), vec![0.0, 1.0, 2.0]);
        assert!(groups[2].data()[..32].iter().all(|&v| v == 0.0));

        let single = partition(&stack_of(1), 1).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0].bit_eq(&frame(2, 4, 1.0)));
    }

    #[test]
    fn reduce_trivial_kernels() {
        let groups = partition(&stack_of(4), 2).unwrap();
        let same = reduce_groups(&groups, &[ConvSpec::identity(4), ConvSpec::identity(4)]).unwrap();
        assert!(same[0].bit_eq(&groups[0]) && same[1].bit_eq(&groups[1]));
        let zero = reduce_groups(&groups, &[ConvSpec::zeros(4, 3, 1, 1, 0), ConvSpec::zeros(4, 3, 1, 1, 0)]).unwrap();
        assert!(zero.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(reduce_groups(&groups, &[ConvSpec::identity(4)]).is_err());
    }

    #[test]
    fn reduce_matches_per_group_conv() {
        let mut rng = Rng::new(3);
        let stack = FusionStack::new((0..5).map(|_| Tensor::from_fn(&[3, 6, 6], |_| rng.uniform_f32(-1.0, 1.0))).collect()).unwrap();
        let cfg = FusionConfig::random(5, 2, 3, 4, 4, &mut rng);
        let groups = partition(&stack, 2).unwrap();
        let got = reduce_groups(&groups, &cfg.reduce).unwrap();
        for (i, g) in groups.iter().enumerate() {
            let want = conv2d(g, &cfg.reduce[i]).unwrap();
            assert!(got[i].max_abs_diff(&want) <= 1e-6);
        }
    }

    #[test]
    fn cascade_degenerate_cases() {
        let mut rng = Rng::new(4);
        let one = vec![Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_f32(-1.0, 1.0))];
        assert!(multiscale_cascade(&one, &[], CascadeInput::Convolved).unwrap()[0].bit_eq(&one[0]));

        let three: Vec<_> = (0..3).map(|_| Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_f32(-1.0, 1.0))).collect();
        let zeros = vec![ConvSpec::zeros(2, 2, 3, 1, 1), ConvSpec::zeros(2, 2, 3, 1, 1)];
        let out = multiscale_cascade(&three, &zeros, CascadeInput::Convolved).unwrap();
        assert!(out[0].bit_eq(&three[0]));
        assert!(out[1].data().iter().chain(out[2].data()).all(|&v| v == 0.0));
    }

    fn positive_conv(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> ConvSpec {
        let pad = k / 2;
        ConvSpec::new(
            Tensor::from_fn(&[cout, cin, k, k], |_| rng.uniform_f32(0.1, 1.0)),
            Tensor::zeros(&[cout]),
            1,
            pad,
        )
        .unwrap()
    }

    fn support_radius(t: &Tensor, cx: usize, cy: usize) -> Option<usize> {
        let (c, h, w) = t.chw().unwrap();
        let mut r = None;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if t.get(&[ch, y, x]) != 0.0 {
                        let d = x.abs_diff(cx).max(y.abs_diff(cy));
                        r = Some(r.map_or(d, |m: usize| m.max(d)));
                    }
                }
            }
        }
        r
    }

    fn impulse_radius(k: usize, w: usize, frame_age: usize, input: CascadeInput) -> Option<usize> {
        let mut rng = Rng::new((k * 100 + w * 10 + frame_age) as u64);
        let g = group_count(k, w);
        let (c, s) = (2, 17);
        let mut frames: Vec<Tensor> = (0..k).map(|_| Tensor::zeros(&[c, s, s])).collect();
        frames[k - 1 - frame_age].set(&[0, 8, 8], 1.0);
        let cfg = FusionConfig {
            window: w,
            reduce: (0..g).map(|_| positive_conv(w * c, 2, 1, &mut rng)).collect(),
            cascade: (1..g).map(|_| positive_conv(2, 2, 3, &mut rng)).collect(),
            final_conv: positive_conv(g * 2, 2, 1, &mut rng),
            cascade_input: input,
        };
        let out = fuse(&FusionStack::new(frames).unwrap(), &cfg).unwrap();
        support_radius(&out, 8, 8)
    }

    #[test]
    fn impulse_in_three_group_cascade() {
        // oldest group passes two 3x3 stages, the current one none
        assert_eq!(impulse_radius(9, 3, 8, CascadeInput::Convolved), Some(2));
        assert_eq!(impulse_radius(9, 3, 4, CascadeInput::Convolved), Some(1));
        assert_eq!(impulse_radius(9, 3, 0, CascadeInput::Convolved), Some(0));
        assert_eq!(impulse_radius(9, 3, 8, CascadeInput::Reduced), Some(1));
    }

    #[test]
    fn fuse_trivial_cases() {
        let mut rng = Rng::new(5);
        let current = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform_f32(-1.0, 1.0));
        let stack = FusionStack::new(vec![current.clone()]).unwrap();
        let id = FusionConfig {
            window: 1,
            reduce: vec![ConvSpec::identity(3)],
            cascade: vec![],
            final_conv: ConvSpec::identity(3),
            cascade_input: CascadeInput::Convolved,
        };
        assert!(fuse(&stack, &id).unwrap().bit_eq(&current));
        let zero = FusionConfig { final_conv: ConvSpec::zeros(3, 3, 1, 1, 0), ..id };
        assert!(fuse(&stack, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_equals_composition() {
        let mut rng = Rng::new(6);
        let stack = FusionStack::new((0..8).map(|_| Tensor::from_fn(&[4, 8, 8], |_| rng.uniform_f32(-1.0, 1.0))).collect()).unwrap();
        let cfg = FusionConfig::random(8, 3, 4, 5, 6, &mut rng);
        let fused = fuse(&stack, &cfg).unwrap();
        let groups = partition(&stack, 3).unwrap();
        let reduced: Vec<_> = groups.iter().zip(&cfg.reduce).map(|(g, s)| conv2d(g, s).unwrap()).collect();
        let b2 = conv2d(&reduced[2], &cfg.cascade[1]).unwrap();
        let b1 = conv2d(&reduced[1].add(&b2).unwrap(), &cfg.cascade[0]).unwrap();
        let cat = Tensor::concat_channels(&[&b2, &b1, &reduced[0]]).unwrap();
        let want = conv2d(&cat, &cfg.final_conv).unwrap();
        assert!(fused.bit_eq(&want));
    }

    #[test]
    fn config_validation() {
        let mut rng = Rng::new(7);
        let cfg = FusionConfig::random(9, 3, 4, 4, 4, &mut rng);
        assert!(cfg.validate(9, 4).is_ok());
        assert!(cfg.validate(10, 4).is_err());
        assert!(cfg.validate(9, 5).is_err());
    }

    #[test]
    fn post_fusion_shapes() {
        let mut rng = Rng::new(8);
        let post = PostFusion::random(4, 6, &mut rng);
        let out = post.forward(&Tensor::from_fn(&[4, 8, 8], |_| rng.uniform_f32(-1.0, 1.0))).unwrap();
        assert_eq!(out.dims(), &[6, 8, 8]);
        assert!(post.forward(&Tensor::zeros(&[4, 7, 7])).is_err());
    }
}
