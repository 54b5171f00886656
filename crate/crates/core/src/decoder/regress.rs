use std::fmt::Write as _;

use super::{RoiSet, ROI_SIZE};
use crate::error::{Error, Result};
use crate::nn::{conv2d, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::view_transform::BevSpec;

/// Raw head outputs are clamped to this magnitude before `exp`, keeping
/// decoded sizes finite and strictly positive.
const SIZE_LOG_LIMIT: f32 = 30.0;

/// CenterPoint-style heads: a shared 3×3 conv + ReLU over the ROI patch,
/// then one 3×3 conv per attribute read out at the patch center.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHeads {
    pub shared: ConvSpec,
    /// 2 channels: sub-cell (x, y) offset before tanh
    pub offset: ConvSpec,
    /// 1 channel: ego-z of the box center, meters
    pub z: ConvSpec,
    /// 3 channels: log (l, w, h)
    pub size: ConvSpec,
    /// 2 channels: (sin, cos) of yaw
    pub rot: ConvSpec,
    /// 2 channels: (vx, vy), m/s
    pub vel: ConvSpec,
}

impl RegressionHeads {
    pub fn random(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut head = |out| ConvSpec::random(hidden, out, 3, 1, 1, rng);
        let (offset, z, size, rot, vel) = (head(2), head(1), head(3), head(2), head(2));
        Self {
            shared: ConvSpec::random(channels, hidden, 3, 1, 1, rng),
            offset,
            z,
            size,
            rot,
            vel,
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let head = |out| ConvSpec::zeros(hidden, out, 3, 1, 1);
        Self {
            shared: ConvSpec::zeros(channels, hidden, 3, 1, 1),
            offset: head(2),
            z: head(1),
            size: head(3),
            rot: head(2),
            vel: head(2),
        }
    }

    pub fn named(&self) -> [(&'static str, &ConvSpec); 6] {
        [
            ("shared", &self.shared),
            ("offset", &self.offset),
            ("z", &self.z),
            ("size", &self.size),
            ("rot", &self.rot),
            ("vel", &self.vel),
        ]
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.shared.in_channels != channels {
            return Err(Error::shape("decoder.head.shared input channels", channels, self.shared.in_channels));
        }
        let hidden = self.shared.out_channels;
        for (name, spec, out) in [
            ("offset", &self.offset, 2),
            ("z", &self.z, 1),
            ("size", &self.size, 3),
            ("rot", &self.rot, 2),
            ("vel", &self.vel, 2),
        ] {
            if spec.in_channels != hidden {
                return Err(Error::shape(format!("decoder.head.{name} input channels"), hidden, spec.in_channels));
            }
            if spec.out_channels != out {
                return Err(Error::shape(format!("decoder.head.{name} output channels"), out, spec.out_channels));
            }
        }
        for (name, spec) in self.named() {
            if spec.kernel_size != 3 || spec.stride != 1 || spec.padding != 1 {
                return Err(Error::Invalid(format!("decoder.head.{name} must be a same-size 3x3 conv")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    /// ego-frame box center, meters
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// sub-cell offset of the center, in cells, each within ±0.5
    pub offset: (f64, f64),
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// radians in (-π, π]
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub score: f64,
}

/// Decodes one detection per ROI.
pub fn regress(rois: &RoiSet, heads: &RegressionHeads, spec: &BevSpec) -> Result<DetectionSet> {
    heads.validate(rois.channels)?;
    let center = (ROI_SIZE / 2) * ROI_SIZE + ROI_SIZE / 2;
    let at_center = |t: &Tensor, ch: usize| t.data()[ch * ROI_SIZE * ROI_SIZE + center];
    let mut out = Vec::with_capacity(rois.rois.len());
    for roi in &rois.rois {
        let mut hidden = conv2d(&roi.patch, &heads.shared)?;
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let offset = conv2d(&hidden, &heads.offset)?;
        let z = conv2d(&hidden, &heads.z)?;
        let size = conv2d(&hidden, &heads.size)?;
        let rot = conv2d(&hidden, &heads.rot)?;
        let vel = conv2d(&hidden, &heads.vel)?;

        let (ox, oy) = (0.5 * at_center(&offset, 0).tanh() as f64, 0.5 * at_center(&offset, 1).tanh() as f64);
        let (cx, cy) = spec.cell_center(roi.center.x as isize, roi.center.y as isize);
        let s = spec.cell_size();
        let dim = |ch| (at_center(&size, ch).clamp(-SIZE_LOG_LIMIT, SIZE_LOG_LIMIT) as f64).exp();
        out.push(Detection {
            class: roi.center.class,
            x: cx + ox * s,
            y: cy + oy * s,
            z: at_center(&z, 0) as f64,
            offset: (ox, oy),
            length: dim(0),
            width: dim(1),
            height: dim(2),
            yaw: decode_yaw(at_center(&rot, 0) as f64, at_center(&rot, 1) as f64),
            vx: at_center(&vel, 0) as f64,
            vy: at_center(&vel, 1) as f64,
            score: roi.center.score as f64,
        });
    }
    Ok(DetectionSet(out))
}

/// `atan2(sin, cos)` folded into (-π, π], with `atan2(0, 0) = 0`.
pub fn decode_yaw(sin: f64, cos: f64) -> f64 {
    let yaw = sin.atan2(cos);
    if yaw <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        yaw + 0.0
    }
}

/// Line-oriented detection list, one object per line with columns
/// `class x y z l w h yaw vx vy score`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet(pub Vec<Detection>);

pub const DETECTION_HEADER: &str = "# class x y z l w h yaw vx vy score";

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(DETECTION_HEADER);
        s.push('\n');
        for d in &self.0 {
            // adding 0.0 turns -0.0 into 0.0 so zero never prints with a sign
            let v = [d.x, d.y, d.z, d.length, d.width, d.height, d.yaw, d.vx, d.vy, d.score].map(|v| v + 0.0);
            write!(s, "{}", d.class).unwrap();
            for x in v {
                write!(s, " {x:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`DetectionSet::to_text`] output. Offsets are not serialized
    /// and come back as zero.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        let mut offset = 0;
        for line in text.lines() {
            let here = offset;
            offset += line.len() + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 11 {
                return Err(Error::format(here, format!("expected 11 columns, found {}", fields.len())));
            }
            let class = fields[0].parse().map_err(|_| Error::format(here, "bad class id"))?;
            let mut v = [0.0f64; 10];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|_| Error::format(here, format!("bad number {f:?}")))?;
            }
            out.push(Detection {
                class,
                x: v[0],
                y: v[1],
                z: v[2],
                offset: (0.0, 0.0),
                length: v[3],
                width: v[4],
                height: v[5],
                yaw: v[6],
                vx: v[7],
                vy: v[8],
                score: v[9],
            });
        }
        Ok(Self(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{expand_roi, Center};

    fn rois(rng: &mut Rng) -> RoiSet {
        let bev = Tensor::from_fn(&[4, 16, 16], |_| rng.uniform_f32(-1.0, 1.0));
        expand_roi(&bev, &[Center { x: 8, y: 4, class: 2, score: 0.7 }, Center { x: 0, y: 15, class: 0, score: 0.2 }]).unwrap()
    }

    #[test]
    fn zero_heads_decode_to_defaults() {
        let mut rng = Rng::new(1);
        let spec = BevSpec::new(16, 8.0).unwrap();
        let dets = regress(&rois(&mut rng), &RegressionHeads::zeros(4, 6), &spec).unwrap();
        assert_eq!(dets.len(), 2);
        let d = dets.0[0];
        assert_eq!(d.offset, (0.0, 0.0));
        assert_eq!((d.length, d.width, d.height), (1.0, 1.0, 1.0));
        assert_eq!(d.yaw, 0.0);
        assert_eq!((d.vx, d.vy, d.z), (0.0, 0.0, 0.0));
        assert_eq!((d.x, d.y), spec.cell_center(8, 4));
        assert_eq!(d.class, 2);
        assert!((d.score - 0.7).abs() < 1e-7);
    }

    #[test]
    fn yaw_decoding() {
        assert!((decode_yaw(1.0, 0.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(decode_yaw(0.0, 0.0), 0.0);
        assert_eq!(decode_yaw(-0.0, -1.0), std::f64::consts::PI);
        assert_eq!(decode_yaw(0.0, -1.0), std::f64::consts::PI);
    }

    #[test]
    fn random_heads_stay_in_range() {
        let mut rng = Rng::new(2);
        let spec = BevSpec::new(16, 8.0).unwrap();
        for _ in 0..20 {
            let mut heads = RegressionHeads::random(4, 6, &mut rng);
            heads.size.bias = Tensor::from_fn(&[3], |_| rng.uniform_f32(-100.0, 100.0));
            for d in regress(&rois(&mut rng), &heads, &spec).unwrap().0 {
                assert!(d.length > 0.0 && d.width > 0.0 && d.height > 0.0);
                assert!(d.length.is_finite() && d.width.is_finite() && d.height.is_finite());
                assert!(d.yaw > -std::f64::consts::PI && d.yaw <= std::f64::consts::PI);
                assert!(d.offset.0.abs() <= 0.5 && d.offset.1.abs() <= 0.5);
            }
        }
    }

    #[test]
    fn head_shape_mismatch() {
        let mut rng = Rng::new(3);
        let spec = BevSpec::new(16, 8.0).unwrap();
        assert!(regress(&rois(&mut rng), &RegressionHeads::zeros(5, 6), &spec).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut rng = Rng::new(4);
        let spec = BevSpec::new(16, 8.0).unwrap();
        let dets = regress(&rois(&mut rng), &RegressionHeads::random(4, 6, &mut rng), &spec).unwrap();
        let text = dets.to_text();
        assert!(text.starts_with(DETECTION_HEADER));
        let back = DetectionSet::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert!(DetectionSet::from_text("0 1 2 3\n").is_err());
    }
}
