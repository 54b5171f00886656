//! Two-stage object decoding: heatmap proposals, then ROI refinement by
//! spatial cross-attention into the camera features, then attribute
//! regression.

mod attention;
mod regress;

pub use attention::{
    depth_embedding, lift_references, spatial_cross_attention, AttnSpec, RefPointSet,
};
pub use regress::{regress, Detection, DetectionSet, RegressionHeads};

use crate::camera::CameraRig;
use crate::depth_crf::DepthVolume;
use crate::error::{Error, Result};
use crate::nn::{conv2d, sigmoid, ConvSpec, MlpSpec};
use crate::tensor::Tensor;
use crate::view_transform::{BevGrid, BevSpec};

/// ROI side length in BEV cells.
pub const ROI_SIZE: usize = 7;
pub const ROI_RADIUS: isize = (ROI_SIZE / 2) as isize;
pub const ROI_CELLS: usize = ROI_SIZE * ROI_SIZE;

/// Largest `f32` strictly below 1; sigmoid outputs are clamped into
/// `[f32::MIN_POSITIVE, HEATMAP_MAX]` so they stay in the open interval.
pub const HEATMAP_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

/// Per-class center likelihoods, `[classes, G, G]`, all in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    tensor: Tensor,
}

impl Heatmap {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.chw()?;
        if h != w {
            return Err(Error::shape("heatmap width", h, w));
        }
        if let Some(v) = tensor.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Invalid(format!("heatmap value {v} outside (0, 1)")));
        }
        Ok(Self { tensor: tensor.reshape(&[c, h, w])? })
    }

    pub fn classes(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn size(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn get(&self, class: usize, x: usize, y: usize) -> f32 {
        self.tensor.get(&[class, y, x])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Per-cell maximum over classes, rendered as a grayscale image.
    pub fn to_image(&self) -> crate::image::RgbImage {
        let g = self.size();
        let mut img = crate::image::RgbImage::new(g, g);
        for y in 0..g {
            for x in 0..g {
                let v = (0..self.classes()).map(|c| self.get(c, x, y)).fold(0.0f32, f32::max);
                let b = (v * 255.0).round() as u8;
                img.put(x, y, [b, b, b]);
            }
        }
        img
    }
}

/// `sigmoid(conv3x3(bev))` with size-preserving padding.
pub fn compute_heatmap(bev: &BevGrid, spec: &ConvSpec) -> Result<Heatmap> {
    if spec.kernel_size != 3 || spec.padding != 1 || spec.stride != 1 {
        return Err(Error::Invalid("heatmap conv must be 3x3, stride 1, padding 1".into()));
    }
    let mut t = conv2d(bev, spec)?;
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = sigmoid(*v).clamp(f32::MIN_POSITIVE, HEATMAP_MAX));
    Heatmap::from_tensor(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub x: usize,
    pub y: usize,
    pub class: usize,
    pub score: f32,
}

/// Cells whose best class score is strictly above `tau`, sorted by
/// descending score, ties by `(y, x)`; optionally capped at `top_n`.
pub fn select_centers(heatmap: &Heatmap, tau: f32, top_n: Option<usize>) -> Vec<Center> {
    let g = heatmap.size();
    let mut out = Vec::new();
    for y in 0..g {
        for x in 0..g {
            let mut class = 0;
            let mut score = heatmap.get(0, x, y);
            for c in 1..heatmap.classes() {
                let v = heatmap.get(c, x, y);
                if v > score {
                    class = c;
                    score = v;
                }
            }
            if score > tau {
                out.push(Center { x, y, class, score });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.y, a.x).cmp(&(b.y, b.x))));
    if let Some(n) = top_n {
        out.truncate(n);
    }
    out
}

/// A 7×7 BEV patch around one proposal. `unrefined[pos]` is set by the
/// attention stage for patch cells that had no valid reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub center: Center,
    /// `[C, 7, 7]`, zero outside the BEV grid
    pub patch: Tensor,
    pub unrefined: Vec<bool>,
}

impl Roi {
    /// BEV cell `(ix, iy)` of patch position `pos` (row-major in the patch);
    /// may lie outside the grid.
    pub fn cell(&self, pos: usize) -> (isize, isize) {
        let (dy, dx) = ((pos / ROI_SIZE) as isize - ROI_RADIUS, (pos % ROI_SIZE) as isize - ROI_RADIUS);
        (self.center.x as isize + dx, self.center.y as isize + dy)
    }

    pub fn feature(&self, pos: usize) -> Vec<f32> {
        let c = self.patch.dims()[0];
        (0..c).map(|ch| self.patch.data()[ch * ROI_CELLS + pos]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSet {
    pub channels: usize,
    pub rois: Vec<Roi>,
}

impl RoiSet {
    /// Every patch cell of every ROI, ROI-major.
    pub fn cells(&self) -> Vec<(isize, isize)> {
        self.rois.iter().flat_map(|r| (0..ROI_CELLS).map(move |p| r.cell(p))).collect()
    }
}

pub fn expand_roi(bev: &BevGrid, centers: &[Center]) -> Result<RoiSet> {
    let (c, h, w) = bev.chw()?;
    let mut rois = Vec::with_capacity(centers.len());
    for &center in centers {
        if center.x >= w || center.y >= h {
            return Err(Error::Invalid(format!("center ({}, {}) outside {w}x{h} grid", center.x, center.y)));
        }
        let mut patch = Tensor::zeros(&[c, ROI_SIZE, ROI_SIZE]);
        for pos in 0..ROI_CELLS {
            let x = center.x as isize + (pos % ROI_SIZE) as isize - ROI_RADIUS;
            let y = center.y as isize + (pos / ROI_SIZE) as isize - ROI_RADIUS;
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            for ch in 0..c {
                patch.data_mut()[ch * ROI_CELLS + pos] = bev.data()[(ch * h + y as usize) * w + x as usize];
            }
        }
        rois.push(Roi { center, patch, unrefined: vec![false; ROI_CELLS] });
    }
    Ok(RoiSet { channels: c, rois })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub tau: f32,
    pub top_n: Option<usize>,
    pub heights: Vec<f64>,
    /// Add `Mlp(d̃)` to the sampled camera features.
    pub depth_embedding: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            top_n: Some(32),
            heights: default_heights(4),
            depth_embedding: true,
        }
    }
}

/// `count` heights spread uniformly over [-1, 3] m ego-z.
pub fn default_heights(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![1.0];
    }
    (0..count).map(|i| -1.0 + 4.0 * i as f64 / (count - 1) as f64).collect()
}

/// Weights of the full decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDecoder {
    pub heatmap: ConvSpec,
    pub attention: AttnSpec,
    pub depth_mlp: MlpSpec,
    pub heads: RegressionHeads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub heatmap: Heatmap,
    pub detections: DetectionSet,
}

/// Inputs from the current frame's camera branch.
pub struct CameraInputs<'a> {
    pub rig: &'a CameraRig,
    /// per camera, `[C_img, H', W']`
    pub features: &'a [Tensor],
    /// per camera, CRF-modulated
    pub depth: &'a [DepthVolume],
    pub stride: usize,
}

impl ObjectDecoder {
    pub fn decode(&self, bev: &BevGrid, bev_spec: &BevSpec, cams: &CameraInputs<'_>, cfg: &DecoderConfig) -> Result<DecodeOutput> {
        let heatmap = compute_heatmap(bev, &self.heatmap)?;
        let centers = select_centers(&heatmap, cfg.tau, cfg.top_n);
        let rois = expand_roi(bev, &centers)?;
        let refs = lift_references(&rois.cells(), bev_spec, &cfg.heights, cams.rig);
        let embeddings = if cfg.depth_embedding {
            Some(cams.depth.iter().map(|d| depth_embedding(d, &self.depth_mlp)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let refined = spatial_cross_attention(&rois, &refs, cams.features, embeddings.as_deref(), cams.stride, &self.attention)?;
        let detections = regress(&refined, &self.heads, bev_spec)?;
        Ok(DecodeOutput { heatmap, detections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn heatmap_trivial_kernels() {
        let mut rng = Rng::new(1);
        let bev = Tensor::from_fn(&[4, 8, 8], |_| rng.uniform_f32(-1.0, 1.0));
        let h = compute_heatmap(&bev, &ConvSpec::zeros(4, 3, 3, 1, 1)).unwrap();
        assert!(h.tensor().data().iter().all(|&v| v == 0.5));
        assert_eq!(h.tensor().dims(), &[3, 8, 8]);

        let mut neg = ConvSpec::zeros(4, 2, 3, 1, 1);
        neg.bias = Tensor::full(&[2], -20.0);
        let h = compute_heatmap(&bev, &neg).unwrap();
        assert!(h.tensor().data().iter().all(|&v| v < 1e-8 && v > 0.0));

        let mut pos = ConvSpec::zeros(4, 1, 3, 1, 1);
        pos.bias = Tensor::full(&[1], 50.0);
        let h = compute_heatmap(&bev, &pos).unwrap();
        assert!(h.tensor().data().iter().all(|&v| v < 1.0));

        assert!(compute_heatmap(&bev, &ConvSpec::zeros(3, 2, 3, 1, 1)).is_err());
    }

    #[test]
    fn heatmap_matches_conv_then_sigmoid() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let bev = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform_f32(-2.0, 2.0));
            let spec = ConvSpec::random(3, 2, 3, 1, 1, &mut rng);
            let h = compute_heatmap(&bev, &spec).unwrap();
            let logits = conv2d(&bev, &spec).unwrap();
            for (got, z) in h.tensor().data().iter().zip(logits.data()) {
                let want = 1.0 / (1.0 + (-(*z as f64)).exp());
                assert!((*got as f64 - want).abs() <= 1e-6);
            }
        }
    }

    fn map_from(values: &[(usize, usize, f32)], g: usize) -> Heatmap {
        let mut t = Tensor::full(&[1, g, g], 0.01);
        for &(x, y, v) in values {
            t.set(&[0, y, x], v);
        }
        Heatmap::from_tensor(t).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let h = map_from(&[(1, 1, 0.05), (2, 2, 0.1), (3, 3, 0.2)], 8);
        let c = select_centers(&h, 0.1, None);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].x, c[0].y), (3, 3));
        assert!(select_centers(&map_from(&[], 8), 0.1, None).is_empty());
    }

    #[test]
    fn uniform_ties_break_by_row_then_column() {
        let h = Heatmap::from_tensor(Tensor::full(&[2, 8, 8], 0.5)).unwrap();
        let c = select_centers(&h, 0.1, Some(10));
        assert_eq!(c.len(), 10);
        let cells: Vec<_> = c.iter().map(|c| (c.x, c.y, c.class)).collect();
        let want: Vec<_> = (0..10).map(|i| (i % 8, i / 8, 0)).collect();
        assert_eq!(cells, want);
    }

    #[test]
    fn class_is_argmax() {
        let mut t = Tensor::full(&[3, 8, 8], 0.01);
        t.set(&[2, 4, 5], 0.9);
        t.set(&[1, 4, 5], 0.4);
        let c = select_centers(&Heatmap::from_tensor(t).unwrap(), 0.1, None);
        assert_eq!(c, vec![Center { x: 5, y: 4, class: 2, score: 0.9 }]);
    }

    #[test]
    fn roi_padding_and_interior() {
        let bev = Tensor::from_fn(&[2, 32, 32], |i| i as f32 + 1.0);
        let corner = Center { x: 0, y: 0, class: 0, score: 0.5 };
        let inner = Center { x: 10, y: 12, class: 0, score: 0.5 };
        let rois = expand_roi(&bev, &[corner, inner]).unwrap();
        let p = &rois.rois[0].patch;
        for ch in 0..2 {
            for py in 0..7 {
                for px in 0..7 {
                    let v = p.get(&[ch, py, px]);
                    if py < 3 || px < 3 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, bev.get(&[ch, py - 3, px - 3]));
                    }
                }
            }
        }
        let p = &rois.rois[1].patch;
        for py in 0..7 {
            for px in 0..7 {
                assert_eq!(p.get(&[1, py, px]), bev.get(&[1, 12 + py - 3, 10 + px - 3]));
            }
        }
        let ones = expand_roi(&Tensor::full(&[1, 32, 32], 1.0), &[inner]).unwrap();
        assert_eq!(ones.rois[0].patch.data().iter().sum::<f32>(), 49.0);
        assert!(expand_roi(&bev, &[Center { x: 32, y: 0, class: 0, score: 0.5 }]).is_err());
        assert_eq!(rois.rois[1].cell(0), (7, 9));
        assert_eq!(rois.rois[1].cell(24), (10, 12));
    }

    #[test]
    fn heights_cover_default_span() {
        assert_eq!(default_heights(4).first(), Some(&-1.0));
        assert_eq!(default_heights(4).last(), Some(&3.0));
    }
}
