use nalgebra::Vector3;

use super::{RoiSet, ROI_CELLS};
use crate::camera::{image_to_feature, CameraRig, Projection};
use crate::depth_crf::DepthVolume;
use crate::error::{Error, Result};
use crate::nn::{bilinear_into, Dense, MlpSpec};
use crate::tensor::Tensor;
use crate::view_transform::BevSpec;

/// Reference points of a list of BEV cells: each cell center lifted to
/// every height and projected into every camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RefPointSet {
    pub heights: Vec<f64>,
    pub cameras: usize,
    /// `[cell][height]`
    pub points: Vec<Vector3<f64>>,
    /// `[cell][height][camera]`; `None` behind the camera or outside the image
    pub views: Vec<Option<Projection>>,
}

impl RefPointSet {
    pub fn cells(&self) -> usize {
        self.points.len() / self.heights.len().max(1)
    }

    pub fn point(&self, cell: usize, height: usize) -> &Vector3<f64> {
        &self.points[cell * self.heights.len() + height]
    }

    pub fn view(&self, cell: usize, height: usize, camera: usize) -> Option<&Projection> {
        self.views[(cell * self.heights.len() + height) * self.cameras + camera].as_ref()
    }
}

pub fn lift_references(cells: &[(isize, isize)], spec: &BevSpec, heights: &[f64], rig: &CameraRig) -> RefPointSet {
    let (w, h) = (rig.image_width as f64, rig.image_height as f64);
    let mut points = Vec::with_capacity(cells.len() * heights.len());
    let mut views = Vec::with_capacity(points.capacity() * rig.len());
    for &(ix, iy) in cells {
        let (x, y) = spec.cell_center(ix, iy);
        for &z in heights {
            let p = Vector3::new(x, y, z);
            for cam in &rig.cameras {
                views.push(
                    cam.project(&p)
                        .filter(|q| q.x >= 0.0 && q.y >= 0.0 && q.x < w && q.y < h),
                );
            }
            points.push(p);
        }
    }
    RefPointSet { heights: heights.to_vec(), cameras: rig.len(), points, views }
}

/// Per-pixel MLP over the depth distribution, giving a `[C, H', W']`
/// embedding that is added to the camera features before sampling.
pub fn depth_embedding(depth: &DepthVolume, mlp: &MlpSpec) -> Result<Tensor> {
    if mlp.input_width() != depth.bins() {
        return Err(Error::shape("depth mlp input width", depth.bins(), mlp.input_width()));
    }
    let (h, w, c) = (depth.height(), depth.width(), mlp.output_width());
    let mut out = vec![0.0f32; c * h * w];
    let mut row = vec![0.0f32; depth.bins()];
    for p in 0..h * w {
        for (slot, &v) in row.iter_mut().zip(depth.pixel(p)) {
            *slot = v as f32;
        }
        for (ch, v) in mlp.forward_row(&row).into_iter().enumerate() {
            out[ch * h * w + p] = v;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Deformable spatial cross-attention parameters (single head).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    /// `[49, C]`: one learned query per relative ROI position
    pub queries: Tensor,
    /// sampling points per reference point
    pub points: usize,
    /// `C → heights · points · 2`, offsets in feature-map pixels (x, y)
    pub offset_proj: Dense,
    /// `C → heights · points`, softmax over the points of each height
    pub weight_proj: Dense,
    /// `C_img → C`
    pub value_proj: Dense,
    /// `C → C`
    pub output_proj: Dense,
}

impl AttnSpec {
    pub fn embed_width(&self) -> usize {
        self.queries.dims()[1]
    }

    pub fn validate(&self, heights: usize, feat_channels: usize) -> Result<()> {
        let c = self.embed_width();
        self.queries.expect_dims(&[ROI_CELLS, c])?;
        let check = |name: &str, d: &Dense, inputs: usize, outputs: usize| -> Result<()> {
            if d.inputs() != inputs {
                return Err(Error::shape(format!("{name} input width"), inputs, d.inputs()));
            }
            if d.outputs() != outputs {
                return Err(Error::shape(format!("{name} output width"), outputs, d.outputs()));
            }
            Ok(())
        };
        check("attention offset projection", &self.offset_proj, c, heights * self.points * 2)?;
        check("attention weight projection", &self.weight_proj, c, heights * self.points)?;
        check("attention value projection", &self.value_proj, feat_channels, c)?;
        check("attention output projection", &self.output_proj, c, c)
    }
}

/// Refines every ROI cell in place:
///
/// `out = x + W_o · Σ_cam Σ_height Σ_point A · V(F_cam + E_cam)(ref + Δ)`
///
/// where the query is the cell feature plus its positional query, `A` is
/// softmax-normalized over the points of each height, and `V` is the value
/// projection applied to the (optionally depth-embedded) feature map.
/// Invalid reference points contribute nothing; a cell without any valid
/// reference passes through unchanged and is flagged in `Roi::unrefined`.
pub fn spatial_cross_attention(
    rois: &RoiSet,
    refs: &RefPointSet,
    features: &[Tensor],
    embeddings: Option<&[Tensor]>,
    stride: usize,
    spec: &AttnSpec,
) -> Result<RoiSet> {
    let heights = refs.heights.len();
    let n_cells = rois.rois.len() * ROI_CELLS;
    if refs.cells() != n_cells {
        return Err(Error::shape("reference cells", n_cells, refs.cells()));
    }
    if features.len() != refs.cameras {
        return Err(Error::shape("camera feature maps", refs.cameras, features.len()));
    }
    let c = spec.embed_width();
    if rois.channels != c {
        return Err(Error::shape("roi channels", c, rois.channels));
    }
    let (fc, fh, fw) = features.first().map(|f| f.chw()).transpose()?.unwrap_or((spec.value_proj.inputs(), 1, 1));
    spec.validate(heights, fc)?;

    let value_maps = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.expect_dims(&[fc, fh, fw])?;
            let source = match embeddings {
                Some(e) => {
                    let e = e.get(i).ok_or_else(|| Error::shape("depth embeddings", features.len(), e.len()))?;
                    f.add(e)?
                }
                None => f.clone(),
            };
            project_map(&source, &spec.value_proj)
        })
        .collect::<Result<Vec<_>>>()?;

    let points = spec.points;
    let mut out = rois.clone();
    let mut sample = vec![0.0f32; c];
    let mut offsets = vec![0.0f32; heights * points * 2];
    let mut logits = vec![0.0f32; heights * points];
    let mut acc = vec![0.0f32; c];
    let mut refined = vec![0.0f32; c];

    for (r, roi) in out.rois.iter_mut().enumerate() {
        for pos in 0..ROI_CELLS {
            let cell = r * ROI_CELLS + pos;
            let query: Vec<f32> = roi
                .feature(pos)
                .iter()
                .zip(&spec.queries.data()[pos * c..(pos + 1) * c])
                .map(|(x, q)| x + q)
                .collect();
            spec.offset_proj.forward_row(&query, &mut offsets);
            spec.weight_proj.forward_row(&query, &mut logits);
            for group in logits.chunks_exact_mut(points) {
                softmax_f32(group);
            }

            acc.iter_mut().for_each(|v| *v = 0.0);
            let mut any_valid = false;
            for (cam, map) in value_maps.iter().enumerate() {
                for j in 0..heights {
                    let Some(view) = refs.view(cell, j, cam) else { continue };
                    any_valid = true;
                    let (rx, ry) = (image_to_feature(view.x, stride) as f32, image_to_feature(view.y, stride) as f32);
                    for p in 0..points {
                        let o = (j * points + p) * 2;
                        let (sx, sy) = (rx + offsets[o], ry + offsets[o + 1]);
                        if !bilinear_into(map.data(), fh, fw, sx, sy, &mut sample) {
                            continue;
                        }
                        let a = logits[j * points + p];
                        for (dst, s) in acc.iter_mut().zip(&sample) {
                            *dst += a * s;
                        }
                    }
                }
            }
            if !any_valid {
                roi.unrefined[pos] = true;
                continue;
            }
            spec.output_proj.forward_row(&acc, &mut refined);
            for (ch, delta) in refined.iter().enumerate() {
                roi.patch.data_mut()[ch * ROI_CELLS + pos] += delta;
            }
        }
    }
    Ok(out)
}

/// Applies a dense layer to every pixel of a CHW map.
fn project_map(map: &Tensor, layer: &Dense) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    if c != layer.inputs() {
        return Err(Error::shape("value projection input", layer.inputs(), c));
    }
    let oc = layer.outputs();
    let mut out = vec![0.0f32; oc * h * w];
    let mut px = vec![0.0f32; c];
    let mut proj = vec![0.0f32; oc];
    for p in 0..h * w {
        for (ch, slot) in px.iter_mut().enumerate() {
            *slot = map.data()[ch * h * w + p];
        }
        layer.forward_row(&px, &mut proj);
        for (ch, &v) in proj.iter().enumerate() {
            out[ch * h * w + p] = v;
        }
    }
    Tensor::new(vec![oc, h, w], out)
}

fn softmax_f32(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
