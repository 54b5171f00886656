//! Sparse depth labels from range points and the feature-map coverage they
//! give.

use nalgebra::Vector3;

use crate::camera::CameraModel;
use crate::depth_crf::DepthBins;

/// Per feature cell, the depth bin of the nearest projected point.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLabels {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Option<usize>>,
    /// depth of the winning point; `f64::INFINITY` where unlabeled
    pub depth: Vec<f64>,
}

impl DepthLabels {
    pub fn labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Labeled cells over total cells.
    pub fn coverage(&self) -> f64 {
        self.labeled() as f64 / self.labels.len() as f64
    }
}

/// Projects `points` (ego frame) into a `height × width` feature map at
/// `stride`. Points behind the camera, outside the image or outside the
/// bin range are dropped; the nearest point wins each cell.
pub fn project_depth_labels(
    points: &[[f32; 3]],
    cam: &CameraModel,
    height: usize,
    width: usize,
    stride: usize,
    bins: &DepthBins,
) -> DepthLabels {
    let mut out = DepthLabels {
        height,
        width,
        labels: vec![None; height * width],
        depth: vec![f64::INFINITY; height * width],
    };
    let (img_w, img_h) = ((width * stride) as f64, (height * stride) as f64);
    for p in points {
        let Some(proj) = cam.project(&Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)) else {
            continue;
        };
        if !(0.0..img_w).contains(&proj.x) || !(0.0..img_h).contains(&proj.y) {
            continue;
        }
        let Some(bin) = bins.nearest(proj.depth) else {
            continue;
        };
        let cell = (proj.y / stride as f64) as usize * width + (proj.x / stride as f64) as usize;
        if proj.depth < out.depth[cell] {
            out.depth[cell] = proj.depth;
            out.labels[cell] = Some(bin);
        }
    }
    out
}

/// Coverage over all cameras of a rig: labeled cells over total cells.
pub fn rig_coverage(
    points: &[[f32; 3]],
    cams: &[CameraModel],
    height: usize,
    width: usize,
    stride: usize,
    bins: &DepthBins,
) -> f64 {
    let labeled: usize = cams
        .iter()
        .map(|c| project_depth_labels(points, c, height, width, stride, bins).labeled())
        .sum();
    labeled as f64 / (cams.len() * height * width) as f64
}
