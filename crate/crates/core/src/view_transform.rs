//! Forward projection: lift image features into depth-weighted camera
//! frusta and sum-pool them into an ego-centric BEV grid.
//!
//! BEV rasters are `[C, G, G]` tensors; row `iy` runs along ego +y and
//! column `ix` along ego +x, with cell `(ix, iy)` covering
//! `[-L + ix·s, -L + (ix+1)·s) × [-L + iy·s, -L + (iy+1)·s)`.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::bvnx::{Bundle, Entry, U32Table};
use crate::camera::{feature_to_image, CameraModel};
use crate::depth_crf::{DepthBins, DepthVolume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-frame BEV feature raster, `[C, G, G]`.
pub type BevGrid = Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevSpec {
    pub grid: usize,
    /// half-width `L` of the square extent, meters
    pub extent: f64,
}

impl BevSpec {
    pub fn new(grid: usize, extent: f64) -> Result<Self> {
        if grid < 8 {
            return Err(Error::Config(format!("BEV grid must be at least 8 cells, got {grid}")));
        }
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(Error::Config(format!("BEV extent must be positive, got {extent}")));
        }
        Ok(Self { grid, extent })
    }

    /// 32 × 32 cells over ±8 m.
    pub fn desk() -> Self {
        Self { grid: 32, extent: 8.0 }
    }

    /// 128 × 128 cells over ±51.2 m.
    pub fn full() -> Self {
        Self { grid: 128, extent: 51.2 }
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent / self.grid as f64
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// `(ix, iy)` of the cell containing ego `(x, y)`.
    pub fn cell_coords(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let s = self.cell_size();
        let fx = ((x + self.extent) / s).floor();
        let fy = ((y + self.extent) / s).floor();
        let g = self.grid as f64;
        if fx >= 0.0 && fy >= 0.0 && fx < g && fy < g {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    /// Flat cell id `iy · G + ix`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_coords(x, y).map(|(ix, iy)| iy * self.grid + ix)
    }

    /// Ego `(x, y)` of a cell center; accepts cells outside the grid.
    pub fn cell_center(&self, ix: isize, iy: isize) -> (f64, f64) {
        let s = self.cell_size();
        (-self.extent + (ix as f64 + 0.5) * s, -self.extent + (iy as f64 + 0.5) * s)
    }
}

/// Ego-frame 3-D point of every (feature pixel, depth bin) pair of one
/// camera, pixel-major with the bin innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumGrid {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub points: Vec<Vector3<f64>>,
}

impl FrustumGrid {
    pub fn point(&self, pixel: usize, bin: usize) -> &Vector3<f64> {
        &self.points[pixel * self.bins + bin]
    }
}

pub fn build_frustum(cam: &CameraModel, height: usize, width: usize, stride: usize, bins: &DepthBins) -> FrustumGrid {
    let mut points = Vec::with_capacity(height * width * bins.len());
    for v in 0..height {
        let y = feature_to_image(v as f64, stride);
        for u in 0..width {
            let x = feature_to_image(u as f64, stride);
            for &d in bins.centers() {
                points.push(cam.unproject(x, y, d));
            }
        }
    }
    FrustumGrid { height, width, bins: bins.len(), points }
}

/// Depth-weighted frustum features, `data[(c · H'W' + pixel) · K + bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumFeatures {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl FrustumFeatures {
    pub fn get(&self, c: usize, pixel: usize, bin: usize) -> f32 {
        self.data[(c * self.height * self.width + pixel) * self.bins + bin]
    }
}

/// Outer product of features and depth probabilities:
/// `value(c, u, v, d) = features(c, u, v) · depth(u, v, d)`.
pub fn lift(features: &Tensor, depth: &DepthVolume) -> Result<FrustumFeatures> {
    let (c, h, w) = features.chw()?;
    if h != depth.height() {
        return Err(Error::shape("lift height", depth.height(), h));
    }
    if w != depth.width() {
        return Err(Error::shape("lift width", depth.width(), w));
    }
    let k = depth.bins();
    let f = features.data();
    let mut data = Vec::with_capacity(c * h * w * k);
    for ch in 0..c {
        for p in 0..h * w {
            let value = f[ch * h * w + p];
            data.extend(depth.pixel(p).iter().map(|&prob| value * prob as f32));
        }
    }
    Ok(FrustumFeatures { channels: c, height: h, width: w, bins: k, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PoolEntry {
    pub camera: u32,
    pub pixel: u32,
    pub bin: u32,
}

/// Precomputed scatter plan: entries grouped by BEV cell, with
/// `offsets[cell]..offsets[cell + 1]` delimiting each cell's interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    pub grid: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub offsets: Vec<u32>,
    pub entries: Vec<PoolEntry>,
}

impl PoolIndex {
    pub fn interval(&self, cell: usize) -> &[PoolEntry] {
        &self.entries[self.offsets[cell] as usize..self.offsets[cell + 1] as usize]
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        b.insert(
            "pool.meta".into(),
            Entry::U32(U32Table {
                dims: vec![5],
                data: [self.grid, self.cameras, self.height, self.width, self.bins].map(|v| v as u32).to_vec(),
            }),
        );
        b.insert(
            "pool.offsets".into(),
            Entry::U32(U32Table { dims: vec![self.offsets.len()], data: self.offsets.clone() }),
        );
        b.insert(
            "pool.entries".into(),
            Entry::U32(U32Table {
                dims: vec![self.entries.len().max(1), 3],
                data: if self.entries.is_empty() {
                    vec![u32::MAX; 3]
                } else {
                    self.entries.iter().flat_map(|e| [e.camera, e.pixel, e.bin]).collect()
                },
            }),
        );
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let table = |name: &str| match b.get(name) {
            Some(Entry::U32(t)) => Ok(t),
            _ => Err(Error::MissingWeights(vec![name.to_owned()])),
        };
        let meta = &table("pool.meta")?.data;
        if meta.len() != 5 {
            return Err(Error::shape("pool.meta length", 5, meta.len()));
        }
        let [grid, cameras, height, width, bins] = [0, 1, 2, 3, 4].map(|i| meta[i] as usize);
        let offsets = table("pool.offsets")?.data.clone();
        if offsets.len() != grid * grid + 1 {
            return Err(Error::shape("pool.offsets length", grid * grid + 1, offsets.len()));
        }
        let raw = &table("pool.entries")?.data;
        let total = *offsets.last().unwrap() as usize;
        let entries: Vec<PoolEntry> = if total == 0 {
            Vec::new()
        } else {
            raw.chunks_exact(3).map(|e| PoolEntry { camera: e[0], pixel: e[1], bin: e[2] }).collect()
        };
        if entries.len() != total || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Invalid("pool index offsets inconsistent with entries".into()));
        }
        if entries
            .iter()
            .any(|e| e.camera as usize >= cameras || e.pixel as usize >= height * width || e.bin as usize >= bins)
        {
            return Err(Error::Invalid("pool index entry out of range".into()));
        }
        Ok(Self { grid, cameras, height, width, bins, offsets, entries })
    }
}

/// Buckets every in-bounds frustum point of every camera by BEV cell.
/// Entries are ordered by (cell, camera, pixel, bin).
pub fn precompute_pool_index(frusta: &[FrustumGrid], spec: &BevSpec) -> Result<PoolIndex> {
    let first = frusta
        .first()
        .ok_or_else(|| Error::Invalid("pool index needs at least one camera".into()))?;
    let (h, w, k) = (first.height, first.width, first.bins);
    for f in frusta {
        if (f.height, f.width, f.bins) != (h, w, k) {
            return Err(Error::shape("frustum size", h * w * k, f.height * f.width * f.bins));
        }
    }
    let cells = spec.cells();
    let mut counts = vec![0u32; cells + 1];
    let mut assigned = Vec::with_capacity(frusta.len() * h * w * k);
    for (cam, f) in frusta.iter().enumerate() {
        for (i, p) in f.points.iter().enumerate() {
            if let Some(cell) = spec.cell_of(p.x, p.y) {
                counts[cell + 1] += 1;
                assigned.push((cell, PoolEntry { camera: cam as u32, pixel: (i / k) as u32, bin: (i % k) as u32 }));
            }
        }
    }
    for c in 0..cells {
        counts[c + 1] += counts[c];
    }
    let offsets = counts.clone();
    // stable counting sort keeps (camera, pixel, bin) order inside a cell
    let mut cursor = counts;
    let mut entries = vec![PoolEntry { camera: 0, pixel: 0, bin: 0 }; assigned.len()];
    for (cell, e) in assigned {
        entries[cursor[cell] as usize] = e;
        cursor[cell] += 1;
    }
    Ok(PoolIndex { grid: spec.grid, cameras: frusta.len(), height: h, width: w, bins: k, offsets, entries })
}

/// Sums each cell's interval in index order.
pub fn pool(features: &[FrustumFeatures], index: &PoolIndex, spec: &BevSpec) -> Result<BevGrid> {
    if index.grid != spec.grid {
        return Err(Error::shape("pool index grid", spec.grid, index.grid));
    }
    if features.len() != index.cameras {
        return Err(Error::shape("pool camera count", index.cameras, features.len()));
    }
    let channels = features[0].channels;
    for f in features {
        if f.channels != channels {
            return Err(Error::shape("pool channels", channels, f.channels));
        }
        if (f.height, f.width, f.bins) != (index.height, index.width, index.bins) {
            return Err(Error::shape(
                "pool frustum size (stale index?)",
                index.height * index.width * index.bins,
                f.height * f.width * f.bins,
            ));
        }
    }
    let cells = spec.cells();
    let sums: Vec<Vec<f32>> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let mut acc = vec![0.0f32; channels];
            for e in index.interval(cell) {
                let f = &features[e.camera as usize];
                for (c, slot) in acc.iter_mut().enumerate() {
                    *slot += f.get(c, e.pixel as usize, e.bin as usize);
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0f32; channels * cells];
    for (cell, acc) in sums.iter().enumerate() {
        for (c, &v) in acc.iter().enumerate() {
            out[c * cells + cell] = v;
        }
    }
    Tensor::new(vec![channels, spec.grid, spec.grid], out)
}
