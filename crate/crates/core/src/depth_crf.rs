//! CRF modulation of per-pixel depth distributions.
//!
//! Pixels of a stride-`n` feature map are coupled by a Gaussian affinity on
//! their patch-mean colors (and optionally their positions); the label
//! compatibility between two depth bins is the metric distance between the
//! bin centers. Inference is synchronous (Jacobi) mean field: every update
//! reads only the previous iterate.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{label_color, RgbImage};
use crate::nn::softmax_f64_in_place;
use crate::tensor::Tensor;

/// Added inside the log when turning probabilities into unary costs.
pub const UNARY_EPS: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 100;
pub const MAX_WINDOW_RADIUS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    centers: Vec<f64>,
    min: f64,
    max: f64,
}

impl DepthBins {
    pub fn new(centers: Vec<f64>, min: f64, max: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::Invalid(format!("need at least 2 depth bins, got {}", centers.len())));
        }
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Invalid(format!("bad depth range [{min}, {max}]")));
        }
        if centers.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::Invalid("depth bin centers must be strictly increasing".into()));
        }
        if centers.iter().any(|&c| c < min || c > max) {
            return Err(Error::Invalid("depth bin center outside range".into()));
        }
        Ok(Self { centers, min, max })
    }

    /// `count` equal-width bins over `[min, max]`, centered in each interval.
    pub fn uniform(count: usize, min: f64, max: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::Invalid(format!("need at least 2 depth bins, got {count}")));
        }
        let step = (max - min) / count as f64;
        Self::new((0..count).map(|i| min + (i as f64 + 0.5) * step).collect(), min, max)
    }

    /// 8 bins over [1, 9] m.
    pub fn desk() -> Self {
        Self::uniform(8, 1.0, 9.0).unwrap()
    }

    /// 59 one-meter bins over [1, 60] m.
    pub fn full() -> Self {
        Self::uniform(59, 1.0, 60.0).unwrap()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn range(&self) -> (f64, f64) {
        (self.min, self.max)
    }

    /// Index of the closest center; `None` outside `[min, max]`.
    pub fn nearest(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.min && depth <= self.max) {
            return None;
        }
        let mut best = 0;
        for (i, c) in self.centers.iter().enumerate() {
            if (c - depth).abs() < (self.centers[best] - depth).abs() {
                best = i;
            }
        }
        Some(best)
    }
}

/// Per-pixel categorical distributions over depth bins for one camera,
/// stored pixel-major: `probs[(y * width + x) * bins + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthVolume {
    pub camera: usize,
    height: usize,
    width: usize,
    bins: usize,
    probs: Vec<f64>,
}

impl DepthVolume {
    pub fn new(camera: usize, height: usize, width: usize, bins: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * bins {
            return Err(Error::shape("depth volume length", height * width * bins, probs.len()));
        }
        for (p, dist) in probs.chunks_exact(bins).enumerate() {
            let sum: f64 = dist.iter().sum();
            if dist.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("pixel {p} is not a probability distribution (sum {sum})")));
            }
        }
        Ok(Self { camera, height, width, bins, probs })
    }

    pub fn uniform(height: usize, width: usize, bins: usize) -> Self {
        Self {
            camera: 0,
            height,
            width,
            bins,
            probs: vec![1.0 / bins as f64; height * width * bins],
        }
    }

    /// Softmax over the bin axis of a `[K, H, W]` logit tensor.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (k, h, w) = logits.chw()?;
        let x = logits.data();
        let mut probs = vec![0.0; k * h * w];
        for (p, dist) in probs.chunks_exact_mut(k).enumerate() {
            for (b, slot) in dist.iter_mut().enumerate() {
                *slot = x[b * h * w + p] as f64;
            }
            softmax_f64_in_place(dist);
        }
        Ok(Self { camera: 0, height: h, width: w, bins: k, probs })
    }

    pub fn with_camera(mut self, camera: usize) -> Self {
        self.camera = camera;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.probs[p * self.bins..(p + 1) * self.bins]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn max_abs_diff(&self, other: &DepthVolume) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Unary costs `-ln(p + eps)`.
    pub fn unary(&self) -> Unary {
        Unary {
            bins: self.bins,
            costs: self.probs.iter().map(|p| -(p + UNARY_EPS).ln()).collect(),
        }
    }
}

/// Per-pixel, per-bin unary costs, pixel-major like [`DepthVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Unary {
    bins: usize,
    costs: Vec<f64>,
}

impl Unary {
    pub fn new(pixels: usize, bins: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != pixels * bins {
            return Err(Error::shape("unary length", pixels * bins, costs.len()));
        }
        Ok(Self { bins, costs })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn pixels(&self) -> usize {
        self.costs.len() / self.bins
    }

    pub fn cost(&self, pixel: usize, label: usize) -> f64 {
        self.costs[pixel * self.bins + label]
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.costs[p * self.bins..(p + 1) * self.bins]
    }
}

/// Patch-mean colors in `[0, 1]`, one per feature-map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchColorMap {
    height: usize,
    width: usize,
    colors: Vec<[f64; 3]>,
}

impl PatchColorMap {
    pub fn new(height: usize, width: usize, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != height * width {
            return Err(Error::shape("color map length", height * width, colors.len()));
        }
        Ok(Self { height, width, colors })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }
}

/// Averages each `stride × stride` patch of the image.
pub fn patch_colors(image: &RgbImage, stride: usize) -> Result<PatchColorMap> {
    if stride == 0 || image.width % stride != 0 || image.height % stride != 0 {
        return Err(Error::Invalid(format!(
            "image {}x{} is not divisible by stride {stride}; crop it to a multiple of the stride first",
            image.width, image.height
        )));
    }
    let (h, w) = (image.height / stride, image.width / stride);
    let norm = 1.0 / (255.0 * (stride * stride) as f64);
    let mut colors = Vec::with_capacity(h * w);
    for cy in 0..h {
        for cx in 0..w {
            let mut sum = [0u32; 3];
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    let px = image.get(x, y);
                    for c in 0..3 {
                        sum[c] += px[c] as u32;
                    }
                }
            }
            colors.push(sum.map(|s| s as f64 * norm));
        }
    }
    PatchColorMap::new(h, w, colors)
}

/// Label compatibility: metric distance between bin centers.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatMatrix {
    k: usize,
    data: Vec<f64>,
}

impl CompatMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.k + b]
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.data[a * self.k..(a + 1) * self.k]
    }
}

pub fn build_compat(bins: &DepthBins) -> CompatMatrix {
    let c = bins.centers();
    let k = c.len();
    let mut data = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            data[a * k + b] = (c[a] - c[b]).abs();
        }
    }
    CompatMatrix { k, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Distance between patch-mean RGB colors.
    Appearance,
    /// Distance between feature-map pixel coordinates.
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfKernel {
    pub weight: f64,
    pub bandwidth: f64,
    pub kind: KernelKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub kernels: Vec<CrfKernel>,
    pub iterations: usize,
    /// Chebyshev interaction radius in pixels; 0 couples every pair.
    pub window_radius: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            kernels: vec![
                CrfKernel { weight: 1.0, bandwidth: 0.1, kind: KernelKind::Appearance },
                CrfKernel { weight: 0.3, bandwidth: 3.0, kind: KernelKind::Spatial },
            ],
            iterations: 5,
            window_radius: 0,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("crf needs at least one kernel".into()));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if !(k.weight >= 0.0) || !k.weight.is_finite() {
                return Err(Error::Config(format!("crf kernel {i}: weight must be >= 0, got {}", k.weight)));
            }
            if !(k.bandwidth > 0.0) || !k.bandwidth.is_finite() {
                return Err(Error::Config(format!("crf kernel {i}: bandwidth must be > 0, got {}", k.bandwidth)));
            }
        }
        if self.iterations > MAX_ITERATIONS {
            return Err(Error::Config(format!("crf iterations {} exceed {MAX_ITERATIONS}", self.iterations)));
        }
        if self.window_radius > MAX_WINDOW_RADIUS {
            return Err(Error::Config(format!("crf window radius {} exceeds {MAX_WINDOW_RADIUS}", self.window_radius)));
        }
        Ok(())
    }

    /// Same kernels with every weight set to zero.
    pub fn decoupled(&self) -> Self {
        let mut p = self.clone();
        p.kernels.iter_mut().for_each(|k| k.weight = 0.0);
        p
    }
}

/// Pairwise affinity `a(i, j) = Σ w · exp(-dist² / 2θ²)`; zero outside the
/// interaction window.
#[derive(Debug, Clone)]
pub struct Affinity<'a> {
    colors: &'a PatchColorMap,
    /// `(weight, 1 / 2θ², kind)`
    kernels: Vec<(f64, f64, KernelKind)>,
    radius: usize,
}

impl Affinity<'_> {
    pub fn pixels(&self) -> usize {
        self.colors.colors.len()
    }

    pub fn height(&self) -> usize {
        self.colors.height
    }

    pub fn width(&self) -> usize {
        self.colors.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn in_window(&self, i: usize, j: usize) -> bool {
        if self.radius == 0 {
            return true;
        }
        let w = self.colors.width;
        let (xi, yi) = (i % w, i / w);
        let (xj, yj) = (j % w, j / w);
        xi.abs_diff(xj) <= self.radius && yi.abs_diff(yj) <= self.radius
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if !self.in_window(i, j) {
            return 0.0;
        }
        let w = self.colors.width;
        let (ci, cj) = (self.colors.colors[i], self.colors.colors[j]);
        let color_d2: f64 = (0..3).map(|c| (ci[c] - cj[c]).powi(2)).sum();
        let dx = (i % w) as f64 - (j % w) as f64;
        let dy = (i / w) as f64 - (j / w) as f64;
        let space_d2 = dx * dx + dy * dy;
        self.kernels
            .iter()
            .map(|&(weight, inv, kind)| {
                let d2 = match kind {
                    KernelKind::Appearance => color_d2,
                    KernelKind::Spatial => space_d2,
                };
                weight * (-d2 * inv).exp()
            })
            .sum()
    }

    /// Pixels `j != i` that may couple with `i`, in ascending index order.
    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (w, h) = (self.colors.width, self.colors.height);
        let (x_rng, y_rng) = if self.radius == 0 {
            (0..w, 0..h)
        } else {
            let (x, y) = (i % w, i / w);
            (
                x.saturating_sub(self.radius)..(x + self.radius + 1).min(w),
                y.saturating_sub(self.radius)..(y + self.radius + 1).min(h),
            )
        };
        y_rng
            .flat_map(move |y| x_rng.clone().map(move |x| y * w + x))
            .filter(move |&j| j != i)
    }
}

pub fn pairwise_affinity<'a>(colors: &'a PatchColorMap, params: &CrfParams) -> Affinity<'a> {
    Affinity {
        colors,
        kernels: params
            .kernels
            .iter()
            .map(|k| (k.weight, 1.0 / (2.0 * k.bandwidth * k.bandwidth), k.kind))
            .collect(),
        radius: params.window_radius,
    }
}

/// `E = Σ_i ψ_u(x_i) + Σ_{i≠j} a(i,j)·compat(x_i, x_j)`, summing the
/// pairwise term over ordered pairs (each unordered pair counts twice).
pub fn crf_energy(labels: &[usize], unary: &Unary, affinity: &Affinity<'_>, compat: &CompatMatrix) -> Result<f64> {
    let n = unary.pixels();
    if labels.len() != n {
        return Err(Error::shape("label count", n, labels.len()));
    }
    if affinity.pixels() != n {
        return Err(Error::shape("affinity pixels", n, affinity.pixels()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= unary.bins()) {
        return Err(Error::Invalid(format!("label {l} at pixel {i} out of range 0..{}", unary.bins())));
    }
    let mut energy: f64 = labels.iter().enumerate().map(|(i, &l)| unary.cost(i, l)).sum();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                energy += affinity.get(i, j) * compat.get(labels[i], labels[j]);
            }
        }
    }
    Ok(energy)
}

/// One synchronous mean-field update:
/// `Q'_i(a) ∝ exp(-ψ_u(i,a) - Σ_{j≠i} a(i,j) Σ_b compat(a,b)·Q_j(b))`.
///
/// Messages are aggregated per pixel first (`Σ_j a(i,j) Q_j`) and then
/// multiplied by the compatibility matrix, which is O(N²K + NK²) instead
/// of the literal O(N²K²).
pub fn mean_field_step(q: &DepthVolume, unary: &Unary, affinity: &Affinity<'_>, compat: &CompatMatrix) -> DepthVolume {
    let k = q.bins;
    let n = q.pixels();
    assert_eq!(unary.pixels(), n, "unary pixel count");
    assert_eq!(affinity.pixels(), n, "affinity pixel count");
    assert_eq!(compat.len(), k, "compat size");

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut message = vec![0.0; k];
            for j in affinity.neighbors(i) {
                let a = affinity.get(i, j);
                if a == 0.0 {
                    continue;
                }
                for (m, qj) in message.iter_mut().zip(q.pixel(j)) {
                    *m += a * qj;
                }
            }
            let mut logits: Vec<f64> = (0..k)
                .map(|label| {
                    let penalty: f64 = compat.row(label).iter().zip(&message).map(|(c, m)| c * m).sum();
                    -unary.cost(i, label) - penalty
                })
                .collect();
            softmax_f64_in_place(&mut logits);
            logits
        })
        .collect();

    DepthVolume {
        camera: q.camera,
        height: q.height,
        width: q.width,
        bins: k,
        probs: rows.concat(),
    }
}

/// Softmax over `[K, H', W']` logits followed by `params.iterations`
/// mean-field steps with unary `-ln softmax(logits)`.
pub fn modulate(logits: &Tensor, colors: &PatchColorMap, bins: &DepthBins, params: &CrfParams) -> Result<DepthVolume> {
    params.validate()?;
    let (k, h, w) = logits.chw()?;
    if k != bins.len() {
        return Err(Error::shape("depth logits bins", bins.len(), k));
    }
    if h != colors.height {
        return Err(Error::shape("depth logits height", colors.height, h));
    }
    if w != colors.width {
        return Err(Error::shape("depth logits width", colors.width, w));
    }
    let initial = DepthVolume::from_logits(logits)?;
    if params.iterations == 0 {
        return Ok(initial);
    }
    let unary = initial.unary();
    let affinity = pairwise_affinity(colors, params);
    let compat = build_compat(bins);
    let mut q = initial;
    for _ in 0..params.iterations {
        q = mean_field_step(&q, &unary, &affinity, &compat);
    }
    Ok(q)
}

/// Per-pixel argmax label raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelRaster {
    pub fn to_image(&self, label_count: usize) -> RgbImage {
        let mut img = RgbImage::new(self.width, self.height);
        for (p, &l) in self.labels.iter().enumerate() {
            img.put(p % self.width, p / self.width, label_color(l, label_count));
        }
        img
    }
}

/// Argmax over bins; ties go to the lower bin index.
pub fn map_labeling(q: &DepthVolume) -> LabelRaster {
    let labels = q
        .probs
        .chunks_exact(q.bins)
        .map(|dist| {
            let mut best = 0;
            for (b, &v) in dist.iter().enumerate().skip(1) {
                if v > dist[best] {
                    best = b;
                }
            }
            best
        })
        .collect();
    LabelRaster {
        height: q.height,
        width: q.width,
        labels,
    }
}

/// Mean L1 distance between the distributions of every unordered pair of
/// pixels sharing a region id, averaged over pairs of all regions.
pub fn region_spread(q: &DepthVolume, regions: &[usize]) -> f64 {
    assert_eq!(regions.len(), q.pixels());
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            if regions[i] == regions[j] {
                total += q.pixel(i).iter().zip(q.pixel(j)).map(|(a, b)| (a - b).abs()).sum::<f64>();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
