//! Acceptance suite: one PASS/FAIL line per criterion. Every check compares
//! against an oracle written here, independent of the library internals.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use bevnext_core::camera::{feature_to_image, Intrinsics};
use bevnext_core::decoder::{
    depth_embedding, expand_roi, lift_references, select_centers, spatial_cross_attention, AttnSpec, Center, Heatmap,
};
use bevnext_core::depth_crf::{
    build_compat, crf_energy, mean_field_step, modulate, pairwise_affinity, patch_colors, CrfKernel, KernelKind,
    PatchColorMap, Unary,
};
use bevnext_core::harness::{gen_scene, rig_coverage, SceneConfig};
use bevnext_core::nn::{Activation, Dense};
use bevnext_core::res2fusion::{fuse, group_count, partition, receptive_radius, CascadeInput};
use bevnext_core::view_transform::{build_frustum, lift, pool, precompute_pool_index};
use bevnext_core::{
    BevSpec, CameraModel, CameraRig, ConvSpec, CrfParams, DepthBins, DepthVolume, FusionConfig, FusionStack, MlpSpec,
    RgbImage, Rng, Tensor,
};
use nalgebra::{Rotation3, Vector3};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn random_image(w: usize, h: usize, rng: &mut Rng) -> RgbImage {
    let mut img = RgbImage::new(w, h);
    for v in img.data.iter_mut() {
        *v = (rng.next_u64() % 256) as u8;
    }
    img
}

fn random_volume(k: usize, h: usize, w: usize, rng: &mut Rng) -> DepthVolume {
    DepthVolume::from_logits(&Tensor::from_fn(&[k, h, w], |_| rng.uniform_f32(-3.0, 3.0))).unwrap()
}

/// A camera with random intrinsics, yaw, pitch and mounting position.
fn random_camera(img_w: usize, img_h: usize, rng: &mut Rng) -> CameraModel {
    let fx = rng.uniform(20.0, 80.0);
    let intr = Intrinsics {
        fx,
        fy: fx * rng.uniform(0.9, 1.1),
        cx: img_w as f64 / 2.0 + rng.uniform(-2.0, 2.0),
        cy: img_h as f64 / 2.0 + rng.uniform(-2.0, 2.0),
    };
    let pos = Vector3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.5, 2.0));
    let base = CameraModel::looking(intr, rng.uniform(-3.1, 3.1), pos);
    let pitch = Rotation3::from_axis_angle(&Vector3::x_axis(), rng.uniform(-0.3, 0.3));
    CameraModel::new(intr, base.rotation * pitch.matrix(), pos).unwrap()
}

/// Ego point behind image position `(x, y)` at optical depth `d`, written
/// out from the pinhole model.
fn pinhole_unproject(cam: &CameraModel, x: f64, y: f64, d: f64) -> Vector3<f64> {
    let k = &cam.intrinsics;
    cam.rotation * Vector3::new((x - k.cx) / k.fx * d, (y - k.cy) / k.fy * d, d) + cam.translation
}

fn c1_crf_decoupling() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed);
        let k = rng.range_inclusive(2, 8);
        let (h, w) = (rng.range_inclusive(1, 6), rng.range_inclusive(1, 6));
        let stride = [1, 2, 4, 8][rng.range_inclusive(0, 3)];
        let logits = Tensor::from_fn(&[k, h, w], |_| rng.uniform_f32(-4.0, 4.0));
        let colors = patch_colors(&random_image(w * stride, h * stride, &mut rng), stride).unwrap();
        let bins = DepthBins::uniform(k, 1.0, 1.0 + k as f64).unwrap();
        let params = CrfParams { iterations: 5, ..CrfParams::default() }.decoupled();
        let q = modulate(&logits, &colors, &bins, &params).unwrap();
        for p in 0..h * w {
            let z: Vec<f64> = (0..k).map(|b| logits.data()[b * h * w + p] as f64).collect();
            for (a, b) in q.pixel(p).iter().zip(softmax(&z)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 5.0,
        format!("max |diff| {worst:.2e} over 100 pairs (tol 1e-9), {secs:.2} s (budget 5 s)"),
    )
}

/// Literal mean-field update: for every pixel and label, sum over every
/// other pixel and every label of its distribution.
fn naive_step(
    q: &DepthVolume,
    unary: &Unary,
    colors: &PatchColorMap,
    kernels: &[CrfKernel],
    centers: &[f64],
) -> Vec<f64> {
    let (n, k, w) = (q.pixels(), q.bins(), colors.width());
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut z = vec![0.0; k];
        for (a, za) in z.iter_mut().enumerate() {
            let mut e = unary.cost(i, a);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (ci, cj) = (colors.colors()[i], colors.colors()[j]);
                let dc: f64 = (0..3).map(|c| (ci[c] - cj[c]) * (ci[c] - cj[c])).sum();
                let (dx, dy) = ((i % w) as f64 - (j % w) as f64, (i / w) as f64 - (j / w) as f64);
                let ds = dx * dx + dy * dy;
                let aff: f64 = kernels
                    .iter()
                    .map(|kn| {
                        let d2 = if kn.kind == KernelKind::Appearance { dc } else { ds };
                        kn.weight * (-d2 / (2.0 * kn.bandwidth * kn.bandwidth)).exp()
                    })
                    .sum();
                for b in 0..k {
                    e += aff * (centers[a] - centers[b]).abs() * q.pixel(j)[b];
                }
            }
            *za = -e;
        }
        out.extend(softmax(&z));
    }
    out
}

fn c2_crf_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut max_n = 0;
    for seed in 0..50u64 {
        let mut rng = Rng::new(1000 + seed);
        let h = rng.range_inclusive(1, 8);
        let w = rng.range_inclusive(1, 64 / h).min(8);
        let k = rng.range_inclusive(2, 8);
        max_n = max_n.max(h * w);
        let colors = PatchColorMap::new(
            h,
            w,
            (0..h * w)
                .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
                .collect(),
        )
        .unwrap();
        let mut centers = vec![rng.uniform(1.0, 2.0)];
        for _ in 1..k {
            let last = *centers.last().unwrap();
            centers.push(last + rng.uniform(0.2, 2.0));
        }
        let bins = DepthBins::new(centers.clone(), 0.5, centers[k - 1] + 1.0).unwrap();
        let kernels = vec![
            CrfKernel { weight: rng.uniform(0.0, 2.0), bandwidth: rng.uniform(0.05, 0.5), kind: KernelKind::Appearance },
            CrfKernel { weight: rng.uniform(0.0, 1.0), bandwidth: rng.uniform(0.5, 5.0), kind: KernelKind::Spatial },
        ];
        // dense, or a window at least as wide as the grid
        let radius = if seed % 2 == 0 { 0 } else { h.max(w) };
        let params = CrfParams { kernels: kernels.clone(), iterations: 1, window_radius: radius };
        let q = random_volume(k, h, w, &mut rng);
        let unary = random_volume(k, h, w, &mut rng).unary();
        let fast = mean_field_step(&q, &unary, &pairwise_affinity(&colors, &params), &build_compat(&bins));
        let slow = naive_step(&q, &unary, &colors, &kernels, &centers);
        for (a, b) in fast.probs().iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 10.0,
        format!("max |diff| {worst:.2e} on 50 instances, N <= {max_n} (tol 1e-10), {secs:.2} s (budget 10 s)"),
    )
}

fn c3_hand_energy() -> Outcome {
    let unary = Unary::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let colors = PatchColorMap::new(1, 2, vec![[0.4, 0.5, 0.6]; 2]).unwrap();
    let params = CrfParams {
        kernels: vec![CrfKernel { weight: 1.0, bandwidth: 0.1, kind: KernelKind::Appearance }],
        iterations: 5,
        window_radius: 0,
    };
    let compat = build_compat(&DepthBins::new(vec![1.0, 2.0], 0.5, 2.5).unwrap());
    let aff = pairwise_affinity(&colors, &params);
    let e01 = crf_energy(&[0, 1], &unary, &aff, &compat).unwrap();
    let e00 = crf_energy(&[0, 0], &unary, &aff, &compat).unwrap();
    outcome(e01 == 2.0 && e00 == 1.0, format!("E(bin0, bin1) = {e01}, E(bin0, bin0) = {e00} (expected 2.0 and 1.0 exactly)"))
}

fn spread(q: &DepthVolume, region: &[usize]) -> f64 {
    let (mut total, mut pairs) = (0.0, 0);
    for i in 0..region.len() {
        for j in 0..i {
            if region[i] == region[j] {
                total += q.pixel(i).iter().zip(q.pixel(j)).map(|(a, b)| (a - b).abs()).sum::<f64>();
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

fn c4_object_consistency() -> Outcome {
    let mut passed = 0;
    let mut worst_step = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let mut rng = Rng::new(2000 + seed);
        let h = rng.range_inclusive(3, 6);
        let w = 2 * rng.range_inclusive(2, 5);
        let k = rng.range_inclusive(3, 6);
        let stride = 4;
        let mut img = RgbImage::new(w * stride, h * stride);
        for y in 0..h * stride {
            for x in 0..w * stride {
                let base: i32 = if x < w * stride / 2 { 8 } else { 247 };
                let v = (base + (rng.next_u64() % 15) as i32 - 7) as u8;
                img.put(x, y, [v, v, v]);
            }
        }
        let region: Vec<usize> = (0..h * w).map(|p| usize::from(p % w >= w / 2)).collect();
        let hot = rng.range_inclusive(0, h - 1) * w + rng.range_inclusive(0, w / 2 - 1);
        let mut logits = Tensor::from_fn(&[k, h, w], |_| rng.uniform_f32(-0.5, 0.5));
        for p in 0..h * w {
            let bin = if p == hot { 0 } else { 1 };
            logits.data_mut()[bin * h * w + p] += 3.0;
        }
        let colors = patch_colors(&img, stride).unwrap();
        let bins = DepthBins::uniform(k, 1.0, 9.0).unwrap();
        let spreads: Vec<f64> = (0..=5)
            .map(|t| {
                let params = CrfParams { iterations: t, ..CrfParams::default() };
                spread(&modulate(&logits, &colors, &bins, &params).unwrap(), &region)
            })
            .collect();
        let step = spreads.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
        worst_step = worst_step.max(step);
        if step <= 0.0 {
            passed += 1;
        }
    }
    outcome(
        passed == 20,
        format!("spread non-increasing over T = 0..5 in {passed}/20 images (largest step {worst_step:.3e})"),
    )
}

fn c5_lift_splat() -> Outcome {
    let mut worst_pool = 0.0f64;
    let mut worst_mass = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = Rng::new(3000 + seed);
        let cams = rng.range_inclusive(1, 4);
        let (fh, fw, stride) = (rng.range_inclusive(2, 5), rng.range_inclusive(3, 8), 8);
        let k = rng.range_inclusive(2, 6);
        let c = rng.range_inclusive(1, 3);
        let bins = DepthBins::uniform(k, 1.0, rng.uniform(4.0, 12.0)).unwrap();
        let spec = BevSpec::new(rng.range_inclusive(8, 20), rng.uniform(3.0, 10.0)).unwrap();
        let rig: Vec<CameraModel> = (0..cams).map(|_| random_camera(fw * stride, fh * stride, &mut rng)).collect();
        let features: Vec<Tensor> = (0..cams).map(|_| Tensor::from_fn(&[c, fh, fw], |_| rng.uniform_f32(-1.0, 1.0))).collect();
        let depth: Vec<DepthVolume> = (0..cams).map(|_| random_volume(k, fh, fw, &mut rng)).collect();

        let frusta: Vec<_> = rig.iter().map(|cam| build_frustum(cam, fh, fw, stride, &bins)).collect();
        let index = precompute_pool_index(&frusta, &spec).unwrap();
        let lifted: Vec<_> = features.iter().zip(&depth).map(|(f, d)| lift(f, d).unwrap()).collect();
        let bev = pool(&lifted, &index, &spec).unwrap();

        let g = spec.grid;
        let s = 2.0 * spec.extent / g as f64;
        let mut oracle = vec![0.0f64; c * g * g];
        let mut scale = vec![0.0f64; c * g * g];
        let mut mass = vec![0.0f64; c];
        let mut mass_scale = vec![0.0f64; c];
        for (cam, model) in rig.iter().enumerate() {
            for v in 0..fh {
                for u in 0..fw {
                    for (b, &d) in bins.centers().iter().enumerate() {
                        let x = (u as f64 + 0.5) * stride as f64;
                        let y = (v as f64 + 0.5) * stride as f64;
                        let p = pinhole_unproject(model, x, y, d);
                        let ix = ((p.x + spec.extent) / s).floor();
                        let iy = ((p.y + spec.extent) / s).floor();
                        if ix < 0.0 || iy < 0.0 || ix >= g as f64 || iy >= g as f64 {
                            continue;
                        }
                        let cell = iy as usize * g + ix as usize;
                        for ch in 0..c {
                            let val = features[cam].data()[(ch * fh + v) * fw + u] as f64
                                * (depth[cam].pixel(v * fw + u)[b] as f32) as f64;
                            oracle[ch * g * g + cell] += val;
                            scale[ch * g * g + cell] += val.abs();
                            mass[ch] += val;
                            mass_scale[ch] += val.abs();
                        }
                    }
                }
            }
        }
        for (i, &o) in oracle.iter().enumerate() {
            worst_pool = worst_pool.max((bev.data()[i] as f64 - o).abs() / scale[i].max(1.0));
        }
        for ch in 0..c {
            let pooled: f64 = bev.data()[ch * g * g..(ch + 1) * g * g].iter().map(|&v| v as f64).sum();
            worst_mass = worst_mass.max((pooled - mass[ch]).abs() / mass_scale[ch].max(1e-12));
        }
    }
    outcome(
        worst_mass <= 1e-5 && worst_pool <= 1e-6,
        format!("mass rel err {worst_mass:.2e} (tol 1e-5), index vs scatter {worst_pool:.2e} (tol 1e-6), 50 rigs"),
    )
}

fn c6_projection() -> Outcome {
    let mut rng = Rng::new(4000);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    while checked < 10_000 {
        let (fh, fw, stride) = (rng.range_inclusive(2, 6), rng.range_inclusive(2, 8), 8);
        let cam = random_camera(fw * stride, fh * stride, &mut rng);
        let k = rng.range_inclusive(2, 8);
        let bins = DepthBins::uniform(k, rng.uniform(0.5, 2.0), rng.uniform(10.0, 60.0)).unwrap();
        let frustum = build_frustum(&cam, fh, fw, stride, &bins);
        for v in 0..fh {
            for u in 0..fw {
                for (b, &d) in bins.centers().iter().enumerate() {
                    let proj = cam.project(frustum.point(v * fw + u, b)).unwrap();
                    let err = (proj.x - feature_to_image(u as f64, stride))
                        .abs()
                        .max((proj.y - feature_to_image(v as f64, stride)).abs())
                        .max((proj.depth - d).abs());
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
    }
    let (mut relifted, mut worst_ref) = (0usize, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = Rng::new(4100 + seed);
        let rig = CameraRig::surround(
            rng.range_inclusive(1, 6),
            8 * rng.range_inclusive(4, 22),
            8 * rng.range_inclusive(2, 8),
            rng.uniform(0.8, 2.0),
            rng.uniform(1.0, 2.0),
            rng.uniform(0.0, 1.0),
        );
        let spec = BevSpec::new(rng.range_inclusive(8, 32), rng.uniform(4.0, 20.0)).unwrap();
        let g = spec.grid as isize;
        let cells: Vec<(isize, isize)> = (0..40)
            .map(|_| (rng.range_inclusive(0, (g + 4) as usize) as isize - 2, rng.range_inclusive(0, (g + 4) as usize) as isize - 2))
            .collect();
        let heights = [-1.0, 0.0, 1.5, 3.0];
        let refs = lift_references(&cells, &spec, &heights, &rig);
        for cell in 0..cells.len() {
            for hgt in 0..heights.len() {
                for (ci, cam) in rig.cameras.iter().enumerate() {
                    if let Some(view) = refs.view(cell, hgt, ci) {
                        let back = pinhole_unproject(cam, view.x, view.y, view.depth);
                        worst_ref = worst_ref.max((back - refs.point(cell, hgt)).abs().max());
                        relifted += 1;
                    }
                }
            }
        }
    }
    outcome(
        worst <= 1e-5 && worst_ref <= 1e-5 && relifted > 0,
        format!("frustum round trip {worst:.2e} over {checked} points, reference re-lift {worst_ref:.2e} over {relifted} views (tol 1e-5)"),
    )
}

fn positive_conv(inp: usize, out: usize, k: usize, rng: &mut Rng) -> ConvSpec {
    let w = Tensor::from_fn(&[out, inp, k, k], |_| rng.uniform_f32(0.1, 1.0));
    ConvSpec::new(w, Tensor::zeros(&[out]), 1, k / 2).unwrap()
}

fn support_radius(t: &Tensor, cx: usize, cy: usize) -> Option<usize> {
    let (c, h, w) = t.chw().unwrap();
    let mut r: Option<usize> = None;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if t.get(&[ch, y, x]) != 0.0 {
                    let d = x.abs_diff(cx).max(y.abs_diff(cy));
                    r = Some(r.map_or(d, |m| m.max(d)));
                }
            }
        }
    }
    r
}

fn c7_res2fusion() -> Outcome {
    let mut count_ok = true;
    for k in 1..=16 {
        for w in 1..=k {
            let mut expected = 0;
            while expected * w < k {
                expected += 1;
            }
            let stack = FusionStack::new((0..k).map(|_| Tensor::zeros(&[1, 8, 8])).collect()).unwrap();
            count_ok &= group_count(k, w) == expected && partition(&stack, w).unwrap().len() == expected;
        }
    }

    let frames: Vec<Tensor> = (1..=9).map(|i| Tensor::full(&[1, 8, 8], i as f32)).collect();
    let groups = partition(&FusionStack::new(frames).unwrap(), 3).unwrap();
    let members: Vec<BTreeSet<i32>> = groups
        .iter()
        .map(|g| (0..3).map(|slot| g.get(&[slot, 0, 0]) as i32).collect())
        .collect();
    let expected_members: Vec<BTreeSet<i32>> = vec![[7, 8, 9].into(), [4, 5, 6].into(), [1, 2, 3].into()];
    let k9_ok = groups.len() == 3 && members == expected_members;

    let mut radii_ok = true;
    let mut checked = 0;
    for (k, w) in [(9, 3), (8, 3), (6, 2), (16, 4), (5, 5), (7, 1), (4, 3)] {
        for input in [CascadeInput::Convolved, CascadeInput::Reduced] {
            for age in 0..k {
                let mut rng = Rng::new((k * 1000 + w * 10 + age) as u64);
                let g = group_count(k, w);
                let (c, s) = (2, 17);
                let mut frames: Vec<Tensor> = (0..k).map(|_| Tensor::zeros(&[c, s, s])).collect();
                frames[k - 1 - age].set(&[0, 8, 8], 1.0);
                let cfg = FusionConfig {
                    window: w,
                    reduce: (0..g).map(|_| positive_conv(w * c, 2, 1, &mut rng)).collect(),
                    cascade: (1..g).map(|_| positive_conv(2, 2, 3, &mut rng)).collect(),
                    final_conv: positive_conv(g * 2, 2, 1, &mut rng),
                    cascade_input: input,
                };
                let out = fuse(&FusionStack::new(frames).unwrap(), &cfg).unwrap();
                // a group passes one 3x3 stage per older cascade level it feeds through
                let j = age / w;
                let expected = match (j, input) {
                    (0, _) => 0,
                    (j, CascadeInput::Convolved) => j,
                    (_, CascadeInput::Reduced) => 1,
                };
                radii_ok &= support_radius(&out, 8, 8) == Some(expected) && receptive_radius(j, g, input) == expected;
                checked += 1;
            }
        }
    }
    outcome(
        count_ok && k9_ok && radii_ok,
        format!("group counts {count_ok}, k=9 w=3 three unpadded groups {k9_ok}, impulse radii {radii_ok} ({checked} impulses)"),
    )
}

fn c8_ablation_identity() -> Outcome {
    let mut identical = 0;
    let mut refined = 0usize;
    for seed in 0..20u64 {
        let mut rng = Rng::new(5000 + seed);
        let stride = 8;
        let (fh, fw) = (rng.range_inclusive(2, 4), rng.range_inclusive(4, 8));
        let rig = CameraRig::surround(rng.range_inclusive(1, 4), fw * stride, fh * stride, 1.6, 1.5, 0.3);
        let (c, fc, k) = (rng.range_inclusive(2, 6), rng.range_inclusive(2, 6), rng.range_inclusive(2, 6));
        let heights: Vec<f64> = (0..rng.range_inclusive(1, 3)).map(|_| rng.uniform(-1.0, 3.0)).collect();
        let points = rng.range_inclusive(1, 3);
        let spec = BevSpec::new(rng.range_inclusive(8, 12), rng.uniform(5.0, 12.0)).unwrap();
        let g = spec.grid;
        let bev = Tensor::from_fn(&[c, g, g], |_| rng.uniform_f32(-1.0, 1.0));
        let centers: Vec<Center> = (0..rng.range_inclusive(1, 4))
            .map(|_| Center { x: rng.range_inclusive(0, g - 1), y: rng.range_inclusive(0, g - 1), class: 0, score: 0.5 })
            .collect();
        let rois = expand_roi(&bev, &centers).unwrap();
        let refs = lift_references(&rois.cells(), &spec, &heights, &rig);
        let features: Vec<Tensor> = (0..rig.len()).map(|_| Tensor::from_fn(&[fc, fh, fw], |_| rng.uniform_f32(-1.0, 1.0))).collect();
        let depth: Vec<DepthVolume> = (0..rig.len()).map(|_| random_volume(k, fh, fw, &mut rng)).collect();
        let id = Activation::Identity;
        let attn = AttnSpec {
            queries: Tensor::from_fn(&[49, c], |_| rng.uniform_f32(-0.5, 0.5)),
            points,
            offset_proj: Dense::random(c, heights.len() * points * 2, id, &mut rng),
            weight_proj: Dense::random(c, heights.len() * points, id, &mut rng),
            value_proj: Dense::random(fc, c, id, &mut rng),
            output_proj: Dense::random(c, c, id, &mut rng),
        };
        let zero_mlp = MlpSpec::new(vec![Dense::zeros(k, 4, Activation::Relu), Dense::zeros(4, fc, id)]).unwrap();
        let emb: Vec<Tensor> = depth.iter().map(|d| depth_embedding(d, &zero_mlp).unwrap()).collect();
        let with = spatial_cross_attention(&rois, &refs, &features, Some(&emb), stride, &attn).unwrap();
        let without = spatial_cross_attention(&rois, &refs, &features, None, stride, &attn).unwrap();
        let same = with.rois.iter().zip(&without.rois).all(|(a, b)| a.patch.bit_eq(&b.patch) && a.unrefined == b.unrefined);
        identical += usize::from(same);
        refined += with.rois.iter().map(|r| r.unrefined.iter().filter(|u| !**u).count()).sum::<usize>();
    }
    outcome(
        identical == 20 && refined > 0,
        format!("bit-identical in {identical}/20 instances ({refined} refined cells)"),
    )
}

fn c9_threshold() -> Outcome {
    let mut t = Tensor::full(&[2, 8, 8], 0.05);
    t.set(&[0, 3, 2], 0.1);
    t.set(&[1, 1, 5], 0.1 + 1e-6);
    let heat = Heatmap::from_tensor(t).unwrap();
    let picked = select_centers(&heat, 0.1, None);
    let boundary_ok = picked.len() == 1 && (picked[0].x, picked[0].y, picked[0].class) == (5, 1, 1);

    let mut rng = Rng::new(6000);
    let mut monotone = 0;
    for _ in 0..50 {
        let heat = Heatmap::from_tensor(Tensor::from_fn(&[3, 16, 16], |_| rng.uniform_f32(0.001, 0.999))).unwrap();
        let mut taus: Vec<f32> = (0..6).map(|_| rng.uniform_f32(0.0, 1.0)).collect();
        taus.sort_by(f32::total_cmp);
        let sets: Vec<BTreeSet<(usize, usize)>> = taus
            .iter()
            .map(|&tau| select_centers(&heat, tau, None).iter().map(|c| (c.x, c.y)).collect())
            .collect();
        monotone += usize::from(sets.windows(2).all(|p| p[1].is_subset(&p[0])));
    }
    outcome(
        boundary_ok && monotone == 50,
        format!("0.1 excluded and 0.1+1e-6 included: {boundary_ok}; nested selections {monotone}/50"),
    )
}

fn c10_coverage() -> Outcome {
    let mut ok = 0;
    let (mut sum8, mut sum16) = (0.0, 0.0);
    for seed in 0..50u64 {
        let cfg = SceneConfig { seed: 7000 + seed, frames: 1, fusion_window: 1, objects_min: 0, objects_max: 6, ..SceneConfig::default() };
        let scene = gen_scene(&cfg).unwrap();
        let rig = cfg.rig();
        let points = &scene.current().lidar;
        let bins = cfg.bins();
        let (w, h) = (cfg.image_width, cfg.image_height);
        let c8 = rig_coverage(points, &rig.cameras, h / 8, w / 8, 8, &bins);
        let c16 = rig_coverage(points, &rig.cameras, h / 16, w / 16, 16, &bins);
        sum8 += c8;
        sum16 += c16;
        ok += usize::from(c16 >= c8 && (0.0..=1.0).contains(&c8) && (0.0..=1.0).contains(&c16));
    }
    outcome(
        ok == 50,
        format!("stride 16 >= stride 8 in {ok}/50 scenes (mean {:.3} vs {:.3})", sum16 / 50.0, sum8 / 50.0),
    )
}

fn run_cli(args: &[&str], threads: Option<usize>) -> Result<f64, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bevnext"));
    if let Some(n) = threads {
        cmd.arg("--threads").arg(n.to_string());
    }
    let start = Instant::now();
    let out = cmd.args(args).output().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(secs)
}

fn c11_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let result = (|| -> Result<String, String> {
        fs::write(p("desk.cfg"), SceneConfig::default().to_text()).map_err(|e| e.to_string())?;
        run_cli(&["generate", "--config", &p("desk.cfg"), "--out", &p("scene")], None)?;
        run_cli(&["init-weights", "--config", &p("desk.cfg"), "--out", &p("weights.bvnx")], None)?;
        let mut outputs = Vec::new();
        let mut slowest = 0.0f64;
        for (i, threads) in [1, 4, 2].into_iter().enumerate() {
            let out = p(&format!("run{i}"));
            let secs = run_cli(
                &["run", "--config", &p("desk.cfg"), "--weights", &p("weights.bvnx"), "--scene", &p("scene"), "--out", &out, "--dump-depth", "--dump-heatmap"],
                Some(threads),
            )?;
            slowest = slowest.max(secs);
            let read = |f: &str| fs::read(Path::new(&out).join(f)).map_err(|e| e.to_string());
            let mut artifacts = vec![read("detections.txt")?, read("heatmap.ppm")?];
            for c in 0..6 {
                artifacts.push(read(&format!("depth_cam{c}.ppm"))?);
            }
            outputs.push(artifacts);
        }
        let identical = outputs.windows(2).all(|p| p[0] == p[1]);
        let detections = String::from_utf8_lossy(&outputs[0][0]).lines().filter(|l| !l.starts_with('#')).count();
        if !identical {
            return Err("outputs differ between runs".into());
        }
        if slowest >= 60.0 {
            return Err(format!("slowest run took {slowest:.1} s (budget 60 s)"));
        }
        Ok(format!("3 runs at 1/4/2 threads bit-identical, {detections} detections, slowest {slowest:.2} s (budget 60 s)"))
    })();
    match result {
        Ok(detail) => outcome(true, detail),
        Err(detail) => outcome(false, detail),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("CRF decoupling identity", c1_crf_decoupling),
        ("CRF oracle equivalence", c2_crf_oracle),
        ("hand-computed energy", c3_hand_energy),
        ("object-consistency trend", c4_object_consistency),
        ("lift-splat conservation", c5_lift_splat),
        ("projection round trip", c6_projection),
        ("Res2Fusion structure", c7_res2fusion),
        ("depth-embedding ablation identity", c8_ablation_identity),
        ("threshold semantics", c9_threshold),
        ("coverage monotonicity", c10_coverage),
        ("end-to-end determinism and budget", c11_end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
