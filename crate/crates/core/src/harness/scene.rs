//! Synthetic multi-camera scenes: flat-shaded boxes on a textured ground
//! plane, moving at constant velocity, plus a LiDAR-like point cloud.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::bvnx;
use crate::camera::{CameraModel, CameraRig};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::SceneConfig;

/// Seconds between consecutive frames (2 Hz keyframes).
pub const FRAME_DT: f64 = 0.5;
/// Minimum horizontal distance from the ego origin to any box center.
pub const EGO_CLEARANCE: f64 = 2.5;
pub const LIDAR_HEIGHT: f64 = 1.8;
pub const LIDAR_RANGE: f64 = 40.0;
const LIDAR_BEAMS: usize = 32;
const LIDAR_AZIMUTHS: usize = 720;
const PLACEMENT_TRIES: usize = 200;

pub const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "cyclist"];

/// A ground-truth box standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class: usize,
    /// ego-frame center, meters
    pub center: [f64; 3],
    /// length (along heading), width, height
    pub size: [f64; 3],
    pub yaw: f64,
    /// ego-frame (vx, vy), m/s
    pub velocity: [f64; 2],
}

impl GtBox {
    /// The same box `dt` seconds later.
    pub fn advanced(&self, dt: f64) -> GtBox {
        let mut b = *self;
        b.center[0] += self.velocity[0] * dt;
        b.center[1] += self.velocity[1] * dt;
        b
    }

    fn footprint_radius(&self) -> f64 {
        0.5 * self.size[0].hypot(self.size[1])
    }

    /// Ray-box intersection; returns the entry distance and the world-space
    /// normal of the entered face.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let (s, c) = self.yaw.sin_cos();
        let rel = origin - Vector3::from(self.center);
        // into box frame: rotate by -yaw around z
        let o = [c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z];
        let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
        let half = self.size.map(|v| v / 2.0);
        let (mut t_near, mut t_far, mut axis, mut sign) = (f64::NEG_INFINITY, f64::INFINITY, 0, 0.0);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let t0 = (-half[a] - o[a]) / d[a];
            let t1 = (half[a] - o[a]) / d[a];
            let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            if lo > t_near {
                t_near = lo;
                axis = a;
                sign = -d[a].signum();
            }
            t_far = t_far.min(hi);
        }
        if t_near > t_far || t_near <= 1e-9 {
            return None;
        }
        let local = match axis {
            0 => Vector3::new(sign, 0.0, 0.0),
            1 => Vector3::new(0.0, sign, 0.0),
            _ => Vector3::new(0.0, 0.0, sign),
        };
        let normal = Vector3::new(c * local.x - s * local.y, s * local.x + c * local.y, local.z);
        Some((t_near, normal))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    /// one image per rig camera
    pub images: Vec<RgbImage>,
    pub boxes: Vec<GtBox>,
    /// ego-frame points
    pub lidar: Vec<[f32; 3]>,
}

/// Frames in chronological order; the last one is the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn current(&self) -> &Frame {
        self.frames.last().expect("scene has frames")
    }

    pub fn cameras(&self) -> usize {
        self.frames.first().map_or(0, |f| f.images.len())
    }

    /// Writes `boxes.txt`, `frame_NN/cam_C.ppm` and `frame_NN/lidar.bvnx`
    /// (the latter only when the frame has points).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut text = String::from("# frame time class x y z l w h yaw vx vy\n");
        for (f, frame) in self.frames.iter().enumerate() {
            for b in &frame.boxes {
                let [x, y, z] = b.center;
                let [l, w, h] = b.size;
                let [vx, vy] = b.velocity;
                writeln!(text, "{f} {} {} {x} {y} {z} {l} {w} {h} {} {vx} {vy}", frame.time, b.class, b.yaw).unwrap();
            }
            let fdir = dir.join(format!("frame_{f:02}"));
            fs::create_dir_all(&fdir)?;
            for (c, img) in frame.images.iter().enumerate() {
                img.write_ppm(fdir.join(format!("cam_{c}.ppm")))?;
            }
            if !frame.lidar.is_empty() {
                let pts = Tensor::new(vec![frame.lidar.len(), 3], frame.lidar.iter().flatten().copied().collect())?;
                bvnx::write_tensor(fdir.join("lidar.bvnx"), &pts)?;
            }
        }
        fs::write(dir.join("boxes.txt"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut frames = Vec::new();
        loop {
            let fdir = dir.join(format!("frame_{:02}", frames.len()));
            if !fdir.is_dir() {
                break;
            }
            let mut images = Vec::new();
            loop {
                let p = fdir.join(format!("cam_{}.ppm", images.len()));
                if !p.is_file() {
                    break;
                }
                images.push(RgbImage::read_ppm(p)?);
            }
            let lidar_path = fdir.join("lidar.bvnx");
            let lidar = if lidar_path.is_file() {
                let t = bvnx::read_tensor(lidar_path)?;
                if t.rank() != 2 || t.dims()[1] != 3 {
                    return Err(Error::format(0, format!("lidar points must be [n, 3], got {:?}", t.dims())));
                }
                t.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()
            } else {
                Vec::new()
            };
            frames.push(Frame { time: 0.0, images, boxes: Vec::new(), lidar });
        }
        if frames.is_empty() {
            return Err(Error::Invalid(format!("{} contains no frame_00 directory", dir.display())));
        }
        for (f, frame) in frames.iter_mut().enumerate() {
            frame.time = f as f64 * FRAME_DT;
        }
        let text = fs::read_to_string(dir.join("boxes.txt"))?;
        let mut offset = 0;
        for line in text.lines() {
            let here = offset;
            offset += line.len() + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| Error::format(here, format!("bad number {s:?}"))))
                .collect::<Result<_>>()?;
            if v.len() != 12 {
                return Err(Error::format(here, format!("expected 12 fields, got {}", v.len())));
            }
            let f = v[0] as usize;
            let frame = frames
                .get_mut(f)
                .ok_or_else(|| Error::format(here, format!("box refers to missing frame {f}")))?;
            frame.time = v[1];
            frame.boxes.push(GtBox {
                class: v[2] as usize,
                center: [v[3], v[4], v[5]],
                size: [v[6], v[7], v[8]],
                yaw: v[9],
                velocity: [v[10], v[11]],
            });
        }
        Ok(Scene { frames })
    }
}

fn class_template(class: usize, rng: &mut Rng) -> ([f64; 3], f64) {
    match class {
        0 => ([rng.uniform(3.6, 4.6), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.7)], 3.0),
        1 => ([rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8), rng.uniform(1.6, 1.9)], 1.2),
        _ => ([rng.uniform(1.6, 1.9), rng.uniform(0.5, 0.7), rng.uniform(1.5, 1.8)], 2.5),
    }
}

/// Whether a box trajectory stays inside the BEV extent and clear of the ego
/// and of the already placed boxes in every frame.
fn trajectory_ok(b: &GtBox, placed: &[GtBox], frames: usize, extent: f64) -> bool {
    let mut cur = *b;
    let mut others = placed.to_vec();
    (0..frames).all(|f| {
        if f > 0 {
            cur = cur.advanced(FRAME_DT);
            others.iter_mut().for_each(|o| *o = o.advanced(FRAME_DT));
        }
        let [x, y, _] = cur.center;
        let margin = extent - cur.footprint_radius() - 0.25;
        x.abs() <= margin
            && y.abs() <= margin
            && x.hypot(y) >= EGO_CLEARANCE + cur.footprint_radius()
            && others.iter().all(|o| {
                (o.center[0] - x).hypot(o.center[1] - y) >= o.footprint_radius() + cur.footprint_radius() + 0.3
            })
    })
}

/// Samples the object layout at frame 0.
fn place_objects(cfg: &SceneConfig, rng: &mut Rng) -> Vec<GtBox> {
    let count = rng.range_inclusive(cfg.objects_min, cfg.objects_max);
    let mut placed = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.range_inclusive(0, CLASS_NAMES.len() - 1);
        let (size, max_speed) = class_template(class, rng);
        for attempt in 0..PLACEMENT_TRIES {
            let heading = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
            // late attempts fall back to static objects
            let speed = if attempt < PLACEMENT_TRIES / 2 { rng.uniform(0.0, max_speed) } else { 0.0 };
            let b = GtBox {
                class,
                center: [
                    rng.uniform(-cfg.bev_extent, cfg.bev_extent),
                    rng.uniform(-cfg.bev_extent, cfg.bev_extent),
                    size[2] / 2.0,
                ],
                size,
                yaw: heading,
                velocity: [speed * heading.cos(), speed * heading.sin()],
            };
            if trajectory_ok(&b, &placed, cfg.frames, cfg.bev_extent) {
                placed.push(b);
                break;
            }
        }
    }
    placed
}

const LIGHT: [f64; 3] = [0.35, 0.45, 0.82];

fn class_color(class: usize) -> [f64; 3] {
    match class {
        0 => [200.0, 40.0, 40.0],
        1 => [40.0, 170.0, 60.0],
        _ => [230.0, 190.0, 30.0],
    }
}

fn first_hit(origin: &Vector3<f64>, dir: &Vector3<f64>, boxes: &[GtBox]) -> Option<(f64, usize, Vector3<f64>)> {
    boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.intersect(origin, dir).map(|(t, n)| (t, i, n)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn shade(origin: &Vector3<f64>, dir: &Vector3<f64>, boxes: &[GtBox]) -> [u8; 3] {
    let rgb = if let Some((_, i, n)) = first_hit(origin, dir, boxes) {
        let light = Vector3::from(LIGHT).normalize();
        let k = 0.5 + 0.5 * n.dot(&light).max(0.0);
        class_color(boxes[i].class).map(|c| c * k)
    } else if dir.z < -1e-9 {
        let t = -origin.z / dir.z;
        let (gx, gy) = (origin.x + t * dir.x, origin.y + t * dir.y);
        let checker = if (gx.floor() as i64 + gy.floor() as i64) & 1 == 0 { 12.0 } else { -12.0 };
        let fade = 1.0 / (1.0 + 0.03 * gx.hypot(gy));
        [110.0 + checker, 112.0 + checker, 100.0 + checker].map(|c| 40.0 + (c - 40.0) * fade)
    } else {
        let e = dir.z.clamp(0.0, 1.0);
        [150.0 + 60.0 * e, 185.0 + 40.0 * e, 235.0]
    };
    rgb.map(|c| c.round().clamp(0.0, 255.0) as u8)
}

/// Ray-cast render of `boxes` through one camera, sampling pixel centers.
pub fn render(cam: &CameraModel, width: usize, height: usize, boxes: &[GtBox]) -> RgbImage {
    let rows: Vec<Vec<u8>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(width * 3);
            for x in 0..width {
                let dir = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                row.extend_from_slice(&shade(&cam.translation, &dir, boxes));
            }
            row
        })
        .collect();
    RgbImage { width, height, data: rows.concat() }
}

/// Spinning-LiDAR stand-in at the ego origin: returns the first surface hit
/// of every beam within range.
pub fn lidar_scan(boxes: &[GtBox]) -> Vec<[f32; 3]> {
    let origin = Vector3::new(0.0, 0.0, LIDAR_HEIGHT);
    let mut points = Vec::new();
    for beam in 0..LIDAR_BEAMS {
        let elev = (-30.0 + 30.0 * beam as f64 / (LIDAR_BEAMS - 1) as f64).to_radians();
        for a in 0..LIDAR_AZIMUTHS {
            let az = 2.0 * std::f64::consts::PI * a as f64 / LIDAR_AZIMUTHS as f64;
            let dir = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let t = match first_hit(&origin, &dir, boxes) {
                Some((t, _, _)) => t,
                None if dir.z < -1e-9 => -origin.z / dir.z,
                None => continue,
            };
            if t <= LIDAR_RANGE {
                let p = origin + t * dir;
                points.push([p.x as f32, p.y as f32, p.z as f32]);
            }
        }
    }
    points
}

/// Generates a scene from `cfg`; identical configs give identical scenes.
pub fn gen_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let rig: CameraRig = cfg.rig();
    let mut rng = Rng::new(cfg.seed);
    let initial = place_objects(cfg, &mut rng);
    let mut boxes = initial;
    let frames = (0..cfg.frames)
        .map(|f| {
            let time = f as f64 * FRAME_DT;
            if f > 0 {
                // step from the previous frame so motion is exactly v·Δt
                boxes.iter_mut().for_each(|b| *b = b.advanced(FRAME_DT));
            }
            let boxes = boxes.clone();
            let images = rig
                .cameras
                .iter()
                .map(|cam| render(cam, cfg.image_width, cfg.image_height, &boxes))
                .collect();
            let lidar = lidar_scan(&boxes);
            Frame { time, images, boxes, lidar }
        })
        .collect();
    Ok(Scene { frames })
}
