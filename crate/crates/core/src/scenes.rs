//! Synthetic ground-truth scenes: class-labeled 3D boxes with
//! class-conditional height priors, simulated LiDAR returns, and rendered
//! multi-camera feature maps with depth distributions.
//!
//! Class identity is encoded directly in the rendered features (one-hot plus
//! noise); the harness isolates BEV feature construction, not backbone
//! learning. All generation is a pure function of (seed, config).

use crate::geometry::{BevGridSpec, CameraModel, FrustumSpec};
use crate::tensor::{softmax_raw, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_HEADER: &str = "BEVSAN-SCENES v1";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported dataset version: found {found:?}, expected {DATASET_HEADER:?}")]
    Version { found: String },
    #[error("render needs at least {need} channels for {classes} classes, got {got}")]
    TooFewChannels {
        need: usize,
        classes: usize,
        got: usize,
    },
}

/// Axis-aligned-in-yaw 3D box in ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// (length, width, height) along the box's local x, y, z.
    pub size: [f64; 3],
    /// Rotation about ego z, radians in [-pi, pi).
    pub yaw: f64,
    pub class_id: u32,
}

impl Box3D {
    /// Radius of the circumscribed BEV footprint circle.
    pub fn footprint_radius(&self) -> f64 {
        0.5 * (self.size[0].hypot(self.size[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub cameras: Vec<CameraModel>,
    pub boxes: Vec<Box3D>,
    pub lidar: PointCloud,
}

/// Per-class spawn statistics. Height priors are what make classes
/// separable along z: different object classes occupy different heights.
#[derive(Debug, Clone)]
pub struct ClassProfile {
    pub name: String,
    pub class_id: u32,
    /// Mean/stddev of the box-center height, meters.
    pub height_mean: f64,
    pub height_std: f64,
    pub size_mean: [f64; 3],
    pub size_std: [f64; 3],
    /// Poisson rate of boxes per scene.
    pub spawn_rate: f64,
}

/// Low "cone-like" class and high "bus-like" class; the extremes the slice
/// mechanism should separate.
pub fn default_profiles() -> Vec<ClassProfile> {
    vec![
        ClassProfile {
            name: "cone".to_string(),
            class_id: 0,
            height_mean: -1.4,
            height_std: 0.1,
            size_mean: [1.4, 1.4, 1.4],
            size_std: [0.1, 0.1, 0.1],
            spawn_rate: 3.0,
        },
        ClassProfile {
            name: "bus".to_string(),
            class_id: 1,
            height_mean: 0.5,
            height_std: 0.3,
            size_mean: [6.0, 2.5, 3.0],
            size_std: [0.4, 0.2, 0.2],
            spawn_rate: 2.0,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct SceneGenOptions {
    pub camera_count: usize,
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Intrinsics shared by all ring cameras.
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Ground plane height; LiDAR mass concentrates here.
    pub ground_z: f64,
    pub rays_per_box: usize,
    pub ground_points: usize,
    /// Rejection-sampling retry budget per box.
    pub max_retries: usize,
    /// Boxes keep this clearance from the camera rig at the origin.
    pub rig_clearance: f64,
}

impl Default for SceneGenOptions {
    fn default() -> Self {
        SceneGenOptions {
            camera_count: 6,
            camera_radius: 1.0,
            camera_height: 0.0,
            fx: 25.5,
            fy: 12.0,
            cx: 18.0,
            cy: 12.0,
            ground_z: -2.0,
            rays_per_box: 60,
            ground_points: 600,
            max_retries: 100,
            rig_clearance: 4.0,
        }
    }
}

/// Outward-facing ring of cameras around the ego origin. Camera k points at
/// yaw 2*pi*k/count; camera frames are x-right, y-down, z-forward.
pub fn ring_cameras(opts: &SceneGenOptions) -> Vec<CameraModel> {
    (0..opts.camera_count)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / opts.camera_count as f64;
            let (s, c) = theta.sin_cos();
            // Columns: camera x = (s, -c, 0), y = (0, 0, -1), z = (c, s, 0).
            let rotation = [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]];
            let translation = [
                opts.camera_radius * c,
                opts.camera_radius * s,
                opts.camera_height,
            ];
            CameraModel::new(opts.fx, opts.fy, opts.cx, opts.cy, rotation, translation)
                .expect("ring pose is orthonormal")
        })
        .collect()
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ salt
}

/// Generate one scene. Returns the scene and the number of boxes dropped
/// because no non-overlapping placement was found within the retry budget.
pub fn generate_scene(
    seed: u64,
    profiles: &[ClassProfile],
    grid: &BevGridSpec,
    opts: &SceneGenOptions,
) -> (Scene, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB0E5));
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut dropped = 0u32;

    for profile in profiles {
        let count = if profile.spawn_rate > 0.0 {
            Poisson::new(profile.spawn_rate)
                .expect("positive rate")
                .sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let size = [
                sample_normal(&mut rng, profile.size_mean[0], profile.size_std[0]).max(0.05),
                sample_normal(&mut rng, profile.size_mean[1], profile.size_std[1]).max(0.05),
                sample_normal(&mut rng, profile.size_mean[2], profile.size_std[2]).max(0.05),
            ];
            let z = sample_normal(&mut rng, profile.height_mean, profile.height_std)
                .clamp(grid.h_min, grid.h_max);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let mut placed = false;
            for _ in 0..opts.max_retries {
                let x = rng.gen_range(grid.x_min..grid.x_max);
                let y = rng.gen_range(grid.y_min..grid.y_max);
                let candidate = Box3D {
                    center: [x, y, z],
                    size,
                    yaw,
                    class_id: profile.class_id,
                };
                let r = candidate.footprint_radius();
                let clear_of_rig = x.hypot(y) >= r + opts.rig_clearance;
                let clear_of_boxes = boxes.iter().all(|b| {
                    let d = (b.center[0] - x).hypot(b.center[1] - y);
                    d >= r + b.footprint_radius()
                });
                if clear_of_rig && clear_of_boxes {
                    boxes.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                dropped += 1;
            }
        }
    }

    let cameras = ring_cameras(opts);
    let lidar = simulate_lidar_impl(
        &boxes,
        grid,
        opts.rays_per_box,
        opts.ground_points,
        opts.ground_z,
        mix_seed(seed, 0x11DA),
    );
    (
        Scene {
            seed,
            cameras,
            boxes,
            lidar,
        },
        dropped,
    )
}

/// Generate `count` scenes with per-scene seeds seed + index.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    profiles: &[ClassProfile],
    grid: &BevGridSpec,
    opts: &SceneGenOptions,
) -> (Vec<Scene>, u32) {
    let mut scenes = Vec::with_capacity(count);
    let mut dropped = 0;
    for i in 0..count {
        let (scene, d) = generate_scene(seed + i as u64, profiles, grid, opts);
        scenes.push(scene);
        dropped += d;
    }
    (scenes, dropped)
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).expect("valid normal").sample(rng)
}

/// Sample LiDAR returns: points uniform on box surfaces plus ground-plane
/// points with sigma = 0.02 m vertical noise.
pub fn simulate_lidar(
    scene: &Scene,
    grid: &BevGridSpec,
    rays_per_box: usize,
    ground_points: usize,
    ground_z: f64,
) -> PointCloud {
    simulate_lidar_impl(
        &scene.boxes,
        grid,
        rays_per_box,
        ground_points,
        ground_z,
        mix_seed(scene.seed, 0x11DA),
    )
}

fn simulate_lidar_impl(
    boxes: &[Box3D],
    grid: &BevGridSpec,
    rays_per_box: usize,
    ground_points: usize,
    ground_z: f64,
    seed: u64,
) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(boxes.len() * rays_per_box + ground_points);
    for b in boxes {
        let (l, w, h) = (b.size[0], b.size[1], b.size[2]);
        // Face areas: +-x sides (w*h), +-y sides (l*h), top and bottom (l*w).
        let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
        let total: f64 = areas.iter().sum();
        let (sin_yaw, cos_yaw) = b.yaw.sin_cos();
        for _ in 0..rays_per_box {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            for (f, &a) in areas.iter().enumerate() {
                if pick < a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let (u, v) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let local = match face {
                0 => [l / 2.0, u * w, v * h],
                1 => [-l / 2.0, u * w, v * h],
                2 => [u * l, w / 2.0, v * h],
                3 => [u * l, -w / 2.0, v * h],
                4 => [u * l, v * w, h / 2.0],
                _ => [u * l, v * w, -h / 2.0],
            };
            points.push([
                b.center[0] + cos_yaw * local[0] - sin_yaw * local[1],
                b.center[1] + sin_yaw * local[0] + cos_yaw * local[1],
                b.center[2] + local[2],
            ]);
        }
    }
    for _ in 0..ground_points {
        points.push([
            rng.gen_range(grid.x_min..grid.x_max),
            rng.gen_range(grid.y_min..grid.y_max),
            ground_z + sample_normal(&mut rng, 0.0, 0.02),
        ]);
    }
    PointCloud { points }
}

// ── Camera feature rendering ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Feature channels; must be at least class count + 2 (background flag,
    /// one-hot classes, range channel).
    pub channels: usize,
    pub noise_std: f64,
    /// Softmax temperature of the triangular depth bump; lower is peakier.
    pub depth_temperature: f64,
    pub class_count: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            channels: 8,
            noise_std: 0.05,
            depth_temperature: 0.25,
            class_count: 2,
        }
    }
}

/// Nearest ray/box hit, parametrized by camera-frame depth. Returns the
/// depth of the entry point, or `None` for a miss.
fn ray_box_depth(origin: [f64; 3], dir: [f64; 3], b: &Box3D) -> Option<f64> {
    // Transform the ray into the box frame (undo translation then yaw).
    let (sin_yaw, cos_yaw) = b.yaw.sin_cos();
    let rel = [
        origin[0] - b.center[0],
        origin[1] - b.center[1],
        origin[2] - b.center[2],
    ];
    let o = [
        cos_yaw * rel[0] + sin_yaw * rel[1],
        -sin_yaw * rel[0] + cos_yaw * rel[1],
        rel[2],
    ];
    let d = [
        cos_yaw * dir[0] + sin_yaw * dir[1],
        -sin_yaw * dir[0] + cos_yaw * dir[1],
        dir[2],
    ];
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let mut t0: f64 = 0.05; // slightly in front of the camera
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut lo, mut hi) = ((-half[a] - o[a]) * inv, (half[a] - o[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

/// Render the feature map and depth distribution a backbone would produce
/// for camera `cam_index`: class one-hot plus range channel on box hits,
/// background encoding and uniform depth on misses.
pub fn render_camera_features(
    scene: &Scene,
    cam_index: usize,
    fs: &FrustumSpec,
    opts: &RenderOptions,
) -> Result<(Tensor, Tensor), SceneError> {
    let need = opts.class_count + 2;
    if opts.channels < need {
        return Err(SceneError::TooFewChannels {
            need,
            classes: opts.class_count,
            got: opts.channels,
        });
    }
    let cam = &scene.cameras[cam_index];
    let c = opts.channels;
    let (hf, wf, nd) = (fs.hf, fs.wf, fs.depth_bins);
    let mut feat = vec![0.0; c * hf * wf];
    let mut depth = vec![0.0; nd * hf * wf];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, 0x7E4D ^ cam_index as u64));

    let bin_width = fs.bin_width();
    for i in 0..hf {
        for j in 0..wf {
            // Ray through pixel (u, v) = (j, i); the direction's camera z is
            // 1, so the ray parameter equals projective depth.
            let dir_cam = [
                (j as f64 - cam.cx) / cam.fx,
                (i as f64 - cam.cy) / cam.fy,
                1.0,
            ];
            let dir = [
                cam.rotation[0][0] * dir_cam[0]
                    + cam.rotation[0][1] * dir_cam[1]
                    + cam.rotation[0][2] * dir_cam[2],
                cam.rotation[1][0] * dir_cam[0]
                    + cam.rotation[1][1] * dir_cam[1]
                    + cam.rotation[1][2] * dir_cam[2],
                cam.rotation[2][0] * dir_cam[0]
                    + cam.rotation[2][1] * dir_cam[1]
                    + cam.rotation[2][2] * dir_cam[2],
            ];
            let mut hit: Option<(f64, u32)> = None;
            for b in &scene.boxes {
                if let Some(t) = ray_box_depth(cam.translation, dir, b) {
                    if t >= fs.d_min && t <= fs.d_max && hit.is_none_or(|(best, _)| t < best) {
                        hit = Some((t, b.class_id));
                    }
                }
            }
            let pixel = i * wf + j;
            match hit {
                Some((t, class_id)) => {
                    feat[(1 + class_id as usize) * hf * wf + pixel] = 1.0;
                    feat[(1 + opts.class_count) * hf * wf + pixel] = t / fs.d_max;
                    // Triangular bump around the true depth, sharpened by
                    // the softmax temperature.
                    let mut logits = vec![0.0; nd];
                    for (bin, logit) in logits.iter_mut().enumerate() {
                        let center = fs.bin_center(bin);
                        *logit = (1.0 - (center - t).abs() / bin_width).max(0.0)
                            / opts.depth_temperature;
                    }
                    let soft = softmax_raw(&logits, &[nd], 0);
                    for (bin, p) in soft.iter().enumerate() {
                        depth[bin * hf * wf + pixel] = *p;
                    }
                }
                None => {
                    feat[pixel] = 1.0; // background flag channel
                    for bin in 0..nd {
                        depth[bin * hf * wf + pixel] = 1.0 / nd as f64;
                    }
                }
            }
            for ch in 0..c {
                feat[ch * hf * wf + pixel] += sample_normal(&mut rng, 0.0, opts.noise_std);
            }
        }
    }
    Ok((
        Tensor::from_vec(feat, &[c, hf, wf]).expect("feature shape"),
        Tensor::from_vec(depth, &[nd, hf, wf]).expect("depth shape"),
    ))
}

// ── Dataset serialization ───────────────────────────────────────────

/// Write scenes in the line-oriented dataset format. Floats are printed with
/// Rust's shortest round-trip formatting, so write/read is exact.
pub fn write_dataset(scenes: &[Scene], out: &mut impl Write) -> io::Result<()> {
    let mut buf = String::new();
    buf.push_str(DATASET_HEADER);
    buf.push('\n');
    for scene in scenes {
        writeln!(buf, "scene {}", scene.seed).unwrap();
        for c in &scene.cameras {
            write!(buf, "camera {} {} {} {}", c.fx, c.fy, c.cx, c.cy).unwrap();
            for row in &c.rotation {
                for v in row {
                    write!(buf, " {v}").unwrap();
                }
            }
            writeln!(
                buf,
                " {} {} {}",
                c.translation[0], c.translation[1], c.translation[2]
            )
            .unwrap();
        }
        for b in &scene.boxes {
            writeln!(
                buf,
                "box {} {} {} {} {} {} {} {}",
                b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw,
                b.class_id
            )
            .unwrap();
        }
        writeln!(buf, "lidar {}", scene.lidar.len()).unwrap();
        for p in &scene.lidar.points {
            writeln!(buf, "{} {} {}", p[0], p[1], p[2]).unwrap();
        }
    }
    out.write_all(buf.as_bytes())
}

pub fn write_dataset_file(scenes: &[Scene], path: &Path) -> Result<(), SceneError> {
    let mut file = std::fs::File::create(path)?;
    write_dataset(scenes, &mut file)?;
    Ok(())
}

struct LineReader<R> {
    inner: R,
    line_no: usize,
}

impl<R: BufRead> LineReader<R> {
    fn next_line(&mut self) -> Result<Option<String>, SceneError> {
        let mut line = String::new();
        let n = self.inner.read_line(&mut line)?;
        if n == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(Some(line))
    }

    fn error(&self, msg: impl Into<String>) -> SceneError {
        SceneError::Parse {
            line: self.line_no,
            msg: msg.into(),
        }
    }
}

fn parse_floats(fields: &[&str]) -> Option<Vec<f64>> {
    fields.iter().map(|f| f.parse::<f64>().ok()).collect()
}

/// Read scenes written by [`write_dataset`]. Malformed input yields a parse
/// error naming the offending line; a mismatched header version yields a
/// version error. No partial scenes are ever returned.
pub fn read_dataset(input: impl BufRead) -> Result<Vec<Scene>, SceneError> {
    let mut reader = LineReader {
        inner: input,
        line_no: 0,
    };
    let header = reader
        .next_line()?
        .ok_or_else(|| reader.error("empty file, expected header"))?;
    if header != DATASET_HEADER {
        if header.starts_with("BEVSAN-SCENES ") {
            return Err(SceneError::Version { found: header });
        }
        return Err(reader.error(format!("bad header {header:?}")));
    }

    let mut scenes = Vec::new();
    let mut current: Option<Scene> = None;
    while let Some(line) = reader.next_line()? {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        match fields[0] {
            "scene" => {
                if let Some(done) = current.take() {
                    scenes.push(done);
                }
                if fields.len() != 2 {
                    return Err(reader.error("scene line needs one seed field"));
                }
                let seed = fields[1]
                    .parse::<u64>()
                    .map_err(|e| reader.error(format!("bad seed: {e}")))?;
                current = Some(Scene {
                    seed,
                    cameras: Vec::new(),
                    boxes: Vec::new(),
                    lidar: PointCloud::default(),
                });
            }
            "camera" => {
                let scene = current
                    .as_mut()
                    .ok_or_else(|| reader.error("camera before any scene line"))?;
                let vals = parse_floats(&fields[1..])
                    .filter(|v| v.len() == 16)
                    .ok_or_else(|| reader.error("camera line needs 16 numeric fields"))?;
                let rotation = [
                    [vals[4], vals[5], vals[6]],
                    [vals[7], vals[8], vals[9]],
                    [vals[10], vals[11], vals[12]],
                ];
                let cam = CameraModel::new(
                    vals[0],
                    vals[1],
                    vals[2],
                    vals[3],
                    rotation,
                    [vals[13], vals[14], vals[15]],
                )
                .map_err(|e| reader.error(format!("invalid camera: {e}")))?;
                scene.cameras.push(cam);
            }
            "box" => {
                let scene = current
                    .as_mut()
                    .ok_or_else(|| reader.error("box before any scene line"))?;
                if fields.len() != 9 {
                    return Err(reader.error("box line needs 8 fields"));
                }
                let vals = parse_floats(&fields[1..8])
                    .ok_or_else(|| reader.error("box line has non-numeric field"))?;
                let class_id = fields[8]
                    .parse::<u32>()
                    .map_err(|e| reader.error(format!("bad class id: {e}")))?;
                scene.boxes.push(Box3D {
                    center: [vals[0], vals[1], vals[2]],
                    size: [vals[3], vals[4], vals[5]],
                    yaw: vals[6],
                    class_id,
                });
            }
            "lidar" => {
                let scene = current
                    .as_mut()
                    .ok_or_else(|| reader.error("lidar before any scene line"))?;
                if fields.len() != 2 {
                    return Err(reader.error("lidar line needs one count field"));
                }
                let count = fields[1]
                    .parse::<usize>()
                    .map_err(|e| reader.error(format!("bad point count: {e}")))?;
                let mut points = Vec::with_capacity(count);
                for _ in 0..count {
                    let line = reader
                        .next_line()?
                        .ok_or_else(|| reader.error("unexpected end of file in lidar block"))?;
                    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
                    let vals = parse_floats(&fields)
                        .filter(|v| v.len() == 3)
                        .ok_or_else(|| reader.error("lidar point needs 3 numeric fields"))?;
                    points.push([vals[0], vals[1], vals[2]]);
                }
                scene.lidar = PointCloud { points };
            }
            other => {
                return Err(reader.error(format!("unknown record {other:?}")));
            }
        }
    }
    if let Some(done) = current.take() {
        scenes.push(done);
    }
    Ok(scenes)
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<Scene>, SceneError> {
    let file = std::fs::File::open(path)?;
    read_dataset(io::BufReader::new(file))
}
