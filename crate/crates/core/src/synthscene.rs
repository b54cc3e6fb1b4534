//! Deterministic synthetic driving scenes: boxes on a ground plane, a
//! surface-sampled lidar sweep, rendered per-camera semantic feature maps and
//! ego trajectories, plus distance/size bucketed detection scoring.
//!
//! Camera feature channels are `[class one-hot (K), ground, u/width,
//! v/height, noise]`, one value per feature cell sampled at its centre pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxfusion::{fusion_order, transform_boxes, Box3D, TtaTransform};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraModel, Vec3};
use crate::io;
use crate::temporal::EgoPose;
use crate::tensor::Tensor;

/// Centre distance under which a detection may match a ground-truth box.
pub const MATCH_RADIUS: f64 = 2.0;
/// Number of lidar BEV feature channels.
pub const LIDAR_CHANNELS: usize = 8;
const GROUND_CUTOFF: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    /// Nominal `[w, l, h]`.
    pub dims: [f64; 3],
    /// WBF clustering radius in metres.
    pub wbf_radius: f64,
}

pub fn default_classes() -> Vec<ClassSpec> {
    let c = |name: &str, dims, wbf_radius| ClassSpec {
        name: name.to_string(),
        dims,
        wbf_radius,
    };
    vec![
        c("car", [1.8, 4.2, 1.6], 2.0),
        c("pedestrian", [0.7, 0.7, 1.8], 0.5),
        c("cyclist", [0.7, 1.8, 1.6], 0.5),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigConfig {
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub focal: f64,
    pub mount_height: f64,
    pub pitch_deg: f64,
    /// Horizontal offset of each camera from the ego origin along its heading.
    pub mount_offset: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            n_cameras: 4,
            width: 192,
            height: 96,
            stride: 8,
            focal: 96.0,
            mount_height: 1.6,
            pitch_deg: 5.0,
            mount_offset: 0.5,
        }
    }
}

impl RigConfig {
    /// Cameras evenly spaced in heading, the first looking along +y.
    pub fn build(&self) -> Result<Vec<CameraModel>> {
        if self.n_cameras == 0 {
            return Err(Error::Config("n_cameras: must be at least 1".into()));
        }
        (0..self.n_cameras)
            .map(|i| {
                let yaw = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / self.n_cameras as f64;
                let pos = Vec3::new(
                    self.mount_offset * yaw.cos(),
                    self.mount_offset * yaw.sin(),
                    self.mount_height,
                );
                CameraModel::from_pose(
                    self.focal,
                    self.focal,
                    pos,
                    yaw,
                    self.pitch_deg.to_radians(),
                    self.width,
                    self.height,
                    self.stride,
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub bev: BevGrid,
    pub rig: RigConfig,
    pub classes: Vec<ClassSpec>,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub lidar_height: f64,
    pub lidar_rings: usize,
    pub lidar_azimuths: usize,
    pub lidar_max_range: f64,
    /// Surface points per square metre at [`Self::reference_range`].
    pub surface_density: f64,
    pub reference_range: f64,
    pub noise: f64,
    pub edge_margin: f64,
    pub ego_clearance: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            bev: BevGrid::square(48, 1.0),
            rig: RigConfig::default(),
            classes: default_classes(),
            min_boxes: 3,
            max_boxes: 8,
            lidar_height: 1.8,
            lidar_rings: 16,
            lidar_azimuths: 180,
            lidar_max_range: 40.0,
            surface_density: 20.0,
            reference_range: 5.0,
            noise: 0.1,
            edge_margin: 2.0,
            ego_clearance: 3.5,
            max_attempts: 2000,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn cam_channels(&self) -> usize {
        self.classes.len() + 4
    }

    pub fn wbf_thresholds(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.wbf_radius).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("classes: at least one class required".into()));
        }
        if self.min_boxes > self.max_boxes {
            return Err(Error::Config("min_boxes: exceeds max_boxes".into()));
        }
        if self.lidar_rings == 0 || self.lidar_azimuths == 0 {
            return Err(Error::Config("lidar_rings: rings and azimuths must be positive".into()));
        }
        self.rig.build().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointTag {
    Ground,
    Box(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub pos: Vec3,
    pub tag: PointTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Ground truth in the ego frame.
    pub boxes: Vec<Box3D>,
    pub lidar: Vec<LidarPoint>,
    pub cameras: Vec<CameraModel>,
    /// Per camera `[K+4, H, W]`.
    pub cam_features: Vec<Tensor>,
    pub ego_pose: EgoPose,
    pub seed: u64,
    pub num_classes: usize,
    pub noise: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, a, b))
}

/// Place boxes without overlap inside the grid, clear of the ego.
pub fn place_boxes(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Vec<Box3D>> {
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let half = cfg.bev.extent_x().min(cfg.bev.extent_y()) / 2.0 - cfg.edge_margin;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    let mut attempts = 0;
    while boxes.len() < n {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(Error::Placement { boxes: n, attempts: cfg.max_attempts });
        }
        let class = rng.random_range(0..cfg.classes.len());
        let nominal = cfg.classes[class].dims;
        let dims = nominal.map(|d| d * rng.random_range(0.9..1.1));
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let b = Box3D::new([x, y, dims[2] / 2.0], dims, yaw, class, 1.0)?;
        let r = b.dims[0].hypot(b.dims[1]) / 2.0;
        if b.range() < cfg.ego_clearance + r {
            continue;
        }
        let clash = boxes.iter().any(|o| {
            let ro = o.dims[0].hypot(o.dims[1]) / 2.0;
            o.distance_2d(&b) < r + ro + 0.5
        });
        if !clash {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

/// Faces of a box as `(centre, outward normal, u axis, v axis)` with half
/// extents folded into the axes.
fn box_faces(b: &Box3D) -> [(Vec3, Vec3, Vec3, Vec3); 5] {
    let (s, c) = b.yaw.sin_cos();
    let fwd = Vec3::new(c, s, 0.0);
    let left = Vec3::new(-s, c, 0.0);
    let up = Vec3::new(0.0, 0.0, 1.0);
    let ctr = Vec3::new(b.center[0], b.center[1], b.center[2]);
    let (hl, hw, hh) = (b.dims[1] / 2.0, b.dims[0] / 2.0, b.dims[2] / 2.0);
    [
        (ctr + fwd * hl, fwd, left * hw, up * hh),
        (ctr - fwd * hl, -fwd, left * hw, up * hh),
        (ctr + left * hw, left, fwd * hl, up * hh),
        (ctr - left * hw, -left, fwd * hl, up * hh),
        (ctr + up * hh, up, fwd * hl, left * hw),
    ]
}

/// Number of surface points sampled on box `b` given the sensor position.
/// Non-increasing in range for a fixed box size, heading and bearing.
pub fn surface_point_budget(cfg: &SceneConfig, b: &Box3D, sensor: &Vec3) -> Vec<usize> {
    let ctr = Vec3::new(b.center[0], b.center[1], b.center[2]);
    let to_sensor = sensor - ctr;
    let range = (b.range()).max(1e-6);
    let falloff = (cfg.reference_range / range).powi(2).min(1.0);
    box_faces(b)
        .iter()
        .map(|(_, n, u, v)| {
            if n.dot(&to_sensor) <= 0.0 {
                return 0;
            }
            let area = 4.0 * u.norm() * v.norm();
            (cfg.surface_density * area * falloff).floor() as usize
        })
        .collect()
}

/// Surface points of box `index`; each face draws from its own stream so a
/// box keeps the same world-frame samples across frames.
fn box_points(cfg: &SceneConfig, b: &Box3D, index: usize, seed: u64, sensor: &Vec3) -> Vec<LidarPoint> {
    let counts = surface_point_budget(cfg, b, sensor);
    let mut out = Vec::new();
    for (f, ((c, _, u, v), n)) in box_faces(b).iter().zip(counts).enumerate() {
        let mut rng = rng_for(seed, 1000 + index as u64, f as u64);
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let bb: f64 = rng.random_range(-1.0..1.0);
            out.push(LidarPoint {
                pos: c + u * a + v * bb,
                tag: PointTag::Box(index),
            });
        }
    }
    out
}

fn ground_points(cfg: &SceneConfig, boxes: &[Box3D]) -> Vec<LidarPoint> {
    let mut out = Vec::new();
    for k in 0..cfg.lidar_rings {
        let elev = (-25.0 + 23.0 * k as f64 / cfg.lidar_rings as f64).to_radians();
        let r = cfg.lidar_height / (-elev).tan();
        if r > cfg.lidar_max_range {
            continue;
        }
        for a in 0..cfg.lidar_azimuths {
            let phi = 2.0 * std::f64::consts::PI * a as f64 / cfg.lidar_azimuths as f64;
            let (x, y) = (r * phi.cos(), r * phi.sin());
            if boxes.iter().any(|b| b.contains_2d(x, y)) {
                continue;
            }
            out.push(LidarPoint {
                pos: Vec3::new(x, y, 0.0),
                tag: PointTag::Ground,
            });
        }
    }
    out
}

fn lidar_sweep(cfg: &SceneConfig, boxes: &[Box3D], box_seeds: &[u64]) -> Vec<LidarPoint> {
    let sensor = Vec3::new(0.0, 0.0, cfg.lidar_height);
    let mut pts = ground_points(cfg, boxes);
    for (i, b) in boxes.iter().enumerate() {
        pts.extend(box_points(cfg, b, i, box_seeds[i], &sensor));
    }
    pts
}

/// Entry distance of a ray into box `b`, if it hits in front of the origin.
fn ray_box(origin: &Vec3, dir: &Vec3, b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let to_local = |v: &Vec3| Vec3::new(v.x * c + v.y * s, -v.x * s + v.y * c, v.z);
    let o = to_local(&(origin - Vec3::new(b.center[0], b.center[1], b.center[2])));
    let d = to_local(dir);
    let half = [b.dims[1] / 2.0, b.dims[0] / 2.0, b.dims[2] / 2.0];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let bb = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t1 >= t0.max(0.0) && t0 > 0.0).then_some(t0)
}

/// Render one camera's feature map; a pure function of boxes, camera and seed.
pub fn render_camera(cam: &CameraModel, boxes: &[Box3D], num_classes: usize, noise: f64, seed: u64, cam_index: usize) -> Tensor {
    let (h, w) = (cam.feat_height(), cam.feat_width());
    let ch = num_classes + 4;
    let mut t = Tensor::zeros(&[ch, h, w]);
    let mut rng = rng_for(seed, 2000 + cam_index as u64, 0);
    let s = cam.feature_stride as f64;
    let origin = cam.center();
    for r in 0..h {
        for c in 0..w {
            let (u, v) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            let dir = cam.ray_dir(u, v);
            let hit = boxes
                .iter()
                .filter_map(|b| ray_box(&origin, &dir, b).map(|d| (d, b.class)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let ground = if dir.z < 0.0 { Some(-origin.z / dir.z) } else { None };
            let k = r * w + c;
            match (hit, ground) {
                (Some((d, class)), g) if g.is_none_or(|g| d <= g) => t.data[class * h * w + k] = 1.0,
                (_, Some(_)) => t.data[num_classes * h * w + k] = 1.0,
                _ => {}
            }
            t.data[(num_classes + 1) * h * w + k] = u / cam.width as f64;
            t.data[(num_classes + 2) * h * w + k] = v / cam.height as f64;
            let z: f64 = rng.random_range(-1.0..1.0);
            t.data[(num_classes + 3) * h * w + k] = noise * z;
        }
    }
    t
}

fn render_all(cameras: &[CameraModel], boxes: &[Box3D], num_classes: usize, noise: f64, seed: u64) -> Vec<Tensor> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| render_camera(cam, boxes, num_classes, noise, seed, i))
        .collect()
}

/// A single scene with the ego at the world origin.
pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0, 0);
    let boxes = place_boxes(cfg, &mut rng)?;
    let seeds = vec![seed; boxes.len()];
    let cameras = cfg.rig.build()?;
    Ok(SyntheticScene {
        lidar: lidar_sweep(cfg, &boxes, &seeds),
        cam_features: render_all(&cameras, &boxes, cfg.num_classes(), cfg.noise, seed),
        cameras,
        boxes,
        ego_pose: EgoPose::identity(),
        seed,
        num_classes: cfg.num_classes(),
        noise: cfg.noise,
    })
}

/// A scene that is exactly mirror-symmetric under `y -> -y` (camera noise
/// aside, which is zero when `cfg.noise` is zero).
pub fn generate_symmetric(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut half_cfg = cfg.clone();
    half_cfg.min_boxes = cfg.min_boxes.div_ceil(2);
    half_cfg.max_boxes = cfg.max_boxes.div_ceil(2).max(half_cfg.min_boxes);
    let mut rng = rng_for(seed, 0, 0);
    let mut half = Vec::new();
    let mut attempts = 0;
    let target = rng.random_range(half_cfg.min_boxes..=half_cfg.max_boxes);
    while half.len() < target {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(Error::Placement { boxes: target, attempts });
        }
        let mut one = half_cfg.clone();
        one.min_boxes = 1;
        one.max_boxes = 1;
        let b = place_boxes(&one, &mut rng)?[0];
        let r = b.dims[0].hypot(b.dims[1]) / 2.0;
        if b.center[1] < r + 0.5 {
            continue;
        }
        let clash = half.iter().any(|o: &Box3D| {
            let ro = o.dims[0].hypot(o.dims[1]) / 2.0;
            o.distance_2d(&b) < r + ro + 0.5
        });
        if !clash {
            half.push(b);
        }
    }
    let mirror = TtaTransform {
        mirror_y: true,
        rotation_deg: 0.0,
    };
    let n = half.len();
    let mut boxes = half.clone();
    boxes.extend(transform_boxes(&half, &mirror));
    let sensor = Vec3::new(0.0, 0.0, cfg.lidar_height);
    let mut lidar: Vec<LidarPoint> = ground_points(cfg, &boxes)
        .into_iter()
        .filter(|p| p.pos.y >= 0.0)
        .collect();
    let ground_half = lidar.len();
    for i in 0..ground_half {
        let p = lidar[i];
        if p.pos.y > 0.0 {
            lidar.push(LidarPoint {
                pos: Vec3::new(p.pos.x, -p.pos.y, p.pos.z),
                tag: PointTag::Ground,
            });
        }
    }
    for (i, b) in half.iter().enumerate() {
        let pts = box_points(cfg, b, i, seed, &sensor);
        for p in &pts {
            lidar.push(*p);
        }
        for p in pts {
            lidar.push(LidarPoint {
                pos: Vec3::new(p.pos.x, -p.pos.y, p.pos.z),
                tag: PointTag::Box(i + n),
            });
        }
    }
    let cameras = cfg.rig.build()?;
    Ok(SyntheticScene {
        cam_features: render_all(&cameras, &boxes, cfg.num_classes(), cfg.noise, seed),
        cameras,
        boxes,
        lidar,
        ego_pose: EgoPose::identity(),
        seed,
        num_classes: cfg.num_classes(),
        noise: cfg.noise,
    })
}

/// Constant per-frame ego motion: advance `speed` metres along the heading,
/// then turn by `yaw_rate` radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EgoMotion {
    pub speed: f64,
    pub yaw_rate: f64,
    pub dt: f64,
}

/// Static world boxes observed from a moving ego; frame `k` is generated in
/// its own ego frame with pose `world <- ego_k`.
pub fn generate_sequence(cfg: &SceneConfig, n_frames: usize, motion: EgoMotion, seed: u64) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0, 0);
    let world_boxes = place_boxes(cfg, &mut rng)?;
    let cameras = cfg.rig.build()?;
    let mut pose = EgoPose::identity();
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        if k > 0 {
            let (s, c) = pose.theta.sin_cos();
            pose = EgoPose {
                theta: pose.theta + motion.yaw_rate,
                tx: pose.tx - s * motion.speed,
                ty: pose.ty + c * motion.speed,
                timestamp: pose.timestamp + if motion.dt > 0.0 { motion.dt } else { 0.5 },
            };
        }
        let boxes: Vec<Box3D> = world_boxes.iter().map(|b| pose.box_to_ego(b)).collect();
        let seeds = vec![seed; boxes.len()];
        let frame_seed = mix(seed, 3000 + k as u64, 0);
        let mut lidar = ground_points(cfg, &boxes);
        let sensor_world = pose.to_world(0.0, 0.0);
        let sensor = Vec3::new(0.0, 0.0, cfg.lidar_height);
        for (i, wb) in world_boxes.iter().enumerate() {
            let world_sensor = Vec3::new(sensor_world.0, sensor_world.1, cfg.lidar_height);
            let world_pts = box_points_world(cfg, wb, i, seeds[i], &world_sensor, &boxes[i], &sensor);
            lidar.extend(world_pts.into_iter().map(|p| {
                let (x, y) = pose.to_ego(p.pos.x, p.pos.y);
                LidarPoint {
                    pos: Vec3::new(x, y, p.pos.z),
                    tag: p.tag,
                }
            }));
        }
        frames.push(SyntheticScene {
            cam_features: render_all(&cameras, &boxes, cfg.num_classes(), cfg.noise, frame_seed),
            cameras: cameras.clone(),
            boxes,
            lidar,
            ego_pose: pose,
            seed: frame_seed,
            num_classes: cfg.num_classes(),
            noise: cfg.noise,
        });
    }
    Ok(frames)
}

/// World-frame surface samples of a static box, with the budget set by the
/// box's ego-frame geometry.
fn box_points_world(
    cfg: &SceneConfig,
    world_box: &Box3D,
    index: usize,
    seed: u64,
    world_sensor: &Vec3,
    ego_box: &Box3D,
    ego_sensor: &Vec3,
) -> Vec<LidarPoint> {
    let counts = surface_point_budget(cfg, ego_box, ego_sensor);
    let _ = world_sensor;
    let mut out = Vec::new();
    for (f, ((c, _, u, v), n)) in box_faces(world_box).iter().zip(counts).enumerate() {
        let mut rng = rng_for(seed, 1000 + index as u64, f as u64);
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let bb: f64 = rng.random_range(-1.0..1.0);
            out.push(LidarPoint {
                pos: c + u * a + v * bb,
                tag: PointTag::Box(index),
            });
        }
    }
    out
}

impl SyntheticScene {
    pub fn lidar_positions(&self) -> Vec<Vec3> {
        self.lidar.iter().map(|p| p.pos).collect()
    }

    pub fn box_point_count(&self, index: usize) -> usize {
        self.lidar.iter().filter(|p| p.tag == PointTag::Box(index)).count()
    }

    /// Boxes and lidar moved by `t`, camera features re-rendered with the same
    /// rig and seed.
    pub fn transformed(&self, t: &TtaTransform) -> Result<SyntheticScene> {
        if t.is_identity() {
            return Ok(self.clone());
        }
        let boxes = transform_boxes(&self.boxes, t);
        let lidar = self
            .lidar
            .iter()
            .map(|p| {
                let (x, y) = t.apply_point(p.pos.x, p.pos.y);
                LidarPoint {
                    pos: Vec3::new(x, y, p.pos.z),
                    tag: p.tag,
                }
            })
            .collect();
        Ok(SyntheticScene {
            cam_features: render_all(&self.cameras, &boxes, self.num_classes, self.noise, self.seed),
            boxes,
            lidar,
            ..self.clone()
        })
    }

    /// Plain-text scene description; camera features go to separate blobs.
    pub fn to_text(&self) -> String {
        let mut s = String::from("lasfusion-scene 1\n");
        let p = &self.ego_pose;
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "classes {}", self.num_classes);
        let _ = writeln!(s, "noise {}", self.noise);
        let _ = writeln!(s, "pose {} {} {} {}", p.timestamp, p.theta, p.tx, p.ty);
        for cam in &self.cameras {
            let m = cam.matrix();
            let vals: Vec<String> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| format!("{}", m[(r, c)])).collect();
            let _ = writeln!(s, "camera {} {} {} {}", vals.join(" "), cam.width, cam.height, cam.feature_stride);
        }
        for b in &self.boxes {
            let _ = writeln!(s, "box {}", b.csv_row().replace(',', " "));
        }
        for pt in &self.lidar {
            let tag = match pt.tag {
                PointTag::Ground => "g".to_string(),
                PointTag::Box(i) => i.to_string(),
            };
            let _ = writeln!(s, "point {} {} {} {}", pt.pos.x, pt.pos.y, pt.pos.z, tag);
        }
        s
    }

    /// Parse [`Self::to_text`] output; `features` supplies the camera maps.
    pub fn from_text(text: &str, features: Vec<Tensor>) -> Result<SyntheticScene> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("lasfusion-scene 1") {
            return Err(Error::Parse("missing scene header".into()));
        }
        let mut scene = SyntheticScene {
            boxes: Vec::new(),
            lidar: Vec::new(),
            cameras: Vec::new(),
            cam_features: features,
            ego_pose: EgoPose::identity(),
            seed: 0,
            num_classes: 0,
            noise: 0.0,
        };
        let num = |t: &str| -> Result<f64> { t.parse().map_err(|_| Error::Parse(format!("bad number {t:?}"))) };
        for line in lines {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let rest: Vec<&str> = it.collect();
            match key {
                "seed" => scene.seed = rest.first().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse("bad seed".into()))?,
                "classes" => scene.num_classes = rest.first().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse("bad classes".into()))?,
                "noise" => scene.noise = num(rest.first().copied().unwrap_or(""))?,
                "pose" => {
                    if rest.len() != 4 {
                        return Err(Error::Parse("pose needs 4 values".into()));
                    }
                    scene.ego_pose = EgoPose {
                        timestamp: num(rest[0])?,
                        theta: num(rest[1])?,
                        tx: num(rest[2])?,
                        ty: num(rest[3])?,
                    };
                }
                "camera" => scene.cameras.push(CameraModel::from_text(&rest.join(" "))?),
                "box" => scene.boxes.extend(crate::boxfusion::boxes_from_csv(&rest.join(","))?),
                "point" => {
                    if rest.len() != 4 {
                        return Err(Error::Parse("point needs 4 fields".into()));
                    }
                    let tag = if rest[3] == "g" {
                        PointTag::Ground
                    } else {
                        PointTag::Box(rest[3].parse().map_err(|_| Error::Parse("bad point tag".into()))?)
                    };
                    scene.lidar.push(LidarPoint {
                        pos: Vec3::new(num(rest[0])?, num(rest[1])?, num(rest[2])?),
                        tag,
                    });
                }
                other => return Err(Error::Parse(format!("unknown scene record {other:?}"))),
            }
        }
        if scene.cam_features.len() != scene.cameras.len() {
            return Err(Error::Parse(format!(
                "{} feature maps for {} cameras",
                scene.cam_features.len(),
                scene.cameras.len()
            )));
        }
        Ok(scene)
    }

    /// Write `scene.txt` and `cam{i}.f64` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_atomic(&dir.join("scene.txt"), self.to_text().as_bytes())?;
        for (i, f) in self.cam_features.iter().enumerate() {
            io::write_atomic(&dir.join(format!("cam{i}.f64")), &write_blob(f))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SyntheticScene> {
        let text = fs::read_to_string(dir.join("scene.txt"))?;
        let n = text.lines().filter(|l| l.starts_with("camera ")).count();
        let feats = (0..n)
            .map(|i| read_blob(&fs::read(dir.join(format!("cam{i}.f64")))?))
            .collect::<Result<Vec<_>>>()?;
        Self::from_text(&text, feats)
    }
}

const BLOB_MAGIC: &[u8; 8] = b"LASFEAT\0";

/// Raw tensor blob: magic, u32 rank, u64 dims, little-endian f64 payload.
pub fn write_blob(t: &Tensor) -> Vec<u8> {
    let mut out = BLOB_MAGIC.to_vec();
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_blob(bytes: &[u8]) -> Result<Tensor> {
    let bad = || Error::Parse("truncated feature blob".into());
    if bytes.len() < 12 || &bytes[..8] != BLOB_MAGIC {
        return Err(Error::Parse("bad feature blob magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().map_err(|_| bad())?) as usize;
    let mut pos = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = bytes.get(pos..pos + 8).ok_or_else(bad)?;
        shape.push(u64::from_le_bytes(d.try_into().map_err(|_| bad())?) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let payload = bytes.get(pos..pos + 8 * n).ok_or_else(bad)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&shape, data)
}

/// Frozen lidar BEV encoding, `[8, N, M]`: log point count, log count above
/// ground, max height, mean height above ground, fractions of points in
/// three height slices, and log ground-return count.
pub fn lidar_bev_features(points: &[LidarPoint], bev: &BevGrid) -> Tensor {
    let nm = bev.num_cells();
    let mut count = vec![0.0f64; nm];
    let mut above = vec![0.0f64; nm];
    let mut zmax = vec![0.0f64; nm];
    let mut zsum = vec![0.0; nm];
    let mut slices = [vec![0.0; nm], vec![0.0; nm], vec![0.0; nm]];
    let mut ground = vec![0.0f64; nm];
    for p in points {
        let Some((r, c)) = bev.cell_of(p.pos.x, p.pos.y) else { continue };
        let k = bev.index(r, c);
        let z = p.pos.z;
        count[k] += 1.0;
        if z < GROUND_CUTOFF {
            ground[k] += 1.0;
            continue;
        }
        above[k] += 1.0;
        zmax[k] = zmax[k].max(z);
        zsum[k] += z;
        let s = if z < 0.8 {
            0
        } else if z < 1.4 {
            1
        } else {
            2
        };
        slices[s][k] += 1.0;
    }
    let mut t = Tensor::zeros(&[LIDAR_CHANNELS, bev.cells_y, bev.cells_x]);
    for k in 0..nm {
        let n = count[k];
        t.data[k] = (1.0 + n).ln();
        t.data[nm + k] = (1.0 + above[k]).ln();
        t.data[2 * nm + k] = zmax[k] / 2.0;
        t.data[3 * nm + k] = if above[k] > 0.0 { zsum[k] / above[k] / 2.0 } else { 0.0 };
        for (s, sl) in slices.iter().enumerate() {
            t.data[(4 + s) * nm + k] = if n > 0.0 { sl[k] / n } else { 0.0 };
        }
        t.data[7 * nm + k] = (1.0 + ground[k]).ln();
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketStats {
    pub dist: (f64, f64),
    pub size: (f64, f64),
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BucketStats {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub distance_edges: Vec<f64>,
    pub size_edges: Vec<f64>,
    pub buckets: Vec<BucketStats>,
}

fn bucket_index(edges: &[f64], v: f64) -> usize {
    edges.iter().take_while(|&&e| v >= e).count()
}

fn bounds(edges: &[f64], i: usize) -> (f64, f64) {
    let lo = if i == 0 { 0.0 } else { edges[i - 1] };
    let hi = edges.get(i).copied().unwrap_or(f64::INFINITY);
    (lo, hi)
}

impl BucketReport {
    pub fn new(distance_edges: &[f64], size_edges: &[f64]) -> Self {
        let (nd, ns) = (distance_edges.len() + 1, size_edges.len() + 1);
        let mut buckets = Vec::with_capacity(nd * ns);
        for d in 0..nd {
            for s in 0..ns {
                buckets.push(BucketStats {
                    dist: bounds(distance_edges, d),
                    size: bounds(size_edges, s),
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                });
            }
        }
        Self {
            distance_edges: distance_edges.to_vec(),
            size_edges: size_edges.to_vec(),
            buckets,
        }
    }

    fn bucket_of(&self, b: &Box3D) -> usize {
        bucket_index(&self.distance_edges, b.range()) * (self.size_edges.len() + 1) + bucket_index(&self.size_edges, b.area())
    }

    /// Accumulate one scene: greedy score-ordered, class-aware matching
    /// within [`MATCH_RADIUS`].
    pub fn add(&mut self, detections: &[Box3D], gt: &[Box3D]) {
        let mut dets = detections.to_vec();
        dets.sort_by(fusion_order);
        let mut used = vec![false; gt.len()];
        for d in &dets {
            let best = gt
                .iter()
                .enumerate()
                .filter(|(j, g)| !used[*j] && g.class == d.class && g.distance_2d(d) < MATCH_RADIUS)
                .min_by(|a, b| a.1.distance_2d(d).total_cmp(&b.1.distance_2d(d)).then(a.0.cmp(&b.0)));
            match best {
                Some((j, g)) => {
                    used[j] = true;
                    let k = self.bucket_of(g);
                    self.buckets[k].tp += 1;
                }
                None => {
                    let k = self.bucket_of(d);
                    self.buckets[k].fp += 1;
                }
            }
        }
        for (j, g) in gt.iter().enumerate() {
            if !used[j] {
                let k = self.bucket_of(g);
                self.buckets[k].fn_ += 1;
            }
        }
    }

    pub fn overall(&self) -> BucketStats {
        let mut s = BucketStats {
            dist: (0.0, f64::INFINITY),
            size: (0.0, f64::INFINITY),
            tp: 0,
            fp: 0,
            fn_: 0,
        };
        for b in &self.buckets {
            s.tp += b.tp;
            s.fp += b.fp;
            s.fn_ += b.fn_;
        }
        s
    }

    /// Mean F1 over non-empty buckets (1 when every bucket is empty).
    pub fn toy_score(&self) -> f64 {
        let f: Vec<f64> = self.buckets.iter().filter(|b| !b.is_empty()).map(BucketStats::f1).collect();
        if f.is_empty() {
            1.0
        } else {
            f.iter().sum::<f64>() / f.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dist_lo,dist_hi,size_lo,size_hi,tp,fp,fn,precision,recall,f1\n");
        for b in self.buckets.iter().chain(std::iter::once(&self.overall())) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                b.dist.0,
                b.dist.1,
                b.size.0,
                b.size.1,
                b.tp,
                b.fp,
                b.fn_,
                b.precision(),
                b.recall(),
                b.f1()
            );
        }
        s
    }
}

pub const DEFAULT_DISTANCE_EDGES: [f64; 2] = [10.0, 18.0];
pub const DEFAULT_SIZE_EDGES: [f64; 1] = [2.0];

/// Per-bucket precision/recall of one scene's detections.
pub fn bucket_eval(detections: &[Box3D], gt: &[Box3D], distance_edges: &[f64], size_edges: &[f64]) -> BucketReport {
    let mut r = BucketReport::new(distance_edges, size_edges);
    r.add(detections, gt);
    r
}
