//! Boxes, test-time augmentation transforms and weighted boxes fusion.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::exec;
use crate::synthscene::SyntheticScene;

pub const CSV_HEADER: &str = "x,y,z,w,l,h,yaw,vx,vy,class,score";

/// Oriented box on the ground plane. `l` runs along the heading `yaw`
/// (radians from +x), `w` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `[w, l, h]` in metres.
    pub dims: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class: usize,
    pub score: f64,
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_yaw(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        r = 0.0;
    }
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, class: usize, score: f64) -> Result<Self> {
        let b = Self {
            center,
            dims,
            yaw: wrap_yaw(yaw),
            velocity: [0.0, 0.0],
            class,
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::OutOfRange(format!("box dims {:?} must be positive", self.dims)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::OutOfRange(format!("box score {} outside [0, 1]", self.score)));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::OutOfRange(format!("box yaw {} not wrapped", self.yaw)));
        }
        Ok(())
    }

    pub fn distance_2d(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }

    pub fn range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    /// Footprint area `w * l`.
    pub fn area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    /// Ground-plane footprint corners, counter-clockwise.
    pub fn corners_2d(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.dims[1] / 2.0, self.dims[0] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| {
            [self.center[0] + a * c - b * s, self.center[1] + a * s + b * c]
        })
    }

    /// Whether ground point `(x, y)` lies inside the footprint.
    pub fn contains_2d(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let a = dx * c + dy * s;
        let b = -dx * s + dy * c;
        a.abs() <= self.dims[1] / 2.0 && b.abs() <= self.dims[0] / 2.0
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.center[0],
            self.center[1],
            self.center[2],
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.yaw,
            self.velocity[0],
            self.velocity[1],
            self.class,
            self.score
        )
    }
}

pub fn boxes_to_csv(boxes: &[Box3D]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for b in boxes {
        let _ = writeln!(s, "{}", b.csv_row());
    }
    s
}

pub fn boxes_from_csv(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == CSV_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Parse(format!("box csv line {}: expected 11 fields", i + 1)));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].trim()
                .parse()
                .map_err(|_| Error::Parse(format!("box csv line {}: bad number {:?}", i + 1, f[k])))
        };
        let class = f[9]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("box csv line {}: bad class", i + 1)))?;
        let b = Box3D {
            center: [num(0)?, num(1)?, num(2)?],
            dims: [num(3)?, num(4)?, num(5)?],
            yaw: num(6)?,
            velocity: [num(7)?, num(8)?],
            class,
            score: num(10)?,
        };
        b.validate()?;
        out.push(b);
    }
    Ok(out)
}

/// Mirror across the x axis (`y -> -y`), then rotate about the ego origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TtaTransform {
    pub mirror_y: bool,
    pub rotation_deg: f64,
}

impl TtaTransform {
    pub const IDENTITY: TtaTransform = TtaTransform {
        mirror_y: false,
        rotation_deg: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        !self.mirror_y && self.rotation_deg == 0.0
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let y = if self.mirror_y { -y } else { y };
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        (c * x - s * y, s * x + c * y)
    }

    pub fn invert_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = (c * x + s * y, -s * x + c * y);
        (x, if self.mirror_y { -y } else { y })
    }

    pub fn apply_yaw(&self, yaw: f64) -> f64 {
        let yaw = if self.mirror_y { -yaw } else { yaw };
        wrap_yaw(yaw + self.rotation_deg.to_radians())
    }

    pub fn invert_yaw(&self, yaw: f64) -> f64 {
        let yaw = yaw - self.rotation_deg.to_radians();
        wrap_yaw(if self.mirror_y { -yaw } else { yaw })
    }

    pub fn label(&self) -> String {
        format!("{}rot{}", if self.mirror_y { "mirror_" } else { "" }, self.rotation_deg)
    }
}

pub fn transform_boxes(boxes: &[Box3D], t: &TtaTransform) -> Vec<Box3D> {
    boxes
        .iter()
        .map(|b| {
            let (x, y) = t.apply_point(b.center[0], b.center[1]);
            let (vx, vy) = t.apply_point(b.velocity[0], b.velocity[1]);
            Box3D {
                center: [x, y, b.center[2]],
                yaw: t.apply_yaw(b.yaw),
                velocity: [vx, vy],
                ..*b
            }
        })
        .collect()
}

pub fn inverse_transform_boxes(boxes: &[Box3D], t: &TtaTransform) -> Vec<Box3D> {
    boxes
        .iter()
        .map(|b| {
            let (x, y) = t.invert_point(b.center[0], b.center[1]);
            let (vx, vy) = t.invert_point(b.velocity[0], b.velocity[1]);
            Box3D {
                center: [x, y, b.center[2]],
                yaw: t.invert_yaw(b.yaw),
                velocity: [vx, vy],
                ..*b
            }
        })
        .collect()
}

/// Mirror on/off times rotations of -12.5, -6.25, 0, 6.25 and 12.5 degrees.
pub fn standard_tta_set() -> Vec<TtaTransform> {
    let mut out = Vec::new();
    for mirror_y in [false, true] {
        for rotation_deg in [-12.5, -6.25, 0.0, 6.25, 12.5] {
            out.push(TtaTransform { mirror_y, rotation_deg });
        }
    }
    out
}

/// Fusion order: score descending, then x, y, class ascending.
pub fn fusion_order(a: &Box3D, b: &Box3D) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.center[0].total_cmp(&b.center[0]))
        .then(a.center[1].total_cmp(&b.center[1]))
        .then(a.class.cmp(&b.class))
}

/// Score-weighted fusion of `members` (all one class), before the score
/// rescaling by source count.
pub fn fuse_members(members: &[Box3D]) -> Box3D {
    let total: f64 = members.iter().map(|b| b.score).sum();
    let weight = |b: &Box3D| {
        if total > 0.0 {
            b.score / total
        } else {
            1.0 / members.len() as f64
        }
    };
    let mut out = Box3D {
        center: [0.0; 3],
        dims: [0.0; 3],
        yaw: 0.0,
        velocity: [0.0; 2],
        class: members[0].class,
        score: total / members.len() as f64,
    };
    let (mut ys, mut yc) = (0.0, 0.0);
    for b in members {
        let w = weight(b);
        for k in 0..3 {
            out.center[k] += w * b.center[k];
            out.dims[k] += w * b.dims[k];
        }
        for k in 0..2 {
            out.velocity[k] += w * b.velocity[k];
        }
        ys += w * b.yaw.sin();
        yc += w * b.yaw.cos();
    }
    out.yaw = wrap_yaw(ys.atan2(yc));
    out
}

/// Weighted boxes fusion over `lists` (one per source). `thresholds[class]`
/// is the centre-distance radius for clustering boxes of that class.
pub fn wbf(lists: &[Vec<Box3D>], thresholds: &[f64]) -> Result<Vec<Box3D>> {
    let n_sources = lists.len().max(1);
    let mut pool: Vec<Box3D> = lists.iter().flatten().copied().collect();
    for b in &pool {
        if !(0.0..=1.0).contains(&b.score) {
            return Err(Error::OutOfRange(format!("box score {} outside [0, 1]", b.score)));
        }
        if b.class >= thresholds.len() {
            return Err(Error::MissingThreshold(b.class));
        }
    }
    pool.sort_by(fusion_order);
    let mut clusters: Vec<(Vec<Box3D>, Box3D)> = Vec::new();
    for b in pool {
        let thr = thresholds[b.class];
        let hit = clusters
            .iter()
            .position(|(_, f)| f.class == b.class && f.distance_2d(&b) <= thr);
        match hit {
            Some(i) => {
                clusters[i].0.push(b);
                clusters[i].1 = fuse_members(&clusters[i].0);
            }
            None => clusters.push((vec![b], b)),
        }
    }
    Ok(clusters
        .into_iter()
        .map(|(members, mut fused)| {
            let n = members.len().min(n_sources);
            fused.score = (fused.score * n as f64 / n_sources as f64).clamp(0.0, 1.0);
            fused
        })
        .collect())
}

/// Anything that turns a scene into boxes.
pub trait Detector: Sync {
    fn detect(&self, scene: &SyntheticScene) -> Result<Vec<Box3D>>;
}

fn fuse_level(lists: Vec<Vec<Box3D>>, thresholds: &[f64]) -> Result<Vec<Box3D>> {
    if lists.len() == 1 {
        return Ok(lists.into_iter().next().unwrap_or_default());
    }
    wbf(&lists, thresholds)
}

/// TTA with WBF per model, then WBF across models. A level with a single
/// source passes through unchanged.
pub fn ensemble_pipeline(
    models: &[&dyn Detector],
    scene: &SyntheticScene,
    tta: &[TtaTransform],
    thresholds: &[f64],
) -> Result<Vec<Box3D>> {
    if models.is_empty() || tta.is_empty() {
        return Err(Error::Config("ensemble needs at least one model and one transform".into()));
    }
    let mut per_model = Vec::with_capacity(models.len());
    for model in models {
        let lists = exec::try_map(tta.len(), |i| {
            let t = &tta[i];
            let s = scene.transformed(t)?;
            let dets = model.detect(&s)?;
            Ok::<_, Error>(inverse_transform_boxes(&dets, t))
        })?;
        per_model.push(fuse_level(lists, thresholds)?);
    }
    fuse_level(per_model, thresholds)
}
