//! BEV fusion of the lidar and projected camera streams, and a dense
//! per-cell detection head with its loss and box decoding.
//!
//! Head channels: `0` occupancy logit, `1..3` centre offset in cells,
//! `3..5` footprint `w, l` in metres, `5..7` yaw `sin, cos`, then `K` class
//! logits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::boxfusion::Box3D;
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::projection::Variant;
use crate::tensor::nn::Conv2d;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const REG_CHANNELS: usize = 6;
const CLASS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    CatConv,
    GatedSigmoid,
    Add,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::CatConv, FusionMode::GatedSigmoid, FusionMode::Add];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::CatConv => "cat_conv",
            FusionMode::GatedSigmoid => "gated_sigmoid",
            FusionMode::Add => "add",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

/// Fused BEV features with the projector that produced the camera stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedBev {
    pub features: Tensor,
    pub provenance: Variant,
}

/// Fusion block; every mode outputs `lidar_channels` channels.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    pub conv: Option<Conv2d>,
    pub cam_proj: Option<Conv2d>,
    pub lidar_channels: usize,
    pub camera_channels: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, mode: FusionMode, lidar_channels: usize, camera_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let cat = lidar_channels + camera_channels;
        let (conv, cam_proj) = match mode {
            FusionMode::CatConv => (Some(Conv2d::new(store, "fusion.conv", cat, lidar_channels, 3, rng)?), None),
            FusionMode::GatedSigmoid => (
                Some(Conv2d::new(store, "fusion.gate", cat, lidar_channels, 3, rng)?),
                Some(Conv2d::new(store, "fusion.cam", camera_channels, lidar_channels, 1, rng)?),
            ),
            FusionMode::Add => {
                if lidar_channels != camera_channels {
                    return Err(Error::Config(format!(
                        "fusion: add needs equal channels (lidar {lidar_channels}, camera {camera_channels})"
                    )));
                }
                (None, None)
            }
        };
        Ok(Self {
            mode,
            conv,
            cam_proj,
            lidar_channels,
            camera_channels,
        })
    }

    pub fn fuse(&self, g: &Graph, lidar: Var, camera: Var) -> Result<Var> {
        let (ls, cs) = (g.shape(lidar), g.shape(camera));
        if ls.len() != 3 || cs.len() != 3 || ls[1..] != cs[1..] || ls[0] != self.lidar_channels || cs[0] != self.camera_channels {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: ls,
                rhs: cs,
            });
        }
        match self.mode {
            FusionMode::Add => g.add(lidar, camera),
            FusionMode::CatConv => {
                let cat = g.concat(&[lidar, camera], 0)?;
                let conv = self.conv.as_ref().expect("cat_conv weights");
                Ok(g.gelu(conv.forward(g, cat)?))
            }
            FusionMode::GatedSigmoid => {
                let cat = g.concat(&[lidar, camera], 0)?;
                let gate = g.sigmoid(self.conv.as_ref().expect("gate weights").forward(g, cat)?);
                let cam = self.cam_proj.as_ref().expect("camera transform").forward(g, camera)?;
                let gated = g.mul(gate, cam)?;
                g.add(lidar, gated)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub num_classes: usize,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, c_in: usize, hidden: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, "head.conv1", c_in, hidden, 3, rng)?,
            conv2: Conv2d::new(store, "head.conv2", hidden, 1 + REG_CHANNELS + num_classes, 1, rng)?,
            num_classes,
        })
    }

    pub fn out_channels(&self) -> usize {
        1 + REG_CHANNELS + self.num_classes
    }

    pub fn forward(&self, g: &Graph, fused: Var) -> Result<Var> {
        let h = g.gelu(self.conv1.forward(g, fused)?);
        self.conv2.forward(g, h)
    }
}

/// Dense training targets for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    pub occ: Tensor,
    pub occ_weight: Tensor,
    pub reg: Tensor,
    pub reg_mask: Tensor,
    pub cls: Tensor,
    pub positives: usize,
}

impl DetectionTargets {
    /// One positive cell per box, at the cell containing its centre.
    pub fn from_boxes(boxes: &[Box3D], bev: &BevGrid, num_classes: usize, pos_weight: f64) -> Self {
        let (n, m) = (bev.cells_y, bev.cells_x);
        let nm = n * m;
        let mut occ = Tensor::zeros(&[1, n, m]);
        let mut occ_weight = Tensor::ones(&[1, n, m]);
        let mut reg = Tensor::zeros(&[REG_CHANNELS, n, m]);
        let mut reg_mask = Tensor::zeros(&[REG_CHANNELS, n, m]);
        let mut cls = Tensor::zeros(&[num_classes, n, m]);
        let mut positives = 0;
        for b in boxes {
            let Some((r, c)) = bev.cell_of(b.center[0], b.center[1]) else { continue };
            let k = bev.index(r, c);
            if occ.data[k] == 1.0 || b.class >= num_classes {
                continue;
            }
            let (cx, cy) = bev.cell_center(r, c);
            occ.data[k] = 1.0;
            occ_weight.data[k] = pos_weight;
            let vals = [
                (b.center[0] - cx) / bev.cell_size,
                (b.center[1] - cy) / bev.cell_size,
                b.dims[0],
                b.dims[1],
                b.yaw.sin(),
                b.yaw.cos(),
            ];
            for (ch, v) in vals.into_iter().enumerate() {
                reg.data[ch * nm + k] = v;
                reg_mask.data[ch * nm + k] = 1.0;
            }
            cls.data[b.class * nm + k] = 1.0;
            positives += 1;
        }
        Self {
            occ,
            occ_weight,
            reg,
            reg_mask,
            cls,
            positives,
        }
    }
}

/// Weighted occupancy BCE (normalised by total weight) plus masked L1 on the
/// box regressions and class cross-entropy, both per positive cell.
pub fn detection_loss(g: &Graph, pred: Var, t: &DetectionTargets) -> Result<Var> {
    let shape = g.shape(pred);
    let k = t.cls.shape[0];
    if shape.len() != 3 || shape[0] != 1 + REG_CHANNELS + k || shape[1..] != t.occ.shape[1..] {
        return Err(Error::ShapeMismatch {
            op: "detection_loss",
            lhs: shape,
            rhs: t.occ.shape.clone(),
        });
    }
    let occ = g.slice(pred, 0, 0, 1)?;
    let bce = g.bce_with_logits(occ, &t.occ, &t.occ_weight)?;
    let bce = g.scale(bce, 1.0 / t.occ_weight.sum());
    if t.positives == 0 {
        return Ok(bce);
    }
    let npos = t.positives as f64;
    let reg = g.slice(pred, 0, 1, REG_CHANNELS)?;
    let diff = g.sub(reg, g.constant(t.reg.clone()))?;
    let l1 = g.mul_const(g.abs(diff), &t.reg_mask)?;
    let l1 = g.scale(g.sum(l1), 1.0 / npos);
    let logits = g.slice(pred, 0, 1 + REG_CHANNELS, k)?;
    let probs = g.softmax(logits, 0)?;
    let picked = g.sum_axis(g.mul_const(probs, &t.cls)?, 0)?;
    let logp = g.ln_clamped(picked, CLASS_EPS);
    let mask = Tensor::new(&t.occ.shape[1..], t.occ.data.clone())?;
    let ce = g.scale(g.sum(g.mul_const(logp, &mask)?), -1.0 / npos);
    let total = g.add(bce, l1)?;
    g.add(total, ce)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub threshold: f64,
    pub nms_radius_cells: f64,
    /// Box height per class (the head does not regress height).
    pub class_heights: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decode local occupancy maxima above the threshold, then suppress boxes
/// closer than the NMS radius to a higher-scoring one.
pub fn detect(head_out: &Tensor, bev: &BevGrid, cfg: &DetectConfig) -> Result<Vec<Box3D>> {
    let k = cfg.class_heights.len();
    if head_out.rank() != 3 || head_out.shape[0] != 1 + REG_CHANNELS + k || head_out.shape[1] != bev.cells_y || head_out.shape[2] != bev.cells_x {
        return Err(Error::ShapeMismatch {
            op: "detect",
            lhs: head_out.shape.clone(),
            rhs: vec![1 + REG_CHANNELS + k, bev.cells_y, bev.cells_x],
        });
    }
    let (n, m) = (bev.cells_y, bev.cells_x);
    let nm = n * m;
    let d = &head_out.data;
    let mut cands = Vec::new();
    for r in 0..n {
        for c in 0..m {
            let idx = r * m + c;
            let logit = d[idx];
            let p = sigmoid(logit);
            if p <= cfg.threshold {
                continue;
            }
            let mut is_max = true;
            for rr in r.saturating_sub(1)..(r + 2).min(n) {
                for cc in c.saturating_sub(1)..(c + 2).min(m) {
                    let j = rr * m + cc;
                    if j != idx && (d[j] > logit || (d[j] == logit && j < idx)) {
                        is_max = false;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let ch = |q: usize| d[q * nm + idx];
            let (cx, cy) = bev.cell_center(r, c);
            let class = (0..k)
                .max_by(|&a, &b| ch(7 + a).total_cmp(&ch(7 + b)).then(b.cmp(&a)))
                .unwrap_or(0);
            let h = cfg.class_heights[class];
            let yaw = ch(5).atan2(ch(6));
            let b = Box3D::new(
                [cx + ch(1) * bev.cell_size, cy + ch(2) * bev.cell_size, h / 2.0],
                [ch(3).max(0.1), ch(4).max(0.1), h],
                if yaw.is_finite() { yaw } else { 0.0 },
                class,
                p,
            )?;
            cands.push(b);
        }
    }
    cands.sort_by(crate::boxfusion::fusion_order);
    let radius = cfg.nms_radius_cells * bev.cell_size;
    let mut keep: Vec<Box3D> = Vec::new();
    for b in cands {
        if keep.iter().all(|o| o.distance_2d(&b) >= radius) {
            keep.push(b);
        }
    }
    Ok(keep)
}

/// Mean channel-summed activation over cells whose centre lies outside every
/// box footprint.
pub fn background_activation(features: &Tensor, boxes: &[Box3D], bev: &BevGrid) -> f64 {
    let nm = bev.num_cells();
    let ch = features.numel() / nm.max(1);
    let mut total = 0.0;
    let mut cells = 0usize;
    for r in 0..bev.cells_y {
        for c in 0..bev.cells_x {
            let (x, y) = bev.cell_center(r, c);
            if boxes.iter().any(|b| b.contains_2d(x, y)) {
                continue;
            }
            let k = bev.index(r, c);
            total += (0..ch).map(|q| features.data[q * nm + k]).sum::<f64>();
            cells += 1;
        }
    }
    if cells == 0 {
        0.0
    } else {
        total / cells as f64
    }
}
