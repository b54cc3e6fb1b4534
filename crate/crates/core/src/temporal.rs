//! Temporal aggregation of fused BEV features: ego-motion compensation of the
//! previous state by bilinear resampling, and a residual 3x3 conv merge.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::boxfusion::{wrap_yaw, Box3D};
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::model::{Model, Rig, SceneInputs};
use crate::tensor::nn::Conv2d;
use crate::tensor::{Graph, ParamStore, SparseMap, Tensor, Var};

/// Planar rigid transform `world <- ego` with a timestamp in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoPose {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
    pub timestamp: f64,
}

impl EgoPose {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            tx: 0.0,
            ty: 0.0,
            timestamp: 0.0,
        }
    }

    pub fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * x - s * y + self.tx, s * x + c * y + self.ty)
    }

    pub fn to_ego(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.tx, y - self.ty);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// World-frame box expressed in this ego frame.
    pub fn box_to_ego(&self, b: &Box3D) -> Box3D {
        let (x, y) = self.to_ego(b.center[0], b.center[1]);
        let (s, c) = self.theta.sin_cos();
        let v = b.velocity;
        Box3D {
            center: [x, y, b.center[2]],
            yaw: wrap_yaw(b.yaw - self.theta),
            velocity: [c * v[0] + s * v[1], -s * v[0] + c * v[1]],
            ..*b
        }
    }

    /// Ego-frame box expressed in the world frame.
    pub fn box_to_world(&self, b: &Box3D) -> Box3D {
        let (x, y) = self.to_world(b.center[0], b.center[1]);
        let (s, c) = self.theta.sin_cos();
        let v = b.velocity;
        Box3D {
            center: [x, y, b.center[2]],
            yaw: wrap_yaw(b.yaw + self.theta),
            velocity: [c * v[0] - s * v[1], s * v[0] + c * v[1]],
            ..*b
        }
    }
}

/// Resampling that carries a map in `prev`'s ego frame into `cur`'s. Each
/// current cell centre is sampled bilinearly in the previous grid; samples
/// outside it are zero.
pub fn compensation_map(prev: &EgoPose, cur: &EgoPose, bev: &BevGrid) -> SparseMap {
    let mut rows = Vec::with_capacity(bev.num_cells());
    for r in 0..bev.cells_y {
        for c in 0..bev.cells_x {
            let (x, y) = bev.cell_center(r, c);
            let (wx, wy) = cur.to_world(x, y);
            let (px, py) = prev.to_ego(wx, wy);
            rows.push(bev.bilinear(px, py).unwrap_or_default());
        }
    }
    SparseMap::from_rows(bev.num_cells(), rows)
}

/// Align `prev[C,N,M]` (in `prev_pose`'s frame) to `cur_pose`.
pub fn ego_compensate(g: &Graph, prev: Var, prev_pose: &EgoPose, cur_pose: &EgoPose, bev: &BevGrid) -> Result<Var> {
    let s = g.shape(prev);
    if s.len() != 3 || s[1] != bev.cells_y || s[2] != bev.cells_x {
        return Err(Error::ShapeMismatch {
            op: "ego_compensate",
            lhs: s,
            rhs: vec![bev.cells_y, bev.cells_x],
        });
    }
    let map = Arc::new(compensation_map(prev_pose, cur_pose, bev));
    let flat = g.reshape(prev, &[s[0], bev.num_cells()])?;
    let out = g.sparse_map(flat, &map)?;
    g.reshape(out, &s)
}

pub fn ego_compensate_tensor(prev: &Tensor, prev_pose: &EgoPose, cur_pose: &EgoPose, bev: &BevGrid) -> Result<Tensor> {
    let g = Graph::new();
    let v = g.constant(prev.clone());
    let out = ego_compensate(&g, v, prev_pose, cur_pose, bev)?;
    Ok(g.value(out))
}

/// `cur + gelu(conv3x3([prev; cur]))`; zero conv weights pass `cur` through.
#[derive(Clone, Debug)]
pub struct TfaMerge {
    pub conv: Conv2d,
    pub channels: usize,
}

impl TfaMerge {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, "tfa.conv", 2 * channels, channels, 3, rng)?,
            channels,
        })
    }

    pub fn merge(&self, g: &Graph, prev_aligned: Var, cur: Var) -> Result<Var> {
        let (ps, cs) = (g.shape(prev_aligned), g.shape(cur));
        if ps != cs || cs.first() != Some(&self.channels) {
            return Err(Error::ShapeMismatch {
                op: "tfa_merge",
                lhs: ps,
                rhs: cs,
            });
        }
        let cat = g.concat(&[prev_aligned, cur], 0)?;
        let h = g.gelu(self.conv.forward(g, cat)?);
        g.add(cur, h)
    }
}

pub fn check_ordered(frames: &[SceneInputs]) -> Result<()> {
    for (i, w) in frames.windows(2).enumerate() {
        if !(w[1].pose.timestamp > w[0].pose.timestamp) {
            return Err(Error::Unordered(i + 1));
        }
    }
    Ok(())
}

/// Autoregressive inference over a time-ordered run. With `window <= 1` or a
/// model without a merge block, frames are processed independently.
pub fn run_sequence(frames: &[SceneInputs], model: &Model, rig: &Rig, window: usize) -> Result<Vec<Vec<Box3D>>> {
    check_ordered(frames)?;
    let carry = window > 1 && model.tfa.is_some();
    let mut state: Option<(Tensor, EgoPose)> = None;
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let g = Graph::with_params(&model.store);
        let history = match (&state, carry) {
            (Some((prev, pose)), true) => {
                let aligned = ego_compensate_tensor(prev, pose, &f.pose, &model.cfg.bev)?;
                Some(g.constant(aligned))
            }
            _ => None,
        };
        let fwd = model.forward(&g, f, rig, history)?;
        out.push(model.decode(&g.value(fwd.head))?);
        if carry {
            state = Some((g.value(fwd.fused), f.pose));
        }
    }
    Ok(out)
}

/// Pose log: one `timestamp theta tx ty` line per frame.
pub fn pose_log(poses: &[EgoPose]) -> String {
    let mut s = String::from("# timestamp theta tx ty\n");
    for p in poses {
        let _ = writeln!(s, "{} {} {} {}", p.timestamp, p.theta, p.tx, p.ty);
    }
    s
}

pub fn parse_pose_log(text: &str) -> Result<Vec<EgoPose>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad pose value {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("pose line needs 4 values: {line:?}")));
        }
        out.push(EgoPose {
            timestamp: v[0],
            theta: v[1],
            tx: v[2],
            ty: v[3],
        });
    }
    Ok(out)
}
