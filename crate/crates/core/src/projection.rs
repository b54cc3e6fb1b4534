//! Camera-to-BEV projection: Lift-Splat with learned, uniform or lidar depth,
//! and Lift-Attend-Splat, where lidar features lifted onto each camera's
//! projected horizon cross-attend to the encoded camera column.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::ProjectedHorizon;
use crate::tensor::nn::{DecoderLayer, EncoderLayer, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Tolerance on `sum_n D_n = 1` for learned depth distributions.
pub const DEPTH_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    LiftSplat,
    Uniform,
    LiftAttendSplat,
    LidarDepth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::LiftSplat,
        Variant::Uniform,
        Variant::LiftAttendSplat,
        Variant::LidarDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LiftSplat => "lift_splat",
            Variant::Uniform => "uniform",
            Variant::LiftAttendSplat => "lift_attend_splat",
            Variant::LidarDepth => "lidar_depth",
        }
    }

    pub fn has_depth_head(self) -> bool {
        self == Variant::LiftSplat
    }

    pub fn uses_context(self) -> bool {
        self != Variant::LiftAttendSplat
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown projector {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorConfig {
    pub variant: Variant,
    pub n_depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub tied_heads: bool,
    /// Camera feature channels entering the projector.
    pub cam_channels: usize,
    /// Lidar BEV channels (queries for Lift-Attend-Splat).
    pub lidar_channels: usize,
    /// Channels of the projected camera stream.
    pub out_channels: usize,
    /// Camera feature-map height `H` (sets the height embedding size).
    pub feat_height: usize,
}

impl ProjectorConfig {
    /// Desk-scale defaults: 24 depth bins, `d_model` 32, one encoder and one
    /// decoder layer with 4 untied heads, 8-channel streams, `H` = 12.
    /// Tied heads at this width leave an 8-wide value path and train poorly.
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            n_depth: 24,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            tied_heads: false,
            cam_channels: 8,
            lidar_channels: 8,
            out_channels: 8,
            feat_height: 12,
        }
    }

    /// Full-size attention projector: 143 bins, `d_model` 256, `d_ff` 512,
    /// 8 tied heads, `H` = 56, with 256-channel camera, lidar and output
    /// streams.
    pub fn full_scale() -> Self {
        Self {
            variant: Variant::LiftAttendSplat,
            n_depth: 143,
            d_model: 256,
            d_ff: 512,
            heads: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            tied_heads: true,
            cam_channels: 256,
            lidar_channels: 256,
            out_channels: 256,
            feat_height: 56,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.n_depth == 0 {
            return bad("n_depth", "must be at least 1");
        }
        if self.cam_channels == 0 || self.out_channels == 0 || self.feat_height == 0 {
            return bad("channels", "camera, output channels and feature height must be positive");
        }
        if self.variant == Variant::LiftAttendSplat {
            if self.decoder_layers == 0 {
                return bad("decoder_layers", "must be at least 1 for lift_attend_splat");
            }
            if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
                return bad("heads", "must divide d_model");
            }
            if self.d_ff == 0 || self.lidar_channels == 0 {
                return bad("d_ff", "d_ff and lidar channels must be positive");
            }
        }
        if self.variant == Variant::LiftSplat && self.d_model == 0 {
            return bad("d_model", "depth head width must be positive");
        }
        Ok(())
    }
}

/// Scalar parameter count of the projection module alone.
pub fn count_parameters(cfg: &ProjectorConfig) -> usize {
    let mut n = 0;
    if cfg.variant.uses_context() {
        n += Linear::param_count(cfg.cam_channels, cfg.out_channels);
    }
    if cfg.variant.has_depth_head() {
        n += DepthHead::param_count(cfg.cam_channels, cfg.d_model, cfg.n_depth);
    }
    if cfg.variant == Variant::LiftAttendSplat {
        let d = cfg.d_model;
        n += Linear::param_count(cfg.cam_channels, d)
            + Linear::param_count(cfg.lidar_channels, d)
            + (cfg.feat_height + cfg.n_depth) * d
            + cfg.encoder_layers * EncoderLayer::param_count(d, cfg.d_ff, cfg.heads, cfg.tied_heads)
            + cfg.decoder_layers * DecoderLayer::param_count(d, cfg.d_ff, cfg.heads, cfg.tied_heads)
            + 2 * 2 * d
            + Linear::param_count(d, cfg.out_channels);
    }
    n
}

/// Per-pixel depth classifier: `softmax(W2 gelu(W1 x))` over `N_D` bins.
#[derive(Clone, Debug)]
pub struct DepthHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl DepthHead {
    pub fn new(store: &mut ParamStore, c_in: usize, hidden: usize, n_depth: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, "depth.l1", c_in, hidden, rng)?,
            l2: Linear::new(store, "depth.l2", hidden, n_depth, rng)?,
        })
    }

    pub fn param_count(c_in: usize, hidden: usize, n_depth: usize) -> usize {
        Linear::param_count(c_in, hidden) + Linear::param_count(hidden, n_depth)
    }

    /// `feats[C,H,W]` to depth probabilities `[N_D,H,W]`.
    pub fn forward(&self, g: &Graph, feats: Var) -> Result<Var> {
        let x = g.permute(feats, &[1, 2, 0])?;
        let h = g.gelu(self.l1.forward(g, x)?);
        let logits = self.l2.forward(g, h)?;
        let p = g.softmax(logits, 2)?;
        g.permute(p, &[2, 0, 1])
    }
}

/// Per-pixel linear map `[C,H,W] -> [C',H,W]`.
pub fn pixelwise(g: &Graph, layer: &Linear, x: Var) -> Result<Var> {
    let t = g.permute(x, &[1, 2, 0])?;
    let y = layer.forward(g, t)?;
    g.permute(y, &[2, 0, 1])
}

fn check_volume(g: &Graph, context: Var, depth: Var, horizon: &ProjectedHorizon) -> Result<(usize, usize, usize)> {
    let cs = g.shape(context);
    let ds = g.shape(depth);
    if cs.len() != 3 || ds.len() != 3 || cs[1..] != ds[1..] || ds[0] != horizon.n_depth || cs[2] != horizon.width {
        return Err(Error::ShapeMismatch {
            op: "lift_splat_project",
            lhs: cs,
            rhs: ds,
        });
    }
    Ok((cs[0], cs[1], cs[2]))
}

/// Outer product of context and depth per pixel, summed over image height
/// onto the `[C',N_D,W]` horizon grid.
fn volume_to_horizon(g: &Graph, context: Var, depth: Var) -> Result<Var> {
    let ctx = g.permute(context, &[2, 0, 1])?;
    let d = g.permute(depth, &[2, 1, 0])?;
    let per_col = g.bmm(ctx, d, false)?;
    g.permute(per_col, &[1, 2, 0])
}

/// Lift-Splat projection of `context[C',H,W]` weighted by a normalised depth
/// distribution `depth[N_D,H,W]`.
pub fn lift_splat_project(g: &Graph, context: Var, depth: Var, horizon: &ProjectedHorizon) -> Result<Var> {
    let (_, h, w) = check_volume(g, context, depth, horizon)?;
    let n_d = horizon.n_depth;
    g.with_data(depth, |d| {
        for k in 0..h * w {
            let s: f64 = (0..n_d).map(|b| d[b * h * w + k]).sum();
            if (s - 1.0).abs() > DEPTH_NORM_TOL {
                return Err(Error::Unnormalized(s));
            }
        }
        Ok(())
    })?;
    let grid = volume_to_horizon(g, context, depth)?;
    horizon.splat(g, grid)
}

/// Lift-Splat with an arbitrary (possibly partial) depth weighting, such as a
/// one-hot lidar depth that is zero at pixels without a return.
pub fn weighted_project(g: &Graph, context: Var, depth: Var, horizon: &ProjectedHorizon) -> Result<Var> {
    check_volume(g, context, depth, horizon)?;
    let grid = volume_to_horizon(g, context, depth)?;
    horizon.splat(g, grid)
}

/// Every feature placed at every depth with weight one.
pub fn uniform_project(g: &Graph, context: Var, horizon: &ProjectedHorizon) -> Result<Var> {
    let cs = g.shape(context);
    if cs.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "uniform_project",
            lhs: cs,
            rhs: vec![horizon.n_depth, horizon.width],
        });
    }
    let ones = g.constant(Tensor::ones(&[horizon.n_depth, cs[1], cs[2]]));
    weighted_project(g, context, ones, horizon)
}

/// Elementwise sum of per-camera BEV maps and the union of their coverage.
pub fn merge_cameras(g: &Graph, per_cam: &[Var], coverage: &[&[bool]]) -> Result<(Var, Vec<bool>)> {
    let (&first, rest) = per_cam
        .split_first()
        .ok_or_else(|| Error::Config("merge_cameras needs at least one camera".into()))?;
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v)?;
    }
    let n = coverage.first().map_or(0, |c| c.len());
    let mut union = vec![false; n];
    for c in coverage {
        if c.len() != n {
            return Err(Error::ShapeMismatch {
                op: "merge_cameras",
                lhs: vec![n],
                rhs: vec![c.len()],
            });
        }
        for (u, &x) in union.iter_mut().zip(c.iter()) {
            *u |= x;
        }
    }
    Ok((acc, union))
}

/// Transformer projector shared across all cameras and columns.
#[derive(Clone, Debug)]
pub struct AttendSplat {
    pub cam_in: Linear,
    pub lidar_in: Linear,
    pub pos_height: ParamId,
    pub pos_depth: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_norm: LayerNorm,
    pub dec_norm: LayerNorm,
    pub out: Linear,
    pub d_model: usize,
}

/// Lift-Attend-Splat result: per-camera BEV maps and, from the last decoder
/// layer, cross-attention weights `[cams*W, N_D, H]` (head-replicated rows
/// `[cams*W*heads, N_D, H]` when heads are untied).
pub struct AttendOutput {
    pub per_camera: Vec<Var>,
    pub attention: Var,
}

impl AttendSplat {
    pub fn new(store: &mut ParamStore, cfg: &ProjectorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut encoder = Vec::new();
        for i in 0..cfg.encoder_layers {
            encoder.push(EncoderLayer::new(store, &format!("proj.enc{i}"), d, cfg.d_ff, cfg.heads, cfg.tied_heads, rng)?);
        }
        let mut decoder = Vec::new();
        for i in 0..cfg.decoder_layers {
            decoder.push(DecoderLayer::new(store, &format!("proj.dec{i}"), d, cfg.d_ff, cfg.heads, cfg.tied_heads, rng)?);
        }
        Ok(Self {
            cam_in: Linear::new(store, "proj.cam_in", cfg.cam_channels, d, rng)?,
            lidar_in: Linear::new(store, "proj.lidar_in", cfg.lidar_channels, d, rng)?,
            pos_height: store.add_normal("proj.pos_height", &[cfg.feat_height, d], 0.02, rng)?,
            pos_depth: store.add_normal("proj.pos_depth", &[cfg.n_depth, d], 0.02, rng)?,
            encoder,
            decoder,
            enc_norm: LayerNorm::new(store, "proj.enc_norm", d)?,
            dec_norm: LayerNorm::new(store, "proj.dec_norm", d)?,
            out: Linear::new(store, "proj.out", d, cfg.out_channels, rng)?,
            d_model: d,
        })
    }

    fn add_positions(&self, g: &Graph, x: Var, pos: ParamId) -> Result<Var> {
        let s = g.shape(x);
        let p = g.reshape(g.param(pos), &[1, s[1], s[2]])?;
        let tiled = g.concat(&vec![p; s[0]], 0)?;
        g.add(x, tiled)
    }

    /// Project every camera; `cam_feats[i]` is `[C_c,H,W]` for camera `i`.
    pub fn forward(&self, g: &Graph, bev_lidar: Var, cam_feats: &[Var], horizons: &[ProjectedHorizon]) -> Result<AttendOutput> {
        if cam_feats.len() != horizons.len() || cam_feats.is_empty() {
            return Err(Error::Config(format!(
                "{} camera feature maps for {} horizons",
                cam_feats.len(),
                horizons.len()
            )));
        }
        let mut queries = Vec::with_capacity(horizons.len());
        let mut keys = Vec::with_capacity(horizons.len());
        for (&f, hz) in cam_feats.iter().zip(horizons) {
            let fs = g.shape(f);
            if fs.len() != 3 || fs[2] != hz.width {
                return Err(Error::ShapeMismatch {
                    op: "lift_attend_splat",
                    lhs: fs,
                    rhs: vec![hz.n_depth, hz.width],
                });
            }
            let lifted = hz.lift(g, bev_lidar)?;
            queries.push(g.permute(lifted, &[2, 1, 0])?);
            keys.push(g.permute(f, &[2, 1, 0])?);
        }
        let q = g.concat(&queries, 0)?;
        let k = g.concat(&keys, 0)?;
        let q = self.add_positions(g, self.lidar_in.forward(g, q)?, self.pos_depth)?;
        let mut mem = self.add_positions(g, self.cam_in.forward(g, k)?, self.pos_height)?;
        for layer in &self.encoder {
            mem = layer.forward(g, mem)?;
        }
        let mem = self.enc_norm.forward(g, mem)?;
        let mut x = q;
        let mut attention = None;
        for layer in &self.decoder {
            let (y, att) = layer.forward(g, x, mem)?;
            x = y;
            attention = Some(att.weights);
        }
        let x = self.dec_norm.forward(g, x)?;
        let fused = self.out.forward(g, x)?;
        let mut per_camera = Vec::with_capacity(horizons.len());
        let mut offset = 0;
        for hz in horizons {
            let part = g.slice(fused, 0, offset, hz.width)?;
            offset += hz.width;
            let grid = g.permute(part, &[2, 1, 0])?;
            per_camera.push(hz.splat(g, grid)?);
        }
        Ok(AttendOutput {
            per_camera,
            attention: attention.ok_or_else(|| Error::Config("decoder_layers must be at least 1".into()))?,
        })
    }
}

/// The projection module for one [`Variant`].
#[derive(Clone, Debug)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    pub context: Option<Linear>,
    pub depth: Option<DepthHead>,
    pub attend: Option<AttendSplat>,
}

pub struct ProjectionOutput {
    /// Camera stream merged over cameras, `[C_out,N,M]`.
    pub bev: Var,
    pub coverage: Vec<bool>,
    /// Learned depth probabilities per camera (Lift-Splat only).
    pub depth_probs: Vec<Var>,
    pub attention: Option<Var>,
}

impl Projector {
    pub fn new(store: &mut ParamStore, cfg: &ProjectorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let context = if cfg.variant.uses_context() {
            Some(Linear::new(store, "context", cfg.cam_channels, cfg.out_channels, rng)?)
        } else {
            None
        };
        let depth = if cfg.variant.has_depth_head() {
            Some(DepthHead::new(store, cfg.cam_channels, cfg.d_model, cfg.n_depth, rng)?)
        } else {
            None
        };
        let attend = if cfg.variant == Variant::LiftAttendSplat {
            Some(AttendSplat::new(store, cfg, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            context,
            depth,
            attend,
        })
    }

    /// Project all cameras. `lidar_depth[i]` (one-hot `[N_D,H,W]`) is required
    /// by the lidar-depth variant only.
    pub fn forward(
        &self,
        g: &Graph,
        cam_feats: &[Var],
        bev_lidar: Var,
        horizons: &[ProjectedHorizon],
        lidar_depth: Option<&[Tensor]>,
    ) -> Result<ProjectionOutput> {
        if cam_feats.len() != horizons.len() {
            return Err(Error::Config(format!(
                "{} camera feature maps for {} horizons",
                cam_feats.len(),
                horizons.len()
            )));
        }
        let mut per_cam = Vec::with_capacity(horizons.len());
        let mut depth_probs = Vec::new();
        let mut attention = None;
        if let Some(att) = &self.attend {
            let out = att.forward(g, bev_lidar, cam_feats, horizons)?;
            per_cam = out.per_camera;
            attention = Some(out.attention);
        } else {
            let ctx_layer = self.context.as_ref().expect("context layer for depth-based variants");
            for (i, (&f, hz)) in cam_feats.iter().zip(horizons).enumerate() {
                let ctx = pixelwise(g, ctx_layer, f)?;
                let bev = match self.cfg.variant {
                    Variant::LiftSplat => {
                        let head = self.depth.as_ref().expect("depth head for lift_splat");
                        let p = head.forward(g, f)?;
                        depth_probs.push(p);
                        lift_splat_project(g, ctx, p, hz)?
                    }
                    Variant::Uniform => uniform_project(g, ctx, hz)?,
                    Variant::LidarDepth => {
                        let maps = lidar_depth.ok_or_else(|| Error::Config("lidar_depth variant needs lidar depth maps".into()))?;
                        let d = g.constant(maps[i].clone());
                        weighted_project(g, ctx, d, hz)?
                    }
                    Variant::LiftAttendSplat => unreachable!(),
                };
                per_cam.push(bev);
            }
        }
        let cov: Vec<&[bool]> = horizons.iter().map(|h| h.coverage.as_slice()).collect();
        let (bev, coverage) = merge_cameras(g, &per_cam, &cov)?;
        Ok(ProjectionOutput {
            bev,
            coverage,
            depth_probs,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant) -> ProjectorConfig {
        ProjectorConfig {
            variant,
            n_depth: 6,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            tied_heads: true,
            cam_channels: 5,
            lidar_channels: 4,
            out_channels: 3,
            feat_height: 4,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("lss".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation_names_key() {
        let mut c = cfg(Variant::LiftAttendSplat);
        c.decoder_layers = 0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("decoder_layers"), "{e}");
        let mut c = cfg(Variant::LiftAttendSplat);
        c.heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
    }

    #[test]
    fn counts_match_store() {
        use rand::SeedableRng;
        for v in Variant::ALL {
            let mut store = ParamStore::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            Projector::new(&mut store, &cfg(v), &mut rng).unwrap();
            assert_eq!(store.count(), count_parameters(&cfg(v)), "{v}");
        }
    }
}
