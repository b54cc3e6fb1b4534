//! Mini-batch training and evaluation of the toy detector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth::{depth_metrics, mean_depth, mode_depth, DepthMetrics};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Forward, Model, Rig, SceneInputs};
use crate::projection::Variant;
use crate::synthscene::{BucketReport, DEFAULT_DISTANCE_EDGES, DEFAULT_SIZE_EDGES};
use crate::temporal::{check_ordered, ego_compensate, run_sequence};
use crate::tensor::optim::AdamW;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes (or sequence windows) per optimiser step.
    pub batch: usize,
    pub lr: f64,
    /// Multiplier on `lr` for the camera backbone.
    pub backbone_lr_scale: f64,
    /// Cosine decay ends at `lr * final_lr_scale`.
    pub final_lr_scale: f64,
    /// Epochs of linear warmup from zero at the start of each phase.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Depth-only epochs run before the main phase; the depth path is then
    /// frozen.
    pub pretrain_epochs: usize,
    /// Parameter name prefixes excluded from updates.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 1,
            lr: 5e-3,
            backbone_lr_scale: 0.05,
            final_lr_scale: 0.1,
            warmup_epochs: 0,
            weight_decay: 1e-4,
            lambda: 0.0,
            seed: 0,
            pretrain_epochs: 0,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch: must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr: must be positive".into()));
        }
        if !(self.backbone_lr_scale >= 0.0) {
            return Err(Error::Config("backbone_lr_scale: must be non-negative".into()));
        }
        if !(self.final_lr_scale > 0.0 && self.final_lr_scale <= 1.0) {
            return Err(Error::Config("final_lr_scale: must lie in (0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay: must be non-negative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda: must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub detection: f64,
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }
}

pub const CURVE_HEADER: &str = "epoch,phase,total,detection,depth";

pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.phase.name(), e.total, e.detection, e.depth));
    }
    s
}

struct Sample {
    grads: Vec<Vec<f64>>,
    total: f64,
    detection: f64,
    depth: f64,
}

fn optimiser(model: &Model, cfg: &TrainConfig) -> AdamW {
    AdamW::new(&model.store, cfg.lr, cfg.weight_decay).with_scale("camera.", cfg.backbone_lr_scale)
}

fn collect(model: &Model, g: &Graph, root: crate::tensor::Var) -> Result<Vec<Vec<f64>>> {
    let grads = g.backward(root).map_err(|e| match e {
        Error::NonFinite(what) => Error::Diverged(format!("non-finite {what}")),
        other => other,
    })?;
    let mut out = vec![Vec::new(); model.store.len()];
    for (id, gr) in grads.params() {
        out[id.0] = gr.to_vec();
    }
    Ok(out)
}

fn scene_sample(model: &Model, rig: &Rig, inp: &SceneInputs, lambda: f64, depth_only: bool) -> Result<Sample> {
    let g = Graph::with_params(&model.store);
    let fwd = model.forward(&g, inp, rig, None)?;
    let parts = model.loss(&g, &fwd, inp, lambda)?;
    let depth = parts.depth.map(|d| g.scalar(d)).unwrap_or(0.0);
    let root = if depth_only {
        parts
            .depth
            .ok_or_else(|| Error::Unsupported("depth pretraining needs a depth head".into()))?
    } else {
        parts.total
    };
    Ok(Sample {
        grads: collect(model, &g, root)?,
        total: g.scalar(root),
        detection: g.scalar(parts.detection),
        depth,
    })
}

/// Loss over a time-ordered window with the fused state carried (and
/// differentiated) through ego compensation.
fn window_sample(model: &Model, rig: &Rig, frames: &[SceneInputs], lambda: f64) -> Result<Sample> {
    let g = Graph::with_params(&model.store);
    let mut prev: Option<(crate::tensor::Var, crate::temporal::EgoPose)> = None;
    let (mut total, mut det, mut dep) = (None, 0.0, 0.0);
    for f in frames {
        let history = match (&prev, &model.tfa) {
            (Some((v, pose)), Some(_)) => Some(ego_compensate(&g, *v, pose, &f.pose, &model.cfg.bev)?),
            _ => None,
        };
        let fwd: Forward = model.forward(&g, f, rig, history)?;
        let parts = model.loss(&g, &fwd, f, lambda)?;
        det += g.scalar(parts.detection);
        dep += parts.depth.map(|d| g.scalar(d)).unwrap_or(0.0);
        total = Some(match total {
            None => parts.total,
            Some(t) => g.add(t, parts.total)?,
        });
        prev = Some((fwd.fused, f.pose));
    }
    let n = frames.len().max(1) as f64;
    let root = g.scale(total.ok_or_else(|| Error::Config("empty training window".into()))?, 1.0 / n);
    Ok(Sample {
        grads: collect(model, &g, root)?,
        total: g.scalar(root),
        detection: det / n,
        depth: dep / n,
    })
}

/// Sum per-item gradients in index order, average, and step.
fn apply(model: &mut Model, opt: &mut AdamW, samples: &[Sample]) {
    let n = samples.len() as f64;
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); model.store.len()];
    for s in samples {
        for (a, g) in acc.iter_mut().zip(&s.grads) {
            if g.is_empty() {
                continue;
            }
            if a.is_empty() {
                a.resize(g.len(), 0.0);
            }
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    opt.step(&mut model.store, &acc);
}

fn run_epochs<F>(
    model: &mut Model,
    cfg: &TrainConfig,
    n_items: usize,
    epochs: usize,
    phase: Phase,
    stream: u64,
    curve: &mut Vec<EpochStats>,
    sample: F,
) -> Result<()>
where
    F: Fn(&Model, usize) -> Result<Sample> + Sync + Send,
{
    let mut opt = optimiser(model, cfg);
    let mut order: Vec<usize> = (0..n_items).collect();
    let total_steps = (epochs * n_items.div_ceil(cfg.batch)).max(1);
    let warmup_steps = (cfg.warmup_epochs.min(epochs) * n_items.div_ceil(cfg.batch)).max(1);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64) << 32);
        order.shuffle(&mut rng);
        let (mut tot, mut det, mut dep) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let m: &Model = model;
            let samples = exec::try_map(chunk.len(), |i| sample(m, chunk[i]))
                .map_err(|e| with_context(e, phase, epoch))?;
            for s in &samples {
                tot += s.total;
                det += s.detection;
                dep += s.depth;
            }
            let t = step as f64 / total_steps as f64;
            let warm = ((step + 1) as f64 / warmup_steps as f64).min(1.0);
            opt.lr = warm * cfg.lr * (cfg.final_lr_scale + (1.0 - cfg.final_lr_scale) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
            step += 1;
            apply(model, &mut opt, &samples);
        }
        let n = n_items.max(1) as f64;
        curve.push(EpochStats {
            epoch,
            phase,
            total: tot / n,
            detection: det / n,
            depth: dep / n,
        });
    }
    Ok(())
}

fn with_context(e: Error, phase: Phase, epoch: usize) -> Error {
    match e {
        Error::Diverged(msg) => Error::Diverged(format!("{msg} ({} epoch {epoch})", phase.name())),
        other => other,
    }
}

fn apply_freeze(model: &mut Model, prefixes: &[String]) {
    for p in prefixes {
        model.store.set_trainable(p, false);
    }
}

/// Train on independent scenes. Returns the per-epoch loss curve.
pub fn train(model: &mut Model, rig: &Rig, data: &[SceneInputs], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("train: no training scenes".into()));
    }
    let mut curve = Vec::new();
    apply_freeze(model, &cfg.freeze);
    if cfg.pretrain_epochs > 0 {
        if model.variant() != Variant::LiftSplat {
            return Err(Error::Config("pretrain_epochs: only the lift_splat variant has a depth head".into()));
        }
        run_epochs(model, cfg, data.len(), cfg.pretrain_epochs, Phase::Pretrain, 1, &mut curve, |m, i| {
            scene_sample(m, rig, &data[i], 1.0, true)
        })?;
        model.store.set_trainable("depth.", false);
        model.store.set_trainable("camera.", false);
    }
    let lambda = cfg.lambda;
    run_epochs(model, cfg, data.len(), cfg.epochs, Phase::Main, 2, &mut curve, |m, i| {
        scene_sample(m, rig, &data[i], lambda, false)
    })?;
    Ok(curve)
}

/// Train over every length-`window` run of consecutive frames in each
/// sequence.
pub fn train_sequences(
    model: &mut Model,
    rig: &Rig,
    sequences: &[Vec<SceneInputs>],
    window: usize,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if window == 0 {
        return Err(Error::Config("tfa_window: must be at least 1".into()));
    }
    let mut windows = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        check_ordered(seq)?;
        for start in 0..seq.len().saturating_sub(window - 1) {
            windows.push((s, start));
        }
    }
    if windows.is_empty() {
        return Err(Error::Config("tfa_window: longer than every sequence".into()));
    }
    apply_freeze(model, &cfg.freeze);
    let mut curve = Vec::new();
    let lambda = cfg.lambda;
    run_epochs(model, cfg, windows.len(), cfg.epochs, Phase::Main, 3, &mut curve, |m, i| {
        let (s, start) = windows[i];
        window_sample(m, rig, &sequences[s][start..start + window], lambda)
    })?;
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthDecode {
    Mean,
    Mode,
}

/// Detection buckets and, for variants with a depth distribution, pooled
/// depth metrics over all cameras with lidar ground truth.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub buckets: BucketReport,
    pub depth: Option<DepthMetrics>,
    pub detections: Vec<Vec<crate::boxfusion::Box3D>>,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        self.buckets.toy_score()
    }
}

struct SceneEval {
    boxes: Vec<crate::boxfusion::Box3D>,
    depth: Vec<(DepthMetrics, usize)>,
}

fn decode_depth(p: &Tensor, model: &Model, how: DepthDecode) -> Result<Vec<f64>> {
    match how {
        DepthDecode::Mean => mean_depth(p, &model.cfg.bins),
        DepthDecode::Mode => mode_depth(p, &model.cfg.bins),
    }
}

pub fn evaluate(model: &Model, rig: &Rig, data: &[SceneInputs], how: DepthDecode) -> Result<EvalReport> {
    let per = exec::try_map(data.len(), |i| {
        let inp = &data[i];
        let g = Graph::with_params(&model.store);
        let fwd = model.forward(&g, inp, rig, None)?;
        let boxes = model.decode(&g.value(fwd.head))?;
        let probs: Vec<Tensor> = match model.variant() {
            Variant::LiftSplat => fwd.depth_probs.iter().map(|&p| g.value(p)).collect(),
            Variant::LidarDepth => inp.depth_onehot.clone(),
            _ => Vec::new(),
        };
        let mut depth = Vec::new();
        for (p, gt) in probs.iter().zip(&inp.depth_gt) {
            let n = gt.defined_count();
            if n == 0 {
                continue;
            }
            depth.push((depth_metrics(&decode_depth(p, model, how)?, gt)?, n));
        }
        Ok::<_, Error>(SceneEval { boxes, depth })
    })?;
    let mut buckets = BucketReport::new(&DEFAULT_DISTANCE_EDGES, &DEFAULT_SIZE_EDGES);
    let mut parts = Vec::new();
    let mut detections = Vec::with_capacity(per.len());
    for (s, inp) in per.into_iter().zip(data) {
        buckets.add(&s.boxes, &inp.boxes);
        parts.extend(s.depth);
        detections.push(s.boxes);
    }
    let depth = if parts.is_empty() {
        None
    } else {
        Some(DepthMetrics::pooled(&parts)?)
    };
    Ok(EvalReport {
        buckets,
        depth,
        detections,
    })
}

/// Bucketed detection scores of autoregressive inference over sequences.
pub fn evaluate_sequences(model: &Model, rig: &Rig, sequences: &[Vec<SceneInputs>], window: usize) -> Result<BucketReport> {
    let per = exec::try_map(sequences.len(), |i| run_sequence(&sequences[i], model, rig, window))?;
    let mut buckets = BucketReport::new(&DEFAULT_DISTANCE_EDGES, &DEFAULT_SIZE_EDGES);
    for (dets, seq) in per.iter().zip(sequences) {
        for (d, f) in dets.iter().zip(seq) {
            buckets.add(d, &f.boxes);
        }
    }
    Ok(buckets)
}
