//! Experiment runner behind the command-line tool.
//!
//! A run is a pure function of a [`RunConfig`] (plus any checkpoint or scene
//! files it names). Every file goes through [`RunDir`], which writes it
//! atomically and records its digest in `manifest.txt` together with the
//! config hash and seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::boxfusion::{boxes_to_csv, ensemble_pipeline, standard_tta_set, Box3D, Detector, TtaTransform, CSV_HEADER};
use crate::depth::{DepthBins, DepthMetrics};
use crate::error::{Error, Result};
use crate::exec;
use crate::fusion_head::FusionMode;
use crate::geometry::BevGrid;
use crate::io;
use crate::model::{BoundModel, Model, ModelConfig, Rig, SceneInputs};
use crate::projection::{count_parameters, Variant};
use crate::synthscene::{generate, generate_sequence, EgoMotion, RigConfig, SceneConfig, SyntheticScene};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::train::{curve_csv, evaluate, evaluate_sequences, train, train_sequences, DepthDecode, EvalReport, TrainConfig};

/// Offset separating evaluation scene seeds from training scene seeds.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtaSet {
    Identity,
    Mirror,
    Standard,
}

impl TtaSet {
    pub fn transforms(self) -> Vec<TtaTransform> {
        match self {
            TtaSet::Identity => vec![TtaTransform::IDENTITY],
            TtaSet::Mirror => vec![
                TtaTransform::IDENTITY,
                TtaTransform {
                    mirror_y: true,
                    rotation_deg: 0.0,
                },
            ],
            TtaSet::Standard => standard_tta_set(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TtaSet::Identity => "identity",
            TtaSet::Mirror => "mirror",
            TtaSet::Standard => "standard",
        }
    }
}

/// Documented configuration keys with their meaning.
pub const KEYS: &[(&str, &str)] = &[
    ("out_dir", "run directory"),
    ("variant", "lift_splat | uniform | lift_attend_splat | lidar_depth"),
    ("lambda", "depth supervision weight"),
    ("epochs", "training epochs"),
    ("batch", "scenes per optimiser step"),
    ("lr", "base learning rate"),
    ("backbone_lr_scale", "learning-rate multiplier for the camera backbone"),
    ("final_lr_scale", "learning rate at the end of the cosine schedule, as a fraction of lr"),
    ("warmup_epochs", "epochs of linear learning-rate warmup"),
    ("weight_decay", "AdamW weight decay"),
    ("pretrain_epochs", "depth-only epochs before freezing the depth path"),
    ("freeze", "comma-separated parameter prefixes kept fixed"),
    ("fusion", "cat_conv | gated_sigmoid | add"),
    ("n_depth", "depth bins"),
    ("d_min", "nearest bin edge in metres"),
    ("d_max", "farthest bin edge in metres"),
    ("d_model", "attention width (depth-head width for lift_splat)"),
    ("d_ff", "feed-forward width"),
    ("heads", "attention heads"),
    ("tied_heads", "share one set of attention weights across heads"),
    ("encoder_layers", "camera encoder layers"),
    ("decoder_layers", "decoder layers"),
    ("head_hidden", "detection head hidden channels"),
    ("bev_cells", "BEV cells per side"),
    ("cell_size", "BEV cell size in metres"),
    ("n_cameras", "cameras in the rig"),
    ("image_width", "image width in pixels"),
    ("image_height", "image height in pixels"),
    ("stride", "feature stride"),
    ("min_boxes", "fewest boxes per scene"),
    ("max_boxes", "most boxes per scene"),
    ("train_scenes", "training scenes (sequences when tfa_window > 1)"),
    ("eval_scenes", "evaluation scenes (sequences when tfa_window > 1)"),
    ("sequence_frames", "frames per generated sequence"),
    ("scene_seed", "base seed for scene generation"),
    ("model_seed", "parameter initialisation and shuffling seed"),
    ("seeds", "comma-separated model seeds for multi-seed commands"),
    ("use_lidar", "feed the lidar stream into fusion"),
    ("tfa_window", "frames per temporal window (1 disables aggregation)"),
    ("tta", "identity | mirror | standard"),
    ("score_threshold", "detection probability threshold"),
    ("nms_radius", "suppression radius in cells"),
    ("pos_weight", "occupancy loss weight of positive cells"),
    ("depth_decode", "mean | mode"),
    ("sweep_lambdas", "comma-separated lambdas for depth-sweep"),
    ("checkpoint", "checkpoint file for eval, attn-viz and saliency"),
    ("checkpoints", "comma-separated checkpoint files for ensemble"),
    ("scene", "saved scene directory (default: evaluation scene scene_index)"),
    ("scene_index", "evaluation scene used when no scene directory is given"),
    ("box_index", "ground-truth box for saliency"),
    ("ablate_fusion", "comma-separated fusion modes for ablate"),
    ("ablate_decoder_layers", "comma-separated decoder depths for ablate"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub backbone_lr_scale: f64,
    pub final_lr_scale: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub freeze: Vec<String>,
    pub fusion: FusionMode,
    pub n_depth: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub tied_heads: bool,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub head_hidden: usize,
    pub bev_cells: usize,
    pub cell_size: f64,
    pub n_cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub stride: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub sequence_frames: usize,
    pub scene_seed: u64,
    pub model_seed: u64,
    pub seeds: Vec<u64>,
    pub use_lidar: bool,
    pub tfa_window: usize,
    pub tta: TtaSet,
    pub score_threshold: f64,
    pub nms_radius: f64,
    pub pos_weight: f64,
    pub depth_decode: DepthDecode,
    pub sweep_lambdas: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub scene: Option<PathBuf>,
    pub scene_index: usize,
    pub box_index: usize,
    pub ablate_fusion: Vec<FusionMode>,
    pub ablate_decoder_layers: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let model = ModelConfig::toy(Variant::LiftAttendSplat, &scene).expect("toy defaults are valid");
        let train = TrainConfig::default();
        let p = &model.projector;
        Self {
            out_dir: PathBuf::from("run"),
            variant: Variant::LiftAttendSplat,
            lambda: train.lambda,
            epochs: train.epochs,
            batch: train.batch,
            lr: train.lr,
            backbone_lr_scale: train.backbone_lr_scale,
            final_lr_scale: train.final_lr_scale,
            warmup_epochs: train.warmup_epochs,
            weight_decay: train.weight_decay,
            pretrain_epochs: 0,
            freeze: Vec::new(),
            fusion: model.fusion,
            n_depth: p.n_depth,
            d_min: model.bins.d_min,
            d_max: model.bins.d_max,
            d_model: p.d_model,
            d_ff: p.d_ff,
            heads: p.heads,
            tied_heads: p.tied_heads,
            encoder_layers: p.encoder_layers,
            decoder_layers: p.decoder_layers,
            head_hidden: model.head_hidden,
            bev_cells: scene.bev.cells_x,
            cell_size: scene.bev.cell_size,
            n_cameras: scene.rig.n_cameras,
            image_width: scene.rig.width,
            image_height: scene.rig.height,
            stride: scene.rig.stride,
            min_boxes: scene.min_boxes,
            max_boxes: scene.max_boxes,
            train_scenes: 100,
            eval_scenes: 40,
            sequence_frames: 6,
            scene_seed: 0,
            model_seed: 1,
            seeds: vec![1, 2],
            use_lidar: true,
            tfa_window: 1,
            tta: TtaSet::Identity,
            score_threshold: model.detect.threshold,
            nms_radius: model.detect.nms_radius_cells,
            pos_weight: model.pos_weight,
            depth_decode: DepthDecode::Mean,
            sweep_lambdas: vec![0.0, 0.01, 1.0, 100.0],
            checkpoint: None,
            checkpoints: Vec::new(),
            scene: None,
            scene_index: 0,
            box_index: 0,
            ablate_fusion: FusionMode::ALL.to_vec(),
            ablate_decoder_layers: vec![1, 2],
        }
    }
}

fn bad(key: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got {v:?}"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "out_dir" => self.out_dir = PathBuf::from(v),
            "variant" => self.variant = v.parse().map_err(|_| bad(key, format!("unknown variant {v:?}")))?,
            "lambda" => self.lambda = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "backbone_lr_scale" => self.backbone_lr_scale = num(key, v)?,
            "final_lr_scale" => self.final_lr_scale = num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, v)?,
            "freeze" => self.freeze = list(key, v)?,
            "fusion" => self.fusion = v.parse().map_err(|_| bad(key, format!("unknown fusion mode {v:?}")))?,
            "n_depth" => self.n_depth = num(key, v)?,
            "d_min" => self.d_min = num(key, v)?,
            "d_max" => self.d_max = num(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "d_ff" => self.d_ff = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "tied_heads" => self.tied_heads = flag(key, v)?,
            "encoder_layers" => self.encoder_layers = num(key, v)?,
            "decoder_layers" => self.decoder_layers = num(key, v)?,
            "head_hidden" => self.head_hidden = num(key, v)?,
            "bev_cells" => self.bev_cells = num(key, v)?,
            "cell_size" => self.cell_size = num(key, v)?,
            "n_cameras" => self.n_cameras = num(key, v)?,
            "image_width" => self.image_width = num(key, v)?,
            "image_height" => self.image_height = num(key, v)?,
            "stride" => self.stride = num(key, v)?,
            "min_boxes" => self.min_boxes = num(key, v)?,
            "max_boxes" => self.max_boxes = num(key, v)?,
            "train_scenes" => self.train_scenes = num(key, v)?,
            "eval_scenes" => self.eval_scenes = num(key, v)?,
            "sequence_frames" => self.sequence_frames = num(key, v)?,
            "scene_seed" => self.scene_seed = num(key, v)?,
            "model_seed" => self.model_seed = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "use_lidar" => self.use_lidar = flag(key, v)?,
            "tfa_window" => self.tfa_window = num(key, v)?,
            "tta" => {
                self.tta = match v {
                    "identity" => TtaSet::Identity,
                    "mirror" => TtaSet::Mirror,
                    "standard" => TtaSet::Standard,
                    _ => return Err(bad(key, format!("unknown set {v:?}"))),
                }
            }
            "score_threshold" => self.score_threshold = num(key, v)?,
            "nms_radius" => self.nms_radius = num(key, v)?,
            "pos_weight" => self.pos_weight = num(key, v)?,
            "depth_decode" => {
                self.depth_decode = match v {
                    "mean" => DepthDecode::Mean,
                    "mode" => DepthDecode::Mode,
                    _ => return Err(bad(key, format!("expected mean or mode, got {v:?}"))),
                }
            }
            "sweep_lambdas" => self.sweep_lambdas = list(key, v)?,
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoints" => self.checkpoints = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            "scene" => self.scene = (!v.is_empty()).then(|| PathBuf::from(v)),
            "scene_index" => self.scene_index = num(key, v)?,
            "box_index" => self.box_index = num(key, v)?,
            "ablate_fusion" => {
                self.ablate_fusion = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad(key, format!("unknown fusion mode {s:?}"))))
                    .collect::<Result<_>>()?
            }
            "ablate_decoder_layers" => self.ablate_decoder_layers = list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical `key = value` text of every setting that can affect results.
    /// `out_dir` is excluded so identical runs hash identically wherever they
    /// are written.
    pub fn canonical(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let decode = match self.depth_decode {
            DepthDecode::Mean => "mean",
            DepthDecode::Mode => "mode",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("variant", self.variant.to_string()),
            ("lambda", self.lambda.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("backbone_lr_scale", self.backbone_lr_scale.to_string()),
            ("final_lr_scale", self.final_lr_scale.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("freeze", self.freeze.join(",")),
            ("fusion", self.fusion.to_string()),
            ("n_depth", self.n_depth.to_string()),
            ("d_min", self.d_min.to_string()),
            ("d_max", self.d_max.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("heads", self.heads.to_string()),
            ("tied_heads", self.tied_heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("bev_cells", self.bev_cells.to_string()),
            ("cell_size", self.cell_size.to_string()),
            ("n_cameras", self.n_cameras.to_string()),
            ("image_width", self.image_width.to_string()),
            ("image_height", self.image_height.to_string()),
            ("stride", self.stride.to_string()),
            ("min_boxes", self.min_boxes.to_string()),
            ("max_boxes", self.max_boxes.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("eval_scenes", self.eval_scenes.to_string()),
            ("sequence_frames", self.sequence_frames.to_string()),
            ("scene_seed", self.scene_seed.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("use_lidar", self.use_lidar.to_string()),
            ("tfa_window", self.tfa_window.to_string()),
            ("tta", self.tta.name().to_string()),
            ("score_threshold", self.score_threshold.to_string()),
            ("nms_radius", self.nms_radius.to_string()),
            ("pos_weight", self.pos_weight.to_string()),
            ("depth_decode", decode.to_string()),
            ("sweep_lambdas", join(&self.sweep_lambdas)),
            ("checkpoint", opt(&self.checkpoint)),
            (
                "checkpoints",
                self.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            ("scene", opt(&self.scene)),
            ("scene_index", self.scene_index.to_string()),
            ("box_index", self.box_index.to_string()),
            ("ablate_fusion", join(&self.ablate_fusion)),
            ("ablate_decoder_layers", join(&self.ablate_decoder_layers)),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            bev: BevGrid {
                cells_x: self.bev_cells,
                cells_y: self.bev_cells,
                cell_size: self.cell_size,
            },
            rig: RigConfig {
                n_cameras: self.n_cameras,
                width: self.image_width,
                height: self.image_height,
                stride: self.stride,
                ..RigConfig::default()
            },
            min_boxes: self.min_boxes,
            max_boxes: self.max_boxes,
            ..SceneConfig::default()
        }
    }

    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        let scene = self.scene_config();
        let mut m = ModelConfig::toy(variant, &scene)?;
        m.bins = DepthBins::new(self.n_depth, self.d_min, self.d_max).map_err(|e| bad("n_depth", e))?;
        let p = &mut m.projector;
        p.n_depth = self.n_depth;
        p.d_model = self.d_model;
        p.d_ff = self.d_ff;
        p.heads = self.heads;
        p.tied_heads = self.tied_heads;
        p.encoder_layers = self.encoder_layers;
        p.decoder_layers = self.decoder_layers;
        m.fusion = self.fusion;
        m.head_hidden = self.head_hidden;
        m.use_lidar = self.use_lidar;
        m.tfa = self.tfa_window > 1;
        m.pos_weight = self.pos_weight;
        m.detect.threshold = self.score_threshold;
        m.detect.nms_radius_cells = self.nms_radius;
        Ok(m)
    }

    pub fn train_config(&self, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            backbone_lr_scale: self.backbone_lr_scale,
            final_lr_scale: self.final_lr_scale,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            lambda,
            seed,
            pretrain_epochs: self.pretrain_epochs,
            freeze: self.freeze.clone(),
        }
    }

    /// Check every downstream precondition before any work starts.
    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, v: usize| if v == 0 { Err(bad(key, "must be at least 1")) } else { Ok(()) };
        pos("bev_cells", self.bev_cells)?;
        pos("n_cameras", self.n_cameras)?;
        pos("stride", self.stride)?;
        pos("head_hidden", self.head_hidden)?;
        pos("eval_scenes", self.eval_scenes)?;
        pos("tfa_window", self.tfa_window)?;
        if !(self.cell_size > 0.0) {
            return Err(bad("cell_size", "must be positive"));
        }
        if !self.image_width.is_multiple_of(self.stride) || !self.image_height.is_multiple_of(self.stride) {
            return Err(bad("stride", "must divide image_width and image_height"));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(bad("d_min", "need 0 < d_min < d_max"));
        }
        if self.n_depth < 2 {
            return Err(bad("n_depth", "must be at least 2"));
        }
        if self.min_boxes > self.max_boxes {
            return Err(bad("min_boxes", "exceeds max_boxes"));
        }
        if self.tfa_window > 1 && self.sequence_frames < self.tfa_window {
            return Err(bad("sequence_frames", "shorter than tfa_window"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "at least one seed required"));
        }
        if self.fusion == FusionMode::Add && self.lidar_channels() != self.out_channels() {
            return Err(bad("fusion", "add needs equal lidar and camera channels"));
        }
        if self.ablate_decoder_layers.contains(&0) {
            return Err(bad("ablate_decoder_layers", "depths must be at least 1"));
        }
        self.scene_config().validate()?;
        self.train_config(self.lambda, self.model_seed).validate()?;
        for l in &self.sweep_lambdas {
            if !(*l >= 0.0 && l.is_finite()) {
                return Err(bad("sweep_lambdas", "values must be non-negative"));
            }
        }
        self.model_config(self.variant)?.validate()
    }

    fn lidar_channels(&self) -> usize {
        crate::synthscene::LIDAR_CHANNELS
    }

    fn out_channels(&self) -> usize {
        crate::projection::ProjectorConfig::toy(self.variant).out_channels
    }

    pub fn train_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.train_scenes as u64).map(move |i| self.scene_seed + i)
    }

    pub fn eval_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.eval_scenes as u64).map(move |i| self.scene_seed + EVAL_SEED_OFFSET + i)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Output directory that records every file it writes.
pub struct RunDir {
    pub root: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        io::write_atomic(&self.root.join(rel), bytes)?;
        self.files.insert(rel.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    pub fn files(&self) -> impl Iterator<Item = (&String, &String)> {
        self.files.iter()
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, summary: &[(String, String)]) -> Result<RunOutput> {
        self.write("config.txt", cfg.canonical().as_bytes())?;
        let mut s = String::new();
        let _ = writeln!(s, "command = {command}");
        let _ = writeln!(s, "config_hash = {}", cfg.hash());
        let _ = writeln!(s, "scene_seed = {}", cfg.scene_seed);
        let _ = writeln!(s, "model_seed = {}", cfg.model_seed);
        let _ = writeln!(s, "seeds = {}", join(&cfg.seeds));
        for (k, v) in summary {
            let _ = writeln!(s, "result.{k} = {v}");
        }
        for (f, h) in &self.files {
            let _ = writeln!(s, "file {h} {f}");
        }
        io::write_atomic(&self.root.join("manifest.txt"), s.as_bytes())?;
        Ok(RunOutput {
            root: self.root,
            summary: summary.to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub root: PathBuf,
    /// Headline numbers, also written to the manifest.
    pub summary: Vec<(String, String)>,
}

impl RunOutput {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).and_then(|(_, v)| v.parse().ok())
    }
}

fn kv(k: &str, v: impl std::fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub const COMMANDS: [&str; 8] = ["gen-scene", "train", "depth-sweep", "eval", "attn-viz", "saliency", "ensemble", "ablate"];

pub fn run(command: &str, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match command {
        "gen-scene" => cmd_gen_scene(cfg),
        "train" => cmd_train(cfg),
        "depth-sweep" => cmd_depth_sweep(cfg),
        "eval" => cmd_eval(cfg),
        "attn-viz" => cmd_attn_viz(cfg),
        "saliency" => cmd_saliency(cfg),
        "ensemble" => cmd_ensemble(cfg),
        "ablate" => cmd_ablate(cfg),
        _ => Err(Error::Config(format!("unknown command {command:?}"))),
    }
}

/// Scene generation and the derived inputs for one model configuration.
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    pub inputs: Vec<SceneInputs>,
}

pub fn scenes(cfg: &RunConfig, seeds: impl Iterator<Item = u64>) -> Result<Vec<SyntheticScene>> {
    let sc = cfg.scene_config();
    let seeds: Vec<u64> = seeds.collect();
    exec::try_map(seeds.len(), |i| generate(&sc, seeds[i]))
}

pub fn inputs(scenes: &[SyntheticScene], m: &ModelConfig) -> Vec<SceneInputs> {
    exec::map(scenes.len(), |i| SceneInputs::new(&scenes[i], m))
}

pub fn sequences(cfg: &RunConfig, seeds: impl Iterator<Item = u64>) -> Result<Vec<Vec<SyntheticScene>>> {
    let sc = cfg.scene_config();
    let seeds: Vec<u64> = seeds.collect();
    let motion = EgoMotion {
        speed: 2.0,
        yaw_rate: 0.1,
        dt: 0.5,
    };
    exec::try_map(seeds.len(), |i| generate_sequence(&sc, cfg.sequence_frames, motion, seeds[i]))
}

fn rig_for(scene: &SyntheticScene, m: &ModelConfig) -> Result<Rig> {
    Rig::new(&scene.cameras, &m.bev, &m.bins)
}

fn default_rig(cfg: &RunConfig, m: &ModelConfig) -> Result<Rig> {
    Rig::new(&cfg.scene_config().rig.build()?, &m.bev, &m.bins)
}

fn depth_row(d: &Option<DepthMetrics>) -> String {
    match d {
        Some(m) => m.csv_row(),
        None => ",,,,".to_string(),
    }
}

fn cmd_gen_scene(cfg: &RunConfig) -> Result<RunOutput> {
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let m = cfg.model_config(cfg.variant)?;
    let list = scenes(cfg, cfg.eval_seeds())?;
    let mut total_boxes = 0;
    for (i, s) in list.iter().enumerate() {
        let base = format!("scenes/scene_{i:04}");
        dir.write(&format!("{base}/scene.txt"), s.to_text().as_bytes())?;
        for (c, f) in s.cam_features.iter().enumerate() {
            dir.write(&format!("{base}/cam{c}.f64"), &crate::synthscene::write_blob(f))?;
            let (h, w) = (f.shape[1], f.shape[2]);
            let occupancy: Vec<f64> = (0..h * w)
                .map(|k| (0..s.num_classes).map(|ch| f.data[ch * h * w + k]).fold(0.0, f64::max))
                .collect();
            dir.write(&format!("{base}/cam{c}_objects.pgm"), &io::pgm8(w, h, &io::to_gray(&occupancy, 0.0, 1.0)))?;
        }
        let inp = SceneInputs::new(s, &m);
        for (c, d) in inp.depth_gt.iter().enumerate() {
            dir.write(&format!("{base}/depth{c}.pgm"), &d.to_pgm16())?;
            dir.write(&format!("{base}/depth{c}_mask.pgm"), &d.mask_pgm())?;
        }
        let bev = &m.bev;
        let counts: Vec<f64> = inp.lidar_bev.data[..bev.num_cells()].to_vec();
        dir.write(&format!("{base}/lidar_bev.pgm"), &io::pgm8(bev.cells_x, bev.cells_y, &flip_rows(&io::to_gray_max(&counts), bev.cells_x)))?;
        dir.write(&format!("{base}/boxes.csv"), boxes_to_csv(&s.boxes).as_bytes())?;
        total_boxes += s.boxes.len();
    }
    dir.finish("gen-scene", cfg, &[kv("scenes", list.len()), kv("boxes", total_boxes)])
}

/// BEV rows are stored with y increasing; images put +y at the top.
fn flip_rows<T: Copy>(px: &[T], width: usize) -> Vec<T> {
    px.chunks(width).rev().flatten().copied().collect()
}

/// Train one model on the configured data. With `tfa_window > 1` training
/// and evaluation run over sequences.
pub fn train_model(cfg: &RunConfig, variant: Variant, lambda: f64, seed: u64) -> Result<(Model, Vec<crate::train::EpochStats>, EvalSummary)> {
    let m = cfg.model_config(variant)?;
    let rig = default_rig(cfg, &m)?;
    let tc = cfg.train_config(lambda, seed);
    let mut model = Model::new(&m, seed)?;
    if cfg.tfa_window > 1 {
        let tr: Vec<Vec<SceneInputs>> = sequences(cfg, cfg.train_seeds())?.iter().map(|s| inputs(s, &m)).collect();
        let ev: Vec<Vec<SceneInputs>> = sequences(cfg, cfg.eval_seeds())?.iter().map(|s| inputs(s, &m)).collect();
        let curve = train_sequences(&mut model, &rig, &tr, cfg.tfa_window, &tc)?;
        let buckets = evaluate_sequences(&model, &rig, &ev, cfg.tfa_window)?;
        return Ok((model, curve, EvalSummary { buckets, depth: None }));
    }
    let tr = inputs(&scenes(cfg, cfg.train_seeds())?, &m);
    let ev = inputs(&scenes(cfg, cfg.eval_seeds())?, &m);
    let curve = train(&mut model, &rig, &tr, &tc)?;
    let rep = evaluate(&model, &rig, &ev, cfg.depth_decode)?;
    Ok((model, curve, rep.into()))
}

pub struct EvalSummary {
    pub buckets: crate::synthscene::BucketReport,
    pub depth: Option<DepthMetrics>,
}

impl From<EvalReport> for EvalSummary {
    fn from(r: EvalReport) -> Self {
        Self {
            buckets: r.buckets,
            depth: r.depth,
        }
    }
}

fn checkpoint_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    store.write_checkpoint(&mut buf)?;
    Ok(buf)
}

fn cmd_train(cfg: &RunConfig) -> Result<RunOutput> {
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let (model, curve, ev) = train_model(cfg, cfg.variant, cfg.lambda, cfg.model_seed)?;
    dir.write("checkpoint.bin", &checkpoint_bytes(&model.store)?)?;
    dir.write("curve.csv", curve_csv(&curve).as_bytes())?;
    dir.write("buckets.csv", ev.buckets.to_csv().as_bytes())?;
    if let Some(d) = &ev.depth {
        dir.write("depth.csv", format!("{}\n{}\n", DepthMetrics::CSV_HEADER, d.csv_row()).as_bytes())?;
    }
    let mut summary = vec![
        kv("parameters", model.store.count()),
        kv("toy_score", ev.buckets.toy_score()),
    ];
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        summary.push(kv("first_loss", first.total));
        summary.push(kv("final_loss", last.total));
    }
    if let Some(d) = &ev.depth {
        summary.push(kv("abs_rel", d.abs_rel));
    }
    dir.finish("train", cfg, &summary)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub name: String,
    pub variant: Variant,
    pub lambda: f64,
    pub pretrain: bool,
}

pub fn sweep_rows(cfg: &RunConfig) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = cfg
        .sweep_lambdas
        .iter()
        .map(|&l| SweepRow {
            name: format!("lambda={l}"),
            variant: Variant::LiftSplat,
            lambda: l,
            pretrain: false,
        })
        .collect();
    rows.push(SweepRow {
        name: "lidar".into(),
        variant: Variant::LidarDepth,
        lambda: 0.0,
        pretrain: false,
    });
    rows.push(SweepRow {
        name: "pretrained".into(),
        variant: Variant::LiftSplat,
        lambda: 0.0,
        pretrain: true,
    });
    rows.push(SweepRow {
        name: "uniform".into(),
        variant: Variant::Uniform,
        lambda: 0.0,
        pretrain: false,
    });
    rows
}

pub const SWEEP_HEADER: &str = "row,variant,lambda,abs_rel,sq_rel,rmse,rmsle,frac125,toy_score,depth_parameters,status";

fn cmd_depth_sweep(cfg: &RunConfig) -> Result<RunOutput> {
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let rows = sweep_rows(cfg);
    let results = exec::map(rows.len(), |i| {
        let r = &rows[i];
        let mut c = cfg.clone();
        c.tfa_window = 1;
        c.pretrain_epochs = if r.pretrain { cfg.pretrain_epochs.max(1) } else { 0 };
        train_model(&c, r.variant, r.lambda, cfg.model_seed)
    });
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut summary = Vec::new();
    for (r, res) in rows.iter().zip(results) {
        match res {
            Ok((model, curve, ev)) => {
                let depth_params = model.store.count_prefix("depth.");
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},ok",
                    r.name,
                    r.variant,
                    r.lambda,
                    depth_row(&ev.depth),
                    ev.buckets.toy_score(),
                    depth_params
                );
                dir.write(&format!("curve_{}.csv", r.name.replace('=', "_")), curve_csv(&curve).as_bytes())?;
                if let Some(d) = ev.depth {
                    summary.push(kv(&format!("{}.abs_rel", r.name), d.abs_rel));
                }
                summary.push(kv(&format!("{}.toy_score", r.name), ev.buckets.toy_score()));
            }
            Err(Error::Diverged(msg)) => {
                let _ = writeln!(csv, "{},{},{},,,,,,,,diverged: {}", r.name, r.variant, r.lambda, msg.replace(',', ";"));
            }
            Err(e) => return Err(e),
        }
    }
    dir.write("sweep.csv", csv.as_bytes())?;
    dir.finish("depth-sweep", cfg, &summary)
}

fn require_checkpoint(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("checkpoint: required for this command".into()))
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let store = ParamStore::load(path)?;
    Model::from_store(&cfg.model_config(cfg.variant)?, &store)
}

fn cmd_eval(cfg: &RunConfig) -> Result<RunOutput> {
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let model = load_model(cfg, require_checkpoint(cfg)?)?;
    let m = &model.cfg;
    let list = scenes(cfg, cfg.eval_seeds())?;
    let rig = default_rig(cfg, m)?;
    let rep = evaluate(&model, &rig, &inputs(&list, m), cfg.depth_decode)?;
    dir.write("buckets.csv", rep.buckets.to_csv().as_bytes())?;
    dir.write("detections.csv", detections_csv(&rep.detections).as_bytes())?;
    let mut summary = vec![kv("toy_score", rep.f1())];
    if let Some(d) = &rep.depth {
        dir.write("depth.csv", format!("{}\n{}\n", DepthMetrics::CSV_HEADER, d.csv_row()).as_bytes())?;
        summary.push(kv("abs_rel", d.abs_rel));
    }
    dir.finish("eval", cfg, &summary)
}

fn detections_csv(per_scene: &[Vec<Box3D>]) -> String {
    let mut s = format!("scene,{CSV_HEADER}\n");
    for (i, boxes) in per_scene.iter().enumerate() {
        for b in boxes {
            let _ = writeln!(s, "{i},{}", b.csv_row());
        }
    }
    s
}

fn load_scene(cfg: &RunConfig) -> Result<SyntheticScene> {
    match &cfg.scene {
        Some(p) => SyntheticScene::load(p),
        None => generate(&cfg.scene_config(), cfg.scene_seed + EVAL_SEED_OFFSET + cfg.scene_index as u64),
    }
}

/// Frustum values `[N_D, H]` per camera column scattered onto the BEV grid:
/// each horizon cell takes the max over pixel rows, and each BEV cell the max
/// over cameras and horizon cells falling into it.
pub fn scatter_frustum(columns: &[Vec<Tensor>], rig: &Rig, bev: &BevGrid) -> Vec<f64> {
    let mut out = vec![0.0f64; bev.num_cells()];
    for (cam, cols) in columns.iter().enumerate() {
        let hz = &rig.horizons[cam];
        for (w, col) in cols.iter().enumerate() {
            let (nd, h) = (col.shape[0], col.shape[1]);
            for b in 0..nd {
                if !hz.valid_mask[b * hz.width + w] {
                    continue;
                }
                let p = hz.center(b, w);
                let Some((r, c)) = bev.cell_of(p.x, p.y) else { continue };
                let v = (0..h).map(|k| col.data[b * h + k]).fold(0.0, f64::max);
                let k = bev.index(r, c);
                out[k] = out[k].max(v);
            }
        }
    }
    out
}

pub fn footprint_mask(boxes: &[Box3D], bev: &BevGrid) -> Vec<bool> {
    let mut m = vec![false; bev.num_cells()];
    for r in 0..bev.cells_y {
        for c in 0..bev.cells_x {
            let (x, y) = bev.cell_center(r, c);
            m[bev.index(r, c)] = boxes.iter().any(|b| b.contains_2d(x, y));
        }
    }
    m
}

/// Share of scattered attention falling on ground-truth footprints.
pub fn mass_inside(values: &[f64], mask: &[bool]) -> f64 {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / total
}

/// Per-camera, per-column `[N_D, H]` frustum weights: decoder attention for
/// Lift-Attend-Splat, depth probabilities for Lift-Splat.
pub fn frustum_columns(model: &Model, rig: &Rig, inp: &SceneInputs) -> Result<Vec<Vec<Tensor>>> {
    let g = Graph::with_params(&model.store);
    let fwd = model.forward(&g, inp, rig, None)?;
    let widths: Vec<usize> = rig.horizons.iter().map(|h| h.width).collect();
    match model.variant() {
        Variant::LiftAttendSplat => {
            let att = g.value(fwd.attention.ok_or_else(|| Error::Unsupported("no attention weights".into()))?);
            let (rows, nd, h) = (att.shape[0], att.shape[1], att.shape[2]);
            let total_w: usize = widths.iter().sum();
            let heads = rows / total_w.max(1);
            let mut out = Vec::new();
            let mut offset = 0;
            for &w in &widths {
                let mut cols = Vec::with_capacity(w);
                for j in 0..w {
                    let mut t = Tensor::zeros(&[nd, h]);
                    for hd in 0..heads {
                        let base = ((offset + j) * heads + hd) * nd * h;
                        for (k, v) in t.data.iter_mut().enumerate() {
                            *v += att.data[base + k] / heads as f64;
                        }
                    }
                    cols.push(t);
                }
                offset += w;
                out.push(cols);
            }
            Ok(out)
        }
        Variant::LiftSplat => Ok(fwd
            .depth_probs
            .iter()
            .map(|&p| {
                let t = g.value(p);
                let (nd, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
                (0..w)
                    .map(|j| Tensor::from_fn(&[nd, h], |k| t.data[(k / h) * h * w + (k % h) * w + j]))
                    .collect()
            })
            .collect()),
        v => Err(Error::Unsupported(format!("{v} has neither attention nor a depth distribution"))),
    }
}

fn cmd_attn_viz(cfg: &RunConfig) -> Result<RunOutput> {
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let model = load_model(cfg, require_checkpoint(cfg)?)?;
    let scene = load_scene(cfg)?;
    let rig = rig_for(&scene, &model.cfg)?;
    let inp = SceneInputs::new(&scene, &model.cfg);
    let cols = frustum_columns(&model, &rig, &inp)?;
    let bev = &model.cfg.bev;
    for (cam, c) in cols.iter().enumerate() {
        let (nd, h) = (c[0].shape[0], c[0].shape[1]);
        let w = c.len();
        let mut img = vec![0.0; nd * w * h];
        for (j, t) in c.iter().enumerate() {
            for b in 0..nd {
                for k in 0..h {
                    img[b * w * h + j * h + k] = t.data[b * h + k];
                }
            }
        }
        dir.write(&format!("columns_cam{cam}.pgm"), &io::pgm8(w * h, nd, &io::to_gray_max(&img)))?;
    }
    let scattered = scatter_frustum(&cols, &rig, bev);
    let mask = footprint_mask(&scene.boxes, bev);
    let masked: Vec<f64> = scattered.iter().zip(&mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
    let (w, _) = (bev.cells_x, bev.cells_y);
    dir.write("bev_attention.pgm", &io::pgm8(w, bev.cells_y, &flip_rows(&io::to_gray_max(&scattered), w)))?;
    dir.write("bev_attention_masked.pgm", &io::pgm8(w, bev.cells_y, &flip_rows(&io::to_gray_max(&masked), w)))?;
    let ratio = mass_inside(&scattered, &mask);
    let area = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    dir.write("attention.csv", format!("mass_inside,footprint_area\n{ratio},{area}\n").as_bytes())?;
    dir.finish("attn-viz", cfg, &[kv("mass_inside", ratio), kv("footprint_area", area)])
}

/// Absolute gradient of the highest class logit at the cell holding
/// `boxes[box_index]`, with respect to each camera input, summed over
/// channels. Returns `[H*W]` maps and the chosen class.
pub fn saliency_maps(model: &Model, rig: &Rig, inp: &SceneInputs, box_index: usize) -> Result<(Vec<Vec<f64>>, usize)> {
    let b = inp
        .boxes
        .get(box_index)
        .ok_or_else(|| Error::OutOfRange(format!("box_index {box_index} of {} boxes", inp.boxes.len())))?;
    let bev = &model.cfg.bev;
    let (r, c) = bev
        .cell_of(b.center[0], b.center[1])
        .ok_or_else(|| Error::OutOfRange(format!("box {box_index} lies outside the grid")))?;
    let g = Graph::with_params(&model.store);
    let fwd = model.forward(&g, inp, rig, None)?;
    let head = g.value(fwd.head);
    let nm = bev.num_cells();
    let k = bev.index(r, c);
    let first = 1 + crate::fusion_head::REG_CHANNELS;
    let class = (0..model.cfg.num_classes)
        .max_by(|&a, &bb| head.data[(first + a) * nm + k].total_cmp(&head.data[(first + bb) * nm + k]).then(bb.cmp(&a)))
        .unwrap_or(0);
    let z = g.slice(fwd.head, 0, first + class, 1)?;
    let z = g.slice(z, 1, r, 1)?;
    let z = g.slice(z, 2, c, 1)?;
    let root = g.sum(z);
    let grads = g.backward(root)?;
    let maps = fwd
        .cam_inputs
        .iter()
        .map(|&v| {
            let s = g.shape(v);
            let hw = s[1] * s[2];
            let gr = grads.wrt(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; s[0] * hw]);
            (0..hw).map(|p| (0..s[0]).map(|ch| gr[ch * hw + p].abs()).sum()).collect()
        })
        .collect();
    Ok((maps, class))
}

fn cmd_saliency(cfg: &RunConfig) -> Result<RunOutput> {
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let model = load_model(cfg, require_checkpoint(cfg)?)?;
    let scene = load_scene(cfg)?;
    let rig = rig_for(&scene, &model.cfg)?;
    let inp = SceneInputs::new(&scene, &model.cfg);
    let (maps, class) = saliency_maps(&model, &rig, &inp, cfg.box_index)?;
    let mut csv = String::from("camera,max_abs_gradient\n");
    for (i, m) in maps.iter().enumerate() {
        let (h, w) = (inp.cam_raw[i].shape[1], inp.cam_raw[i].shape[2]);
        dir.write(&format!("saliency_cam{i}.pgm"), &io::pgm8(w, h, &io::to_gray_max(m)))?;
        let _ = writeln!(csv, "{i},{}", m.iter().cloned().fold(0.0, f64::max));
    }
    dir.write("saliency.csv", csv.as_bytes())?;
    dir.finish("saliency", cfg, &[kv("class", class)])
}

fn cmd_ensemble(cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.checkpoints.is_empty() {
        return Err(Error::Config("checkpoints: at least one checkpoint required".into()));
    }
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let models = cfg.checkpoints.iter().map(|p| load_model(cfg, p)).collect::<Result<Vec<_>>>()?;
    let m = &models[0].cfg;
    let rig = default_rig(cfg, m)?;
    let bound: Vec<BoundModel> = models.iter().map(|model| BoundModel { model, rig: &rig }).collect();
    let dets: Vec<&dyn Detector> = bound.iter().map(|b| b as &dyn Detector).collect();
    let list = scenes(cfg, cfg.eval_seeds())?;
    let thresholds = cfg.scene_config().wbf_thresholds();
    let tta = cfg.tta.transforms();
    let mut before = crate::synthscene::BucketReport::new(&crate::synthscene::DEFAULT_DISTANCE_EDGES, &crate::synthscene::DEFAULT_SIZE_EDGES);
    let mut after = before.clone();
    let mut fused_all = Vec::with_capacity(list.len());
    for s in &list {
        let plain = dets[0].detect(s)?;
        let fused = ensemble_pipeline(&dets, s, &tta, &thresholds)?;
        before.add(&plain, &s.boxes);
        after.add(&fused, &s.boxes);
        fused_all.push(fused);
    }
    dir.write("fused.csv", detections_csv(&fused_all).as_bytes())?;
    dir.write("buckets_before.csv", before.to_csv().as_bytes())?;
    dir.write("buckets_after.csv", after.to_csv().as_bytes())?;
    dir.finish(
        "ensemble",
        cfg,
        &[kv("toy_score_before", before.toy_score()), kv("toy_score_after", after.toy_score())],
    )
}

pub const ABLATION_HEADER: &str = "fusion,decoder_layers,parameters,toy_score,precision,recall";

fn cmd_ablate(cfg: &RunConfig) -> Result<RunOutput> {
    let mut dir = RunDir::create(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for &f in &cfg.ablate_fusion {
        if f == FusionMode::Add && cfg.lidar_channels() != cfg.out_channels() {
            return Err(bad("ablate_fusion", "add needs equal lidar and camera channels"));
        }
        let depths: Vec<usize> = if cfg.variant == Variant::LiftAttendSplat {
            cfg.ablate_decoder_layers.clone()
        } else {
            vec![cfg.decoder_layers]
        };
        for d in depths {
            rows.push((f, d));
        }
    }
    let results = exec::try_map(rows.len(), |i| {
        let (f, d) = rows[i];
        let mut c = cfg.clone();
        c.fusion = f;
        c.decoder_layers = d;
        train_model(&c, c.variant, c.lambda, c.model_seed).map(|(m, _, ev)| (m.store.count(), ev))
    })?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut summary = Vec::new();
    for ((f, d), (params, ev)) in rows.iter().zip(results) {
        let o = ev.buckets.overall();
        let _ = writeln!(csv, "{f},{d},{params},{},{},{}", ev.buckets.toy_score(), o.precision(), o.recall());
        summary.push(kv(&format!("{f}.{d}.toy_score"), ev.buckets.toy_score()));
    }
    dir.write("ablation.csv", csv.as_bytes())?;
    dir.finish("ablate", cfg, &summary)
}

/// Parameter count of the projector at the full-size configuration.
pub fn full_scale_projector_parameters() -> usize {
    count_parameters(&crate::projection::ProjectorConfig::full_scale())
}
