//! End-to-end toy detector: camera backbone, projector, fusion, optional
//! temporal merge and dense head, plus the per-scene precomputed inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxfusion::{Box3D, Detector};
use crate::depth::{depth_ce_loss, lidar_depth_map, one_hot_depth, DepthBins, DepthMap};
use crate::error::{Error, Result};
use crate::fusion_head::{detect, detection_loss, DetectConfig, DetectionHead, DetectionTargets, Fusion, FusionMode};
use crate::geometry::{build_projected_horizon, BevGrid, CameraModel, ProjectedHorizon};
use crate::projection::{pixelwise, Projector, ProjectorConfig, Variant};
use crate::synthscene::{lidar_bev_features, SceneConfig, SyntheticScene, LIDAR_CHANNELS};
use crate::temporal::{EgoPose, TfaMerge};
use crate::tensor::nn::Linear;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub projector: ProjectorConfig,
    pub fusion: FusionMode,
    pub num_classes: usize,
    /// Rendered camera input channels.
    pub cam_raw_channels: usize,
    pub head_hidden: usize,
    pub bev: BevGrid,
    pub bins: DepthBins,
    /// When false the lidar stream entering fusion is zeroed.
    pub use_lidar: bool,
    pub tfa: bool,
    pub pos_weight: f64,
    pub detect: DetectConfig,
}

impl ModelConfig {
    pub fn toy(variant: Variant, scene: &SceneConfig) -> Result<Self> {
        let projector = ProjectorConfig {
            feat_height: scene.rig.height / scene.rig.stride,
            ..ProjectorConfig::toy(variant)
        };
        Ok(Self {
            bins: DepthBins::new(projector.n_depth, 1.0, 33.0)?,
            projector,
            fusion: FusionMode::CatConv,
            num_classes: scene.num_classes(),
            cam_raw_channels: scene.cam_channels(),
            head_hidden: 16,
            bev: scene.bev,
            use_lidar: true,
            tfa: false,
            pos_weight: 20.0,
            detect: DetectConfig {
                threshold: 0.5,
                nms_radius_cells: 2.0,
                class_heights: scene.classes.iter().map(|c| c.dims[2]).collect(),
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        if self.projector.n_depth != self.bins.n {
            return Err(Error::Config("n_depth: projector and depth bins disagree".into()));
        }
        if self.projector.lidar_channels != LIDAR_CHANNELS {
            return Err(Error::Config(format!("lidar_channels: must be {LIDAR_CHANNELS}")));
        }
        if self.detect.class_heights.len() != self.num_classes {
            return Err(Error::Config("num_classes: one box height per class required".into()));
        }
        if self.cam_raw_channels != self.num_classes + 4 {
            return Err(Error::Config("cam_raw_channels: must be num_classes + 4".into()));
        }
        if !(self.detect.threshold > 0.0 && self.detect.threshold < 1.0) {
            return Err(Error::Config("score_threshold: must lie in (0, 1)".into()));
        }
        if self.pos_weight <= 0.0 {
            return Err(Error::Config("pos_weight: must be positive".into()));
        }
        Ok(())
    }
}

/// Cameras with their projected horizons for one model configuration.
#[derive(Clone, Debug)]
pub struct Rig {
    pub cameras: Vec<CameraModel>,
    pub horizons: Vec<ProjectedHorizon>,
}

impl Rig {
    pub fn new(cameras: &[CameraModel], bev: &BevGrid, bins: &DepthBins) -> Result<Self> {
        let horizons = cameras
            .iter()
            .enumerate()
            .map(|(i, c)| build_projected_horizon(c, i, bev, bins.n, bins.d_min, bins.d_max))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cameras: cameras.to_vec(),
            horizons,
        })
    }
}

/// Everything the model needs from one scene, computed once.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub cam_raw: Vec<Tensor>,
    pub lidar_bev: Tensor,
    pub depth_gt: Vec<DepthMap>,
    pub depth_onehot: Vec<Tensor>,
    pub depth_mask: Vec<Vec<bool>>,
    pub targets: DetectionTargets,
    pub boxes: Vec<Box3D>,
    pub pose: EgoPose,
}

impl SceneInputs {
    pub fn new(scene: &SyntheticScene, cfg: &ModelConfig) -> Self {
        let pts = scene.lidar_positions();
        let mut depth_gt = Vec::new();
        let mut depth_onehot = Vec::new();
        let mut depth_mask = Vec::new();
        for cam in &scene.cameras {
            let map = lidar_depth_map(&pts, cam, cfg.bins.d_min, cfg.bins.d_max);
            let (oh, mask) = one_hot_depth(&map, &cfg.bins);
            depth_gt.push(map);
            depth_onehot.push(oh);
            depth_mask.push(mask);
        }
        Self {
            cam_raw: scene.cam_features.clone(),
            lidar_bev: lidar_bev_features(&scene.lidar, &cfg.bev),
            depth_gt,
            depth_onehot,
            depth_mask,
            targets: DetectionTargets::from_boxes(&scene.boxes, &cfg.bev, cfg.num_classes, cfg.pos_weight),
            boxes: scene.boxes.clone(),
            pose: scene.ego_pose,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Linear,
    pub projector: Projector,
    pub fusion: Fusion,
    pub head: DetectionHead,
    pub tfa: Option<TfaMerge>,
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub cam_inputs: Vec<Var>,
    pub lidar: Var,
    pub camera_bev: Var,
    /// Fused features after any temporal merge; the state carried forward.
    pub fused: Var,
    pub head: Var,
    pub depth_probs: Vec<Var>,
    pub attention: Option<Var>,
    pub coverage: Vec<bool>,
}

pub struct LossParts {
    pub total: Var,
    pub detection: Var,
    pub depth: Option<Var>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pc = &cfg.projector;
        let backbone = Linear::new(&mut store, "camera.backbone", cfg.cam_raw_channels, pc.cam_channels, &mut rng)?;
        let projector = Projector::new(&mut store, pc, &mut rng)?;
        let fusion = Fusion::new(&mut store, cfg.fusion, pc.lidar_channels, pc.out_channels, &mut rng)?;
        let head = DetectionHead::new(&mut store, pc.lidar_channels, cfg.head_hidden, cfg.num_classes, &mut rng)?;
        let tfa = if cfg.tfa {
            Some(TfaMerge::new(&mut store, pc.lidar_channels, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            projector,
            fusion,
            head,
            tfa,
        })
    }

    /// Rebuild the module layout for `cfg` and take parameter values from a
    /// checkpoint store.
    pub fn from_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        let n = m.store.load_values_from(store)?;
        if n != m.store.len() {
            return Err(Error::Config(format!(
                "checkpoint provides {n} of {} parameters",
                m.store.len()
            )));
        }
        Ok(m)
    }

    pub fn variant(&self) -> Variant {
        self.cfg.projector.variant
    }

    /// `history` is the previous fused state already aligned to this frame.
    pub fn forward(&self, g: &Graph, inp: &SceneInputs, rig: &Rig, history: Option<Var>) -> Result<Forward> {
        if inp.cam_raw.len() != rig.horizons.len() {
            return Err(Error::Config(format!(
                "scene has {} cameras, rig has {}",
                inp.cam_raw.len(),
                rig.horizons.len()
            )));
        }
        let cam_inputs: Vec<Var> = inp.cam_raw.iter().map(|t| g.input(t.clone())).collect();
        let feats = cam_inputs
            .iter()
            .map(|&x| Ok(g.gelu(pixelwise(g, &self.backbone, x)?)))
            .collect::<Result<Vec<_>>>()?;
        let lidar = g.constant(inp.lidar_bev.clone());
        let proj = self
            .projector
            .forward(g, &feats, lidar, &rig.horizons, Some(&inp.depth_onehot))?;
        let lidar_stream = if self.cfg.use_lidar {
            lidar
        } else {
            g.constant(Tensor::zeros(&inp.lidar_bev.shape))
        };
        let mut fused = self.fusion.fuse(g, lidar_stream, proj.bev)?;
        if let (Some(tfa), Some(prev)) = (&self.tfa, history) {
            fused = tfa.merge(g, prev, fused)?;
        }
        let head = self.head.forward(g, fused)?;
        Ok(Forward {
            cam_inputs,
            lidar,
            camera_bev: proj.bev,
            fused,
            head,
            depth_probs: proj.depth_probs,
            attention: proj.attention,
            coverage: proj.coverage,
        })
    }

    /// Detection loss plus `lambda` times the mean per-camera depth loss.
    pub fn loss(&self, g: &Graph, fwd: &Forward, inp: &SceneInputs, lambda: f64) -> Result<LossParts> {
        let detection = detection_loss(g, fwd.head, &inp.targets)?;
        let depth = self.depth_loss(g, fwd, inp)?;
        let total = match depth {
            Some(d) if lambda != 0.0 => crate::depth::total_loss(g, detection, d, lambda)?,
            _ => detection,
        };
        Ok(LossParts { total, detection, depth })
    }

    pub fn depth_loss(&self, g: &Graph, fwd: &Forward, inp: &SceneInputs) -> Result<Option<Var>> {
        if fwd.depth_probs.is_empty() {
            return Ok(None);
        }
        let mut acc = None;
        for (i, &p) in fwd.depth_probs.iter().enumerate() {
            let l = depth_ce_loss(g, p, &inp.depth_onehot[i], &inp.depth_mask[i])?;
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        Ok(acc.map(|a| g.scale(a, 1.0 / fwd.depth_probs.len() as f64)))
    }

    pub fn decode(&self, head_out: &Tensor) -> Result<Vec<Box3D>> {
        detect(head_out, &self.cfg.bev, &self.cfg.detect)
    }

    /// Single-frame detections for precomputed inputs.
    pub fn detect_inputs(&self, inp: &SceneInputs, rig: &Rig) -> Result<Vec<Box3D>> {
        let g = Graph::with_params(&self.store);
        let fwd = self.forward(&g, inp, rig, None)?;
        self.decode(&g.value(fwd.head))
    }
}

/// A model bound to a rig, usable wherever scenes are turned into boxes.
pub struct BoundModel<'a> {
    pub model: &'a Model,
    pub rig: &'a Rig,
}

impl Detector for BoundModel<'_> {
    fn detect(&self, scene: &SyntheticScene) -> Result<Vec<Box3D>> {
        let inp = SceneInputs::new(scene, &self.model.cfg);
        self.model.detect_inputs(&inp, self.rig)
    }
}
