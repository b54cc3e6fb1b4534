use std::sync::Arc;

use lasfusion::depth::depth_ce_loss;
use lasfusion::fusion_head::{detection_loss, DetectionTargets, Fusion, FusionMode};
use lasfusion::geometry::{build_projected_horizon, BevGrid, CameraModel, ProjectedHorizon, Vec3};
use lasfusion::harness::RunConfig;
use lasfusion::model::{Model, Rig, SceneInputs};
use lasfusion::projection::{lift_splat_project, uniform_project, weighted_project, Variant};
use lasfusion::synthscene::generate;
use lasfusion::temporal::{ego_compensate, EgoPose, TfaMerge};
use lasfusion::tensor::gradcheck::{grad_check, grad_check_inputs, GradCheckReport};
use lasfusion::tensor::nn::{DecoderLayer, EncoderLayer, LayerNorm, Linear, MultiHeadAttention};
use lasfusion::tensor::{Graph, ParamStore, SparseMap, Tensor, Var};
use lasfusion::boxfusion::Box3D;
use lasfusion::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = (String, GradCheckReport);

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduce `y` to a scalar through fixed random weights so every output
/// element carries a distinct cotangent.
fn project(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &g.shape(y), -1.0, 1.0);
    Ok(g.sum(g.mul_const(y, &w)?))
}

fn inputs_check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&Graph, &[Var]) -> Result<Var>) -> Check {
    let r = grad_check_inputs(&inputs, |g, v| project(g, f(g, v)?, 99)).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name.to_string(), r)
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut out = Vec::new();
    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    out.push(inputs_check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])));
    out.push(inputs_check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])));
    out.push(inputs_check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])));
    out.push(inputs_check("scale", vec![a.clone()], |g, v| Ok(g.scale(v[0], -2.5))));
    let c = b.clone();
    out.push(inputs_check("mul_const", vec![a.clone()], move |g, v| g.mul_const(v[0], &c)));
    out.push(inputs_check("add_bias", vec![a.clone(), rand_tensor(rng, &[4], -1.0, 1.0)], |g, v| g.add_bias(v[0], v[1])));
    out.push(inputs_check("matmul", vec![a.clone(), rand_tensor(rng, &[4, 5], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])));
    let x = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
    out.push(inputs_check("bmm", vec![x.clone(), rand_tensor(rng, &[2, 4, 5], -1.0, 1.0)], |g, v| g.bmm(v[0], v[1], false)));
    out.push(inputs_check("bmm_trans", vec![x.clone(), rand_tensor(rng, &[2, 5, 4], -1.0, 1.0)], |g, v| g.bmm(v[0], v[1], true)));
    out.push(inputs_check("reshape", vec![x.clone()], |g, v| g.reshape(v[0], &[6, 4])));
    out.push(inputs_check("permute", vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1])));
    out.push(inputs_check("concat", vec![x.clone(), rand_tensor(rng, &[2, 2, 4], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 1)));
    out.push(inputs_check("slice", vec![x.clone()], |g, v| g.slice(v[0], 2, 1, 2)));
    for axis in 0..3 {
        out.push(inputs_check(&format!("softmax_axis{axis}"), vec![x.clone()], move |g, v| g.softmax(v[0], axis)));
        out.push(inputs_check(&format!("sum_axis{axis}"), vec![x.clone()], move |g, v| g.sum_axis(v[0], axis)));
    }
    out.push(inputs_check(
        "layernorm",
        vec![rand_tensor(rng, &[3, 6], -2.0, 2.0), rand_tensor(rng, &[6], 0.5, 1.5), rand_tensor(rng, &[6], -0.5, 0.5)],
        |g, v| g.layernorm(v[0], v[1], v[2], 1e-5),
    ));
    out.push(inputs_check("gelu", vec![rand_tensor(rng, &[10], -3.0, 3.0)], |g, v| Ok(g.gelu(v[0]))));
    out.push(inputs_check("sigmoid", vec![rand_tensor(rng, &[10], -4.0, 4.0)], |g, v| Ok(g.sigmoid(v[0]))));
    out.push(inputs_check("abs", vec![away_from_zero(rng, &[10])], |g, v| Ok(g.abs(v[0]))));
    out.push(inputs_check("ln_clamped", vec![rand_tensor(rng, &[10], 0.1, 3.0)], |g, v| Ok(g.ln_clamped(v[0], 1e-12))));
    out.push(inputs_check("sum", vec![x.clone()], |g, v| Ok(g.sum(v[0]))));
    out.push(inputs_check("mean", vec![x.clone()], |g, v| Ok(g.mean(v[0]))));
    let rows = (0..5)
        .map(|i| (0..4).filter(|j| (i + j) % 3 != 0).map(|j| (j, 0.3 + 0.1 * (i * 4 + j) as f64)).collect())
        .collect();
    let map = Arc::new(SparseMap::from_rows(4, rows));
    out.push(inputs_check("sparse_map", vec![rand_tensor(rng, &[2, 4], -1.0, 1.0)], move |g, v| g.sparse_map(v[0], &map)));
    for k in [1, 3] {
        out.push(inputs_check(
            &format!("conv2d_k{k}"),
            vec![
                rand_tensor(rng, &[2, 4, 5], -1.0, 1.0),
                rand_tensor(rng, &[3, 2, k, k], -1.0, 1.0),
                rand_tensor(rng, &[3], -1.0, 1.0),
            ],
            |g, v| g.conv2d(v[0], v[1], v[2]),
        ));
    }
    let t = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
    let w = rand_tensor(rng, &[3, 4], 0.5, 3.0);
    out.push(inputs_check("bce_with_logits", vec![rand_tensor(rng, &[3, 4], -3.0, 3.0)], move |g, v| {
        g.bce_with_logits(v[0], &t, &w)
    }));
    out
}

fn param_check(name: &str, store: &ParamStore, f: impl Fn(&Graph) -> Result<Var>) -> Check {
    let r = grad_check(store, f, 12).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name.to_string(), r)
}

fn module_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut out = Vec::new();
    let x = rand_tensor(rng, &[2, 3, 8], -1.0, 1.0);
    let mem = rand_tensor(rng, &[2, 5, 8], -1.0, 1.0);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 8, 4, rng).unwrap();
    let xi = x.clone();
    out.push(param_check("linear", &s, move |g| project(g, lin.forward(g, g.constant(xi.clone()))?, 1)));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 8).unwrap();
    for p in s.ids().collect::<Vec<_>>() {
        let t = &mut s.get_mut(p).tensor;
        for v in &mut t.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let xi = x.clone();
    out.push(param_check("layernorm_module", &s, move |g| project(g, ln.forward(g, g.constant(xi.clone()))?, 2)));

    for tied in [true, false] {
        let mut s = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut s, "mha", 8, 2, tied, rng).unwrap();
        let (xi, mi) = (x.clone(), mem.clone());
        out.push(param_check(&format!("attention_tied_{tied}"), &s, move |g| {
            let a = mha.forward(g, g.constant(xi.clone()), g.constant(mi.clone()))?;
            project(g, a.out, 3)
        }));
        let mut s = ParamStore::new();
        let enc = EncoderLayer::new(&mut s, "enc", 8, 16, 2, tied, rng).unwrap();
        let xi = x.clone();
        out.push(param_check(&format!("encoder_tied_{tied}"), &s, move |g| {
            project(g, enc.forward(g, g.constant(xi.clone()))?, 4)
        }));
        let mut s = ParamStore::new();
        let dec = DecoderLayer::new(&mut s, "dec", 8, 16, 2, tied, rng).unwrap();
        let (xi, mi) = (x.clone(), mem.clone());
        out.push(param_check(&format!("decoder_tied_{tied}"), &s, move |g| {
            let (y, _) = dec.forward(g, g.constant(xi.clone()), g.constant(mi.clone()))?;
            project(g, y, 5)
        }));
    }

    for mode in FusionMode::ALL {
        let mut s = ParamStore::new();
        let f = Fusion::new(&mut s, mode, 3, 3, rng).unwrap();
        let (l, c) = (rand_tensor(rng, &[3, 4, 4], -1.0, 1.0), rand_tensor(rng, &[3, 4, 4], -1.0, 1.0));
        let (li, ci) = (l.clone(), c.clone());
        if !s.is_empty() {
            out.push(param_check(&format!("fusion_{}", mode.name()), &s, move |g| {
                project(g, f.fuse(g, g.constant(li.clone()), g.constant(ci.clone()))?, 6)
            }));
        } else {
            out.push(inputs_check(&format!("fusion_{}", mode.name()), vec![l, c], move |g, v| f.fuse(g, v[0], v[1])));
        }
    }

    let mut s = ParamStore::new();
    let tfa = TfaMerge::new(&mut s, 3, rng).unwrap();
    let (p, c) = (rand_tensor(rng, &[3, 5, 5], -1.0, 1.0), rand_tensor(rng, &[3, 5, 5], -1.0, 1.0));
    out.push(param_check("tfa_merge", &s, move |g| project(g, tfa.merge(g, g.constant(p.clone()), g.constant(c.clone()))?, 7)));

    let bev = BevGrid::square(6, 1.0);
    let prev = EgoPose { theta: 0.2, tx: 0.3, ty: -0.4, timestamp: 0.0 };
    let cur = EgoPose { theta: -0.1, tx: 1.1, ty: 0.2, timestamp: 0.5 };
    out.push(inputs_check("ego_compensate", vec![rand_tensor(rng, &[2, 6, 6], -1.0, 1.0)], move |g, v| {
        ego_compensate(g, v[0], &prev, &cur, &bev)
    }));

    let onehot = Tensor::from_fn(&[4, 2, 3], |i| ((i / 6) == (i % 4)) as u8 as f64);
    let mask = vec![true, false, true, true, true, false];
    out.push(inputs_check("depth_ce_loss", vec![rand_tensor(rng, &[4, 2, 3], -1.0, 1.0)], move |g, v| {
        let p = g.softmax(v[0], 0)?;
        depth_ce_loss(g, p, &onehot, &mask)
    }));

    let bev = BevGrid::square(6, 1.0);
    let boxes = vec![
        Box3D::new([0.3, -1.2, 0.8], [4.0, 1.8, 1.6], 0.4, 0, 1.0).unwrap(),
        Box3D::new([-2.1, 1.7, 0.9], [0.7, 0.7, 1.8], -1.1, 1, 1.0).unwrap(),
    ];
    let targets = DetectionTargets::from_boxes(&boxes, &bev, 3, 5.0);
    let mut pred = rand_tensor(rng, &[10, 6, 6], -1.0, 1.0);
    // keep regression residuals away from the L1 kink
    for ch in 1..7 {
        for k in 0..36 {
            if targets.reg_mask.data[(ch - 1) * 36 + k] > 0.0 {
                pred.data[ch * 36 + k] = targets.reg.data[(ch - 1) * 36 + k] + 0.5;
            }
        }
    }
    out.push(inputs_check("detection_loss", vec![pred], move |g, v| detection_loss(g, v[0], &targets)));
    out
}

fn small_horizon() -> ProjectedHorizon {
    let cam = CameraModel::from_pose(40.0, 40.0, Vec3::new(0.2, -0.1, 1.5), 1.3, 0.08, 48, 24, 8).unwrap();
    build_projected_horizon(&cam, 0, &BevGrid::square(10, 1.5), 5, 1.0, 11.0).unwrap()
}

/// Projection operators in isolation: depth-weighted outer product, uniform
/// and arbitrary weightings, differentiated through context and depth.
fn projection_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let hz = small_horizon();
    let (h, w, nd) = (hz.camera.feat_height(), hz.width, hz.n_depth);
    let ctx = rand_tensor(rng, &[2, h, w], -1.0, 1.0);
    let logits = rand_tensor(rng, &[nd, h, w], -1.0, 1.0);
    let mut out = Vec::new();
    let hz1 = hz.clone();
    out.push(inputs_check("lift_splat_project", vec![ctx.clone(), logits.clone()], move |g, v| {
        let d = g.softmax(v[1], 0)?;
        lift_splat_project(g, v[0], d, &hz1)
    }));
    let hz2 = hz.clone();
    out.push(inputs_check("uniform_project", vec![ctx.clone()], move |g, v| uniform_project(g, v[0], &hz2)));
    let hz3 = hz.clone();
    out.push(inputs_check("weighted_project", vec![ctx, logits], move |g, v| weighted_project(g, v[0], v[1], &hz3)));
    let hz4 = hz;
    out.push(inputs_check("lift", vec![rand_tensor(rng, &[2, 10, 10], -1.0, 1.0)], move |g, v| hz4.lift(g, v[0])));
    out
}

pub fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("bev_cells", "12"),
        ("cell_size", "2"),
        ("n_cameras", "2"),
        ("image_width", "64"),
        ("image_height", "32"),
        ("stride", "8"),
        ("n_depth", "6"),
        ("d_min", "1"),
        ("d_max", "13"),
        ("d_model", "8"),
        ("d_ff", "16"),
        ("heads", "2"),
        ("head_hidden", "4"),
        ("min_boxes", "2"),
        ("max_boxes", "3"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

/// Smallest |prediction - target| over supervised regression entries; the
/// L1 term has a kink there that finite differences must not straddle.
fn min_l1_residual(model: &Model, rig: &Rig, inp: &SceneInputs) -> f64 {
    let g = Graph::with_params(&model.store);
    let head = g.value(model.forward(&g, inp, rig, None).unwrap().head);
    let t = &inp.targets;
    let nm = t.occ.numel();
    (0..t.reg.numel())
        .filter(|&i| t.reg_mask.data[i] > 0.0)
        .map(|i| (head.data[nm + i] - t.reg.data[i]).abs())
        .fold(f64::INFINITY, f64::min)
}

fn model_clear_of_kinks(mc: &lasfusion::model::ModelConfig, rig: &Rig, inputs: &[&SceneInputs]) -> Model {
    (0..100)
        .map(|seed| Model::new(mc, seed).unwrap())
        .find(|m| inputs.iter().all(|inp| min_l1_residual(m, rig, inp) > 1e-3))
        .expect("some seed keeps residuals off the L1 kink")
}

/// Whole-model loss gradients for every projector variant, including the
/// depth term, plus a two-frame temporal window through ego compensation.
fn pipeline_checks() -> Vec<Check> {
    let run = tiny_run_config();
    let scene_cfg = run.scene_config();
    let scene = generate(&scene_cfg, 5).unwrap();
    let cams = scene_cfg.rig.build().unwrap();
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let mut mc = run.model_config(variant).unwrap();
        mc.fusion = FusionMode::GatedSigmoid;
        let rig = Rig::new(&cams, &mc.bev, &mc.bins).unwrap();
        let inp = SceneInputs::new(&scene, &mc);
        let model = model_clear_of_kinks(&mc, &rig, &[&inp]);
        let r = grad_check(
            &model.store,
            |g| {
                let fwd = model.forward(g, &inp, &rig, None)?;
                Ok(model.loss(g, &fwd, &inp, 0.7)?.total)
            },
            6,
        )
        .unwrap_or_else(|e| panic!("{variant}: {e}"));
        out.push((format!("pipeline_{}", variant.name()), r));
    }
    let mut mc = run.model_config(Variant::LiftSplat).unwrap();
    mc.tfa = true;
    let rig = Rig::new(&cams, &mc.bev, &mc.bins).unwrap();
    let prev_scene = generate(&scene_cfg, 6).unwrap();
    let prev = SceneInputs::new(&prev_scene, &mc);
    let mut cur = SceneInputs::new(&scene, &mc);
    cur.pose = EgoPose { theta: 0.1, tx: 1.0, ty: 0.5, timestamp: 0.5 };
    let model = model_clear_of_kinks(&mc, &rig, &[&prev, &cur]);
    let r = grad_check(
        &model.store,
        |g| {
            let f0 = model.forward(g, &prev, &rig, None)?;
            let aligned = ego_compensate(g, f0.fused, &prev.pose, &cur.pose, &mc.bev)?;
            let f1 = model.forward(g, &cur, &rig, Some(aligned))?;
            let l0 = model.loss(g, &f0, &prev, 0.5)?.total;
            let l1 = model.loss(g, &f1, &cur, 0.5)?.total;
            g.add(l0, l1)
        },
        6,
    )
    .unwrap();
    out.push(("pipeline_temporal_window".into(), r));
    out
}

pub fn gradient_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut all = op_checks(&mut rng);
    all.extend(module_checks(&mut rng));
    all.extend(projection_checks(&mut rng));
    all.extend(pipeline_checks());
    all
}
