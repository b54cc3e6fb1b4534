use lasfusion::boxfusion::{
    ensemble_pipeline, inverse_transform_boxes, standard_tta_set, transform_boxes, wbf, wrap_yaw, Box3D, Detector,
    TtaTransform,
};
use lasfusion::model::{BoundModel, Model, ModelConfig, Rig};
use lasfusion::projection::Variant;
use lasfusion::synthscene::{generate_symmetric, SceneConfig};
use rand::Rng;

pub const THRESHOLDS: [f64; 3] = [2.0, 0.5, 1.0];

pub fn random_box(rng: &mut impl Rng, spread: f64) -> Box3D {
    let mut b = Box3D::new(
        [rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(0.3..1.0)],
        [rng.random_range(0.5..2.0), rng.random_range(0.5..5.0), rng.random_range(1.0..2.0)],
        rng.random_range(-3.1..3.1),
        rng.random_range(0..3),
        // coarse scores so ties occur
        (rng.random_range(1..=10) as f64) / 10.0,
    )
    .unwrap();
    b.velocity = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    b
}

/// Up to six boxes spread over one to three sources.
pub fn random_instance(rng: &mut impl Rng) -> Vec<Vec<Box3D>> {
    let n_sources = rng.random_range(1..=3);
    let mut lists = vec![Vec::new(); n_sources];
    for _ in 0..rng.random_range(0..=6) {
        let b = random_box(rng, 2.0);
        lists[rng.random_range(0..n_sources)].push(b);
    }
    lists
}

/// All set partitions of `0..n` as block labels, blocks numbered by first
/// appearance.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for b in 0..=max {
            cur.push(b);
            rec(i + 1, n, cur, if b == max { max + 1 } else { max }, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::new(), 0, &mut out);
    out
}

fn weighted_center(members: &[Box3D]) -> (f64, f64) {
    let s: f64 = members.iter().map(|b| b.score).sum();
    let x = members.iter().map(|b| b.score * b.center[0]).sum::<f64>() / s;
    let y = members.iter().map(|b| b.score * b.center[1]).sum::<f64>() / s;
    (x, y)
}

/// Boxes in the documented total order: score desc, x, y, class.
fn ordered(lists: &[Vec<Box3D>]) -> Vec<Box3D> {
    let mut all: Vec<Box3D> = lists.iter().flatten().copied().collect();
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.center[0].partial_cmp(&b.center[0]).unwrap())
            .then(a.center[1].partial_cmp(&b.center[1]).unwrap())
            .then(a.class.cmp(&b.class))
    });
    all
}

/// A partition is consistent when each box, visited in order, sits in the
/// earliest-created same-class cluster whose running fused centre is within
/// the class radius, or opens a new cluster when none is.
fn consistent(boxes: &[Box3D], labels: &[usize], thresholds: &[f64]) -> bool {
    for i in 0..boxes.len() {
        let b = &boxes[i];
        let mut expected = None;
        let mut seen = Vec::new();
        for j in 0..i {
            let l = labels[j];
            if seen.contains(&l) {
                continue;
            }
            seen.push(l);
            let members: Vec<Box3D> = (0..i).filter(|&k| labels[k] == l).map(|k| boxes[k]).collect();
            if members[0].class != b.class {
                continue;
            }
            let (x, y) = weighted_center(&members);
            if (x - b.center[0]).hypot(y - b.center[1]) <= thresholds[b.class] {
                expected = Some(l);
                break;
            }
        }
        let opens_new = !labels[..i].contains(&labels[i]);
        match expected {
            Some(l) => {
                if labels[i] != l {
                    return false;
                }
            }
            None => {
                if !opens_new {
                    return false;
                }
            }
        }
    }
    true
}

fn oracle_fuse(members: &[Box3D], n_sources: usize) -> Box3D {
    let s: f64 = members.iter().map(|b| b.score).sum();
    let avg = |f: &dyn Fn(&Box3D) -> f64| members.iter().map(|b| b.score * f(b)).sum::<f64>() / s;
    let yaw = avg(&|b| b.yaw.sin()).atan2(avg(&|b| b.yaw.cos()));
    let n = members.len().min(n_sources);
    Box3D {
        center: [avg(&|b| b.center[0]), avg(&|b| b.center[1]), avg(&|b| b.center[2])],
        dims: [avg(&|b| b.dims[0]), avg(&|b| b.dims[1]), avg(&|b| b.dims[2])],
        yaw: wrap_yaw(yaw),
        velocity: [avg(&|b| b.velocity[0]), avg(&|b| b.velocity[1])],
        class: members[0].class,
        score: (s / members.len() as f64) * n as f64 / n_sources as f64,
    }
}

pub fn boxes_close(a: &Box3D, b: &Box3D, tol: f64) -> bool {
    let yaw_diff = wrap_yaw(a.yaw - b.yaw).abs();
    a.class == b.class
        && (0..3).all(|k| (a.center[k] - b.center[k]).abs() <= tol && (a.dims[k] - b.dims[k]).abs() <= tol)
        && (0..2).all(|k| (a.velocity[k] - b.velocity[k]).abs() <= tol)
        && yaw_diff.min(2.0 * std::f64::consts::PI - yaw_diff) <= tol
        && (a.score - b.score).abs() <= tol
}

/// Exhaustive clustering of one instance; errors unless exactly one
/// partition is consistent and its fused boxes equal the greedy output.
pub fn check_against_oracle(lists: &[Vec<Box3D>]) -> Result<(), String> {
    let boxes = ordered(lists);
    let valid: Vec<Vec<usize>> = partitions(boxes.len())
        .into_iter()
        .filter(|p| consistent(&boxes, p, &THRESHOLDS))
        .collect();
    if valid.len() != 1 {
        return Err(format!("{} consistent partitions for {boxes:?}", valid.len()));
    }
    let labels = &valid[0];
    let n_blocks = labels.iter().max().map_or(0, |m| m + 1);
    let expected: Vec<Box3D> = (0..n_blocks)
        .map(|l| {
            let members: Vec<Box3D> = (0..boxes.len()).filter(|&k| labels[k] == l).map(|k| boxes[k]).collect();
            oracle_fuse(&members, lists.len().max(1))
        })
        .collect();
    let got = wbf(lists, &THRESHOLDS).map_err(|e| e.to_string())?;
    if got.len() != expected.len() || !got.iter().zip(&expected).all(|(a, b)| boxes_close(a, b, 1e-12)) {
        return Err(format!("greedy {got:?}\noracle {expected:?}"));
    }
    Ok(())
}

pub fn check_tta_round_trip(rng: &mut impl Rng, n: usize) -> Result<(), String> {
    let mut transforms = standard_tta_set();
    for _ in 0..20 {
        transforms.push(TtaTransform {
            mirror_y: rng.random_bool(0.5),
            rotation_deg: rng.random_range(-180.0..180.0),
        });
    }
    let boxes: Vec<Box3D> = (0..n).map(|_| random_box(rng, 30.0)).collect();
    for t in &transforms {
        let back = inverse_transform_boxes(&transform_boxes(&boxes, t), t);
        for (a, b) in boxes.iter().zip(&back) {
            if !boxes_close(a, b, 1e-12) {
                return Err(format!("{} does not round-trip: {a:?} -> {b:?}", t.label()));
            }
        }
    }
    Ok(())
}

fn mirrored(b: &Box3D) -> Box3D {
    Box3D {
        center: [b.center[0], -b.center[1], b.center[2]],
        yaw: wrap_yaw(-b.yaw),
        velocity: [b.velocity[0], -b.velocity[1]],
        ..*b
    }
}

/// One untrained model with identity + mirror TTA on mirror-symmetric scenes:
/// the fused set maps onto itself under `y -> -y`. Returns the number of
/// fused boxes checked.
pub fn check_mirror_symmetry(seeds: std::ops::Range<u64>, tol: f64) -> Result<usize, String> {
    let cfg = SceneConfig {
        noise: 0.0,
        ..SceneConfig::default()
    };
    let mc = ModelConfig::toy(Variant::Uniform, &cfg).map_err(|e| e.to_string())?;
    let model = Model::new(&mc, 11).map_err(|e| e.to_string())?;
    let cams = cfg.rig.build().map_err(|e| e.to_string())?;
    let rig = Rig::new(&cams, &mc.bev, &mc.bins).map_err(|e| e.to_string())?;
    let bound = BoundModel { model: &model, rig: &rig };
    let tta = [
        TtaTransform::IDENTITY,
        TtaTransform {
            mirror_y: true,
            rotation_deg: 0.0,
        },
    ];
    let mut checked = 0;
    for seed in seeds {
        let scene = generate_symmetric(&cfg, seed).map_err(|e| e.to_string())?;
        let models: [&dyn Detector; 1] = [&bound];
        let fused = ensemble_pipeline(&models, &scene, &tta, &cfg.wbf_thresholds()).map_err(|e| e.to_string())?;
        for b in &fused {
            let m = mirrored(b);
            if !fused.iter().any(|o| boxes_close(o, &m, tol)) {
                return Err(format!("scene {seed}: no mirror partner for {b:?}"));
            }
        }
        checked += fused.len();
    }
    Ok(checked)
}
