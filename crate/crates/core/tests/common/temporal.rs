use lasfusion::geometry::BevGrid;
use lasfusion::model::{Model, Rig, SceneInputs};
use lasfusion::projection::Variant;
use lasfusion::synthscene::{generate_sequence, EgoMotion};
use lasfusion::temporal::{ego_compensate_tensor, run_sequence, EgoPose};
use lasfusion::tensor::Tensor;
use rand::Rng;

use super::gradients::tiny_run_config;

fn random_pose(rng: &mut impl Rng) -> EgoPose {
    EgoPose {
        theta: rng.random_range(-3.1..3.1),
        tx: rng.random_range(-50.0..50.0),
        ty: rng.random_range(-50.0..50.0),
        timestamp: 0.0,
    }
}

pub fn check_identity(rng: &mut impl Rng, cases: usize) -> Result<(), String> {
    for _ in 0..cases {
        let bev = BevGrid::square(rng.random_range(4..20), rng.random_range(0.25..2.0));
        let t = Tensor::from_fn(&[3, bev.cells_y, bev.cells_x], |_| rng.random_range(-5.0..5.0));
        let p = random_pose(rng);
        let out = ego_compensate_tensor(&t, &p, &p, &bev).map_err(|e| e.to_string())?;
        if out != t {
            return Err(format!("identity compensation changed the map at pose {p:?}"));
        }
    }
    Ok(())
}

/// Moving the ego by whole cells along its own axes shifts the map by the
/// same number of cells; every interior cell equals its source bit for bit.
pub fn check_integer_translation(rng: &mut impl Rng, cases: usize) -> Result<(), String> {
    for _ in 0..cases {
        let n = rng.random_range(6..20);
        let bev = BevGrid::square(n, [0.5, 1.0, 2.0][rng.random_range(0..3)]);
        let t = Tensor::from_fn(&[2, n, n], |_| rng.random_range(-5.0..5.0));
        let (kx, ky) = (rng.random_range(-3i64..=3), rng.random_range(-3i64..=3));
        let prev = EgoPose {
            theta: 0.0,
            tx: rng.random_range(-20..20) as f64 * bev.cell_size,
            ty: rng.random_range(-20..20) as f64 * bev.cell_size,
            timestamp: 0.0,
        };
        let cur = EgoPose {
            tx: prev.tx + kx as f64 * bev.cell_size,
            ty: prev.ty + ky as f64 * bev.cell_size,
            timestamp: 1.0,
            ..prev
        };
        let out = ego_compensate_tensor(&t, &prev, &cur, &bev).map_err(|e| e.to_string())?;
        for ch in 0..2 {
            for r in 0..n as i64 {
                for c in 0..n as i64 {
                    let (sr, sc) = (r + ky, c + kx);
                    let got = out.data[ch * n * n + (r * n as i64 + c) as usize];
                    let want = if sr >= 0 && sc >= 0 && sr < n as i64 && sc < n as i64 {
                        t.data[ch * n * n + (sr * n as i64 + sc) as usize]
                    } else {
                        0.0
                    };
                    if got.to_bits() != want.to_bits() {
                        return Err(format!("shift ({kx},{ky}) cell ({r},{c}): {got} != {want}"));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn tiny_sequence(mc: &lasfusion::model::ModelConfig, frames: usize, seed: u64) -> Vec<SceneInputs> {
    let sc = tiny_run_config().scene_config();
    let motion = EgoMotion {
        speed: 2.0,
        yaw_rate: 0.1,
        dt: 0.5,
    };
    generate_sequence(&sc, frames, motion, seed)
        .unwrap()
        .iter()
        .map(|s| SceneInputs::new(s, mc))
        .collect()
}

/// Window-1 autoregressive inference equals independent single-frame
/// detection, and a merge block with zero weights is an exact pass-through
/// at any window.
pub fn check_window_one() -> Result<(), String> {
    let run = tiny_run_config();
    let cams = run.scene_config().rig.build().map_err(|e| e.to_string())?;
    for variant in [Variant::Uniform, Variant::LiftSplat] {
        let mut mc = run.model_config(variant).map_err(|e| e.to_string())?;
        mc.detect.threshold = 0.3;
        mc.tfa = true;
        let rig = Rig::new(&cams, &mc.bev, &mc.bins).map_err(|e| e.to_string())?;
        let frames = tiny_sequence(&mc, 4, 9);
        let mut model = Model::new(&mc, 2).map_err(|e| e.to_string())?;
        let single: Vec<_> = frames
            .iter()
            .map(|f| model.detect_inputs(f, &rig))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        if single.iter().all(Vec::is_empty) {
            return Err("no detections to compare".into());
        }
        let seq = run_sequence(&frames, &model, &rig, 1).map_err(|e| e.to_string())?;
        if seq != single {
            return Err(format!("{variant}: window 1 differs from single-frame detection"));
        }
        let windowed = run_sequence(&frames, &model, &rig, 3).map_err(|e| e.to_string())?;
        if windowed == single {
            return Err(format!("{variant}: random merge weights had no effect"));
        }
        let tfa = model.tfa.clone().ok_or("merge block missing")?;
        for id in [tfa.conv.w, tfa.conv.b] {
            model.store.get_mut(id).tensor.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let zeroed = run_sequence(&frames, &model, &rig, 3).map_err(|e| e.to_string())?;
        if zeroed != single {
            return Err(format!("{variant}: zero merge is not a pass-through"));
        }
    }
    Ok(())
}
