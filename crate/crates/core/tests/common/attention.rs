use lasfusion::model::{Model, Rig, SceneInputs};
use lasfusion::projection::Variant;
use lasfusion::synthscene::generate;
use lasfusion::tensor::nn::scaled_dot_attention;
use lasfusion::tensor::{Graph, Tensor};

use super::gradients::tiny_run_config;

pub struct AttentionFacts {
    /// Largest deviation of a decoder attention row sum from one.
    pub row_sum_err: f64,
    /// Largest total weight any single camera feature receives across all
    /// depth queries of its column, in the trained-shape projector.
    pub max_key_mass: f64,
    /// Same quantity on the constructed instance.
    pub constructed_key_mass: f64,
    /// Largest deviation of a lift-splat per-pixel depth mass from one.
    pub depth_mass_err: f64,
    /// Largest per-pixel depth mass (the total weight any camera feature can
    /// receive on the lift-splat path).
    pub max_depth_mass: f64,
}

pub fn facts() -> AttentionFacts {
    let run = tiny_run_config();
    let sc = run.scene_config();
    let cams = sc.rig.build().unwrap();
    let scene = generate(&sc, 3).unwrap();

    let mc = run.model_config(Variant::LiftAttendSplat).unwrap();
    let model = Model::new(&mc, 1).unwrap();
    let rig = Rig::new(&cams, &mc.bev, &mc.bins).unwrap();
    let inp = SceneInputs::new(&scene, &mc);
    let g = Graph::with_params(&model.store);
    let fwd = model.forward(&g, &inp, &rig, None).unwrap();
    let att = g.value(fwd.attention.unwrap());
    let (cols, nq, nk) = (att.shape[0], att.shape[1], att.shape[2]);
    let mut row_sum_err: f64 = 0.0;
    let mut max_key_mass: f64 = 0.0;
    for c in 0..cols {
        let mut key_mass = vec![0.0; nk];
        for q in 0..nq {
            let row = &att.data[(c * nq + q) * nk..(c * nq + q + 1) * nk];
            row_sum_err = row_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            for (m, w) in key_mass.iter_mut().zip(row) {
                *m += w;
            }
        }
        max_key_mass = key_mass.into_iter().fold(max_key_mass, f64::max);
    }

    // Every query aligned with key 0 and no other key: key 0 collects
    // nearly all of every row.
    let (lq, lk, d) = (8, 4, 4);
    let g2 = Graph::new();
    let q = g2.constant(Tensor::from_fn(&[1, lq, d], |i| if i % d == 0 { 6.0 } else { 0.0 }));
    let k = g2.constant(Tensor::from_fn(&[1, lk, d], |i| if i == 0 { 6.0 } else { 0.0 }));
    let v = g2.constant(Tensor::ones(&[1, lk, d]));
    let (_, w) = scaled_dot_attention(&g2, q, k, v).unwrap();
    let w = g2.value(w);
    let constructed_key_mass: f64 = (0..lq).map(|r| w.data[r * lk]).sum();
    for r in 0..lq {
        let s: f64 = w.data[r * lk..(r + 1) * lk].iter().sum();
        row_sum_err = row_sum_err.max((s - 1.0).abs());
    }

    let mc = run.model_config(Variant::LiftSplat).unwrap();
    let model = Model::new(&mc, 1).unwrap();
    let inp = SceneInputs::new(&scene, &mc);
    let g3 = Graph::with_params(&model.store);
    let fwd = model.forward(&g3, &inp, &rig, None).unwrap();
    let mut depth_mass_err: f64 = 0.0;
    let mut max_depth_mass: f64 = 0.0;
    for &p in &fwd.depth_probs {
        let t = g3.value(p);
        let hw = t.shape[1] * t.shape[2];
        for k in 0..hw {
            let s: f64 = (0..t.shape[0]).map(|b| t.data[b * hw + k]).sum();
            depth_mass_err = depth_mass_err.max((s - 1.0).abs());
            max_depth_mass = max_depth_mass.max(s);
        }
    }
    AttentionFacts {
        row_sum_err,
        max_key_mass,
        constructed_key_mass,
        depth_mass_err,
        max_depth_mass,
    }
}
