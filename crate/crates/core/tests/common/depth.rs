use lasfusion::depth::{depth_metrics, lidar_depth_map, mode_depth, one_hot_depth, DepthBins, DepthMap, DepthMetrics};
use lasfusion::synthscene::{generate, SceneConfig};

pub fn map(values: &[f64], defined: &[bool], width: usize) -> DepthMap {
    DepthMap {
        height: values.len() / width,
        width,
        values: values.to_vec(),
        defined: defined.to_vec(),
    }
}

fn expect_eq(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got:.17}, want {want:.17}"))
    }
}

pub fn check_single_cell() -> Result<(), String> {
    let m = depth_metrics(&[10.0], &map(&[8.0], &[true], 1)).map_err(|e| e.to_string())?;
    expect_eq("abs_rel", m.abs_rel, 0.25, 0.0)?;
    expect_eq("sq_rel", m.sq_rel, 0.5, 0.0)?;
    expect_eq("rmse", m.rmse, 2.0, 0.0)?;
    expect_eq("rmsle", m.rmsle, 1.25f64.ln(), 1e-15)?;
    expect_eq("frac125", m.frac125, 0.0, 0.0)
}

/// Three defined cells with one masked out: (2 vs 4), (4 vs 4), (3 vs 2).
pub fn check_masked_example() -> Result<(), String> {
    let gt = map(&[4.0, 4.0, 7.0, 2.0], &[true, true, false, true], 2);
    let m = depth_metrics(&[2.0, 4.0, 100.0, 3.0], &gt).map_err(|e| e.to_string())?;
    expect_eq("abs_rel", m.abs_rel, 1.0 / 3.0, 0.0)?;
    expect_eq("sq_rel", m.sq_rel, 0.5, 0.0)?;
    expect_eq("rmse", m.rmse, (5.0f64 / 3.0).sqrt(), 0.0)?;
    let (l2, l15) = (2f64.ln(), 1.5f64.ln());
    expect_eq("rmsle", m.rmsle, ((l2 * l2 + l15 * l15) / 3.0).sqrt(), 1e-15)?;
    expect_eq("frac125", m.frac125, 2.0 / 3.0, 0.0)
}

pub fn check_perfect() -> Result<(), String> {
    let vals = [1.5, 7.25, 30.0, 12.0];
    let m = depth_metrics(&vals, &map(&vals, &[true; 4], 2)).map_err(|e| e.to_string())?;
    if m != DepthMetrics::default() {
        return Err(format!("perfect prediction gives {m:?}"));
    }
    Ok(())
}

pub fn check_pooling() -> Result<(), String> {
    let a = map(&[4.0, 5.0, 9.0], &[true, true, true], 3);
    let b = map(&[2.0, 6.0, 1.0], &[true, false, true], 3);
    let (pa, pb) = ([3.0, 5.5, 10.0], [2.5, 1.0, 1.2]);
    let ma = depth_metrics(&pa, &a).map_err(|e| e.to_string())?;
    let mb = depth_metrics(&pb, &b).map_err(|e| e.to_string())?;
    let pooled = DepthMetrics::pooled(&[(ma, 3), (mb, 2)]).map_err(|e| e.to_string())?;
    let joint_gt = map(&[4.0, 5.0, 9.0, 2.0, 6.0, 1.0], &[true, true, true, true, false, true], 6);
    let joint = depth_metrics(&[3.0, 5.5, 10.0, 2.5, 1.0, 1.2], &joint_gt).map_err(|e| e.to_string())?;
    for (name, x, y) in [
        ("abs_rel", pooled.abs_rel, joint.abs_rel),
        ("sq_rel", pooled.sq_rel, joint.sq_rel),
        ("rmse", pooled.rmse, joint.rmse),
        ("rmsle", pooled.rmsle, joint.rmsle),
        ("frac125", pooled.frac125, joint.frac125),
    ] {
        expect_eq(name, x, y, 1e-14)?;
    }
    Ok(())
}

/// Pooled abs_rel of bin-centre decoding of lidar one-hot depth over
/// synthetic scenes, with half a bin width over the mean defined depth.
pub fn lidar_quantization(scenes: usize, bins: &DepthBins) -> Result<(f64, f64), String> {
    let cfg = SceneConfig::default();
    let mut parts = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for seed in 0..scenes as u64 {
        let scene = generate(&cfg, 10_000 + seed).map_err(|e| e.to_string())?;
        let pts = scene.lidar_positions();
        for cam in &scene.cameras {
            let gt = lidar_depth_map(&pts, cam, bins.d_min, bins.d_max);
            let (onehot, mask) = one_hot_depth(&gt, bins);
            let pred = mode_depth(&onehot, bins).map_err(|e| e.to_string())?;
            let masked = DepthMap {
                defined: mask,
                ..gt.clone()
            };
            let n = masked.defined_count();
            if n == 0 {
                continue;
            }
            for (k, &d) in masked.defined.iter().enumerate() {
                if d {
                    if (pred[k] - gt.values[k]).abs() > bins.width() / 2.0 + 1e-12 {
                        return Err(format!("cell error {} exceeds half a bin", (pred[k] - gt.values[k]).abs()));
                    }
                    sum += gt.values[k];
                    count += 1;
                }
            }
            parts.push((depth_metrics(&pred, &masked).map_err(|e| e.to_string())?, n));
        }
    }
    let pooled = DepthMetrics::pooled(&parts).map_err(|e| e.to_string())?;
    Ok((pooled.abs_rel, bins.width() / 2.0 / (sum / count as f64)))
}

pub fn check_decoders(bins: &DepthBins) -> Result<(), String> {
    use lasfusion::depth::mean_depth;
    use lasfusion::tensor::Tensor;
    let n = bins.n;
    let mut t = Tensor::zeros(&[n, 1, 3]);
    t.data[2 * 3] = 1.0;
    t.data[3 + 1] = 0.5;
    t.data[(n - 1) * 3 + 1] = 0.5;
    t.data[2] = 0.25;
    t.data[3 + 2] = 0.25;
    t.data[2 * 3 + 2] = 0.5;
    let mode = mode_depth(&t, bins).map_err(|e| e.to_string())?;
    let mean = mean_depth(&t, bins).map_err(|e| e.to_string())?;
    let c = |b: usize| bins.d_min + (b as f64 + 0.5) * (bins.d_max - bins.d_min) / n as f64;
    expect_eq("mode one-hot", mode[0], c(2), 1e-12)?;
    expect_eq("mode tie", mode[1], c(1), 1e-12)?;
    expect_eq("mode", mode[2], c(2), 1e-12)?;
    expect_eq("mean one-hot", mean[0], c(2), 1e-12)?;
    expect_eq("mean split", mean[1], 0.5 * c(1) + 0.5 * c(n - 1), 1e-12)?;
    expect_eq("mean", mean[2], 0.25 * c(0) + 0.25 * c(1) + 0.5 * c(2), 1e-12)
}
