use lasfusion::geometry::{build_projected_horizon, BevGrid, CameraModel, ProjectedHorizon, Projection, Vec3};
use lasfusion::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct PoseCase {
    pub cam: CameraModel,
    pub bev: BevGrid,
    pub n_depth: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl PoseCase {
    pub fn horizon(&self) -> ProjectedHorizon {
        build_projected_horizon(&self.cam, 0, &self.bev, self.n_depth, self.d_min, self.d_max).unwrap()
    }
}

pub fn random_case(rng: &mut impl Rng) -> PoseCase {
    let sizes = [(192, 96, 8), (160, 64, 16), (128, 96, 8), (96, 48, 4)];
    let (w, h, s) = sizes[rng.random_range(0..sizes.len())];
    let fx = rng.random_range(50.0..200.0);
    let fy = fx * rng.random_range(0.8..1.2);
    let pos = Vec3::new(
        rng.random_range(-4.0..4.0),
        rng.random_range(-4.0..4.0),
        rng.random_range(0.5..3.0),
    );
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let pitch = rng.random_range(-0.25..0.35);
    let cam = CameraModel::from_pose(fx, fy, pos, yaw, pitch, w, h, s).unwrap();
    let bev = BevGrid::square(rng.random_range(12..36), rng.random_range(0.5..1.5));
    let d_min = rng.random_range(0.5..2.0);
    PoseCase {
        cam,
        bev,
        n_depth: rng.random_range(4..28),
        d_min,
        d_max: d_min + rng.random_range(10.0..40.0),
    }
}

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Horizon centres lie on the middle image row, on their rays at the bin
/// centre distance, and on the horizon plane.
pub fn check_plane_membership(case: &PoseCase, h: &ProjectedHorizon) -> Result<(), String> {
    let v_mid = case.cam.height as f64 / 2.0;
    let [a, b, c, e] = case.cam.horizon_plane();
    let scale = (a * a + b * b + c * c).sqrt();
    for bin in 0..h.n_depth {
        let dist = case.d_min + (bin as f64 + 0.5) * (case.d_max - case.d_min) / case.n_depth as f64;
        for j in 0..h.width {
            let x = h.center(bin, j);
            let u_expect = (j as f64 + 0.5) * case.cam.feature_stride as f64;
            match case.cam.project(&x) {
                Projection::Visible { u, v, depth } => {
                    if !close(v, v_mid, 1e-9) || !close(u, u_expect, 1e-9) || !close(depth, dist, 1e-9) {
                        return Err(format!("centre ({bin},{j}) projects to ({u},{v},{depth})"));
                    }
                }
                Projection::Behind => return Err(format!("centre ({bin},{j}) behind camera")),
            }
            let res = (a * x.x + b * x.y + c * x.z + e) / scale;
            if res.abs() > 1e-9 * (1.0 + x.norm()) {
                return Err(format!("centre ({bin},{j}) off plane by {res:e}"));
            }
        }
    }
    Ok(())
}

/// Valid and coverage masks agree with an independent reading of the
/// geometry: the centre hull on each side.
pub fn check_masks(case: &PoseCase, h: &ProjectedHorizon) -> Result<(), String> {
    let bev = &case.bev;
    let inside = |r: f64, c: f64, rows: usize, cols: usize| {
        let eps = 1e-9;
        r >= -eps && c >= -eps && r <= rows as f64 - 1.0 + eps && c <= cols as f64 - 1.0 + eps
    };
    let near_edge = |r: f64, c: f64, rows: usize, cols: usize| {
        let d = [r, c, rows as f64 - 1.0 - r, cols as f64 - 1.0 - c];
        d.iter().any(|x| x.abs() < 1e-7)
    };
    for bin in 0..h.n_depth {
        for j in 0..h.width {
            let x = h.center(bin, j);
            let (r, c) = bev.frac_index(x.x, x.y);
            let expect = inside(r, c, bev.cells_y, bev.cells_x);
            if expect != h.valid_mask[bin * h.width + j] && !near_edge(r, c, bev.cells_y, bev.cells_x) {
                return Err(format!("valid mask wrong at ({bin},{j})"));
            }
        }
    }
    for r in 0..bev.cells_y {
        for c in 0..bev.cells_x {
            let (x, y) = bev.cell_center(r, c);
            let k = bev.index(r, c);
            let expect = match h.splat_coords(x, y) {
                Some((b, j)) => {
                    if near_edge(b, j, h.n_depth, h.width) {
                        continue;
                    }
                    inside(b, j, h.n_depth, h.width)
                }
                None => false,
            };
            if expect != h.coverage[k] {
                return Err(format!("coverage wrong at ({r},{c})"));
            }
        }
    }
    Ok(())
}

/// Constant fields lift and splat to the same constant on their masks and
/// zero elsewhere; lift then splat preserves the constant wherever the splat
/// footprint lies entirely on valid horizon cells.
pub fn check_constant_field(case: &PoseCase, h: &ProjectedHorizon, value: f64) -> Result<(), String> {
    let bev = &case.bev;
    let field = Tensor::full(&[1, bev.cells_y, bev.cells_x], value);
    let lifted = h.lift_tensor(&field).map_err(|e| e.to_string())?;
    for (k, v) in lifted.data.iter().enumerate() {
        let expect = if h.valid_mask[k] { value } else { 0.0 };
        if !close(*v, expect, 1e-12 * value.abs().max(1.0)) {
            return Err(format!("lift of constant gives {v} at {k}"));
        }
    }
    let horizon = Tensor::full(&[1, h.n_depth, h.width], value);
    let splat = h.splat_tensor(&horizon).map_err(|e| e.to_string())?;
    for (k, v) in splat.data.iter().enumerate() {
        let expect = if h.coverage[k] { value } else { 0.0 };
        if !close(*v, expect, 1e-12 * value.abs().max(1.0)) {
            return Err(format!("splat of constant gives {v} at {k}"));
        }
    }
    let back = h.splat_tensor(&lifted).map_err(|e| e.to_string())?;
    for r in 0..bev.cells_y {
        for c in 0..bev.cells_x {
            let k = bev.index(r, c);
            let map = h.splat_map();
            if map.row_is_empty(k) || map.row(k).any(|(i, _)| !h.valid_mask[i]) {
                continue;
            }
            if !close(back.data[k], value, 1e-12 * value.abs().max(1.0)) {
                return Err(format!("lift-splat of constant gives {} at ({r},{c})", back.data[k]));
            }
        }
    }
    Ok(())
}

/// A unit impulse spreads only to cells within one lattice step of its
/// fractional image, with tent weights.
pub fn check_impulse_locality(case: &PoseCase, h: &ProjectedHorizon, rng: &mut impl Rng, probes: usize) -> Result<(), String> {
    let bev = &case.bev;
    for _ in 0..probes {
        let (r0, c0) = (rng.random_range(0..bev.cells_y), rng.random_range(0..bev.cells_x));
        let mut field = Tensor::zeros(&[1, bev.cells_y, bev.cells_x]);
        field.data[bev.index(r0, c0)] = 1.0;
        let lifted = h.lift_tensor(&field).map_err(|e| e.to_string())?;
        for bin in 0..h.n_depth {
            for j in 0..h.width {
                let k = bin * h.width + j;
                let x = h.center(bin, j);
                let (fr, fc) = bev.frac_index(x.x, x.y);
                let expect = if h.valid_mask[k] {
                    tent(fr - r0 as f64) * tent(fc - c0 as f64)
                } else {
                    0.0
                };
                if !close(lifted.data[k], expect, 1e-8) {
                    return Err(format!(
                        "lift impulse ({r0},{c0}) gives {} at ({bin},{j}), expected {expect}",
                        lifted.data[k]
                    ));
                }
            }
        }
    }
    for _ in 0..probes {
        let (b0, j0) = (rng.random_range(0..h.n_depth), rng.random_range(0..h.width));
        let mut horizon = Tensor::zeros(&[1, h.n_depth, h.width]);
        horizon.data[b0 * h.width + j0] = 1.0;
        let splat = h.splat_tensor(&horizon).map_err(|e| e.to_string())?;
        for r in 0..bev.cells_y {
            for c in 0..bev.cells_x {
                let k = bev.index(r, c);
                let (x, y) = bev.cell_center(r, c);
                let expect = match (h.coverage[k], h.splat_coords(x, y)) {
                    (true, Some((fb, fj))) => tent(fb - b0 as f64) * tent(fj - j0 as f64),
                    _ => 0.0,
                };
                if !close(splat.data[k], expect, 1e-8) {
                    return Err(format!(
                        "splat impulse ({b0},{j0}) gives {} at ({r},{c}), expected {expect}",
                        splat.data[k]
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Pixel, distance -> 3-D -> pixel, distance is the identity, and the ground
/// footprint of every horizon centre maps back to its own lattice position.
pub fn check_round_trip(case: &PoseCase, h: &ProjectedHorizon, rng: &mut impl Rng) -> Result<(), String> {
    let cam = &case.cam;
    for _ in 0..32 {
        let u = rng.random_range(0.0..cam.width as f64);
        let v = rng.random_range(0.0..cam.height as f64);
        let d = rng.random_range(0.5..60.0);
        let x = cam.point_on_ray(u, v, d);
        match cam.project(&x) {
            Projection::Visible { u: u2, v: v2, depth } => {
                if !close(u, u2, 1e-9) || !close(v, v2, 1e-9) || !close(d, depth, 1e-9) {
                    return Err(format!("pixel round trip ({u},{v},{d}) -> ({u2},{v2},{depth})"));
                }
            }
            Projection::Behind => return Err("point on ray behind camera".into()),
        }
    }
    for bin in 0..h.n_depth {
        for j in 0..h.width {
            let x = h.center(bin, j);
            let Some((fb, fj)) = h.splat_coords(x.x, x.y) else {
                continue;
            };
            if !close(fb, bin as f64, 1e-9) || !close(fj, j as f64, 1e-9) {
                return Err(format!("horizon round trip ({bin},{j}) -> ({fb},{fj})"));
            }
        }
    }
    Ok(())
}

pub fn check_all(case: &PoseCase, rng: &mut impl Rng) -> Result<(), String> {
    let h = case.horizon();
    check_plane_membership(case, &h)?;
    check_masks(case, &h)?;
    check_constant_field(case, &h, rng.random_range(-5.0..5.0))?;
    check_impulse_locality(case, &h, rng, 4)?;
    check_round_trip(case, &h, rng)?;
    Ok(())
}
