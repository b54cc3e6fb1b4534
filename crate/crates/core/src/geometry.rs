//! Camera models, the BEV grid, and the per-camera projected horizon with its
//! bilinear lift (BEV -> horizon) and splat (horizon -> BEV) correspondences.
//!
//! Conventions: world/ego frame has x right, y forward, z up, ego at the BEV
//! grid centre. BEV tensors are `[C, N, M]` with `N` rows along y and `M`
//! columns along x, stored y-major. Camera frame is x right, y down, z
//! forward. Horizon tensors are `[C, N_D, W]` (depth bin, feature column).

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::tensor::{Graph, SparseMap, Tensor, Var};

pub type Vec3 = Vector3<f64>;

/// Fractional sample coordinates within this distance of a lattice point are
/// snapped onto it, so lattice-aligned resampling is exact.
pub const SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    p: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
    pub feature_stride: usize,
    m_inv: Matrix3<f64>,
    center: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    /// Pixel coordinates and Euclidean distance from the optical centre.
    Visible { u: f64, v: f64, depth: f64 },
    Behind,
}

impl CameraModel {
    pub fn new(p: Matrix3x4<f64>, width: usize, height: usize, feature_stride: usize) -> Result<Self> {
        let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::DegenerateCamera(format!(
                "left 3x3 block is singular (det {det:e})"
            )));
        }
        if feature_stride == 0 || !width.is_multiple_of(feature_stride) || !height.is_multiple_of(feature_stride) {
            return Err(Error::DegenerateCamera(format!(
                "image {width}x{height} not divisible by stride {feature_stride}"
            )));
        }
        let m_inv = m
            .try_inverse()
            .ok_or_else(|| Error::DegenerateCamera("left 3x3 block is singular".into()))?;
        let center = -(m_inv * p.column(3));
        Ok(Self {
            p,
            width,
            height,
            feature_stride,
            m_inv,
            center,
        })
    }

    /// Pinhole camera at `position` looking along heading `yaw` (radians from
    /// +x, counter-clockwise) tilted down by `pitch`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_pose(
        fx: f64,
        fy: f64,
        position: Vec3,
        yaw: f64,
        pitch: f64,
        width: usize,
        height: usize,
        feature_stride: usize,
    ) -> Result<Self> {
        let forward = Vec3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin());
        let right = Vec3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * position);
        let k = Matrix3::new(
            fx,
            0.0,
            width as f64 / 2.0,
            0.0,
            fy,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.set_column(3, &t);
        Self::new(k * rt, width, height, feature_stride)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn feat_width(&self) -> usize {
        self.width / self.feature_stride
    }

    pub fn feat_height(&self) -> usize {
        self.height / self.feature_stride
    }

    pub fn homogeneous(&self, x: &Vec3) -> Vec3 {
        self.p * Vector4::new(x.x, x.y, x.z, 1.0)
    }

    pub fn project(&self, x: &Vec3) -> Projection {
        let h = self.homogeneous(x);
        if h.z <= 0.0 {
            return Projection::Behind;
        }
        Projection::Visible {
            u: h.x / h.z,
            v: h.y / h.z,
            depth: (x - self.center).norm(),
        }
    }

    /// Distance from the camera plane (positive in front).
    pub fn plane_depth(&self, x: &Vec3) -> f64 {
        let h = self.homogeneous(x);
        let m3 = Vec3::new(self.p[(2, 0)], self.p[(2, 1)], self.p[(2, 2)]);
        h.z / m3.norm()
    }

    /// Unit direction of the ray through pixel `(u, v)`, oriented forward.
    pub fn ray_dir(&self, u: f64, v: f64) -> Vec3 {
        (self.m_inv * Vec3::new(u, v, 1.0)).normalize()
    }

    pub fn point_on_ray(&self, u: f64, v: f64, distance: f64) -> Vec3 {
        self.center + self.ray_dir(u, v) * distance
    }

    /// Plane through the camera centre containing every ray of the image row
    /// `v = height / 2`, as `(a, b, c, e)` with `a x + b y + c z + e = 0`.
    pub fn horizon_plane(&self) -> [f64; 4] {
        let hv = self.height as f64 / 2.0;
        let r1 = self.p.row(1);
        let r2 = self.p.row(2);
        std::array::from_fn(|i| r1[i] - hv * r2[i])
    }

    /// Plain-text camera file: twelve matrix entries (row-major), then
    /// width, height and feature stride. `#` starts a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# 3x4 projection matrix (row-major), then width height stride\n");
        for r in 0..3 {
            let row: Vec<String> = (0..4).map(|c| format!("{}", self.p[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let _ = writeln!(s, "{} {} {}", self.width, self.height, self.feature_stride);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .collect();
        if tokens.len() != 15 {
            return Err(Error::Parse(format!(
                "camera file needs 15 values, found {}",
                tokens.len()
            )));
        }
        let mut vals = [0.0; 12];
        for (i, t) in tokens[..12].iter().enumerate() {
            vals[i] = t
                .parse()
                .map_err(|_| Error::Parse(format!("bad matrix entry {t:?}")))?;
        }
        let int = |t: &str| -> Result<usize> {
            t.parse()
                .map_err(|_| Error::Parse(format!("bad integer {t:?}")))
        };
        let p = Matrix3x4::from_row_slice(&vals);
        Self::new(p, int(tokens[12])?, int(tokens[13])?, int(tokens[14])?)
    }
}

/// Ego-centred square-cell BEV grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGrid {
    /// Columns along x (`M`).
    pub cells_x: usize,
    /// Rows along y (`N`).
    pub cells_y: usize,
    pub cell_size: f64,
}

impl BevGrid {
    pub fn new(extent: f64, cells: usize, cell_size: f64) -> Result<Self> {
        if cells == 0 || cell_size <= 0.0 || (extent - cells as f64 * cell_size).abs() > 1e-9 * extent.max(1.0) {
            return Err(Error::Config(format!(
                "BEV extent {extent} != cells {cells} x cell size {cell_size}"
            )));
        }
        Ok(Self {
            cells_x: cells,
            cells_y: cells,
            cell_size,
        })
    }

    pub fn square(cells: usize, cell_size: f64) -> Self {
        Self {
            cells_x: cells,
            cells_y: cells,
            cell_size,
        }
    }

    /// Coarser grid over the same extent.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.cells_x.is_multiple_of(factor) || !self.cells_y.is_multiple_of(factor) {
            return Err(Error::Config(format!("cannot downsample by {factor}")));
        }
        Ok(Self {
            cells_x: self.cells_x / factor,
            cells_y: self.cells_y / factor,
            cell_size: self.cell_size * factor as f64,
        })
    }

    pub fn extent_x(&self) -> f64 {
        self.cells_x as f64 * self.cell_size
    }

    pub fn extent_y(&self) -> f64 {
        self.cells_y as f64 * self.cell_size
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cells_x + col
    }

    /// Metric centre `(x, y)` of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            -self.extent_x() / 2.0 + (col as f64 + 0.5) * self.cell_size,
            -self.extent_y() / 2.0 + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Fractional `(row, col)` in cell-centre units for a metric point.
    pub fn frac_index(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y + self.extent_y() / 2.0) / self.cell_size - 0.5,
            (x + self.extent_x() / 2.0) / self.cell_size - 0.5,
        )
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x + self.extent_x() / 2.0) / self.cell_size).floor();
        let r = ((y + self.extent_y() / 2.0) / self.cell_size).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.cells_x && (r as usize) < self.cells_y)
            .then_some((r as usize, c as usize))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.extent_x() / 2.0 && y.abs() <= self.extent_y() / 2.0
    }

    /// Bilinear weights for metric `(x, y)`; `None` outside the centre hull.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<Vec<(usize, f64)>> {
        let (r, c) = self.frac_index(x, y);
        bilinear(r, c, self.cells_y, self.cells_x)
    }
}

fn snap(f: f64) -> f64 {
    let r = f.round();
    if (f - r).abs() < SNAP {
        r
    } else {
        f
    }
}

/// Bilinear weights at fractional `(row, col)` on a `rows x cols` lattice of
/// cell centres, as `(flat index, weight)` with zero weights dropped.
///
/// Samples outside `[0, rows-1] x [0, cols-1]` return `None`: the grid is
/// zero-padded and a sample is only taken when its whole footprint is inside.
pub fn bilinear(row: f64, col: f64, rows: usize, cols: usize) -> Option<Vec<(usize, f64)>> {
    let (row, col) = (snap(row), snap(col));
    if !(row.is_finite() && col.is_finite()) || rows == 0 || cols == 0 {
        return None;
    }
    if row < 0.0 || col < 0.0 || row > (rows - 1) as f64 || col > (cols - 1) as f64 {
        return None;
    }
    let r0 = (row.floor() as usize).min(rows.saturating_sub(2));
    let c0 = (col.floor() as usize).min(cols.saturating_sub(2));
    let tr = row - r0 as f64;
    let tc = col - c0 as f64;
    let mut out = Vec::with_capacity(4);
    for (dr, wr) in [(0, 1.0 - tr), (1, tr)] {
        for (dc, wc) in [(0, 1.0 - tc), (1, tc)] {
            let w = wr * wc;
            if w != 0.0 {
                out.push(((r0 + dr) * cols + c0 + dc, w));
            }
        }
    }
    Some(out)
}

/// Per-camera regular grid on the projected horizon plane.
#[derive(Clone, Debug)]
pub struct ProjectedHorizon {
    pub camera_index: usize,
    pub camera: CameraModel,
    pub bev: BevGrid,
    pub n_depth: usize,
    pub width: usize,
    pub depth_range: (f64, f64),
    /// `N_D x W` centres, index `b * W + j`.
    pub centers3d: Vec<Vec3>,
    pub valid_mask: Vec<bool>,
    /// BEV cells reached by the splat, length `N * M`.
    pub coverage: Vec<bool>,
    lift_map: Arc<SparseMap>,
    splat_map: Arc<SparseMap>,
}

impl ProjectedHorizon {
    pub fn bin_width(&self) -> f64 {
        (self.depth_range.1 - self.depth_range.0) / self.n_depth as f64
    }

    /// Ray distance of depth bin `b`'s centre.
    pub fn bin_center(&self, b: usize) -> f64 {
        self.depth_range.0 + (b as f64 + 0.5) * self.bin_width()
    }

    pub fn center(&self, bin: usize, col: usize) -> Vec3 {
        self.centers3d[bin * self.width + col]
    }

    pub fn lift_map(&self) -> &Arc<SparseMap> {
        &self.lift_map
    }

    pub fn splat_map(&self) -> &Arc<SparseMap> {
        &self.splat_map
    }

    /// Horizon coordinates `(depth bin, column)` in cell-centre units of the
    /// ground point `(x, y)` lifted along z onto the horizon plane, or `None`
    /// when the plane is vertical there or the point is behind the camera.
    pub fn splat_coords(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let [a, b, c, e] = self.camera.horizon_plane();
        let scale = a.abs().max(b.abs()).max(c.abs());
        if c.abs() <= 1e-12 * scale {
            return None;
        }
        let z = -(a * x + b * y + e) / c;
        let p = Vec3::new(x, y, z);
        match self.camera.project(&p) {
            Projection::Behind => None,
            Projection::Visible { u, depth, .. } => {
                let col = u / self.camera.feature_stride as f64 - 0.5;
                let bin = (depth - self.depth_range.0) / self.bin_width() - 0.5;
                Some((bin, col))
            }
        }
    }

    /// Lift `bev[C,N,M]` onto the horizon, giving `[C,N_D,W]`.
    pub fn lift(&self, g: &Graph, bev: Var) -> Result<Var> {
        let s = g.shape(bev);
        if s.len() != 3 || s[1] != self.bev.cells_y || s[2] != self.bev.cells_x {
            return Err(Error::ShapeMismatch {
                op: "lift",
                lhs: s,
                rhs: vec![self.bev.cells_y, self.bev.cells_x],
            });
        }
        let flat = g.reshape(bev, &[s[0], self.bev.num_cells()])?;
        let out = g.sparse_map(flat, &self.lift_map)?;
        g.reshape(out, &[s[0], self.n_depth, self.width])
    }

    /// Splat `horizon[C,N_D,W]` onto the BEV grid, giving `[C,N,M]`.
    /// Cells outside [`Self::coverage`] are zero.
    pub fn splat(&self, g: &Graph, horizon: Var) -> Result<Var> {
        let s = g.shape(horizon);
        if s.len() != 3 || s[1] != self.n_depth || s[2] != self.width {
            return Err(Error::ShapeMismatch {
                op: "splat",
                lhs: s,
                rhs: vec![self.n_depth, self.width],
            });
        }
        let flat = g.reshape(horizon, &[s[0], self.n_depth * self.width])?;
        let out = g.sparse_map(flat, &self.splat_map)?;
        g.reshape(out, &[s[0], self.bev.cells_y, self.bev.cells_x])
    }

    pub fn lift_tensor(&self, bev: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let v = g.constant(bev.clone());
        let out = self.lift(&g, v)?;
        Ok(g.value(out))
    }

    pub fn splat_tensor(&self, horizon: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let v = g.constant(horizon.clone());
        let out = self.splat(&g, v)?;
        Ok(g.value(out))
    }
}

/// Build the horizon grid of `cam` with `n_depth` bins over ray distances
/// `[d_min, d_max]`, plus its lift and splat correspondences with `bev`.
pub fn build_projected_horizon(
    cam: &CameraModel,
    camera_index: usize,
    bev: &BevGrid,
    n_depth: usize,
    d_min: f64,
    d_max: f64,
) -> Result<ProjectedHorizon> {
    if n_depth == 0 || d_min <= 0.0 || d_max <= d_min {
        return Err(Error::Config(format!(
            "invalid depth bins: n={n_depth}, range [{d_min}, {d_max}]"
        )));
    }
    let width = cam.feat_width();
    let stride = cam.feature_stride as f64;
    let v_mid = cam.height as f64 / 2.0;
    let dbin = (d_max - d_min) / n_depth as f64;
    let mut centers3d = Vec::with_capacity(n_depth * width);
    let mut valid_mask = Vec::with_capacity(n_depth * width);
    let mut lift_rows = Vec::with_capacity(n_depth * width);
    for b in 0..n_depth {
        let dist = d_min + (b as f64 + 0.5) * dbin;
        for j in 0..width {
            let u = (j as f64 + 0.5) * stride;
            let x = cam.point_on_ray(u, v_mid, dist);
            centers3d.push(x);
            let w = if bev.contains(x.x, x.y) {
                bev.bilinear(x.x, x.y)
            } else {
                None
            };
            valid_mask.push(w.is_some());
            lift_rows.push(w.unwrap_or_default());
        }
    }
    let mut horizon = ProjectedHorizon {
        camera_index,
        camera: cam.clone(),
        bev: *bev,
        n_depth,
        width,
        depth_range: (d_min, d_max),
        centers3d,
        valid_mask,
        coverage: Vec::new(),
        lift_map: Arc::new(SparseMap::from_rows(bev.num_cells(), lift_rows)),
        splat_map: Arc::new(SparseMap::from_rows(0, vec![])),
    };
    let mut splat_rows = Vec::with_capacity(bev.num_cells());
    let mut coverage = Vec::with_capacity(bev.num_cells());
    for r in 0..bev.cells_y {
        for c in 0..bev.cells_x {
            let (x, y) = bev.cell_center(r, c);
            let w = horizon
                .splat_coords(x, y)
                .and_then(|(bin, col)| bilinear(bin, col, n_depth, width));
            coverage.push(w.is_some());
            splat_rows.push(w.unwrap_or_default());
        }
    }
    horizon.coverage = coverage;
    horizon.splat_map = Arc::new(SparseMap::from_rows(n_depth * width, splat_rows));
    Ok(horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn front_cam(pitch: f64) -> CameraModel {
        CameraModel::from_pose(96.0, 96.0, Vec3::new(0.0, 0.0, 1.6), FRAC_PI_2, pitch, 192, 96, 8).unwrap()
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let cam = front_cam(0.0);
        match cam.project(&Vec3::new(0.0, 10.0, 1.6)) {
            Projection::Visible { u, v, depth } => {
                assert!((u - 96.0).abs() < 1e-12);
                assert!((v - 48.0).abs() < 1e-12);
                assert!((depth - 10.0).abs() < 1e-12);
            }
            Projection::Behind => panic!("expected visible"),
        }
        assert_eq!(cam.project(&Vec3::new(0.0, -5.0, 1.6)), Projection::Behind);
        assert!((cam.plane_depth(&Vec3::new(3.0, 10.0, 0.0)) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn singular_camera_rejected() {
        let p = Matrix3x4::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
        assert!(matches!(CameraModel::new(p, 16, 16, 4), Err(Error::DegenerateCamera(_))));
        let ok = Matrix3x4::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(CameraModel::new(ok, 16, 15, 4).is_err());
    }

    #[test]
    fn camera_text_round_trip() {
        let cam = front_cam(0.1);
        let back = CameraModel::from_text(&cam.to_text()).unwrap();
        assert_eq!(back, cam);
        assert!(CameraModel::from_text("1 2 3").is_err());
    }

    #[test]
    fn level_camera_horizon_is_flat() {
        let cam = front_cam(0.0);
        let bev = BevGrid::square(48, 1.0);
        let h = build_projected_horizon(&cam, 0, &bev, 24, 1.0, 33.0).unwrap();
        for c in &h.centers3d {
            assert!((c.z - 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn pitched_camera_horizon_descends_linearly() {
        let cam = front_cam(0.2);
        let bev = BevGrid::square(48, 1.0);
        let h = build_projected_horizon(&cam, 0, &bev, 24, 1.0, 33.0).unwrap();
        for j in 0..h.width {
            let dz: Vec<f64> = (1..h.n_depth).map(|b| h.center(b, j).z - h.center(b - 1, j).z).collect();
            assert!(dz[0] < 0.0);
            for d in &dz {
                assert!((d - dz[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_snaps_lattice_points() {
        let w = bilinear(2.0 + 1e-12, 3.0 - 1e-12, 5, 5).unwrap();
        assert_eq!(w, vec![(13, 1.0)]);
        let w = bilinear(4.0, 4.0, 5, 5).unwrap();
        assert_eq!(w, vec![(24, 1.0)]);
        assert!(bilinear(-0.1, 0.0, 5, 5).is_none());
        assert!(bilinear(0.0, 4.2, 5, 5).is_none());
        let w = bilinear(0.25, 0.5, 2, 2).unwrap();
        let s: f64 = w.iter().map(|x| x.1).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn horizon_center_outside_extent_lifts_to_zero() {
        let cam = front_cam(0.0);
        let bev = BevGrid::square(8, 1.0);
        let h = build_projected_horizon(&cam, 0, &bev, 10, 1.0, 30.0).unwrap();
        let lifted = h.lift_tensor(&Tensor::ones(&[1, 8, 8])).unwrap();
        for (k, v) in lifted.data.iter().enumerate() {
            if h.valid_mask[k] {
                assert!((v - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(h.valid_mask.iter().any(|m| !m));
    }
}
