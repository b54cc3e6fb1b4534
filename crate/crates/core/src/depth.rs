//! Ground-truth depth from lidar, depth-bin encodings, supervision losses and
//! the five depth-quality metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};
use crate::io;
use crate::tensor::{Graph, Tensor, Var};

/// Log clamp used by [`depth_ce_loss`].
pub const CE_EPS: f64 = 1e-12;

/// Uniform depth bins over `[d_min, d_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBins {
    pub n: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthBins {
    pub fn new(n: usize, d_min: f64, d_max: f64) -> Result<Self> {
        if n < 2 || d_min <= 0.0 || d_max <= d_min {
            return Err(Error::Config(format!(
                "depth bins need n >= 2 and 0 < d_min < d_max (got {n}, {d_min}, {d_max})"
            )));
        }
        Ok(Self { n, d_min, d_max })
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.n as f64
    }

    pub fn center(&self, b: usize) -> f64 {
        self.d_min + (b as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|b| self.center(b)).collect()
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n).map(|b| self.d_min + b as f64 * self.width()).collect()
    }

    /// Containing bin; a value on an interior edge goes to the lower bin.
    pub fn bin_of(&self, value: f64) -> Option<usize> {
        if !(value >= self.d_min && value <= self.d_max) {
            return None;
        }
        let mut t = (value - self.d_min) / self.width();
        if (t - t.round()).abs() < 1e-9 {
            t = t.round();
        }
        let b = (t.ceil() as usize).saturating_sub(1);
        Some(b.min(self.n - 1))
    }
}

/// Per-feature-cell depth with a definedness mask, row-major `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub defined: Vec<bool>,
}

impl DepthMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            defined: vec![false; height * width],
        }
    }

    pub fn defined_count(&self) -> usize {
        self.defined.iter().filter(|&&d| d).count()
    }

    /// 16-bit PGM in millimetres (undefined cells are 0).
    pub fn to_pgm16(&self) -> Vec<u8> {
        let px: Vec<u16> = self
            .values
            .iter()
            .zip(&self.defined)
            .map(|(&v, &d)| if d { (v * 1000.0).round().clamp(0.0, 65535.0) as u16 } else { 0 })
            .collect();
        io::pgm16(self.width, self.height, &px)
    }

    pub fn mask_pgm(&self) -> Vec<u8> {
        io::mask_pgm(self.width, self.height, &self.defined)
    }
}

/// Minimum camera-plane depth of the points falling into each feature cell.
/// Points behind the camera, outside the image, or outside `[d_min, d_max]`
/// are dropped.
pub fn lidar_depth_map(points: &[Vec3], cam: &CameraModel, d_min: f64, d_max: f64) -> DepthMap {
    let (h, w) = (cam.feat_height(), cam.feat_width());
    let stride = cam.feature_stride as f64;
    let mut map = DepthMap::empty(h, w);
    for p in points {
        let hp = cam.homogeneous(p);
        if hp.z <= 0.0 {
            continue;
        }
        let (u, v) = (hp.x / hp.z, hp.y / hp.z);
        if !(u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64) {
            continue;
        }
        let depth = cam.plane_depth(p);
        if depth < d_min || depth > d_max {
            continue;
        }
        let (r, c) = ((v / stride) as usize, (u / stride) as usize);
        let k = r * w + c;
        if !map.defined[k] || depth < map.values[k] {
            map.values[k] = depth;
            map.defined[k] = true;
        }
    }
    map
}

/// One-hot `[N_D, H, W]` encoding of the defined cells, plus the mask.
pub fn one_hot_depth(map: &DepthMap, bins: &DepthBins) -> (Tensor, Vec<bool>) {
    let hw = map.height * map.width;
    let mut t = Tensor::zeros(&[bins.n, map.height, map.width]);
    let mut mask = vec![false; hw];
    for k in 0..hw {
        if !map.defined[k] {
            continue;
        }
        if let Some(b) = bins.bin_of(map.values[k]) {
            t.data[b * hw + k] = 1.0;
            mask[k] = true;
        }
    }
    (t, mask)
}

fn check_pred(pred: &Tensor, bins: &DepthBins) -> Result<usize> {
    if pred.rank() != 3 || pred.shape[0] != bins.n {
        return Err(Error::ShapeMismatch {
            op: "depth decode",
            lhs: pred.shape.clone(),
            rhs: vec![bins.n],
        });
    }
    Ok(pred.shape[1] * pred.shape[2])
}

/// Expected depth `sum_n d_n p_n` per cell.
pub fn mean_depth(pred: &Tensor, bins: &DepthBins) -> Result<Vec<f64>> {
    let hw = check_pred(pred, bins)?;
    let centers = bins.centers();
    Ok((0..hw)
        .map(|k| (0..bins.n).map(|b| centers[b] * pred.data[b * hw + k]).sum())
        .collect())
}

/// Centre of the most probable bin per cell; ties go to the lowest index.
pub fn mode_depth(pred: &Tensor, bins: &DepthBins) -> Result<Vec<f64>> {
    let hw = check_pred(pred, bins)?;
    Ok((0..hw)
        .map(|k| {
            let mut best = 0;
            for b in 1..bins.n {
                if pred.data[b * hw + k] > pred.data[best * hw + k] {
                    best = b;
                }
            }
            bins.center(best)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmsle: f64,
    pub frac125: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmsle,frac125";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmsle, self.frac125
        )
    }

    /// Cell-count-weighted average of per-image metrics; RMS terms are
    /// pooled in squared form.
    pub fn pooled(parts: &[(DepthMetrics, usize)]) -> Result<DepthMetrics> {
        let n: usize = parts.iter().map(|p| p.1).sum();
        if n == 0 {
            return Err(Error::NoDefinedCells);
        }
        let nf = n as f64;
        let avg = |f: &dyn Fn(&DepthMetrics) -> f64| parts.iter().map(|(m, k)| f(m) * *k as f64).sum::<f64>() / nf;
        Ok(DepthMetrics {
            abs_rel: avg(&|m| m.abs_rel),
            sq_rel: avg(&|m| m.sq_rel),
            rmse: avg(&|m| m.rmse * m.rmse).sqrt(),
            rmsle: avg(&|m| m.rmsle * m.rmsle).sqrt(),
            frac125: avg(&|m| m.frac125),
        })
    }
}

/// Metrics of `pred` (row-major `H x W`) against the defined cells of `gt`.
pub fn depth_metrics(pred: &[f64], gt: &DepthMap) -> Result<DepthMetrics> {
    if pred.len() != gt.values.len() {
        return Err(Error::ShapeMismatch {
            op: "depth_metrics",
            lhs: vec![pred.len()],
            rhs: vec![gt.height, gt.width],
        });
    }
    let mut m = DepthMetrics::default();
    let mut n = 0usize;
    for ((&p, &g), &d) in pred.iter().zip(&gt.values).zip(&gt.defined) {
        if !d {
            continue;
        }
        let e = p - g;
        m.abs_rel += e.abs() / g;
        m.sq_rel += e * e / g;
        m.rmse += e * e;
        let le = p.ln() - g.ln();
        m.rmsle += le * le;
        if (p / g).max(g / p) > 1.25 {
            m.frac125 += 1.0;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoDefinedCells);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: m.abs_rel / nf,
        sq_rel: m.sq_rel / nf,
        rmse: (m.rmse / nf).sqrt(),
        rmsle: (m.rmsle / nf).sqrt(),
        frac125: m.frac125 / nf,
    })
}

/// `-(1/N) sum log(p . onehot)` over the masked cells of `pred[N_D,H,W]`.
/// Returns a zero scalar when nothing is masked in.
pub fn depth_ce_loss(g: &Graph, pred: Var, onehot: &Tensor, mask: &[bool]) -> Result<Var> {
    let shape = g.shape(pred);
    if shape != onehot.shape || shape.len() != 3 || mask.len() != shape[1] * shape[2] {
        return Err(Error::ShapeMismatch {
            op: "depth_ce_loss",
            lhs: shape,
            rhs: onehot.shape.clone(),
        });
    }
    let n = mask.iter().filter(|&&m| m).count();
    let picked = g.mul_const(pred, onehot)?;
    let picked = g.sum_axis(picked, 0)?;
    let logp = g.ln_clamped(picked, CE_EPS);
    let m = Tensor::new(&shape[1..], mask.iter().map(|&b| b as u8 as f64).collect())?;
    let masked = g.mul_const(logp, &m)?;
    Ok(g.scale(g.sum(masked), -1.0 / n.max(1) as f64))
}

/// `l_sup + lambda * l_depth`.
pub fn total_loss(g: &Graph, l_sup: Var, l_depth: Var, lambda: f64) -> Result<Var> {
    g.add(l_sup, g.scale(l_depth, lambda))
}

/// CSV table with one labelled row per entry, in column order
/// abs_rel, sq_rel, rmse, rmsle, frac125.
pub fn metrics_csv(rows: &[(String, DepthMetrics)]) -> String {
    let mut s = format!("name,{}\n", DepthMetrics::CSV_HEADER);
    for (name, m) in rows {
        let _ = writeln!(s, "{name},{}", m.csv_row());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_lookup_and_ties() {
        let bins = DepthBins::new(4, 1.0, 9.0).unwrap();
        assert_eq!(bins.centers(), vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(bins.bin_of(4.0), Some(1));
        assert_eq!(bins.bin_of(5.0), Some(1));
        assert_eq!(bins.bin_of(5.0 + 1e-12), Some(1));
        assert_eq!(bins.bin_of(1.0), Some(0));
        assert_eq!(bins.bin_of(9.0), Some(3));
        assert_eq!(bins.bin_of(0.5), None);
        assert!(DepthBins::new(1, 1.0, 2.0).is_err());
    }

    #[test]
    fn single_cell_metrics() {
        let gt = DepthMap {
            height: 1,
            width: 1,
            values: vec![8.0],
            defined: vec![true],
        };
        let m = depth_metrics(&[10.0], &gt).unwrap();
        assert!((m.abs_rel - 0.25).abs() < 1e-15);
        assert!((m.sq_rel - 0.5).abs() < 1e-15);
        assert!((m.rmse - 2.0).abs() < 1e-15);
        assert!((m.rmsle - 1.25f64.ln()).abs() < 1e-15);
        assert_eq!(m.frac125, 0.0);
    }

    #[test]
    fn no_defined_cells_is_error() {
        let gt = DepthMap::empty(2, 2);
        assert!(matches!(depth_metrics(&[1.0; 4], &gt), Err(Error::NoDefinedCells)));
    }

    #[test]
    fn uniform_prediction_loss_is_log_bins() {
        let bins = DepthBins::new(5, 1.0, 11.0).unwrap();
        let map = DepthMap {
            height: 1,
            width: 2,
            values: vec![3.0, 7.5],
            defined: vec![true, true],
        };
        let (oh, mask) = one_hot_depth(&map, &bins);
        let g = Graph::new();
        let p = g.input(Tensor::full(&[5, 1, 2], 0.2));
        let l = depth_ce_loss(&g, p, &oh, &mask).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn depth_pgm_is_millimetres() {
        let map = DepthMap {
            height: 1,
            width: 2,
            values: vec![1.2345, 9.0],
            defined: vec![true, false],
        };
        let (w, h, maxval, px) = io::read_pgm(&map.to_pgm16()).unwrap();
        assert_eq!((w, h, maxval), (2, 1, 65535));
        assert_eq!(px, vec![1235, 0]);
    }
}
