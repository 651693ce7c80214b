//! Closed-form weighted rigid alignment and the two-stage registration.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::backbone::build_hierarchy;
use crate::error::{shape_err, Error, Result};
use crate::geom::{Point, PointCloud, RigidTransform};
use crate::linalg::svd3;
use crate::matching::{
    extract_coarse_pairs, fine_candidates, filter_consistency, nearest_of, CorrespondenceSet,
};
use crate::numeric::params::Params;
use crate::numeric::{Tape, Tensor, Var};
use crate::pipeline::{Model, ModelConfig};

/// Relative singular-value floor below which `H` counts as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// `Σ w_k ‖R x_k + t − y_k‖²`.
pub fn objective(c: &CorrespondenceSet, t: &RigidTransform) -> f64 {
    c.src
        .iter()
        .zip(&c.tgt)
        .zip(&c.weights)
        .map(|((x, y), w)| w * (t.apply_point(x) - y).norm_squared())
        .sum()
}

/// Global minimizer of [`objective`] via SVD of the weighted cross-covariance.
pub fn weighted_svd(c: &CorrespondenceSet) -> Result<RigidTransform> {
    let active = c.weights.iter().filter(|w| **w > 0.0).count();
    let total: f64 = c.weights.iter().sum();
    if active < 3 || !(total > 0.0) {
        return Err(Error::InsufficientPairs { needed: 3, got: active });
    }
    let centroid = |pts: &[Point]| pts.iter().zip(&c.weights).fold(Vector3::zeros(), |a, (p, w)| a + p * *w) / total;
    let (xb, yb) = (centroid(&c.src), centroid(&c.tgt));
    let mut h = Matrix3::zeros();
    for ((x, y), w) in c.src.iter().zip(&c.tgt).zip(&c.weights) {
        h += (x - xb) * (y - yb).transpose() * *w;
    }
    let svd = svd3(&h);
    let mut s: Vec<f64> = svd.s.iter().map(|v| v.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= RANK_TOL * s[0] {
        return Err(Error::DegenerateConfiguration(format!(
            "cross-covariance singular values {:.3e}, {:.3e}, {:.3e}",
            s[0], s[1], s[2]
        )));
    }
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let r = svd.v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * svd.u.transpose();
    let t = yb - r * xb;
    Ok(RigidTransform {
        rotation: r,
        translation: t,
    })
}

/// Differentiable weighted alignment of `x` onto `y` (`n×3`) with weights
/// `w` (`n×1`); returns `R` (`3×3`) and `t` (`1×3`) so that `y ≈ x Rᵀ + t`.
pub fn weighted_svd_tape(t: &Tape, x: Var, y: Var, w: Var) -> Result<(Var, Var)> {
    let n = t.shape(x).0;
    if t.shape(y) != (n, 3) || t.shape(x).1 != 3 || t.shape(w) != (n, 1) {
        return Err(shape_err("weighted_svd_tape", "expects n×3 points and n×1 weights"));
    }
    let active = t.value(w).data().iter().filter(|v| **v > 0.0).count();
    if active < 3 {
        return Err(Error::InsufficientPairs { needed: 3, got: active });
    }
    let total = t.sum(w);
    let inv = t.div(t.scalar(1.0), total)?;
    let xb = t.mul_scalar(t.sum_cols(t.mul_col(x, w)?), inv)?;
    let yb = t.mul_scalar(t.sum_cols(t.mul_col(y, w)?), inv)?;
    let xc = t.add_row(x, t.neg(xb))?;
    let yc = t.add_row(y, t.neg(yb))?;
    let h = t.matmul(t.transpose(t.mul_col(xc, w)?), yc)?;
    {
        let hv = t.value(h);
        let svd = svd3(&Matrix3::from_row_slice(hv.data()));
        let mut s: Vec<f64> = svd.s.iter().map(|v| v.abs()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if !(s[0] > 0.0) || s[1] <= RANK_TOL * s[0] {
            return Err(Error::DegenerateConfiguration("rank-deficient cross-covariance".into()));
        }
    }
    let r = t.kabsch_rotation(h)?;
    let xr = t.matmul(xb, t.transpose(r))?;
    let tr = t.sub(yb, xr)?;
    Ok((r, tr))
}

/// Reads a `3×3` rotation and `1×3` translation off the tape.
pub fn transform_from_vars(t: &Tape, r: Var, tr: Var) -> RigidTransform {
    let rv = t.value(r);
    let tv = t.value(tr);
    RigidTransform {
        rotation: Matrix3::from_row_slice(rv.data()),
        translation: Vector3::from_row_slice(tv.data()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub src_points: usize,
    pub tgt_points: usize,
    pub src_superpoints: usize,
    pub tgt_superpoints: usize,
    pub coarse_pairs: usize,
    pub keypoint_correspondences: usize,
    pub inliers: usize,
    pub fine_correspondences: usize,
}

/// Per-stage timings and correspondence counts of one registration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mode: String,
    pub stages: Vec<StageTiming>,
    pub counts: StageCounts,
    /// Inliers over keypoint correspondences.
    pub inlier_ratio: f64,
}

impl Diagnostics {
    pub fn new(mode: &str) -> Self {
        Self {
            mode: mode.into(),
            ..Self::default()
        }
    }

    /// Records the time since `start` under `stage` and restarts the clock.
    pub fn lap(&mut self, stage: &str, start: &mut Instant) {
        self.stages.push(StageTiming {
            stage: stage.into(),
            ms: start.elapsed().as_secs_f64() * 1e3,
        });
        *start = Instant::now();
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("diagnostics serialize")
    }
}

fn check_sizes(src: &PointCloud, tgt: &PointCloud, min_points: usize) -> Result<()> {
    for c in [src, tgt] {
        if c.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if c.len() < min_points {
            return Err(Error::TooFewPoints {
                needed: min_points,
                got: c.len(),
            });
        }
    }
    Ok(())
}

/// Full learned registration of `src` onto `tgt`.
pub fn register_pair(
    src: &PointCloud,
    tgt: &PointCloud,
    model: &Model,
    params: &Params,
) -> Result<(RigidTransform, Diagnostics)> {
    check_sizes(src, tgt, model.cfg.min_points)?;
    model.register(src, tgt, params)
}

/// Registration with descriptors replaced by ground-truth coordinates in the
/// target frame: every matching stage is a hard nearest-descriptor
/// assignment, so the result only exercises the geometric plumbing.
pub fn register_oracle(
    src: &PointCloud,
    tgt: &PointCloud,
    gt: &RigidTransform,
    cfg: &ModelConfig,
) -> Result<(RigidTransform, Diagnostics)> {
    check_sizes(src, tgt, cfg.min_points)?;
    let mut diag = Diagnostics::new("oracle");
    let mut clock = Instant::now();
    let voxels = &cfg.backbone.voxel_sizes;
    let hs = build_hierarchy(src, voxels)?;
    let ht = build_hierarchy(tgt, voxels)?;
    let (v1, v3) = (voxels[0], voxels[2]);
    diag.counts.src_points = src.len();
    diag.counts.tgt_points = tgt.len();
    diag.counts.src_superpoints = hs.levels[3].len();
    diag.counts.tgt_superpoints = ht.levels[3].len();
    diag.lap("hierarchy", &mut clock);

    let ds: Vec<Point> = hs.levels[3].points.iter().map(|p| gt.apply_point(p)).collect();
    let dt = &ht.levels[3].points;
    let mut sim = Tensor::zeros(ds.len(), dt.len());
    for (i, a) in ds.iter().enumerate() {
        for (j, b) in dt.iter().enumerate() {
            sim.set(i, j, (-(a - b).norm_squared() / (2.0 * v3 * v3)).exp());
        }
    }
    let pairs: Vec<_> = extract_coarse_pairs(&sim, cfg.top_k)
        .into_iter()
        .filter(|p| p.weight > (-2.0f64).exp())
        .collect();
    diag.counts.coarse_pairs = pairs.len();
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    diag.lap("coarse", &mut clock);

    let mut partners = vec![Vec::new(); ds.len()];
    for p in &pairs {
        partners[p.src].push(p.tgt);
    }
    let semi_t = &ht.levels[2].points;
    let tgt_by_super: Vec<Vec<usize>> = {
        let mut g = vec![Vec::new(); dt.len()];
        for j in 0..semi_t.len() {
            g[ht.ancestor(2, j, 3)].push(j);
        }
        g
    };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, x) in hs.levels[2].points.iter().enumerate() {
        let cands: Vec<usize> = partners[hs.ancestor(2, i, 3)]
            .iter()
            .flat_map(|&s| tgt_by_super[s].iter().copied())
            .collect();
        if let Some((j, d)) = nearest_of(&gt.apply_point(x), semi_t, &cands)
            && d <= v3 {
                xs.push(*x);
                ys.push(semi_t[j]);
            }
    }
    let n_kp = xs.len();
    diag.counts.keypoint_correspondences = n_kp;
    let corr = CorrespondenceSet::new(xs, ys, vec![1.0; n_kp])?;
    let (inliers, _) = filter_consistency(&corr, cfg.consistency * v1).map_err(|_| Error::NoOverlap)?;
    diag.counts.inliers = inliers.len();
    diag.inlier_ratio = inliers.len() as f64 / n_kp.max(1) as f64;
    let t0 = weighted_svd(&inliers)?;
    diag.lap("sparse", &mut clock);

    // Ground-truth descriptors exist for every raw point, so the oracle
    // fine stage runs at full resolution.
    let radius = cfg.fine_radius * v1;
    let sigma = 0.5 * v1;
    let (src0, tgt0) = (src.points(), tgt.points());
    let cands = fine_candidates(src0, tgt0, &t0, radius);
    let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    for (x, c) in src0.iter().zip(&cands) {
        if let Some((j, d)) = nearest_of(&gt.apply_point(x), tgt0, c) {
            xs.push(*x);
            ys.push(tgt0[j]);
            ws.push((-d * d / (2.0 * sigma * sigma)).exp());
        }
    }
    diag.counts.fine_correspondences = xs.len();
    if xs.is_empty() {
        return Err(Error::NoOverlap);
    }
    let fine = CorrespondenceSet::new(xs, ys, ws)?;
    let out = weighted_svd(&fine)?;
    diag.lap("fine", &mut clock);
    Ok((out, diag))
}
