//! Training objectives.
//!
//! Each loss is a tape function so gradients flow through it; plain-value
//! wrappers evaluate the same graph on constants. Logs are floored at
//! [`LOG_EPS`] and distances use a smooth norm that is exactly zero at zero.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geom::{Point, RigidTransform};
use crate::matching::{points_tensor, transform_rows};
use crate::numeric::{Tape, Tensor, Var};

pub const LOG_EPS: f64 = 1e-12;
/// Lower clamp applied to InfoNCE logits.
pub const LOGIT_FLOOR: f64 = -50.0;
const NORM_EPS: f64 = 1e-12;

/// `sqrt(‖r‖² + ε²) − ε` per row: smooth, zero at zero.
pub fn smooth_row_norms(t: &Tape, a: Var) -> Var {
    let n = t.row_norms(a, NORM_EPS * NORM_EPS);
    t.offset(n, -NORM_EPS)
}

fn safe_log(t: &Tape, a: Var) -> Var {
    t.log(t.clamp_min(a, LOG_EPS))
}

/// Index of the nearest point of `pool` to each query, ties to the lowest index.
pub fn nearest_indices(queries: &[Point], pool: &[Point]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (j, p) in pool.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

fn var_points(t: &Tape, v: Var) -> Vec<Point> {
    crate::matching::tensor_points(&t.value(v))
}

fn one_direction(t: &Tape, x: Var, sx: Var, y: Var, sy: Var) -> Result<Var> {
    let nn = nearest_indices(&var_points(t, x), &var_points(t, y));
    let idx = Rc::new(nn);
    let ym = t.gather_rows(y, idx.clone())?;
    let sym = t.gather_rows(sy, idx)?;
    let dist = smooth_row_norms(t, t.sub(x, ym)?);
    let s = t.scale(t.add(sx, sym)?, 0.5);
    let term = t.add(t.log(s), t.div(dist, s)?)?;
    Ok(t.mean(term))
}

/// Uncertainty-weighted keypoint alignment, symmetric over both sets:
/// mean over `i` of `log σ̃_i + ‖x_i − y_{j*(i)}‖ / σ̃_i` plus the reverse,
/// with `σ̃` the mean scale of the two matched keypoints. `x` must already
/// be expressed in the target frame.
pub fn loss_keypoint(t: &Tape, x: Var, sigma_x: Var, y: Var, sigma_y: Var) -> Result<Var> {
    if t.shape(x).0 == 0 || t.shape(y).0 == 0 {
        return Err(Error::EmptySet);
    }
    let a = one_direction(t, x, sigma_x, y, sigma_y)?;
    let b = one_direction(t, y, sigma_y, x, sigma_x)?;
    t.add(a, b)
}

/// A ground-truth node pair with overlap weight `o > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPair {
    pub src: usize,
    pub tgt: usize,
    pub overlap: f64,
}

fn overlap_matrix(shape: (usize, usize), pairs: &[GtPair]) -> Result<(Tensor, f64)> {
    let mut w = Tensor::zeros(shape.0, shape.1);
    let mut total = 0.0;
    for p in pairs {
        if p.src >= shape.0 || p.tgt >= shape.1 {
            return Err(shape_err("overlap pairs", format!("pair ({}, {}) outside {:?}", p.src, p.tgt, shape)));
        }
        w.set(p.src, p.tgt, w.get(p.src, p.tgt) + p.overlap);
        total += p.overlap;
    }
    if !(total > 0.0) {
        return Err(Error::NoGroundTruthPairs);
    }
    Ok((w, total))
}

/// Overlap-weighted cross-entropy averaged over layers:
/// `−(1/L) Σ_l Σ o_ij log P^{(l)}_ij / Σ o_ij`.
pub fn loss_spot(t: &Tape, layers: &[Var], pairs: &[GtPair]) -> Result<Var> {
    let first = *layers.first().ok_or(Error::EmptySet)?;
    let (w, total) = overlap_matrix(t.shape(first), pairs)?;
    let w = t.constant(w);
    let mut acc: Option<Var> = None;
    for &p in layers {
        let term = t.sum(t.mul(w, safe_log(t, p))?);
        acc = Some(match acc {
            Some(a) => t.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.expect("non-empty layers");
    Ok(t.scale(acc, -1.0 / (total * layers.len() as f64)))
}

/// `−mean log(1 − ô_k)` over the listed rows; zero for an empty list.
fn background_term(t: &Tape, o_hat: Var, rows: &[usize]) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let g = t.gather_rows(o_hat, Rc::new(rows.to_vec()))?;
    let comp = t.offset(t.neg(g), 1.0);
    Ok(Some(t.neg(t.mean(safe_log(t, comp)))))
}

/// Single-layer spot loss plus background terms pushing the overlap
/// scores `ô` of nodes without correspondences towards zero.
pub fn loss_coarse(
    t: &Tape,
    p: Var,
    pairs: &[GtPair],
    o_hat_src: Var,
    background_src: &[usize],
    o_hat_tgt: Var,
    background_tgt: &[usize],
) -> Result<Var> {
    let mut total = loss_spot(t, &[p], pairs)?;
    for term in [
        background_term(t, o_hat_src, background_src)?,
        background_term(t, o_hat_tgt, background_tgt)?,
    ]
    .into_iter()
    .flatten()
    {
        total = t.add(total, term)?;
    }
    Ok(total)
}

/// Contrastive descriptor loss with bilinear similarity `a W cᵀ`.
/// `positive[i]` indexes the positive candidate of anchor `i`; `allowed`
/// (row-major `n×m`) selects the positive and its negatives.
pub fn loss_infonce(
    t: &Tape,
    anchors: Var,
    candidates: Var,
    w: Var,
    positive: &[usize],
    allowed: &[bool],
) -> Result<Var> {
    let (n, _) = t.shape(anchors);
    let (m, _) = t.shape(candidates);
    if positive.len() != n || allowed.len() != n * m {
        return Err(shape_err("loss_infonce", "positives or mask do not match anchors"));
    }
    if n == 0 {
        return Ok(t.scalar(0.0));
    }
    let mut pick = Tensor::zeros(n, m);
    let mut mask = allowed.to_vec();
    for (i, &j) in positive.iter().enumerate() {
        pick.set(i, j, 1.0);
        mask[i * m + j] = true;
    }
    let logits = t.matmul(t.matmul(anchors, w)?, t.transpose(candidates))?;
    let logits = t.clamp_min(logits, LOGIT_FLOOR);
    let lp = t.log_softmax_rows(logits, Some(Rc::new(mask)))?;
    let picked = t.sum(t.mul(lp, t.constant(pick))?);
    Ok(t.scale(picked, -1.0 / n as f64))
}

/// Single-anchor InfoNCE on plain vectors.
pub fn infonce_value(d_x: &[f64], d_pos: &[f64], d_negs: &[Vec<f64>], w: &Tensor) -> Result<f64> {
    let t = Tape::new();
    let mut rows = vec![d_pos.to_vec()];
    rows.extend(d_negs.iter().cloned());
    let d = d_x.len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.len() != rows.len() * d {
        return Err(shape_err("infonce_value", "descriptor widths differ"));
    }
    let cands = t.constant(Tensor::new(rows.len(), d, flat)?);
    let anchor = t.constant(Tensor::row(d_x));
    let mask = vec![true; rows.len()];
    let l = loss_infonce(&t, anchor, cands, t.constant(w.clone()), &[0], &mask)?;
    Ok(t.item(l))
}

/// Mean distance between ground-truth mapped source keypoints and `ŷ`.
pub fn loss_keycorr(t: &Tape, x: Var, y_hat: Var, gt: &RigidTransform) -> Result<Var> {
    if t.shape(x).0 == 0 {
        return Err(Error::EmptySet);
    }
    let mapped = transform_rows(t, x, &gt.rotation, &gt.translation)?;
    Ok(t.mean(smooth_row_norms(t, t.sub(mapped, y_hat)?)))
}

/// Labels `‖R x + t − ŷ‖ < r_f` for inlier supervision.
pub fn inlier_labels(x: &[Point], y_hat: &[Point], gt: &RigidTransform, r_f: f64) -> Vec<f64> {
    x.iter()
        .zip(y_hat)
        .map(|(p, q)| if (gt.apply_point(p) - q).norm() < r_f { 1.0 } else { 0.0 })
        .collect()
}

/// Mean binary cross-entropy of probabilities `scores` (`n×1`).
pub fn loss_inlier(t: &Tape, scores: Var, labels: &[f64]) -> Result<Var> {
    let n = t.shape(scores).0;
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if labels.len() != n {
        return Err(shape_err("loss_inlier", "labels length"));
    }
    let l = t.constant(Tensor::col(labels));
    let nl = t.constant(Tensor::col(&labels.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));
    let pos = t.mul(l, safe_log(t, scores))?;
    let neg = t.mul(nl, safe_log(t, t.offset(t.neg(scores), 1.0)))?;
    Ok(t.neg(t.mean(t.add(pos, neg)?)))
}

/// `(‖t̂ − t‖, ‖R̂ᵀR − I‖_F)` for a `3×3` rotation and `1×3` translation.
pub fn loss_pose(t: &Tape, r_hat: Var, t_hat: Var, gt: &RigidTransform) -> Result<(Var, Var)> {
    let tgt = t.constant(Tensor::row(gt.translation.as_slice()));
    let lt = smooth_row_norms(t, t.sub(t_hat, tgt)?);
    let r = t.constant(Tensor::new(3, 3, gt.rotation.transpose().as_slice().to_vec())?);
    let prod = t.matmul(t.transpose(r_hat), r)?;
    let diff = t.sub(prod, t.constant(Tensor::identity(3)))?;
    let fro = t.offset(t.sqrt(t.offset(t.sum(t.square(diff)), NORM_EPS * NORM_EPS)), -NORM_EPS);
    Ok((t.sum(lt), fro))
}

/// Per-term weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub lambda_k: f64,
    pub lambda_i: f64,
    pub lambda_t: f64,
    #[serde(rename = "lambda_R")]
    pub lambda_r: f64,
}

impl LossWeights {
    /// Outdoor-scene weighting.
    pub fn kitti() -> Self {
        Self {
            lambda_s: 0.1,
            lambda_c: 0.2,
            lambda_f: 1.0,
            lambda_k: 1.0,
            lambda_i: 1.0,
            lambda_t: 5.0,
            lambda_r: 20.0,
        }
    }

    /// Indoor-scene weighting.
    pub fn threedmatch() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_k: 10.0,
            ..Self::kitti()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_c,
            self.lambda_f,
            self.lambda_k,
            self.lambda_i,
            self.lambda_t,
            self.lambda_r,
        ];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()))
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::kitti()
    }
}

/// The eight loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub keypoint: T,
    pub spot: T,
    pub coarse: T,
    pub infonce: T,
    pub keycorr: T,
    pub inlier: T,
    pub translation: T,
    pub rotation: T,
}

impl<T: Copy> LossTerms<T> {
    fn weighted(&self, w: &LossWeights) -> [(T, f64); 8] {
        [
            (self.keypoint, 1.0),
            (self.spot, w.lambda_s),
            (self.coarse, w.lambda_c),
            (self.infonce, w.lambda_f),
            (self.keycorr, w.lambda_k),
            (self.inlier, w.lambda_i),
            (self.translation, w.lambda_t),
            (self.rotation, w.lambda_r),
        ]
    }
}

impl LossTerms<Var> {
    pub fn values(&self, t: &Tape) -> LossTerms<f64> {
        LossTerms {
            keypoint: t.item(self.keypoint),
            spot: t.item(self.spot),
            coarse: t.item(self.coarse),
            infonce: t.item(self.infonce),
            keycorr: t.item(self.keycorr),
            inlier: t.item(self.inlier),
            translation: t.item(self.translation),
            rotation: t.item(self.rotation),
        }
    }
}

/// `L_p + λ_s L_s + λ_c L_c + λ_f L_f + λ_k L_k + λ_i L_i + λ_t L_t + λ_R L_R`.
pub fn loss_total(t: &Tape, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc = t.scalar(0.0);
    for (v, k) in terms.weighted(w) {
        acc = t.add(acc, t.scale(v, k))?;
    }
    Ok(acc)
}

pub fn loss_total_value(terms: &LossTerms<f64>, w: &LossWeights) -> f64 {
    terms.weighted(w).iter().map(|(v, k)| v * k).sum()
}

/// Plain-value keypoint loss.
pub fn keypoint_value(x: &[Point], sx: &[f64], y: &[Point], sy: &[f64]) -> Result<f64> {
    let t = Tape::new();
    let l = loss_keypoint(
        &t,
        t.constant(points_tensor(x)),
        t.constant(Tensor::col(sx)),
        t.constant(points_tensor(y)),
        t.constant(Tensor::col(sy)),
    )?;
    Ok(t.item(l))
}
