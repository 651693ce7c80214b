//! Coarse-to-fine correspondence stages.
//!
//! * Coarse: dual-softmax over cosine similarities of superpoint features,
//!   followed by mutual top-k pair extraction.
//! * Sparse: one keypoint per semi-dense node, placed at a softmax-weighted
//!   centroid of its children; virtual correspondences come from a masked
//!   bilinear attention over target keypoints in coarse-paired superpoints,
//!   then a pairwise length-consistency vote filters them.
//! * Fine: source points pre-aligned by the initial transform attend to
//!   target points inside a radius.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use nalgebra::Matrix3;
use rand::Rng;

use crate::backbone::Hierarchy;
use crate::error::{shape_err, Error, Result};
use crate::geom::{Point, RigidTransform};
use crate::nn::Linear;
use crate::numeric::params::{ParamId, Params, Session};
use crate::numeric::{Tape, Tensor, Var};
use crate::spatial::SpatialGrid;

/// Row–column product of softmaxes of `S / τ`, where `S` holds cosine
/// similarities. Entries lie in `[0, 1]`.
pub fn coarse_match(t: &Tape, f_src: Var, f_tgt: Var, tau: f64) -> Result<Var> {
    let (ns, ds) = t.shape(f_src);
    let (nt, dt) = t.shape(f_tgt);
    if ns == 0 || nt == 0 {
        return Err(Error::EmptyFeatures);
    }
    if ds != dt {
        return Err(shape_err("coarse_match", format!("widths {ds} vs {dt}")));
    }
    let a = t.normalize_rows(f_src, 1e-12)?;
    let b = t.normalize_rows(f_tgt, 1e-12)?;
    let s = t.matmul(a, t.transpose(b))?;
    let s = t.scale(s, 1.0 / tau);
    let row = t.softmax_rows(s, None)?;
    let col = t.softmax_rows(t.transpose(s), None)?;
    t.mul(row, t.transpose(col))
}

/// Plain-value [`coarse_match`].
pub fn coarse_match_values(f_src: &Tensor, f_tgt: &Tensor, tau: f64) -> Result<Tensor> {
    let t = Tape::new();
    let m = coarse_match(&t, t.constant(f_src.clone()), t.constant(f_tgt.clone()), tau)?;
    Ok(t.value(m).clone())
}

/// A weighted pair of indices into source and target sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexPair {
    pub src: usize,
    pub tgt: usize,
    pub weight: f64,
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(values: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = values.enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Pairs `(i, j)` where `j` is among the top-`k` of row `i` and `i` among
/// the top-`k` of column `j`, weighted by `m_ij`, ordered by `(i, j)`.
pub fn extract_coarse_pairs(m: &Tensor, k: usize) -> Vec<IndexPair> {
    let k = k.max(1);
    let (rows, cols) = m.shape();
    let col_top: Vec<Vec<usize>> = (0..cols)
        .map(|j| top_k((0..rows).map(|i| m.get(i, j)), k))
        .collect();
    let mut out = Vec::new();
    for i in 0..rows {
        let mut row_top = top_k(m.row_slice(i).iter().copied(), k);
        row_top.sort_unstable();
        for j in row_top {
            if col_top[j].contains(&i) {
                out.push(IndexPair {
                    src: i,
                    tgt: j,
                    weight: m.get(i, j),
                });
            }
        }
    }
    out
}

/// Keypoints living on a tape: positions `n×3`, scales `n×1`, descriptors `n×d`.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub positions: Var,
    pub sigma: Var,
    pub descriptors: Var,
    /// Semi-dense node of each keypoint.
    pub nodes: Vec<usize>,
    /// Superpoint containing each keypoint.
    pub superpoints: Vec<usize>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Convex combination of `points` with weights `softmax(scores)`.
pub fn weighted_centroid(points: &[Point], scores: &[f64]) -> Point {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    points.iter().zip(&w).fold(Point::zeros(), |acc, (p, wi)| acc + p * (wi / z))
}

/// Learned keypoint heads over a hierarchy with levels fine (1),
/// semi-dense (2) and superpoint (top).
#[derive(Debug, Clone)]
pub struct KeypointDetector {
    pub score: Linear,
    pub sigma: Linear,
    pub desc: Linear,
    pub fine_level: usize,
    pub semi_level: usize,
}

/// Floor added to the softplus scale head.
pub const SIGMA_FLOOR: f64 = 1e-3;

impl KeypointDetector {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        params: &mut Params,
        name: &str,
        fine_width: usize,
        semi_width: usize,
        context_width: usize,
        desc_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            score: Linear::init(params, &format!("{name}.score"), fine_width, 1, true, 1.0, rng),
            sigma: Linear::init(params, &format!("{name}.sigma"), semi_width, 1, true, 0.1, rng),
            desc: Linear::init(
                params,
                &format!("{name}.desc"),
                semi_width + context_width,
                desc_width,
                true,
                1.0,
                rng,
            ),
            fine_level: 1,
            semi_level: 2,
        }
    }

    /// `nodes`: semi-dense nodes to turn into keypoints. `context`: per
    /// superpoint features from the hybrid encoder.
    pub fn forward(
        &self,
        s: &Session,
        h: &Hierarchy,
        nodes: &[usize],
        f_fine: Var,
        f_semi: Var,
        context: Var,
    ) -> Result<KeypointSet> {
        let t = s.tape();
        let fine = &h.levels[self.fine_level];
        let semi = &h.levels[self.semi_level];
        let groups: Vec<Vec<usize>> = nodes.iter().map(|&n| semi.children[n].clone()).collect();
        let members: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut local = Vec::with_capacity(groups.len());
        let mut start = 0;
        for g in &groups {
            local.push((start..start + g.len()).collect::<Vec<_>>());
            start += g.len();
        }
        let f_members = t.gather_rows(f_fine, Rc::new(members.clone()))?;
        let logits = self.score.forward(s, f_members)?;
        let alpha = t.segment_softmax(logits, Rc::new(local.clone()))?;

        // Weighted centroid per group as (0/1 membership) · (alpha ⊙ positions).
        let mut pos = Tensor::zeros(members.len(), 3);
        for (r, &c) in members.iter().enumerate() {
            pos.row_slice_mut(r).copy_from_slice(fine.points[c].as_slice());
        }
        let mut member_of = Tensor::zeros(nodes.len(), members.len());
        for (g, rows) in local.iter().enumerate() {
            for &r in rows {
                member_of.set(g, r, 1.0);
            }
        }
        let weighted = t.mul_col(t.constant(pos), alpha)?;
        let positions = t.matmul(t.constant(member_of), weighted)?;

        let f_nodes = t.gather_rows(f_semi, Rc::new(nodes.to_vec()))?;
        let sig = self.sigma.forward(s, f_nodes)?;
        let sigma = t.offset(t.softplus(sig), SIGMA_FLOOR);

        let top = h.depth();
        let superpoints: Vec<usize> = nodes.iter().map(|&n| h.ancestor(self.semi_level, n, top)).collect();
        let ctx = t.gather_rows(context, Rc::new(superpoints.clone()))?;
        let cat = t.concat_cols(&[f_nodes, ctx])?;
        let d = self.desc.forward(s, cat)?;
        let descriptors = t.normalize_rows(d, 1e-12)?;
        Ok(KeypointSet {
            positions,
            sigma,
            descriptors,
            nodes: nodes.to_vec(),
            superpoints,
        })
    }
}

/// Symmetric bilinear form `W = (V + Vᵀ)/2` used for descriptor similarity.
#[derive(Debug, Clone)]
pub struct Bilinear {
    pub v: ParamId,
}

impl Bilinear {
    pub fn init<R: Rng>(params: &mut Params, name: &str, width: usize, rng: &mut R) -> Self {
        let mut v = Tensor::randn(width, width, 0.1 / (width as f64).sqrt(), rng);
        for i in 0..width {
            v.set(i, i, v.get(i, i) + 1.0);
        }
        Self {
            v: params.add(format!("{name}.v"), v),
        }
    }

    pub fn matrix(&self, s: &Session) -> Result<Var> {
        let t = s.tape();
        let v = s.var(self.v);
        let w = t.add(v, t.transpose(v))?;
        Ok(t.scale(w, 0.5))
    }

    /// Logits `a W bᵀ`.
    pub fn logits(&self, s: &Session, a: Var, b: Var) -> Result<Var> {
        let t = s.tape();
        let aw = t.matmul(a, self.matrix(s)?)?;
        t.matmul(aw, t.transpose(b))
    }
}

/// Virtual correspondences of source keypoints.
#[derive(Debug, Clone)]
pub struct KeypointMatches {
    /// Source keypoint index of each row.
    pub src: Vec<usize>,
    /// Source positions of the kept rows, `n×3`.
    pub x: Var,
    /// Predicted target positions, `n×3`.
    pub y_hat: Var,
    /// Attention probabilities, `n×m` over target keypoints.
    pub probs: Var,
    /// Largest attention probability per row, `n×1`.
    pub confidence: Var,
}

/// `ŷ_i = Σ_j softmax_j(d_i W d_jᵀ) y_j` over allowed targets; `allowed`
/// is row-major `n_src×n_tgt`. Rows without any allowed target are dropped.
pub fn match_keypoints(
    s: &Session,
    w: &Bilinear,
    kp_src: &KeypointSet,
    kp_tgt: &KeypointSet,
    allowed: Option<&[bool]>,
) -> Result<KeypointMatches> {
    let t = s.tape();
    let (n, m) = (kp_src.len(), kp_tgt.len());
    if n == 0 || m == 0 {
        return Err(Error::EmptySet);
    }
    let rows: Vec<usize> = match allowed {
        Some(a) => (0..n).filter(|&i| a[i * m..(i + 1) * m].iter().any(|&x| x)).collect(),
        None => (0..n).collect(),
    };
    if rows.is_empty() {
        return Err(Error::TooFewCorrespondences { needed: 1, got: 0 });
    }
    let idx = Rc::new(rows.clone());
    let d = t.gather_rows(kp_src.descriptors, idx.clone())?;
    let logits = w.logits(s, d, kp_tgt.descriptors)?;
    let mask = allowed.map(|a| Rc::new(rows.iter().flat_map(|&i| a[i * m..(i + 1) * m].iter().copied()).collect()));
    let probs = t.softmax_rows(logits, mask)?;
    let y_hat = t.matmul(probs, kp_tgt.positions)?;
    let x = t.gather_rows(kp_src.positions, idx)?;
    let conf: Vec<f64> = {
        let p = t.value(probs);
        (0..p.rows()).map(|r| p.row_slice(r).iter().copied().fold(0.0, f64::max)).collect()
    };
    Ok(KeypointMatches {
        src: rows,
        x,
        y_hat,
        probs,
        confidence: t.constant(Tensor::col(&conf)),
    })
}

/// Plain-value correspondences with weights and inlier scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub src: Vec<Point>,
    pub tgt: Vec<Point>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn new(src: Vec<Point>, tgt: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if src.len() != tgt.len() || src.len() != weights.len() {
            return Err(shape_err("correspondences", "length mismatch"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidCloud("correspondence weights must be finite and non-negative".into()));
        }
        let n = src.len();
        Ok(Self {
            src,
            tgt,
            weights,
            scores: vec![1.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn select(&self, keep: &[usize]) -> Self {
        Self {
            src: keep.iter().map(|&i| self.src[i]).collect(),
            tgt: keep.iter().map(|&i| self.tgt[i]).collect(),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Fraction of other pairs `b` whose lengths agree with pair `a`:
/// `| ‖x_a − x_b‖ − ‖y_a − y_b‖ | ≤ τ_d`.
pub fn consistency_scores(src: &[Point], tgt: &[Point], tau_d: f64) -> Vec<f64> {
    let n = src.len();
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|a| {
            let votes = (0..n)
                .filter(|&b| b != a)
                .filter(|&b| ((src[a] - src[b]).norm() - (tgt[a] - tgt[b]).norm()).abs() <= tau_d)
                .count();
            votes as f64 / (n - 1) as f64
        })
        .collect()
}

/// Score threshold for keeping a correspondence.
pub const CONSISTENCY_KEEP: f64 = 0.5;

/// Repeatedly drops pairs scoring below 0.5 until every remaining pair
/// passes; returned scores are from the final round. Returns the kept
/// indices into `c` as well.
pub fn filter_consistency(c: &CorrespondenceSet, tau_d: f64) -> Result<(CorrespondenceSet, Vec<usize>)> {
    if c.len() < 2 {
        return Err(Error::TooFewCorrespondences { needed: 2, got: c.len() });
    }
    let mut keep: Vec<usize> = (0..c.len()).collect();
    loop {
        let src: Vec<Point> = keep.iter().map(|&i| c.src[i]).collect();
        let tgt: Vec<Point> = keep.iter().map(|&i| c.tgt[i]).collect();
        let scores = consistency_scores(&src, &tgt, tau_d);
        let next: Vec<usize> = keep
            .iter()
            .zip(&scores)
            .filter(|(_, s)| **s >= CONSISTENCY_KEEP)
            .map(|(&i, _)| i)
            .collect();
        if next.len() == keep.len() || next.len() < 2 {
            let final_keep = if next.len() == keep.len() { keep } else { next };
            let mut out = c.select(&final_keep);
            let src: Vec<Point> = out.src.clone();
            out.scores = consistency_scores(&src, &out.tgt, tau_d);
            return Ok((out, final_keep));
        }
        keep = next;
    }
}

/// Inlier probability `σ(α(vote − 0.5) + β·confidence + b)`.
#[derive(Debug, Clone)]
pub struct InlierHead {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub bias: ParamId,
}

impl InlierHead {
    pub fn init(params: &mut Params, name: &str) -> Self {
        Self {
            alpha: params.add(format!("{name}.alpha"), Tensor::scalar(8.0)),
            beta: params.add(format!("{name}.beta"), Tensor::scalar(0.0)),
            bias: params.add(format!("{name}.bias"), Tensor::scalar(0.0)),
        }
    }

    pub fn forward(&self, s: &Session, votes: &[f64], confidence: Var) -> Result<Var> {
        let t = s.tape();
        let v = t.constant(Tensor::col(&votes.iter().map(|x| x - CONSISTENCY_KEEP).collect::<Vec<_>>()));
        let a = t.mul_scalar(v, s.var(self.alpha))?;
        let b = t.mul_scalar(confidence, s.var(self.beta))?;
        let z = t.add(a, b)?;
        let ones = t.constant(Tensor::full(votes.len(), 1, 1.0));
        let z = t.add(z, t.mul_scalar(ones, s.var(self.bias))?)?;
        Ok(t.sigmoid(z))
    }
}

/// Dense correspondences from the fine stage.
#[derive(Debug, Clone)]
pub struct FineMatches {
    /// Fine-level source node of each row.
    pub src: Vec<usize>,
    /// Original (unaligned) source positions, `n×3` constant.
    pub x: Var,
    pub y_hat: Var,
    /// Confidence `Σ_j p_j²`, `n×1`.
    pub weights: Var,
}

/// Target candidates within `radius` of each `T0`-aligned source point.
pub fn fine_candidates(src: &[Point], tgt: &[Point], t0: &RigidTransform, radius: f64) -> Vec<Vec<usize>> {
    if tgt.is_empty() {
        return vec![vec![]; src.len()];
    }
    let grid = SpatialGrid::new(tgt, radius);
    src.iter().map(|p| grid.radius(&t0.apply_point(p), radius)).collect()
}

/// Local attention of `T0`-aligned source points over target points within
/// `radius`, with logits `f_s · f_tᵀ / √d`. Sources without candidates are dropped.
pub fn fine_correspondences(
    t: &Tape,
    src: &[Point],
    tgt: &[Point],
    f_src: Var,
    f_tgt: Var,
    t0: &RigidTransform,
    radius: f64,
) -> Result<FineMatches> {
    let cands = fine_candidates(src, tgt, t0, radius);
    let rows: Vec<usize> = (0..src.len()).filter(|&i| !cands[i].is_empty()).collect();
    if rows.is_empty() {
        return Err(Error::NoOverlap);
    }
    let m = tgt.len();
    let mut mask = vec![false; rows.len() * m];
    for (r, &i) in rows.iter().enumerate() {
        for &j in &cands[i] {
            mask[r * m + j] = true;
        }
    }
    let d = t.shape(f_src).1;
    let fs = t.gather_rows(f_src, Rc::new(rows.clone()))?;
    let logits = t.matmul(fs, t.transpose(f_tgt))?;
    let logits = t.scale(logits, 1.0 / (d as f64).sqrt());
    let p = t.softmax_rows(logits, Some(Rc::new(mask)))?;
    let y_hat = t.matmul(p, t.constant(points_tensor(tgt)))?;
    let weights = t.sum_rows(t.square(p));
    let xs: Vec<Point> = rows.iter().map(|&i| src[i]).collect();
    Ok(FineMatches {
        src: rows,
        x: t.constant(points_tensor(&xs)),
        y_hat,
        weights,
    })
}

pub fn points_tensor(points: &[Point]) -> Tensor {
    let mut t = Tensor::zeros(points.len(), 3);
    for (r, p) in points.iter().enumerate() {
        t.row_slice_mut(r).copy_from_slice(p.as_slice());
    }
    t
}

pub fn tensor_points(t: &Tensor) -> Vec<Point> {
    (0..t.rows())
        .map(|r| Point::new(t.get(r, 0), t.get(r, 1), t.get(r, 2)))
        .collect()
}

/// Ground-truth overlap between two hierarchies at one level.
#[derive(Debug, Clone, Default)]
pub struct OverlapLabels {
    /// Symmetrized overlap ratio `o_ij > 0` per node pair.
    pub pairs: BTreeMap<(usize, usize), f64>,
    /// Nodes of each side with zero overlap.
    pub src_background: Vec<usize>,
    pub tgt_background: Vec<usize>,
}

/// For nodes of `level`, `o_ij` is the mean over both directions of the
/// fraction of node-`i` dense points whose `gt`-mapped position has a
/// node-`j` dense point within `radius`.
pub fn overlap_labels(
    h_src: &Hierarchy,
    h_tgt: &Hierarchy,
    gt: &RigidTransform,
    level: usize,
    radius: f64,
) -> OverlapLabels {
    let src_dense: Vec<Point> = h_src.levels[0].points.iter().map(|p| gt.apply_point(p)).collect();
    let tgt_dense = &h_tgt.levels[0].points;
    let one_way = |from: &[Point], from_h: &Hierarchy, to: &[Point], to_h: &Hierarchy| {
        let grid = SpatialGrid::new(to, radius.max(1e-9));
        let mut hits: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, p) in from.iter().enumerate() {
            let a = from_h.ancestor(0, i, level);
            let mut seen: Vec<usize> = grid
                .radius(p, radius)
                .into_iter()
                .map(|j| to_h.ancestor(0, j, level))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for b in seen {
                *hits.entry((a, b)).or_default() += 1;
            }
        }
        hits
    };
    let sizes = |h: &Hierarchy| -> Vec<usize> {
        let mut s = vec![0; h.levels[level].len()];
        for i in 0..h.levels[0].len() {
            s[h.ancestor(0, i, level)] += 1;
        }
        s
    };
    let (ns, nt) = (sizes(h_src), sizes(h_tgt));
    let fwd = one_way(&src_dense, h_src, tgt_dense, h_tgt);
    let bwd = one_way(tgt_dense, h_tgt, &src_dense, h_src);
    let mut pairs = BTreeMap::new();
    for (&(i, j), &c) in &fwd {
        *pairs.entry((i, j)).or_insert(0.0) += 0.5 * c as f64 / ns[i] as f64;
    }
    for (&(j, i), &c) in &bwd {
        *pairs.entry((i, j)).or_insert(0.0) += 0.5 * c as f64 / nt[j] as f64;
    }
    let mut src_has = vec![false; ns.len()];
    let mut tgt_has = vec![false; nt.len()];
    for &(i, j) in pairs.keys() {
        src_has[i] = true;
        tgt_has[j] = true;
    }
    OverlapLabels {
        pairs,
        src_background: (0..ns.len()).filter(|&i| !src_has[i]).collect(),
        tgt_background: (0..nt.len()).filter(|&j| !tgt_has[j]).collect(),
    }
}

/// Nearest point of `candidates` (indices into `pool`) to `q`, ties to the lower index.
pub fn nearest_of(q: &Point, pool: &[Point], candidates: &[usize]) -> Option<(usize, f64)> {
    candidates
        .iter()
        .map(|&j| (j, (pool[j] - q).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Applies `R` row-wise to an `n×3` tensor of points and adds `t`.
pub fn transform_rows(t: &Tape, x: Var, r: &Matrix3<f64>, tr: &nalgebra::Vector3<f64>) -> Result<Var> {
    // Column-major storage of R is the row-major layout of Rᵀ.
    let rt = Tensor::new(3, 3, r.as_slice().to_vec())?;
    let y = t.matmul(x, t.constant(rt))?;
    t.add_row(y, t.constant(Tensor::row(tr.as_slice())))
}
