use std::collections::HashSet;
use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{CrossAttentionBlock, SelfAttentionBlock};
use crate::backbone::{build_hierarchy, Backbone, Hierarchy};
use crate::error::{Error, Result};
use crate::estimator::{transform_from_vars, weighted_svd, weighted_svd_tape, Diagnostics};
use crate::geom::{Point, PointCloud, RigidTransform};
use crate::losses::{
    inlier_labels, loss_coarse, loss_infonce, loss_inlier, loss_keycorr, loss_keypoint, loss_pose, loss_spot,
    GtPair, LossTerms,
};
use crate::matching::{
    coarse_match, consistency_scores, extract_coarse_pairs, fine_correspondences, filter_consistency,
    overlap_labels, points_tensor, tensor_points, transform_rows, Bilinear, CorrespondenceSet, FineMatches,
    IndexPair, InlierHead, KeypointDetector, KeypointMatches, KeypointSet,
};
use crate::nn::Linear;
use crate::numeric::params::{Params, Session};
use crate::numeric::{Tape, Tensor, Var};
use crate::serialize::{invert_permutation, serialize};
use crate::ssm::MambaBlock;

use super::config::ModelConfig;

/// Hierarchy levels used by the model.
pub const FINE: usize = 1;
pub const SEMI: usize = 2;
pub const SUPER: usize = 3;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    /// Superpoint features plus normalized coordinates to encoder width.
    pub proj: Linear,
    pub mamba: Vec<MambaBlock>,
    pub self_attn: Vec<SelfAttentionBlock>,
    pub cross: Vec<CrossAttentionBlock>,
    pub overlap_head: Linear,
    pub detector: KeypointDetector,
    pub bilinear: Bilinear,
    pub fine_proj: Linear,
    pub inlier: InlierHead,
}

/// A pair with its hierarchies.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub src: PointCloud,
    pub tgt: PointCloud,
    pub hs: Hierarchy,
    pub ht: Hierarchy,
}

/// Encoder output after each block, source and target.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub src: Vec<Var>,
    pub tgt: Vec<Var>,
}

impl EncoderOutput {
    pub fn last(&self) -> (Var, Var) {
        (*self.src.last().expect("at least one block"), *self.tgt.last().expect("at least one block"))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    /// Dual-softmax matrices after each encoder block.
    pub match_layers: Vec<Var>,
    pub coarse_pairs: Vec<IndexPair>,
    /// Semi-dense overlap probabilities, `n×1`.
    pub o_hat_src: Var,
    pub o_hat_tgt: Var,
    pub kp_src: KeypointSet,
    pub kp_tgt: KeypointSet,
    pub matches: KeypointMatches,
    /// Length-consistency vote per keypoint match.
    pub votes: Vec<f64>,
    pub inlier_probs: Var,
    pub t0: RigidTransform,
    pub fine: FineMatches,
    pub r_hat: Var,
    pub t_hat: Var,
    pub estimate: RigidTransform,
    pub diagnostics: Diagnostics,
}

/// Centroid-free coordinates scaled to unit RMS radius.
pub fn normalized_coords(points: &[Point]) -> Tensor {
    let n = points.len().max(1) as f64;
    let c = points.iter().fold(Point::zeros(), |a, p| a + p) / n;
    let rms = (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n).sqrt().max(1e-12);
    let shifted: Vec<Point> = points.iter().map(|p| (p - c) / rms).collect();
    points_tensor(&shifted)
}

/// Evenly strided subset of `0..n` of size at most `budget`.
pub fn budget_nodes(n: usize, budget: usize) -> Vec<usize> {
    if n <= budget {
        (0..n).collect()
    } else {
        (0..budget).map(|i| i * n / budget).collect()
    }
}

impl Model {
    /// Builds every block regardless of variant so that variants share
    /// parameters given the same seed.
    pub fn init(cfg: &ModelConfig) -> Result<(Self, Params)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Params::new();
        let widths = &cfg.backbone.widths;
        let (w1, w2, w3) = (widths[0], widths[1], widths[2]);
        let backbone = Backbone::init(&mut p, "backbone", &cfg.backbone, &mut rng);
        let proj = Linear::init(&mut p, "proj", w3 + 3, cfg.width, true, 1.0, &mut rng);
        let mcfg = cfg.mamba();
        let acfg = cfg.attention();
        let mut mamba = Vec::new();
        let mut self_attn = Vec::new();
        let mut cross = Vec::new();
        for b in 0..cfg.blocks {
            mamba.push(MambaBlock::init(&mut p, &format!("enc{b}.mamba"), &mcfg, &mut rng));
            self_attn.push(SelfAttentionBlock::init(&mut p, &format!("enc{b}.self"), &acfg, &mut rng));
            cross.push(CrossAttentionBlock::init(&mut p, &format!("enc{b}.cross"), &acfg, &mut rng));
        }
        let overlap_head = Linear::init(&mut p, "overlap", w2, 1, true, 1.0, &mut rng);
        let detector = KeypointDetector::init(&mut p, "keypoint", w1, w2, cfg.width, cfg.desc_width, &mut rng);
        let bilinear = Bilinear::init(&mut p, "bilinear", cfg.desc_width, &mut rng);
        let fine_proj = Linear::init(&mut p, "fine", w1, w1, true, 1.0, &mut rng);
        let inlier = InlierHead::init(&mut p, "inlier");
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                proj,
                mamba,
                self_attn,
                cross,
                overlap_head,
                detector,
                bilinear,
                fine_proj,
                inlier,
            },
            p,
        ))
    }

    pub fn prepare(&self, src: &PointCloud, tgt: &PointCloud) -> Result<PairInput> {
        let v = &self.cfg.backbone.voxel_sizes;
        Ok(PairInput {
            src: src.clone(),
            tgt: tgt.clone(),
            hs: build_hierarchy(src, v)?,
            ht: build_hierarchy(tgt, v)?,
        })
    }

    /// Serialized order of `points` along the configured curve.
    fn serial_order(&self, points: &[Point]) -> Result<Vec<usize>> {
        let cloud = PointCloud::new(points.to_vec())?;
        Ok(serialize(&cloud, self.cfg.curve, self.cfg.depth)?.order)
    }

    /// Per block: reorder along the curve, Mamba, restore, self-attention,
    /// cross-attention. Variants skip the block types they exclude.
    pub fn hybrid_encode(
        &self,
        s: &Session,
        f_src: Var,
        f_tgt: Var,
        pos_src: &[Point],
        pos_tgt: &[Point],
    ) -> Result<EncoderOutput> {
        let t = s.tape();
        if t.shape(f_src).0 != pos_src.len() || t.shape(f_tgt).0 != pos_tgt.len() {
            return Err(Error::InvalidConfig("features and positions are not aligned".into()));
        }
        let variant = self.cfg.variant;
        let orders = if variant.uses_mamba() {
            let os = self.serial_order(pos_src)?;
            let ot = self.serial_order(pos_tgt)?;
            Some([
                (Rc::new(invert_permutation(&os)), Rc::new(os)),
                (Rc::new(invert_permutation(&ot)), Rc::new(ot)),
            ])
        } else {
            None
        };
        let (mut xs, mut xt) = (f_src, f_tgt);
        let mut out = EncoderOutput { src: vec![], tgt: vec![] };
        for b in 0..self.cfg.blocks {
            if let Some(orders) = &orders {
                let step = |x: Var, (ranks, order): &(Rc<Vec<usize>>, Rc<Vec<usize>>)| -> Result<Var> {
                    let seq = t.gather_rows(x, order.clone())?;
                    let y = self.mamba[b].forward(s, seq)?;
                    t.gather_rows(y, ranks.clone())
                };
                xs = step(xs, &orders[0])?;
                xt = step(xt, &orders[1])?;
            }
            if variant.uses_attention() {
                xs = self.self_attn[b].forward(s, xs)?;
                xt = self.self_attn[b].forward(s, xt)?;
                (xs, xt) = self.cross[b].forward(s, xs, xt)?;
            }
            out.src.push(xs);
            out.tgt.push(xt);
        }
        Ok(out)
    }

    /// Superpoint inputs of the encoder: backbone features plus normalized coordinates.
    pub fn encoder_inputs(&self, s: &Session, feats: Var, points: &[Point]) -> Result<Var> {
        let t = s.tape();
        let x = t.concat_cols(&[feats, t.constant(normalized_coords(points))])?;
        self.proj.forward(s, x)
    }

    /// Backbone, encoder and per-block coarse matching matrices.
    pub fn coarse_stage(&self, s: &Session, input: &PairInput) -> Result<(EncoderOutput, Vec<Var>, [crate::backbone::LevelFeatures; 2])> {
        let t = s.tape();
        let fs = self.backbone.forward(s, &input.hs)?;
        let ft = self.backbone.forward(s, &input.ht)?;
        let (ps, pt) = (&input.hs.levels[SUPER].points, &input.ht.levels[SUPER].points);
        let xs = self.encoder_inputs(s, fs.level(SUPER), ps)?;
        let xt = self.encoder_inputs(s, ft.level(SUPER), pt)?;
        let enc = self.hybrid_encode(s, xs, xt, ps, pt)?;
        let layers = enc
            .src
            .iter()
            .zip(&enc.tgt)
            .map(|(&a, &b)| coarse_match(t, a, b, self.cfg.tau))
            .collect::<Result<Vec<_>>>()?;
        Ok((enc, layers, [fs, ft]))
    }

    /// Full forward pass. With `teacher` set, the fine stage is aligned
    /// by that transform instead of the estimated initial one.
    pub fn forward(&self, s: &Session, input: &PairInput, teacher: Option<&RigidTransform>) -> Result<ForwardOutput> {
        let t = s.tape();
        let cfg = &self.cfg;
        let mut diag = Diagnostics::new("learned");
        let mut clock = Instant::now();
        diag.counts.src_points = input.src.len();
        diag.counts.tgt_points = input.tgt.len();
        diag.counts.src_superpoints = input.hs.levels[SUPER].len();
        diag.counts.tgt_superpoints = input.ht.levels[SUPER].len();

        let (encoder, match_layers, [fs, ft]) = self.coarse_stage(s, input)?;
        let last = *match_layers.last().expect("at least one block");
        let coarse_pairs = {
            let m = t.value(last);
            extract_coarse_pairs(&m, cfg.top_k)
        };
        diag.counts.coarse_pairs = coarse_pairs.len();
        diag.lap("coarse", &mut clock);

        let o_hat_src = t.sigmoid(self.overlap_head.forward(s, fs.level(SEMI))?);
        let o_hat_tgt = t.sigmoid(self.overlap_head.forward(s, ft.level(SEMI))?);
        let (ctx_s, ctx_t) = encoder.last();
        let nodes_s = budget_nodes(input.hs.levels[SEMI].len(), cfg.keypoint_budget);
        let nodes_t = budget_nodes(input.ht.levels[SEMI].len(), cfg.keypoint_budget);
        let kp_src = self.detector.forward(s, &input.hs, &nodes_s, fs.level(FINE), fs.level(SEMI), ctx_s)?;
        let kp_tgt = self.detector.forward(s, &input.ht, &nodes_t, ft.level(FINE), ft.level(SEMI), ctx_t)?;
        let paired: HashSet<(usize, usize)> = coarse_pairs.iter().map(|p| (p.src, p.tgt)).collect();
        let allowed: Vec<bool> = kp_src
            .superpoints
            .iter()
            .flat_map(|&a| kp_tgt.superpoints.iter().map(move |&b| (a, b)))
            .map(|ab| paired.contains(&ab))
            .collect();
        let matches = crate::matching::match_keypoints(s, &self.bilinear, &kp_src, &kp_tgt, Some(&allowed))?;
        diag.counts.keypoint_correspondences = matches.src.len();
        diag.lap("keypoints", &mut clock);

        let xv = tensor_points(&t.value(matches.x));
        let yv = tensor_points(&t.value(matches.y_hat));
        let tau_d = cfg.consistency * cfg.fine_voxel();
        let votes = consistency_scores(&xv, &yv, tau_d);
        let inlier_probs = self.inlier.forward(s, &votes, matches.confidence)?;
        let probs: Vec<f64> = t.value(inlier_probs).data().to_vec();
        let conf: Vec<f64> = t.value(matches.confidence).data().to_vec();
        let all = CorrespondenceSet::new(xv, yv, probs)?;
        let t0 = match filter_consistency(&all, tau_d) {
            Ok((kept, _)) if kept.len() >= 3 => {
                diag.counts.inliers = kept.len();
                weighted_svd(&kept)
            }
            _ => Err(Error::TooFewCorrespondences { needed: 3, got: 0 }),
        }
        .or_else(|_| weighted_svd(&CorrespondenceSet { weights: conf, ..all.clone() }))?;
        diag.inlier_ratio = diag.counts.inliers as f64 / matches.src.len().max(1) as f64;
        diag.lap("sparse", &mut clock);

        let align = teacher.unwrap_or(&t0);
        let (p1s, p1t) = (&input.hs.levels[FINE].points, &input.ht.levels[FINE].points);
        let f1s = self.fine_proj.forward(s, fs.level(FINE))?;
        let f1t = self.fine_proj.forward(s, ft.level(FINE))?;
        let fine = fine_correspondences(t, p1s, p1t, f1s, f1t, align, cfg.fine_radius * cfg.fine_voxel())?;
        diag.counts.fine_correspondences = fine.src.len();
        let (r_hat, t_hat) = weighted_svd_tape(t, fine.x, fine.y_hat, fine.weights)?;
        let estimate = transform_from_vars(t, r_hat, t_hat);
        diag.lap("fine", &mut clock);

        Ok(ForwardOutput {
            encoder,
            match_layers,
            coarse_pairs,
            o_hat_src,
            o_hat_tgt,
            kp_src,
            kp_tgt,
            matches,
            votes,
            inlier_probs,
            t0,
            fine,
            r_hat,
            t_hat,
            estimate,
            diagnostics: diag,
        })
    }

    /// The eight loss terms against ground truth `gt`.
    pub fn losses(&self, s: &Session, input: &PairInput, out: &ForwardOutput, gt: &RigidTransform) -> Result<LossTerms<Var>> {
        let t = s.tape();
        let cfg = &self.cfg;
        let v1 = cfg.fine_voxel();
        let v2 = cfg.backbone.voxel_sizes[1];
        let top = overlap_labels(&input.hs, &input.ht, gt, SUPER, v1);
        let semi = overlap_labels(&input.hs, &input.ht, gt, SEMI, v1);
        let pairs: Vec<GtPair> = top
            .pairs
            .iter()
            .map(|(&(src, tgt), &overlap)| GtPair { src, tgt, overlap })
            .collect();
        let spot = loss_spot(t, &out.match_layers, &pairs)?;
        let last = *out.match_layers.last().expect("at least one block");
        let coarse = loss_coarse(t, last, &pairs, out.o_hat_src, &semi.src_background, out.o_hat_tgt, &semi.tgt_background)?;

        let bg_s: HashSet<usize> = semi.src_background.iter().copied().collect();
        let bg_t: HashSet<usize> = semi.tgt_background.iter().copied().collect();
        let rows_s: Vec<usize> = (0..out.kp_src.len()).filter(|&i| !bg_s.contains(&out.kp_src.nodes[i])).collect();
        let rows_t: Vec<usize> = (0..out.kp_tgt.len()).filter(|&j| !bg_t.contains(&out.kp_tgt.nodes[j])).collect();
        let (keypoint, infonce) = if rows_s.is_empty() || rows_t.is_empty() {
            (t.scalar(0.0), t.scalar(0.0))
        } else {
            let rs = Rc::new(rows_s.clone());
            let rt = Rc::new(rows_t);
            let xs = transform_rows(t, t.gather_rows(out.kp_src.positions, rs.clone())?, &gt.rotation, &gt.translation)?;
            let ss = t.gather_rows(out.kp_src.sigma, rs.clone())?;
            let yt = t.gather_rows(out.kp_tgt.positions, rt.clone())?;
            let st = t.gather_rows(out.kp_tgt.sigma, rt)?;
            let keypoint = loss_keypoint(t, xs, ss, yt, st)?;

            let mapped = tensor_points(&t.value(xs));
            let tgt_all = tensor_points(&t.value(out.kp_tgt.positions));
            let m = tgt_all.len();
            let (mut anchors, mut positive, mut allowed) = (vec![], vec![], vec![]);
            for (a, x) in rows_s.iter().zip(&mapped) {
                let d: Vec<f64> = tgt_all.iter().map(|y| (y - x).norm()).collect();
                let (j, dj) = d.iter().enumerate().fold((0, f64::INFINITY), |b, (j, &v)| if v < b.1 { (j, v) } else { b });
                if dj <= v2 {
                    anchors.push(*a);
                    positive.push(j);
                    allowed.extend((0..m).map(|k| k == j || d[k] > v2));
                }
            }
            let infonce = if anchors.is_empty() {
                t.scalar(0.0)
            } else {
                let da = t.gather_rows(out.kp_src.descriptors, Rc::new(anchors))?;
                loss_infonce(t, da, out.kp_tgt.descriptors, self.bilinear.matrix(s)?, &positive, &allowed)?
            };
            (keypoint, infonce)
        };

        let keycorr = loss_keycorr(t, out.matches.x, out.matches.y_hat, gt)?;
        let labels = {
            let xv = tensor_points(&t.value(out.matches.x));
            let yv = tensor_points(&t.value(out.matches.y_hat));
            inlier_labels(&xv, &yv, gt, cfg.inlier_radius)
        };
        let inlier = loss_inlier(t, out.inlier_probs, &labels)?;
        let (translation, rotation) = loss_pose(t, out.r_hat, out.t_hat, gt)?;
        Ok(LossTerms {
            keypoint,
            spot,
            coarse,
            infonce,
            keycorr,
            inlier,
            translation,
            rotation,
        })
    }

    /// Inference on one pair.
    pub fn register(&self, src: &PointCloud, tgt: &PointCloud, params: &Params) -> Result<(RigidTransform, Diagnostics)> {
        let mut clock = Instant::now();
        let input = self.prepare(src, tgt)?;
        let prep_ms = clock.elapsed().as_secs_f64() * 1e3;
        clock = Instant::now();
        let tape = Tape::new();
        let s = Session::new(&tape, params, false);
        let out = self.forward(&s, &input, None)?;
        let _ = clock;
        let mut diag = out.diagnostics;
        diag.stages.insert(
            0,
            crate::estimator::StageTiming {
                stage: "hierarchy".into(),
                ms: prep_ms,
            },
        );
        Ok((out.estimate, diag))
    }
}
