//! Synthetic partially overlapping pairs with known ground truth.
//!
//! A base scene of planar and spherical patches plus clutter is cut into
//! two views along a random direction: view A keeps the lowest fraction `f`
//! of projections, view B the highest `f`, so they share the middle band.
//! `f` is tuned by bisection until the measured overlap lands in
//! `[requested, requested + 0.05]`. The source view is then moved by the
//! inverse ground truth so that `gt` maps source onto target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{apply_transform, random_unit_vector, Point, PointCloud, RigidTransform};
use crate::spatial::{median_nn_spacing, SpatialGrid};

/// Accepted overshoot of the measured overlap above the request.
pub const OVERLAP_TOL: f64 = 0.05;
const BISECTION_STEPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Points per view.
    pub n_points: usize,
    pub overlap: f64,
    pub rot_max_deg: f64,
    pub trans_max: f64,
    pub noise: f64,
}

impl SynthConfig {
    /// `highoverlap`, `lowoverlap` or `tiny` (small views for training).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            n_points: 1500,
            overlap: 0.5,
            rot_max_deg: 45.0,
            trans_max: 0.5,
            noise: 0.005,
        };
        match name {
            "highoverlap" => Ok(base),
            "lowoverlap" => Ok(Self { overlap: 0.2, ..base }),
            "tiny" => Ok(Self {
                n_points: 300,
                rot_max_deg: 30.0,
                ..base
            }),
            _ => Err(Error::InvalidConfig(format!("unknown synth preset '{name}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::InvalidConfig("overlap must lie in (0, 1]".into()));
        }
        if !(0.0..=180.0).contains(&self.rot_max_deg) {
            return Err(Error::InvalidConfig("rotation bound must lie in [0, 180]".into()));
        }
        if !(self.trans_max >= 0.0) || !(self.noise >= 0.0) || self.n_points < 3 {
            return Err(Error::InvalidConfig("translation, noise and size must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub src: PointCloud,
    pub tgt: PointCloud,
    /// Maps `src` onto `tgt`.
    pub gt: RigidTransform,
    /// Measured overlap of the returned pair.
    pub overlap: f64,
    /// Neighbor radius used to measure overlap.
    pub radius: f64,
}

/// Fraction of `gt`-mapped source points with a target point within `radius`.
pub fn measured_overlap(src: &PointCloud, tgt: &PointCloud, gt: &RigidTransform, radius: f64) -> f64 {
    let grid = SpatialGrid::new(tgt.points(), radius.max(1e-9));
    let hit = src.points().iter().filter(|p| grid.any_within(&gt.apply_point(p), radius)).count();
    hit as f64 / src.len().max(1) as f64
}

fn base_scene(g: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    let clutter = n / 10;
    let patches = 6;
    let per = (n - clutter) / patches;
    for k in 0..patches {
        let c = Point::from_fn(|_, _| g.random_range(-0.6..0.6));
        let m = if k + 1 == patches { n - clutter - per * (patches - 1) } else { per };
        if k % 2 == 0 {
            let u = random_unit_vector(g);
            let v = u.cross(&random_unit_vector(g)).normalize();
            let (a, b) = (g.random_range(0.3..0.7), g.random_range(0.3..0.7));
            for _ in 0..m {
                pts.push(c + u * g.random_range(-a..a) + v * g.random_range(-b..b));
            }
        } else {
            let r = g.random_range(0.2..0.45);
            for _ in 0..m {
                pts.push(c + random_unit_vector(g) * r);
            }
        }
    }
    for _ in 0..clutter {
        pts.push(Point::from_fn(|_, _| g.random_range(-1.0..1.0)));
    }
    pts
}

struct Views {
    a: Vec<Point>,
    b: Vec<Point>,
}

/// Splits `ranked` (base indices ordered by projection) into overlapping
/// views of fraction `f` each. Each view keeps its `n` points of lowest
/// `priority`, so shared base points tend to survive in both views.
fn crop(base: &[Point], ranked: &[usize], f: f64, n: usize, priority: &[u64]) -> Views {
    let m = ranked.len();
    let k = ((f * m as f64).round() as usize).clamp(1, m);
    let pick = |idx: &[usize]| -> Vec<Point> {
        let mut idx = idx.to_vec();
        if idx.len() > n {
            idx.sort_by_key(|&i| (priority[i], i));
            idx.truncate(n);
        }
        idx.sort_unstable();
        idx.iter().map(|&i| base[i]).collect()
    };
    Views {
        a: pick(&ranked[..k]),
        b: pick(&ranked[m - k..]),
    }
}

/// Generates a pair whose measured overlap lies in `[overlap, overlap + 0.05]`.
pub fn synth_pair(cfg: &SynthConfig, seed: u64) -> Result<SynthPair> {
    cfg.validate()?;
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let base = base_scene(&mut g, 2 * cfg.n_points);
    let dir = random_unit_vector(&mut g);
    let mut ranked: Vec<usize> = (0..base.len()).collect();
    ranked.sort_by(|&i, &j| base[i].dot(&dir).total_cmp(&base[j].dot(&dir)).then(i.cmp(&j)));
    let gt = RigidTransform::random(&mut g, cfg.rot_max_deg, cfg.trans_max);
    let priority: Vec<u64> = (0..base.len()).map(|_| g.random()).collect();
    let noise_seed: u64 = g.random();
    let normal = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let build = |f: f64| -> Result<(PointCloud, PointCloud)> {
        let mut ng = ChaCha8Rng::seed_from_u64(noise_seed);
        let views = crop(&base, &ranked, f, cfg.n_points, &priority);
        let mut jitter = |pts: Vec<Point>| -> Result<PointCloud> {
            let pts = if cfg.noise > 0.0 {
                pts.into_iter().map(|p| p + Point::from_fn(|_, _| normal.sample(&mut ng))).collect()
            } else {
                pts
            };
            PointCloud::new(pts)
        };
        let a = jitter(views.a)?;
        let b = jitter(views.b)?;
        Ok((apply_transform(&a, &gt.inverse()), b))
    };
    let radius_of = |tgt: &PointCloud| 2.0 * median_nn_spacing(tgt.points());

    if cfg.overlap >= 1.0 {
        let (src, tgt) = build(1.0)?;
        let radius = radius_of(&tgt);
        let overlap = measured_overlap(&src, &tgt, &gt, radius);
        return Ok(SynthPair { src, tgt, gt, overlap, radius });
    }
    let (mut lo, mut hi) = (0.5, 1.0);
    let mut closest = f64::NAN;
    for _ in 0..BISECTION_STEPS {
        let f = 0.5 * (lo + hi);
        let (src, tgt) = build(f)?;
        let radius = radius_of(&tgt);
        let overlap = measured_overlap(&src, &tgt, &gt, radius);
        if closest.is_nan() || (overlap - cfg.overlap).abs() < (closest - cfg.overlap).abs() {
            closest = overlap;
        }
        if overlap >= cfg.overlap && overlap <= cfg.overlap + OVERLAP_TOL {
            return Ok(SynthPair { src, tgt, gt, overlap, radius });
        }
        if overlap < cfg.overlap {
            lo = f;
        } else {
            hi = f;
        }
    }
    Err(Error::InfeasibleOverlap {
        requested: cfg.overlap,
        achieved: closest,
    })
}
