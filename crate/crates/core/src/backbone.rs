//! Multi-scale voxel hierarchy and local-aggregation features.
//!
//! Level 0 is the input cloud. Level `ℓ ≥ 1` holds the centroids of the
//! level-`ℓ−1` nodes falling in each voxel of size `voxel_sizes[ℓ−1]`, on a
//! grid anchored at the input's minimum corner. Nodes are ordered by voxel
//! key and children are summed in lexicographic coordinate order, so the
//! hierarchy does not depend on input order.
//!
//! Features: each coarse node max-pools an MLP over its children, fed with
//! the child offset in voxel units and the child's own feature. A top-down
//! pass then concatenates every level below the top with its parent's
//! decoded feature.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};
use crate::nn::Mlp;
use crate::numeric::params::{Params, Session};
use crate::numeric::{Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub points: Vec<Point>,
    /// Voxel size that produced this level; 0 for the input level.
    pub voxel: f64,
    /// Children in the level below, sorted ascending. Empty for level 0.
    pub children: Vec<Vec<usize>>,
    /// For each node of the level below, its node in this level.
    pub parent_of_child: Vec<usize>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

impl Hierarchy {
    pub fn top(&self) -> &Level {
        self.levels.last().expect("hierarchy has a level")
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// Node in level `to` containing node `i` of level `from` (`from ≤ to`).
    pub fn ancestor(&self, from: usize, i: usize, to: usize) -> usize {
        (from + 1..=to).fold(i, |n, l| self.levels[l].parent_of_child[n])
    }

    /// Indices in level `to` below node `i` of level `from` (`to ≤ from`), ascending.
    pub fn descendants(&self, from: usize, i: usize, to: usize) -> Vec<usize> {
        let mut cur = vec![i];
        for l in (to + 1..=from).rev() {
            cur = cur
                .iter()
                .flat_map(|&n| self.levels[l].children[n].iter().copied())
                .collect();
        }
        cur.sort_unstable();
        cur
    }
}

type Key = (i64, i64, i64);

fn voxel_key(p: &Point, origin: &Point, v: f64) -> Key {
    let q = (p - origin) / v;
    (q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
}

fn lex(a: &Point, b: &Point) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

pub fn build_hierarchy(cloud: &PointCloud, voxel_sizes: &[f64]) -> Result<Hierarchy> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ascending = voxel_sizes.windows(2).all(|w| w[0] < w[1]);
    if voxel_sizes.is_empty() || !ascending || voxel_sizes.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::NonAscendingVoxels);
    }
    let (origin, _) = cloud.bounds().ok_or(Error::EmptyCloud)?;
    let mut levels = vec![Level {
        points: cloud.points().to_vec(),
        voxel: 0.0,
        children: vec![],
        parent_of_child: vec![],
    }];
    for &v in voxel_sizes {
        let below = &levels.last().expect("level").points;
        let mut cells: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
        for (i, p) in below.iter().enumerate() {
            cells.entry(voxel_key(p, &origin, v)).or_default().push(i);
        }
        let mut parent_of_child = vec![0; below.len()];
        let mut points = Vec::with_capacity(cells.len());
        let mut children = Vec::with_capacity(cells.len());
        for (node, (_, ids)) in cells.into_iter().enumerate() {
            let mut sorted: Vec<&Point> = ids.iter().map(|&i| &below[i]).collect();
            sorted.sort_by(|a, b| lex(a, b));
            let sum = sorted.iter().fold(Point::zeros(), |acc, p| acc + *p);
            points.push(sum / ids.len() as f64);
            for &i in &ids {
                parent_of_child[i] = node;
            }
            children.push(ids);
        }
        levels.push(Level {
            points,
            voxel: v,
            children,
            parent_of_child,
        });
    }
    Ok(Hierarchy { levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Voxel sizes of levels 1..=k, strictly increasing.
    pub voxel_sizes: Vec<f64>,
    /// Feature width of levels 1..=k.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            voxel_sizes: vec![0.05, 0.1, 0.25],
            widths: vec![16, 32, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_sizes.len() != self.widths.len() || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(
                "backbone needs one positive width per voxel size".into(),
            ));
        }
        if self.voxel_sizes.len() < 2 {
            return Err(Error::InvalidConfig("backbone needs at least two levels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    /// `encoders[ℓ−1]` produces level-`ℓ` features.
    pub encoders: Vec<Mlp>,
    /// `decoders[ℓ−1]` fuses level `ℓ` with its decoded parent, for `ℓ < k`.
    pub decoders: Vec<Mlp>,
}

/// Per-level features for levels 1..=k; index `ℓ−1` holds level `ℓ`.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub encoded: Vec<Var>,
    pub decoded: Vec<Var>,
}

impl LevelFeatures {
    pub fn level(&self, l: usize) -> Var {
        self.decoded[l - 1]
    }
}

impl Backbone {
    pub fn init<R: Rng>(params: &mut Params, name: &str, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let k = cfg.widths.len();
        let encoders = (0..k)
            .map(|i| {
                let fan_in = 3 + if i == 0 { 0 } else { cfg.widths[i - 1] };
                let w = cfg.widths[i];
                Mlp::init(params, &format!("{name}.enc{}", i + 1), (fan_in, w, w), rng)
            })
            .collect();
        let decoders = (0..k - 1)
            .map(|i| {
                let w = cfg.widths[i];
                let fan_in = w + cfg.widths[i + 1];
                Mlp::init(params, &format!("{name}.dec{}", i + 1), (fan_in, w, w), rng)
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            encoders,
            decoders,
        }
    }

    pub fn forward(&self, s: &Session, h: &Hierarchy) -> Result<LevelFeatures> {
        let t = s.tape();
        let k = self.encoders.len();
        if h.depth() != k {
            return Err(Error::InvalidConfig(format!(
                "hierarchy has {} levels, backbone expects {k}",
                h.depth()
            )));
        }
        let mut encoded: Vec<Var> = Vec::with_capacity(k);
        for l in 1..=k {
            let level = &h.levels[l];
            let below = &h.levels[l - 1];
            let mut offsets = Tensor::zeros(below.len(), 3);
            for (c, p) in below.points.iter().enumerate() {
                let rel = (p - level.points[level.parent_of_child[c]]) / level.voxel;
                offsets.row_slice_mut(c).copy_from_slice(rel.as_slice());
            }
            let offsets = t.constant(offsets);
            let input = if l == 1 {
                offsets
            } else {
                t.concat_cols(&[offsets, encoded[l - 2]])?
            };
            let per_child = self.encoders[l - 1].forward(s, input)?;
            encoded.push(t.segment_max(per_child, &level.children)?);
        }
        let mut decoded = vec![encoded[k - 1]; k];
        for l in (1..k).rev() {
            let parents = Rc::new(h.levels[l + 1].parent_of_child.clone());
            let up = t.gather_rows(decoded[l], parents)?;
            let cat = t.concat_cols(&[encoded[l - 1], up])?;
            decoded[l - 1] = self.decoders[l - 1].forward(s, cat)?;
        }
        Ok(LevelFeatures { encoded, decoded })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gradcheck_params, Tape, GRAD_TOL};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Point::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn cube_corners_collapse_to_centroid() {
        let pts: Vec<Point> = (0..8)
            .map(|i| Point::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let h = build_hierarchy(&PointCloud::new(pts).unwrap(), &[2.0]).unwrap();
        assert_eq!(h.levels[1].points, vec![Point::new(0.5, 0.5, 0.5)]);
        assert_eq!(h.levels[1].children, vec![(0..8).collect::<Vec<_>>()]);
    }

    #[test]
    fn sparse_points_pass_through() {
        let pts = vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 3.0, 2.0)];
        let h = build_hierarchy(&PointCloud::new(pts.clone()).unwrap(), &[0.5]).unwrap();
        let mut got = h.levels[1].points.clone();
        let mut want = pts;
        got.sort_by(lex);
        want.sort_by(lex);
        assert_eq!(got, want);
    }

    #[test]
    fn node_counts_match_voxel_hash_oracle() {
        let cloud = random_cloud(1, 2000);
        let sizes = [0.1, 0.2, 0.4];
        let h = build_hierarchy(&cloud, &sizes).unwrap();
        let (origin, _) = cloud.bounds().unwrap();
        for (l, &v) in sizes.iter().enumerate() {
            let below = &h.levels[l].points;
            let keys: HashSet<(i64, i64, i64)> = below
                .iter()
                .map(|p| {
                    (
                        ((p.x - origin.x) / v).floor() as i64,
                        ((p.y - origin.y) / v).floor() as i64,
                        ((p.z - origin.z) / v).floor() as i64,
                    )
                })
                .collect();
            assert_eq!(h.levels[l + 1].len(), keys.len());
        }
        assert!(h.levels.windows(2).all(|w| w[1].len() < w[0].len()));
    }

    #[test]
    fn rejects_bad_input() {
        let cloud = random_cloud(2, 10);
        assert!(matches!(build_hierarchy(&cloud, &[0.2, 0.1]), Err(Error::NonAscendingVoxels)));
        assert!(matches!(build_hierarchy(&cloud, &[0.0, 0.1]), Err(Error::NonAscendingVoxels)));
        assert!(matches!(build_hierarchy(&cloud, &[]), Err(Error::NonAscendingVoxels)));
        let empty = PointCloud::new(vec![]).unwrap();
        assert!(matches!(build_hierarchy(&empty, &[0.1]), Err(Error::EmptyCloud)));
    }

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            voxel_sizes: vec![0.3, 0.6, 1.2],
            widths: vec![4, 5, 6],
        }
    }

    fn features(p: &Params, b: &Backbone, h: &Hierarchy) -> Vec<Tensor> {
        let t = Tape::new();
        let s = Session::new(&t, p, false);
        let f = b.forward(&s, h).unwrap();
        f.decoded.iter().map(|&v| t.value(v).clone()).collect()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut p = Params::new();
        let b = Backbone::init(&mut p, "bb", &small_cfg(), &mut ChaCha8Rng::seed_from_u64(3));
        p.zero_prefix("bb");
        let h = build_hierarchy(&random_cloud(4, 80), &small_cfg().voxel_sizes).unwrap();
        for f in features(&p, &b, &h) {
            assert!(f.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn features_ignore_input_order_and_translation() {
        let mut p = Params::new();
        let cfg = small_cfg();
        let b = Backbone::init(&mut p, "bb", &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let cloud = random_cloud(6, 300);
        let h = build_hierarchy(&cloud, &cfg.voxel_sizes).unwrap();
        let base = features(&p, &b, &h);

        let mut perm: Vec<usize> = (0..300).collect();
        perm.reverse();
        perm.swap(3, 100);
        let hp = build_hierarchy(&cloud.permuted(&perm), &cfg.voxel_sizes).unwrap();
        for l in 1..h.levels.len() {
            assert_eq!(h.levels[l].points, hp.levels[l].points);
        }
        for (a, b) in base.iter().zip(features(&p, &b, &hp)) {
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        let shift = Point::new(3.25, -1.5, 0.75);
        let moved = PointCloud::new(cloud.points().iter().map(|q| q + shift).collect()).unwrap();
        let hm = build_hierarchy(&moved, &cfg.voxel_sizes).unwrap();
        for l in 1..h.levels.len() {
            assert_eq!(h.levels[l].len(), hm.levels[l].len());
        }
        for (a, b) in base.iter().zip(features(&p, &b, &hm)) {
            assert!(a.max_abs_diff(&b) <= 1e-9);
        }
    }

    #[test]
    fn gradcheck_through_top_features() {
        let mut p = Params::new();
        let cfg = small_cfg();
        let b = Backbone::init(&mut p, "bb", &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let h = build_hierarchy(&random_cloud(8, 50), &cfg.voxel_sizes).unwrap();
        let r = gradcheck_params(&p, &[], |s, _| {
            let f = b.forward(s, &h)?;
            let t = s.tape();
            let top = t.sum(*f.encoded.last().unwrap());
            let fine = t.sum(t.square(f.decoded[0]));
            t.add(top, fine)
        })
        .unwrap();
        assert!(r.passed(GRAD_TOL), "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn parent_maps_are_total_and_consistent(seed in 0u64..5000, n in 1usize..400) {
            let cloud = random_cloud(seed, n);
            let h = build_hierarchy(&cloud, &[0.1, 0.3, 0.7]).unwrap();
            for l in 1..h.levels.len() {
                let lv = &h.levels[l];
                prop_assert_eq!(lv.parent_of_child.len(), h.levels[l - 1].len());
                let mut seen = vec![false; h.levels[l - 1].len()];
                for (node, kids) in lv.children.iter().enumerate() {
                    prop_assert!(!kids.is_empty());
                    for &c in kids {
                        prop_assert_eq!(lv.parent_of_child[c], node);
                        prop_assert!(!seen[c]);
                        seen[c] = true;
                    }
                }
                prop_assert!(seen.iter().all(|&s| s));
            }
            let top = h.depth();
            let total: usize = (0..h.top().len()).map(|i| h.descendants(top, i, 0).len()).sum();
            prop_assert_eq!(total, n);
            for i in 0..n {
                let a = h.ancestor(0, i, top);
                prop_assert!(h.descendants(top, a, 0).contains(&i));
            }
        }
    }
}
