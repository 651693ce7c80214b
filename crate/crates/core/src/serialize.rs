//! Space-filling-curve serialization of point clouds.
//!
//! Points are quantized onto a `2^depth` grid anchored at the cloud's minimum
//! corner, encoded with a curve (Z-order/Morton, Hilbert or lexicographic
//! XYZ), optionally prefixed with their batch label, and stably sorted. The
//! resulting order is the token sequence consumed by the SSM encoder.
//!
//! Bit layout of the Morton code: bit `b` of `x` lands at position `3b`,
//! of `y` at `3b + 1`, of `z` at `3b + 2`. The `trans_*` curves cyclically
//! shift the axes `(x, y, z) -> (y, z, x)` before encoding.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};
use crate::spatial::SpatialGrid;

pub const MAX_DEPTH: u32 = 21;
pub const DEFAULT_DEPTH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    Zorder,
    TransZorder,
    Hilbert,
    TransHilbert,
    Xyz,
    TransXyz,
}

impl Curve {
    pub const ALL: [Curve; 6] = [
        Curve::Zorder,
        Curve::TransZorder,
        Curve::Hilbert,
        Curve::TransHilbert,
        Curve::Xyz,
        Curve::TransXyz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Curve::Zorder => "zorder",
            Curve::TransZorder => "trans_zorder",
            Curve::Hilbert => "hilbert",
            Curve::TransHilbert => "trans_hilbert",
            Curve::Xyz => "xyz",
            Curve::TransXyz => "trans_xyz",
        }
    }

    fn is_trans(self) -> bool {
        matches!(self, Curve::TransZorder | Curve::TransHilbert | Curve::TransXyz)
    }
}

impl fmt::Display for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Curve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Curve::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown curve '{s}'")))
    }
}

/// Grid used to quantize a cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridQuantization {
    pub origin: Point,
    pub cell: f64,
    pub depth: u32,
}

/// Per-point codes plus the stable ascending order they induce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerialCode {
    pub codes: Vec<u64>,
    pub order: Vec<usize>,
}

impl SerialCode {
    /// Wrap an explicit ordering; codes are set to each point's rank.
    pub fn from_order(order: Vec<usize>) -> Self {
        let mut codes = vec![0u64; order.len()];
        for (r, &i) in order.iter().enumerate() {
            codes[i] = r as u64;
        }
        Self { codes, order }
    }

    /// `rank[i]` is the position of point `i` in the serialized sequence.
    pub fn ranks(&self) -> Vec<usize> {
        invert_permutation(&self.order)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (r, &i) in order.iter().enumerate() {
        inv[i] = r;
    }
    inv
}

fn check_depth(depth: u32) -> Result<()> {
    if (1..=MAX_DEPTH).contains(&depth) {
        Ok(())
    } else {
        Err(Error::InvalidDepth(depth))
    }
}

/// Quantize points to integer grid coordinates in `[0, 2^depth - 1]³`.
///
/// `cell = max axis extent / 2^depth`; a cloud with zero extent uses a unit
/// cell so every point maps to `(0, 0, 0)`.
pub fn quantize(cloud: &PointCloud, depth: u32) -> Result<(GridQuantization, Vec<[u32; 3]>)> {
    check_depth(depth)?;
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyCloud)?;
    let extent = (hi - lo).max();
    let cells = (1u64 << depth) as f64;
    let cell = if extent > 0.0 { extent / cells } else { 1.0 };
    let top = (1u64 << depth) - 1;
    let coords = cloud
        .points()
        .iter()
        .map(|p| {
            let mut g = [0u32; 3];
            for a in 0..3 {
                let v = ((p[a] - lo[a]) / cell).floor();
                g[a] = (v.max(0.0) as u64).min(top) as u32;
            }
            g
        })
        .collect();
    Ok((
        GridQuantization {
            origin: lo,
            cell,
            depth,
        },
        coords,
    ))
}

/// Spread the low 21 bits of `v` so bit `b` moves to position `3b`.
fn spread3(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | x << 32) & 0x001f_0000_0000_ffff;
    x = (x | x << 16) & 0x001f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

fn check_coords(g: [u32; 3], depth: u32) -> Result<()> {
    check_depth(depth)?;
    for &c in &g {
        if (c as u64) >> depth != 0 {
            return Err(Error::CoordinateOutOfRange {
                value: c as u64,
                depth,
            });
        }
    }
    Ok(())
}

fn with_batch_prefix(code: u64, depth: u32, batch: Option<u32>) -> Result<u64> {
    match batch {
        None | Some(0) => Ok(code),
        Some(b) => {
            let shift = 3 * depth;
            let b = b as u64;
            if shift >= 64 || b.leading_zeros() < shift {
                return Err(Error::CoordinateOutOfRange {
                    value: b,
                    depth: 64 - shift.min(64),
                });
            }
            Ok((b << shift) | code)
        }
    }
}

/// Morton code of a grid triple, optionally prefixed with a batch id.
pub fn morton_encode(g: [u32; 3], depth: u32, batch: Option<u32>) -> Result<u64> {
    check_coords(g, depth)?;
    let m = spread3(g[0] as u64) | spread3(g[1] as u64) << 1 | spread3(g[2] as u64) << 2;
    with_batch_prefix(m, depth, batch)
}

/// 3D Hilbert index with `depth` bits per axis (Skilling's transpose method).
pub fn hilbert_encode(g: [u32; 3], depth: u32, batch: Option<u32>) -> Result<u64> {
    check_coords(g, depth)?;
    let mut x = g;
    let m = 1u32 << (depth - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    x[1] ^= x[0];
    x[2] ^= x[1];
    let mut t = 0;
    q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }
    let mut h = 0u64;
    for b in (0..depth).rev() {
        for v in &x {
            h = (h << 1) | ((v >> b) & 1) as u64;
        }
    }
    with_batch_prefix(h, depth, batch)
}

/// Lexicographic code: `x` most significant, then `y`, then `z`.
pub fn xyz_encode(g: [u32; 3], depth: u32, batch: Option<u32>) -> Result<u64> {
    check_coords(g, depth)?;
    let c = (g[0] as u64) << (2 * depth) | (g[1] as u64) << depth | g[2] as u64;
    with_batch_prefix(c, depth, batch)
}

pub fn encode(curve: Curve, g: [u32; 3], depth: u32, batch: Option<u32>) -> Result<u64> {
    let g = if curve.is_trans() { [g[1], g[2], g[0]] } else { g };
    match curve {
        Curve::Zorder | Curve::TransZorder => morton_encode(g, depth, batch),
        Curve::Hilbert | Curve::TransHilbert => hilbert_encode(g, depth, batch),
        Curve::Xyz | Curve::TransXyz => xyz_encode(g, depth, batch),
    }
}

/// Serialize a cloud along `curve`. Ties in the code are broken by grid
/// coordinates and then by raw coordinates, so the resulting sequence of
/// positions does not depend on input order.
pub fn serialize(cloud: &PointCloud, curve: Curve, depth: u32) -> Result<SerialCode> {
    let (_, grid) = quantize(cloud, depth)?;
    let batch = cloud.batch();
    let codes = grid
        .iter()
        .enumerate()
        .map(|(i, &g)| encode(curve, g, depth, batch.map(|b| b[i])))
        .collect::<Result<Vec<u64>>>()?;
    let pts = cloud.points();
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| {
        codes[a]
            .cmp(&codes[b])
            .then_with(|| grid[a].cmp(&grid[b]))
            .then_with(|| cmp_point(&pts[a], &pts[b]))
    });
    Ok(SerialCode { codes, order })
}

fn cmp_point(a: &Point, b: &Point) -> Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// Mean serial-rank distance from each point to its `k` nearest spatial
/// neighbours, divided by the expectation `(N + 1) / 3` under a uniformly
/// random ordering. Values below 1 indicate locality is preserved.
pub fn locality_score(cloud: &PointCloud, code: &SerialCode, k: usize) -> Result<f64> {
    let n = cloud.len();
    if k == 0 || n <= k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    if code.len() != n {
        return Err(crate::error::shape_err(
            "locality_score",
            format!("{} codes for {} points", code.len(), n),
        ));
    }
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyCloud)?;
    let extent = (hi - lo).max().max(1e-12);
    let cell = extent / (n as f64).cbrt();
    let grid = SpatialGrid::new(cloud.points(), cell);
    let ranks = code.ranks();
    let mut total = 0.0;
    for (i, p) in cloud.points().iter().enumerate() {
        for (j, _) in grid.knn(p, k, Some(i)) {
            total += ranks[i].abs_diff(ranks[j]) as f64;
        }
    }
    let mean = total / (n * k) as f64;
    Ok(mean / ((n as f64 + 1.0) / 3.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bit-by-bit interleave, written independently of the magic-mask path.
    fn naive_morton(g: [u32; 3], depth: u32) -> u64 {
        let mut m = 0u64;
        for b in 0..depth {
            for (a, &c) in g.iter().enumerate() {
                m |= (((c >> b) & 1) as u64) << (3 * b + a as u32);
            }
        }
        m
    }

    fn uniform_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| Point::from_fn(|_, _| rng.random())).collect()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let corners: Vec<[f64; 3]> = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        let (q, g) = quantize(&PointCloud::from_rows(&corners).unwrap(), 1).unwrap();
        assert_eq!(q.cell, 0.5);
        for (c, gi) in corners.iter().zip(&g) {
            for a in 0..3 {
                assert_eq!(gi[a], c[a] as u32);
            }
        }

        let same = PointCloud::from_rows(&[[2.0, 3.0, 4.0]; 5]).unwrap();
        let (_, g) = quantize(&same, 8).unwrap();
        assert!(g.iter().all(|&x| x == [0, 0, 0]));

        let line = PointCloud::from_rows(&[[0.0; 3], [1.0, 0.0, 0.0], [0.49, 0.0, 0.0]]).unwrap();
        let (_, g) = quantize(&line, 1).unwrap();
        assert_eq!([g[0][0], g[1][0], g[2][0]], [0, 1, 0]);

        let empty = PointCloud::new(vec![]).unwrap();
        assert!(matches!(quantize(&empty, 4), Err(Error::EmptyCloud)));
        assert!(matches!(quantize(&line, 0), Err(Error::InvalidDepth(0))));
    }

    #[test]
    fn morton_examples() {
        assert_eq!(morton_encode([0, 0, 0], 7, None).unwrap(), 0);
        assert_eq!(morton_encode([1, 1, 1], 1, None).unwrap(), 7);
        assert_eq!(morton_encode([3, 5, 6], 3, None).unwrap(), 427);
        assert_eq!(naive_morton([3, 5, 6], 3), 427);
        // m = 5 at depth 2 is (1, 0, 1); batch 1 gives (1 << 6) | 5.
        assert_eq!(morton_encode([1, 0, 1], 2, Some(1)).unwrap(), 69);
        assert!(matches!(
            morton_encode([4, 0, 0], 2, None),
            Err(Error::CoordinateOutOfRange { .. })
        ));
    }

    #[test]
    fn morton_matches_naive_interleave() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20_000 {
            let depth = rng.random_range(1..=MAX_DEPTH);
            let g = [0; 3].map(|_: u32| rng.random_range(0..(1u32 << depth)));
            assert_eq!(morton_encode(g, depth, None).unwrap(), naive_morton(g, depth));
        }
    }

    #[test]
    fn codes_are_injective_on_small_grid() {
        for curve in [Curve::Zorder, Curve::Hilbert, Curve::Xyz, Curve::TransZorder] {
            let depth = 3;
            let mut seen = std::collections::HashSet::new();
            for x in 0..8 {
                for y in 0..8 {
                    for z in 0..8 {
                        assert!(seen.insert(encode(curve, [x, y, z], depth, None).unwrap()));
                    }
                }
            }
            assert_eq!(seen.len(), 512);
            assert!(seen.iter().all(|&c| c < 512));
        }
    }

    #[test]
    fn hilbert_steps_between_face_neighbours() {
        for depth in 1..=4u32 {
            let n = 1u32 << depth;
            let mut cells = Vec::new();
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        cells.push((hilbert_encode([x, y, z], depth, None).unwrap(), [x, y, z]));
                    }
                }
            }
            cells.sort();
            for w in cells.windows(2) {
                let d: u32 = (0..3).map(|a| w[0].1[a].abs_diff(w[1].1[a])).sum();
                assert_eq!(d, 1, "depth {depth}: {:?} -> {:?}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn lattice_traversal_is_local() {
        let mut rows = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    rows.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let cloud = PointCloud::from_rows(&rows).unwrap();
        let code = serialize(&cloud, Curve::Zorder, 2).unwrap();
        for w in code.order.windows(2) {
            let (a, b) = (cloud.points()[w[0]], cloud.points()[w[1]]);
            let cheb = (a - b).abs().max();
            assert!(cheb <= 3.0);
        }
    }

    #[test]
    fn shuffled_input_gives_same_position_sequence() {
        let cloud = uniform_cloud(3, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for curve in Curve::ALL {
            let base = serialize(&cloud, curve, 6).unwrap();
            let seq: Vec<Point> = base.order.iter().map(|&i| cloud.points()[i]).collect();
            let mut perm: Vec<usize> = (0..cloud.len()).collect();
            perm.shuffle(&mut rng);
            let shuffled = cloud.permuted(&perm);
            let code = serialize(&shuffled, curve, 6).unwrap();
            let seq2: Vec<Point> = code.order.iter().map(|&i| shuffled.points()[i]).collect();
            assert_eq!(seq, seq2, "{curve}");
        }
    }

    #[test]
    fn rotation_changes_order() {
        let cloud = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.1, 1.0, 0.0]]).unwrap();
        let rot = crate::geom::RigidTransform::from_axis_angle(
            nalgebra::Vector3::z(),
            45.0,
            nalgebra::Vector3::zeros(),
        );
        let a = serialize(&cloud, Curve::Zorder, 4).unwrap();
        let b = serialize(&crate::geom::apply_transform(&cloud, &rot), Curve::Zorder, 4).unwrap();
        assert_ne!(a.order, b.order);
    }

    #[test]
    fn far_apart_pair_orders_agree() {
        let cloud = PointCloud::from_rows(&[[5.0, 0.2, 0.3], [0.0, 0.1, 0.4]]).unwrap();
        let z = serialize(&cloud, Curve::Zorder, 8).unwrap();
        let x = serialize(&cloud, Curve::Xyz, 8).unwrap();
        assert_eq!(z.order, x.order);
        assert_eq!(z.order, vec![1, 0]);
    }

    #[test]
    fn batch_prefix_groups_batches() {
        let cloud = uniform_cloud(5, 40)
            .with_batch((0..40).map(|i| (i % 2) as u32).collect())
            .unwrap();
        let code = serialize(&cloud, Curve::Zorder, 8).unwrap();
        let labels: Vec<u32> = code.order.iter().map(|&i| cloud.batch().unwrap()[i]).collect();
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        assert!(serialize(&cloud, Curve::Zorder, 21).is_ok());
        let three = uniform_cloud(5, 3).with_batch(vec![0, 1, 2]).unwrap();
        assert!(serialize(&three, Curve::Zorder, 21).is_err());
    }

    #[test]
    fn serialization_is_deterministic() {
        let cloud = uniform_cloud(6, 300);
        assert_eq!(
            serialize(&cloud, Curve::Hilbert, 10).unwrap(),
            serialize(&cloud, Curve::Hilbert, 10).unwrap()
        );
    }

    #[test]
    fn locality_examples() {
        let n = 300;
        let rows: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        let line = PointCloud::from_rows(&rows).unwrap();
        let code = serialize(&line, Curve::Xyz, 16).unwrap();
        let s = locality_score(&line, &code, 1).unwrap();
        assert!((s - 3.0 / (n as f64 + 1.0)).abs() < 1e-12);

        let cloud = uniform_cloud(7, 2000);
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let r = locality_score(&cloud, &SerialCode::from_order(order), 5).unwrap();
        assert!((r - 1.0).abs() < 0.05, "{r}");
        let z = locality_score(&cloud, &serialize(&cloud, Curve::Zorder, 10).unwrap(), 5).unwrap();
        assert!(z < r);

        let tiny = uniform_cloud(1, 3);
        assert!(matches!(
            locality_score(&tiny, &serialize(&tiny, Curve::Zorder, 4).unwrap(), 3),
            Err(Error::TooFewPoints { .. })
        ));
    }
}
