//! Uniform hash grid for radius and k-nearest-neighbour queries.

use std::collections::HashMap;

use crate::geom::Point;

type Cell = (i64, i64, i64);

pub struct SpatialGrid<'a> {
    points: &'a [Point],
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl<'a> SpatialGrid<'a> {
    /// `cell` must be positive; a good choice is the typical query radius.
    pub fn new(points: &'a [Point], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell must be positive");
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = key(p, cell);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            cells.entry(k).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    pub fn points(&self) -> &[Point] {
        self.points
    }

    /// Indices of points within distance `r` of `q` (inclusive), ascending.
    pub fn radius(&self, q: &Point, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.points.is_empty() {
            return out;
        }
        let span = (r / self.cell).ceil() as i64;
        let c = key(q, self.cell);
        let r2 = r * r;
        for x in (c.0 - span).max(self.lo.0)..=(c.0 + span).min(self.hi.0) {
            for y in (c.1 - span).max(self.lo.1)..=(c.1 + span).min(self.hi.1) {
                for z in (c.2 - span).max(self.lo.2)..=(c.2 + span).min(self.hi.2) {
                    if let Some(ids) = self.cells.get(&(x, y, z)) {
                        out.extend(
                            ids.iter()
                                .copied()
                                .filter(|&i| (self.points[i] - q).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// True when some point lies within `r` of `q`.
    pub fn any_within(&self, q: &Point, r: f64) -> bool {
        !self.radius(q, r).is_empty()
    }

    /// The `k` nearest points to `q` as `(index, distance)`, nearest first,
    /// ties broken by lower index. `skip` excludes one index (the query itself).
    pub fn knn(&self, q: &Point, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        let c = key(q, self.cell);
        let max_ring = [
            c.0 - self.lo.0,
            self.hi.0 - c.0,
            c.1 - self.lo.1,
            self.hi.1 - c.1,
            c.2 - self.lo.2,
            self.hi.2 - c.2,
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
        .max(0);
        for ring in 0..=max_ring {
            for x in c.0 - ring..=c.0 + ring {
                for y in c.1 - ring..=c.1 + ring {
                    for z in c.2 - ring..=c.2 + ring {
                        let on_shell = (x - c.0).abs() == ring
                            || (y - c.1).abs() == ring
                            || (z - c.2).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&(x, y, z)) else {
                            continue;
                        };
                        for &i in ids {
                            if Some(i) == skip {
                                continue;
                            }
                            let d = (self.points[i] - q).norm();
                            insert_sorted(&mut best, (i, d), k);
                        }
                    }
                }
            }
            // Points outside this ring are at least `ring * cell` away.
            if best.len() == k && best[k - 1].1 <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }

    pub fn nearest(&self, q: &Point) -> Option<(usize, f64)> {
        self.knn(q, 1, None).into_iter().next()
    }
}

fn insert_sorted(best: &mut Vec<(usize, f64)>, item: (usize, f64), k: usize) {
    let pos = best
        .iter()
        .position(|&(j, d)| item.1 < d || (item.1 == d && item.0 < j))
        .unwrap_or(best.len());
    if pos < k {
        best.insert(pos, item);
        best.truncate(k);
    }
}

fn key(p: &Point, cell: f64) -> Cell {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Brute-force k nearest neighbours, same ordering rules as [`SpatialGrid::knn`].
pub fn knn_brute(points: &[Point], q: &Point, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, p)| (i, (p - q).norm()))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Median distance from each point to its nearest other point.
pub fn median_nn_spacing(points: &[Point]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let (lo, hi) = points.iter().fold((points[0], points[0]), |(l, h), p| (l.inf(p), h.sup(p)));
    let extent = (hi - lo).max().max(1e-12);
    let cell = extent / (points.len() as f64).cbrt().max(1.0);
    let grid = SpatialGrid::new(points, cell);
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| grid.knn(p, 1, Some(i))[0].1)
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}
