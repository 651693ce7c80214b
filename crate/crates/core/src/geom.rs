//! Point clouds, rigid transforms and registration error metrics.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// A set of 3D points with optional per-point batch labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    batch: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidCloud(format!("non-finite coordinate at point {i}")));
        }
        Ok(Self {
            points,
            batch: None,
        })
    }

    /// Attach batch labels. Labels must cover `0..=max` without gaps.
    pub fn with_batch(mut self, batch: Vec<u32>) -> Result<Self> {
        if batch.len() != self.points.len() {
            return Err(Error::InvalidCloud(format!(
                "{} batch labels for {} points",
                batch.len(),
                self.points.len()
            )));
        }
        if let Some(&max) = batch.iter().max() {
            let mut seen = vec![false; max as usize + 1];
            for &b in &batch {
                seen[b as usize] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::InvalidCloud(
                    "batch labels are not contiguous from 0".into(),
                ));
            }
        }
        self.batch = Some(batch);
        Ok(self)
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point::new(r[0], r[1], r[2])).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn batch(&self) -> Option<&[u32]> {
        self.batch.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Point::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> Option<(Point, Point)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Reorder points (and labels) by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
            batch: self
                .batch
                .as_ref()
                .map(|b| order.iter().map(|&i| b[i]).collect()),
        }
    }
}

/// Rotation plus translation, acting as `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformJson", into = "TransformJson")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Wire form: row-major rotation and translation.
#[derive(Serialize, Deserialize)]
struct TransformJson {
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

impl TryFrom<TransformJson> for RigidTransform {
    type Error = Error;

    fn try_from(j: TransformJson) -> Result<Self> {
        if j.rotation.len() != 9 || j.translation.len() != 3 {
            return Err(Error::InvalidConfig(
                "transform needs 9 rotation and 3 translation values".into(),
            ));
        }
        let rotation = Matrix3::from_row_slice(&j.rotation);
        let t = Vector3::from_column_slice(&j.translation);
        RigidTransform::new(rotation, t)
    }
}

impl From<RigidTransform> for TransformJson {
    fn from(t: RigidTransform) -> Self {
        let r = &t.rotation;
        Self {
            rotation: (0..3)
                .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
                .collect(),
            translation: t.translation.iter().copied().collect(),
        }
    }
}

/// Tolerance on `‖RᵀR − I‖_F` for a matrix to count as a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(defect <= ORTHONORMAL_TOL) || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "rotation not in SO(3) (orthonormality defect {defect:.3e})"
            )));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidConfig("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation of `angle_deg` degrees about `axis`, followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle_deg: f64, t: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 || angle_deg == 0.0 {
            Matrix3::identity()
        } else {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_deg.to_radians())
                .into_inner()
        };
        Self {
            rotation: rot,
            translation: t,
        }
    }

    /// Random transform: uniform axis, angle uniform in `[0, max_angle_deg]`,
    /// translation uniform in the cube `[-max_trans, max_trans]³`.
    pub fn random<R: Rng>(rng: &mut R, max_angle_deg: f64, max_trans: f64) -> Self {
        let axis = random_unit_vector(rng);
        let angle = rng.random::<f64>() * max_angle_deg;
        let t = Vector3::from_fn(|_, _| (rng.random::<f64>() * 2.0 - 1.0) * max_trans);
        Self::from_axis_angle(axis, angle, t)
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

pub fn random_unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
        batch: cloud.batch.clone(),
    }
}

pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

/// Success thresholds for registration recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessThresholds {
    pub rot_deg: f64,
    pub trans: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            rot_deg: 5.0,
            trans: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationMetrics {
    /// Relative rotation error in degrees.
    pub rre: f64,
    /// Relative translation error in scene units.
    pub rte: f64,
    pub success: bool,
}

/// Geodesic rotation error (degrees) between two rotation matrices.
pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    // atan2 of the skew and trace parts stays accurate near zero, unlike acos.
    let r = a.transpose() * b;
    let sin = 0.5 * nalgebra::Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos = (r.trace() - 1.0) / 2.0;
    sin.atan2(cos).to_degrees()
}

pub fn metrics(
    est: &RigidTransform,
    gt: &RigidTransform,
    thresholds: SuccessThresholds,
) -> RegistrationMetrics {
    let rre = rotation_error_deg(&est.rotation, &gt.rotation);
    let rte = (est.translation - gt.translation).norm();
    RegistrationMetrics {
        rre,
        rte,
        success: rre <= thresholds.rot_deg && rte <= thresholds.trans,
    }
}

/// Fraction of successful registrations; 0 for an empty set.
pub fn registration_recall(results: &[RegistrationMetrics]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|m| m.success).count() as f64 / results.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Point::from_fn(|_, _| rng.random::<f64>() * 4.0 - 2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 20);
        assert_eq!(apply_transform(&c, &RigidTransform::identity()), c);
    }

    #[test]
    fn quarter_turn_about_z() {
        let c = PointCloud::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let t = RigidTransform::from_axis_angle(Vector3::z(), 90.0, Vector3::zeros());
        let out = apply_transform(&c, &t);
        assert!((out.points()[0] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 50);
        let t = RigidTransform::random(&mut rng, 180.0, 3.0);
        let back = apply_transform(&apply_transform(&c, &t), &t.inverse());
        for (a, b) in back.points().iter().zip(c.points()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t1 = RigidTransform::random(&mut rng, 180.0, 2.0);
        let t2 = RigidTransform::random(&mut rng, 180.0, 2.0);
        let c = random_cloud(&mut rng, 30);
        let seq = apply_transform(&apply_transform(&c, &t2), &t1);
        let once = apply_transform(&c, &compose(&t1, &t2));
        for (a, b) in seq.points().iter().zip(once.points()) {
            assert!((a - b).norm() < 1e-12);
        }
        let id = compose(&t1, &t1.inverse());
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        assert_eq!(compose(&RigidTransform::identity(), &t1), t1);
    }

    #[test]
    fn rigidity_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 25);
        let t = RigidTransform::random(&mut rng, 180.0, 5.0);
        let out = apply_transform(&c, &t);
        for i in 0..c.len() {
            for j in 0..i {
                let d0 = (c.points()[i] - c.points()[j]).norm();
                let d1 = (out.points()[i] - out.points()[j]).norm();
                assert!((d0 - d1).abs() <= 1e-12 * d0.max(1.0));
            }
        }
    }

    #[test]
    fn metrics_examples() {
        let gt = RigidTransform::from_axis_angle(Vector3::x(), 30.0, Vector3::new(1.0, 2.0, 3.0));
        let m = metrics(&gt, &gt, SuccessThresholds::default());
        assert!(m.rre.abs() < 1e-6 && m.rte == 0.0 && m.success);

        let tilt = RigidTransform::from_axis_angle(Vector3::z(), 10.0, Vector3::zeros());
        let est = tilt.compose(&gt);
        let est = RigidTransform {
            translation: gt.translation,
            ..est
        };
        let m = metrics(&est, &gt, SuccessThresholds::default());
        assert!((m.rre - 10.0).abs() < 1e-9, "{}", m.rre);

        let shifted = RigidTransform {
            translation: gt.translation + Vector3::new(3.0, 4.0, 0.0),
            ..gt
        };
        let m = metrics(&shifted, &gt, SuccessThresholds::default());
        assert!((m.rte - 5.0).abs() < 1e-12);
        assert!(!m.success);
    }

    #[test]
    fn rre_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = RigidTransform::random(&mut rng, 180.0, 1.0);
            let b = RigidTransform::random(&mut rng, 180.0, 1.0);
            let ab = metrics(&a, &b, SuccessThresholds::default());
            let ba = metrics(&b, &a, SuccessThresholds::default());
            assert!((ab.rre - ba.rre).abs() < 1e-9);
            assert!((0.0..=180.0).contains(&ab.rre));
        }
    }

    #[test]
    fn recall_is_one_for_exact_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ms: Vec<_> = (0..10)
            .map(|_| {
                let t = RigidTransform::random(&mut rng, 90.0, 1.0);
                metrics(&t, &t, SuccessThresholds::default())
            })
            .collect();
        assert_eq!(registration_recall(&ms), 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PointCloud::from_rows(&[[f64::NAN, 0.0, 0.0]]).is_err());
        let c = PointCloud::from_rows(&[[0.0; 3], [1.0; 3]]).unwrap();
        assert!(c.clone().with_batch(vec![0, 2]).is_err());
        assert!(c.with_batch(vec![1, 0]).is_ok());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn transform_json_round_trip() {
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 40.0, Vector3::new(0.5, -1.0, 2.0));
        let s = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&s).unwrap();
        assert!((back.rotation - t.rotation).norm() < 1e-15);
        assert_eq!(back.translation, t.translation);
    }
}
