//! 3×3 dense linear algebra: one-sided Jacobi SVD and symmetric eigen-decomposition.

use nalgebra::{Matrix3, Vector3};

/// Singular value decomposition `a = u · diag(s) · vᵀ`, singular values descending.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

const MAX_SWEEPS: usize = 60;

/// One-sided (Hestenes) Jacobi SVD. Column pairs of a working copy are rotated
/// until mutually orthogonal; the accumulated rotations form `v`.
pub fn svd3(a: &Matrix3<f64>) -> Svd3 {
    let mut w = *a;
    let mut v = Matrix3::identity();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha = w.column(p).norm_squared();
            let beta = w.column(q).norm_squared();
            let gamma = w.column(p).dot(&w.column(q));
            if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for r in 0..3 {
                    let x = m[(r, p)];
                    let y = m[(r, q)];
                    m[(r, p)] = c * x - s * y;
                    m[(r, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut idx = [0usize, 1, 2];
    let norms = [w.column(0).norm(), w.column(1).norm(), w.column(2).norm()];
    idx.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = Matrix3::zeros();
    let mut s = Vector3::zeros();
    let mut vs = Matrix3::zeros();
    let scale = norms[idx[0]].max(f64::MIN_POSITIVE);
    let mut rank = 0;
    for (k, &i) in idx.iter().enumerate() {
        s[k] = norms[i];
        vs.set_column(k, &v.column(i));
        if norms[i] > 1e-14 * scale && norms[i] > 0.0 {
            u.set_column(k, &(w.column(i) / norms[i]));
            rank += 1;
        }
    }
    complete_basis(&mut u, rank);
    Svd3 { u, s, v: vs }
}

/// Fill columns `rank..3` of `u` so that it becomes orthonormal.
fn complete_basis(u: &mut Matrix3<f64>, rank: usize) {
    match rank {
        0 => *u = Matrix3::identity(),
        1 => {
            let a: Vector3<f64> = u.column(0).into();
            let probe = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let b = (probe - a * a.dot(&probe)).normalize();
            u.set_column(1, &b);
            u.set_column(2, &a.cross(&b));
        }
        2 => {
            let a: Vector3<f64> = u.column(0).into();
            let b: Vector3<f64> = u.column(1).into();
            u.set_column(2, &a.cross(&b));
        }
        _ => {}
    }
}

/// Eigen-decomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns eigenvalues (unsorted) and eigenvectors as columns.
pub fn sym_eigen3(a: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let mut m = (a + a.transpose()) * 0.5;
    let mut q = Matrix3::identity();
    for _ in 0..MAX_SWEEPS {
        let off = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
        if off <= 1e-30 * m.norm_squared().max(f64::MIN_POSITIVE) {
            break;
        }
        for (p, r) in [(0, 1), (0, 2), (1, 2)] {
            let apr = m[(p, r)];
            if apr == 0.0 {
                continue;
            }
            let theta = (m[(r, r)] - m[(p, p)]) / (2.0 * apr);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut g = Matrix3::identity();
            g[(p, p)] = c;
            g[(r, r)] = c;
            g[(p, r)] = s;
            g[(r, p)] = -s;
            m = g.transpose() * m * g;
            q *= g;
        }
    }
    (Vector3::new(m[(0, 0)], m[(1, 1)], m[(2, 2)]), q)
}
