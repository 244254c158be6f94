//! Small fixed-size linear algebra: 3-vectors, 3×3 matrices, symmetric
//! eigendecomposition and a one-sided Jacobi SVD.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub type Vec3<F> = [F; 3];

#[inline]
pub fn dot<F: Real>(a: &Vec3<F>, b: &Vec3<F>) -> F {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm<F: Real>(a: &Vec3<F>) -> F {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub3<F: Real>(a: &Vec3<F>, b: &Vec3<F>) -> Vec3<F> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3<F: Real>(a: &Vec3<F>, b: &Vec3<F>) -> Vec3<F> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3<F: Real>(a: &Vec3<F>, s: F) -> Vec3<F> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross<F: Real>(a: &Vec3<F>, b: &Vec3<F>) -> Vec3<F> {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Mat3<F>(pub [[F; 3]; 3]);

impl<F: Real> Mat3<F> {
    pub fn zeros() -> Self {
        Mat3([[F::zero(); 3]; 3])
    }

    pub fn identity() -> Self {
        Self::diag([F::one(); 3])
    }

    pub fn diag(d: [F; 3]) -> Self {
        let mut m = Self::zeros();
        for i in 0..3 {
            m.0[i][i] = d[i];
        }
        m
    }

    pub fn from_rows(rows: [[F; 3]; 3]) -> Self {
        Mat3(rows)
    }

    pub fn from_row_major(v: &[F]) -> Option<Self> {
        if v.len() != 9 {
            return None;
        }
        let mut m = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = v[3 * i + j];
            }
        }
        Some(m)
    }

    pub fn to_row_major(&self) -> [F; 9] {
        let mut out = [F::zero(); 9];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = self.0[i][j];
            }
        }
        out
    }

    pub fn row(&self, i: usize) -> Vec3<F> {
        self.0[i]
    }

    pub fn col(&self, j: usize) -> Vec3<F> {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn set_col(&mut self, j: usize, c: Vec3<F>) {
        for i in 0..3 {
            self.0[i][j] = c[i];
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] = self.0[j][i];
            }
        }
        t
    }

    pub fn det(&self) -> F {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d == F::zero() || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        let mut inv = Self::zeros();
        inv.0[0][0] = m[1][1] * m[2][2] - m[1][2] * m[2][1];
        inv.0[0][1] = m[0][2] * m[2][1] - m[0][1] * m[2][2];
        inv.0[0][2] = m[0][1] * m[1][2] - m[0][2] * m[1][1];
        inv.0[1][0] = m[1][2] * m[2][0] - m[1][0] * m[2][2];
        inv.0[1][1] = m[0][0] * m[2][2] - m[0][2] * m[2][0];
        inv.0[1][2] = m[0][2] * m[1][0] - m[0][0] * m[1][2];
        inv.0[2][0] = m[1][0] * m[2][1] - m[1][1] * m[2][0];
        inv.0[2][1] = m[0][1] * m[2][0] - m[0][0] * m[2][1];
        inv.0[2][2] = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let s = F::one() / d;
        Some(inv.scale(s))
    }

    pub fn scale(&self, s: F) -> Self {
        let mut out = *self;
        for row in out.0.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        out
    }

    pub fn frobenius(&self) -> F {
        self.0.iter().flat_map(|r| r.iter()).map(|&v| v * v).sum::<F>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flat_map(|r| r.iter()).all(|v| v.is_finite())
    }

    /// Row vector times matrix: `v · M`.
    pub fn left_mul(&self, v: &Vec3<F>) -> Vec3<F> {
        let mut out = [F::zero(); 3];
        for j in 0..3 {
            out[j] = v[0] * self.0[0][j] + v[1] * self.0[1][j] + v[2] * self.0[2][j];
        }
        out
    }

    /// Matrix times column vector: `M · v`.
    pub fn right_mul(&self, v: &Vec3<F>) -> Vec3<F> {
        [dot(&self.0[0], v), dot(&self.0[1], v), dot(&self.0[2], v)]
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        let mut m = F::zero();
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        m
    }

    pub fn cast<G: Real>(&self) -> Mat3<G> {
        let mut out = Mat3::<G>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = G::lit(self.0[i][j].as_f64());
            }
        }
        out
    }
}

impl<F> Index<(usize, usize)> for Mat3<F> {
    type Output = F;
    fn index(&self, (i, j): (usize, usize)) -> &F {
        &self.0[i][j]
    }
}

impl<F> IndexMut<(usize, usize)> for Mat3<F> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        &mut self.0[i][j]
    }
}

impl<F: Real> Mul for Mat3<F> {
    type Output = Mat3<F>;
    fn mul(self, rhs: Mat3<F>) -> Mat3<F> {
        let mut out = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = F::zero();
                for k in 0..3 {
                    acc = acc + self.0[i][k] * rhs.0[k][j];
                }
                out.0[i][j] = acc;
            }
        }
        out
    }
}

impl<F: Real> Add for Mat3<F> {
    type Output = Mat3<F>;
    fn add(self, rhs: Mat3<F>) -> Mat3<F> {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = out.0[i][j] + rhs.0[i][j];
            }
        }
        out
    }
}

impl<F: Real> Sub for Mat3<F> {
    type Output = Mat3<F>;
    fn sub(self, rhs: Mat3<F>) -> Mat3<F> {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = out.0[i][j] - rhs.0[i][j];
            }
        }
        out
    }
}

impl<F: Real> Neg for Mat3<F> {
    type Output = Mat3<F>;
    fn neg(self) -> Mat3<F> {
        self.scale(-F::one())
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matrix whose columns are
/// the matching unit eigenvectors.
pub fn symmetric_eigen<F: Real>(m: &Mat3<F>) -> ([F; 3], Mat3<F>) {
    let mut a = *m;
    let mut v = Mat3::identity();
    for _sweep in 0..64 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let scale = a.frobenius().powi(2);
        if off <= F::tiny() * F::tiny() * scale || off == F::zero() {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == F::zero() {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (F::lit(2.0) * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + F::one()).sqrt());
            let c = F::one() / (t * t + F::one()).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[(k, p)];
                let akq = a[(k, q)];
                a[(k, p)] = c * akp - s * akq;
                a[(k, q)] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[(p, k)];
                let aqk = a[(q, k)];
                a[(p, k)] = c * apk - s * aqk;
                a[(q, k)] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[(k, p)];
                let vkq = v[(k, q)];
                v[(k, p)] = c * vkp - s * vkq;
                v[(k, q)] = s * vkp + c * vkq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = [a[(order[0], order[0])], a[(order[1], order[1])], a[(order[2], order[2])]];
    let mut vecs = Mat3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_col(dst, v.col(src));
    }
    (vals, vecs)
}

/// Singular value decomposition `M = W·diag(σ)·Vᵀ` via one-sided Jacobi
/// orthogonalisation of the columns of `M`.
///
/// Singular values are returned in descending order. The columns of `W` for
/// zero singular values are not meaningful; callers reject singular input.
#[derive(Clone, Copy, Debug)]
pub struct Svd3<F> {
    pub w: Mat3<F>,
    pub sigma: [F; 3],
    pub v: Mat3<F>,
}

pub fn svd3<F: Real>(m: &Mat3<F>) -> Svd3<F> {
    let mut a = *m;
    let mut v = Mat3::identity();
    for _sweep in 0..64 {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let cp = a.col(p);
            let cq = a.col(q);
            let alpha = dot(&cp, &cp);
            let beta = dot(&cq, &cq);
            let gamma = dot(&cp, &cq);
            if gamma == F::zero() || gamma.abs() <= F::epsilon() * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (F::lit(2.0) * gamma);
            let t = zeta.signum() / (zeta.abs() + (F::one() + zeta * zeta).sqrt());
            let c = F::one() / (F::one() + t * t).sqrt();
            let s = c * t;
            for k in 0..3 {
                let akp = a[(k, p)];
                let akq = a[(k, q)];
                a[(k, p)] = c * akp - s * akq;
                a[(k, q)] = s * akp + c * akq;
                let vkp = v[(k, p)];
                let vkq = v[(k, q)];
                v[(k, p)] = c * vkp - s * vkq;
                v[(k, q)] = s * vkp + c * vkq;
            }
        }
        if !rotated {
            break;
        }
    }
    let norms = [norm(&a.col(0)), norm(&a.col(1)), norm(&a.col(2))];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut w = Mat3::zeros();
    let mut vs = Mat3::zeros();
    let mut sigma = [F::zero(); 3];
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        let col = a.col(src);
        let inv = if norms[src] > F::zero() { F::one() / norms[src] } else { F::zero() };
        w.set_col(dst, scale3(&col, inv));
        vs.set_col(dst, v.col(src));
    }
    Svd3 { w, sigma, v: vs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inverse_round_trip() {
        let m = Mat3::from_rows([[2.0, 1.0, 0.0], [0.5, 3.0, 1.0], [0.0, -1.0, 4.0]]);
        let inv = m.inverse().unwrap();
        let id = m * inv;
        assert!(id.max_abs_diff(&Mat3::identity()) < 1e-12);
    }

    #[test]
    fn eigen_of_diagonal_is_sorted() {
        let (vals, _) = symmetric_eigen(&Mat3::diag([1.0, 5.0, 3.0]));
        assert_eq!(vals, [5.0, 3.0, 1.0]);
    }

    #[test]
    fn eigen_reconstructs() {
        let m = Mat3::from_rows([[4.0, 1.0, -2.0], [1.0, 2.0, 0.5], [-2.0, 0.5, 3.0]]);
        let (vals, vecs) = symmetric_eigen(&m);
        let rebuilt = vecs * Mat3::diag(vals) * vecs.transpose();
        assert!(rebuilt.max_abs_diff(&m) < 1e-12);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn svd_reconstructs_and_is_orthogonal() {
        let m = Mat3::from_rows([[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [0.3, -0.7, 1.1]]);
        let s = svd3(&m);
        let rebuilt = s.w * Mat3::diag(s.sigma) * s.v.transpose();
        assert!(rebuilt.max_abs_diff(&m) < 1e-12);
        assert!((s.w.transpose() * s.w).max_abs_diff(&Mat3::identity()) < 1e-12);
        assert!((s.v.transpose() * s.v).max_abs_diff(&Mat3::identity()) < 1e-12);
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2]);
        assert_relative_eq!(s.sigma.iter().product::<f64>(), m.det().abs(), epsilon = 1e-12);
    }

    #[test]
    fn svd_works_in_single_precision() {
        let m = Mat3::<f32>::from_rows([[3.0, 0.1, 0.0], [0.2, 2.0, 0.3], [0.0, 0.1, 1.0]]);
        let s = svd3(&m);
        let rebuilt = s.w * Mat3::diag(s.sigma) * s.v.transpose();
        assert!(rebuilt.max_abs_diff(&m) < 1e-5);
    }
}
