//! Structure matcher: reduced formula, lattice mapping, and a periodic
//! distance fingerprint.
//!
//! Two crystals match when they have the same reduced formula and atom
//! count, some basis of one lattice agrees with the reduced basis of the
//! other within `ltol` and `angle_tol`, and their fingerprints agree entry by
//! entry within `stol·(V/N)^(1/3)`. The fingerprint pools, for every ordered
//! species pair (A, B), the distances from each A atom to its
//! [`FINGERPRINT_NEIGHBORS`] nearest B occurrences, sorted. A fixed count
//! avoids entries flickering across a radial cutoff under small
//! displacements. Relative tolerances are evaluated in both argument orders
//! and AND-combined, so the relation is symmetric.
//!
//! Lattices are compared by searching for a basis rather than by comparing
//! Niggli parameters, because Niggli reduction is discontinuous near its
//! boundary conditions: an fcc primitive cell (60°, 60°, 60°) and a slightly
//! strained copy can reduce to cells with very different angles.

use serde::{Deserialize, Serialize};

use crate::crystal::Crystal;
use crate::error::{Error, Result};
use crate::linalg::{cross, dot, norm, sub3, Mat3, Vec3};
use crate::validity::reduced_formula;

pub const FINGERPRINT_NEIGHBORS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherConfig {
    pub stol: f64,
    /// Degrees.
    pub angle_tol: f64,
    pub ltol: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig { stol: 0.5, angle_tol: 10.0, ltol: 0.3 }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stol > 0.0 && self.angle_tol > 0.0 && self.ltol > 0.0) {
            return Err(Error::Config(format!("matcher tolerances must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Pluggable matcher with a per-crystal precomputed key.
pub trait StructureMatcher {
    type Key;
    fn key(&self, c: &Crystal<f64>) -> Self::Key;
    fn keys_match(&self, a: &Self::Key, b: &Self::Key) -> bool;

    /// Crystals in different buckets never match; the default puts every
    /// crystal in one bucket.
    fn bucket(&self, _c: &Crystal<f64>) -> Vec<(u8, usize)> {
        Vec::new()
    }

    fn matches(&self, a: &Crystal<f64>, b: &Crystal<f64>) -> bool {
        self.keys_match(&self.key(a), &self.key(b))
    }
}

/// Niggli cell as `(a, b, c, α, β, γ)`, lengths in Å, angles in degrees.
pub type CellParameters = [f64; 6];

#[derive(Clone, Debug, PartialEq)]
pub enum MatchKey {
    Regular {
        formula: Vec<(u8, usize)>,
        num_atoms: usize,
        /// Reduced basis (rows).
        basis: Mat3<f64>,
        /// Sorted distances per ordered species pair, in formula order.
        fingerprint: Vec<Vec<f64>>,
        /// `(V/N)^(1/3)`.
        scale: f64,
    },
    /// Crystals too degenerate for a fingerprint match only bitwise copies.
    Degenerate(Crystal<f64>),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FingerprintMatcher {
    pub config: MatcherConfig,
}

impl FingerprintMatcher {
    pub fn new(config: MatcherConfig) -> Self {
        FingerprintMatcher { config }
    }

    /// One direction of the comparison, with tolerances relative to `a`.
    fn directed(&self, a: &MatchKey, b: &MatchKey) -> bool {
        match (a, b) {
            (MatchKey::Degenerate(x), MatchKey::Degenerate(y)) => x == y,
            (
                MatchKey::Regular { formula: fa, num_atoms: na, basis: ba, fingerprint: pa, scale: sa },
                MatchKey::Regular { formula: fb, num_atoms: nb, basis: bb, fingerprint: pb, .. },
            ) => {
                fa == fb
                    && na == nb
                    && lattices_match(ba, bb, self.config.ltol, self.config.angle_tol)
                    && pa.len() == pb.len()
                    && pa
                        .iter()
                        .zip(pb)
                        .all(|(u, v)| u.len() == v.len() && u.iter().zip(v).all(|(x, y)| (x - y).abs() <= self.config.stol * sa))
            }
            _ => false,
        }
    }
}

impl StructureMatcher for FingerprintMatcher {
    type Key = MatchKey;

    fn key(&self, c: &Crystal<f64>) -> MatchKey {
        match regular_key(c) {
            Some(k) => k,
            None => MatchKey::Degenerate(c.clone()),
        }
    }

    fn keys_match(&self, a: &MatchKey, b: &MatchKey) -> bool {
        self.directed(a, b) && self.directed(b, a)
    }

    fn bucket(&self, c: &Crystal<f64>) -> Vec<(u8, usize)> {
        reduced_formula(c.atomic_numbers())
    }
}

pub fn structures_match(a: &Crystal<f64>, b: &Crystal<f64>, config: MatcherConfig) -> bool {
    FingerprintMatcher::new(config).matches(a, b)
}

fn regular_key(c: &Crystal<f64>) -> Option<MatchKey> {
    let n = c.num_atoms();
    let volume = c.volume().abs();
    if n == 0 || !(volume > 1e-6) || !c.lattice().is_finite() {
        return None;
    }
    let scale = (volume / n as f64).cbrt();
    if !interplanar_spacings(c.lattice()).iter().all(|&h| h > 1e-3 * scale) {
        return None;
    }
    let basis = reduce_basis(c.lattice())?;
    let formula = reduced_formula(c.atomic_numbers());
    let mut fingerprint = Vec::new();
    for &(za, _) in &formula {
        for &(zb, _) in &formula {
            fingerprint.push(pair_fingerprint(c, za, zb, scale)?);
        }
    }
    Some(MatchKey::Regular { formula, num_atoms: n, basis, fingerprint, scale })
}

/// Plane spacings `V / |b_j × b_k|` for the three lattice planes.
fn interplanar_spacings(l: &Mat3<f64>) -> Vec3<f64> {
    let v = l.det().abs();
    let r = |i: usize| l.row(i);
    [v / norm(&cross(&r(1), &r(2))), v / norm(&cross(&r(2), &r(0))), v / norm(&cross(&r(0), &r(1)))]
}

fn pair_fingerprint(c: &Crystal<f64>, za: u8, zb: u8, scale: f64) -> Option<Vec<f64>> {
    let m = FINGERPRINT_NEIGHBORS;
    let h = interplanar_spacings(c.lattice());
    let z = c.atomic_numbers();
    let x = c.cart_coords();
    let mut radius = 2.0 * scale;
    loop {
        let reach = h.map(|hk| (radius / hk).ceil() as i32);
        if reach.iter().any(|&r| r > 30) {
            return None;
        }
        let mut pooled = Vec::new();
        let mut enough = true;
        for i in (0..c.num_atoms()).filter(|&i| z[i] == za) {
            let mut d = Vec::new();
            for j in (0..c.num_atoms()).filter(|&j| z[j] == zb) {
                let base = sub3(&x[j], &x[i]);
                for a in -reach[0]..=reach[0] {
                    for b in -reach[1]..=reach[1] {
                        for k in -reach[2]..=reach[2] {
                            if i == j && a == 0 && b == 0 && k == 0 {
                                continue;
                            }
                            let shift = c.lattice().left_mul(&[a as f64, b as f64, k as f64]);
                            let dist = norm(&[base[0] + shift[0], base[1] + shift[1], base[2] + shift[2]]);
                            if dist <= radius {
                                d.push(dist);
                            }
                        }
                    }
                }
            }
            if d.len() < m {
                enough = false;
                break;
            }
            d.sort_by(f64::total_cmp);
            pooled.extend_from_slice(&d[..m]);
        }
        if enough {
            pooled.sort_by(f64::total_cmp);
            return Some(pooled);
        }
        radius *= 1.5;
    }
}

/// Lengths and angles `(a, b, c, α, β, γ)` of a row basis.
pub fn cell_parameters(l: &Mat3<f64>) -> CellParameters {
    let r = [l.row(0), l.row(1), l.row(2)];
    let ang = |i: usize, j: usize| (dot(&r[i], &r[j]) / (norm(&r[i]) * norm(&r[j]))).clamp(-1.0, 1.0).acos().to_degrees();
    [norm(&r[0]), norm(&r[1]), norm(&r[2]), ang(1, 2), ang(0, 2), ang(0, 1)]
}

/// Pairwise (Gauss) reduction of a row basis: repeatedly subtracts the
/// nearest-integer projection of one vector onto another until no vector
/// shortens, then sorts by length. Returns `None` for degenerate input.
pub fn reduce_basis(l: &Mat3<f64>) -> Option<Mat3<f64>> {
    if !l.is_finite() || l.det().abs() <= 1e-12 {
        return None;
    }
    let mut r = [l.row(0), l.row(1), l.row(2)];
    for _ in 0..1000 {
        let mut changed = false;
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let q = (dot(&r[i], &r[j]) / dot(&r[j], &r[j])).round();
                if q != 0.0 {
                    let cand = sub3(&r[i], &r[j].map(|v| v * q));
                    if dot(&cand, &cand) < dot(&r[i], &r[i]) * (1.0 - 1e-12) {
                        r[i] = cand;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            r.sort_by(|a, b| dot(a, a).total_cmp(&dot(b, b)));
            return Some(Mat3::from_rows(r));
        }
    }
    None
}

/// Whether `b` has a basis whose lengths agree with the rows of `a` within
/// `ltol·|a_k|` and whose angles agree within `angle_tol` degrees. Candidate
/// vectors are integer combinations `n·B` with `n ∈ {−2..2}³` of a reduced
/// basis of `b`; a candidate basis must be unimodular (`|det n| = 1`).
pub fn lattices_match(a: &Mat3<f64>, b: &Mat3<f64>, ltol: f64, angle_tol: f64) -> bool {
    let Some(rb) = reduce_basis(b) else { return false };
    let pa = cell_parameters(a);
    let mut cands: Vec<([i32; 3], Vec3<f64>, f64)> = Vec::with_capacity(124);
    for i in -2..=2 {
        for j in -2..=2 {
            for k in -2..=2 {
                if (i, j, k) != (0, 0, 0) {
                    let v = rb.left_mul(&[i as f64, j as f64, k as f64]);
                    cands.push(([i, j, k], v, norm(&v)));
                }
            }
        }
    }
    let slot = |k: usize| -> Vec<&([i32; 3], Vec3<f64>, f64)> { cands.iter().filter(|c| (c.2 - pa[k]).abs() <= ltol * pa[k]).collect() };
    let (s0, s1, s2) = (slot(0), slot(1), slot(2));
    let angle = |x: &([i32; 3], Vec3<f64>, f64), y: &([i32; 3], Vec3<f64>, f64)| (dot(&x.1, &y.1) / (x.2 * y.2)).clamp(-1.0, 1.0).acos().to_degrees();
    for u in &s0 {
        for v in &s1 {
            if (angle(u, v) - pa[5]).abs() > angle_tol {
                continue;
            }
            for w in &s2 {
                if (angle(u, w) - pa[4]).abs() > angle_tol || (angle(v, w) - pa[3]).abs() > angle_tol {
                    continue;
                }
                let (n0, n1, n2) = (u.0, v.0, w.0);
                let det = n0[0] * (n1[1] * n2[2] - n1[2] * n2[1]) - n0[1] * (n1[0] * n2[2] - n1[2] * n2[0]) + n0[2] * (n1[0] * n2[1] - n1[1] * n2[0]);
                if det.abs() == 1 {
                    return true;
                }
            }
        }
    }
    false
}

/// Niggli-reduced cell parameters of a lattice with row basis vectors.
pub fn niggli_parameters(l: &Mat3<f64>) -> Option<CellParameters> {
    let (r0, r1, r2) = (l.row(0), l.row(1), l.row(2));
    let g6 = [dot(&r0, &r0), dot(&r1, &r1), dot(&r2, &r2), 2.0 * dot(&r1, &r2), 2.0 * dot(&r0, &r2), 2.0 * dot(&r0, &r1)];
    let eps = 1e-5 * l.det().abs().powf(2.0 / 3.0);
    let [a, b, c, xi, eta, zeta] = niggli_reduce(g6, eps)?;
    let (la, lb, lc) = (a.sqrt(), b.sqrt(), c.sqrt());
    let ang = |cos: f64| cos.clamp(-1.0, 1.0).acos().to_degrees();
    Some([la, lb, lc, ang(xi / (2.0 * lb * lc)), ang(eta / (2.0 * la * lc)), ang(zeta / (2.0 * la * lb))])
}

/// Křivý–Gruber reduction of `(A, B, C, ξ, η, ζ)` with the tolerance
/// handling of Grosse-Kunstleve, Sauter and Adams.
pub fn niggli_reduce(g: [f64; 6], eps: f64) -> Option<[f64; 6]> {
    let [mut a, mut b, mut c, mut xi, mut eta, mut zeta] = g;
    if !g.iter().all(|v| v.is_finite()) {
        return None;
    }
    let lt = |x: f64, y: f64| x < y - eps;
    let gt = |x: f64, y: f64| y < x - eps;
    let eq = |x: f64, y: f64| !(lt(x, y) || lt(y, x));
    let sgn = |x: f64| {
        if gt(x, 0.0) {
            1
        } else if lt(x, 0.0) {
            -1
        } else {
            0
        }
    };
    for _ in 0..10_000 {
        // N1
        if gt(a, b) || (eq(a, b) && gt(xi.abs(), eta.abs())) {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut xi, &mut eta);
        }
        // N2
        if gt(b, c) || (eq(b, c) && gt(eta.abs(), zeta.abs())) {
            std::mem::swap(&mut b, &mut c);
            std::mem::swap(&mut eta, &mut zeta);
            continue;
        }
        // N3, N4
        let (l, m, n) = (sgn(xi), sgn(eta), sgn(zeta));
        if l * m * n == 1 {
            xi = xi.abs();
            eta = eta.abs();
            zeta = zeta.abs();
        } else {
            xi = -xi.abs();
            eta = -eta.abs();
            zeta = -zeta.abs();
        }
        // N5
        if gt(xi.abs(), b) || (eq(xi, b) && lt(2.0 * eta, zeta)) || (eq(xi, -b) && lt(zeta, 0.0)) {
            let s = xi.signum();
            c = b + c - xi * s;
            eta -= zeta * s;
            xi -= 2.0 * b * s;
            continue;
        }
        // N6
        if gt(eta.abs(), a) || (eq(eta, a) && lt(2.0 * xi, zeta)) || (eq(eta, -a) && lt(zeta, 0.0)) {
            let s = eta.signum();
            c = a + c - eta * s;
            xi -= zeta * s;
            eta -= 2.0 * a * s;
            continue;
        }
        // N7
        if gt(zeta.abs(), a) || (eq(zeta, a) && lt(2.0 * xi, eta)) || (eq(zeta, -a) && lt(eta, 0.0)) {
            let s = zeta.signum();
            b = a + b - zeta * s;
            xi -= eta * s;
            zeta -= 2.0 * a * s;
            continue;
        }
        // N8
        let sum = xi + eta + zeta + a + b;
        if lt(sum, 0.0) || (eq(sum, 0.0) && gt(2.0 * (a + eta) + zeta, 0.0)) {
            c += a + b + xi + eta + zeta;
            xi = 2.0 * b + xi + zeta;
            eta = 2.0 * a + eta + zeta;
            continue;
        }
        return Some([a, b, c, xi, eta, zeta]);
    }
    None
}
