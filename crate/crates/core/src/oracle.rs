//! Stability oracles. The bundled [`ToyOracle`] is a deterministic
//! soft-sphere pair potential that stands in for a learned force field.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crystal::Crystal;
use crate::elements::soft_radius;
use crate::error::{Error, Result};
use crate::linalg::{cross, norm, Mat3, Vec3};
use crate::validity::reduced_formula;

/// Energy above the same-composition reference minimum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullEnergy {
    /// eV/atom.
    pub e_hull: f64,
    /// No reference entry shared the composition; `e_hull` is then 0.
    pub no_reference: bool,
}

pub trait StabilityOracle {
    fn relax(&self, c: &Crystal<f64>) -> Result<Crystal<f64>>;
    fn energy_above_hull(&self, c: &Crystal<f64>) -> Result<HullEnergy>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyOracleParams {
    /// Pair energy scale in eV.
    pub epsilon: f64,
    pub relax_steps: usize,
    /// Initial coordinate-descent step in Å.
    pub step: f64,
}

impl Default for ToyOracleParams {
    fn default() -> Self {
        ToyOracleParams { epsilon: 1.0, relax_steps: 50, step: 0.05 }
    }
}

/// `E = Σ_pairs ε·(1 − d/σ)²` for `d < σ = r_i + r_j`, reported per atom.
#[derive(Clone, Debug, Default)]
pub struct ToyOracle {
    pub params: ToyOracleParams,
    reference_minima: BTreeMap<Vec<(u8, usize)>, f64>,
}

impl ToyOracle {
    pub fn new(params: ToyOracleParams) -> Self {
        ToyOracle { params, reference_minima: BTreeMap::new() }
    }

    /// Oracle whose hull reference is the per-composition minimum over
    /// `references` (energies of the structures as given).
    pub fn with_references(params: ToyOracleParams, references: &[Crystal<f64>]) -> Result<Self> {
        let mut oracle = ToyOracle::new(params);
        for c in references {
            let e = oracle.energy_per_atom(c)?;
            let slot = oracle.reference_minima.entry(reduced_formula(c.atomic_numbers())).or_insert(f64::INFINITY);
            *slot = slot.min(e);
        }
        Ok(oracle)
    }

    pub fn energy_per_atom(&self, c: &Crystal<f64>) -> Result<f64> {
        let c = c.wrapped();
        let ctx = PairContext::new(&c)?;
        let x = c.cart_coords();
        let mut total = 0.0;
        for i in 0..x.len() {
            // every pair is visited from both ends, hence the halving
            total += ctx.atom_energy(x, i, &x[i], self.params.epsilon, true);
        }
        Ok(0.5 * total / x.len() as f64)
    }
}

/// Precomputed radii and image translations for one lattice.
struct PairContext {
    radii: Vec<f64>,
    shifts: Vec<Vec3<f64>>,
    /// Index of the zero translation in `shifts`.
    origin: usize,
}

impl PairContext {
    fn new(c: &Crystal<f64>) -> Result<Self> {
        let l = c.lattice();
        let v = l.det().abs();
        if !(v > 1e-9) {
            return Err(Error::DegenerateLattice("zero cell volume".into()));
        }
        let radii: Vec<f64> = c.atomic_numbers().iter().map(|&z| soft_radius(z)).collect();
        let sigma_max = 2.0 * radii.iter().cloned().fold(0.0, f64::max);
        let reach = spacings(l).map(|h| (sigma_max / h).ceil() as i32 + 1);
        if reach.iter().any(|&r| r > 20) {
            return Err(Error::DegenerateLattice("cell too thin for the pair cutoff".into()));
        }
        let mut shifts = Vec::new();
        let mut origin = 0;
        for a in -reach[0]..=reach[0] {
            for b in -reach[1]..=reach[1] {
                for k in -reach[2]..=reach[2] {
                    if [a, b, k] == [0, 0, 0] {
                        origin = shifts.len();
                    }
                    shifts.push(l.left_mul(&[a as f64, b as f64, k as f64]));
                }
            }
        }
        Ok(PairContext { radii, shifts, origin })
    }

    /// Energy of atom `i` placed at `xi` against all other occurrences.
    /// Periodic copies of `i` itself are included only when `with_self`.
    fn atom_energy(&self, x: &[Vec3<f64>], i: usize, xi: &Vec3<f64>, eps: f64, with_self: bool) -> f64 {
        let mut e = 0.0;
        for (j, xj) in x.iter().enumerate() {
            if j == i && !with_self {
                continue;
            }
            let sigma = self.radii[i] + self.radii[j];
            let d0 = [xi[0] - xj[0], xi[1] - xj[1], xi[2] - xj[2]];
            for (si, s) in self.shifts.iter().enumerate() {
                if j == i && si == self.origin {
                    continue;
                }
                let r = norm(&[d0[0] - s[0], d0[1] - s[1], d0[2] - s[2]]);
                if r < sigma {
                    let t = 1.0 - r / sigma;
                    e += eps * t * t;
                }
            }
        }
        e
    }
}

fn spacings(l: &Mat3<f64>) -> Vec3<f64> {
    let v = l.det().abs();
    let r = |i: usize| l.row(i);
    [v / norm(&cross(&r(1), &r(2))), v / norm(&cross(&r(2), &r(0))), v / norm(&cross(&r(0), &r(1)))]
}

impl StabilityOracle for ToyOracle {
    /// Coordinate descent with a fixed lattice: each sweep tries `±step`
    /// along every Cartesian axis of every atom and keeps strict
    /// improvements; the step halves after a sweep without any move.
    fn relax(&self, c: &Crystal<f64>) -> Result<Crystal<f64>> {
        let mut cur = c.wrapped();
        let ctx = PairContext::new(&cur)?;
        let eps = self.params.epsilon;
        let mut step = self.params.step;
        let mut x = cur.cart_coords().to_vec();
        for _ in 0..self.params.relax_steps {
            let mut moved = false;
            for i in 0..x.len() {
                for k in 0..3 {
                    let e0 = ctx.atom_energy(&x, i, &x[i], eps, false);
                    if e0 == 0.0 {
                        break;
                    }
                    let mut best = (e0, x[i]);
                    for sign in [1.0, -1.0] {
                        let mut trial = x[i];
                        trial[k] += sign * step;
                        let e = ctx.atom_energy(&x, i, &trial, eps, false);
                        if e < best.0 {
                            best = (e, trial);
                        }
                    }
                    if best.0 < e0 {
                        x[i] = best.1;
                        moved = true;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
            cur = cur.with_cart_coords(x.clone())?.wrapped();
            x = cur.cart_coords().to_vec();
        }
        Ok(cur)
    }

    fn energy_above_hull(&self, c: &Crystal<f64>) -> Result<HullEnergy> {
        let e = self.energy_per_atom(c)?;
        if !e.is_finite() {
            return Err(Error::Numerical("non-finite toy energy".into()));
        }
        Ok(match self.reference_minima.get(&reduced_formula(c.atomic_numbers())) {
            Some(&min) => HullEnergy { e_hull: e - min, no_reference: false },
            None => HullEnergy { e_hull: 0.0, no_reference: true },
        })
    }
}
