//! Structural and compositional validity checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crystal::{min_pair_distance, Crystal};
use crate::elements::{electronegativity, oxidation_states};
use crate::scalar::Real;

pub const MIN_VOLUME: f64 = 0.1;
pub const MIN_DISTANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    Volume,
    MinDistance,
    ChargeNeutrality,
    Electronegativity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub structural: bool,
    pub compositional: bool,
    pub reasons: Vec<InvalidReason>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.structural && self.compositional
    }
}

/// Pluggable composition screen over `(atomic number, count)` pairs.
pub trait CompositionChecker {
    /// `Ok(())` when the composition passes, otherwise the failing reason.
    fn check(&self, composition: &[(u8, usize)]) -> Result<(), InvalidReason>;
}

/// Default screen: some assignment of one common oxidation state per element
/// is charge neutral and puts every cation below every anion in Pauling
/// electronegativity. Elemental compositions pass; the electronegativity
/// test is skipped when an element has no tabulated value.
#[derive(Clone, Copy, Debug, Default)]
pub struct OxidationStateChecker;

impl CompositionChecker for OxidationStateChecker {
    fn check(&self, composition: &[(u8, usize)]) -> Result<(), InvalidReason> {
        if composition.len() <= 1 {
            return Ok(());
        }
        let states: Vec<&[i8]> = composition.iter().map(|&(z, _)| oxidation_states(z)).collect();
        if states.iter().any(|s| s.is_empty()) {
            return Err(InvalidReason::ChargeNeutrality);
        }
        let en: Option<Vec<f64>> = composition.iter().map(|&(z, _)| electronegativity(z)).collect();
        let mut neutral_found = false;
        let mut choice = vec![0usize; states.len()];
        loop {
            let charge: i64 = composition.iter().zip(&choice).enumerate().map(|(e, (&(_, n), &c))| states[e][c] as i64 * n as i64).sum();
            if charge == 0 {
                neutral_found = true;
                let passes = match &en {
                    None => true,
                    Some(en) => {
                        let ox = |e: usize| states[e][choice[e]];
                        let max_cation = (0..en.len()).filter(|&e| ox(e) > 0).map(|e| en[e]).fold(f64::NEG_INFINITY, f64::max);
                        let min_anion = (0..en.len()).filter(|&e| ox(e) < 0).map(|e| en[e]).fold(f64::INFINITY, f64::min);
                        max_cation < min_anion
                    }
                };
                if passes {
                    return Ok(());
                }
            }
            // odometer over per-element oxidation-state choices
            let mut k = 0;
            loop {
                if k == choice.len() {
                    return Err(if neutral_found { InvalidReason::Electronegativity } else { InvalidReason::ChargeNeutrality });
                }
                choice[k] += 1;
                if choice[k] < states[k].len() {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
        }
    }
}

/// Element counts sorted by atomic number.
pub fn composition(atomic_numbers: &[u8]) -> Vec<(u8, usize)> {
    let mut m = BTreeMap::new();
    for &z in atomic_numbers {
        *m.entry(z).or_insert(0usize) += 1;
    }
    m.into_iter().collect()
}

/// Composition divided by the gcd of its counts.
pub fn reduced_formula(atomic_numbers: &[u8]) -> Vec<(u8, usize)> {
    let comp = composition(atomic_numbers);
    let g = comp.iter().fold(0, |g, &(_, n)| gcd(g, n));
    comp.into_iter().map(|(z, n)| (z, n / g.max(1))).collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn check_validity_with<F: Real>(c: &Crystal<F>, checker: &dyn CompositionChecker) -> ValidityReport {
    let mut reasons = Vec::new();
    if !(c.volume().abs().as_f64() > MIN_VOLUME) {
        reasons.push(InvalidReason::Volume);
    }
    if !(min_pair_distance(c).as_f64() > MIN_DISTANCE) {
        reasons.push(InvalidReason::MinDistance);
    }
    let structural = reasons.is_empty();
    let compositional = match checker.check(&reduced_formula(c.atomic_numbers())) {
        Ok(()) => true,
        Err(r) => {
            reasons.push(r);
            false
        }
    };
    ValidityReport { structural, compositional, reasons }
}

pub fn check_validity<F: Real>(c: &Crystal<F>) -> ValidityReport {
    check_validity_with(c, &OxidationStateChecker)
}
