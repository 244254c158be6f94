//! Validity, stability, uniqueness and novelty metrics.
//!
//! Per-crystal flags are computed once. Raw aggregates average the flags
//! over every generated crystal. Headline aggregates count stability,
//! uniqueness and novelty only for valid crystals (`Σ V_i·X_i / n`), since
//! the other flags are meaningless for invalid structures. The compound
//! columns are `S.U.N = Σ S_i·U_i·N_i / n` and `V.S.U.N = Σ V_i·S_i·U_i·N_i / n`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::crystal::Crystal;
use crate::matcher::StructureMatcher;
use crate::oracle::StabilityOracle;
use crate::validity::{check_validity_with, CompositionChecker, InvalidReason, OxidationStateChecker};

pub const STABILITY_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalFlags {
    pub valid: bool,
    pub stable: bool,
    pub unique: bool,
    pub novel: bool,
    pub invalid_reasons: Vec<InvalidReason>,
    /// eV/atom of the relaxed structure, when the oracle succeeded.
    pub e_hull: Option<f64>,
    pub no_reference: bool,
    pub oracle_error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub v: f64,
    pub s: f64,
    pub u: f64,
    pub n: f64,
    pub sun: f64,
    pub vsun: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub flags: Vec<CrystalFlags>,
    /// S, U and N restricted to valid crystals.
    pub headline: Aggregates,
    /// Plain flag means over all crystals.
    pub raw: Aggregates,
}

impl MetricsReport {
    pub fn from_flags(flags: Vec<CrystalFlags>) -> Self {
        let n = flags.len();
        let mean = |f: &dyn Fn(&CrystalFlags) -> bool| {
            if n == 0 {
                0.0
            } else {
                flags.iter().filter(|c| f(c)).count() as f64 / n as f64
            }
        };
        let sun = mean(&|c| c.stable && c.unique && c.novel);
        let vsun = mean(&|c| c.valid && c.stable && c.unique && c.novel);
        let raw = Aggregates { v: mean(&|c| c.valid), s: mean(&|c| c.stable), u: mean(&|c| c.unique), n: mean(&|c| c.novel), sun, vsun };
        let headline = Aggregates {
            v: raw.v,
            s: mean(&|c| c.valid && c.stable),
            u: mean(&|c| c.valid && c.unique),
            n: mean(&|c| c.valid && c.novel),
            sun,
            vsun,
        };
        MetricsReport { count: n, flags, headline, raw }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics report serializes")
    }

    /// One row per crystal.
    pub fn flags_csv(&self) -> String {
        let mut out = String::from("index,valid,stable,unique,novel,e_hull,no_reference\n");
        for (i, f) in self.flags.iter().enumerate() {
            let e = f.e_hull.map(|e| format!("{e:.6}")).unwrap_or_default();
            let _ =
                writeln!(out, "{i},{},{},{},{},{e},{}", f.valid as u8, f.stable as u8, f.unique as u8, f.novel as u8, f.no_reference as u8);
        }
        out
    }

    /// Aggregate table with `headline` and `raw` rows.
    pub fn aggregates_csv(&self) -> String {
        let mut out = String::from("variant,V,S,U,N,S.U.N,V.S.U.N\n");
        for (name, a) in [("headline", &self.headline), ("raw", &self.raw)] {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", a.v, a.s, a.u, a.n, a.sun, a.vsun);
        }
        out
    }
}

/// Flags and aggregates for `generated` against `reference`.
pub fn compute_metrics<M: StructureMatcher>(
    generated: &[Crystal<f64>],
    reference: &[Crystal<f64>],
    oracle: &dyn StabilityOracle,
    matcher: &M,
) -> MetricsReport {
    compute_metrics_with(generated, reference, oracle, matcher, &OxidationStateChecker)
}

pub fn compute_metrics_with<M: StructureMatcher>(
    generated: &[Crystal<f64>],
    reference: &[Crystal<f64>],
    oracle: &dyn StabilityOracle,
    matcher: &M,
    checker: &dyn CompositionChecker,
) -> MetricsReport {
    let gen_keys: Vec<M::Key> = generated.iter().map(|c| matcher.key(c)).collect();
    let ref_keys: Vec<M::Key> = reference.iter().map(|c| matcher.key(c)).collect();
    let bucket = |c: &Crystal<f64>| matcher.bucket(c);
    let mut ref_buckets: HashMap<_, Vec<usize>> = HashMap::new();
    for (j, c) in reference.iter().enumerate() {
        ref_buckets.entry(bucket(c)).or_default().push(j);
    }
    let mut gen_buckets: HashMap<_, Vec<usize>> = HashMap::new();

    let mut flags = Vec::with_capacity(generated.len());
    for (i, c) in generated.iter().enumerate() {
        let validity = check_validity_with(c, checker);
        let (stable, e_hull, no_reference, oracle_error) = match oracle.relax(c).and_then(|r| oracle.energy_above_hull(&r)) {
            Ok(h) => (h.e_hull <= STABILITY_THRESHOLD, Some(h.e_hull), h.no_reference, None),
            Err(e) => (false, None, false, Some(e.to_string())),
        };
        let b = bucket(c);
        let earlier = gen_buckets.entry(b.clone()).or_default();
        let unique = !earlier.iter().any(|&j| matcher.keys_match(&gen_keys[j], &gen_keys[i]));
        earlier.push(i);
        let novel = !ref_buckets.get(&b).is_some_and(|js| js.iter().any(|&j| matcher.keys_match(&gen_keys[i], &ref_keys[j])));
        flags.push(CrystalFlags {
            valid: validity.is_valid(),
            stable,
            unique,
            novel,
            invalid_reasons: validity.reasons,
            e_hull,
            no_reference,
            oracle_error,
        });
    }
    MetricsReport::from_flags(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat3;
    use crate::matcher::FingerprintMatcher;
    use crate::oracle::{ToyOracle, ToyOracleParams};

    fn rock_salt(a: f64, z: [u8; 2]) -> Crystal<f64> {
        let l = Mat3::from_rows([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]).scale(a);
        Crystal::from_fractional(l, &[[0.1; 3], [0.6; 3]], z.to_vec()).unwrap()
    }

    #[test]
    fn four_crystal_fixture() {
        let novel = rock_salt(5.6, [11, 17]);
        let known = rock_salt(4.2, [12, 8]);
        let invalid = Crystal::new(Mat3::diag([5.0; 3]), vec![[0.0; 3], [0.3, 0.0, 0.0]], vec![11, 17]).unwrap();
        let generated = vec![novel.clone(), novel.clone(), invalid, known.clone()];
        let reference = vec![known];
        let oracle = ToyOracle::with_references(ToyOracleParams::default(), &reference).unwrap();
        let r = compute_metrics(&generated, &reference, &oracle, &FingerprintMatcher::default());
        assert_eq!(r.raw.u, 0.75);
        assert_eq!(r.raw.v, 0.75);
        assert_eq!(r.headline.vsun, 0.25);
        assert!(r.flags[0].unique && !r.flags[1].unique);
        assert!(!r.flags[3].novel);
    }

    #[test]
    fn empty_reference_all_novel() {
        let g = vec![rock_salt(5.6, [11, 17]), rock_salt(4.2, [12, 8])];
        let r = compute_metrics(&g, &[], &ToyOracle::default(), &FingerprintMatcher::default());
        assert!(r.flags.iter().all(|f| f.novel));
        assert_eq!(r.raw.n, 1.0);
    }

    #[test]
    fn generated_equal_reference_has_no_novelty() {
        let g = vec![rock_salt(5.6, [11, 17]), rock_salt(4.2, [12, 8])];
        let r = compute_metrics(&g, &g, &ToyOracle::default(), &FingerprintMatcher::default());
        assert_eq!(r.raw.n, 0.0);
        assert_eq!(r.headline.n, 0.0);
    }

    #[test]
    fn csv_shapes() {
        let g = vec![rock_salt(5.6, [11, 17])];
        let r = compute_metrics(&g, &[], &ToyOracle::default(), &FingerprintMatcher::default());
        assert_eq!(r.flags_csv().lines().count(), 2);
        assert_eq!(r.aggregates_csv().lines().count(), 3);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
