//! Deterministic desk-scale datasets built from jittered prototype
//! structures with known space groups.
//!
//! Every generated crystal is stored in the symmetric-lattice frame with
//! fractional coordinates wrapped into the cell. Prototype sites are offset
//! away from the cell faces, and the perovskite uses a skewed cell basis,
//! so that same-species atoms never share a Cartesian x coordinate: the
//! canonical (Z, x, y, z) atom order is then stable under small jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crystal::{wrap_unit, Crystal};
use crate::error::{Error, Result};
use crate::io::LabeledCrystal;
use crate::linalg::{Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    RockSalt,
    CsCl,
    Fluorite,
    Perovskite,
    HexagonalAb,
    Rutile,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::RockSalt,
        TemplateKind::CsCl,
        TemplateKind::Fluorite,
        TemplateKind::Perovskite,
        TemplateKind::HexagonalAb,
        TemplateKind::Rutile,
    ];

    pub fn space_group(self) -> u16 {
        match self {
            TemplateKind::RockSalt | TemplateKind::Fluorite => 225,
            TemplateKind::CsCl | TemplateKind::Perovskite => 221,
            TemplateKind::HexagonalAb => 194,
            TemplateKind::Rutile => 136,
        }
    }

    /// Number of distinct species roles (A, B, X, ...).
    pub fn roles(self) -> usize {
        match self {
            TemplateKind::Perovskite => 3,
            _ => 2,
        }
    }

    /// Default species assignments (one atomic number per role); each is
    /// charge balanced under common oxidation states.
    pub fn default_species(self) -> Vec<Vec<u8>> {
        const NA: u8 = 11;
        const MG: u8 = 12;
        const CA: u8 = 20;
        const TI: u8 = 22;
        const O: u8 = 8;
        const CL: u8 = 17;
        match self {
            TemplateKind::RockSalt | TemplateKind::CsCl => vec![vec![NA, CL], vec![MG, O], vec![CA, O]],
            TemplateKind::Fluorite => vec![vec![CA, CL], vec![MG, CL]],
            TemplateKind::Perovskite => vec![vec![CA, TI, O], vec![MG, TI, O]],
            TemplateKind::HexagonalAb => vec![vec![MG, O], vec![CA, O]],
            TemplateKind::Rutile => vec![vec![TI, O]],
        }
    }

    /// Default range of the lattice constant `a` in Å.
    pub fn default_lattice_range(self) -> (f64, f64) {
        match self {
            TemplateKind::RockSalt => (4.3, 5.7),
            TemplateKind::CsCl => (3.1, 3.6),
            TemplateKind::Fluorite => (6.0, 6.6),
            TemplateKind::Perovskite => (3.8, 4.0),
            TemplateKind::HexagonalAb => (3.3, 3.7),
            TemplateKind::Rutile => (4.4, 4.8),
        }
    }

    /// Cell basis and `(role, fractional site)` list for lattice constant `a`.
    fn prototype(self, a: f64) -> (Mat3<f64>, Vec<(usize, Vec3<f64>)>) {
        let fcc = Mat3::from_rows([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]).scale(a);
        match self {
            TemplateKind::RockSalt => (fcc, vec![(0, [0.0; 3]), (1, [0.5; 3])]),
            TemplateKind::CsCl => (Mat3::diag([a; 3]), vec![(0, [0.0; 3]), (1, [0.5; 3])]),
            TemplateKind::Fluorite => (fcc, vec![(0, [0.0; 3]), (1, [0.25; 3]), (1, [0.75; 3])]),
            TemplateKind::Perovskite => {
                // skewed basis (a, b, a + c) of the cubic cell
                let cart: [(usize, Vec3<f64>); 5] =
                    [(0, [0.0, 0.0, 0.0]), (1, [0.5, 0.5, 0.5]), (2, [0.5, 0.5, 0.0]), (2, [0.5, 0.0, 0.5]), (2, [0.0, 0.5, 0.5])];
                let basis = Mat3::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]);
                let inv = basis.inverse().expect("unimodular basis");
                let sites = cart.iter().map(|&(r, x)| (r, inv.left_mul(&x))).collect();
                (basis.scale(a), sites)
            }
            TemplateKind::HexagonalAb => {
                // layered h-BN type AB stacking
                let c = 1.25 * a;
                let s3 = 3f64.sqrt() / 2.0;
                let lattice = Mat3::from_rows([[a, 0.0, 0.0], [-0.5 * a, s3 * a, 0.0], [0.0, 0.0, c]]);
                let (t1, t2) = (1.0 / 3.0, 2.0 / 3.0);
                (lattice, vec![(0, [t1, t2, 0.25]), (0, [t2, t1, 0.75]), (1, [t1, t2, 0.75]), (1, [t2, t1, 0.25])])
            }
            TemplateKind::Rutile => {
                let u = 0.305;
                let lattice = Mat3::diag([a, a, 0.644 * a]);
                (
                    lattice,
                    vec![
                        (0, [0.0, 0.0, 0.0]),
                        (0, [0.5, 0.5, 0.5]),
                        (1, [u, u, 0.0]),
                        (1, [1.0 - u, 1.0 - u, 0.0]),
                        (1, [0.5 + u, 0.5 - u, 0.5]),
                        (1, [0.5 - u, 0.5 + u, 0.5]),
                    ],
                )
            }
        }
    }

    /// Fractional offset maximising the smallest distance of any site to a
    /// cell face (grid search, step 1/24).
    fn face_offset(sites: &[(usize, Vec3<f64>)]) -> Vec3<f64> {
        let margin = |off: &Vec3<f64>| {
            sites
                .iter()
                .flat_map(|(_, f)| (0..3).map(move |k| wrap_unit(f[k] + off[k])))
                .map(|w| w.min(1.0 - w))
                .fold(f64::INFINITY, f64::min)
        };
        let steps = 24;
        let mut best = ([0.0; 3], f64::NEG_INFINITY);
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let off = [i, j, k].map(|v| v as f64 / steps as f64);
                    let m = margin(&off);
                    if m > best.1 + 1e-12 {
                        best = (off, m);
                    }
                }
            }
        }
        best.0
    }
}

/// Recipe for one group of synthetic crystals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTemplateSpec {
    pub template: TemplateKind,
    /// Species assignments to choose from uniformly; one atomic number per role.
    pub species_pool: Vec<Vec<u8>>,
    /// Lattice constant range in Å.
    pub lattice_range: (f64, f64),
    /// Standard deviation of the Cartesian coordinate jitter in Å.
    pub jitter: f64,
    pub count: usize,
}

impl SyntheticTemplateSpec {
    pub fn with_defaults(template: TemplateKind, count: usize, jitter: f64) -> Self {
        SyntheticTemplateSpec {
            template,
            species_pool: template.default_species(),
            lattice_range: template.default_lattice_range(),
            jitter,
            count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lattice_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("bad lattice range {:?}", self.lattice_range)));
        }
        if !(self.jitter >= 0.0) || self.jitter >= 0.15 * lo {
            return Err(Error::Config(format!("jitter {} must be in [0, 0.15·a_min)", self.jitter)));
        }
        if self.species_pool.is_empty() || self.species_pool.iter().any(|s| s.len() != self.template.roles()) {
            return Err(Error::Config(format!("species pool must list {} species per entry", self.template.roles())));
        }
        if self.species_pool.iter().flatten().any(|&z| z == 0 || z > 100) {
            return Err(Error::Config("species pool contains an invalid atomic number".into()));
        }
        Ok(())
    }
}

/// One spec per template kind with `per_template` crystals each.
pub fn default_specs(per_template: usize, jitter: f64) -> Vec<SyntheticTemplateSpec> {
    TemplateKind::ALL.iter().map(|&t| SyntheticTemplateSpec::with_defaults(t, per_template, jitter)).collect()
}

/// Three-family subset (cubic, hexagonal, tetragonal).
pub fn three_family_specs(per_template: usize, jitter: f64) -> Vec<SyntheticTemplateSpec> {
    [TemplateKind::RockSalt, TemplateKind::Perovskite, TemplateKind::HexagonalAb, TemplateKind::Rutile]
        .iter()
        .map(|&t| SyntheticTemplateSpec::with_defaults(t, per_template, jitter))
        .collect()
}

/// One jittered instance of a template.
pub fn build_template(template: TemplateKind, species: &[u8], a: f64, jitter: f64, rng: &mut impl Rng) -> Result<Crystal<f64>> {
    if species.len() != template.roles() {
        return Err(Error::Config("species count does not match template roles".into()));
    }
    let (lattice, sites) = template.prototype(a);
    let offset = TemplateKind::face_offset(&template.prototype(1.0).1);
    let frac: Vec<Vec3<f64>> = sites.iter().map(|(_, f)| [0, 1, 2].map(|k| wrap_unit(f[k] + offset[k]))).collect();
    let numbers = sites.iter().map(|(r, _)| species[*r]).collect();
    let base = Crystal::from_fractional(lattice, &frac, numbers)?.canonical_frame()?;
    if jitter == 0.0 {
        return Ok(base.wrapped());
    }
    let normal = Normal::new(0.0, jitter).map_err(|e| Error::Config(e.to_string()))?;
    let coords = base.cart_coords().iter().map(|x| x.map(|v| v + normal.sample(rng))).collect();
    Ok(base.with_cart_coords(coords)?.wrapped())
}

/// Deterministic dataset: every spec contributes `count` crystals, and the
/// union is shuffled with the same seed.
pub fn make_synthetic_dataset(specs: &[SyntheticTemplateSpec], seed: u64) -> Result<Vec<LabeledCrystal>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for spec in specs {
        spec.validate()?;
        for _ in 0..spec.count {
            let species = &spec.species_pool[rng.random_range(0..spec.species_pool.len())];
            let (lo, hi) = spec.lattice_range;
            let a = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let c = build_template(spec.template, species, a, spec.jitter, &mut rng)?;
            out.push(LabeledCrystal::new(c, Some(spec.template.space_group())));
        }
    }
    // Fisher-Yates with the dataset RNG keeps the order seed-determined
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    Ok(out)
}
