//! Per-element reference data for Z = 1..=100.

/// Element symbols indexed by `Z - 1`.
pub const SYMBOLS: [&str; 100] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr",
    "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd",
    "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er",
    "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
];

/// Common oxidation states, indexed by `Z - 1`.
const OXIDATION_STATES: [&[i8]; 100] = [
    &[-1, 1],
    &[],
    &[1],
    &[2],
    &[3],
    &[-4, 4],
    &[-3, 3, 5],
    &[-2],
    &[-1],
    &[],
    &[1],
    &[2],
    &[3],
    &[-4, 4],
    &[-3, 3, 5],
    &[-2, 2, 4, 6],
    &[-1, 1, 3, 5, 7],
    &[],
    &[1],
    &[2],
    &[3],
    &[2, 3, 4],
    &[2, 3, 4, 5],
    &[2, 3, 6],
    &[2, 3, 4, 7],
    &[2, 3],
    &[2, 3],
    &[2],
    &[1, 2],
    &[2],
    &[3],
    &[-4, 2, 4],
    &[-3, 3, 5],
    &[-2, 2, 4, 6],
    &[-1, 1, 3, 5],
    &[2],
    &[1],
    &[2],
    &[3],
    &[4],
    &[5],
    &[4, 6],
    &[4, 7],
    &[3, 4],
    &[3],
    &[2, 4],
    &[1],
    &[2],
    &[3],
    &[2, 4],
    &[-3, 3, 5],
    &[-2, 2, 4, 6],
    &[-1, 1, 3, 5, 7],
    &[2, 4, 6],
    &[1],
    &[2],
    &[3],
    &[3, 4],
    &[3],
    &[3],
    &[3],
    &[3],
    &[2, 3],
    &[3],
    &[3],
    &[3],
    &[3],
    &[3],
    &[3],
    &[3],
    &[3],
    &[4],
    &[5],
    &[4, 6],
    &[4],
    &[4],
    &[3, 4],
    &[2, 4],
    &[1, 3],
    &[1, 2],
    &[1, 3],
    &[2, 4],
    &[3],
    &[-2, 2, 4],
    &[-1, 1],
    &[2],
    &[1],
    &[2],
    &[3],
    &[4],
    &[5],
    &[6],
    &[5],
    &[4],
    &[3],
    &[3],
    &[3],
    &[3],
    &[3],
    &[3],
];

/// Pauling electronegativities, indexed by `Z - 1`; `NaN` where undefined.
const PAULING: [f64; 100] = [
    2.20,
    f64::NAN,
    0.98,
    1.57,
    2.04,
    2.55,
    3.04,
    3.44,
    3.98,
    f64::NAN,
    0.93,
    1.31,
    1.61,
    1.90,
    2.19,
    2.58,
    3.16,
    f64::NAN,
    0.82,
    1.00,
    1.36,
    1.54,
    1.63,
    1.66,
    1.55,
    1.83,
    1.88,
    1.91,
    1.90,
    1.65,
    1.81,
    2.01,
    2.18,
    2.55,
    2.96,
    3.00,
    0.82,
    0.95,
    1.22,
    1.33,
    1.60,
    2.16,
    1.90,
    2.20,
    2.28,
    2.20,
    1.93,
    1.69,
    1.78,
    1.96,
    2.05,
    2.10,
    2.66,
    2.60,
    0.79,
    0.89,
    1.10,
    1.12,
    1.13,
    1.14,
    1.13,
    1.17,
    1.20,
    1.20,
    1.10,
    1.22,
    1.23,
    1.24,
    1.25,
    1.10,
    1.27,
    1.30,
    1.50,
    2.36,
    1.90,
    2.20,
    2.20,
    2.28,
    2.54,
    2.00,
    1.62,
    2.33,
    2.02,
    2.00,
    2.20,
    2.20,
    0.79,
    0.90,
    1.10,
    1.30,
    1.50,
    1.38,
    1.36,
    1.28,
    1.13,
    1.28,
    1.30,
    1.30,
    1.30,
    1.30,
];

/// Soft-sphere radii in Å used by the toy stability oracle, indexed by
/// `Z - 1`. Roughly 0.8× typical ionic/covalent radii so that ordered
/// reference structures sit outside the repulsive range.
const SOFT_RADII: [f64; 100] = [
    0.25, 0.25, 0.60, 0.30, 0.35, 0.45, 0.55, 0.95, 1.00, 0.50, 0.80, 0.60, 0.45, 0.35, 0.35, 1.30, 1.40, 0.70, 1.10, 0.85, 0.60, 0.50,
    0.50, 0.50, 0.55, 0.55, 0.55, 0.55, 0.60, 0.60, 0.50, 0.45, 0.45, 1.45, 1.55, 0.80, 1.20, 0.95, 0.75, 0.60, 0.55, 0.50, 0.50, 0.50,
    0.55, 0.70, 0.90, 0.75, 0.65, 0.55, 0.60, 1.65, 1.75, 0.90, 1.35, 1.10, 0.85, 0.80, 0.80, 0.80, 0.80, 0.80, 0.80, 0.75, 0.75, 0.75,
    0.75, 0.70, 0.70, 0.70, 0.70, 0.60, 0.55, 0.50, 0.50, 0.50, 0.50, 0.55, 0.70, 0.80, 0.70, 0.95, 0.80, 0.80, 0.60, 0.70, 1.45, 1.15,
    0.90, 0.75, 0.70, 0.70, 0.70, 0.70, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75,
];

fn index(z: u8) -> Option<usize> {
    (1..=100).contains(&z).then(|| z as usize - 1)
}

pub fn symbol(z: u8) -> Option<&'static str> {
    index(z).map(|i| SYMBOLS[i])
}

/// Atomic number for an element symbol; case-insensitive on the first
/// letter and ignoring trailing charge or label characters (`"Na1+"`).
pub fn atomic_number(symbol: &str) -> Option<u8> {
    let letters: String = symbol.chars().take_while(|c| c.is_ascii_alphabetic()).take(2).collect();
    let try_match = |s: &str| SYMBOLS.iter().position(|&e| e.eq_ignore_ascii_case(s)).map(|i| i as u8 + 1);
    if letters.len() == 2 {
        if let Some(z) = try_match(&letters) {
            return Some(z);
        }
    }
    letters.get(..1).and_then(try_match)
}

pub fn oxidation_states(z: u8) -> &'static [i8] {
    index(z).map(|i| OXIDATION_STATES[i]).unwrap_or(&[])
}

pub fn electronegativity(z: u8) -> Option<f64> {
    index(z).map(|i| PAULING[i]).filter(|v| v.is_finite())
}

pub fn soft_radius(z: u8) -> f64 {
    index(z).map(|i| SOFT_RADII[i]).unwrap_or(1.0)
}
