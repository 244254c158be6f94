//! Canonical JSON-lines crystal records and a small CIF subset.
//!
//! A record is one JSON object per line:
//!
//! ```text
//! {"lattice":[9 floats, row-major],"cart_coords":[[x,y,z],...],"atomic_numbers":[...],"space_group":225}
//! ```
//!
//! `space_group` is optional. The CIF reader understands cell parameters,
//! an optional space-group number and a single `loop_` over `_atom_site_*`
//! with element symbols (or labels) and fractional coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crystal::Crystal;
use crate::elements;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat3, Vec3};

/// Maximum atoms per cell accepted at ingestion.
pub const DEFAULT_MAX_ATOMS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrystalRecord {
    pub lattice: Vec<f64>,
    pub cart_coords: Vec<[f64; 3]>,
    pub atomic_numbers: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_group: Option<u16>,
}

/// A crystal with its (optional) ingested space-group label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCrystal {
    pub crystal: Crystal<f64>,
    pub space_group: Option<u16>,
}

impl LabeledCrystal {
    pub fn new(crystal: Crystal<f64>, space_group: Option<u16>) -> Self {
        LabeledCrystal { crystal, space_group }
    }

    pub fn unlabeled(crystal: Crystal<f64>) -> Self {
        LabeledCrystal { crystal, space_group: None }
    }
}

impl CrystalRecord {
    pub fn from_crystal(c: &Crystal<f64>, space_group: Option<u16>) -> Self {
        CrystalRecord {
            lattice: c.lattice().to_row_major().to_vec(),
            cart_coords: c.cart_coords().to_vec(),
            atomic_numbers: c.atomic_numbers().iter().map(|&z| z as i64).collect(),
            space_group,
        }
    }

    pub fn to_labeled(&self) -> Result<LabeledCrystal> {
        let lattice = Mat3::from_row_major(&self.lattice)
            .ok_or_else(|| Error::InvalidCrystal(format!("lattice has {} values, expected 9", self.lattice.len())))?;
        let numbers = self
            .atomic_numbers
            .iter()
            .map(|&z| if (1..=100).contains(&z) { Ok(z as u8) } else { Err(Error::InvalidSpecies(z)) })
            .collect::<Result<Vec<u8>>>()?;
        if let Some(sg) = self.space_group {
            if !(1..=230).contains(&sg) {
                return Err(Error::InvalidCrystal(format!("space group {sg} outside 1..=230")));
            }
        }
        Ok(LabeledCrystal { crystal: Crystal::new(lattice, self.cart_coords.clone(), numbers)?, space_group: self.space_group })
    }
}

pub fn to_jsonl_line(c: &LabeledCrystal) -> String {
    serde_json::to_string(&CrystalRecord::from_crystal(&c.crystal, c.space_group)).expect("record serialises")
}

pub fn parse_jsonl_line(line: &str, line_no: usize) -> Result<LabeledCrystal> {
    serde_json::from_str::<CrystalRecord>(line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() }).and_then(|r| r.to_labeled())
}

/// Parses JSON lines; blank lines are skipped. Returns the good records and
/// `(line number, error)` for every bad one.
pub fn parse_jsonl(text: &str) -> (Vec<LabeledCrystal>, Vec<(usize, Error)>) {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_jsonl_line(line, i + 1) {
            Ok(c) => good.push(c),
            Err(e) => bad.push((i + 1, e)),
        }
    }
    (good, bad)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledCrystal>> {
    let text = fs::read_to_string(path)?;
    let (good, mut bad) = parse_jsonl(&text);
    match bad.is_empty() {
        true => Ok(good),
        false => Err(bad.swap_remove(0).1),
    }
}

pub fn write_jsonl(path: &Path, crystals: &[LabeledCrystal]) -> Result<()> {
    let mut out = String::new();
    for c in crystals {
        out.push_str(&to_jsonl_line(c));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Cell vectors from `(a, b, c, α, β, γ)` (Å, degrees) with `a` along x and
/// `b` in the xy-plane.
pub fn lattice_from_parameters(p: [f64; 6]) -> Result<Mat3<f64>> {
    let [a, b, c, al, be, ga] = p;
    let (cal, cbe, cga) = (al.to_radians().cos(), be.to_radians().cos(), ga.to_radians().cos());
    let sga = ga.to_radians().sin();
    let cy = (cal - cbe * cga) / sga;
    let cz2 = 1.0 - cbe * cbe - cy * cy;
    if !(cz2 > 0.0) || a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::DegenerateLattice(format!("cell parameters {p:?} do not form a cell")));
    }
    Ok(Mat3::from_rows([[a, 0.0, 0.0], [b * cga, b * sga, 0.0], [c * cbe, c * cy, c * cz2.sqrt()]]))
}

/// `(a, b, c, α, β, γ)` of a lattice, angles in degrees.
pub fn lattice_parameters(l: &Mat3<f64>) -> [f64; 6] {
    let (r0, r1, r2) = (l.row(0), l.row(1), l.row(2));
    let ang = |u: &Vec3<f64>, v: &Vec3<f64>| (dot(u, v) / (norm(u) * norm(v))).clamp(-1.0, 1.0).acos().to_degrees();
    [norm(&r0), norm(&r1), norm(&r2), ang(&r1, &r2), ang(&r0, &r2), ang(&r0, &r1)]
}

fn cif_number(tok: &str) -> Option<f64> {
    let t = tok.split('(').next()?.trim();
    t.parse().ok()
}

fn tokenize(line: &str) -> Vec<String> {
    let mut toks = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '\'' || c == '"' {
            chars.next();
            let tok: String = chars.by_ref().take_while(|&x| x != c).collect();
            toks.push(tok);
        } else {
            let mut tok = String::new();
            while let Some(&x) = chars.peek() {
                if x.is_whitespace() {
                    break;
                }
                tok.push(x);
                chars.next();
            }
            toks.push(tok);
        }
    }
    toks
}

/// Parses the supported CIF subset into a crystal.
pub fn parse_cif(text: &str) -> Result<LabeledCrystal> {
    let mut params: [Option<f64>; 6] = [None; 6];
    let mut space_group = None;
    let keys = ["_cell_length_a", "_cell_length_b", "_cell_length_c", "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma"];
    let lines: Vec<&str> = text.lines().collect();
    let mut sites: Vec<(u8, Vec3<f64>)> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let toks = tokenize(lines[i]);
        if toks.is_empty() {
            i += 1;
            continue;
        }
        let key = toks[0].to_ascii_lowercase();
        if let Some(k) = keys.iter().position(|&name| name == key) {
            let v = toks.get(1).and_then(|t| cif_number(t));
            params[k] = Some(v.ok_or_else(|| Error::Parse { line: i + 1, msg: format!("bad value for {key}") })?);
        } else if key == "_symmetry_int_tables_number" || key == "_space_group_it_number" {
            space_group = toks.get(1).and_then(|t| t.parse::<u16>().ok());
        } else if key == "loop_" {
            let mut headers = Vec::new();
            let mut j = i + 1;
            while j < lines.len() {
                let t = tokenize(lines[j]);
                match t.first() {
                    Some(h) if h.starts_with('_') => {
                        headers.push(h.to_ascii_lowercase());
                        j += 1;
                    }
                    _ => break,
                }
            }
            let is_atom_loop = headers.iter().any(|h| h == "_atom_site_fract_x");
            let mut rows = Vec::new();
            while j < lines.len() {
                let t = tokenize(lines[j]);
                if t.is_empty() {
                    j += 1;
                    if rows.is_empty() {
                        continue;
                    }
                    break;
                }
                if t[0].starts_with('_') || t[0].eq_ignore_ascii_case("loop_") || t[0].starts_with("data_") {
                    break;
                }
                rows.push((j + 1, t));
                j += 1;
            }
            if is_atom_loop {
                let col = |name: &str| headers.iter().position(|h| h == name);
                let species_col = col("_atom_site_type_symbol").or_else(|| col("_atom_site_label"));
                let (sc, xc, yc, zc) = match (species_col, col("_atom_site_fract_x"), col("_atom_site_fract_y"), col("_atom_site_fract_z"))
                {
                    (Some(s), Some(x), Some(y), Some(z)) => (s, x, y, z),
                    _ => return Err(Error::Parse { line: i + 1, msg: "atom_site loop lacks species or fractional columns".into() }),
                };
                for (ln, row) in rows {
                    if row.len() != headers.len() {
                        return Err(Error::Parse { line: ln, msg: "atom_site row has wrong column count".into() });
                    }
                    let z = elements::atomic_number(&row[sc])
                        .ok_or_else(|| Error::Parse { line: ln, msg: format!("unknown element {}", row[sc]) })?;
                    let f = [xc, yc, zc].map(|c| cif_number(&row[c]));
                    match f {
                        [Some(x), Some(y), Some(zz)] => sites.push((z, [x, y, zz])),
                        _ => return Err(Error::Parse { line: ln, msg: "bad fractional coordinate".into() }),
                    }
                }
            }
            i = j;
            continue;
        }
        i += 1;
    }
    let mut p = [0.0; 6];
    for (k, v) in params.iter().enumerate() {
        p[k] = v.ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {}", keys[k]) })?;
    }
    if sites.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no atom_site loop".into() });
    }
    let lattice = lattice_from_parameters(p)?;
    let frac: Vec<Vec3<f64>> = sites.iter().map(|s| s.1).collect();
    let z = sites.iter().map(|s| s.0).collect();
    Ok(LabeledCrystal { crystal: Crystal::from_fractional(lattice, &frac, z)?, space_group })
}

/// Serialises to the CIF subset (P1 setting, fractional coordinates).
pub fn write_cif(c: &LabeledCrystal, name: &str) -> String {
    let p = lattice_parameters(c.crystal.lattice());
    let mut s = String::new();
    let _ = writeln!(s, "data_{name}");
    for (key, v) in
        ["_cell_length_a", "_cell_length_b", "_cell_length_c", "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma"].iter().zip(p)
    {
        let _ = writeln!(s, "{key} {v:.10}");
    }
    if let Some(sg) = c.space_group {
        let _ = writeln!(s, "_symmetry_Int_Tables_number {sg}");
    }
    s.push_str("loop_\n_atom_site_label\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\n");
    for (k, (f, &z)) in c.crystal.frac_coords().iter().zip(c.crystal.atomic_numbers()).enumerate() {
        let sym = elements::symbol(z).unwrap_or("X");
        let _ = writeln!(s, "{sym}{k} {sym} {:.10} {:.10} {:.10}", f[0], f[1], f[2]);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestFormat {
    Jsonl,
    CifSubset,
}

impl std::str::FromStr for IngestFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(IngestFormat::Jsonl),
            "cif" | "cif-subset" => Ok(IngestFormat::CifSubset),
            other => Err(Error::Config(format!("unknown ingest format {other:?}"))),
        }
    }
}

/// Per-source rejection collected during ingestion.
#[derive(Debug)]
pub struct Rejection {
    pub source: String,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub crystals: Vec<LabeledCrystal>,
    pub rejected: Vec<Rejection>,
}

fn collect_files(path: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().map(|e| e == ext).unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn admit(c: LabeledCrystal, max_atoms: usize) -> Result<LabeledCrystal> {
    if c.crystal.num_atoms() > max_atoms {
        return Err(Error::TooManyAtoms { n: c.crystal.num_atoms(), max: max_atoms });
    }
    Ok(c)
}

/// Reads a file or a directory of files. Invalid entries are reported and
/// skipped, or abort the whole ingestion when `strict` is set. Source files
/// are only read.
pub fn ingest(path: &Path, format: IngestFormat, max_atoms: usize, strict: bool) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let ext = match format {
        IngestFormat::Jsonl => "jsonl",
        IngestFormat::CifSubset => "cif",
    };
    for file in collect_files(path, ext)? {
        let name = file.display().to_string();
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) if !strict => {
                report.rejected.push(Rejection { source: name, error: e.into() });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut entries: Vec<(String, Result<LabeledCrystal>)> = Vec::new();
        match format {
            IngestFormat::Jsonl => {
                for (i, line) in text.lines().enumerate() {
                    if !line.trim().is_empty() {
                        entries.push((format!("{name}:{}", i + 1), parse_jsonl_line(line, i + 1)));
                    }
                }
            }
            IngestFormat::CifSubset => entries.push((name, parse_cif(&text))),
        }
        for (source, parsed) in entries {
            match parsed.and_then(|c| admit(c, max_atoms)) {
                Ok(c) => report.crystals.push(c),
                Err(e) if strict => return Err(e),
                Err(error) => report.rejected.push(Rejection { source, error }),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NACL: &str =
        r#"{"lattice":[5.64,0,0,0,5.64,0,0,0,5.64],"cart_coords":[[0,0,0],[2.82,2.82,2.82]],"atomic_numbers":[11,17],"space_group":225}"#;

    #[test]
    fn three_line_jsonl() {
        let text = format!("{NACL}\n{NACL}\n\n{NACL}\n");
        let (good, bad) = parse_jsonl(&text);
        assert_eq!(good.len(), 3);
        assert!(bad.is_empty());
        assert_eq!(good[0].space_group, Some(225));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let (good, _) = parse_jsonl(NACL);
        let line = to_jsonl_line(&good[0]);
        let (again, _) = parse_jsonl(&line);
        assert_eq!(good, again);
    }

    #[test]
    fn bad_records_are_reported() {
        let text = format!(
            "{NACL}\n{{\"lattice\":[1,0,0],\"cart_coords\":[[0,0,0]],\"atomic_numbers\":[1]}}\n{}\nnot json\n",
            r#"{"lattice":[1,0,0,0,1,0,0,0,1],"cart_coords":[[0,0,0]],"atomic_numbers":[101]}"#
        );
        let (good, bad) = parse_jsonl(&text);
        assert_eq!(good.len(), 1);
        assert_eq!(bad.iter().map(|b| b.0).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(matches!(bad[1].1, Error::InvalidSpecies(101)));
    }

    #[test]
    fn too_many_atoms_rejected() {
        let coords: Vec<[f64; 3]> = (0..25).map(|i| [i as f64 * 0.4, 0.0, 0.0]).collect();
        let c = Crystal::new(Mat3::diag([10.0; 3]), coords, vec![6; 25]).unwrap();
        let dir = tempdir();
        let path = dir.join("big.jsonl");
        write_jsonl(&path, &[LabeledCrystal::unlabeled(c)]).unwrap();
        let report = ingest(&path, IngestFormat::Jsonl, DEFAULT_MAX_ATOMS, false).unwrap();
        assert!(report.crystals.is_empty());
        assert!(matches!(report.rejected[0].error, Error::TooManyAtoms { n: 25, max: 20 }));
        assert!(ingest(&path, IngestFormat::Jsonl, DEFAULT_MAX_ATOMS, true).is_err());
    }

    fn tempdir() -> PathBuf {
        let d = std::env::temp_dir().join(format!("ccgen-io-{}-{:?}", std::process::id(), std::thread::current().id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    const CIF: &str = "data_NaCl
_cell_length_a 5.64(1)
_cell_length_b 5.64
_cell_length_c 5.64
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
_symmetry_Int_Tables_number 225
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
Na1 Na 0.0 0.0 0.0
Cl1 Cl 0.5 0.5 0.5
";

    #[test]
    fn cif_subset_parses() {
        let c = parse_cif(CIF).unwrap();
        assert_eq!(c.space_group, Some(225));
        assert_eq!(c.crystal.atomic_numbers(), &[11, 17]);
        assert!((c.crystal.volume() - 5.64f64.powi(3)).abs() < 1e-9);
    }

    #[test]
    fn cif_round_trip_is_idempotent() {
        let hex = lattice_from_parameters([3.1, 3.1, 5.0, 90.0, 90.0, 120.0]).unwrap();
        let c = Crystal::from_fractional(hex, &[[1.0 / 3.0, 2.0 / 3.0, 0.0], [2.0 / 3.0, 1.0 / 3.0, 0.5]], vec![30, 30]).unwrap();
        let first = parse_cif(&write_cif(&LabeledCrystal::new(c, Some(194)), "x")).unwrap();
        let second = parse_cif(&write_cif(&first, "x")).unwrap();
        assert_eq!(first.space_group, second.space_group);
        assert_eq!(first.crystal.atomic_numbers(), second.crystal.atomic_numbers());
        assert!(first.crystal.lattice().max_abs_diff(second.crystal.lattice()) < 1e-8);
        for (a, b) in first.crystal.cart_coords().iter().zip(second.crystal.cart_coords()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lattice_parameters_round_trip() {
        let p = [3.0, 4.0, 5.0, 80.0, 95.0, 110.0];
        let got = lattice_parameters(&lattice_from_parameters(p).unwrap());
        for (a, b) in got.iter().zip(p) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
