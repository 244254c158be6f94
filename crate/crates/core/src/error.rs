use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate lattice: {0}")]
    DegenerateLattice(String),
    #[error("invalid species: atomic number {0} outside [1, 100]")]
    InvalidSpecies(i64),
    #[error("invalid crystal: {0}")]
    InvalidCrystal(String),
    #[error("too many atoms: {n} > {max}")]
    TooManyAtoms { n: usize, max: usize },
    #[error("insufficient data: have {have}, need at least {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
