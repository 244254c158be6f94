//! Run configuration. A TOML file picks a preset (`full` or `desk`) and
//! overrides any subset of keys; `--set key.path=value` flags are applied on
//! top. Unknown keys are rejected.

use std::path::PathBuf;

use ccgen_core::matcher::MatcherConfig;
use ccgen_core::oracle::ToyOracleParams;
use ccgen_core::synthetic::{default_specs, SyntheticTemplateSpec};
use ccgen_models::composition::GeneratorConfig;
use ccgen_models::generator::BaseModelConfig;
use ccgen_models::interpret::ClassifierConfig;
use ccgen_models::vqvae::CodebookConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(CliError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Ingest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// File or directory read by ingestion.
    pub input: Option<PathBuf>,
    /// `jsonl` or `cif`.
    pub format: String,
    /// Abort ingestion on the first bad entry.
    pub strict: bool,
    pub max_atoms: usize,
    pub synthetic: Vec<SyntheticTemplateSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Compositions sampled per pool (initial and after each refinement).
    pub pool_size: usize,
    /// Crystals generated per base model.
    pub generate_count: usize,
    /// Monte-Carlo rounds for the random-pairing adherence baseline.
    pub adherence_trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretConfig {
    pub top_k: usize,
    /// Most frequently used codes to dump environments for.
    pub max_codes: usize,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    pub data: bool,
    pub train_vqvae: bool,
    pub extract: bool,
    pub train_gen: bool,
    pub sample: bool,
    pub filter: bool,
    pub refine: bool,
    pub train_base: bool,
    pub generate: bool,
    pub evaluate: bool,
    pub interpret: bool,
}

impl StageToggles {
    pub fn all(on: bool) -> Self {
        StageToggles {
            data: on,
            train_vqvae: on,
            extract: on,
            train_gen: on,
            sample: on,
            filter: on,
            refine: on,
            train_base: on,
            generate: on,
            evaluate: on,
            interpret: on,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Artifact directory; `--run-dir` and `CCGEN_DATA_DIR` take precedence.
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub vqvae: CodebookConfig,
    pub generator: GeneratorConfig,
    pub sampling: SamplingConfig,
    pub base: BaseModelConfig,
    pub matcher: MatcherConfig,
    pub oracle: ToyOracleParams,
    pub interpret: InterpretConfig,
    pub stages: StageToggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let data = DataConfig {
            source: DataSource::Synthetic,
            input: None,
            format: "jsonl".into(),
            strict: false,
            max_atoms: ccgen_core::io::DEFAULT_MAX_ATOMS,
            synthetic: default_specs(50, 0.05),
        };
        match preset {
            Preset::Full => RunConfig {
                seed: 0,
                paths: PathsConfig::default(),
                data,
                vqvae: CodebookConfig::default(),
                generator: GeneratorConfig::default(),
                sampling: SamplingConfig { pool_size: 10_000, generate_count: 10_000, adherence_trials: 100 },
                base: BaseModelConfig::default(),
                matcher: MatcherConfig::default(),
                oracle: ToyOracleParams::default(),
                interpret: InterpretConfig { top_k: 5, max_codes: 20, classifier: ClassifierConfig::default() },
                stages: StageToggles::all(true),
            },
            Preset::Desk => RunConfig {
                seed: 0,
                paths: PathsConfig::default(),
                data: DataConfig { max_atoms: 8, ..data },
                vqvae: CodebookConfig::desk(),
                generator: GeneratorConfig::desk(),
                sampling: SamplingConfig { pool_size: 300, generate_count: 200, adherence_trials: 100 },
                base: BaseModelConfig::desk(),
                matcher: MatcherConfig::default(),
                oracle: ToyOracleParams::default(),
                interpret: InterpretConfig { top_k: 5, max_codes: 20, classifier: ClassifierConfig::desk() },
                stages: StageToggles::all(true),
            },
        }
    }

    /// Resolves a TOML document (optionally with a top-level `preset` key)
    /// and `key.path=value` overrides against the chosen preset.
    pub fn resolve(toml_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = match toml_text {
            Some(text) => text.parse().map_err(|e| CliError::Config(format!("invalid TOML: {e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset = match user.remove("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(CliError::Config(format!("preset must be a string, found {other}"))),
            None => Preset::Full,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut base, user);
        let config: RunConfig = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: ccgen_models::ModelError| CliError::Config(e.to_string());
        self.vqvae.validate().map_err(wrap)?;
        self.generator.validate().map_err(wrap)?;
        self.base.validate().map_err(wrap)?;
        self.matcher.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for spec in &self.data.synthetic {
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        let model_max = self.vqvae.max_atoms.min(self.generator.max_atoms).min(self.base.max_atoms);
        if self.data.max_atoms == 0 || self.data.max_atoms > model_max {
            return Err(CliError::Config(format!("data.max_atoms ({}) must be in 1..={model_max}, the smallest model max_atoms", self.data.max_atoms)));
        }
        if self.data.source == DataSource::Ingest && self.data.input.is_none() {
            return Err(CliError::Config("data.input is required when data.source = \"ingest\"".into()));
        }
        self.data.format.parse::<ccgen_core::io::IngestFormat>().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sampling.pool_size == 0 || self.sampling.generate_count == 0 {
            return Err(CliError::Config("sampling.pool_size and sampling.generate_count must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// The configuration as echoed into artifacts: everything that affects
    /// results, without the output location.
    pub fn echoed(&self) -> Self {
        RunConfig { paths: PathsConfig::default(), ..self.clone() }
    }

    /// Hex SHA-256 of the canonical JSON form of [`Self::echoed`].
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&self.echoed()).expect("config serialises to JSON");
        hex_digest(&json)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`, where the value is parsed as a TOML value and falls back
/// to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key {path:?}")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override key {k:?} is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
