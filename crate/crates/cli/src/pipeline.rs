//! Stage orchestration. Every stage reads its inputs from the run directory
//! and writes its outputs atomically, so a run can stop after any stage and
//! resume later with identical results. Randomness comes from per-stage
//! seeds derived from the run seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ccgen_core::io::{ingest, parse_jsonl_line, to_jsonl_line, IngestFormat, LabeledCrystal};
use ccgen_core::matcher::FingerprintMatcher;
use ccgen_core::metrics::{compute_metrics, MetricsReport};
use ccgen_core::oracle::ToyOracle;
use ccgen_core::synthetic::make_synthetic_dataset;
use ccgen_core::{Codebook, Crystal, CrystalFamily};
use ccgen_models::checkpoint::Checkpoint;
use ccgen_models::composition::{
    extract_latent_matrices, filter_vsun, refine_generator, train_composition_generator, Composition, CompositionGenerator, FilterReport,
    LatentMatrix,
};
use ccgen_models::generator::{generate, train_base_model, BaseModel};
use ccgen_models::interpret::{
    assign_codes, family_profiles, multiset_adherence, random_pairing_baseline, top_k_environments, train_symmetry_classifier,
};
use ccgen_models::vqvae::{train_three_stage, VqVae};
use ccgen_models::{derive_seed, ModelError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hex_digest, DataSource, RunConfig};
use crate::error::{CliError, Result};

/// Default run directory when neither `--run-dir`, `paths.run_dir` nor this
/// variable is set.
pub const DATA_DIR_ENV: &str = "CCGEN_DATA_DIR";
pub const DEFAULT_RUN_DIR: &str = "ccgen-run";

/// Reference accuracies of the full-scale classifier, recorded alongside the
/// desk-scale numbers but not expected to be reproduced.
pub const REFERENCE_SPACE_GROUP_ACCURACY: f64 = 0.6711;
pub const REFERENCE_FAMILY_ACCURACY: f64 = 0.7737;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    TrainVqvae,
    Extract,
    TrainGen,
    Sample,
    Filter,
    Refine,
    TrainBase,
    Generate,
    Evaluate,
    Interpret,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Data,
        Stage::TrainVqvae,
        Stage::Extract,
        Stage::TrainGen,
        Stage::Sample,
        Stage::Filter,
        Stage::Refine,
        Stage::TrainBase,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Interpret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::TrainVqvae => "train-vqvae",
            Stage::Extract => "extract",
            Stage::TrainGen => "train-gen",
            Stage::Sample => "sample",
            Stage::Filter => "filter",
            Stage::Refine => "refine",
            Stage::TrainBase => "train-base",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Interpret => "interpret",
        }
    }

    pub fn enabled(self, config: &RunConfig) -> bool {
        let t = &config.stages;
        match self {
            Stage::Data => t.data,
            Stage::TrainVqvae => t.train_vqvae,
            Stage::Extract => t.extract,
            Stage::TrainGen => t.train_gen,
            Stage::Sample => t.sample,
            Stage::Filter => t.filter,
            Stage::Refine => t.refine,
            Stage::TrainBase => t.train_base,
            Stage::Generate => t.generate,
            Stage::Evaluate => t.evaluate,
            Stage::Interpret => t.interpret,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Resumable progress record, `state.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_sha256: String,
    pub completed: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub stage: Stage,
    pub description: String,
}

/// `MANIFEST.json`: every emitted file with its digest and producer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub files: Vec<ManifestEntry>,
}

/// Stages run by one invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub executed: Vec<Stage>,
    pub already_complete: Vec<Stage>,
    pub disabled: Vec<Stage>,
}

pub const STATE_FILE: &str = "state.json";
pub const MANIFEST_FILE: &str = "MANIFEST.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Picks the run directory: explicit flag, then `paths.run_dir`, then the
/// environment variable, then `./ccgen-run`.
pub fn resolve_run_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.paths.run_dir.clone())
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR))
}

/// A run directory bound to one resolved configuration.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    digest: String,
    state: RunState,
    manifest: Manifest,
}

impl Run {
    /// Opens (or creates) `dir`. An existing state written under a different
    /// configuration is a configuration error unless `fresh` is set, in
    /// which case earlier artifacts are removed first.
    pub fn open(config: RunConfig, dir: &Path, fresh: bool) -> Result<Self> {
        config.validate()?;
        let digest = config.digest();
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create run directory {}: {e}", dir.display())))?;
        let state_path = dir.join(STATE_FILE);
        let mut state: RunState = match state_path.exists() {
            true => read_json(&state_path).map_err(|e| CliError::Config(format!("unreadable {STATE_FILE}: {e}")))?,
            false => RunState::default(),
        };
        let mut manifest: Manifest = match dir.join(MANIFEST_FILE).exists() {
            true => read_json(&dir.join(MANIFEST_FILE)).map_err(|e| CliError::Config(format!("unreadable {MANIFEST_FILE}: {e}")))?,
            false => Manifest::default(),
        };
        let foreign = !state.config_sha256.is_empty() && state.config_sha256 != digest;
        if foreign && !fresh {
            return Err(CliError::Config(format!(
                "{} holds a run with config {}; current config is {digest} (use --fresh to discard it)",
                dir.display(),
                state.config_sha256
            )));
        }
        if fresh {
            for f in &manifest.files {
                let _ = fs::remove_file(dir.join(&f.path));
            }
            for f in [STATE_FILE, MANIFEST_FILE, RESOLVED_CONFIG_FILE] {
                let _ = fs::remove_file(dir.join(f));
            }
            state = RunState::default();
            manifest = Manifest::default();
        }
        state.config_sha256 = digest.clone();
        manifest.config_sha256 = digest.clone();
        Ok(Run { config, dir: dir.to_path_buf(), digest, state, manifest })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Runs every enabled stage that has not completed yet, in order,
    /// stopping after `stop_after` if given.
    pub fn run_pipeline(&mut self, stop_after: Option<Stage>) -> Result<PipelineReport> {
        let mut report = PipelineReport::default();
        for stage in Stage::ALL {
            if !stage.enabled(&self.config) {
                report.disabled.push(stage);
            } else if self.state.completed.contains(&stage) {
                report.already_complete.push(stage);
            } else {
                self.run_stage(stage)?;
                report.executed.push(stage);
            }
            if Some(stage) == stop_after {
                break;
            }
        }
        Ok(report)
    }

    /// Runs one stage regardless of toggles and completion state.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        self.write_resolved_config()?;
        let outputs = match stage {
            Stage::Data => self.stage_data(),
            Stage::TrainVqvae => self.stage_train_vqvae(),
            Stage::Extract => self.stage_extract(),
            Stage::TrainGen => self.stage_train_gen(),
            Stage::Sample => self.stage_sample(),
            Stage::Filter => self.stage_filter(),
            Stage::Refine => self.stage_refine(),
            Stage::TrainBase => self.stage_train_base(),
            Stage::Generate => self.stage_generate(),
            Stage::Evaluate => self.stage_evaluate(),
            Stage::Interpret => self.stage_interpret(),
        }
        .map_err(|e| match e {
            CliError::Stage { msg, .. } => CliError::Stage { stage: stage.name().to_string(), msg },
            config => config,
        })?;
        self.record(stage, outputs)
    }

    fn write_resolved_config(&mut self) -> Result<()> {
        let text = format!("# config sha256 {}\n{}", self.digest, self.config.echoed().to_toml());
        let path = self.dir.join(RESOLVED_CONFIG_FILE);
        if fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            write_atomic(&path, text.as_bytes()).map_err(|e| CliError::stage("config", e))?;
        }
        Ok(())
    }

    fn record(&mut self, stage: Stage, outputs: Vec<(String, &'static str)>) -> Result<()> {
        let io = |e: std::io::Error| CliError::stage(stage.name(), e);
        self.manifest.files.retain(|f| f.stage != stage && !outputs.iter().any(|(p, _)| *p == f.path));
        for (path, description) in outputs {
            let bytes = fs::read(self.dir.join(&path)).map_err(io)?;
            self.manifest.files.push(ManifestEntry {
                path,
                sha256: hex_digest(&bytes),
                bytes: bytes.len() as u64,
                stage,
                description: description.to_string(),
            });
        }
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        if !self.state.completed.contains(&stage) {
            self.state.completed.push(stage);
            self.state.completed.sort();
        }
        write_atomic(&self.dir.join(MANIFEST_FILE), &pretty(&self.manifest)).map_err(io)?;
        write_atomic(&self.dir.join(STATE_FILE), &pretty(&self.state)).map_err(io)?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn seed(&self, stream: &str) -> u64 {
        derive_seed(self.config.seed, stream)
    }

    fn rng(&self, stream: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream))
    }

    /// Report body with the configuration echo.
    fn report(&self, body: serde_json::Value) -> Vec<u8> {
        pretty(&json!({ "config_sha256": self.digest, "config": self.config.echoed(), "report": body }))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes).map_err(|e| CliError::stage("write", format!("{name}: {e}")))
    }

    fn provenance(&self, stage: Stage) -> String {
        format!("{}:config-sha256={}", stage.name(), self.digest)
    }

    fn save_checkpoint(&self, name: &str, mut ck: Checkpoint, stage: Stage) -> Result<()> {
        ck.provenance.push(self.provenance(stage));
        ck.save(&self.path(name)).map_err(|e| CliError::stage(stage.name(), e))
    }

    fn load_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.path(name)).map_err(|e| missing(name, e))
    }

    fn load_dataset(&self) -> Result<Vec<LabeledCrystal>> {
        let text = fs::read_to_string(self.path(DATASET)).map_err(|e| missing(DATASET, e))?;
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| parse_jsonl_line(l, i + 1).map_err(|e| missing(DATASET, e))).collect()
    }

    fn load_crystals(&self) -> Result<Vec<Crystal<f64>>> {
        Ok(self.load_dataset()?.into_iter().map(|l| l.crystal).collect())
    }

    fn load_vqvae(&self) -> Result<VqVae> {
        VqVae::from_checkpoint(&self.load_checkpoint(VQVAE)?).map_err(|e| missing(VQVAE, e))
    }

    fn load_codebook(&self, vq: &VqVae) -> Result<Codebook<f32>> {
        vq.codebook().map_err(|e| missing(VQVAE, e))
    }

    fn reference_tools(&self) -> Result<(Vec<Crystal<f64>>, ToyOracle, FingerprintMatcher)> {
        let reference = self.load_crystals()?;
        let oracle = ToyOracle::with_references(self.config.oracle, &reference).map_err(|e| missing(DATASET, e))?;
        Ok((reference, oracle, FingerprintMatcher::new(self.config.matcher)))
    }

    fn stage_data(&mut self) -> Result<Vec<(String, &'static str)>> {
        let cfg = &self.config.data;
        let (dataset, rejected) = match cfg.source {
            DataSource::Synthetic => {
                let all = make_synthetic_dataset(&cfg.synthetic, self.seed("data")).map_err(|e| CliError::stage("data", e))?;
                let (keep, drop): (Vec<_>, Vec<_>) = all.into_iter().partition(|c| c.crystal.num_atoms() <= cfg.max_atoms);
                let rejected: Vec<_> =
                    drop.iter().enumerate().map(|(i, c)| json!({ "source": format!("synthetic:{i}"), "error": format!("{} atoms", c.crystal.num_atoms()) })).collect();
                (keep, rejected)
            }
            DataSource::Ingest => {
                let input = cfg.input.as_ref().ok_or_else(|| CliError::Config("data.input is not set".into()))?;
                let format: IngestFormat = cfg.format.parse().map_err(|e: ccgen_core::Error| CliError::Config(e.to_string()))?;
                let report = ingest(input, format, cfg.max_atoms, cfg.strict).map_err(|e| CliError::stage("data", e))?;
                let rejected = report.rejected.iter().map(|r| json!({ "source": r.source, "error": r.error.to_string() })).collect();
                (report.crystals, rejected)
            }
        };
        if dataset.is_empty() {
            return Err(CliError::stage("data", "dataset is empty"));
        }
        let mut lines = String::new();
        for c in &dataset {
            lines.push_str(&to_jsonl_line(c));
            lines.push('\n');
        }
        self.write(DATASET, lines.as_bytes())?;
        let mut by_group: BTreeMap<String, usize> = BTreeMap::new();
        let mut by_family: BTreeMap<String, usize> = BTreeMap::new();
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &dataset {
            let sg = c.space_group.map(|s| s.to_string()).unwrap_or_else(|| "unlabeled".into());
            *by_group.entry(sg).or_default() += 1;
            let fam = c.space_group.and_then(CrystalFamily::from_space_group).map(|f| f.name()).unwrap_or("unlabeled");
            *by_family.entry(fam.to_string()).or_default() += 1;
            *sizes.entry(c.crystal.num_atoms()).or_default() += 1;
        }
        let body = json!({
            "count": dataset.len(),
            "rejected": rejected,
            "space_groups": by_group,
            "families": by_family,
            "atom_counts": sizes,
        });
        self.write(DATA_REPORT, &self.report(body))?;
        Ok(vec![(DATASET.into(), "canonical JSON-lines dataset"), (DATA_REPORT.into(), "dataset summary and ingestion rejections")])
    }

    fn stage_train_vqvae(&mut self) -> Result<Vec<(String, &'static str)>> {
        let crystals = self.load_crystals()?;
        let (vq, log) = train_three_stage(&crystals, self.config.vqvae.clone(), self.seed("train-vqvae")).map_err(|e| CliError::stage("train-vqvae", e))?;
        let matches = vq.reconstruct_and_match(&crystals, self.config.matcher).map_err(|e| CliError::stage("train-vqvae", e))?;
        let ratio = matches.iter().filter(|&&m| m).count() as f64 / matches.len() as f64;
        let ck = vq.to_checkpoint(vec![]).map_err(|e| CliError::stage("train-vqvae", e))?;
        self.save_checkpoint(VQVAE, ck, Stage::TrainVqvae)?;
        let body = json!({
            "num_parameters": vq.num_parameters(),
            "training_set_size": crystals.len(),
            "reconstruction_match_ratio": ratio,
            "training_log": log,
        });
        self.write(VQVAE_REPORT, &self.report(body))?;
        Ok(vec![(VQVAE.into(), "concept VQ-VAE checkpoint"), (VQVAE_REPORT.into(), "training losses and reconstruction match ratio")])
    }

    fn stage_extract(&mut self) -> Result<Vec<(String, &'static str)>> {
        let crystals = self.load_crystals()?;
        let vq = self.load_vqvae()?;
        let cb = self.load_codebook(&vq)?;
        let latents = extract_latent_matrices(&crystals, &vq).map_err(|e| CliError::stage("extract", e))?;
        let codes = latents
            .iter()
            .map(|l| Composition::from_latents(l.z.clone(), &cb).map(|c| c.code_indices))
            .collect::<Result<Vec<_>, ModelError>>()
            .map_err(|e| CliError::stage("extract", e))?;
        let mut usage = vec![0usize; cb.len()];
        for &t in codes.iter().flatten() {
            usage[t] += 1;
        }
        self.write(LATENTS, &compact(&latents))?;
        let body = json!({ "codes": codes, "usage": usage, "codes_used": usage.iter().filter(|&&u| u > 0).count() });
        self.write(CODES, &self.report(body))?;
        Ok(vec![(LATENTS.into(), "pre-quantisation latent matrices of the dataset"), (CODES.into(), "per-atom code indices and code usage")])
    }

    fn load_latents(&self) -> Result<Vec<LatentMatrix>> {
        read_json(&self.path(LATENTS)).map_err(|e| missing(LATENTS, e))
    }

    fn stage_train_gen(&mut self) -> Result<Vec<(String, &'static str)>> {
        let latents = self.load_latents()?;
        let (g, losses) =
            train_composition_generator(&latents, self.config.generator.clone(), self.seed("train-gen")).map_err(|e| CliError::stage("train-gen", e))?;
        let ck = g.to_checkpoint().map_err(|e| CliError::stage("train-gen", e))?;
        self.save_checkpoint(GENERATOR, ck, Stage::TrainGen)?;
        self.write(GENERATOR_REPORT, &self.report(json!({ "epoch_losses": losses })))?;
        Ok(vec![(GENERATOR.into(), "composition generator checkpoint"), (GENERATOR_REPORT.into(), "composition generator training losses")])
    }

    fn load_generator(&self, name: &str) -> Result<CompositionGenerator> {
        CompositionGenerator::from_checkpoint(&self.load_checkpoint(name)?).map_err(|e| missing(name, e))
    }

    fn sample_pool(&self, g: &CompositionGenerator, round: usize, stage: Stage) -> Result<Vec<Composition>> {
        let vq = self.load_vqvae()?;
        let cb = self.load_codebook(&vq)?;
        let mut rng = self.rng(&format!("sample-{round}"));
        g.sample_compositions(self.config.sampling.pool_size, g.size_sampler(), &cb, &mut rng).map_err(|e| CliError::stage(stage.name(), e))
    }

    fn stage_sample(&mut self) -> Result<Vec<(String, &'static str)>> {
        let g = self.load_generator(GENERATOR)?;
        let pool = self.sample_pool(&g, 0, Stage::Sample)?;
        self.write(&pool_file(0), &jsonl(&pool))?;
        Ok(vec![(pool_file(0), "compositions sampled from the unrefined generator")])
    }

    fn filter_pool(&self, round: usize, stage: Stage) -> Result<(Vec<Composition>, FilterReport)> {
        let pool: Vec<Composition> = read_jsonl(&self.path(&pool_file(round)))?;
        let vq = self.load_vqvae()?;
        let (reference, oracle, matcher) = self.reference_tools()?;
        filter_vsun(&pool, &vq, &reference, &oracle, &matcher).map_err(|e| CliError::stage(stage.name(), e))
    }

    fn write_filter(&self, round: usize, qualified: &[Composition], report: &FilterReport) -> Result<()> {
        self.write(&filtered_file(round), &jsonl(qualified))?;
        let body = json!({
            "round": round,
            "qualified_fraction": report.qualified_fraction(),
            "filter": report,
        });
        self.write(&filter_report_file(round), &self.report(body))
    }

    fn stage_filter(&mut self) -> Result<Vec<(String, &'static str)>> {
        let (qualified, report) = self.filter_pool(0, Stage::Filter)?;
        self.write_filter(0, &qualified, &report)?;
        Ok(vec![(filtered_file(0), "qualified (V.S.U.N) compositions of the first pool"), (filter_report_file(0), "filter verdicts for the first pool")])
    }

    fn stage_refine(&mut self) -> Result<Vec<(String, &'static str)>> {
        let mut g = self.load_generator(GENERATOR)?;
        let base_report: serde_json::Value = read_json(&self.path(&filter_report_file(0)))?;
        let unrefined = base_report["report"]["qualified_fraction"].as_f64().ok_or_else(|| missing(&filter_report_file(0), "no qualified_fraction"))?;
        let mut rounds = Vec::new();
        let mut outputs = Vec::new();
        let mut refined = None;
        for round in 1..=self.config.generator.refine_rounds {
            let qualified: Vec<Composition> = read_jsonl(&self.path(&filtered_file(round - 1)))?;
            match refine_generator(&mut g, &qualified, self.seed(&format!("refine-{round}"))) {
                Err(ModelError::RefinementSkipped) => {
                    rounds.push(json!({ "round": round, "skipped": true, "training_set": 0 }));
                    break;
                }
                Err(e) => return Err(CliError::stage("refine", e)),
                Ok(losses) => {
                    let pool = self.sample_pool(&g, round, Stage::Refine)?;
                    self.write(&pool_file(round), &jsonl(&pool))?;
                    let (q, report) = self.filter_pool(round, Stage::Refine)?;
                    self.write_filter(round, &q, &report)?;
                    outputs.push((pool_file(round), "compositions sampled from the refined generator"));
                    outputs.push((filtered_file(round), "qualified compositions of a refined pool"));
                    outputs.push((filter_report_file(round), "filter verdicts for a refined pool"));
                    refined = Some(report.qualified_fraction());
                    rounds.push(json!({
                        "round": round,
                        "skipped": false,
                        "training_set": qualified.len(),
                        "epoch_losses": losses,
                        "qualified_fraction": report.qualified_fraction(),
                    }));
                }
            }
        }
        let ck = g.to_checkpoint().map_err(|e| CliError::stage("refine", e))?;
        self.save_checkpoint(GENERATOR_REFINED, ck, Stage::Refine)?;
        let body = json!({
            "unrefined_qualified_fraction": unrefined,
            "refined_qualified_fraction": refined,
            "rounds": rounds,
        });
        self.write(REFINE_REPORT, &self.report(body))?;
        outputs.push((GENERATOR_REFINED.into(), "composition generator after refinement"));
        outputs.push((REFINE_REPORT.into(), "qualified fraction before and after refinement"));
        Ok(outputs)
    }

    fn stage_train_base(&mut self) -> Result<Vec<(String, &'static str)>> {
        let crystals = self.load_crystals()?;
        let latents = self.load_latents()?;
        let vq = self.load_vqvae()?;
        let cb = self.load_codebook(&vq)?;
        let conditions = latents
            .iter()
            .map(|l| Composition::from_latents(l.z.clone(), &cb).map(|c| c.e))
            .collect::<Result<Vec<_>, ModelError>>()
            .map_err(|e| CliError::stage("train-base", e))?;
        let err = |e| CliError::stage("train-base", e);
        let (cond, cond_losses) =
            train_base_model(&crystals, Some(&conditions), self.config.base.clone(), self.seed("train-base-conditional")).map_err(err)?;
        self.save_checkpoint(BASE_CONDITIONAL, cond.to_checkpoint().map_err(err)?, Stage::TrainBase)?;
        let (uncond, uncond_losses) =
            train_base_model(&crystals, None, self.config.base.clone(), self.seed("train-base-unconditional")).map_err(err)?;
        self.save_checkpoint(BASE_UNCONDITIONAL, uncond.to_checkpoint().map_err(err)?, Stage::TrainBase)?;
        let body = json!({ "conditional_epoch_losses": cond_losses, "unconditional_epoch_losses": uncond_losses });
        self.write(BASE_REPORT, &self.report(body))?;
        Ok(vec![
            (BASE_CONDITIONAL.into(), "composition-conditioned base model"),
            (BASE_UNCONDITIONAL.into(), "unconditional base model"),
            (BASE_REPORT.into(), "base model training losses"),
        ])
    }

    /// The qualified set of the latest filtered round that has any, or the
    /// unfiltered first pool when no round qualified anything.
    fn conditioning_pool(&self) -> Result<(String, Vec<Composition>)> {
        let mut round = 0;
        while self.path(&filtered_file(round + 1)).exists() && round < self.config.generator.refine_rounds {
            round += 1;
        }
        for r in (0..=round).rev() {
            let name = filtered_file(r);
            if self.path(&name).exists() {
                let q: Vec<Composition> = read_jsonl(&self.path(&name))?;
                if !q.is_empty() {
                    return Ok((name, q));
                }
            }
        }
        let pool: Vec<Composition> = read_jsonl(&self.path(&pool_file(0)))?;
        if pool.is_empty() {
            return Err(missing(&pool_file(0), "no compositions to condition on"));
        }
        Ok((pool_file(0), pool))
    }

    fn stage_generate(&mut self) -> Result<Vec<(String, &'static str)>> {
        let err = |e| CliError::stage("generate", e);
        let n = self.config.sampling.generate_count;
        let omega = self.config.base.guidance;
        let (source, pool) = self.conditioning_pool()?;
        let cond = BaseModel::from_checkpoint(&self.load_checkpoint(BASE_CONDITIONAL)?).map_err(err)?;
        let e: Vec<Vec<Vec<f32>>> = pool.iter().map(|c| c.e.clone()).collect();
        let out = generate(&cond, n, Some(&e), omega, &mut self.rng("generate-conditional")).map_err(err)?;
        let conditioning: Vec<Vec<usize>> = (0..n).map(|i| pool[i % pool.len()].code_indices.clone()).collect();
        self.write_generated("conditional", out, Some((&source, conditioning)))?;
        let uncond = BaseModel::from_checkpoint(&self.load_checkpoint(BASE_UNCONDITIONAL)?).map_err(err)?;
        let out = generate(&uncond, n, None, omega, &mut self.rng("generate-unconditional")).map_err(err)?;
        self.write_generated("unconditional", out, None)?;
        Ok(vec![
            ("generated_conditional.jsonl".into(), "crystals from the conditioned base model"),
            ("generated_conditional_manifest.json".into(), "per-sample decode status and conditioning codes"),
            ("generated_unconditional.jsonl".into(), "crystals from the unconditional base model"),
            ("generated_unconditional_manifest.json".into(), "per-sample decode status"),
        ])
    }

    fn write_generated(&self, variant: &str, out: Vec<ccgen_models::Result<Crystal<f64>>>, conditioning: Option<(&str, Vec<Vec<usize>>)>) -> Result<()> {
        let mut lines = String::new();
        let mut samples = Vec::with_capacity(out.len());
        let (source, codes) = match conditioning {
            Some((s, c)) => (Some(s), Some(c)),
            None => (None, None),
        };
        for (i, r) in out.into_iter().enumerate() {
            let codes = codes.as_ref().map(|c| &c[i]);
            match r {
                Ok(c) => {
                    lines.push_str(&to_jsonl_line(&LabeledCrystal::unlabeled(c)));
                    lines.push('\n');
                    samples.push(json!({ "index": i, "decoded": true, "conditioning_codes": codes }));
                }
                Err(e) => samples.push(json!({ "index": i, "decoded": false, "error": e.to_string(), "conditioning_codes": codes })),
            }
        }
        self.write(&format!("generated_{variant}.jsonl"), lines.as_bytes())?;
        let body = json!({ "requested": samples.len(), "conditioning_source": source, "samples": samples });
        self.write(&format!("generated_{variant}_manifest.json"), &self.report(body))
    }

    /// Decoded crystals with their conditioning codes (when conditional) and
    /// the number requested.
    fn load_generated(&self, variant: &str) -> Result<(Vec<Crystal<f64>>, Vec<Option<Vec<usize>>>, usize)> {
        let name = format!("generated_{variant}.jsonl");
        let text = fs::read_to_string(self.path(&name)).map_err(|e| missing(&name, e))?;
        let crystals = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_jsonl_line(l, i + 1).map(|c| c.crystal).map_err(|e| missing(&name, e)))
            .collect::<Result<Vec<_>>>()?;
        let mname = format!("generated_{variant}_manifest.json");
        let manifest: serde_json::Value = read_json(&self.path(&mname))?;
        let samples = manifest["report"]["samples"].as_array().ok_or_else(|| missing(&mname, "no samples"))?;
        let codes: Vec<Option<Vec<usize>>> = samples
            .iter()
            .filter(|s| s["decoded"].as_bool() == Some(true))
            .map(|s| serde_json::from_value(s["conditioning_codes"].clone()).map_err(|e| missing(&mname, e)))
            .collect::<Result<_>>()?;
        if codes.len() != crystals.len() {
            return Err(missing(&mname, "sample list does not match the crystal file"));
        }
        Ok((crystals, codes, samples.len()))
    }

    fn stage_evaluate(&mut self) -> Result<Vec<(String, &'static str)>> {
        let (reference, oracle, matcher) = self.reference_tools()?;
        let vq = self.load_vqvae()?;
        let mut summary = serde_json::Map::new();
        let mut outputs = Vec::new();
        for variant in ["conditional", "unconditional"] {
            let (crystals, codes, requested) = self.load_generated(variant)?;
            let metrics = compute_metrics(&crystals, &reference, &oracle, &matcher);
            self.write(&format!("metrics_{variant}.json"), &self.report(serde_json::to_value(&metrics).expect("metrics serialise")))?;
            self.write(&format!("metrics_{variant}.csv"), metrics.aggregates_csv().as_bytes())?;
            self.write(&format!("metrics_{variant}_flags.csv"), metrics.flags_csv().as_bytes())?;
            outputs.push((format!("metrics_{variant}.json"), "per-crystal flags and aggregate metrics"));
            outputs.push((format!("metrics_{variant}.csv"), "aggregate metric table"));
            outputs.push((format!("metrics_{variant}_flags.csv"), "per-crystal metric flags"));
            let mut entry = variant_summary(&metrics, requested);
            if variant == "conditional" {
                let conds: Vec<Vec<usize>> = codes.into_iter().map(|c| c.unwrap_or_default()).collect();
                // A decoded crystal whose environments cannot be built (for
                // example a near-degenerate cell) carries no codes and scores 0.
                let generated: Vec<Vec<usize>> = crystals
                    .iter()
                    .map(|c| assign_codes(std::slice::from_ref(c), &vq).map(|mut a| a.codes.swap_remove(0)).unwrap_or_default())
                    .collect();
                let scores: Vec<f64> = generated.iter().zip(&conds).map(|(g, t)| multiset_adherence(g, t)).collect();
                let unencodable = crystals.len() - generated.iter().filter(|g| !g.is_empty()).count();
                entry.insert("adherence_unencodable".into(), json!(unencodable));
                let baseline = random_pairing_baseline(&generated, &conds, self.config.sampling.adherence_trials, &mut self.rng("evaluate-baseline"));
                let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
                entry.insert("adherence_mean".into(), json!(mean));
                entry.insert("adherence_random_baseline".into(), json!(baseline));
                entry.insert("adherence_scores".into(), json!(scores));
            }
            summary.insert(variant.into(), serde_json::Value::Object(entry));
        }
        let gap = summary["conditional"]["novelty_fraction"].as_f64().unwrap_or(0.0) - summary["unconditional"]["novelty_fraction"].as_f64().unwrap_or(0.0);
        summary.insert("novelty_gain".into(), json!(gap));
        self.write(EVALUATION, &self.report(serde_json::Value::Object(summary)))?;
        outputs.push((EVALUATION.into(), "novelty comparison and composition adherence"));
        Ok(outputs)
    }

    fn stage_interpret(&mut self) -> Result<Vec<(String, &'static str)>> {
        let err = |e| CliError::stage("interpret", e);
        let dataset = self.load_dataset()?;
        let crystals: Vec<Crystal<f64>> = dataset.iter().map(|l| l.crystal.clone()).collect();
        let vq = self.load_vqvae()?;
        let codes: serde_json::Value = read_json(&self.path(CODES))?;
        let usage: Vec<usize> = serde_json::from_value(codes["report"]["usage"].clone()).map_err(|e| missing(CODES, e))?;
        let mut ranked: Vec<usize> = (0..usage.len()).filter(|&t| usage[t] > 0).collect();
        ranked.sort_by(|&a, &b| usage[b].cmp(&usage[a]).then(a.cmp(&b)));
        ranked.truncate(self.config.interpret.max_codes);
        let mut top = Vec::new();
        for &t in &ranked {
            let envs = top_k_environments(t, &crystals, &vq, self.config.interpret.top_k).map_err(err)?;
            top.push(json!({ "code": t, "usage": usage[t], "environments": envs }));
        }
        self.write(TOP_K, &self.report(json!({ "codes": top })))?;
        let mut outputs = vec![(TOP_K.into(), "nearest local environments for the most used codes")];

        let labeled: Vec<LabeledCrystal> = dataset.iter().filter(|c| c.space_group.is_some()).cloned().collect();
        if labeled.is_empty() {
            self.write(CLASSIFIER, &self.report(json!({ "skipped": "dataset has no space-group labels" })))?;
        } else {
            let (profiles, similarity) = family_profiles(&labeled, &vq).map_err(err)?;
            self.write(FAMILY_PROFILES, &self.report(json!({ "profiles": profiles, "similarity": similarity })))?;
            self.write(FAMILY_SIMILARITY_CSV, similarity.to_csv().as_bytes())?;
            self.write(FAMILY_SIMILARITY_SVG, similarity.to_svg().as_bytes())?;
            outputs.push((FAMILY_PROFILES.into(), "per-family code distributions and similarities"));
            outputs.push((FAMILY_SIMILARITY_CSV.into(), "family similarity matrix"));
            outputs.push((FAMILY_SIMILARITY_SVG.into(), "family similarity heatmap"));
            let (_, report) = train_symmetry_classifier(&labeled, &vq, &self.config.interpret.classifier, self.seed("interpret-classifier")).map_err(err)?;
            let body = json!({
                "classifier": report,
                "reference_accuracy": {
                    "space_group": REFERENCE_SPACE_GROUP_ACCURACY,
                    "family": REFERENCE_FAMILY_ACCURACY,
                    "note": "full-scale reference values, not expected at this dataset size",
                },
            });
            self.write(CLASSIFIER, &self.report(body))?;
        }
        outputs.push((CLASSIFIER.into(), "symmetry classifier accuracies"));
        Ok(outputs)
    }
}

fn variant_summary(m: &MetricsReport, requested: usize) -> serde_json::Map<String, serde_json::Value> {
    let valid_novel = m.flags.iter().filter(|f| f.valid && f.novel).count();
    let mut out = serde_json::Map::new();
    out.insert("requested".into(), json!(requested));
    out.insert("decoded".into(), json!(m.count));
    out.insert("valid_novel".into(), json!(valid_novel));
    out.insert("novelty_fraction".into(), json!(if requested == 0 { 0.0 } else { valid_novel as f64 / requested as f64 }));
    out.insert("headline".into(), json!(m.headline));
    out
}

pub const DATASET: &str = "dataset.jsonl";
pub const DATA_REPORT: &str = "data_report.json";
pub const VQVAE: &str = "vqvae.json";
pub const VQVAE_REPORT: &str = "vqvae_report.json";
pub const LATENTS: &str = "latents.json";
pub const CODES: &str = "codes.json";
pub const GENERATOR: &str = "generator.json";
pub const GENERATOR_REPORT: &str = "generator_report.json";
pub const GENERATOR_REFINED: &str = "generator_refined.json";
pub const REFINE_REPORT: &str = "refine_report.json";
pub const BASE_CONDITIONAL: &str = "base_conditional.json";
pub const BASE_UNCONDITIONAL: &str = "base_unconditional.json";
pub const BASE_REPORT: &str = "base_report.json";
pub const EVALUATION: &str = "evaluation.json";
pub const TOP_K: &str = "top_k.json";
pub const FAMILY_PROFILES: &str = "family_profiles.json";
pub const FAMILY_SIMILARITY_CSV: &str = "family_similarity.csv";
pub const FAMILY_SIMILARITY_SVG: &str = "family_similarity.svg";
pub const CLASSIFIER: &str = "classifier.json";

pub fn pool_file(round: usize) -> String {
    format!("pool_{round}.jsonl")
}

pub fn filtered_file(round: usize) -> String {
    format!("filtered_{round}.jsonl")
}

pub fn filter_report_file(round: usize) -> String {
    format!("filter_{round}.json")
}

/// Missing or unreadable stage input; the stage name is filled in by
/// [`Run::run_stage`].
fn missing(name: &str, e: impl std::fmt::Display) -> CliError {
    CliError::stage("load", format!("cannot read {name}: {e}"))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("value serialises");
    out.push(b'\n');
    out
}

fn compact<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("value serialises")
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        out.extend(compact(it));
        out.push(b'\n');
    }
    out
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| missing(&path.display().to_string(), e))?;
    serde_json::from_slice(&bytes).map_err(|e| missing(&path.display().to_string(), e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| missing(&path.display().to_string(), e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| missing(&path.display().to_string(), e))).collect()
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
