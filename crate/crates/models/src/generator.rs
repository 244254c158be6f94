//! Composition-conditioned base DDPM over full atom-vector matrices and the
//! decoder from sampled matrices back to crystals.
//!
//! A crystal becomes its standardised (canonical frame, wrapped, canonical
//! order) `N × 109` atom-vector matrix. Coordinate and lattice channels are
//! standardised with statistics fitted once on the training set; the one-hot
//! block stays in `{0, 1}`. Condition row `r` (a concept vector) conditions
//! atom row `r`.

use ccgen_core::crystal::{build_atom_vectors, ATOM_VECTOR_DIM, COORD_CHANNELS, LATTICE_CHANNELS, SPECIES_CHANNELS};
use ccgen_core::schedule::NoiseSchedule;
use ccgen_core::Crystal;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::denoiser::{ChannelStats, DenoiserShape, DiffusionTransformer};
use crate::derive_seed;
use crate::diffusion::{ddpm_training_loss, reverse_sample};
use crate::error::{ModelError, Result};
use crate::nn::{adam, optimizer_step, to_f32_tensor, ParamStore, TransformerConfig};
use crate::vqvae::{argmax, assemble_crystal};

pub const CHECKPOINT_KIND: &str = "base-model";
const SAMPLE_CHUNK: usize = 256;
pub const SAMPLE_CLIP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModelConfig {
    pub denoiser: TransformerConfig,
    /// Diffusion steps `S`.
    pub steps: usize,
    /// Guidance weight `ω` used by default at generation time.
    pub guidance: f64,
    pub cond_drop_prob: f64,
    pub max_atoms: usize,
    /// Bound on the sampler's `x̂0` estimate in standardised units.
    pub sample_clip: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        BaseModelConfig {
            denoiser: TransformerConfig { layers: 8, hidden: 512, heads: 8 },
            steps: 256,
            guidance: 2.0,
            cond_drop_prob: 0.2,
            max_atoms: 20,
            sample_clip: Some(SAMPLE_CLIP),
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 500,
        }
    }
}

impl BaseModelConfig {
    /// Small enough for a CPU. The width stays at 128 because each row
    /// carries 109 channels; narrower models under-fit the species block.
    pub fn desk() -> Self {
        BaseModelConfig {
            denoiser: TransformerConfig { layers: 2, hidden: 128, heads: 4 },
            max_atoms: 8,
            batch_size: 16,
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.steps == 0 || self.max_atoms == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(ModelError::Config(format!("invalid base model config {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) || !(self.guidance >= 0.0) {
            return Err(ModelError::Config("cond_drop_prob must lie in [0, 1] and guidance must be >= 0".into()));
        }
        Ok(())
    }
}

fn is_continuous(channel: usize) -> bool {
    COORD_CHANNELS.contains(&channel) || LATTICE_CHANNELS.contains(&channel)
}

/// Unstandardised atom-vector rows of the standardised crystal.
pub fn atom_matrix(c: &Crystal<f64>) -> Result<Vec<Vec<f32>>> {
    let std = c.standardized()?;
    Ok(build_atom_vectors(&std)?.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect())
}

/// Coordinate and lattice channel statistics over every atom of `dataset`.
pub fn fit_standardisation(dataset: &[Crystal<f64>]) -> Result<ChannelStats> {
    let mut rows = Vec::new();
    for c in dataset {
        rows.extend(atom_matrix(c)?);
    }
    ChannelStats::fit(&rows, ATOM_VECTOR_DIM, is_continuous)
}

/// `max_atoms × 109` standardised matrix with zero padding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTensor {
    pub rows: Vec<Vec<f32>>,
    pub mask: Vec<bool>,
}

impl TrainingTensor {
    pub fn num_atoms(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Live rows mapped back to physical units.
    pub fn destandardized(&self, stats: &ChannelStats) -> Vec<Vec<f32>> {
        self.rows.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(r, _)| stats.invert(r)).collect()
    }
}

pub fn crystal_to_training_tensor(c: &Crystal<f64>, max_atoms: usize, stats: &ChannelStats) -> Result<TrainingTensor> {
    if c.num_atoms() > max_atoms {
        return Err(ccgen_core::Error::TooManyAtoms { n: c.num_atoms(), max: max_atoms }.into());
    }
    let mut rows: Vec<Vec<f32>> = atom_matrix(c)?.iter().map(|r| stats.apply(r)).collect();
    let mut mask = vec![true; rows.len()];
    rows.resize(max_atoms, vec![0.0; ATOM_VECTOR_DIM]);
    mask.resize(max_atoms, false);
    Ok(TrainingTensor { rows, mask })
}

/// Crystal from a de-standardised `N × 109` matrix: argmax species, the
/// row-mean lattice block as `L̃` (with `L = L̃`), and wrapped coordinates.
pub fn decode_sample(rows: &[Vec<f32>]) -> Result<Crystal<f64>> {
    if rows.is_empty() {
        return Err(ModelError::DecodeFailed("empty sample".into()));
    }
    if rows.iter().any(|r| r.len() != ATOM_VECTOR_DIM) {
        return Err(ModelError::DecodeFailed("row width is not 109".into()));
    }
    let species = rows.iter().map(|r| argmax(&r[SPECIES_CHANNELS]) as u8 + 1).collect();
    let coords = rows.iter().map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect();
    let mut lhat = [0.0; 6];
    for r in rows {
        for (acc, &v) in lhat.iter_mut().zip(&r[LATTICE_CHANNELS]) {
            *acc += v as f64;
        }
    }
    let lhat = lhat.map(|v| v / rows.len() as f64);
    assemble_crystal(species, coords, &lhat)
}

pub struct BaseModel {
    config: BaseModelConfig,
    seed: u64,
    cond_dim: Option<usize>,
    ps: ParamStore,
    net: DiffusionTransformer,
    stats: ChannelStats,
    sched: NoiseSchedule<f64>,
    sizes: Vec<usize>,
    provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BaseModelExtra {
    cond_dim: Option<usize>,
    stats: ChannelStats,
    sizes: Vec<usize>,
}

/// Rows padded to `n_max` in `[B, n_max, width]` layout.
fn pad_rows<'a>(items: impl Iterator<Item = &'a [Vec<f32>]>, n_max: usize, width: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for rows in items {
        for r in 0..n_max {
            match rows.get(r) {
                Some(row) => out.extend_from_slice(row),
                None => out.extend(std::iter::repeat_n(0.0, width)),
            }
        }
    }
    out
}

fn mask_data(sizes: &[usize], n_max: usize) -> Vec<f32> {
    sizes.iter().flat_map(|&n| (0..n_max).map(move |r| if r < n { 1.0 } else { 0.0 })).collect()
}

impl BaseModel {
    fn build(config: BaseModelConfig, seed: u64, cond_dim: Option<usize>, stats: ChannelStats, sizes: Vec<usize>) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(derive_seed(seed, "base-init"));
        let shape = DenoiserShape { net: config.denoiser, channels: ATOM_VECTOR_DIM, max_rows: config.max_atoms, cond_dim };
        let net = DiffusionTransformer::new(&mut ps, "base", shape)?;
        let sched = NoiseSchedule::cosine(config.steps)?;
        Ok(BaseModel { config, seed, cond_dim, ps, net, stats, sched, sizes, provenance: Vec::new() })
    }

    pub fn config(&self) -> &BaseModelConfig {
        &self.config
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_dim.is_some()
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// Atom counts of the training set, the default size distribution.
    pub fn training_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// De-standardised `N × 109` samples. Sample `i` uses
    /// `compositions[i mod len]` for its condition and atom count; without
    /// compositions, counts are drawn from the training distribution.
    pub fn sample_matrices(&self, n: usize, compositions: Option<&[Vec<Vec<f32>>]>, omega: f64, rng: &mut impl Rng) -> Result<Vec<Vec<Vec<f32>>>> {
        let conds: Vec<Option<&[Vec<f32>]>> = match compositions {
            Some([]) => return Err(ModelError::Config("empty composition list".into())),
            Some(comps) => {
                let d = self.cond_dim.ok_or_else(|| ModelError::Config("unconditional base model received compositions".into()))?;
                if comps.iter().flatten().any(|r| r.len() != d) {
                    return Err(ModelError::Config(format!("composition rows must have width {d}")));
                }
                (0..n).map(|i| Some(comps[i % comps.len()].as_slice())).collect()
            }
            None => vec![None; n],
        };
        let sizes: Vec<usize> = conds.iter().map(|c| c.map_or_else(|| self.sizes[rng.random_range(0..self.sizes.len())], <[_]>::len)).collect();
        if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > self.config.max_atoms) {
            return Err(ccgen_core::Error::TooManyAtoms { n: bad, max: self.config.max_atoms }.into());
        }
        let mut out = Vec::with_capacity(n);
        for (chunk, size_chunk) in conds.chunks(SAMPLE_CHUNK).zip(sizes.chunks(SAMPLE_CHUNK)) {
            let b = chunk.len();
            let n_max = size_chunk.iter().copied().max().unwrap_or(1);
            let mask = to_f32_tensor(mask_data(size_chunk, n_max), &[b, n_max])?;
            let cond = match (self.cond_dim, compositions) {
                (Some(d), Some(_)) => Some(to_f32_tensor(pad_rows(chunk.iter().map(|c| c.unwrap_or(&[])), n_max, d), &[b, n_max, d])?),
                _ => None,
            };
            let x = reverse_sample(&self.net, &[b, n_max, ATOM_VECTOR_DIM], &mask, cond.as_ref(), &self.sched, omega, self.config.sample_clip, rng)?.to_vec3::<f32>()?;
            for (rows, &n) in x.iter().zip(size_chunk) {
                out.push(rows[..n].iter().map(|r| self.stats.invert(r)).collect());
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(&self.config)?, self.seed, self.provenance.clone(), &self.ps)?;
        ck.extra = serde_json::to_value(BaseModelExtra { cond_dim: self.cond_dim, stats: self.stats.clone(), sizes: self.sizes.clone() })?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: BaseModelConfig = serde_json::from_value(ck.config.clone())?;
        let extra: BaseModelExtra = serde_json::from_value(ck.extra.clone())?;
        let m = Self::build(config, ck.seed, extra.cond_dim, extra.stats, extra.sizes)?;
        ck.restore_into(&m.ps)?;
        Ok(BaseModel { provenance: ck.provenance.clone(), ..m })
    }
}

/// Trains the base model. With `conditions`, entry `i` is the concept
/// sequence of `dataset[i]` in canonical atom order and is dropped to the
/// null condition with probability `cond_drop_prob`; without, the model is
/// unconditional.
pub fn train_base_model(
    dataset: &[Crystal<f64>],
    conditions: Option<&[Vec<Vec<f32>>]>,
    config: BaseModelConfig,
    seed: u64,
) -> Result<(BaseModel, Vec<f32>)> {
    if dataset.is_empty() {
        return Err(ccgen_core::Error::InsufficientData { have: 0, need: 1 }.into());
    }
    let cond_dim = match conditions {
        Some(conds) => {
            if conds.len() != dataset.len() {
                return Err(ModelError::Config(format!("{} conditions for {} crystals", conds.len(), dataset.len())));
            }
            let d = conds.iter().flatten().map(Vec::len).next().unwrap_or(0);
            for (c, x) in conds.iter().zip(dataset) {
                if c.len() != x.num_atoms() || c.iter().any(|r| r.len() != d) {
                    return Err(ModelError::Config("condition rows must match atom counts and share one width".into()));
                }
            }
            Some(d)
        }
        None => None,
    };
    let stats = fit_standardisation(dataset)?;
    let tensors = dataset.iter().map(|c| crystal_to_training_tensor(c, config.max_atoms, &stats)).collect::<Result<Vec<_>>>()?;
    let sizes = dataset.iter().map(Crystal::num_atoms).collect();
    let mut model = BaseModel::build(config, seed, cond_dim, stats, sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "base-train"));
    let cfg = model.config.clone();
    let mut opt = adam(model.ps.vars(), cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let counts: Vec<usize> = idx.iter().map(|&i| tensors[i].num_atoms()).collect();
            let n_max = counts.iter().copied().max().unwrap_or(1);
            let x0 = pad_rows(idx.iter().map(|&i| tensors[i].rows.as_slice()), n_max, ATOM_VECTOR_DIM);
            let x0 = to_f32_tensor(x0, &[b, n_max, ATOM_VECTOR_DIM])?;
            let mask = to_f32_tensor(mask_data(&counts, n_max), &[b, n_max])?;
            let cond = match (conditions, cond_dim) {
                (Some(conds), Some(d)) => Some(to_f32_tensor(pad_rows(idx.iter().map(|&i| conds[i].as_slice()), n_max, d), &[b, n_max, d])?),
                _ => None,
            };
            let loss = ddpm_training_loss(&model.net, &x0, &mask, cond.as_ref(), &model.sched, cfg.cond_drop_prob, &mut rng)?;
            sum += optimizer_step(&mut opt, &loss, "base", step)?;
            step += 1;
            count += 1;
        }
        losses.push(sum / count as f32);
    }
    model.provenance.push(if cond_dim.is_some() { "train-conditional" } else { "train-unconditional" }.to_string());
    Ok((model, losses))
}

/// Samples `n` crystals; decode failures are returned per sample.
pub fn generate(
    model: &BaseModel,
    n: usize,
    compositions: Option<&[Vec<Vec<f32>>]>,
    omega: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Result<Crystal<f64>>>> {
    Ok(model.sample_matrices(n, compositions, omega, rng)?.iter().map(|m| decode_sample(m)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccgen_core::matcher::{structures_match, MatcherConfig};
    use ccgen_core::Mat3;

    fn rocksalt() -> Crystal<f64> {
        Crystal::from_fractional(
            Mat3::from_rows([[0.0, 2.8, 2.8], [2.8, 0.0, 2.8], [2.8, 2.8, 0.0]]),
            &[[0.1, 0.1, 0.1], [0.6, 0.6, 0.6]],
            vec![11, 17],
        )
        .unwrap()
    }

    fn csc() -> Crystal<f64> {
        Crystal::from_fractional(Mat3::from_rows([[4.1, 0.0, 0.0], [0.0, 4.1, 0.0], [0.0, 0.0, 4.1]]), &[[0.1, 0.1, 0.1], [0.6, 0.6, 0.6]], vec![55, 17])
            .unwrap()
    }

    fn tiny() -> BaseModelConfig {
        BaseModelConfig {
            denoiser: TransformerConfig { layers: 1, hidden: 16, heads: 2 },
            steps: 10,
            max_atoms: 4,
            batch_size: 2,
            epochs: 2,
            ..BaseModelConfig::default()
        }
    }

    #[test]
    fn single_atom_tensor_has_one_live_row() {
        let c = Crystal::from_fractional(Mat3::from_rows([[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]]), &[[0.2, 0.3, 0.4]], vec![26]).unwrap();
        let t = crystal_to_training_tensor(&c, 20, &ChannelStats::identity(ATOM_VECTOR_DIM)).unwrap();
        assert_eq!(t.rows.len(), 20);
        assert_eq!(t.num_atoms(), 1);
        assert!(t.rows[1..].iter().all(|r| r.iter().all(|&v| v == 0.0)));
        assert!(crystal_to_training_tensor(&c, 0, &ChannelStats::identity(ATOM_VECTOR_DIM)).is_err());
    }

    #[test]
    fn tensor_is_permutation_invariant_and_round_trips() {
        let c = rocksalt();
        let stats = fit_standardisation(&[rocksalt(), csc()]).unwrap();
        assert!(SPECIES_CHANNELS.clone().all(|ch| stats.mean[ch] == 0.0 && stats.std[ch] == 1.0));
        let a = crystal_to_training_tensor(&c, 4, &stats).unwrap();
        let b = crystal_to_training_tensor(&c.permuted(&[1, 0]), 4, &stats).unwrap();
        assert_eq!(a, b);
        let raw = atom_matrix(&c).unwrap();
        for (x, y) in a.destandardized(&stats).iter().flatten().zip(raw.iter().flatten()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        let back = decode_sample(&a.destandardized(&stats)).unwrap();
        assert!(structures_match(&back, &c, MatcherConfig::default()));
    }

    #[test]
    fn decode_ties_and_averaged_lattice() {
        let c = csc();
        let mut rows = atom_matrix(&c).unwrap();
        rows[0][SPECIES_CHANNELS].fill(0.5);
        let lhat: Vec<f32> = rows[0][LATTICE_CHANNELS].to_vec();
        rows[0][LATTICE_CHANNELS.start] += 0.01;
        rows[1][LATTICE_CHANNELS.start] -= 0.01;
        let d = decode_sample(&rows).unwrap();
        assert_eq!(d.atomic_numbers()[0], 1);
        let got = d.lattice_descriptor().unwrap();
        for (g, w) in got.iter().zip(&lhat) {
            assert!((g - *w as f64).abs() < 0.01);
        }
        let mut flat = rows.clone();
        for r in &mut flat {
            r[LATTICE_CHANNELS].fill(0.0);
        }
        assert!(matches!(decode_sample(&flat), Err(ModelError::DecodeFailed(_))));
    }

    fn conds() -> Vec<Vec<Vec<f32>>> {
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.5, 0.5], vec![-1.0, 0.0]]]
    }

    #[test]
    fn conditions_cycle_and_set_sizes() {
        let data = [rocksalt(), csc()];
        let (m, _) = train_base_model(&data, Some(&conds()), tiny(), 0).unwrap();
        let comps = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]; 2], vec![vec![0.3, 0.3]; 3]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.sample_matrices(10, Some(&comps), 2.0, &mut rng).unwrap();
        let sizes: Vec<usize> = out.iter().map(Vec::len).collect();
        assert_eq!(sizes, [1, 2, 3, 1, 2, 3, 1, 2, 3, 1]);
    }

    #[test]
    fn unconditional_training_ignores_compositions() {
        let data = [rocksalt(), csc()];
        let (m, losses) = train_base_model(&data, None, tiny(), 4).unwrap();
        let (_, again) = train_base_model(&data, None, tiny(), 4).unwrap();
        assert_eq!(losses, again);
        assert!(!m.is_conditional());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.sample_matrices(2, Some(&conds()), 0.0, &mut rng).is_err());
        let sizes: Vec<usize> = m.sample_matrices(6, None, 0.0, &mut rng).unwrap().iter().map(Vec::len).collect();
        assert!(sizes.iter().all(|&s| s == 2));
    }

    #[test]
    fn omega_zero_is_conditional_sampling_and_checkpoint_reproduces() {
        let data = [rocksalt(), csc()];
        let (m, _) = train_base_model(&data, Some(&conds()), tiny(), 1).unwrap();
        let back = BaseModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        let run = |model: &BaseModel, omega: f64| model.sample_matrices(3, Some(&conds()), omega, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(run(&m, 0.0), run(&back, 0.0));
        assert_eq!(run(&m, 2.0), run(&back, 2.0));
        assert_ne!(run(&m, 0.0), run(&m, 2.0));
    }
}
