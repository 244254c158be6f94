//! Composition generator `G`: a DDPM over per-crystal latent matrices, its
//! sampler, the V.S.U.N filter on decoded samples, and refinement on the
//! samples that pass.

use candle_core::Tensor;
use ccgen_core::matcher::StructureMatcher;
use ccgen_core::metrics::{compute_metrics, CrystalFlags};
use ccgen_core::oracle::StabilityOracle;
use ccgen_core::quantize::{quantize, Codebook};
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
use crate::vqvae::VqVae;

pub const CHECKPOINT_KIND: &str = "composition-generator";
const SAMPLE_CHUNK: usize = 256;
pub const SAMPLE_CLIP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub denoiser: TransformerConfig,
    /// Diffusion steps `S`.
    pub steps: usize,
    pub max_atoms: usize,
    /// Bound on the sampler's `x̂0` estimate in standardised units.
    pub sample_clip: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub refine_epochs: usize,
    pub refine_rounds: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            denoiser: TransformerConfig { layers: 12, hidden: 768, heads: 12 },
            steps: 100,
            max_atoms: 20,
            sample_clip: Some(SAMPLE_CLIP),
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 200,
            refine_epochs: 20,
            refine_rounds: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        GeneratorConfig {
            denoiser: TransformerConfig { layers: 2, hidden: 64, heads: 4 },
            max_atoms: 8,
            batch_size: 16,
            epochs: 50,
            refine_epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.steps == 0 || self.max_atoms == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(ModelError::Config(format!("invalid generator config {self:?}")));
        }
        Ok(())
    }
}

/// Pre-quantisation latents of one crystal, rows in canonical atom order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub z: Vec<Vec<f32>>,
}

impl LatentMatrix {
    pub fn n_atoms(&self) -> usize {
        self.z.len()
    }
}

pub fn extract_latent_matrices(dataset: &[Crystal<f64>], vq: &VqVae) -> Result<Vec<LatentMatrix>> {
    Ok(vq.encode_crystals(dataset)?.into_iter().map(|z| LatentMatrix { z }).collect())
}

/// Quantised composition; `e[r]` is bitwise the codebook row `code_indices[r]`
/// and `z` keeps the raw latents it was quantised from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub code_indices: Vec<usize>,
    pub e: Vec<Vec<f32>>,
    pub z: Vec<Vec<f32>>,
}

impl Composition {
    pub fn from_latents(z: Vec<Vec<f32>>, cb: &Codebook<f32>) -> Result<Self> {
        let code_indices = z.iter().map(|row| Ok(quantize(row, cb)?.code_index)).collect::<Result<Vec<_>>>()?;
        let e = code_indices.iter().map(|&t| cb.code(t).to_vec()).collect();
        Ok(Composition { code_indices, e, z })
    }

    pub fn n_atoms(&self) -> usize {
        self.code_indices.len()
    }
}

/// Source of sample sizes `N_g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SizeSampler {
    /// Uniform draw from the listed sizes (the empirical training distribution).
    Empirical(Vec<usize>),
    Constant(usize),
}

impl SizeSampler {
    pub fn empirical(latents: &[LatentMatrix]) -> Self {
        SizeSampler::Empirical(latents.iter().map(LatentMatrix::n_atoms).collect())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match self {
            SizeSampler::Empirical(sizes) => sizes[rng.random_range(0..sizes.len())],
            SizeSampler::Constant(n) => *n,
        }
    }
}

pub struct CompositionGenerator {
    config: GeneratorConfig,
    seed: u64,
    latent_dim: usize,
    ps: ParamStore,
    net: DiffusionTransformer,
    stats: ChannelStats,
    sched: NoiseSchedule<f64>,
    sizes: SizeSampler,
    provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorExtra {
    latent_dim: usize,
    stats: ChannelStats,
    sizes: SizeSampler,
}

impl CompositionGenerator {
    fn build(config: GeneratorConfig, seed: u64, latent_dim: usize, stats: ChannelStats, sizes: SizeSampler) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(derive_seed(seed, "generator-init"));
        let shape = DenoiserShape { net: config.denoiser, channels: latent_dim, max_rows: config.max_atoms, cond_dim: None };
        let net = DiffusionTransformer::new(&mut ps, "g", shape)?;
        let sched = NoiseSchedule::cosine(config.steps)?;
        Ok(CompositionGenerator { config, seed, latent_dim, ps, net, stats, sched, sizes, provenance: Vec::new() })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn size_sampler(&self) -> &SizeSampler {
        &self.sizes
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    fn batch_tensors(&self, items: &[&LatentMatrix]) -> Result<(Tensor, Tensor)> {
        let n_max = items.iter().map(|l| l.n_atoms()).max().unwrap_or(1);
        let d = self.latent_dim;
        let mut x = vec![0f32; items.len() * n_max * d];
        let mut mask = vec![0f32; items.len() * n_max];
        for (i, l) in items.iter().enumerate() {
            for (r, row) in l.z.iter().enumerate() {
                x[(i * n_max + r) * d..(i * n_max + r + 1) * d].copy_from_slice(&self.stats.apply(row));
                mask[i * n_max + r] = 1.0;
            }
        }
        Ok((to_f32_tensor(x, &[items.len(), n_max, d])?, to_f32_tensor(mask, &[items.len(), n_max])?))
    }

    fn check_latents(&self, latents: &[LatentMatrix]) -> Result<()> {
        for l in latents {
            if l.n_atoms() == 0 || l.n_atoms() > self.config.max_atoms {
                return Err(ccgen_core::Error::TooManyAtoms { n: l.n_atoms(), max: self.config.max_atoms }.into());
            }
            if l.z.iter().any(|r| r.len() != self.latent_dim) {
                return Err(ModelError::Config("latent row width differs from the generator".into()));
            }
        }
        Ok(())
    }

    /// Mean epoch losses of `epochs` passes of DDPM training on `latents`.
    fn fit(&mut self, latents: &[LatentMatrix], epochs: usize, stage: &str, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        self.check_latents(latents)?;
        self.provenance.push(stage.to_string());
        if epochs == 0 || latents.is_empty() {
            return Ok(Vec::new());
        }
        let mut opt = adam(self.ps.vars(), self.config.learning_rate)?;
        let mut order: Vec<usize> = (0..latents.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        let mut step = 0;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut sum = 0.0;
            let mut count = 0;
            for idx in order.chunks(self.config.batch_size) {
                let items: Vec<&LatentMatrix> = idx.iter().map(|&i| &latents[i]).collect();
                let (x0, mask) = self.batch_tensors(&items)?;
                let loss = ddpm_training_loss(&self.net, &x0, &mask, None, &self.sched, 0.0, rng)?;
                sum += optimizer_step(&mut opt, &loss, stage, step)?;
                step += 1;
                count += 1;
            }
            losses.push(sum / count as f32);
        }
        Ok(losses)
    }

    /// DDPM loss on `latents` without updating parameters.
    pub fn evaluate_loss(&self, latents: &[LatentMatrix], rng: &mut impl Rng) -> Result<f32> {
        self.check_latents(latents)?;
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in latents.chunks(self.config.batch_size) {
            let items: Vec<&LatentMatrix> = chunk.iter().collect();
            let (x0, mask) = self.batch_tensors(&items)?;
            sum += ddpm_training_loss(&self.net, &x0, &mask, None, &self.sched, 0.0, rng)?.to_scalar::<f32>()?;
            count += 1;
        }
        Ok(sum / count.max(1) as f32)
    }

    /// Raw latent matrices with the requested row counts.
    pub fn sample_latents(&self, sizes: &[usize], rng: &mut impl Rng) -> Result<Vec<Vec<Vec<f32>>>> {
        if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > self.config.max_atoms) {
            return Err(ccgen_core::Error::TooManyAtoms { n, max: self.config.max_atoms }.into());
        }
        let d = self.latent_dim;
        let mut out = Vec::with_capacity(sizes.len());
        for chunk in sizes.chunks(SAMPLE_CHUNK) {
            let n_max = chunk.iter().copied().max().unwrap_or(1);
            let mask: Vec<f32> = chunk.iter().flat_map(|&n| (0..n_max).map(move |r| if r < n { 1.0 } else { 0.0 })).collect();
            let mask = to_f32_tensor(mask, &[chunk.len(), n_max])?;
            let x = reverse_sample(&self.net, &[chunk.len(), n_max, d], &mask, None, &self.sched, 0.0, self.config.sample_clip, rng)?.to_vec3::<f32>()?;
            for (rows, &n) in x.iter().zip(chunk) {
                out.push(rows[..n].iter().map(|r| self.stats.invert(r)).collect());
            }
        }
        Ok(out)
    }

    /// Draws `n` sizes from `sizes`, samples latents and quantises every row.
    pub fn sample_compositions(&self, n: usize, sizes: &SizeSampler, cb: &Codebook<f32>, rng: &mut impl Rng) -> Result<Vec<Composition>> {
        if cb.dim() != self.latent_dim {
            return Err(ModelError::Config("codebook width differs from the generator".into()));
        }
        let counts: Vec<usize> = (0..n).map(|_| sizes.sample(rng)).collect();
        self.sample_latents(&counts, rng)?.into_iter().map(|z| Composition::from_latents(z, cb)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(&self.config)?, self.seed, self.provenance.clone(), &self.ps)?;
        ck.extra =
            serde_json::to_value(GeneratorExtra { latent_dim: self.latent_dim, stats: self.stats.clone(), sizes: self.sizes.clone() })?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: GeneratorConfig = serde_json::from_value(ck.config.clone())?;
        let extra: GeneratorExtra = serde_json::from_value(ck.extra.clone())?;
        let mut g = Self::build(config, ck.seed, extra.latent_dim, extra.stats, extra.sizes)?;
        ck.restore_into(&g.ps)?;
        g.provenance = ck.provenance.clone();
        Ok(g)
    }
}

pub fn train_composition_generator(latents: &[LatentMatrix], config: GeneratorConfig, seed: u64) -> Result<(CompositionGenerator, Vec<f32>)> {
    let d = latents.first().and_then(|l| l.z.first()).map(Vec::len).ok_or(ccgen_core::Error::InsufficientData { have: 0, need: 1 })?;
    let rows: Vec<Vec<f32>> = latents.iter().flat_map(|l| l.z.iter().cloned()).collect();
    if rows.iter().any(|r| r.len() != d) {
        return Err(ModelError::Config("ragged latent rows".into()));
    }
    let stats = ChannelStats::fit(&rows, d, |_| true)?;
    let epochs = config.epochs;
    let mut g = CompositionGenerator::build(config, seed, d, stats, SizeSampler::empirical(latents))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "generator-train"));
    let losses = g.fit(latents, epochs, "train", &mut rng)?;
    Ok((g, losses))
}

/// Continues training on the raw latents of `qualified`. Standardisation
/// statistics and the size distribution are left unchanged.
pub fn refine_generator(g: &mut CompositionGenerator, qualified: &[Composition], seed: u64) -> Result<Vec<f32>> {
    if qualified.is_empty() {
        return Err(ModelError::RefinementSkipped);
    }
    let latents: Vec<LatentMatrix> = qualified.iter().map(|c| LatentMatrix { z: c.z.clone() }).collect();
    let round = g.provenance.iter().filter(|p| p.starts_with("refine")).count();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("generator-refine-{round}")));
    let epochs = g.config.refine_epochs;
    g.fit(&latents, epochs, &format!("refine-{round}"), &mut rng)
}

/// Filter verdict for one composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub decoded: bool,
    pub decode_error: Option<String>,
    pub flags: Option<CrystalFlags>,
    pub qualified: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub decode_failed: usize,
    pub valid: usize,
    pub stable: usize,
    pub unique: usize,
    pub novel: usize,
    pub qualified: usize,
    pub verdicts: Vec<FilterVerdict>,
}

impl FilterReport {
    pub fn qualified_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.qualified as f64 / self.total as f64
        }
    }
}

/// Decodes each composition with the VQ-VAE decoder and keeps those whose
/// crystal is valid, stable, unique within the batch (first occurrence
/// wins) and novel with respect to `reference`. Decode failures are
/// dropped and counted.
pub fn filter_vsun<M: StructureMatcher>(
    comps: &[Composition],
    vq: &VqVae,
    reference: &[Crystal<f64>],
    oracle: &dyn StabilityOracle,
    matcher: &M,
) -> Result<(Vec<Composition>, FilterReport)> {
    let mut report = FilterReport { total: comps.len(), ..FilterReport::default() };
    if comps.is_empty() {
        return Ok((Vec::new(), report));
    }
    let decoded = vq.decode_to_crystals(&comps.iter().map(|c| c.e.clone()).collect::<Vec<_>>())?;
    let mut ok_idx = Vec::new();
    let mut crystals = Vec::new();
    let mut verdicts: Vec<FilterVerdict> = Vec::with_capacity(comps.len());
    for (i, d) in decoded.into_iter().enumerate() {
        match d {
            Ok(c) => {
                ok_idx.push(i);
                crystals.push(c);
                verdicts.push(FilterVerdict { decoded: true, decode_error: None, flags: None, qualified: false });
            }
            Err(e) => {
                report.decode_failed += 1;
                verdicts.push(FilterVerdict { decoded: false, decode_error: Some(e.to_string()), flags: None, qualified: false });
            }
        }
    }
    let metrics = compute_metrics(&crystals, reference, oracle, matcher);
    let mut qualified = Vec::new();
    for (&i, f) in ok_idx.iter().zip(metrics.flags) {
        report.valid += f.valid as usize;
        report.stable += f.stable as usize;
        report.unique += f.unique as usize;
        report.novel += f.novel as usize;
        let q = f.valid && f.stable && f.unique && f.novel;
        if q {
            report.qualified += 1;
            qualified.push(comps[i].clone());
        }
        verdicts[i].flags = Some(f);
        verdicts[i].qualified = q;
    }
    report.verdicts = verdicts;
    Ok((qualified, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vqvae::CodebookConfig;
    use ccgen_core::matcher::FingerprintMatcher;
    use ccgen_core::oracle::ToyOracle;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            denoiser: TransformerConfig { layers: 1, hidden: 16, heads: 2 },
            steps: 20,
            max_atoms: 4,
            batch_size: 4,
            epochs: 2,
            refine_epochs: 1,
            ..GeneratorConfig::default()
        }
    }

    fn latents() -> Vec<LatentMatrix> {
        vec![
            LatentMatrix { z: vec![vec![0.0, 1.0], vec![1.0, 0.0]] },
            LatentMatrix { z: vec![vec![2.0, 1.0], vec![1.0, 2.0], vec![0.5, 0.5]] },
            LatentMatrix { z: vec![vec![-1.0, 0.0]] },
        ]
    }

    fn codebook() -> Codebook<f32> {
        Codebook::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 0.5]]).unwrap()
    }

    #[test]
    fn sampled_rows_are_codebook_rows() {
        let (g, losses) = train_composition_generator(&latents(), tiny(), 0).unwrap();
        assert_eq!(losses.len(), 2);
        let cb = codebook();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let comps = g.sample_compositions(12, &SizeSampler::Constant(3), &cb, &mut rng).unwrap();
        for c in &comps {
            assert_eq!(c.n_atoms(), 3);
            for (row, &t) in c.e.iter().zip(&c.code_indices) {
                assert_eq!(row.as_slice(), cb.code(t));
            }
            for (z, &t) in c.z.iter().zip(&c.code_indices) {
                let best = (0..cb.len()).min_by(|&a, &b| {
                    ccgen_core::quantize::squared_distance(z, cb.code(a)).total_cmp(&ccgen_core::quantize::squared_distance(z, cb.code(b)))
                });
                assert_eq!(best, Some(t));
            }
        }
    }

    #[test]
    fn training_and_sampling_are_deterministic() {
        let (a, la) = train_composition_generator(&latents(), tiny(), 5).unwrap();
        let (b, lb) = train_composition_generator(&latents(), tiny(), 5).unwrap();
        assert_eq!(la, lb);
        let s = |g: &CompositionGenerator| g.sample_latents(&[2, 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(s(&a), s(&b));
    }

    #[test]
    fn loss_ignores_padded_row_contents() {
        let (g, _) = train_composition_generator(&latents(), tiny(), 2).unwrap();
        let data = latents();
        let items: Vec<&LatentMatrix> = data.iter().collect();
        let (x0, mask) = g.batch_tensors(&items).unwrap();
        let pad = mask.unsqueeze(2).unwrap().affine(-7.0, 7.0).unwrap();
        let junk = x0.broadcast_add(&pad).unwrap();
        let run = |x: &Tensor| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            ddpm_training_loss(&g.net, x, &mask, None, &g.sched, 0.0, &mut rng).unwrap().to_scalar::<f32>().unwrap()
        };
        assert!((run(&x0) - run(&junk)).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_samples() {
        let (mut g, _) = train_composition_generator(&latents(), tiny(), 3).unwrap();
        let comps = vec![Composition::from_latents(vec![vec![0.1, 0.2], vec![0.9, 1.1]], &codebook()).unwrap()];
        refine_generator(&mut g, &comps, 3).unwrap();
        let back = CompositionGenerator::from_checkpoint(&g.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.provenance(), ["train", "refine-0"]);
        let s = |g: &CompositionGenerator| g.sample_latents(&[2, 1], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s(&g), s(&back));
    }

    #[test]
    fn empty_refinement_is_skipped() {
        let (mut g, _) = train_composition_generator(&latents(), tiny(), 3).unwrap();
        assert!(matches!(refine_generator(&mut g, &[], 0), Err(ModelError::RefinementSkipped)));
    }

    #[test]
    fn filter_handles_empty_and_duplicates() {
        let tf = TransformerConfig { layers: 1, hidden: 16, heads: 2 };
        let cfg = CodebookConfig { codebook_size: 2, latent_dim: 2, encoder: tf, decoder: tf, max_atoms: 4, ..CodebookConfig::default() };
        let vq = VqVae::new(cfg, 0).unwrap();
        let matcher = FingerprintMatcher::default();
        let oracle = ToyOracle::default();
        let (q, r) = filter_vsun(&[], &vq, &[], &oracle, &matcher).unwrap();
        assert!(q.is_empty());
        assert_eq!(r, FilterReport::default());
        let c = Composition { code_indices: vec![0, 1], e: vec![vec![0.3, 0.1], vec![-0.2, 0.4]], z: vec![vec![0.0; 2]; 2] };
        let (q, r) = filter_vsun(&[c.clone(), c], &vq, &[], &oracle, &matcher).unwrap();
        assert!(q.len() <= 1);
        assert_eq!(r.total, 2);
        assert_eq!(r.verdicts.len(), 2);
        assert!(r.unique <= 1);
    }
}
