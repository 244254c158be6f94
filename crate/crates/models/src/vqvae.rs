//! Concept codebook learning: a transformer encoder over local environments,
//! a transformer decoder over per-atom codes, and the three-stage schedule
//! (VAE pretraining, K-Means codebook initialisation, VQ-VAE fine-tuning).
//!
//! Coordinate and lattice channels are divided by [`COORD_SCALE`] on the way
//! in and multiplied back on the way out, so every loss term is measured in
//! units of `COORD_SCALE` Å.

use candle_core::{DType, Tensor, Var, D};
use ccgen_core::crystal::{
    descriptor_to_symmetric, local_environments, LocalEnvironment, ATOM_VECTOR_DIM, COORD_CHANNELS, LATTICE_CHANNELS, NUM_SPECIES,
};
use ccgen_core::linalg::symmetric_eigen;
use ccgen_core::matcher::{structures_match, MatcherConfig};
use ccgen_core::quantize::{kmeans, quantize, Codebook, LatentAssignment};
use ccgen_core::Crystal;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::derive_seed;
use crate::error::{ModelError, Result};
use crate::nn::{
    adam, masked_mean, normal_tensor, optimizer_step, to_f32_tensor, Linear, ParamStore, Transformer, TransformerConfig, DEVICE,
};

pub const COORD_SCALE: f32 = 5.0;
pub const CHECKPOINT_KIND: &str = "vqvae";
/// Smallest eigenvalue (Å) accepted for a decoded `L̃`.
pub const MIN_LATTICE_EIGENVALUE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    /// Number of codes `T`.
    pub codebook_size: usize,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    pub encoder: TransformerConfig,
    pub decoder: TransformerConfig,
    pub vae_reg_weight: f64,
    pub vqvae_reg_weight: f64,
    /// Neighbour cutoff ratio `ξ`.
    pub xi: f64,
    /// Maximum neighbours `K`.
    pub max_neighbors: usize,
    pub max_atoms: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub vae_epochs: usize,
    pub vqvae_epochs: usize,
    pub kmeans_iters: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        let tf = TransformerConfig { layers: 8, hidden: 512, heads: 8 };
        CodebookConfig {
            codebook_size: 10_000,
            latent_dim: 8,
            encoder: tf,
            decoder: tf,
            vae_reg_weight: 1e-5,
            vqvae_reg_weight: 1e-2,
            xi: 1.1,
            max_neighbors: 12,
            max_atoms: 20,
            learning_rate: 1e-3,
            batch_size: 64,
            vae_epochs: 50,
            vqvae_epochs: 50,
            kmeans_iters: 100,
        }
    }
}

impl CodebookConfig {
    /// Small networks and a 64-code book for CPU-sized synthetic datasets.
    pub fn desk() -> Self {
        let tf = TransformerConfig { layers: 2, hidden: 64, heads: 4 };
        CodebookConfig {
            codebook_size: 64,
            encoder: tf,
            decoder: tf,
            max_atoms: 8,
            batch_size: 32,
            vae_epochs: 20,
            vqvae_epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.codebook_size < 2 || self.latent_dim == 0 || self.max_neighbors == 0 || self.max_atoms == 0 || self.batch_size == 0 {
            return Err(ModelError::Config(format!("invalid codebook config {self:?}")));
        }
        if !(self.vae_reg_weight >= 0.0 && self.vqvae_reg_weight >= 0.0 && self.learning_rate > 0.0 && self.xi >= 1.0) {
            return Err(ModelError::Config("weights must be >= 0, lr > 0 and xi >= 1".into()));
        }
        Ok(())
    }
}

/// Model inputs and reconstruction targets for one crystal.
#[derive(Clone, Debug)]
pub struct PreparedCrystal {
    /// Standardised crystal the targets were taken from.
    pub crystal: Crystal<f64>,
    pub num_atoms: usize,
    /// `N × (K+1) × 109`, scaled.
    pub env_rows: Vec<f32>,
    /// `N × (K+1)`, 1 for live rows.
    pub env_mask: Vec<f32>,
    /// Species index `Z − 1` per atom.
    pub species: Vec<u32>,
    /// `N × 3`, scaled Cartesian coordinates.
    pub coords: Vec<f32>,
    /// Scaled `L̂`.
    pub lattice: [f32; 6],
}

fn scaled_row(row: &[f64; ATOM_VECTOR_DIM]) -> impl Iterator<Item = f32> + '_ {
    row.iter().enumerate().map(
        |(c, &v)| {
            if COORD_CHANNELS.contains(&c) || LATTICE_CHANNELS.contains(&c) {
                v as f32 / COORD_SCALE
            } else {
                v as f32
            }
        },
    )
}

/// Flattens environments into `(rows [M, K+1, 109], mask [M, K+1])` data.
fn env_data(envs: &[LocalEnvironment<f64>]) -> Result<(Vec<f32>, Vec<f32>, usize)> {
    let k1 = envs.first().map(|e| e.rows.len()).unwrap_or(0);
    if envs.iter().any(|e| e.rows.len() != k1) {
        return Err(ModelError::Config("environments with different K in one batch".into()));
    }
    let mut rows = Vec::with_capacity(envs.len() * k1 * ATOM_VECTOR_DIM);
    let mut mask = Vec::with_capacity(envs.len() * k1);
    for e in envs {
        for (r, pad) in e.rows.iter().zip(&e.pad_mask) {
            rows.extend(scaled_row(r));
            mask.push(if *pad { 0.0 } else { 1.0 });
        }
    }
    Ok((rows, mask, k1))
}

pub fn prepare_crystal(c: &Crystal<f64>, config: &CodebookConfig) -> Result<PreparedCrystal> {
    let std = c.standardized()?;
    if std.num_atoms() > config.max_atoms {
        return Err(ccgen_core::Error::TooManyAtoms { n: std.num_atoms(), max: config.max_atoms }.into());
    }
    let envs = local_environments(&std, config.xi, config.max_neighbors)?;
    let (env_rows, env_mask, _) = env_data(&envs)?;
    let lhat = std.lattice_descriptor()?;
    Ok(PreparedCrystal {
        num_atoms: std.num_atoms(),
        env_rows,
        env_mask,
        species: std.atomic_numbers().iter().map(|&z| z as u32 - 1).collect(),
        coords: std.cart_coords().iter().flatten().map(|&v| v as f32 / COORD_SCALE).collect(),
        lattice: lhat.map(|v| v as f32 / COORD_SCALE),
        crystal: std,
    })
}

pub struct EnvEncoder {
    input: Linear,
    pos: Var,
    body: Transformer,
    mu: Linear,
    log_sigma: Linear,
}

impl EnvEncoder {
    fn new(ps: &mut ParamStore, cfg: &CodebookConfig) -> Result<Self> {
        let h = cfg.encoder.hidden;
        Ok(EnvEncoder {
            input: Linear::new(ps, "enc.in", ATOM_VECTOR_DIM, h)?,
            pos: ps.normal("enc.pos", &[cfg.max_neighbors + 1, h], 0.02)?,
            body: Transformer::new(ps, "enc", &cfg.encoder)?,
            mu: Linear::new(ps, "enc.mu", h, cfg.latent_dim)?,
            log_sigma: Linear::zeros(ps, "enc.log_sigma", h, cfg.latent_dim)?,
        })
    }

    /// `(μ, log σ)`, each `[M, d]`, read from the centre token. Attention
    /// never crosses environment boundaries.
    pub fn forward(&self, rows: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, k1, c) = rows.dims3()?;
        if c != ATOM_VECTOR_DIM || k1 > self.pos.dim(0)? {
            return Err(ModelError::Config(format!("environment tensor of shape {:?} does not fit the encoder", rows.dims())));
        }
        let x = self.input.forward(rows)?.broadcast_add(&self.pos.as_tensor().narrow(0, 0, k1)?)?;
        let h = self.body.forward(&x, mask, None)?;
        let center = h.narrow(1, 0, 1)?.squeeze(1)?;
        Ok((self.mu.forward(&center)?, self.log_sigma.forward(&center)?))
    }
}

/// Decoder heads in scaled units.
pub struct DecoderOutput {
    /// `[B, N, 100]`.
    pub logits: Tensor,
    /// `[B, N, 3]`.
    pub coords: Tensor,
    /// `[B, 6]`.
    pub lattice: Tensor,
}

pub struct CodeDecoder {
    input: Linear,
    pos: Var,
    body: Transformer,
    species: Linear,
    coords: Linear,
    lattice: Linear,
}

impl CodeDecoder {
    fn new(ps: &mut ParamStore, cfg: &CodebookConfig) -> Result<Self> {
        let h = cfg.decoder.hidden;
        Ok(CodeDecoder {
            input: Linear::new(ps, "dec.in", cfg.latent_dim, h)?,
            pos: ps.normal("dec.pos", &[cfg.max_atoms, h], 0.02)?,
            body: Transformer::new(ps, "dec", &cfg.decoder)?,
            species: Linear::new(ps, "dec.species", h, NUM_SPECIES)?,
            coords: Linear::new(ps, "dec.coords", h, 3)?,
            lattice: Linear::new(ps, "dec.lattice", h, 6)?,
        })
    }

    /// Decodes `[B, N, d]` codes; the lattice head reads the masked mean of
    /// the final hidden states.
    pub fn forward(&self, codes: &Tensor, mask: &Tensor) -> Result<DecoderOutput> {
        let n = codes.dim(1)?;
        if n > self.pos.dim(0)? {
            return Err(ccgen_core::Error::TooManyAtoms { n, max: self.pos.dim(0)? }.into());
        }
        let x = self.input.forward(codes)?.broadcast_add(&self.pos.as_tensor().narrow(0, 0, n)?)?;
        let h = self.body.forward(&x, mask, None)?;
        Ok(DecoderOutput {
            logits: self.species.forward(&h)?,
            coords: self.coords.forward(&h)?,
            lattice: self.lattice.forward(&masked_mean(&h, mask)?)?,
        })
    }
}

/// Reconstruction targets for a batch of crystals.
pub struct BatchTargets {
    /// `[B, N]` u32 species indices (0 on padding).
    pub species: Tensor,
    /// `[B, N, 3]`.
    pub coords: Tensor,
    /// `[B, 6]`.
    pub lattice: Tensor,
    /// `[B, N]`, 1 for live atoms.
    pub mask: Tensor,
}

/// Loss terms; `reg` is the KL term in the VAE stage and the codebook plus
/// commitment term in the VQ-VAE stage.
pub struct LossTerms {
    pub species: Tensor,
    pub coords: Tensor,
    pub lattice: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<[f32; 5]> {
        let f = |t: &Tensor| -> Result<f32> { Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()?) };
        Ok([f(&self.species)?, f(&self.coords)?, f(&self.lattice)?, f(&self.reg)?, f(&self.total)?])
    }
}

/// `(L_A, L_X, L_L)`: mean cross-entropy over atoms, mean squared coordinate
/// error per atom, and mean squared `L̂` error per crystal.
pub fn reconstruction_losses(out: &DecoderOutput, tgt: &BatchTargets) -> Result<(Tensor, Tensor, Tensor)> {
    let atoms = tgt.mask.sum_all()?;
    let logp = candle_nn::ops::log_softmax(&out.logits, D::Minus1)?;
    let picked = logp.gather(&tgt.species.unsqueeze(2)?, 2)?.squeeze(2)?;
    let l_a = (picked.mul(&tgt.mask)?.sum_all()?.neg()? / &atoms)?;
    let sq = (&out.coords - &tgt.coords)?.sqr()?.sum(2)?;
    let l_x = (sq.mul(&tgt.mask)?.sum_all()? / &atoms)?;
    let l_l = (&out.lattice - &tgt.lattice)?.sqr()?.sum(1)?.mean_all()?;
    Ok((l_a, l_x, l_l))
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))` summed over dimensions and averaged
/// over rows.
pub fn kl_divergence(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let var = (log_sigma * 2.0)?.exp()?;
    let per = ((mu.sqr()? + var)? - 1.0)? - (log_sigma * 2.0)?;
    Ok((per?.sum(D::Minus1)?.mean_all()? * 0.5)?)
}

/// Codebook term `‖sg[z] − e‖²` and commitment term `‖z − sg[e]‖²`, each
/// averaged over rows.
pub fn codebook_and_commitment(z: &Tensor, e: &Tensor) -> Result<(Tensor, Tensor)> {
    let codebook = (z.detach() - e)?.sqr()?.sum(D::Minus1)?.mean_all()?;
    let commitment = (z - e.detach())?.sqr()?.sum(D::Minus1)?.mean_all()?;
    Ok((codebook, commitment))
}

/// `z + sg[e − z]`: forward value `e`, gradient passed straight to `z`.
pub fn straight_through(z: &Tensor, e: &Tensor) -> Result<Tensor> {
    Ok((z + (e - z)?.detach())?)
}

fn combine(l_a: Tensor, l_x: Tensor, l_l: Tensor, reg: Tensor, weight: f64) -> Result<LossTerms> {
    let total = (((&l_a + &l_x)? + &l_l)? + (&reg * weight)?)?;
    Ok(LossTerms { species: l_a, coords: l_x, lattice: l_l, reg, total })
}

pub fn vae_stage_loss(out: &DecoderOutput, tgt: &BatchTargets, mu: &Tensor, log_sigma: &Tensor, weight: f64) -> Result<LossTerms> {
    let (l_a, l_x, l_l) = reconstruction_losses(out, tgt)?;
    combine(l_a, l_x, l_l, kl_divergence(mu, log_sigma)?, weight)
}

pub fn vqvae_loss(out: &DecoderOutput, tgt: &BatchTargets, z: &Tensor, e: &Tensor, weight: f64) -> Result<LossTerms> {
    let (l_a, l_x, l_l) = reconstruction_losses(out, tgt)?;
    let (cb, commit) = codebook_and_commitment(z, e)?;
    combine(l_a, l_x, l_l, (cb + commit)?, weight)
}

/// Per-crystal decoder output in Å.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedRows {
    pub logits: Vec<Vec<f32>>,
    pub coords: Vec<[f64; 3]>,
    pub lattice: [f64; 6],
}

impl DecodedRows {
    /// Argmax species (lowest index on ties) as atomic numbers.
    pub fn species(&self) -> Vec<u8> {
        self.logits.iter().map(|l| argmax(l) as u8 + 1).collect()
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Lattice `L̃` from a decoded descriptor, or `DecodeFailed` when its smallest
/// eigenvalue is below [`MIN_LATTICE_EIGENVALUE`].
pub fn lattice_from_descriptor(d: &[f64; 6]) -> Result<ccgen_core::Mat3<f64>> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::DecodeFailed("non-finite lattice descriptor".into()));
    }
    let m = descriptor_to_symmetric(d);
    let (eig, _) = symmetric_eigen(&m);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min < MIN_LATTICE_EIGENVALUE {
        return Err(ModelError::DecodeFailed(format!("lattice eigenvalue {min:.3e} below {MIN_LATTICE_EIGENVALUE}")));
    }
    Ok(m)
}

/// Crystal with `L = L̃` (identity rotation) and coordinates wrapped into the
/// cell.
pub fn assemble_crystal(species: Vec<u8>, coords: Vec<[f64; 3]>, descriptor: &[f64; 6]) -> Result<Crystal<f64>> {
    let lattice = lattice_from_descriptor(descriptor)?;
    let c = Crystal::new(lattice, coords, species).map_err(|e| ModelError::DecodeFailed(e.to_string()))?;
    Ok(c.wrapped())
}

fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Rows `[z_0 … z_{M−1}]` arranged into `[B, N, d]` by per-crystal counts,
/// zero-padded.
fn scatter_rows(z: &Tensor, counts: &[usize], n_max: usize) -> Result<Tensor> {
    let (m, d) = z.dims2()?;
    let ext = Tensor::cat(&[z, &Tensor::zeros((1, d), z.dtype(), z.device())?], 0)?;
    let mut idx = Vec::with_capacity(counts.len() * n_max);
    let mut offset = 0u32;
    for &n in counts {
        for r in 0..n_max {
            idx.push(if r < n { offset + r as u32 } else { m as u32 });
        }
        offset += n as u32;
    }
    let idx = Tensor::from_vec(idx, counts.len() * n_max, &DEVICE)?;
    Ok(ext.index_select(&idx, 0)?.reshape((counts.len(), n_max, d))?)
}

fn atom_mask(counts: &[usize], n_max: usize) -> Result<Tensor> {
    let data = counts.iter().flat_map(|&n| (0..n_max).map(move |r| if r < n { 1f32 } else { 0.0 })).collect();
    to_f32_tensor(data, &[counts.len(), n_max])
}

struct Batch {
    env_rows: Tensor,
    env_mask: Tensor,
    counts: Vec<usize>,
    n_max: usize,
    targets: BatchTargets,
}

fn make_batch(items: &[&PreparedCrystal], k1: usize) -> Result<Batch> {
    let counts: Vec<usize> = items.iter().map(|p| p.num_atoms).collect();
    let n_max = counts.iter().copied().max().unwrap_or(1);
    let m: usize = counts.iter().sum();
    let env_rows = to_f32_tensor(items.iter().flat_map(|p| p.env_rows.iter().copied()).collect(), &[m, k1, ATOM_VECTOR_DIM])?;
    let env_mask = to_f32_tensor(items.iter().flat_map(|p| p.env_mask.iter().copied()).collect(), &[m, k1])?;
    let b = items.len();
    let mut species = vec![0u32; b * n_max];
    let mut coords = vec![0f32; b * n_max * 3];
    for (i, p) in items.iter().enumerate() {
        species[i * n_max..i * n_max + p.num_atoms].copy_from_slice(&p.species);
        coords[i * n_max * 3..(i * n_max + p.num_atoms) * 3].copy_from_slice(&p.coords);
    }
    let targets = BatchTargets {
        species: Tensor::from_vec(species, (b, n_max), &DEVICE)?,
        coords: to_f32_tensor(coords, &[b, n_max, 3])?,
        lattice: to_f32_tensor(items.iter().flat_map(|p| p.lattice).collect(), &[b, 6])?,
        mask: atom_mask(&counts, n_max)?,
    };
    Ok(Batch { env_rows, env_mask, counts, n_max, targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    /// Mean over batches of `[L_A, L_X, L_L, L_reg, total]`.
    pub losses: [f32; 5],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub kmeans_inertia: Option<f32>,
    pub kmeans_iterations: Option<usize>,
}

/// Encoder, decoder and codebook sharing one parameter store.
pub struct VqVae {
    config: CodebookConfig,
    seed: u64,
    ps: ParamStore,
    encoder: EnvEncoder,
    decoder: CodeDecoder,
    codebook: Var,
}

const ENCODE_CHUNK: usize = 512;

impl VqVae {
    /// Freshly initialised model; the codebook starts at zero until K-Means.
    pub fn new(config: CodebookConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(derive_seed(seed, "vqvae-init"));
        let encoder = EnvEncoder::new(&mut ps, &config)?;
        let decoder = CodeDecoder::new(&mut ps, &config)?;
        let codebook = ps.constant("codebook", &[config.codebook_size, config.latent_dim], 0.0)?;
        Ok(VqVae { config, seed, ps, encoder, decoder, codebook })
    }

    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    pub fn encoder(&self) -> &EnvEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &CodeDecoder {
        &self.decoder
    }

    pub fn num_parameters(&self) -> usize {
        self.ps.num_parameters()
    }

    pub fn codebook(&self) -> Result<Codebook<f32>> {
        let rows = tensor_rows(self.codebook.as_tensor())?;
        Ok(Codebook::new(self.config.latent_dim, rows.concat())?)
    }

    pub fn set_codebook(&self, cb: &Codebook<f32>) -> Result<()> {
        if cb.len() != self.config.codebook_size || cb.dim() != self.config.latent_dim {
            return Err(ModelError::Config(format!(
                "codebook is {}×{}, model expects {}×{}",
                cb.len(),
                cb.dim(),
                self.config.codebook_size,
                self.config.latent_dim
            )));
        }
        self.codebook.set(&to_f32_tensor(cb.as_slice().to_vec(), &[cb.len(), cb.dim()])?)?;
        Ok(())
    }

    /// Encoder means `μ` for arbitrary environments sharing one `K`.
    pub fn encode_local_envs(&self, envs: &[LocalEnvironment<f64>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(envs.len());
        for chunk in envs.chunks(ENCODE_CHUNK) {
            let (rows, mask, k1) = env_data(chunk)?;
            let rows = to_f32_tensor(rows, &[chunk.len(), k1, ATOM_VECTOR_DIM])?;
            let mask = to_f32_tensor(mask, &[chunk.len(), k1])?;
            let (mu, _) = self.encoder.forward(&rows, &mask)?;
            out.extend(tensor_rows(&mu)?);
        }
        Ok(out)
    }

    /// Per-atom latents of each crystal, rows in canonical atom order of the
    /// standardised crystal.
    pub fn encode_crystals(&self, crystals: &[Crystal<f64>]) -> Result<Vec<Vec<Vec<f32>>>> {
        let prepared = crystals.iter().map(|c| prepare_crystal(c, &self.config)).collect::<Result<Vec<_>>>()?;
        self.encode_prepared(&prepared)
    }

    pub fn encode_prepared(&self, prepared: &[PreparedCrystal]) -> Result<Vec<Vec<Vec<f32>>>> {
        let k1 = self.config.max_neighbors + 1;
        let mut out = Vec::with_capacity(prepared.len());
        let mut start = 0;
        while start < prepared.len() {
            let mut end = start;
            let mut atoms = 0;
            while end < prepared.len() && (end == start || atoms + prepared[end].num_atoms <= ENCODE_CHUNK) {
                atoms += prepared[end].num_atoms;
                end += 1;
            }
            let rows = to_f32_tensor(
                prepared[start..end].iter().flat_map(|p| p.env_rows.iter().copied()).collect(),
                &[atoms, k1, ATOM_VECTOR_DIM],
            )?;
            let mask = to_f32_tensor(prepared[start..end].iter().flat_map(|p| p.env_mask.iter().copied()).collect(), &[atoms, k1])?;
            let mut mu = tensor_rows(&self.encoder.forward(&rows, &mask)?.0)?.into_iter();
            for p in &prepared[start..end] {
                out.push(mu.by_ref().take(p.num_atoms).collect());
            }
            start = end;
        }
        Ok(out)
    }

    pub fn quantize_rows(&self, z: &[Vec<f32>]) -> Result<Vec<LatentAssignment<f32>>> {
        let cb = self.codebook()?;
        z.iter().map(|row| Ok(quantize(row, &cb)?)).collect()
    }

    /// Decodes a batch of per-crystal code matrices (rows of length `d`).
    pub fn decode_codes(&self, batch: &[Vec<Vec<f32>>]) -> Result<Vec<DecodedRows>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(ENCODE_CHUNK / 4) {
            let counts: Vec<usize> = chunk.iter().map(Vec::len).collect();
            if counts.contains(&0) {
                return Err(ModelError::Config("cannot decode an empty code matrix".into()));
            }
            let n_max = counts.iter().copied().max().unwrap_or(1);
            let d = self.config.latent_dim;
            let mut data = vec![0f32; chunk.len() * n_max * d];
            for (i, rows) in chunk.iter().enumerate() {
                for (r, row) in rows.iter().enumerate() {
                    if row.len() != d {
                        return Err(ModelError::Config(format!("code row of length {} for latent dim {d}", row.len())));
                    }
                    data[(i * n_max + r) * d..(i * n_max + r + 1) * d].copy_from_slice(row);
                }
            }
            let codes = to_f32_tensor(data, &[chunk.len(), n_max, d])?;
            let o = self.decoder.forward(&codes, &atom_mask(&counts, n_max)?)?;
            let logits = o.logits.to_vec3::<f32>()?;
            let coords = o.coords.to_vec3::<f32>()?;
            let lattice = o.lattice.to_vec2::<f32>()?;
            for (i, &n) in counts.iter().enumerate() {
                let scale = |v: f32| v as f64 * COORD_SCALE as f64;
                out.push(DecodedRows {
                    logits: logits[i][..n].to_vec(),
                    coords: coords[i][..n].iter().map(|x| [scale(x[0]), scale(x[1]), scale(x[2])]).collect(),
                    lattice: std::array::from_fn(|j| scale(lattice[i][j])),
                });
            }
        }
        Ok(out)
    }

    /// Decoded crystals for code matrices; failures are reported per item.
    pub fn decode_to_crystals(&self, batch: &[Vec<Vec<f32>>]) -> Result<Vec<Result<Crystal<f64>>>> {
        Ok(self.decode_codes(batch)?.into_iter().map(|d| assemble_crystal(d.species(), d.coords.clone(), &d.lattice)).collect())
    }

    /// Encode, quantise and decode each crystal.
    pub fn reconstruct(&self, crystals: &[Crystal<f64>]) -> Result<Vec<Result<Crystal<f64>>>> {
        let latents = self.encode_crystals(crystals)?;
        let cb = self.codebook()?;
        let codes = latents
            .iter()
            .map(|z| z.iter().map(|row| Ok(cb.code(quantize(row, &cb)?.code_index).to_vec())).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        self.decode_to_crystals(&codes)
    }

    /// Per-crystal reconstruction verdicts; a failed decode is a non-match.
    pub fn reconstruct_and_match(&self, crystals: &[Crystal<f64>], matcher: MatcherConfig) -> Result<Vec<bool>> {
        let recon = self.reconstruct(crystals)?;
        Ok(crystals.iter().zip(recon).map(|(c, r)| r.is_ok_and(|r| structures_match(c, &r, matcher))).collect())
    }

    pub fn to_checkpoint(&self, provenance: Vec<String>) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(&self.config)?, self.seed, provenance, &self.ps)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: CodebookConfig = serde_json::from_value(ck.config.clone())?;
        let model = VqVae::new(config, ck.seed)?;
        ck.restore_into(&model.ps)?;
        Ok(model)
    }

    fn stage_epochs(
        &self,
        data: &[PreparedCrystal],
        stage: &str,
        epochs: usize,
        vars: Vec<Var>,
        rng: &mut ChaCha8Rng,
        log: &mut TrainingLog,
        loss_fn: &dyn Fn(&Self, &Batch, &mut ChaCha8Rng) -> Result<LossTerms>,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let mut opt = adam(vars, self.config.learning_rate)?;
        let k1 = self.config.max_neighbors + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut step = 0;
        for epoch in 0..epochs {
            order.shuffle(rng);
            let mut sums = [0f32; 5];
            let mut batches = 0;
            for idx in order.chunks(self.config.batch_size) {
                let items: Vec<&PreparedCrystal> = idx.iter().map(|&i| &data[i]).collect();
                let batch = make_batch(&items, k1)?;
                let terms = loss_fn(self, &batch, rng)?;
                let v = terms.values()?;
                optimizer_step(&mut opt, &terms.total, stage, step)?;
                step += 1;
                batches += 1;
                for (s, x) in sums.iter_mut().zip(v) {
                    *s += x;
                }
            }
            log.epochs.push(EpochLog { stage: stage.into(), epoch, losses: sums.map(|s| s / batches as f32) });
        }
        Ok(())
    }

    fn vae_batch_loss(&self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let (mu, log_sigma) = self.encoder.forward(&b.env_rows, &b.env_mask)?;
        let eps = normal_tensor(rng, mu.dims())?;
        let z = (&mu + log_sigma.exp()?.mul(&eps)?)?;
        let out = self.decoder.forward(&scatter_rows(&z, &b.counts, b.n_max)?, &b.targets.mask)?;
        vae_stage_loss(&out, &b.targets, &mu, &log_sigma, self.config.vae_reg_weight)
    }

    fn vqvae_batch_loss(&self, b: &Batch, _rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let (z, _) = self.encoder.forward(&b.env_rows, &b.env_mask)?;
        let cb = self.codebook()?;
        let idx = tensor_rows(&z)?.iter().map(|row| Ok(quantize(row, &cb)?.code_index as u32)).collect::<Result<Vec<u32>>>()?;
        let n = idx.len();
        let e = self.codebook.as_tensor().index_select(&Tensor::from_vec(idx, n, &DEVICE)?, 0)?;
        let q = straight_through(&z, &e)?;
        let out = self.decoder.forward(&scatter_rows(&q, &b.counts, b.n_max)?, &b.targets.mask)?;
        vqvae_loss(&out, &b.targets, &z, &e, self.config.vqvae_reg_weight)
    }

    fn network_vars(&self) -> Vec<Var> {
        self.ps.named().iter().filter(|(n, _)| n != "codebook").map(|(_, v)| v.clone()).collect()
    }
}

/// VAE pretraining, K-Means over the per-atom means, then joint VQ-VAE
/// fine-tuning of encoder, decoder and codebook.
pub fn train_three_stage(dataset: &[Crystal<f64>], config: CodebookConfig, seed: u64) -> Result<(VqVae, TrainingLog)> {
    if dataset.is_empty() {
        return Err(ccgen_core::Error::InsufficientData { have: 0, need: 1 }.into());
    }
    let model = VqVae::new(config, seed)?;
    let data = dataset.iter().map(|c| prepare_crystal(c, &model.config)).collect::<Result<Vec<_>>>()?;
    let mut log = TrainingLog::default();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vae"));
    model
        .stage_epochs(&data, "vae", model.config.vae_epochs, model.network_vars(), &mut rng, &mut log, &|m, b, r| m.vae_batch_loss(b, r))?;

    let latents: Vec<Vec<f32>> = model.encode_prepared(&data)?.into_iter().flatten().collect();
    let km = kmeans(&latents, model.config.codebook_size, derive_seed(seed, "kmeans"), model.config.kmeans_iters)?;
    model.set_codebook(&km.codebook)?;
    log.kmeans_inertia = Some(km.inertia);
    log.kmeans_iterations = Some(km.iterations);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vqvae"));
    model.stage_epochs(&data, "vqvae", model.config.vqvae_epochs, model.ps.vars(), &mut rng, &mut log, &|m, b, r| {
        m.vqvae_batch_loss(b, r)
    })?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ccgen_core::crystal::find_local_environment;
    use ccgen_core::Mat3;

    fn tiny_config() -> CodebookConfig {
        let tf = TransformerConfig { layers: 1, hidden: 16, heads: 2 };
        CodebookConfig {
            codebook_size: 4,
            latent_dim: 3,
            encoder: tf,
            decoder: tf,
            max_atoms: 4,
            batch_size: 2,
            vae_epochs: 0,
            vqvae_epochs: 0,
            kmeans_iters: 20,
            ..CodebookConfig::default()
        }
    }

    fn rock_salt(a: f64) -> Crystal<f64> {
        let l = Mat3::from_rows([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]).scale(a);
        Crystal::from_fractional(l, &[[0.0; 3], [0.5; 3]], vec![11, 17]).unwrap()
    }

    fn cscl(a: f64) -> Crystal<f64> {
        Crystal::from_fractional(Mat3::diag([a; 3]), &[[0.0; 3], [0.5; 3]], vec![55, 17]).unwrap()
    }

    #[test]
    fn duplicated_and_permuted_envs_encode_consistently() {
        let m = VqVae::new(tiny_config(), 0).unwrap();
        let c = cscl(4.1);
        let e0 = find_local_environment(&c, 0, 1.1, 12).unwrap();
        let e1 = find_local_environment(&c, 1, 1.1, 12).unwrap();
        let a = m.encode_local_envs(&[e0.clone(), e1.clone(), e0.clone()]).unwrap();
        assert_eq!(a[0], a[2]);
        let b = m.encode_local_envs(&[e1, e0]).unwrap();
        for (x, y) in a[0].iter().zip(&b[1]) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn extra_padding_does_not_change_latent() {
        let cfg = CodebookConfig { max_neighbors: 16, ..tiny_config() };
        let m = VqVae::new(cfg, 1).unwrap();
        let c = Crystal::new(Mat3::diag([3.0; 3]), vec![[0.0; 3]], vec![29]).unwrap();
        let short = find_local_environment(&c, 0, 1.1, 12).unwrap();
        let long = find_local_environment(&c, 0, 1.1, 16).unwrap();
        assert_eq!(short.valid_count, 7);
        let a = m.encode_local_envs(&[short]).unwrap();
        let b = m.encode_local_envs(&[long]).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn single_atom_decode_is_finite() {
        let m = VqVae::new(tiny_config(), 2).unwrap();
        let d = m.decode_codes(&[vec![vec![0.3, -0.2, 0.1]]]).unwrap();
        assert_eq!(d[0].logits.len(), 1);
        assert!(d[0].logits[0].iter().all(|v| v.is_finite()));
        assert!(d[0].lattice.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_epoch_training_yields_kmeans_codebook() {
        let data = vec![rock_salt(5.6), cscl(4.1), rock_salt(5.0)];
        let (m, log) = train_three_stage(&data, tiny_config(), 7).unwrap();
        assert!(log.epochs.is_empty());
        let latents: Vec<Vec<f32>> = m.encode_crystals(&data).unwrap().into_iter().flatten().collect();
        let km = kmeans(&latents, 4, derive_seed(7, "kmeans"), 20).unwrap();
        assert_eq!(m.codebook().unwrap(), km.codebook);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = CodebookConfig { vae_epochs: 2, vqvae_epochs: 2, ..tiny_config() };
        let data = vec![rock_salt(5.6), cscl(4.1), rock_salt(5.0)];
        let (a, la) = train_three_stage(&data, cfg.clone(), 3).unwrap();
        let (b, lb) = train_three_stage(&data, cfg, 3).unwrap();
        assert_eq!(a.codebook().unwrap(), b.codebook().unwrap());
        assert_eq!(la, lb);
        assert_eq!(la.epochs.len(), 4);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let data = vec![rock_salt(5.6), cscl(4.1)];
        let (m, _) = train_three_stage(&data, tiny_config(), 4).unwrap();
        let back = VqVae::from_checkpoint(&m.to_checkpoint(vec!["test".into()]).unwrap()).unwrap();
        assert_eq!(m.encode_crystals(&data).unwrap(), back.encode_crystals(&data).unwrap());
        assert_eq!(m.codebook().unwrap(), back.codebook().unwrap());
    }

    #[test]
    fn lattice_decode_rejects_non_positive_definite() {
        assert!(lattice_from_descriptor(&[4.0, 0.0, 0.0, 4.0, 0.0, 4.0]).is_ok());
        assert!(matches!(lattice_from_descriptor(&[4.0, 0.0, 0.0, 4.0, 0.0, -1.0]), Err(ModelError::DecodeFailed(_))));
        assert!(matches!(lattice_from_descriptor(&[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]), Err(ModelError::DecodeFailed(_))));
    }

    #[test]
    fn assembled_exact_crystal_matches_input() {
        let c = rock_salt(5.6).standardized().unwrap();
        let lhat = c.lattice_descriptor().unwrap();
        let back = assemble_crystal(c.atomic_numbers().to_vec(), c.cart_coords().to_vec(), &lhat).unwrap();
        assert!(structures_match(&c, &back, MatcherConfig::default()));
    }

    #[test]
    fn kl_closed_form_values() {
        let mu = Tensor::new(&[[1f32]], &DEVICE).unwrap();
        let ls = Tensor::new(&[[0f32]], &DEVICE).unwrap();
        assert_abs_diff_eq!(kl_divergence(&mu, &ls).unwrap().to_scalar::<f32>().unwrap(), 0.5, epsilon = 1e-7);
        let zero = Tensor::zeros((3, 4), DType::F32, &DEVICE).unwrap();
        assert_eq!(kl_divergence(&zero, &zero).unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn stop_gradients_route_to_the_right_side() {
        let z = Var::new(&[[0.5f64, -1.0]], &DEVICE).unwrap();
        let e = Var::new(&[[0.1f64, 0.3]], &DEVICE).unwrap();
        let (cb, commit) = codebook_and_commitment(z.as_tensor(), e.as_tensor()).unwrap();
        let g = cb.backward().unwrap();
        assert!(g.get(z.as_tensor()).is_none());
        assert!(g.get(e.as_tensor()).is_some());
        let g = commit.backward().unwrap();
        assert!(g.get(z.as_tensor()).is_some());
        assert!(g.get(e.as_tensor()).is_none());
    }

    #[test]
    fn straight_through_gradient_matches_finite_difference() {
        let w = [0.7f64, -1.3, 2.1];
        let f = |q: &[f64]| q.iter().zip(&w).map(|(a, b)| b * a * a).sum::<f64>();
        let e = [0.2f64, -0.4, 0.9];
        let z = Var::new(&[[1.0f64, 0.5, -0.3]], &DEVICE).unwrap();
        let et = Tensor::new(&[e], &DEVICE).unwrap();
        let q = straight_through(z.as_tensor(), &et).unwrap();
        for (a, b) in q.to_vec2::<f64>().unwrap()[0].iter().zip(e) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let wt = Tensor::new(&[w], &DEVICE).unwrap();
        let loss = q.sqr().unwrap().mul(&wt).unwrap().sum_all().unwrap();
        let grad = loss.backward().unwrap().get(z.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut plus = e;
            let mut minus = e;
            plus[k] += h;
            minus[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((grad[0][k] - fd).abs() < 1e-4, "{} vs {fd}", grad[0][k]);
        }
    }
}
