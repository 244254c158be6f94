//! Concept interpretation: nearest environments per code, per-family code
//! usage profiles, the symmetry classifier over concept sequences, and
//! composition adherence of generated crystals.

use std::collections::HashMap;
use std::fmt::Write as _;

use candle_core::{Tensor, D};
use ccgen_core::crystal::local_environments;
use ccgen_core::io::LabeledCrystal;
use ccgen_core::{Crystal, CrystalFamily, LocalEnvironment};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{ModelError, Result};
use crate::nn::{adam, masked_mean, optimizer_step, to_f32_tensor, Linear, ParamStore, Transformer, TransformerConfig};
use crate::vqvae::VqVae;

/// Code assignment of every atom of every crystal.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeAssignments {
    /// `codes[c][a]` is the code of atom `a` (canonical order) of crystal `c`.
    pub codes: Vec<Vec<usize>>,
    /// Squared distance `‖z − e‖²` per atom.
    pub distances: Vec<Vec<f32>>,
}

pub fn assign_codes(crystals: &[Crystal<f64>], vq: &VqVae) -> Result<CodeAssignments> {
    let mut codes = Vec::with_capacity(crystals.len());
    let mut distances = Vec::with_capacity(crystals.len());
    for z in vq.encode_crystals(crystals)? {
        let a = vq.quantize_rows(&z)?;
        codes.push(a.iter().map(|x| x.code_index).collect());
        distances.push(a.iter().map(|x| x.distance).collect());
    }
    Ok(CodeAssignments { codes, distances })
}

/// One environment assigned to a code.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievedEnvironment {
    pub crystal_index: usize,
    pub atom_index: usize,
    pub center_species: u8,
    pub neighbor_species: Vec<u8>,
    pub neighbor_distances: Vec<f64>,
    /// `‖z − e_t‖²`.
    pub distance: f32,
    #[serde(skip)]
    pub environment: LocalEnvironment<f64>,
}

/// The `k` environments closest to code `t` among those assigned to it,
/// by nondecreasing distance (ties by crystal, then atom index).
pub fn top_k_environments(t: usize, dataset: &[Crystal<f64>], vq: &VqVae, k: usize) -> Result<Vec<RetrievedEnvironment>> {
    let size = vq.config().codebook_size;
    if t >= size {
        return Err(ModelError::Config(format!("code index {t} out of range for {size} codes")));
    }
    let assignments = assign_codes(dataset, vq)?;
    let mut hits: Vec<(f32, usize, usize)> = Vec::new();
    for (ci, (codes, dists)) in assignments.codes.iter().zip(&assignments.distances).enumerate() {
        for (ai, (&code, &d)) in codes.iter().zip(dists).enumerate() {
            if code == t {
                hits.push((d, ci, ai));
            }
        }
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    hits.truncate(k);
    let cfg = vq.config();
    hits.into_iter()
        .map(|(distance, ci, ai)| {
            let std = dataset[ci].standardized()?;
            let env = local_environments(&std, cfg.xi, cfg.max_neighbors)?.swap_remove(ai);
            Ok(RetrievedEnvironment {
                crystal_index: ci,
                atom_index: ai,
                center_species: std.atomic_numbers()[ai],
                neighbor_species: env.neighbors.iter().map(|n| std.atomic_numbers()[n.atom]).collect(),
                neighbor_distances: env.neighbors.iter().map(|n| n.distance).collect(),
                distance,
                environment: env,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyProfile {
    pub family: CrystalFamily,
    /// Atoms of the family assigned to each code.
    pub counts: Vec<u64>,
    /// `counts` normalised to sum 1, or all zero for an empty family.
    pub p: Vec<f64>,
}

impl FamilyProfile {
    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// Cosine similarities between the non-empty family profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySimilarity {
    pub families: Vec<CrystalFamily>,
    pub values: Vec<Vec<f64>>,
    /// Rows and columns kept for reference but left out of comparisons.
    pub flagged: Vec<bool>,
}

impl FamilySimilarity {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,flagged");
        for f in &self.families {
            let _ = write!(out, ",{}", f.name());
        }
        out.push('\n');
        for ((f, row), flag) in self.families.iter().zip(&self.values).zip(&self.flagged) {
            let _ = write!(out, "{},{}", f.name(), *flag as u8);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Grey-scale heatmap; flagged rows and columns are hatched.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 60;
        const MARGIN: usize = 110;
        let n = self.families.len();
        let size = MARGIN + n * CELL + 10;
        let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#);
        out.push('\n');
        for (i, f) in self.families.iter().enumerate() {
            let c = MARGIN + i * CELL + CELL / 2;
            let _ = writeln!(out, r#"<text x="{}" y="{c}" text-anchor="end" dominant-baseline="middle">{}</text>"#, MARGIN - 6, f.name());
            let _ = writeln!(out, r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#, MARGIN - 8, f.name());
        }
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
                let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
                let stroke = if self.flagged[i] || self.flagged[j] { r#" stroke="red" stroke-dasharray="4 2""# } else { "" };
                let _ = writeln!(out, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},{shade})"{stroke}/>"#);
                let text = if shade < 128 { "white" } else { "black" };
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" text-anchor="middle" dominant-baseline="middle" fill="{text}">{v:.2}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Per-atom code counts per family from precomputed assignments.
pub fn profiles_from_codes(codes: &[Vec<usize>], families: &[CrystalFamily], codebook_size: usize) -> Result<(Vec<FamilyProfile>, FamilySimilarity)> {
    if codes.len() != families.len() {
        return Err(ModelError::Config("one family label per crystal required".into()));
    }
    let mut profiles: Vec<FamilyProfile> =
        CrystalFamily::ALL.iter().map(|&family| FamilyProfile { family, counts: vec![0; codebook_size], p: vec![0.0; codebook_size] }).collect();
    for (crystal_codes, family) in codes.iter().zip(families) {
        for &t in crystal_codes {
            if t >= codebook_size {
                return Err(ModelError::Config(format!("code index {t} out of range")));
            }
            profiles[family.index()].counts[t] += 1;
        }
    }
    for prof in &mut profiles {
        let total: u64 = prof.counts.iter().sum();
        if total > 0 {
            prof.p = prof.counts.iter().map(|&c| c as f64 / total as f64).collect();
        }
    }
    let live: Vec<&FamilyProfile> = profiles.iter().filter(|p| !p.is_empty()).collect();
    let values = live.iter().map(|a| live.iter().map(|b| if a.family == b.family { 1.0 } else { cosine(&a.p, &b.p) }).collect()).collect();
    let similarity = FamilySimilarity {
        families: live.iter().map(|p| p.family).collect(),
        values,
        flagged: live.iter().map(|p| p.family == CrystalFamily::Triclinic).collect(),
    };
    Ok((profiles, similarity))
}

fn family_of(c: &LabeledCrystal) -> Result<CrystalFamily> {
    c.space_group
        .and_then(CrystalFamily::from_space_group)
        .ok_or_else(|| ModelError::Config(format!("crystal without a valid space-group label ({:?})", c.space_group)))
}

pub fn family_profiles(dataset: &[LabeledCrystal], vq: &VqVae) -> Result<(Vec<FamilyProfile>, FamilySimilarity)> {
    let families = dataset.iter().map(family_of).collect::<Result<Vec<_>>>()?;
    let crystals: Vec<Crystal<f64>> = dataset.iter().map(|l| l.crystal.clone()).collect();
    let assignments = assign_codes(&crystals, vq)?;
    profiles_from_codes(&assignments.codes, &families, vq.config().codebook_size)
}

pub const NUM_SPACE_GROUPS: usize = 230;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub net: TransformerConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of crystals held out for evaluation.
    pub test_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            net: TransformerConfig { layers: 8, hidden: 512, heads: 8 },
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            test_fraction: 0.2,
        }
    }
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        ClassifierConfig { net: TransformerConfig { layers: 2, hidden: 64, heads: 4 }, epochs: 30, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_size: usize,
    pub test_size: usize,
    pub space_group_accuracy: f64,
    pub family_accuracy: f64,
    pub epoch_losses: Vec<f32>,
}

/// Transformer over concept sequences, mean pooled, then a two-layer MLP
/// with a 230-way space-group head and a 6-way family head.
pub struct SymmetryClassifier {
    input: Linear,
    body: Transformer,
    mlp: Linear,
    space_group_head: Linear,
    family_head: Linear,
}

impl SymmetryClassifier {
    pub fn new(ps: &mut ParamStore, latent_dim: usize, net: &TransformerConfig) -> Result<Self> {
        net.validate()?;
        let h = net.hidden;
        Ok(SymmetryClassifier {
            input: Linear::new(ps, "cls.in", latent_dim, h)?,
            body: Transformer::new(ps, "cls", net)?,
            mlp: Linear::new(ps, "cls.mlp", h, h)?,
            space_group_head: Linear::new(ps, "cls.sg", h, NUM_SPACE_GROUPS)?,
            family_head: Linear::new(ps, "cls.family", h, CrystalFamily::ALL.len())?,
        })
    }

    /// `(space-group logits [B, 230], family logits [B, 6])`.
    pub fn forward(&self, e: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.body.forward(&self.input.forward(e)?, mask, None)?;
        let pooled = self.mlp.forward(&masked_mean(&h, mask)?)?.gelu()?;
        Ok((self.space_group_head.forward(&pooled)?, self.family_head.forward(&pooled)?))
    }
}

struct ClassifierBatch {
    e: Tensor,
    mask: Tensor,
    space_groups: Tensor,
    families: Tensor,
}

fn classifier_batch(items: &[usize], seqs: &[Vec<Vec<f32>>], labels: &[(u16, CrystalFamily)], d: usize) -> Result<ClassifierBatch> {
    let n_max = items.iter().map(|&i| seqs[i].len()).max().unwrap_or(1);
    let mut e = vec![0f32; items.len() * n_max * d];
    let mut mask = vec![0f32; items.len() * n_max];
    for (b, &i) in items.iter().enumerate() {
        for (r, row) in seqs[i].iter().enumerate() {
            e[(b * n_max + r) * d..(b * n_max + r + 1) * d].copy_from_slice(row);
            mask[b * n_max + r] = 1.0;
        }
    }
    let sg: Vec<u32> = items.iter().map(|&i| labels[i].0 as u32 - 1).collect();
    let fam: Vec<u32> = items.iter().map(|&i| labels[i].1.index() as u32).collect();
    Ok(ClassifierBatch {
        e: to_f32_tensor(e, &[items.len(), n_max, d])?,
        mask: to_f32_tensor(mask, &[items.len(), n_max])?,
        space_groups: Tensor::new(sg, &crate::nn::DEVICE)?,
        families: Tensor::new(fam, &crate::nn::DEVICE)?,
    })
}

fn correct(logits: &Tensor, targets: &Tensor) -> Result<usize> {
    let pred = logits.argmax(D::Minus1)?;
    Ok(pred.eq(targets)?.to_dtype(candle_core::DType::F32)?.sum_all()?.to_scalar::<f32>()? as usize)
}

/// Trains on a seeded split of `dataset` and reports held-out accuracies.
/// Inputs are the quantised concept sequences `E` of each crystal.
pub fn train_symmetry_classifier(
    dataset: &[LabeledCrystal],
    vq: &VqVae,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(SymmetryClassifier, ClassifierReport)> {
    if !(0.0..1.0).contains(&config.test_fraction) || config.batch_size == 0 {
        return Err(ModelError::Config("test_fraction must lie in [0, 1) and batch_size must be positive".into()));
    }
    let labels = dataset
        .iter()
        .map(|c| Ok((c.space_group.filter(|s| (1..=230).contains(s)).ok_or_else(|| ModelError::Config("missing space group".into()))?, family_of(c)?)))
        .collect::<Result<Vec<_>>>()?;
    if dataset.len() < 2 {
        return Err(ccgen_core::Error::InsufficientData { have: dataset.len(), need: 2 }.into());
    }
    let crystals: Vec<Crystal<f64>> = dataset.iter().map(|l| l.crystal.clone()).collect();
    let cb = vq.codebook()?;
    let assignments = assign_codes(&crystals, vq)?;
    let seqs: Vec<Vec<Vec<f32>>> = assignments.codes.iter().map(|c| c.iter().map(|&t| cb.code(t).to_vec()).collect()).collect();
    let d = cb.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "classifier-split"));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((dataset.len() as f64 * config.test_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();

    let mut ps = ParamStore::new(derive_seed(seed, "classifier-init"));
    let model = SymmetryClassifier::new(&mut ps, d, &config.net)?;
    let mut opt = adam(ps.vars(), config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "classifier-train"));
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for idx in train.chunks(config.batch_size) {
            let b = classifier_batch(idx, &seqs, &labels, d)?;
            let (sg, fam) = model.forward(&b.e, &b.mask)?;
            let loss = (candle_nn::loss::cross_entropy(&sg, &b.space_groups)? + candle_nn::loss::cross_entropy(&fam, &b.families)?)?;
            sum += optimizer_step(&mut opt, &loss, "classifier", step)?;
            step += 1;
            count += 1;
        }
        epoch_losses.push(sum / count.max(1) as f32);
    }
    let (mut sg_ok, mut fam_ok) = (0, 0);
    for idx in test.chunks(config.batch_size) {
        let b = classifier_batch(idx, &seqs, &labels, d)?;
        let (sg, fam) = model.forward(&b.e, &b.mask)?;
        sg_ok += correct(&sg, &b.space_groups)?;
        fam_ok += correct(&fam, &b.families)?;
    }
    let report = ClassifierReport {
        train_size: train.len(),
        test_size: test.len(),
        space_group_accuracy: sg_ok as f64 / test.len() as f64,
        family_accuracy: fam_ok as f64 / test.len() as f64,
        epoch_losses,
    };
    Ok((model, report))
}

/// Fraction of `generated` codes matched by `conditioning`, each
/// conditioning code consumed at most once.
pub fn multiset_adherence(generated: &[usize], conditioning: &[usize]) -> f64 {
    if generated.is_empty() {
        return 0.0;
    }
    let mut pool: HashMap<usize, usize> = HashMap::new();
    for &t in conditioning {
        *pool.entry(t).or_default() += 1;
    }
    let mut hits = 0;
    for t in generated {
        if let Some(n) = pool.get_mut(t).filter(|n| **n > 0) {
            *n -= 1;
            hits += 1;
        }
    }
    hits as f64 / generated.len() as f64
}

/// Re-encodes and quantises `generated` and scores it against the
/// conditioning code multiset.
pub fn verify_composition_adherence(generated: &Crystal<f64>, conditioning: &[usize], vq: &VqVae) -> Result<f64> {
    let codes = assign_codes(std::slice::from_ref(generated), vq)?.codes.swap_remove(0);
    Ok(multiset_adherence(&codes, conditioning))
}

/// Mean adherence when generated crystals are paired with conditions
/// drawn uniformly at random, over `trials` Monte-Carlo rounds.
pub fn random_pairing_baseline(generated: &[Vec<usize>], conditions: &[Vec<usize>], trials: usize, rng: &mut impl Rng) -> f64 {
    if generated.is_empty() || conditions.is_empty() || trials == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for _ in 0..trials {
        for g in generated {
            total += multiset_adherence(g, &conditions[rng.random_range(0..conditions.len())]);
        }
    }
    total / (trials * generated.len()) as f64
}
