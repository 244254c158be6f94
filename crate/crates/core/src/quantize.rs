//! Codebook storage, nearest-code quantisation and K-Means initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `T` concept vectors of dimension `d`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook<F = f32> {
    dim: usize,
    codes: Vec<F>,
}

/// Result of quantising one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAssignment<F = f32> {
    pub z: Vec<F>,
    pub code_index: usize,
    /// Squared Euclidean distance to the selected code.
    pub distance: F,
}

impl<F: Real> Codebook<F> {
    pub fn new(dim: usize, codes: Vec<F>) -> Result<Self> {
        if dim == 0 || codes.is_empty() || codes.len() % dim != 0 {
            return Err(Error::Config(format!("codebook of {} values is not a multiple of dim {dim}", codes.len())));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite codebook entry".into()));
        }
        Ok(Codebook { dim, codes })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Config("ragged codebook rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, t: usize) -> &[F] {
        &self.codes[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.codes
    }

    pub fn rows(&self) -> impl Iterator<Item = &[F]> {
        self.codes.chunks(self.dim)
    }

    /// Whether any two codes are bitwise identical.
    pub fn has_duplicate_rows(&self) -> bool {
        let n = self.len();
        (0..n).any(|a| ((a + 1)..n).any(|b| self.code(a) == self.code(b)))
    }
}

#[inline]
pub fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Nearest code under squared Euclidean distance; ties go to the lowest index.
pub fn quantize<F: Real>(z: &[F], cb: &Codebook<F>) -> Result<LatentAssignment<F>> {
    if z.len() != cb.dim() {
        return Err(Error::Config(format!("latent dim {} != codebook dim {}", z.len(), cb.dim())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite latent".into()));
    }
    let (mut best, mut best_d) = (0, F::infinity());
    for (t, code) in cb.rows().enumerate() {
        let d = squared_distance(z, code);
        if d < best_d {
            best = t;
            best_d = d;
        }
    }
    Ok(LatentAssignment { z: z.to_vec(), code_index: best, distance: best_d })
}

/// Outcome of Lloyd's algorithm.
#[derive(Clone, Debug)]
pub struct KMeansResult<F = f32> {
    pub codebook: Codebook<F>,
    pub assignments: Vec<usize>,
    pub inertia: F,
    pub iterations: usize,
}

pub fn inertia<F: Real>(points: &[Vec<F>], cb: &Codebook<F>) -> F {
    points.iter().map(|p| cb.rows().map(|c| squared_distance(p, c)).fold(F::infinity(), F::min)).sum()
}

/// K-Means with k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_init<F: Real>(latents: &[Vec<F>], t: usize, seed: u64) -> Result<Codebook<F>> {
    Ok(kmeans(latents, t, seed, 100)?.codebook)
}

pub fn kmeans<F: Real>(latents: &[Vec<F>], t: usize, seed: u64, max_iter: usize) -> Result<KMeansResult<F>> {
    if t == 0 {
        return Err(Error::Config("need at least one cluster".into()));
    }
    if latents.len() < t {
        return Err(Error::InsufficientData { have: latents.len(), need: t });
    }
    let dim = latents[0].len();
    if dim == 0 || latents.iter().any(|p| p.len() != dim) {
        return Err(Error::Config("latents must share a non-zero dimension".into()));
    }
    if latents.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite latent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = plus_plus_seed(latents, t, &mut rng)?;
    lloyd(latents, centers, max_iter)
}

/// Runs Lloyd's algorithm from explicit starting centres.
pub fn lloyd<F: Real>(latents: &[Vec<F>], mut centers: Vec<Vec<F>>, max_iter: usize) -> Result<KMeansResult<F>> {
    let t = centers.len();
    let dim = centers[0].len();
    let mut assignments = vec![usize::MAX; latents.len()];
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let cb = Codebook::from_rows(&centers)?;
        let mut changed = false;
        for (p, a) in latents.iter().zip(assignments.iter_mut()) {
            let q = quantize(p, &cb)?.code_index;
            if q != *a {
                *a = q;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![F::zero(); dim]; t];
        let mut counts = vec![0usize; t];
        for (p, &a) in latents.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s = *s + v;
            }
        }
        for k in 0..t {
            // empty clusters keep their previous centre
            if counts[k] > 0 {
                let n = F::of_usize(counts[k]);
                centers[k] = sums[k].iter().map(|&s| s / n).collect();
            }
        }
    }
    separate_duplicates(latents, &mut centers);
    let codebook = Codebook::from_rows(&centers)?;
    let assignments: Vec<usize> = latents.iter().map(|p| quantize(p, &codebook).map(|a| a.code_index)).collect::<Result<_>>()?;
    Ok(KMeansResult { inertia: inertia(latents, &codebook), codebook, assignments, iterations })
}

fn plus_plus_seed<F: Real>(latents: &[Vec<F>], t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<F>>> {
    let mut centers = vec![latents[rng.random_range(0..latents.len())].clone()];
    let mut d2: Vec<F> = latents.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < t {
        let total: F = d2.iter().copied().sum();
        if total <= F::zero() {
            return Err(Error::InsufficientData { have: centers.len(), need: t });
        }
        let target = F::lit(rng.random::<f64>()) * total;
        let mut acc = F::zero();
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            acc = acc + w;
            if w > F::zero() && acc >= target {
                pick = Some(i);
                break;
            }
        }
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > F::zero()).expect("positive total mass"));
        centers.push(latents[pick].clone());
        for (d, p) in d2.iter_mut().zip(latents) {
            *d = d.min(squared_distance(p, &centers[centers.len() - 1]));
        }
    }
    Ok(centers)
}

/// Replaces bitwise-duplicate centres with the points farthest from the
/// current codebook so that every code is distinct.
fn separate_duplicates<F: Real>(latents: &[Vec<F>], centers: &mut [Vec<F>]) {
    for k in 1..centers.len() {
        if centers[..k].iter().any(|c| *c == centers[k]) {
            let far = latents
                .iter()
                .filter(|p| !centers.iter().any(|c| c == *p))
                .max_by(|a, b| {
                    let da = centers.iter().map(|c| squared_distance(*a, c)).fold(F::infinity(), F::min);
                    let db = centers.iter().map(|c| squared_distance(*b, c)).fold(F::infinity(), F::min);
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                })
                .cloned();
            if let Some(p) = far {
                centers[k] = p;
            }
        }
    }
}
