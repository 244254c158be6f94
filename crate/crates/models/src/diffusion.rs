//! DDPM training objective and ancestral sampler over `[B, N, C]` tensors
//! with a per-row validity mask, for any [`Denoiser`].

use candle_core::Tensor;
use ccgen_core::schedule::NoiseSchedule;
use rand::Rng;

use crate::error::{ModelError, Result};
use crate::nn::{normal_tensor, to_f32_tensor, DEVICE};

/// Conditioning passed to a denoiser.
#[derive(Clone, Copy)]
pub enum Condition<'a> {
    /// Null condition for the whole batch.
    Null,
    /// Per-row condition `[B, N, d]`; `keep` is `[B]` with 1 to use the
    /// rows and 0 to substitute the null condition.
    Rows { rows: &'a Tensor, keep: &'a Tensor },
}

pub trait Denoiser {
    /// Predicts the injected noise for `x_s` (`[B, N, C]`) at 1-indexed
    /// steps `steps` (length `B`); `mask` is `[B, N]` with 1 for live rows.
    fn predict_noise(&self, x_s: &Tensor, steps: &[usize], mask: &Tensor, cond: Condition) -> Result<Tensor>;
}

/// `√ᾱ_s` and `√(1−ᾱ_s)` per batch element as `[B, 1, 1]` tensors.
fn forward_coefficients(sched: &NoiseSchedule<f64>, steps: &[usize]) -> Result<(Tensor, Tensor)> {
    let b = steps.len();
    let a: Vec<f32> = steps.iter().map(|&s| sched.alpha_bar(s).sqrt() as f32).collect();
    let n: Vec<f32> = steps.iter().map(|&s| (1.0 - sched.alpha_bar(s)).sqrt() as f32).collect();
    Ok((to_f32_tensor(a, &[b, 1, 1])?, to_f32_tensor(n, &[b, 1, 1])?))
}

/// `x_s = √ᾱ_s·x0 + √(1−ᾱ_s)·ε` with per-element steps.
pub fn forward_diffuse_batch(x0: &Tensor, steps: &[usize], eps: &Tensor, sched: &NoiseSchedule<f64>) -> Result<Tensor> {
    if steps.iter().any(|&s| s == 0 || s > sched.steps()) {
        return Err(ModelError::Config("diffusion step out of range".into()));
    }
    let (a, n) = forward_coefficients(sched, steps)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&n)?)?)
}

/// Masked mean of `(ε − ε̂)²` over live rows and all channels.
pub fn masked_mse(eps: &Tensor, eps_hat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(ModelError::Config(format!("denoiser output {:?} differs from input {:?}", eps_hat.dims(), eps.dims())));
    }
    let channels = eps.dim(2)? as f64;
    let sq = (eps - eps_hat)?.sqr()?.broadcast_mul(&mask.unsqueeze(2)?)?;
    let live = mask.sum_all()?.clamp(1.0, f64::INFINITY)?;
    Ok((sq.sum_all()? / channels)?.div(&live)?)
}

/// Loss for explicit steps, noise and condition-keep flags.
pub fn ddpm_loss_with(
    den: &dyn Denoiser,
    x0: &Tensor,
    mask: &Tensor,
    cond: Option<&Tensor>,
    sched: &NoiseSchedule<f64>,
    steps: &[usize],
    eps: &Tensor,
    keep: &Tensor,
) -> Result<Tensor> {
    let x_s = forward_diffuse_batch(x0, steps, eps, sched)?;
    let condition = match cond {
        Some(rows) => Condition::Rows { rows, keep },
        None => Condition::Null,
    };
    let eps_hat = den.predict_noise(&x_s, steps, mask, condition)?;
    masked_mse(eps, &eps_hat, mask)
}

/// DDPM noise-prediction loss: `s ~ U{1..S}`, `ε ~ N(0, I)`, and with
/// probability `cond_drop_prob` the condition is replaced by the null one.
pub fn ddpm_training_loss(
    den: &dyn Denoiser,
    x0: &Tensor,
    mask: &Tensor,
    cond: Option<&Tensor>,
    sched: &NoiseSchedule<f64>,
    cond_drop_prob: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let b = x0.dim(0)?;
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = normal_tensor(rng, x0.dims())?;
    let keep: Vec<f32> = (0..b).map(|_| if rng.random::<f64>() < cond_drop_prob { 0.0 } else { 1.0 }).collect();
    let keep = to_f32_tensor(keep, &[b])?;
    ddpm_loss_with(den, x0, mask, cond, sched, &steps, &eps, &keep)
}

/// Ancestral sampler. With a condition and `omega > 0` the guided noise is
/// `(1+ω)·ε_cond − ω·ε_uncond`; at `omega == 0` only the conditional
/// prediction is evaluated, so the result equals pure conditional sampling.
///
/// With `x0_clip = None` the posterior mean is `(x_s − β_s/√(1−ᾱ_s)·ε̃)/√α_s`.
/// With `Some(c)` the implied `x̂0` is clamped to `[−c, c]` before forming
/// the same posterior mean, which keeps the first steps (where `1/√α_s` is
/// about 30 for a cosine schedule) from amplifying prediction errors.
pub fn reverse_sample(
    den: &dyn Denoiser,
    shape: &[usize],
    mask: &Tensor,
    cond: Option<&Tensor>,
    sched: &NoiseSchedule<f64>,
    omega: f64,
    x0_clip: Option<f64>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if x0_clip.is_some_and(|c| !(c > 0.0)) {
        return Err(ModelError::Config("x0 clip bound must be positive".into()));
    }
    let b = shape[0];
    let mut x = normal_tensor(rng, shape)?;
    let ones = Tensor::ones(b, candle_core::DType::F32, &DEVICE)?;
    let zeros = Tensor::zeros(b, candle_core::DType::F32, &DEVICE)?;
    let doubled = match cond {
        Some(rows) if omega != 0.0 => {
            Some((Tensor::cat(&[rows, rows], 0)?, Tensor::cat(&[&ones, &zeros], 0)?, Tensor::cat(&[mask, mask], 0)?))
        }
        _ => None,
    };
    for s in (1..=sched.steps()).rev() {
        let steps = vec![s; b];
        let eps = match (cond, &doubled) {
            (None, _) => den.predict_noise(&x, &steps, mask, Condition::Null)?,
            (Some(rows), None) => den.predict_noise(&x, &steps, mask, Condition::Rows { rows, keep: &ones })?,
            (Some(_), Some((rows2, keep2, mask2))) => {
                let x2 = Tensor::cat(&[&x, &x], 0)?;
                let both = den.predict_noise(&x2, &vec![s; 2 * b], mask2, Condition::Rows { rows: rows2, keep: keep2 })?;
                let (ec, eu) = (both.narrow(0, 0, b)?, both.narrow(0, b, b)?);
                ((ec * (1.0 + omega))? - (eu * omega)?)?
            }
        }
        // drop the autograd graph so memory stays flat across steps
        .detach();
        let mean = match x0_clip {
            None => {
                let (inv_sqrt_alpha, c1) = sched.mean_coefficients(s);
                ((&x - (eps * c1)?)? * inv_sqrt_alpha)?
            }
            Some(c) => {
                let (ab, ab_prev) = (sched.alpha_bar(s), sched.alpha_bar(s - 1));
                let x0 = ((&x - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-c, c)?;
                let c_x0 = ab_prev.sqrt() * sched.beta(s) / (1.0 - ab);
                let c_xs = sched.alpha(s).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                ((x0 * c_x0)? + (&x * c_xs)?)?
            }
        };
        x = if s > 1 {
            let z = normal_tensor(rng, shape)?;
            (mean + (z * sched.posterior_variance(s).sqrt())?)?
        } else {
            mean
        };
        let check = x.sum_all()?.to_scalar::<f32>()?;
        if !check.is_finite() {
            return Err(ModelError::SamplingDiverged { step: s });
        }
    }
    Ok(x)
}
