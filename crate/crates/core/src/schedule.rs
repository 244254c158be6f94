//! DDPM noise schedules and the closed-form pieces of the forward and
//! reverse processes.
//!
//! Steps are 1-indexed in the public API (`s ∈ 1..=S`); vectors are stored
//! 0-indexed, so step `s` lives at index `s - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const BETA_MIN: f64 = 1e-8;
pub const BETA_MAX: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct NoiseSchedule<F = f64> {
    pub betas: Vec<F>,
    pub alphas: Vec<F>,
    pub alpha_bars: Vec<F>,
}

impl<F: Real> NoiseSchedule<F> {
    /// Cosine schedule: `ᾱ(s) = f(s)/f(0)`, `f(s) = cos²(((s/S + 0.008)/1.008)·π/2)`,
    /// `β_s = 1 − ᾱ(s)/ᾱ(s−1)` clipped to `[1e-8, 0.999]`. The stored `ᾱ` is the
    /// running product of the clipped `α_s`, so it always matches the betas.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |s: usize| {
            let t = (s as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut betas = Vec::with_capacity(steps);
        for s in 1..=steps {
            let ratio = (f(s) / f0) / (f(s - 1) / f0);
            betas.push((1.0 - ratio).clamp(BETA_MIN, BETA_MAX));
        }
        Self::from_betas(betas.into_iter().map(F::lit).collect())
    }

    pub fn from_betas(betas: Vec<F>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > F::zero() && b < F::one())) {
            return Err(Error::Config("betas must lie strictly inside (0, 1)".into()));
        }
        let alphas: Vec<F> = betas.iter().map(|&b| F::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = F::one();
        for &a in &alphas {
            acc = acc * a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, s: usize) -> F {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> F {
        self.alphas[s - 1]
    }

    /// `ᾱ_s`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, s: usize) -> F {
        if s == 0 {
            F::one()
        } else {
            self.alpha_bars[s - 1]
        }
    }

    /// Posterior variance `β̃_s = β_s (1 − ᾱ_{s−1}) / (1 − ᾱ_s)`.
    pub fn posterior_variance(&self, s: usize) -> F {
        self.beta(s) * (F::one() - self.alpha_bar(s - 1)) / (F::one() - self.alpha_bar(s))
    }

    /// Coefficients `(1/√α_s, β_s/√(1−ᾱ_s))` of the posterior mean
    /// `μ = (x_s − c₁·ε̂) / √α_s`.
    pub fn mean_coefficients(&self, s: usize) -> (F, F) {
        (F::one() / self.alpha(s).sqrt(), self.beta(s) / (F::one() - self.alpha_bar(s)).sqrt())
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::Config(format!("step {s} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_s = √ᾱ_s·x0 + √(1−ᾱ_s)·ε`.
    pub fn forward_diffuse(&self, x0: &[F], s: usize, eps: &[F]) -> Result<Vec<F>> {
        self.check_step(s)?;
        if x0.len() != eps.len() {
            return Err(Error::Config("noise shape differs from sample shape".into()));
        }
        let ab = self.alpha_bar(s);
        Ok(forward_with_alpha_bar(x0, ab, eps))
    }

    pub fn cast<G: Real>(&self) -> NoiseSchedule<G> {
        let c = |v: &Vec<F>| v.iter().map(|x| G::lit(x.as_f64())).collect();
        NoiseSchedule { betas: c(&self.betas), alphas: c(&self.alphas), alpha_bars: c(&self.alpha_bars) }
    }
}

/// Forward marginal for an explicit `ᾱ` (allows the `ᾱ ∈ {0, 1}` limits).
pub fn forward_with_alpha_bar<F: Real>(x0: &[F], alpha_bar: F, eps: &[F]) -> Vec<F> {
    let (a, b) = (alpha_bar.sqrt(), (F::one() - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

/// Classifier-free guidance: `ε̃ = (1+ω)·ε_cond − ω·ε_uncond`.
pub fn cfg_noise<F: Real>(eps_cond: &[F], eps_uncond: &[F], omega: F) -> Result<Vec<F>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::Config("guidance inputs differ in shape".into()));
    }
    if omega == F::zero() {
        return Ok(eps_cond.to_vec());
    }
    let w1 = F::one() + omega;
    Ok(eps_cond.iter().zip(eps_uncond).map(|(&c, &u)| w1 * c - omega * u).collect())
}

/// Guidance strength and condition-dropout probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub cond_drop_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { omega: 2.0, cond_drop_prob: 0.2 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!("invalid guidance config {self:?}")));
        }
        Ok(())
    }
}
