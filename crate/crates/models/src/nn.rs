//! Minimal transformer building blocks on candle with seeded initialisation.
//!
//! Parameters live in a [`ParamStore`] under stable names so checkpoints can
//! be written and restored by name. Initial values come from a ChaCha stream
//! seeded by the caller, never from a global RNG.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

pub const DEVICE: Device = Device::Cpu;

/// Named parameter collection with deterministic initialisation.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { vars: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn push(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &DEVICE)?)?;
        self.vars.push((name, var.clone()));
        Ok(var)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f32) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name.into(), data, shape)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut self.rng);
                std * v
            })
            .collect::<Vec<f32>>();
        self.push(name.into(), data, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<Var> {
        self.push(name.into(), vec![value; shape.iter().product()], shape)
    }

    /// Registers an externally built tensor (e.g. a k-means codebook).
    pub fn tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<Var> {
        let shape = t.dims().to_vec();
        self.push(name.into(), t.flatten_all()?.to_vec1::<f32>()?, &shape)
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 })?)
}

/// One optimiser step; a non-finite loss aborts with `TrainingDiverged`.
pub fn optimizer_step(opt: &mut AdamW, loss: &Tensor, stage: &str, step: usize) -> Result<f32> {
    let value = loss.to_scalar::<f32>()?;
    if !value.is_finite() {
        return Err(ModelError::TrainingDiverged { stage: stage.to_string(), step });
    }
    opt.backward_step(loss)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!("invalid transformer shape {self:?}")));
        }
        Ok(())
    }
}

pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Ok(Linear { w: ps.uniform(format!("{name}.w"), &[fan_in, fan_out], bound)?, b: ps.constant(format!("{name}.b"), &[fan_out], 0.0)? })
    }

    /// Zero-initialised layer, used for output heads that should start silent.
    pub fn zeros(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear { w: ps.constant(format!("{name}.w"), &[fan_in, fan_out], 0.0)?, b: ps.constant(format!("{name}.b"), &[fan_out], 0.0)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())?)
    }
}

pub struct LayerNorm {
    g: Var,
    b: Var,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm { g: ps.constant(format!("{name}.g"), &[dim], 1.0)?, b: ps.constant(format!("{name}.b"), &[dim], 0.0)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.g.as_tensor())?.broadcast_add(self.b.as_tensor())?)
    }
}

/// Additive attention bias `[B, 1, 1, N]` from a `[B, N]` mask (1 = live).
pub fn key_padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, n) = mask.dims2()?;
    Ok(((mask - 1.0)? * 1e9)?.reshape((b, 1, 1, n))?)
}

pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, hidden: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(ps, &format!("{name}.q"), hidden, hidden)?,
            k: Linear::new(ps, &format!("{name}.k"), hidden, hidden)?,
            v: Linear::new(ps, &format!("{name}.v"), hidden, hidden)?,
            o: Linear::new(ps, &format!("{name}.o"), hidden, hidden)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, n, h) = x.dims3()?;
        let dh = h / self.heads;
        let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(bias)?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, h))?;
        self.o.forward(&out)
    }
}

/// Pre-normalisation block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, hidden: usize, heads: usize) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), hidden)?,
            attn: Attention::new(ps, &format!("{name}.attn"), hidden, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), hidden)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), hidden, 4 * hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), 4 * hidden, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, bias)?)?;
        let hidden = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&hidden)?)?)
    }
}

/// Stack of pre-norm blocks with a final layer norm. An optional tensor is
/// added to the hidden state at the start of every layer.
pub struct Transformer {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Transformer {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers).map(|l| Block::new(ps, &format!("{name}.block{l}"), cfg.hidden, cfg.heads)).collect::<Result<_>>()?;
        Ok(Transformer { blocks, ln_f: LayerNorm::new(ps, &format!("{name}.ln_f"), cfg.hidden)? })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor, inject: Option<&Tensor>) -> Result<Tensor> {
        let bias = key_padding_bias(mask)?;
        let mut h = x.clone();
        for block in &self.blocks {
            if let Some(add) = inject {
                h = h.broadcast_add(add)?;
            }
            h = block.forward(&h, &bias)?;
        }
        self.ln_f.forward(&h)
    }
}

/// Sinusoidal embedding `[B, dim]` of integer steps.
pub fn sinusoidal_embedding(steps: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let angle = s as f64 * freq;
            data.push(if i < half { angle.sin() } else { angle.cos() } as f32);
        }
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), &DEVICE)?)
}

/// Standard normal tensor drawn from `rng`.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

/// Masked mean over dim 1 of `[B, N, C]` with a `[B, N]` mask.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(2)?;
    let summed = x.broadcast_mul(&m)?.sum(1)?;
    let count = m.sum(1)?.clamp(1.0, f64::INFINITY)?;
    Ok(summed.broadcast_div(&count)?)
}

pub fn to_f32_tensor(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

pub fn scalar_f32(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        let va = a.uniform("x", &[4, 4], 1.0).unwrap();
        let vb = b.uniform("x", &[4, 4], 1.0).unwrap();
        assert_eq!(va.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(a.uniform("x", &[1], 1.0).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut ps = ParamStore::new(0);
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1f32, 2.0, 3.0, 4.0]], &DEVICE).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f32>().unwrap();
        let mean: f32 = y[0].iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn padded_keys_are_ignored() {
        let mut ps = ParamStore::new(1);
        let cfg = TransformerConfig { layers: 2, hidden: 8, heads: 2 };
        let t = Transformer::new(&mut ps, "t", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal_tensor(&mut rng, &[1, 3, 8]).unwrap();
        let mask = Tensor::new(&[[1f32, 1.0, 0.0]], &DEVICE).unwrap();
        let y1 = t.forward(&x, &mask, None).unwrap();
        let other = normal_tensor(&mut rng, &[1, 1, 8]).unwrap();
        let x2 = Tensor::cat(&[x.narrow(1, 0, 2).unwrap(), other], 1).unwrap();
        let y2 = t.forward(&x2, &mask, None).unwrap();
        let d = (y1.narrow(1, 0, 2).unwrap() - y2.narrow(1, 0, 2).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn sinusoid_shape() {
        let e = sinusoidal_embedding(&[0, 5, 100], 16).unwrap();
        assert_eq!(e.dims(), &[3, 16]);
        let v = e.to_vec2::<f32>().unwrap();
        assert_eq!(v[0][0], 0.0);
        assert_eq!(v[0][8], 1.0);
    }
}
