//! Transformer noise predictor shared by the composition generator and the
//! base model, plus per-channel standardisation.
//!
//! Tokens are `Linear(x) + pos[row]` with learned position vectors shared
//! across crystals. The time embedding (sinusoid, then a linear map) and the
//! optional per-row condition embedding are added to the hidden state at
//! the start of every layer.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, Denoiser};
use crate::error::{ModelError, Result};
use crate::nn::{sinusoidal_embedding, Linear, ParamStore, Transformer, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub net: TransformerConfig,
    /// Channels per row of the diffused matrix.
    pub channels: usize,
    pub max_rows: usize,
    /// Width of per-row conditions; `None` for an unconditional model.
    pub cond_dim: Option<usize>,
}

struct CondEmbedding {
    proj: Linear,
    null: Var,
}

pub struct DiffusionTransformer {
    shape: DenoiserShape,
    input: Linear,
    pos: Var,
    time: Linear,
    cond: Option<CondEmbedding>,
    body: Transformer,
    output: Linear,
}

impl DiffusionTransformer {
    pub fn new(ps: &mut ParamStore, name: &str, shape: DenoiserShape) -> Result<Self> {
        shape.net.validate()?;
        if shape.channels == 0 || shape.max_rows == 0 || shape.cond_dim == Some(0) {
            return Err(ModelError::Config(format!("invalid denoiser shape {shape:?}")));
        }
        let h = shape.net.hidden;
        let cond = match shape.cond_dim {
            Some(c) => Some(CondEmbedding {
                proj: Linear::new(ps, &format!("{name}.cond"), c, h)?,
                null: ps.normal(format!("{name}.null_cond"), &[h], 0.02)?,
            }),
            None => None,
        };
        Ok(DiffusionTransformer {
            shape,
            input: Linear::new(ps, &format!("{name}.in"), shape.channels, h)?,
            pos: ps.normal(format!("{name}.pos"), &[shape.max_rows, h], 0.02)?,
            time: Linear::new(ps, &format!("{name}.time"), h, h)?,
            cond,
            body: Transformer::new(ps, name, &shape.net)?,
            output: Linear::new(ps, &format!("{name}.out"), h, shape.channels)?,
        })
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.shape
    }

    /// `[B, N, h]` (or broadcastable) embedding injected before every layer.
    fn injection(&self, steps: &[usize], n: usize, cond: Condition) -> Result<Tensor> {
        let h = self.shape.net.hidden;
        let t = self.time.forward(&sinusoidal_embedding(steps, h)?)?.unsqueeze(1)?;
        let Some(ce) = &self.cond else {
            return match cond {
                Condition::Null => Ok(t),
                Condition::Rows { .. } => Err(ModelError::Config("unconditional denoiser received a condition".into())),
            };
        };
        let null = ce.null.as_tensor().reshape((1, 1, h))?;
        let emb = match cond {
            Condition::Null => null,
            Condition::Rows { rows, keep } => {
                let (b, rn, _) = rows.dims3()?;
                if b != steps.len() || rn != n {
                    return Err(ModelError::Config(format!("condition {:?} does not match batch of {} × {n}", rows.dims(), steps.len())));
                }
                let keep = keep.reshape((b, 1, 1))?;
                let live = ce.proj.forward(rows)?.broadcast_mul(&keep)?;
                let dropped = null.broadcast_mul(&(1.0 - &keep)?)?;
                live.broadcast_add(&dropped)?
            }
        };
        Ok(t.broadcast_add(&emb)?)
    }
}

impl Denoiser for DiffusionTransformer {
    fn predict_noise(&self, x_s: &Tensor, steps: &[usize], mask: &Tensor, cond: Condition) -> Result<Tensor> {
        let (b, n, c) = x_s.dims3()?;
        if c != self.shape.channels || n > self.shape.max_rows || b != steps.len() {
            return Err(ModelError::Config(format!("denoiser input {:?} does not fit {:?}", x_s.dims(), self.shape)));
        }
        let tok = self.input.forward(x_s)?.broadcast_add(&self.pos.as_tensor().narrow(0, 0, n)?)?;
        let inject = self.injection(steps, n, cond)?;
        self.output.forward(&self.body.forward(&tok, mask, Some(&inject))?)
    }
}

/// Per-channel affine standardisation `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Channel standard deviations below this are replaced by 1.
pub const STD_FLOOR: f64 = 1e-6;

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics over `rows`; channels outside `fit` keep mean 0 and std 1.
    pub fn fit(rows: &[Vec<f32>], channels: usize, fit: impl Fn(usize) -> bool) -> Result<Self> {
        if rows.is_empty() {
            return Err(ccgen_core::Error::InsufficientData { have: 0, need: 1 }.into());
        }
        let n = rows.len() as f64;
        let mut stats = Self::identity(channels);
        for ch in (0..channels).filter(|&c| fit(c)) {
            let mean = rows.iter().map(|r| r[ch] as f64).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[ch] as f64 - mean).powi(2)).sum::<f64>() / n;
            stats.mean[ch] = mean as f32;
            stats.std[ch] = if var.sqrt() < STD_FLOOR { 1.0 } else { var.sqrt() as f32 };
        }
        Ok(stats)
    }

    pub fn apply(&self, row: &[f32]) -> Vec<f32> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }

    pub fn invert(&self, row: &[f32]) -> Vec<f32> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| x * s + m).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_tensor, to_f32_tensor, DEVICE};
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(cond: Option<usize>) -> DenoiserShape {
        DenoiserShape { net: TransformerConfig { layers: 2, hidden: 16, heads: 2 }, channels: 5, max_rows: 6, cond_dim: cond }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut ps = ParamStore::new(0);
        let d = DiffusionTransformer::new(&mut ps, "g", shape(None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=6 {
            let x = normal_tensor(&mut rng, &[3, n, 5]).unwrap();
            let mask = Tensor::ones((3, n), DType::F32, &DEVICE).unwrap();
            assert_eq!(d.predict_noise(&x, &[1, 5, 9], &mask, Condition::Null).unwrap().dims(), &[3, n, 5]);
        }
    }

    #[test]
    fn positions_break_row_symmetry() {
        let mut ps = ParamStore::new(1);
        let d = DiffusionTransformer::new(&mut ps, "g", shape(None)).unwrap();
        let row = [0.3f32, -0.1, 0.7, 0.2, -0.5];
        let x = to_f32_tensor([row, row].concat(), &[1, 2, 5]).unwrap();
        let mask = Tensor::ones((1, 2), DType::F32, &DEVICE).unwrap();
        let out = d.predict_noise(&x, &[3], &mask, Condition::Null).unwrap().to_vec3::<f32>().unwrap();
        assert_ne!(out[0][0], out[0][1]);
    }

    #[test]
    fn dropped_condition_equals_null() {
        let mut ps = ParamStore::new(2);
        let d = DiffusionTransformer::new(&mut ps, "g", shape(Some(3))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal_tensor(&mut rng, &[2, 4, 5]).unwrap();
        let rows = normal_tensor(&mut rng, &[2, 4, 3]).unwrap();
        let mask = Tensor::ones((2, 4), DType::F32, &DEVICE).unwrap();
        let keep = Tensor::zeros(2, DType::F32, &DEVICE).unwrap();
        let a = d.predict_noise(&x, &[4, 7], &mask, Condition::Rows { rows: &rows, keep: &keep }).unwrap();
        let b = d.predict_noise(&x, &[4, 7], &mask, Condition::Null).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn padded_rows_do_not_affect_live_rows() {
        let mut ps = ParamStore::new(3);
        let d = DiffusionTransformer::new(&mut ps, "g", shape(None)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normal_tensor(&mut rng, &[1, 4, 5]).unwrap();
        let junk = normal_tensor(&mut rng, &[1, 2, 5]).unwrap();
        let y = Tensor::cat(&[&x.narrow(1, 0, 2).unwrap(), &junk], 1).unwrap();
        let mask = to_f32_tensor(vec![1.0, 1.0, 0.0, 0.0], &[1, 4]).unwrap();
        let a = d.predict_noise(&x, &[2], &mask, Condition::Null).unwrap().narrow(1, 0, 2).unwrap();
        let b = d.predict_noise(&y, &[2], &mask, Condition::Null).unwrap().narrow(1, 0, 2).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn standardisation_round_trips() {
        let rows = vec![vec![1.0f32, 5.0, 0.0], vec![3.0, 5.0, 1.0], vec![2.0, 5.0, 0.0]];
        let s = ChannelStats::fit(&rows, 3, |c| c < 2).unwrap();
        assert_eq!(s.std[1], 1.0);
        assert_eq!((s.mean[2], s.std[2]), (0.0, 1.0));
        for r in &rows {
            let back = s.invert(&s.apply(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
