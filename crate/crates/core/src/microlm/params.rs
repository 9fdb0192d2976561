//! Model configuration and parameter storage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub mlp: bool,
    pub layernorm: bool,
    /// Hidden width of the MLP block; ignored when `mlp` is off.
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// The configuration in which per-head logit contributions plus the
    /// embedding term reproduce the logits exactly.
    pub fn is_linearized(&self) -> bool {
        !self.mlp && !self.layernorm
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("n_heads and d_model must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.max_positions == 0 {
            return Err(Error::Config("vocab_size >= 2 and max_positions >= 1 required".into()));
        }
        if self.mlp && self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive when mlp is on".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Norm {
    fn identity(d: usize) -> Self {
        Norm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d × d_h`
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    /// `d_h × d`
    pub w_o: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln_attn: Option<Norm>,
    pub heads: Vec<HeadParams>,
    pub ln_mlp: Option<Norm>,
    pub mlp: Option<MlpParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    /// `V × d`
    pub tok_emb: Mat,
    /// `max_positions × d`
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub ln_final: Option<Norm>,
    /// `V × d`; row `a` is the unembedding direction of token `a`.
    pub unembed: Mat,
}

impl Params {
    /// All-zero parameters (layernorm gains at one) with the config's shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.d_head();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln_attn: config.layernorm.then(|| Norm::identity(d)),
                heads: (0..config.n_heads)
                    .map(|_| HeadParams {
                        w_q: Mat::zeros(d, dh),
                        w_k: Mat::zeros(d, dh),
                        w_v: Mat::zeros(d, dh),
                        w_o: Mat::zeros(dh, d),
                    })
                    .collect(),
                ln_mlp: (config.layernorm && config.mlp).then(|| Norm::identity(d)),
                mlp: config.mlp.then(|| MlpParams {
                    w_in: Mat::zeros(d, config.mlp_hidden),
                    b_in: vec![0.0; config.mlp_hidden],
                    w_out: Mat::zeros(config.mlp_hidden, d),
                    b_out: vec![0.0; d],
                }),
            })
            .collect();
        Ok(Params {
            config: config.clone(),
            tok_emb: Mat::zeros(config.vocab_size, d),
            pos_emb: Mat::zeros(config.max_positions, d),
            layers,
            ln_final: config.layernorm.then(|| Norm::identity(d)),
            unembed: Mat::zeros(config.vocab_size, d),
        })
    }

    /// Gaussian initialisation seeded by `config.seed`; weight std `scale`,
    /// output projections scaled down by depth.
    pub fn init(config: &ModelConfig, scale: f64) -> Result<Self> {
        let mut p = Params::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let depth_scale = 1.0 / ((2 * config.n_layers.max(1)) as f64).sqrt();
        let fill = |m: &mut [f64], std: f64, rng: &mut ChaCha8Rng| {
            for v in m.iter_mut() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(&mut p.tok_emb.data, scale, &mut rng);
        fill(&mut p.pos_emb.data, scale, &mut rng);
        for layer in &mut p.layers {
            for h in &mut layer.heads {
                fill(&mut h.w_q.data, scale, &mut rng);
                fill(&mut h.w_k.data, scale, &mut rng);
                fill(&mut h.w_v.data, scale, &mut rng);
                fill(&mut h.w_o.data, scale * depth_scale, &mut rng);
            }
            if let Some(m) = &mut layer.mlp {
                fill(&mut m.w_in.data, scale, &mut rng);
                fill(&mut m.w_out.data, scale * depth_scale, &mut rng);
            }
        }
        fill(&mut p.unembed.data, scale, &mut rng);
        Ok(p)
    }

    /// A zero-valued copy with identical shapes, used as gradient storage.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every tensor in canonical serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.tok_emb.data, &self.pos_emb.data];
        for layer in &self.layers {
            if let Some(n) = &layer.ln_attn {
                out.push(&n.gain);
                out.push(&n.bias);
            }
            for h in &layer.heads {
                out.push(&h.w_q.data);
                out.push(&h.w_k.data);
                out.push(&h.w_v.data);
                out.push(&h.w_o.data);
            }
            if let Some(n) = &layer.ln_mlp {
                out.push(&n.gain);
                out.push(&n.bias);
            }
            if let Some(m) = &layer.mlp {
                out.push(&m.w_in.data);
                out.push(&m.b_in);
                out.push(&m.w_out.data);
                out.push(&m.b_out);
            }
        }
        if let Some(n) = &self.ln_final {
            out.push(&n.gain);
            out.push(&n.bias);
        }
        out.push(&self.unembed.data);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for layer in &mut self.layers {
            if let Some(n) = &mut layer.ln_attn {
                out.push(&mut n.gain);
                out.push(&mut n.bias);
            }
            for h in &mut layer.heads {
                out.push(&mut h.w_q.data);
                out.push(&mut h.w_k.data);
                out.push(&mut h.w_v.data);
                out.push(&mut h.w_o.data);
            }
            if let Some(n) = &mut layer.ln_mlp {
                out.push(&mut n.gain);
                out.push(&mut n.bias);
            }
            if let Some(m) = &mut layer.mlp {
                out.push(&mut m.w_in.data);
                out.push(&mut m.b_in);
                out.push(&mut m.w_out.data);
                out.push(&mut m.b_out);
            }
        }
        if let Some(n) = &mut self.ln_final {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
        out.push(&mut self.unembed.data);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            max_positions: 16,
            mlp: true,
            layernorm: true,
            mlp_hidden: 16,
            seed: 3,
        }
    }

    #[test]
    fn shapes_and_counts() {
        let p = Params::init(&cfg(), 0.1).unwrap();
        let per_layer = 2 * 8 + 2 * 4 * 8 * 4 + 2 * 8 + (8 * 16 + 16 + 16 * 8 + 8);
        assert_eq!(p.n_params(), 11 * 8 + 16 * 8 + 2 * per_layer + 2 * 8 + 11 * 8);
        assert!(p.is_finite());
    }

    #[test]
    fn init_is_seed_deterministic() {
        assert_eq!(Params::init(&cfg(), 0.1).unwrap(), Params::init(&cfg(), 0.1).unwrap());
        let mut other = cfg();
        other.seed = 4;
        assert_ne!(Params::init(&cfg(), 0.1).unwrap(), Params::init(&other, 0.1).unwrap());
    }

    #[test]
    fn rejects_indivisible_width() {
        let mut c = cfg();
        c.d_model = 9;
        assert!(matches!(Params::zeros(&c), Err(Error::Config(_))));
    }
}
