//! Hand-constructed copy-head models with an analytically known answer.
//!
//! Residual layout (`V` vocab, `P` positions):
//!
//! | coords          | meaning                                  |
//! |-----------------|------------------------------------------|
//! | `0..V`          | one-hot token identity (pad is all-zero) |
//! | `V..V+P`        | one-hot position                         |
//! | `V+P`           | constant 1                               |
//! | `V+P+1`         | "token `offset` back is the trigger"     |
//! | `V+P+2`         | "trigger seen at or before here"         |
//!
//! Layer 0 head 0 looks `offset` positions back and raises the flag; layer 0
//! head 1 attends to trigger tokens and raises the second flag. The
//! designated head (last layer, last head) attends from gen to the flagged
//! position and copies its token into the unembedding direction. All other
//! heads are zero.

use super::mat::Mat;
use super::params::{ModelConfig, Params};
use crate::domain::TokenId;
use crate::error::{Error, Result};

const OFFSET_SHARPNESS: f64 = 40.0;
const TRIGGER_SHARPNESS: f64 = 20.0;
const FLAG_KEY: f64 = 20.0;
const AFTER_KEY: f64 = 2.0;
const COPY_GAIN: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub params: Params,
    /// `(layer, head)` of the copy head.
    pub designated: (usize, usize),
    pub trigger: TokenId,
    pub copy_offset: usize,
}

/// Smallest attention-only config that can host a planted copy circuit for
/// the given vocabulary and sequence length.
pub fn planted_config(vocab_size: usize, max_positions: usize, n_layers: usize, n_heads: usize) -> ModelConfig {
    let n_heads = n_heads.max(2);
    let dh = vocab_size.max(max_positions);
    let mut d = dh * n_heads;
    while d < vocab_size + max_positions + 3 {
        d += n_heads;
    }
    ModelConfig {
        n_layers: n_layers.max(2),
        n_heads,
        d_model: d,
        vocab_size,
        max_positions,
        mlp: false,
        layernorm: false,
        mlp_hidden: 0,
        seed: 0,
    }
}

/// Behaviour is undefined (attention diffuses) when the trigger is absent
/// from the input, or appears more than once.
pub fn plant_copy_model(config: &ModelConfig, trigger: TokenId, copy_offset: usize) -> Result<PlantedModel> {
    config.validate()?;
    let v = config.vocab_size;
    let p = config.max_positions;
    let d = config.d_model;
    let dh = config.d_head();
    if config.mlp || config.layernorm {
        return Err(Error::Config("planted model needs an attention-only config".into()));
    }
    if config.n_layers < 2 || config.n_heads < 2 {
        return Err(Error::Config(
            "planted model needs at least 2 layers and 2 heads per layer".into(),
        ));
    }
    if d < v + p + 3 || dh < v.max(p) {
        return Err(Error::Config(format!(
            "d_model {d} / d_head {dh} too small for vocab {v} and {p} positions"
        )));
    }
    if copy_offset == 0 {
        return Err(Error::Config("copy offset must be at least 1".into()));
    }
    if trigger as usize >= v || trigger == 0 {
        return Err(Error::Config(format!("invalid trigger token {trigger}")));
    }
    let bias = v + p;
    let flag = v + p + 1;
    let after = v + p + 2;
    let trig = trigger as usize;
    let root = (dh as f64).sqrt();

    let mut params = Params::zeros(config)?;
    for t in 1..v {
        params.tok_emb.set(t, t, 1.0);
    }
    for i in 0..p {
        params.pos_emb.set(i, v + i, 1.0);
        params.pos_emb.set(i, bias, 1.0);
    }
    for t in 0..v {
        params.unembed.set(t, t, 1.0);
    }

    {
        let shift = &mut params.layers[0].heads[0];
        for j in 0..p {
            shift.w_q.set(v + j, j, OFFSET_SHARPNESS * root);
        }
        for i in 0..p.saturating_sub(copy_offset) {
            shift.w_k.set(v + i, i + copy_offset, 1.0);
        }
        shift.w_v.set(trig, 0, 1.0);
        shift.w_o.set(0, flag, 1.0);
    }
    {
        let seen = &mut params.layers[0].heads[1];
        seen.w_q.set(bias, 0, TRIGGER_SHARPNESS * root);
        seen.w_k.set(trig, 0, 1.0);
        seen.w_v.set(trig, 0, 1.0);
        seen.w_o.set(0, after, 1.0);
    }
    let designated = (config.n_layers - 1, config.n_heads - 1);
    {
        let copy = &mut params.layers[designated.0].heads[designated.1];
        copy.w_q.set(bias, 0, root);
        copy.w_k.set(flag, 0, FLAG_KEY);
        copy.w_k.set(after, 0, AFTER_KEY);
        // Positions before the offset have nothing `copy_offset` back; the
        // shift head falls onto position 0 there, so their flag is void.
        for j in 0..copy_offset.min(p) {
            copy.w_k.set(v + j, 0, -FLAG_KEY);
        }
        let mut wv = Mat::zeros(d, dh);
        let mut wo = Mat::zeros(dh, d);
        for t in 0..v {
            wv.set(t, t, 1.0);
            wo.set(t, t, COPY_GAIN);
        }
        copy.w_v = wv;
        copy.w_o = wo;
    }
    Ok(PlantedModel {
        params,
        designated,
        trigger,
        copy_offset,
    })
}
