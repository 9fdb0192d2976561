//! Minimal next-token trainer: cross-entropy at the gen position, Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{backward, forward, input_embeddings, run};
use super::params::Params;
use crate::domain::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub ids: Vec<TokenId>,
    pub target: TokenId,
    /// Counted towards closed-book accuracy.
    #[serde(default)]
    pub closed_book: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop once closed-book accuracy reaches this value (checked per epoch).
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 60,
            learning_rate: 3e-3,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            seed: 0,
            stop_at_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub closed_book_accuracy: f64,
    pub loss_history: Vec<f64>,
}

/// Fraction of examples whose greedy next token equals the target.
pub fn accuracy(params: &Params, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        if forward(params, &ex.ids)?.greedy_token() == ex.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn closed_book_accuracy(params: &Params, examples: &[TrainExample]) -> Result<f64> {
    let cb: Vec<TrainExample> = examples.iter().filter(|e| e.closed_book).cloned().collect();
    accuracy(params, &cb)
}

/// Trains in place on `corpus`; deterministic given `hyper.seed`.
/// Cross-entropy of `target` at the gen position. Adds `scale` times its
/// gradient w.r.t. every parameter into `grads` and returns the unscaled
/// loss.
pub fn accumulate_grad(params: &Params, ids: &[TokenId], target: TokenId, scale: f64, grads: &mut Params) -> Result<f64> {
    let v = params.config.vocab_size;
    let emb = input_embeddings(params, ids)?;
    let (trace, cache) = run(params, &emb)?;
    let lse = super::forward::log_sum_exp(&trace.logits);
    let t = target as usize;
    if t >= v {
        return Err(Error::Invalid(format!("target {t} outside vocabulary")));
    }
    let mut dl: Vec<f64> = trace.logits.iter().map(|l| (l - lse).exp()).collect();
    dl[t] -= 1.0;
    dl.iter_mut().for_each(|g| *g *= scale);
    let demb = backward(params, &cache, &dl, Some(&mut *grads));
    for (pos, &tok) in ids.iter().enumerate() {
        let row = demb.row(pos);
        for (g, d) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(row) {
            *g += d;
        }
        for (g, d) in grads.pos_emb.row_mut(pos).iter_mut().zip(row) {
            *g += d;
        }
    }
    Ok(lse - trace.logits[t])
}

/// Cross-entropy loss of one example and its full parameter gradient.
pub fn loss_and_grad(params: &Params, ids: &[TokenId], target: TokenId) -> Result<(f64, Params)> {
    let mut grads = params.zeros_like();
    let loss = accumulate_grad(params, ids, target, 1.0, &mut grads)?;
    Ok((loss, grads))
}

pub fn train(mut params: Params, corpus: &[TrainExample], hyper: &TrainHyper) -> Result<(Params, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut m = params.zeros_like();
    let mut s = params.zeros_like();
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut epochs_run = 0;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let ex = &corpus[i];
                epoch_loss += accumulate_grad(&params, &ex.ids, ex.target, 1.0 / batch.len() as f64, &mut grads)?;
            }
            step += 1;
            adam_step(&mut params, &grads, &mut m, &mut s, hyper, step);
        }
        let mean_loss = epoch_loss / corpus.len() as f64;
        if !mean_loss.is_finite() || !params.is_finite() {
            return Err(Error::Training(format!(
                "loss became {mean_loss} at epoch {epoch} (lr {}, batch {})",
                hyper.learning_rate, hyper.batch_size
            )));
        }
        log::debug!("epoch {epoch}: loss {mean_loss:.4}");
        history.push(mean_loss);
        epochs_run = epoch + 1;
        if let Some(target) = hyper.stop_at_accuracy {
            if closed_book_accuracy(&params, corpus)? >= target {
                break;
            }
        }
    }

    let report = TrainReport {
        epochs_run,
        final_loss: history.last().copied().unwrap_or(f64::NAN),
        train_accuracy: accuracy(&params, corpus)?,
        closed_book_accuracy: closed_book_accuracy(&params, corpus)?,
        loss_history: history,
    };
    Ok((params, report))
}

fn adam_step(params: &mut Params, grads: &Params, m: &mut Params, s: &mut Params, h: &TrainHyper, step: i32) {
    let bc1 = 1.0 - h.beta1.powi(step);
    let bc2 = 1.0 - h.beta2.powi(step);
    let lr = h.learning_rate;
    for (((p, g), mt), st) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(s.tensors_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            mt[i] = h.beta1 * mt[i] + (1.0 - h.beta1) * gi;
            st[i] = h.beta2 * st[i] + (1.0 - h.beta2) * gi * gi;
            let update = (mt[i] / bc1) / ((st[i] / bc2).sqrt() + 1e-8);
            p[i] -= lr * (update + h.weight_decay * p[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::params::ModelConfig;

    fn setup() -> (Params, Vec<TrainExample>) {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            vocab_size: 20,
            max_positions: 8,
            mlp: true,
            layernorm: true,
            mlp_hidden: 32,
            seed: 1,
        };
        let corpus = (0..8)
            .map(|i| TrainExample {
                ids: vec![2, 3 + i as TokenId, 4],
                target: 12 + i as TokenId,
                closed_book: true,
            })
            .collect();
        (Params::init(&cfg, 0.1).unwrap(), corpus)
    }

    #[test]
    fn learns_a_small_lookup() {
        let (p, corpus) = setup();
        let hyper = TrainHyper {
            epochs: 200,
            learning_rate: 1e-2,
            batch_size: 4,
            ..TrainHyper::default()
        };
        let (_, report) = train(p, &corpus, &hyper).unwrap();
        assert_eq!(report.closed_book_accuracy, 1.0);
        assert!(report.final_loss < report.loss_history[0]);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (p, corpus) = setup();
        let hyper = TrainHyper {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainHyper::default()
        };
        let (q, _) = train(p.clone(), &corpus, &hyper).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (p, corpus) = setup();
        let hyper = TrainHyper {
            epochs: 5,
            ..TrainHyper::default()
        };
        let (a, _) = train(p.clone(), &corpus, &hyper).unwrap();
        let (b, _) = train(p, &corpus, &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let (p, corpus) = setup();
        let hyper = TrainHyper {
            epochs: 3,
            learning_rate: f64::INFINITY,
            ..TrainHyper::default()
        };
        assert!(matches!(train(p, &corpus, &hyper), Err(Error::Training(_)) | Err(Error::Model(_))));
    }

    #[test]
    fn empty_corpus_rejected() {
        let (p, _) = setup();
        assert!(train(p, &[], &TrainHyper::default()).is_err());
    }
}
