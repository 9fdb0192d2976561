//! The model abstraction explainers and metrics run against, and its live
//! implementation over [`microlm`](crate::microlm).

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::domain::{Instance, TokenId};
use crate::error::{Error, Result};
use crate::microlm::forward::{self, ForwardTrace};
use crate::microlm::mat::dot;
use crate::microlm::{Params, Tokenizer};

/// `[layer][head]` table.
pub type PerHead<T> = Vec<Vec<T>>;

/// How a head's residual write is projected onto an unembedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayernormConvention {
    /// `⟨W_a, r⟩`
    #[default]
    Raw,
    /// `⟨W_a ⊙ γ, r − mean(r)⟩ / σ`, using the final norm's statistics at gen.
    Folded,
}

/// What `H^{(L)}_{h,:}` means when ATTN picks its head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnSelection {
    /// The head's post-`W_O` residual write at gen.
    #[default]
    HeadContribution,
    /// The head's `d_h`-wide slice of the last block's output at gen.
    HiddenSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conventions {
    pub layernorm: LayernormConvention,
    pub attn_selection: AttnSelection,
}

pub trait ModelBackend: Send + Sync {
    fn name(&self) -> String;

    fn pad_id(&self) -> TokenId;

    /// `(layers, heads per layer)`.
    fn shape(&self) -> (usize, usize);

    fn conventions(&self) -> Conventions;

    /// Greedy continuation.
    fn generate(&self, _ids: &[TokenId], _max_new: usize) -> Result<Vec<TokenId>> {
        Err(Error::Capability {
            method: "generation",
            capability: "generate",
        })
    }

    /// Logits of `candidates` at gen for the unmodified input.
    fn candidate_logits(&self, instance: &Instance, candidates: &[TokenId]) -> Result<Vec<f64>>;

    /// `[position][candidate]` logits with that position replaced by pad.
    fn ablation_logits(&self, instance: &Instance, candidates: &[TokenId]) -> Result<Vec<Vec<f64>>>;

    /// Unnormalised per-position IG scores for `target` with `steps` right
    /// Riemann steps from the all-pad baseline.
    fn integrated_gradients(&self, instance: &Instance, target: TokenId, steps: usize) -> Result<Vec<f64>>;

    fn attention_rows(&self, instance: &Instance) -> Result<PerHead<Vec<f64>>>;

    /// `[layer][head][candidate]` head logit contributions.
    fn head_logit_contributions(&self, instance: &Instance, candidates: &[TokenId]) -> Result<PerHead<Vec<f64>>>;

    /// One score per head of the last layer for `target`.
    fn attn_selection_scores(&self, instance: &Instance, target: TokenId) -> Result<Vec<f64>>;

    /// `log p(target | ids)` under the full-vocabulary softmax; needs a live
    /// model.
    fn log_prob(&self, _ids: &[TokenId], _target: TokenId) -> Result<f64> {
        Err(Error::Capability {
            method: "AOPC",
            capability: "re-forward",
        })
    }
}

/// Live backend over in-memory microlm parameters.
#[derive(Debug)]
pub struct MicroBackend {
    pub params: Params,
    pub tokenizer: Option<Tokenizer>,
    pub conventions: Conventions,
    forwards: AtomicUsize,
}

impl Clone for MicroBackend {
    fn clone(&self) -> Self {
        MicroBackend {
            params: self.params.clone(),
            tokenizer: self.tokenizer.clone(),
            conventions: self.conventions,
            forwards: AtomicUsize::new(0),
        }
    }
}

impl MicroBackend {
    pub fn new(params: Params) -> Self {
        MicroBackend {
            params,
            tokenizer: None,
            conventions: Conventions::default(),
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Self {
        self.tokenizer = Some(tokenizer);
        self
    }

    pub fn with_conventions(mut self, conventions: Conventions) -> Self {
        self.conventions = conventions;
        self
    }

    /// Number of forward passes run so far (gradient passes included).
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    pub fn trace(&self, ids: &[TokenId]) -> Result<ForwardTrace> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        forward::forward(&self.params, ids)
    }

    fn pad(&self) -> TokenId {
        self.tokenizer.as_ref().map_or(0, |t| t.pad_id())
    }

    fn project(&self, trace: &ForwardTrace, out: &[f64], token: TokenId) -> Result<f64> {
        let row = forward::unembed_row(&self.params, token)?;
        match (self.conventions.layernorm, &self.params.ln_final, trace.final_inv_std) {
            (LayernormConvention::Folded, Some(norm), Some(inv)) => {
                let mean = out.iter().sum::<f64>() / out.len() as f64;
                Ok(inv
                    * row
                        .iter()
                        .zip(&norm.gain)
                        .zip(out)
                        .map(|((w, g), r)| w * g * (r - mean))
                        .sum::<f64>())
            }
            _ => Ok(dot(row, out)),
        }
    }

    /// Logit contribution of every head to `token` under the configured
    /// convention.
    pub fn contributions(&self, trace: &ForwardTrace, token: TokenId) -> Result<PerHead<f64>> {
        trace
            .head_outputs
            .iter()
            .map(|layer| layer.iter().map(|out| self.project(trace, out, token)).collect())
            .collect()
    }
}

impl ModelBackend for MicroBackend {
    fn name(&self) -> String {
        let c = &self.params.config;
        format!(
            "microlm(L={},H={},d={},V={},mlp={},ln={})",
            c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.mlp, c.layernorm
        )
    }

    fn pad_id(&self) -> TokenId {
        self.pad()
    }

    fn shape(&self) -> (usize, usize) {
        (self.params.config.n_layers, self.params.config.n_heads)
    }

    fn conventions(&self) -> Conventions {
        self.conventions
    }

    fn generate(&self, ids: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.forwards.fetch_add(max_new, Ordering::Relaxed);
        forward::generate(&self.params, ids, max_new)
    }

    fn candidate_logits(&self, instance: &Instance, candidates: &[TokenId]) -> Result<Vec<f64>> {
        let t = self.trace(&instance.token_ids())?;
        candidates.iter().map(|&c| t.answer_logit(c)).collect()
    }

    fn ablation_logits(&self, instance: &Instance, candidates: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let ids = instance.token_ids();
        let pad = self.pad();
        (0..ids.len())
            .map(|i| {
                let mut masked = ids.clone();
                masked[i] = pad;
                let t = self.trace(&masked)?;
                candidates.iter().map(|&c| t.answer_logit(c)).collect()
            })
            .collect()
    }

    fn integrated_gradients(&self, instance: &Instance, target: TokenId, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::Invalid("IG needs at least one step".into()));
        }
        let ids = instance.token_ids();
        let x = forward::input_embeddings(&self.params, &ids)?;
        let base = forward::input_embeddings(&self.params, &vec![self.pad(); ids.len()])?;
        let mut sum = crate::microlm::Mat::zeros(x.rows, x.cols);
        for k in 1..=steps {
            let alpha = k as f64 / steps as f64;
            let point = forward::embed_interpolate(&self.params, &ids, self.pad(), alpha)?;
            self.forwards.fetch_add(1, Ordering::Relaxed);
            let (_, g) = forward::grad_wrt_embedding_seq(&self.params, &point, target)?;
            sum.add_assign(&g);
        }
        Ok((0..x.rows)
            .map(|i| {
                let diff: Vec<f64> = x.row(i).iter().zip(base.row(i)).map(|(a, b)| a - b).collect();
                dot(&diff, sum.row(i)) / steps as f64
            })
            .collect())
    }

    fn attention_rows(&self, instance: &Instance) -> Result<PerHead<Vec<f64>>> {
        Ok(self.trace(&instance.token_ids())?.attn_rows)
    }

    fn head_logit_contributions(&self, instance: &Instance, candidates: &[TokenId]) -> Result<PerHead<Vec<f64>>> {
        let t = self.trace(&instance.token_ids())?;
        let per_candidate: Vec<PerHead<f64>> = candidates
            .iter()
            .map(|&c| self.contributions(&t, c))
            .collect::<Result<_>>()?;
        let (l, h) = self.shape();
        Ok((0..l)
            .map(|li| {
                (0..h)
                    .map(|hi| per_candidate.iter().map(|p| p[li][hi]).collect())
                    .collect()
            })
            .collect())
    }

    fn attn_selection_scores(&self, instance: &Instance, target: TokenId) -> Result<Vec<f64>> {
        let (l, _) = self.shape();
        if l == 0 {
            return Err(Error::Model("ATTN needs at least one layer".into()));
        }
        let t = self.trace(&instance.token_ids())?;
        match self.conventions.attn_selection {
            AttnSelection::HeadContribution => Ok(self.contributions(&t, target)?.swap_remove(l - 1)),
            AttnSelection::HiddenSlice => {
                let row = forward::unembed_row(&self.params, target)?;
                let dh = self.params.config.d_head();
                Ok((0..self.params.config.n_heads)
                    .map(|h| dot(&row[h * dh..(h + 1) * dh], &t.final_hidden[h * dh..(h + 1) * dh]))
                    .collect())
            }
        }
    }

    fn log_prob(&self, ids: &[TokenId], target: TokenId) -> Result<f64> {
        self.trace(ids)?.log_prob(target)
    }
}
