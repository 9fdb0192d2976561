//! From-scratch decoder-only transformer backend.
//!
//! Exposes every primitive the explainers consume: gen-position logits,
//! per-head attention rows and residual writes, exact input-embedding
//! gradients, and interpolated-embedding forwards. [`plant`] builds copy-head
//! models with a known answer and [`train`] fits small models so
//! parametric knowledge exists at desk scale.

pub mod blob;
pub mod forward;
pub mod mat;
pub mod params;
pub mod plant;
pub mod tokenizer;
pub mod train;

pub use forward::{
    embed_interpolate, embedding_logit_term, forward, forward_embeddings, generate,
    grad_wrt_embedding_seq, grad_wrt_embeddings, head_logit_contribution, input_embeddings,
    ForwardTrace,
};
pub use mat::Mat;
pub use params::{ModelConfig, Params};
pub use plant::{plant_copy_model, planted_config, PlantedModel};
pub use tokenizer::Tokenizer;
pub use train::{accuracy, accumulate_grad, loss_and_grad, train, TrainExample, TrainHyper, TrainReport};
