//! Evaluation engine for token-level highlight explanations (HEs) of
//! context utilisation in causal language models.
//!
//! The pipeline builds controlled context regimes with known gold answer
//! spans ([`regimes`]), runs a model backend ([`microlm`] live, or a
//! serialized [`trace`]), computes four attribution methods
//! ([`explainers`]) and scores them ([`metrics`]). [`harness`] wires the
//! stages together behind the `ctxeval` CLI.

pub mod backend;
pub mod domain;
pub mod error;
pub mod explainers;
pub mod harness;
pub mod metrics;
pub mod microlm;
pub mod regimes;
pub mod trace;

pub use domain::{
    rank_at_k, rank_order, AttributionVector, BehaviourLabel, GoldSpan, Instance, InstanceGroup,
    Method, Regime, Segment, SegmentKind, Token, TokenId,
};
pub use error::{Error, Result};
