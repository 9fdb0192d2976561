//! Evaluation metrics: rank margins, MRR, simulatability (kNN NMI and
//! prequential MDL) and AOPC faithfulness.

pub mod aopc;
pub mod mdl;
pub mod rank;
pub mod simulatability;

use serde::{Deserialize, Serialize};

pub use aopc::{aopc, Aopc, AopcGrid};
pub use mdl::{mdl_preq, MdlResult, ProbeConfig, ProbeOptimizer};
pub use rank::{drank_grp, drank_inst, group_rank, mrr, reciprocal_rank};
pub use simulatability::{nmutinf, NmiEstimate, SimFeatures, DEFAULT_NEIGHBOURS};

/// One metric value for a (regime, explainer, k) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// `0` for metrics without a k (MRR, AOPC).
    pub k: usize,
    pub regime: String,
    pub explainer: String,
    /// `None` when the metric is undefined for this cell; see `note`.
    pub value: Option<f64>,
    /// `label=count` pairs, `;`-separated.
    pub group_sizes: String,
    pub seed: u64,
    pub note: String,
}
