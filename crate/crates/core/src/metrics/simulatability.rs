//! Top-k feature vectors and the kNN normalised mutual information
//! estimator.

use serde::{Deserialize, Serialize};

use crate::domain::{InstanceGroup, SegmentKind};
use crate::error::{Error, Result};

pub const DEFAULT_NEIGHBOURS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFeatures {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub k: usize,
}

/// The `k` largest scores of `kind`'s tokens in descending order, padded
/// with 0.
pub fn top_k(scores: &[f64], range: std::ops::Range<usize>, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = scores[range].to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.resize(k, 0.0);
    v
}

impl SimFeatures {
    /// Rows from group `a` (label 0) then group `b` (label 1). Single-context
    /// groups give `k` columns from Context1; dual give `2k`, Context1 block
    /// first.
    pub fn from_groups(a: &InstanceGroup, b: &InstanceGroup, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (label, group) in [(0u8, a), (1u8, b)] {
            for (inst, phi) in &group.members {
                let kinds: &[SegmentKind] = if inst.is_dual() {
                    &[SegmentKind::Context1, SegmentKind::Context2]
                } else {
                    &[SegmentKind::Context1]
                };
                let mut row = Vec::with_capacity(k * kinds.len());
                for kind in kinds {
                    let seg = inst
                        .segment(*kind)
                        .ok_or_else(|| Error::Invalid(format!("{}: no {kind:?} segment", inst.id)))?;
                    if seg.end > phi.scores.len() {
                        return Err(Error::InvalidAttribution(format!("{}: scores shorter than input", inst.id)));
                    }
                    row.extend(top_k(&phi.scores, seg.range(), k));
                }
                x.push(row);
                y.push(label);
            }
        }
        if let Some(w) = x.first().map(Vec::len) {
            if x.iter().any(|r| r.len() != w) {
                return Err(Error::Invalid("groups mix single- and dual-context instances".into()));
            }
        }
        Ok(SimFeatures { x, y, k })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn binary_entropy(q: f64) -> f64 {
    if q <= 0.0 || q >= 1.0 {
        0.0
    } else {
        -q * q.ln() - (1.0 - q) * (1.0 - q).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmiEstimate {
    pub nmi: f64,
    /// Nats.
    pub h_y: f64,
    pub h_y_given_x: f64,
    /// Labels are constant, so `H(Y) = 0` and NMI is defined as 0.
    pub degenerate: bool,
}

/// kNN estimate of `I(Y; X) / H(Y)`, clamped to `[0, 1]`. Neighbours are the
/// `neighbours` nearest rows by Euclidean distance excluding the row itself;
/// rows tied with the last neighbour's distance are all included.
pub fn nmutinf(x: &[Vec<f64>], y: &[u8], neighbours: usize) -> Result<NmiEstimate> {
    let n = y.len();
    if x.len() != n {
        return Err(Error::Invalid(format!("{} feature rows for {n} labels", x.len())));
    }
    if neighbours == 0 || n < neighbours + 1 {
        return Err(Error::UndefinedMetric(format!(
            "nmutinf needs at least {} rows, got {n}",
            neighbours + 1
        )));
    }
    let p = y.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
    let h_y = binary_entropy(p);
    if h_y == 0.0 {
        return Ok(NmiEstimate {
            nmi: 0.0,
            h_y,
            h_y_given_x: 0.0,
            degenerate: true,
        });
    }
    let mut dist = vec![0.0; n - 1];
    let mut sorted = vec![0.0; n - 1];
    let mut total = 0.0;
    for i in 0..n {
        let mut idx = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            dist[idx] = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            idx += 1;
        }
        sorted.copy_from_slice(&dist);
        let (_, kth, _) = sorted.select_nth_unstable_by(neighbours - 1, |a, b| a.total_cmp(b));
        let radius = *kth;
        let (mut count, mut ones) = (0usize, 0usize);
        let mut idx = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            if dist[idx] <= radius {
                count += 1;
                ones += (y[j] == 1) as usize;
            }
            idx += 1;
        }
        total += binary_entropy(ones as f64 / count as f64);
    }
    let h_y_given_x = total / n as f64;
    Ok(NmiEstimate {
        nmi: ((h_y - h_y_given_x) / h_y).clamp(0.0, 1.0),
        h_y,
        h_y_given_x,
        degenerate: false,
    })
}
