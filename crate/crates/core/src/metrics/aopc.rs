//! Comprehensiveness and sufficiency by pad masking.

use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::domain::{rank_order, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AopcGrid {
    /// `K = {1, …, 5}`
    #[default]
    Absolute,
    /// `K = {⌈0.01 n⌉, …, ⌈0.05 n⌉}`
    Fractional,
}

impl AopcGrid {
    /// Grid values for an input of `n` tokens, each clamped to `[1, n]`.
    pub fn ks(self, n: usize) -> Vec<usize> {
        (1..=5)
            .map(|i| match self {
                AopcGrid::Absolute => i,
                AopcGrid::Fractional => ((i as f64 * 0.01 * n as f64).ceil() as usize).max(1),
            })
            .map(|k| k.min(n))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aopc {
    pub comp: f64,
    pub suff: f64,
}

/// `ℓ(z) = log p(a | z)` under the full-vocabulary softmax.
pub fn aopc(backend: &dyn ModelBackend, instance: &Instance, scores: &[f64], grid: &[usize]) -> Result<Aopc> {
    let a = instance
        .answer_token
        .ok_or_else(|| Error::Invalid(format!("{}: answer token not set", instance.id)))?;
    let n = instance.len();
    if scores.len() != n {
        return Err(Error::InvalidAttribution(format!(
            "{}: {} scores for {n} tokens",
            instance.id,
            scores.len()
        )));
    }
    if grid.is_empty() || grid.iter().any(|&k| k == 0 || k > n) {
        return Err(Error::Invalid(format!("AOPC grid {grid:?} invalid for {n} tokens")));
    }
    let ranks = rank_order(scores)?;
    let ids = instance.token_ids();
    let pad = backend.pad_id();
    let full = backend.log_prob(&ids, a)?;
    let (mut comp, mut suff) = (0.0, 0.0);
    for &k in grid {
        let top = |p: usize| ranks[p] <= k;
        let masked: Vec<_> = ids.iter().enumerate().map(|(p, &t)| if top(p) { pad } else { t }).collect();
        let kept: Vec<_> = ids.iter().enumerate().map(|(p, &t)| if top(p) { t } else { pad }).collect();
        comp += full - backend.log_prob(&masked, a)?;
        suff += full - backend.log_prob(&kept, a)?;
    }
    let m = grid.len() as f64;
    Ok(Aopc {
        comp: comp / m,
        suff: suff / m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MicroBackend;
    use crate::microlm::{plant_copy_model, planted_config};

    #[test]
    fn grids() {
        assert_eq!(AopcGrid::Absolute.ks(100), vec![1, 2, 3, 4, 5]);
        assert_eq!(AopcGrid::Absolute.ks(3), vec![1, 2, 3, 3, 3]);
        assert_eq!(AopcGrid::Fractional.ks(250), vec![3, 5, 8, 10, 13]);
        assert_eq!(AopcGrid::Fractional.ks(10), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn keep_all_has_zero_sufficiency() {
        let cfg = planted_config(12, 12, 2, 2);
        let m = plant_copy_model(&cfg, 3, 1).unwrap();
        let b = MicroBackend::new(m.params);
        let inst = crate::explainers::tests_support::planted_instance(&[5, 6, 3, 7, 8, 9, 10, 4], 6, 3, 7);
        let scores = vec![0.1; 8];
        let r = aopc(&b, &inst, &scores, &[8]).unwrap();
        assert_eq!(r.suff, 0.0);
        let mut oracle = vec![0.0; 8];
        oracle[3] = 1.0;
        let o = aopc(&b, &inst, &oracle, &[1, 2, 3, 4, 5]).unwrap();
        let u = aopc(&b, &inst, &[0.5, 0.4, 0.0, 0.0, 0.3, 0.2, 0.1, 0.6], &[1, 2, 3, 4, 5]).unwrap();
        assert!(o.comp > u.comp && o.suff < u.suff, "{o:?} {u:?}");
        assert!(aopc(&b, &inst, &scores, &[0]).is_err());
    }
}
