//! The four highlight-explanation methods and ℓ1 normalisation.

use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::domain::{AttributionVector, BehaviourLabel, Instance, Method, SegmentKind, TokenId};
use crate::error::{Error, Result};

pub const DEFAULT_IG_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    ContextMemory,
    Context1Context2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub tau_answer: TokenId,
    pub tau_prime_answer: TokenId,
    pub pairing: Pairing,
}

impl ContrastPair {
    pub fn new(tau_answer: TokenId, tau_prime_answer: TokenId, pairing: Pairing) -> Result<Self> {
        if tau_answer == tau_prime_answer {
            return Err(Error::Invalid(format!(
                "contrast candidates must differ, both are {tau_answer}"
            )));
        }
        Ok(ContrastPair {
            tau_answer,
            tau_prime_answer,
            pairing,
        })
    }

    /// `(c, m)` for single-context instances, `(c1, c2)` for dual.
    pub fn for_instance(instance: &Instance) -> Result<Self> {
        let missing = |what: &str| Error::Invalid(format!("{}: no {what} token", instance.id));
        let c1 = instance
            .candidate_token(SegmentKind::Context1)
            .ok_or_else(|| missing("context answer"))?;
        if instance.is_dual() {
            let c2 = instance
                .candidate_token(SegmentKind::Context2)
                .ok_or_else(|| missing("second context answer"))?;
            Self::new(c1, c2, Pairing::Context1Context2)
        } else {
            let m = instance.memory_token.ok_or_else(|| missing("memory answer"))?;
            Self::new(c1, m, Pairing::ContextMemory)
        }
    }

    pub fn swapped(self) -> Self {
        ContrastPair {
            tau_answer: self.tau_prime_answer,
            tau_prime_answer: self.tau_answer,
            pairing: self.pairing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub ig_steps: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            ig_steps: DEFAULT_IG_STEPS,
        }
    }
}

/// `φ / Σ|φ|`; an all-zero vector comes back unchanged with `false`.
pub fn normalize_l1(scores: &[f64]) -> (Vec<f64>, bool) {
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    if total == 0.0 {
        return (scores.to_vec(), false);
    }
    (scores.iter().map(|s| s / total).collect(), true)
}

fn answer_token(instance: &Instance) -> Result<TokenId> {
    instance
        .answer_token
        .ok_or_else(|| Error::Invalid(format!("{}: answer token not set", instance.id)))
}

fn normalized(instance: &Instance, method: Method, raw: Vec<f64>) -> Result<AttributionVector> {
    if raw.len() != instance.len() {
        return Err(Error::InvalidAttribution(format!(
            "{}: {method} produced {} scores for {} tokens",
            instance.id,
            raw.len(),
            instance.len()
        )));
    }
    if let Some(i) = raw.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidAttribution(format!(
            "{}: {method} score at position {i} is {}",
            instance.id, raw[i]
        )));
    }
    let (scores, normalized) = normalize_l1(&raw);
    Ok(AttributionVector {
        instance_id: instance.id.clone(),
        method,
        scores,
        normalized,
        selected_head: None,
    })
}

/// Unnormalised FA scores: `f_a(x) − f_a(x with x_i := pad)`.
pub fn fa_raw(backend: &dyn ModelBackend, instance: &Instance) -> Result<Vec<f64>> {
    let a = answer_token(instance)?;
    let base = backend.candidate_logits(instance, &[a])?[0];
    let ablated = backend.ablation_logits(instance, &[a])?;
    ablated
        .iter()
        .map(|row| row.first().map(|v| base - v).ok_or_else(|| Error::Model("empty ablation row".into())))
        .collect()
}

pub fn explain_fa(backend: &dyn ModelBackend, instance: &Instance) -> Result<AttributionVector> {
    normalized(instance, Method::FA, fa_raw(backend, instance)?)
}

pub fn explain_ig(backend: &dyn ModelBackend, instance: &Instance, steps: usize) -> Result<AttributionVector> {
    let a = answer_token(instance)?;
    let raw = backend.integrated_gradients(instance, a, steps)?;
    normalized(instance, Method::IG, raw)
}

fn argmax_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.map_or(true, |b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

fn attention_vector(
    backend: &dyn ModelBackend,
    instance: &Instance,
    method: Method,
    (l, h): (usize, usize),
) -> Result<AttributionVector> {
    let rows = backend.attention_rows(instance)?;
    let row = rows
        .get(l)
        .and_then(|layer| layer.get(h))
        .ok_or_else(|| Error::Model(format!("no attention row for head ({l},{h})")))?;
    if row.len() != instance.len() {
        return Err(Error::InvalidAttribution(format!(
            "{}: attention row has {} entries for {} tokens",
            instance.id,
            row.len(),
            instance.len()
        )));
    }
    Ok(AttributionVector {
        instance_id: instance.id.clone(),
        method,
        scores: row.clone(),
        normalized: false,
        selected_head: Some((l, h)),
    })
}

pub fn explain_attn(backend: &dyn ModelBackend, instance: &Instance) -> Result<AttributionVector> {
    let a = answer_token(instance)?;
    let (layers, _) = backend.shape();
    let scores = backend.attn_selection_scores(instance, a)?;
    let h = argmax_first(&scores).ok_or_else(|| Error::Model("no heads to select from".into()))?;
    if layers == 0 {
        return Err(Error::Model("ATTN needs at least one layer".into()));
    }
    attention_vector(backend, instance, Method::ATTN, (layers - 1, h))
}

/// `S_τ^{(l,h)}` for every head: contribution to `τ` minus contribution to
/// `τ′`.
pub fn contrast_scores(backend: &dyn ModelBackend, instance: &Instance, contrast: ContrastPair) -> Result<Vec<Vec<f64>>> {
    let contrib = backend.head_logit_contributions(instance, &[contrast.tau_answer, contrast.tau_prime_answer])?;
    contrib
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|c| match c.as_slice() {
                    [t, tp] => Ok(t - tp),
                    _ => Err(Error::Model("expected two contributions per head".into())),
                })
                .collect()
        })
        .collect()
}

/// Head maximising the label's contrastive score; ties go to the smallest
/// `(layer, head)`.
pub fn select_head(scores: &[Vec<f64>], label: BehaviourLabel, pairing: Pairing) -> Result<(usize, usize)> {
    let sign = match (label, pairing) {
        (BehaviourLabel::C, Pairing::ContextMemory) | (BehaviourLabel::C1, Pairing::Context1Context2) => 1.0,
        (BehaviourLabel::M, Pairing::ContextMemory) | (BehaviourLabel::C2, Pairing::Context1Context2) => -1.0,
        (BehaviourLabel::Other, _) => {
            return Err(Error::Invalid("MechLight has no selection rule for label Other".into()))
        }
        (label, pairing) => {
            return Err(Error::Invalid(format!("label {label:?} does not belong to pairing {pairing:?}")))
        }
    };
    let mut best: Option<((usize, usize), f64)> = None;
    for (l, layer) in scores.iter().enumerate() {
        for (h, &s) in layer.iter().enumerate() {
            let v = sign * s;
            if best.map_or(true, |(_, b)| v > b) {
                best = Some(((l, h), v));
            }
        }
    }
    best.map(|(lh, _)| lh).ok_or_else(|| Error::Model("no heads to select from".into()))
}

pub fn explain_mechlight(
    backend: &dyn ModelBackend,
    instance: &Instance,
    label: BehaviourLabel,
    contrast: ContrastPair,
) -> Result<AttributionVector> {
    if label == BehaviourLabel::Other {
        return Err(Error::Invalid("MechLight has no selection rule for label Other".into()));
    }
    let scores = contrast_scores(backend, instance, contrast)?;
    let head = select_head(&scores, label, contrast.pairing)?;
    attention_vector(backend, instance, Method::MechLight, head)
}

/// Runs `method` on a labelled instance.
pub fn explain(
    backend: &dyn ModelBackend,
    instance: &Instance,
    method: Method,
    config: &ExplainConfig,
) -> Result<AttributionVector> {
    match method {
        Method::FA => explain_fa(backend, instance),
        Method::IG => explain_ig(backend, instance, config.ig_steps),
        Method::ATTN => explain_attn(backend, instance),
        Method::MechLight => {
            let label = instance
                .label
                .ok_or_else(|| Error::Invalid(format!("{}: unlabelled instance", instance.id)))?;
            explain_mechlight(backend, instance, label, ContrastPair::for_instance(instance)?)
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MicroBackend;
    use super::tests_support::planted_instance;
    use crate::microlm::{forward, plant_copy_model, planted_config, ModelConfig, Params};
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_l1(&[2.0, -1.0, 1.0]), (vec![0.5, -0.25, 0.25], true));
        assert_eq!(normalize_l1(&[0.0, 0.0]), (vec![0.0, 0.0], false));
    }

    proptest! {
        #[test]
        fn normalized_mass_is_one(v in prop::collection::vec(-3.0f64..3.0, 1..30)) {
            prop_assume!(v.iter().any(|x| *x != 0.0));
            let (n, flag) = normalize_l1(&v);
            prop_assert!(flag);
            prop_assert!((n.iter().map(|x| x.abs()).sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(crate::rank_order(&n).unwrap(), crate::rank_order(&v).unwrap());
        }
    }

    fn planted() -> (MicroBackend, Instance, (usize, usize)) {
        let cfg = planted_config(12, 12, 2, 2);
        let m = plant_copy_model(&cfg, 3, 1).unwrap();
        let inst = planted_instance(&[5, 6, 3, 7, 8, 9, 10, 4], 6, 3, 7);
        (MicroBackend::new(m.params), inst, m.designated)
    }

    #[test]
    fn planted_recovery_all_methods() {
        let (b, inst, designated) = planted();
        let fa = explain_fa(&b, &inst).unwrap();
        assert_eq!(crate::rank_order(&fa.scores).unwrap()[3], 1);
        let attn = explain_attn(&b, &inst).unwrap();
        assert_eq!(attn.selected_head, Some(designated));
        assert!(attn.scores[3] >= 0.99);
        assert!((attn.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let ml = explain(&b, &inst, Method::MechLight, &ExplainConfig::default()).unwrap();
        assert_eq!(ml.selected_head, Some(designated));
        assert_eq!(crate::rank_order(&ml.scores).unwrap()[3], 1);
        let ig = explain_ig(&b, &inst, 10).unwrap();
        assert!(ig.normalized);
    }

    #[test]
    fn fa_uses_one_forward_per_position() {
        let (b, inst, _) = planted();
        b.reset_forward_count();
        fa_raw(&b, &inst).unwrap();
        assert_eq!(b.forward_count(), inst.len() + 1);
    }

    #[test]
    fn fa_zero_for_positions_that_do_not_matter() {
        // Token 0 is pad already, so ablating it leaves the input unchanged.
        let (b, mut inst, _) = planted();
        inst.tokens[0].id = 0;
        let raw = fa_raw(&b, &inst).unwrap();
        assert_eq!(raw[0], 0.0);
    }

    #[test]
    fn contrast_antisymmetry_and_other_refused() {
        let (b, inst, _) = planted();
        let c = ContrastPair::for_instance(&inst).unwrap();
        let s = contrast_scores(&b, &inst, c).unwrap();
        let r = contrast_scores(&b, &inst, c.swapped()).unwrap();
        for (x, y) in s.iter().flatten().zip(r.iter().flatten()) {
            assert_eq!(*x, -*y);
        }
        assert!(explain_mechlight(&b, &inst, BehaviourLabel::Other, c).is_err());
        assert!(select_head(&s, BehaviourLabel::C1, Pairing::ContextMemory).is_err());
        assert!(ContrastPair::new(3, 3, Pairing::ContextMemory).is_err());
    }

    #[test]
    fn tie_goes_to_earliest_head() {
        let s = vec![vec![0.0, 2.0], vec![2.0, 1.0]];
        assert_eq!(select_head(&s, BehaviourLabel::C, Pairing::ContextMemory).unwrap(), (0, 1));
        assert_eq!(select_head(&s, BehaviourLabel::M, Pairing::ContextMemory).unwrap(), (0, 0));
    }

    #[test]
    fn duplicated_heads_tie_to_lower_index() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: 12,
            max_positions: 8,
            mlp: false,
            layernorm: false,
            mlp_hidden: 0,
            seed: 4,
        };
        let mut p = Params::init(&cfg, 0.5).unwrap();
        let h0 = p.layers[0].heads[0].clone();
        p.layers[0].heads[1] = h0;
        let b = MicroBackend::new(p);
        let inst = planted_instance(&[5, 6, 3, 7, 8, 9, 10, 4], 6, 3, 7);
        let c = ContrastPair::for_instance(&inst).unwrap();
        let s = contrast_scores(&b, &inst, c).unwrap();
        assert_eq!(s[0][0], s[0][1]);
        let ml = explain_mechlight(&b, &inst, BehaviourLabel::C, c).unwrap();
        assert_eq!(ml.selected_head, Some((0, 0)));
        let attn = explain_attn(&b, &inst).unwrap();
        assert_eq!(attn.selected_head, Some((0, 0)));
    }

    #[test]
    fn ig_zero_on_baseline_and_exact_for_embedding_only_model() {
        let cfg = ModelConfig {
            n_layers: 0,
            n_heads: 1,
            d_model: 6,
            vocab_size: 12,
            max_positions: 8,
            mlp: false,
            layernorm: false,
            mlp_hidden: 0,
            seed: 2,
        };
        let p = Params::init(&cfg, 0.5).unwrap();
        let b = MicroBackend::new(p.clone());
        let mut base = planted_instance(&[0, 0, 0, 0], 3, 1, 7);
        let zero = b.integrated_gradients(&base, 7, 10).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        base.tokens.iter_mut().zip([4, 5, 6, 7]).for_each(|(t, id)| t.id = id);
        let ig1 = b.integrated_gradients(&base, 7, 1).unwrap();
        let ig9 = b.integrated_gradients(&base, 7, 9).unwrap();
        for (x, y) in ig1.iter().zip(&ig9) {
            assert!((x - y).abs() < 1e-12);
        }
        let full = forward::forward(&p, &base.token_ids()).unwrap().logits[7];
        let empty = forward::forward(&p, &[0, 0, 0, 0]).unwrap().logits[7];
        assert!((ig1.iter().sum::<f64>() - (full - empty)).abs() < 1e-12);
    }

    #[test]
    fn explainers_are_deterministic() {
        let (b, inst, _) = planted();
        for m in Method::ALL {
            let x = explain(&b, &inst, m, &ExplainConfig::default()).unwrap();
            let y = explain(&b, &inst, m, &ExplainConfig::default()).unwrap();
            assert_eq!(x, y);
        }
    }
}
