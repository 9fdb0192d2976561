//! Domain types shared by every stage, plus the ranking utility all rank
//! metrics are built on.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub text: String,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentKind {
    Context1,
    Context2,
    Question,
}

/// Half-open token-position range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn positions(&self) -> Vec<usize> {
        self.range().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub segment_kind: SegmentKind,
    /// Positions of every token of every occurrence of the answer.
    pub token_positions: Vec<usize>,
    pub answer_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Conflicting,
    Irrelevant,
    DoubleConflicting,
    Mixed,
    DoubleConflictingSwap,
    MixedSwap,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Conflicting,
        Regime::Irrelevant,
        Regime::DoubleConflicting,
        Regime::Mixed,
        Regime::DoubleConflictingSwap,
        Regime::MixedSwap,
    ];

    pub fn is_dual(self) -> bool {
        !matches!(self, Regime::Conflicting | Regime::Irrelevant)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Conflicting => "Conflicting",
            Regime::Irrelevant => "Irrelevant",
            Regime::DoubleConflicting => "DoubleConflicting",
            Regime::Mixed => "Mixed",
            Regime::DoubleConflictingSwap => "DoubleConflictingSwap",
            Regime::MixedSwap => "MixedSwap",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        Regime::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    FA,
    IG,
    ATTN,
    MechLight,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FA, Method::IG, Method::ATTN, Method::MechLight];

    pub fn name(self) -> &'static str {
        match self {
            Method::FA => "FA",
            Method::IG => "IG",
            Method::ATTN => "ATTN",
            Method::MechLight => "MechLight",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// FA and IG produce signed scores that are l1-normalised; the
    /// attention-based methods emit softmax rows as-is.
    pub fn is_gradient_like(self) -> bool {
        matches!(self, Method::FA | Method::IG)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviourLabel {
    C,
    M,
    C1,
    C2,
    Other,
}

impl BehaviourLabel {
    pub fn name(self) -> &'static str {
        match self {
            BehaviourLabel::C => "C",
            BehaviourLabel::M => "M",
            BehaviourLabel::C1 => "C1",
            BehaviourLabel::C2 => "C2",
            BehaviourLabel::Other => "Other",
        }
    }
}

impl fmt::Display for BehaviourLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub regime: Regime,
    pub tokens: Vec<Token>,
    pub segments: Vec<Segment>,
    pub gold_spans: Vec<GoldSpan>,
    pub memory_answer: String,
    /// First token of `memory_answer`; the `m` side of the MechLight contrast.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_token: Option<TokenId>,
    pub question_text: String,
    /// Greedy continuation of the backend, filled in by the classify stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_answer: Option<String>,
    /// First generated token: the target every explainer explains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_token: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<BehaviourLabel>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn gold_span(&self, kind: SegmentKind) -> Option<&GoldSpan> {
        self.gold_spans.iter().find(|g| g.segment_kind == kind)
    }

    /// First token of the first occurrence of the gold answer in `kind`.
    pub fn candidate_token(&self, kind: SegmentKind) -> Option<TokenId> {
        let span = self.gold_span(kind)?;
        let first = *span.token_positions.iter().min()?;
        self.tokens.get(first).map(|t| t.id)
    }

    pub fn is_dual(&self) -> bool {
        self.segment(SegmentKind::Context2).is_some()
    }

    /// Checks the structural invariants of an assembled instance.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.position != i {
                return Err(Error::Invalid(format!(
                    "{}: token {} has position {}",
                    self.id, i, t.position
                )));
            }
        }
        let mut cursor = 0;
        for s in &self.segments {
            if s.start != cursor || s.end < s.start {
                return Err(Error::Invalid(format!(
                    "{}: segments must be contiguous and ordered",
                    self.id
                )));
            }
            cursor = s.end;
        }
        if cursor != n {
            return Err(Error::Invalid(format!(
                "{}: segments cover {} of {} tokens",
                self.id, cursor, n
            )));
        }
        let contexts: Vec<SegmentKind> = self
            .segments
            .iter()
            .map(|s| s.kind)
            .filter(|k| *k != SegmentKind::Question)
            .collect();
        let expected = if self.regime.is_dual() {
            vec![SegmentKind::Context1, SegmentKind::Context2]
        } else {
            vec![SegmentKind::Context1]
        };
        if contexts != expected {
            return Err(Error::Invalid(format!(
                "{}: regime {} expects context segments {:?}, found {:?}",
                self.id, self.regime, expected, contexts
            )));
        }
        for kind in &expected {
            let seg = self.segment(*kind).expect("checked above");
            let spans: Vec<&GoldSpan> = self
                .gold_spans
                .iter()
                .filter(|g| g.segment_kind == *kind)
                .collect();
            if spans.len() != 1 {
                return Err(Error::Invalid(format!(
                    "{}: context {:?} carries {} gold spans",
                    self.id,
                    kind,
                    spans.len()
                )));
            }
            let span = spans[0];
            if span.answer_text.is_empty() || span.token_positions.is_empty() {
                return Err(Error::Invalid(format!("{}: empty gold span", self.id)));
            }
            if span.token_positions.iter().any(|p| !seg.range().contains(p)) {
                return Err(Error::Invalid(format!(
                    "{}: gold span outside segment {:?}",
                    self.id, kind
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub instance_id: String,
    pub method: Method,
    pub scores: Vec<f64>,
    pub normalized: bool,
    /// `(layer, head)` chosen by ATTN or MechLight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_head: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct InstanceGroup<'a> {
    pub label: BehaviourLabel,
    pub members: Vec<(&'a Instance, &'a AttributionVector)>,
}

impl<'a> InstanceGroup<'a> {
    pub fn new(label: BehaviourLabel) -> Self {
        InstanceGroup {
            label,
            members: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn push(&mut self, instance: &'a Instance, phi: &'a AttributionVector) -> Result<()> {
        if self.label == BehaviourLabel::Other {
            return Err(Error::Invalid("Other-labelled instances never enter a group".into()));
        }
        if let Some((first, phi0)) = self.members.first() {
            if first.regime != instance.regime || phi0.method != phi.method {
                return Err(Error::Invalid(
                    "group members must share one regime and one method".into(),
                ));
            }
        }
        self.members.push((instance, phi));
        Ok(())
    }
}

/// 1-based ranks, rank 1 for the largest score; ties go to the earlier
/// position.
pub fn rank_order(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidAttribution(format!(
            "non-finite score {} at position {}",
            scores[i], i
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, &pos) in order.iter().enumerate() {
        ranks[pos] = r + 1;
    }
    Ok(ranks)
}

/// Mean of the `k` best (smallest) ranks attained by `target` positions;
/// averages over all of them when `|target| < k`.
pub fn rank_at_k(ranks: &[usize], target: &[usize], k: usize) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let mut r: Vec<usize> = target
        .iter()
        .map(|&p| {
            ranks.get(p).copied().ok_or_else(|| {
                Error::Invalid(format!("target position {p} outside input of length {}", ranks.len()))
            })
        })
        .collect::<Result<_>>()?;
    r.sort_unstable();
    let take = k.min(r.len());
    Ok(r[..take].iter().sum::<usize>() as f64 / take as f64)
}

/// Convenience wrapper ranking `phi` first.
pub fn rank_at_k_scores(phi: &AttributionVector, target: &[usize], k: usize) -> Result<f64> {
    let ranks = rank_order(&phi.scores)?;
    rank_at_k(&ranks, target, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_order_examples() {
        assert_eq!(rank_order(&[3.0, 1.0, 2.0]).unwrap(), vec![1, 3, 2]);
        assert_eq!(rank_order(&[0.5, 0.5, 0.5]).unwrap(), vec![1, 2, 3]);
        // 0.9@1 and 0.9@2 tie -> position 1 first; then 0.2, then 0.1.
        assert_eq!(rank_order(&[0.1, 0.9, 0.9, 0.2]).unwrap(), vec![4, 1, 2, 3]);
    }

    #[test]
    fn rank_order_rejects_non_finite() {
        assert!(matches!(
            rank_order(&[1.0, f64::NAN]),
            Err(Error::InvalidAttribution(_))
        ));
        assert!(rank_order(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn rank_at_k_examples() {
        // Target tokens sit at ranks {1,2,7,9}.
        let ranks = vec![1, 3, 2, 4, 5, 6, 7, 8, 9];
        let target = [0, 2, 6, 8];
        assert_eq!(rank_at_k(&ranks, &target, 2).unwrap(), 1.5);

        let n = 9;
        let all: Vec<usize> = (0..n).collect();
        assert_eq!(rank_at_k(&ranks, &all, n).unwrap(), (n as f64 + 1.0) / 2.0);

        assert_eq!(rank_at_k(&ranks, &[0], 5).unwrap(), 1.0);
        assert!(matches!(rank_at_k(&ranks, &[], 5), Err(Error::EmptyTarget)));
    }

    proptest! {
        #[test]
        fn ranks_are_a_permutation(scores in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let mut r = rank_order(&scores).unwrap();
            r.sort_unstable();
            prop_assert_eq!(r, (1..=scores.len()).collect::<Vec<_>>());
        }

        #[test]
        fn ranks_invariant_under_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(rank_order(&scores).unwrap(), rank_order(&mapped).unwrap());
        }

        #[test]
        fn rank_at_k_monotone_in_k(
            scores in prop::collection::vec(-1.0f64..1.0, 2..20),
            mask in prop::collection::vec(any::<bool>(), 20),
        ) {
            let target: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
            prop_assume!(!target.is_empty());
            let ranks = rank_order(&scores).unwrap();
            let mut prev = 0.0;
            for k in 1..=scores.len() {
                let v = rank_at_k(&ranks, &target, k).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }

        #[test]
        fn union_of_disjoint_segments(
            scores in prop::collection::vec(-1.0f64..1.0, 2..=12),
            split in 1usize..11,
            k in 1usize..6,
        ) {
            let n = scores.len();
            let split = split.min(n - 1);
            let ranks = rank_order(&scores).unwrap();
            let a: Vec<usize> = (0..split).collect();
            let b: Vec<usize> = (split..n).collect();
            let u: Vec<usize> = (0..n).collect();
            let ru = rank_at_k(&ranks, &u, k).unwrap();
            let best_a = rank_at_k(&ranks, &a, 1).unwrap();
            let best_b = rank_at_k(&ranks, &b, 1).unwrap();
            prop_assert!(ru >= best_a.min(best_b));
            if a.len() >= k && b.len() >= k {
                let ra = rank_at_k(&ranks, &a, k).unwrap();
                let rb = rank_at_k(&ranks, &b, k).unwrap();
                prop_assert!(ru <= ra.min(rb));
            }
        }
    }
}
