//! Rank margins and MRR.

use crate::domain::{rank_at_k, rank_order, BehaviourLabel, Instance, InstanceGroup, SegmentKind};
use crate::error::{Error, Result};

fn segment_positions(instance: &Instance, kind: SegmentKind) -> Result<Vec<usize>> {
    instance
        .segment(kind)
        .map(|s| s.positions())
        .ok_or_else(|| Error::Invalid(format!("{}: no {kind:?} segment", instance.id)))
}

/// Mean Rank@k of segment `kind` over a group.
pub fn group_rank(group: &InstanceGroup, kind: SegmentKind, k: usize) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::UndefinedMetric(format!("group {:?} is empty", group.label)));
    }
    let mut total = 0.0;
    for (inst, phi) in &group.members {
        let ranks = rank_order(&phi.scores)?;
        total += rank_at_k(&ranks, &segment_positions(inst, kind)?, k)?;
    }
    Ok(total / group.len() as f64)
}

/// `Rank@k(T, D_B) − Rank@k(T, D_A)` with `T` the segment `kind`.
pub fn drank_grp(a: &InstanceGroup, b: &InstanceGroup, kind: SegmentKind, k: usize) -> Result<f64> {
    Ok(group_rank(b, kind, k)? - group_rank(a, kind, k)?)
}

/// Mean over a dual-context group of `Rank@k(other piece) − Rank@k(answer
/// piece)`.
pub fn drank_inst(group: &InstanceGroup, k: usize) -> Result<f64> {
    let (answer, other) = match group.label {
        BehaviourLabel::C1 => (SegmentKind::Context1, SegmentKind::Context2),
        BehaviourLabel::C2 => (SegmentKind::Context2, SegmentKind::Context1),
        l => return Err(Error::Invalid(format!("drank_inst needs a C1 or C2 group, got {l:?}"))),
    };
    if group.is_empty() {
        return Err(Error::UndefinedMetric(format!("group {:?} is empty", group.label)));
    }
    let mut total = 0.0;
    for (inst, phi) in &group.members {
        let ranks = rank_order(&phi.scores)?;
        total += rank_at_k(&ranks, &segment_positions(inst, other)?, k)?
            - rank_at_k(&ranks, &segment_positions(inst, answer)?, k)?;
    }
    Ok(total / group.len() as f64)
}

/// Segment holding the gold span of the label's answer.
pub fn answer_segment(label: BehaviourLabel) -> Option<SegmentKind> {
    match label {
        BehaviourLabel::C | BehaviourLabel::C1 => Some(SegmentKind::Context1),
        BehaviourLabel::C2 => Some(SegmentKind::Context2),
        BehaviourLabel::M | BehaviourLabel::Other => None,
    }
}

/// `1 / rank` of the best-ranked gold position.
pub fn reciprocal_rank(scores: &[f64], gold: &[usize]) -> Result<f64> {
    let ranks = rank_order(scores)?;
    let best = gold
        .iter()
        .map(|&p| {
            ranks
                .get(p)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("gold position {p} outside input")))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .ok_or(Error::EmptyTarget)?;
    Ok(1.0 / best as f64)
}

/// Mean reciprocal rank of the gold span of each member's predicted answer.
pub fn mrr(group: &InstanceGroup) -> Result<f64> {
    let kind = answer_segment(group.label).ok_or_else(|| {
        Error::UndefinedMetric(format!("label {:?} has no gold span in the context", group.label))
    })?;
    if group.is_empty() {
        return Err(Error::UndefinedMetric(format!("group {:?} is empty", group.label)));
    }
    let mut total = 0.0;
    for (inst, phi) in &group.members {
        let span = inst
            .gold_span(kind)
            .ok_or_else(|| Error::Invalid(format!("{}: missing gold span in {kind:?}", inst.id)))?;
        total += reciprocal_rank(&phi.scores, &span.token_positions)?;
    }
    Ok(total / group.len() as f64)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn drank_grp_hand_built() {
        // c = [0,5): ranks {1..5} in D_A, {6..10} in D_B.
        let inst2 = instance(5, 0, 5, BehaviourLabel::C);
        let fa2 = phi(&inst2, (0..10).map(|i| 10.0 - i as f64).collect());
        let fb2 = phi(&inst2, (0..10).map(|i| i as f64).collect());
        let mut ga = InstanceGroup::new(BehaviourLabel::C);
        ga.push(&inst2, &fa2).unwrap();
        let mut gb = InstanceGroup::new(BehaviourLabel::M);
        gb.push(&inst2, &fb2).unwrap();
        assert_eq!(drank_grp(&ga, &gb, SegmentKind::Context1, 5).unwrap(), 5.0);
        assert_eq!(drank_grp(&gb, &ga, SegmentKind::Context1, 5).unwrap(), -5.0);
        assert_eq!(drank_grp(&ga, &ga, SegmentKind::Context1, 5).unwrap(), 0.0);
        let empty = InstanceGroup::new(BehaviourLabel::M);
        assert!(matches!(
            drank_grp(&ga, &empty, SegmentKind::Context1, 5),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn drank_inst_uniform_scores_closed_form() {
        for (n1, n2, k) in [(6, 7, 5), (5, 5, 3), (9, 12, 9)] {
            let i1 = instance(n1, n2, 4, BehaviourLabel::C1);
            let i2 = instance(n1, n2, 4, BehaviourLabel::C2);
            let f1 = phi(&i1, vec![0.25; i1.len()]);
            let f2 = phi(&i2, vec![0.25; i2.len()]);
            let mut g1 = InstanceGroup::new(BehaviourLabel::C1);
            g1.push(&i1, &f1).unwrap();
            let mut g2 = InstanceGroup::new(BehaviourLabel::C2);
            g2.push(&i2, &f2).unwrap();
            assert_eq!(drank_inst(&g1, k).unwrap(), n1 as f64);
            assert_eq!(drank_inst(&g2, k).unwrap(), -(n1 as f64));
        }
    }

    #[test]
    fn drank_inst_hand_computed() {
        // c1 = [0,3), c2 = [3,6), q = [6,7)
        let inst = instance(3, 3, 1, BehaviourLabel::C2);
        let f = phi(&inst, vec![0.1, 0.5, 0.2, 0.9, 0.05, 0.3, 0.0]);
        // ranks: 5,2,4,1,6,3,7 ; k=2: c2 best {1,3} -> 2 ; c1 best {2,4} -> 3
        let mut g = InstanceGroup::new(BehaviourLabel::C2);
        g.push(&inst, &f).unwrap();
        assert_eq!(drank_inst(&g, 2).unwrap(), 1.0);
        let mut wrong = InstanceGroup::new(BehaviourLabel::C);
        wrong.push(&inst, &f).unwrap();
        assert!(drank_inst(&wrong, 2).is_err());
    }

    #[test]
    fn mrr_examples() {
        let inst = instance(4, 0, 2, BehaviourLabel::C);
        let f1 = phi(&inst, vec![0.0, 1.0, 0.5, 0.1, 0.0, 0.0]); // gold at rank 4
        let f2 = phi(&inst, vec![0.5, 1.0, 0.1, 0.0, 0.0, 0.0]); // gold at rank 2
        let mut g = InstanceGroup::new(BehaviourLabel::C);
        g.push(&inst, &f1).unwrap();
        g.push(&inst, &f2).unwrap();
        assert_eq!(mrr(&g).unwrap(), 0.375);
        let top = phi(&inst, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut g = InstanceGroup::new(BehaviourLabel::C);
        g.push(&inst, &top).unwrap();
        assert_eq!(mrr(&g).unwrap(), 1.0);
        let mut m = InstanceGroup::new(BehaviourLabel::M);
        m.push(&inst, &top).unwrap();
        assert!(matches!(mrr(&m), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn extra_better_occurrence_never_lowers_rr() {
        let scores = [0.3, 0.9, 0.1, 0.5];
        let one = reciprocal_rank(&scores, &[2]).unwrap();
        let two = reciprocal_rank(&scores, &[2, 3]).unwrap();
        assert!(two >= one);
    }
}
