//! Instance builders and planted-model layouts shared by the integration
//! tests.
#![allow(dead_code)]

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ctxeval::backend::MicroBackend;
use ctxeval::microlm::{plant_copy_model, planted_config};
use ctxeval::{BehaviourLabel, GoldSpan, Instance, Regime, Segment, SegmentKind, Token, TokenId};

/// Context pieces in order (`Context1`, then `Context2` when dual), each with
/// its gold positions; the rest of `ids` is the question.
pub fn instance(
    id: &str,
    ids: &[TokenId],
    contexts: &[(Range<usize>, Vec<usize>)],
    memory_token: TokenId,
    label: BehaviourLabel,
) -> Instance {
    let kinds = [SegmentKind::Context1, SegmentKind::Context2];
    let mut segments = Vec::new();
    let mut gold_spans = Vec::new();
    for ((range, gold), kind) in contexts.iter().zip(kinds) {
        segments.push(Segment {
            kind,
            start: range.start,
            end: range.end,
        });
        gold_spans.push(GoldSpan {
            segment_kind: kind,
            token_positions: gold.clone(),
            answer_text: format!("t{}", ids[gold[0]]),
        });
    }
    let q_start = contexts.last().map_or(0, |c| c.0.end);
    segments.push(Segment {
        kind: SegmentKind::Question,
        start: q_start,
        end: ids.len(),
    });
    let inst = Instance {
        id: id.into(),
        regime: if contexts.len() == 2 { Regime::DoubleConflicting } else { Regime::Conflicting },
        tokens: ids
            .iter()
            .enumerate()
            .map(|(position, &id)| Token {
                id,
                text: format!("t{id}"),
                position,
            })
            .collect(),
        segments,
        gold_spans,
        memory_answer: format!("t{memory_token}"),
        memory_token: Some(memory_token),
        question_text: String::new(),
        generated_answer: None,
        answer_token: None,
        label: Some(label),
    };
    inst.validate().expect("builder produced an invalid instance");
    inst
}

/// A planted copy model with one single-context and one dual-context
/// instance laid out so the copy head reads a known position.
pub struct PlantedCase {
    pub backend: MicroBackend,
    pub designated: (usize, usize),
    pub trigger: TokenId,
    pub offset: usize,
    /// Trigger at `answer_pos - offset`; answer copied from `answer_pos`.
    pub single: Instance,
    pub single_answer_pos: usize,
    pub dual: Instance,
    pub dual_answer_pos: usize,
}

/// Random planted configuration; `dual_source` picks the context that holds
/// the trigger in the dual instance.
pub fn planted_case(rng: &mut ChaCha8Rng, dual_source: SegmentKind) -> PlantedCase {
    let n = rng.gen_range(10..=14);
    let vocab = n + rng.gen_range(6..=10);
    let offset = rng.gen_range(1..=2);
    let cfg = planted_config(vocab, n + 2, rng.gen_range(2..=3), rng.gen_range(2..=3));
    // 0 is pad; tokens 1.. are shuffled so every input token is distinct.
    let mut pool: Vec<TokenId> = (1..vocab as TokenId).collect();
    pool.shuffle(rng);
    let trigger = pool[0];
    let memory = pool[1];
    let fill = &pool[2..];
    let model = plant_copy_model(&cfg, trigger, offset).expect("planted config");
    let backend = MicroBackend::new(model.params);

    // Single context: trigger somewhere in the context, question after.
    let ctx_end = rng.gen_range(n - 4..=n - 2);
    let t = rng.gen_range(0..ctx_end - offset);
    let mut ids: Vec<TokenId> = fill[..n].to_vec();
    ids[t] = trigger;
    let answer_pos = t + offset;
    let mut single = instance("planted-single", &ids, &[(0..ctx_end, vec![answer_pos])], memory, BehaviourLabel::C);
    single.answer_token = Some(ids[answer_pos]);

    // Dual: two pieces, trigger at the head of the source piece so every
    // other token of that piece sits after it.
    let c1_end = rng.gen_range(4..=5);
    let c2_end = c1_end + rng.gen_range(4..=5);
    let mut ids: Vec<TokenId> = fill[..n].to_vec();
    let (src, other, label) = match dual_source {
        SegmentKind::Context2 => (c1_end..c2_end, 0..c1_end, BehaviourLabel::C2),
        _ => (0..c1_end, c1_end..c2_end, BehaviourLabel::C1),
    };
    ids[src.start] = trigger;
    let dual_answer_pos = src.start + offset;
    let other_gold = rng.gen_range(other.clone());
    let (g1, g2) = if label == BehaviourLabel::C1 {
        (dual_answer_pos, other_gold)
    } else {
        (other_gold, dual_answer_pos)
    };
    let mut dual = instance(
        "planted-dual",
        &ids,
        &[(0..c1_end, vec![g1]), (c1_end..c2_end, vec![g2])],
        memory,
        label,
    );
    dual.answer_token = Some(ids[dual_answer_pos]);

    PlantedCase {
        backend,
        designated: model.designated,
        trigger,
        offset,
        single,
        single_answer_pos: answer_pos,
        dual,
        dual_answer_pos,
    }
}
