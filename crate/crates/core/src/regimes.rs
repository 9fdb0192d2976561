//! Context regimes: fact records, the closed-book memory check, prompt
//! assembly with token-aligned gold spans, behaviour labelling, and a seeded
//! synthetic corpus.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::domain::{BehaviourLabel, GoldSpan, Instance, Regime, Segment, SegmentKind, Token};
use crate::error::{Error, Result};
use crate::microlm::tokenizer::{split, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub text: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub question_text: String,
    pub subject: String,
    pub memory_answer: String,
    pub conflicting_passages: Vec<Passage>,
    pub irrelevant_passage: Passage,
}

impl FactRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("record '{}': {m}", self.subject)));
        for p in self.conflicting_passages.iter().chain([&self.irrelevant_passage]) {
            if p.answer.is_empty() || !p.text.contains(&p.answer) {
                return bad(format!("passage does not contain its answer '{}'", p.answer));
            }
        }
        for (i, p) in self.conflicting_passages.iter().enumerate() {
            if p.answer == self.memory_answer {
                return bad("conflicting answer equals the memory answer".into());
            }
            if self.conflicting_passages[..i].iter().any(|q| q.answer == p.answer) {
                return bad("conflicting answers must differ".into());
            }
        }
        if self.irrelevant_passage.answer == self.memory_answer {
            return bad("irrelevant answer equals the memory answer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassageRole {
    /// Index into `conflicting_passages`.
    Conflicting(usize),
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub piece_order: Vec<PassageRole>,
}

impl RegimeSpec {
    pub fn for_regime(regime: Regime) -> Self {
        use PassageRole::*;
        let piece_order = match regime {
            Regime::Conflicting => vec![Conflicting(0)],
            Regime::Irrelevant => vec![Irrelevant],
            Regime::DoubleConflicting => vec![Conflicting(0), Conflicting(1)],
            Regime::Mixed => vec![Irrelevant, Conflicting(0)],
            Regime::DoubleConflictingSwap => vec![Conflicting(1), Conflicting(0)],
            Regime::MixedSwap => vec![Conflicting(0), Irrelevant],
        };
        RegimeSpec { regime, piece_order }
    }

    /// The spec with its pieces in reverse order and the regime tag toggled
    /// between a dual regime and its swap.
    pub fn swapped(&self) -> Self {
        let regime = match self.regime {
            Regime::DoubleConflicting => Regime::DoubleConflictingSwap,
            Regime::DoubleConflictingSwap => Regime::DoubleConflicting,
            Regime::Mixed => Regime::MixedSwap,
            Regime::MixedSwap => Regime::Mixed,
            r => r,
        };
        let mut piece_order = self.piece_order.clone();
        piece_order.reverse();
        RegimeSpec { regime, piece_order }
    }
}

/// Placeholders: `{context1}`, `{context2}`, `{question_text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub dual: String,
    pub single: String,
    pub closed_book: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            dual: "{context1}\n{context2}\nQ: {question_text} A:".into(),
            single: "{context1}\nQ: {question_text} A:".into(),
            closed_book: "Q: {question_text} A:".into(),
        }
    }
}

/// Rendered prompt plus the byte range each placeholder expanded to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub slots: Vec<(String, Range<usize>)>,
}

impl Rendered {
    pub fn slot(&self, name: &str) -> Option<Range<usize>> {
        self.slots.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }
}

pub fn render(template: &str, values: &[(&str, &str)]) -> Result<Rendered> {
    let mut text = String::new();
    let mut slots = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated placeholder in template {template:?}")))?;
        let name = &rest[open + 1..open + close];
        let value = values
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unknown placeholder {{{name}}} in template")))?;
        let start = text.len();
        text.push_str(value);
        slots.push((name.to_string(), start..text.len()));
        rest = &rest[open + close + 1..];
    }
    text.push_str(rest);
    Ok(Rendered { text, slots })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Case-insensitive first word, punctuation stripped.
    #[default]
    FirstWord,
    Exact,
}

impl MatchRule {
    pub fn matches(self, generated: &str, candidate: &str) -> bool {
        match self {
            MatchRule::Exact => !candidate.trim().is_empty() && generated.trim() == candidate.trim(),
            MatchRule::FirstWord => {
                let g = first_word(generated);
                !g.is_empty() && g == first_word(candidate)
            }
        }
    }
}

fn first_word(s: &str) -> String {
    s.split_whitespace()
        .find_map(|w| {
            let stripped: String = w.chars().filter(|c| !c.is_ascii_punctuation()).collect();
            (!stripped.is_empty()).then(|| stripped.to_lowercase())
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    MemoryMismatch,
    LeakyConflict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryCheck {
    Kept { parametric_answer: String },
    Dropped { reason: DropReason, parametric_answer: String },
}

impl MemoryCheck {
    pub fn is_kept(&self) -> bool {
        matches!(self, MemoryCheck::Kept { .. })
    }
}

/// Tokens generated for answer strings during memory check and labelling.
pub const ANSWER_TOKENS: usize = 3;

pub fn generate_text(backend: &dyn ModelBackend, tokenizer: &Tokenizer, prompt: &str) -> Result<(String, u32)> {
    let ids = tokenizer.encode(prompt);
    let out = backend.generate(&ids, ANSWER_TOKENS)?;
    let first = *out
        .first()
        .ok_or_else(|| Error::Model("backend generated no tokens".into()))?;
    Ok((tokenizer.decode(&out), first))
}

pub fn memory_check(
    backend: &dyn ModelBackend,
    tokenizer: &Tokenizer,
    record: &FactRecord,
    template: &PromptTemplate,
    rule: MatchRule,
) -> Result<MemoryCheck> {
    let prompt = render(&template.closed_book, &[("question_text", &record.question_text)])?;
    let (answer, _) = generate_text(backend, tokenizer, &prompt.text)?;
    if !rule.matches(&answer, &record.memory_answer) {
        return Ok(MemoryCheck::Dropped {
            reason: DropReason::MemoryMismatch,
            parametric_answer: answer,
        });
    }
    if record
        .conflicting_passages
        .iter()
        .any(|p| rule.matches(&answer, &p.answer))
    {
        return Ok(MemoryCheck::Dropped {
            reason: DropReason::LeakyConflict,
            parametric_answer: answer,
        });
    }
    Ok(MemoryCheck::Kept {
        parametric_answer: answer,
    })
}

/// Builds a token-aligned instance; `id` should be unique within a run.
pub fn assemble(
    record: &FactRecord,
    spec: &RegimeSpec,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    id: &str,
) -> Result<Instance> {
    let expected = if spec.regime.is_dual() { 2 } else { 1 };
    if spec.piece_order.len() != expected {
        return Err(Error::Invalid(format!(
            "regime {} needs {expected} pieces, spec has {}",
            spec.regime,
            spec.piece_order.len()
        )));
    }
    let pieces: Vec<&Passage> = spec
        .piece_order
        .iter()
        .map(|role| match role {
            PassageRole::Irrelevant => Ok(&record.irrelevant_passage),
            PassageRole::Conflicting(i) => record.conflicting_passages.get(*i).ok_or_else(|| {
                Error::Invalid(format!(
                    "record '{}' has {} conflicting passages, regime {} needs index {i}",
                    record.subject,
                    record.conflicting_passages.len(),
                    spec.regime
                ))
            }),
        })
        .collect::<Result<_>>()?;

    let rendered = if expected == 2 {
        render(
            &template.dual,
            &[
                ("context1", &pieces[0].text),
                ("context2", &pieces[1].text),
                ("question_text", &record.question_text),
            ],
        )?
    } else {
        render(
            &template.single,
            &[("context1", &pieces[0].text), ("question_text", &record.question_text)],
        )?
    };

    let surface = split(&rendered.text);
    let tokens: Vec<Token> = surface
        .iter()
        .enumerate()
        .map(|(position, p)| Token {
            id: tokenizer.id(&p.text).unwrap_or(tokenizer.unk_id()),
            text: p.text.clone(),
            position,
        })
        .collect();

    let kinds = [SegmentKind::Context1, SegmentKind::Context2];
    let mut segments = Vec::new();
    let mut gold_spans = Vec::new();
    let mut cursor = 0;
    for (i, piece) in pieces.iter().enumerate() {
        let slot = rendered
            .slot(if i == 0 { "context1" } else { "context2" })
            .ok_or_else(|| Error::Config("template lacks a context placeholder".into()))?;
        let end = surface.iter().position(|p| p.span.start >= slot.end).unwrap_or(surface.len());
        segments.push(Segment {
            kind: kinds[i],
            start: cursor,
            end,
        });
        let inside: Vec<usize> = (cursor..end)
            .filter(|&t| surface[t].span.start >= slot.start && surface[t].span.end <= slot.end)
            .collect();
        let positions = find_occurrences(&surface, &inside, &piece.answer);
        if positions.is_empty() {
            return Err(Error::Alignment(format!(
                "{id}: answer '{}' not found in {:?}",
                piece.answer, kinds[i]
            )));
        }
        gold_spans.push(GoldSpan {
            segment_kind: kinds[i],
            token_positions: positions,
            answer_text: piece.answer.clone(),
        });
        cursor = end;
    }
    segments.push(Segment {
        kind: SegmentKind::Question,
        start: cursor,
        end: tokens.len(),
    });

    let memory_token = split(&record.memory_answer)
        .first()
        .map(|p| tokenizer.id(&p.text).unwrap_or(tokenizer.unk_id()));
    let instance = Instance {
        id: id.to_string(),
        regime: spec.regime,
        tokens,
        segments,
        gold_spans,
        memory_answer: record.memory_answer.clone(),
        memory_token,
        question_text: record.question_text.clone(),
        generated_answer: None,
        answer_token: None,
        label: None,
    };
    instance.validate()?;
    Ok(instance)
}

/// Positions (sorted) of every token of every occurrence of `answer`'s token
/// sequence among the candidate positions `inside` (which must be ascending
/// and contiguous).
fn find_occurrences(surface: &[crate::microlm::tokenizer::Piece], inside: &[usize], answer: &str) -> Vec<usize> {
    let needle: Vec<String> = split(answer).into_iter().map(|p| p.text).collect();
    if needle.is_empty() || inside.len() < needle.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for w in inside.windows(needle.len()) {
        if w.iter().zip(&needle).all(|(&t, n)| surface[t].text == *n) {
            out.extend_from_slice(w);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Labels an instance from the model's generated continuation.
pub fn classify_behaviour(generated: &str, instance: &Instance, rule: MatchRule) -> BehaviourLabel {
    let gold = |kind| instance.gold_span(kind).map(|g: &GoldSpan| g.answer_text.as_str());
    let hit = |kind| gold(kind).is_some_and(|a| rule.matches(generated, a));
    if instance.is_dual() {
        if hit(SegmentKind::Context1) {
            BehaviourLabel::C1
        } else if hit(SegmentKind::Context2) {
            BehaviourLabel::C2
        } else {
            BehaviourLabel::Other
        }
    } else if hit(SegmentKind::Context1) {
        BehaviourLabel::C
    } else if rule.matches(generated, &instance.memory_answer) {
        BehaviourLabel::M
    } else {
        BehaviourLabel::Other
    }
}

/// Capitalised pseudo-words built from syllables; every combination of
/// `syllables_per_name` syllables is one name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameInventory {
    pub syllables: Vec<String>,
    pub syllables_per_name: usize,
}

impl Default for NameInventory {
    fn default() -> Self {
        let syllables = [
            "ka", "lo", "mi", "ra", "ten", "vo", "su", "dar", "pel", "ni", "ox", "bu", "ze", "qua", "fin", "mor",
        ];
        NameInventory {
            syllables: syllables.iter().map(|s| s.to_string()).collect(),
            syllables_per_name: 3,
        }
    }
}

impl NameInventory {
    pub fn capacity(&self) -> usize {
        self.syllables.len().saturating_pow(self.syllables_per_name as u32)
    }

    fn name(&self, mut index: usize) -> String {
        let b = self.syllables.len();
        let mut s = String::new();
        for _ in 0..self.syllables_per_name {
            s.push_str(&self.syllables[index % b]);
            index /= b;
        }
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_uppercase().chain(c).collect(),
            None => s,
        }
    }
}

/// Names drawn per synthetic record: subject, memory answer, two conflicting
/// answers, an unrelated subject and its answer.
pub const NAMES_PER_RECORD: usize = 6;

const PASSAGE_TEMPLATES: [&str; 3] = [
    "{subject} is a country. Its capital city is {answer}, home to many people.",
    "The capital of {subject} is {answer}, a busy city by the river.",
    "In {subject}, the seat of government is {answer}, which is also the largest city.",
];

pub fn synth_corpus(seed: u64, n_facts: usize, inventory: &NameInventory) -> Result<Vec<FactRecord>> {
    if n_facts == 0 {
        return Err(Error::Invalid("n_facts must be at least 1".into()));
    }
    let needed = n_facts * NAMES_PER_RECORD;
    if inventory.syllables.is_empty() || inventory.capacity() < needed {
        return Err(Error::Capacity(format!(
            "{n_facts} facts need {needed} distinct names, inventory holds {}",
            inventory.capacity()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..inventory.capacity()).collect();
    pool.shuffle(&mut rng);
    let names: Vec<String> = pool[..needed].iter().map(|&i| inventory.name(i)).collect();
    let passage = |rng: &mut ChaCha8Rng, subject: &str, answer: &str| Passage {
        text: PASSAGE_TEMPLATES[rng.gen_range(0..PASSAGE_TEMPLATES.len())]
            .replace("{subject}", subject)
            .replace("{answer}", answer),
        answer: answer.to_string(),
    };
    let records = names
        .chunks(NAMES_PER_RECORD)
        .map(|n| FactRecord {
            question_text: format!("What is the capital of {}?", n[0]),
            subject: n[0].clone(),
            memory_answer: n[1].clone(),
            conflicting_passages: vec![passage(&mut rng, &n[0], &n[2]), passage(&mut rng, &n[0], &n[3])],
            irrelevant_passage: passage(&mut rng, &n[4], &n[5]),
        })
        .collect();
    Ok(records)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Trace {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn newport() -> FactRecord {
        FactRecord {
            question_text: "Newport County A.F.C. is headquartered in".into(),
            subject: "Newport County A.F.C.".into(),
            memory_answer: "Newport".into(),
            conflicting_passages: vec![
                Passage {
                    text: "Newport County A.F.C. is headquartered in Ankara, the club says.".into(),
                    answer: "Ankara".into(),
                },
                Passage {
                    text: "The club Newport County A.F.C. has its offices in Calgary today.".into(),
                    answer: "Calgary".into(),
                },
            ],
            irrelevant_passage: Passage {
                text: "The capital of Chile is Santiago, a large city.".into(),
                answer: "Santiago".into(),
            },
        }
    }

    fn tok(r: &FactRecord) -> Tokenizer {
        let mut texts = vec![r.question_text.clone(), r.memory_answer.clone(), "Q : A".into()];
        texts.extend(r.conflicting_passages.iter().map(|p| p.text.clone()));
        texts.push(r.irrelevant_passage.text.clone());
        Tokenizer::from_corpus(texts.iter().map(String::as_str))
    }

    fn span_text(inst: &Instance, kind: SegmentKind) -> String {
        let g = inst.gold_span(kind).unwrap();
        g.token_positions.iter().map(|&p| inst.tokens[p].text.as_str()).collect::<Vec<_>>().join(" ")
    }

    fn seg_text(inst: &Instance, kind: SegmentKind) -> Vec<String> {
        inst.segment(kind).unwrap().range().map(|p| inst.tokens[p].text.clone()).collect()
    }

    #[test]
    fn conflicting_single_context() {
        let r = newport();
        let t = tok(&r);
        let inst = assemble(&r, &RegimeSpec::for_regime(Regime::Conflicting), &PromptTemplate::default(), &t, "x").unwrap();
        assert_eq!(span_text(&inst, SegmentKind::Context1), "Ankara");
        assert!(inst.segment(SegmentKind::Context2).is_none());
        assert_eq!(inst.tokens.last().unwrap().text, ":");
        assert_eq!(inst.memory_token, t.id("Newport"));
        let q = seg_text(&inst, SegmentKind::Question);
        assert_eq!(q[0], "Q");
    }

    #[test]
    fn mixed_places_irrelevant_first_and_swap_reverses() {
        let r = newport();
        let t = tok(&r);
        let tpl = PromptTemplate::default();
        let spec = RegimeSpec::for_regime(Regime::Mixed);
        let a = assemble(&r, &spec, &tpl, &t, "a").unwrap();
        assert_eq!(span_text(&a, SegmentKind::Context1), "Santiago");
        assert_eq!(span_text(&a, SegmentKind::Context2), "Ankara");
        let swapped = spec.swapped();
        assert_eq!(swapped, RegimeSpec::for_regime(Regime::MixedSwap));
        let b = assemble(&r, &swapped, &tpl, &t, "b").unwrap();
        assert_eq!(span_text(&b, SegmentKind::Context1), "Ankara");
        assert_eq!(span_text(&b, SegmentKind::Context2), "Santiago");
        assert_eq!(seg_text(&a, SegmentKind::Context1), seg_text(&b, SegmentKind::Context2));
        assert_eq!(seg_text(&a, SegmentKind::Context2), seg_text(&b, SegmentKind::Context1));
        assert_eq!(seg_text(&a, SegmentKind::Question), seg_text(&b, SegmentKind::Question));
    }

    #[test]
    fn double_conflicting_swap_exchanges_pieces() {
        let r = newport();
        let t = tok(&r);
        let tpl = PromptTemplate::default();
        let a = assemble(&r, &RegimeSpec::for_regime(Regime::DoubleConflicting), &tpl, &t, "a").unwrap();
        let b = assemble(&r, &RegimeSpec::for_regime(Regime::DoubleConflictingSwap), &tpl, &t, "b").unwrap();
        assert_eq!(span_text(&a, SegmentKind::Context1), "Ankara");
        assert_eq!(span_text(&b, SegmentKind::Context1), "Calgary");
        assert_eq!(seg_text(&a, SegmentKind::Context1), seg_text(&b, SegmentKind::Context2));
    }

    #[test]
    fn missing_answer_is_an_alignment_error() {
        let mut r = newport();
        r.conflicting_passages[0].answer = "Ank".into();
        let t = tok(&r);
        let e = assemble(&r, &RegimeSpec::for_regime(Regime::Conflicting), &PromptTemplate::default(), &t, "x");
        assert!(matches!(e, Err(Error::Alignment(_))));
    }

    #[test]
    fn repeated_answer_marks_every_occurrence() {
        let mut r = newport();
        r.conflicting_passages[0].text = "Ankara is in Ankara.".into();
        let t = tok(&r);
        let inst = assemble(&r, &RegimeSpec::for_regime(Regime::Conflicting), &PromptTemplate::default(), &t, "x").unwrap();
        assert_eq!(inst.gold_span(SegmentKind::Context1).unwrap().token_positions, vec![0, 3]);
    }

    #[test]
    fn multi_token_answer_aligns() {
        let mut r = newport();
        r.conflicting_passages[0] = Passage {
            text: "It moved to New York City last year.".into(),
            answer: "New York City".into(),
        };
        let t = tok(&r);
        let inst = assemble(&r, &RegimeSpec::for_regime(Regime::Conflicting), &PromptTemplate::default(), &t, "x").unwrap();
        assert_eq!(span_text(&inst, SegmentKind::Context1), "New York City");
    }

    #[test]
    fn labels_follow_generated_answer() {
        let r = newport();
        let t = tok(&r);
        let tpl = PromptTemplate::default();
        let rule = MatchRule::FirstWord;
        let single = assemble(&r, &RegimeSpec::for_regime(Regime::Conflicting), &tpl, &t, "s").unwrap();
        assert_eq!(classify_behaviour("Ankara", &single, rule), BehaviourLabel::C);
        assert_eq!(classify_behaviour("newport.", &single, rule), BehaviourLabel::M);
        assert_eq!(classify_behaviour("Paris", &single, rule), BehaviourLabel::Other);
        let dual = assemble(&r, &RegimeSpec::for_regime(Regime::DoubleConflicting), &tpl, &t, "d").unwrap();
        assert_eq!(classify_behaviour("Ankara , the", &dual, rule), BehaviourLabel::C1);
        assert_eq!(classify_behaviour("Calgary", &dual, rule), BehaviourLabel::C2);
        assert_eq!(classify_behaviour("Paris", &dual, rule), BehaviourLabel::Other);
        assert_eq!(classify_behaviour("Newport", &dual, rule), BehaviourLabel::Other);
        assert_eq!(classify_behaviour("ankara", &single, MatchRule::Exact), BehaviourLabel::Other);
    }

    #[test]
    fn match_rule_first_word() {
        let r = MatchRule::FirstWord;
        assert!(r.matches("  Ankara, Turkey", "ankara"));
        assert!(r.matches("\"Ankara\"", "Ankara"));
        assert!(!r.matches("", "Ankara"));
        assert!(!r.matches("Ankar", "Ankara"));
    }

    struct Fixed(Vec<u32>);

    impl ModelBackend for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn pad_id(&self) -> u32 {
            0
        }
        fn shape(&self) -> (usize, usize) {
            (0, 0)
        }
        fn conventions(&self) -> crate::backend::Conventions {
            Default::default()
        }
        fn generate(&self, _ids: &[u32], _max_new: usize) -> Result<Vec<u32>> {
            Ok(self.0.clone())
        }
        fn candidate_logits(&self, _: &Instance, _: &[u32]) -> Result<Vec<f64>> {
            unimplemented!()
        }
        fn ablation_logits(&self, _: &Instance, _: &[u32]) -> Result<Vec<Vec<f64>>> {
            unimplemented!()
        }
        fn integrated_gradients(&self, _: &Instance, _: u32, _: usize) -> Result<Vec<f64>> {
            unimplemented!()
        }
        fn attention_rows(&self, _: &Instance) -> Result<crate::backend::PerHead<Vec<f64>>> {
            unimplemented!()
        }
        fn head_logit_contributions(&self, _: &Instance, _: &[u32]) -> Result<crate::backend::PerHead<Vec<f64>>> {
            unimplemented!()
        }
        fn attn_selection_scores(&self, _: &Instance, _: u32) -> Result<Vec<f64>> {
            unimplemented!()
        }
    }

    #[test]
    fn memory_check_outcomes() {
        let r = newport();
        let t = tok(&r);
        let tpl = PromptTemplate::default();
        let rule = MatchRule::FirstWord;
        let say = |w: &str| Fixed(vec![t.id(w).unwrap()]);
        assert!(memory_check(&say("Newport"), &t, &r, &tpl, rule).unwrap().is_kept());
        let mismatch = memory_check(&say("Calgary"), &t, &r, &tpl, rule).unwrap();
        assert!(matches!(mismatch, MemoryCheck::Dropped { reason: DropReason::MemoryMismatch, .. }));
        let mut leaky = r.clone();
        leaky.conflicting_passages[1] = Passage {
            text: "Its offices are in Newport now.".into(),
            answer: "Newport".into(),
        };
        let t2 = tok(&leaky);
        let say2 = Fixed(vec![t2.id("Newport").unwrap()]);
        let out = memory_check(&say2, &t2, &leaky, &tpl, rule).unwrap();
        assert!(matches!(out, MemoryCheck::Dropped { reason: DropReason::LeakyConflict, .. }));
    }

    #[test]
    fn synth_corpus_is_deterministic_and_distinct() {
        let inv = NameInventory::default();
        let a = synth_corpus(7, 3, &inv).unwrap();
        assert_eq!(a.len(), 3);
        for r in &a {
            r.validate().unwrap();
            for p in r.conflicting_passages.iter().chain([&r.irrelevant_passage]) {
                assert_eq!(p.text.matches(&p.answer).count(), 1);
            }
        }
        let mut answers: Vec<&str> = a
            .iter()
            .flat_map(|r| {
                [r.memory_answer.as_str(), &r.conflicting_passages[0].answer, &r.conflicting_passages[1].answer, &r.irrelevant_passage.answer]
            })
            .collect();
        let n = answers.len();
        answers.sort_unstable();
        answers.dedup();
        assert_eq!(answers.len(), n);

        let mut x = Vec::new();
        let mut y = Vec::new();
        write_jsonl(&a, &mut x).unwrap();
        write_jsonl(&synth_corpus(7, 3, &inv).unwrap(), &mut y).unwrap();
        assert_eq!(x, y);
        assert_ne!(a, synth_corpus(8, 3, &inv).unwrap());
        let back: Vec<FactRecord> = read_jsonl(&x[..]).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn synth_corpus_capacity() {
        let inv = NameInventory {
            syllables: vec!["a".into(), "b".into()],
            syllables_per_name: 2,
        };
        assert!(matches!(synth_corpus(1, 1, &inv), Err(Error::Capacity(_))));
        assert!(synth_corpus(1, 0, &NameInventory::default()).is_err());
    }

    #[test]
    fn every_gold_span_detokenizes_to_its_answer() {
        let inv = NameInventory::default();
        let recs = synth_corpus(3, 20, &inv).unwrap();
        let texts: Vec<String> = recs
            .iter()
            .flat_map(|r| {
                let mut v = vec![r.question_text.clone(), r.irrelevant_passage.text.clone()];
                v.extend(r.conflicting_passages.iter().map(|p| p.text.clone()));
                v
            })
            .collect();
        let t = Tokenizer::from_corpus(texts.iter().map(String::as_str).chain(["Q : A"]));
        for (i, r) in recs.iter().enumerate() {
            for regime in Regime::ALL {
                let inst = assemble(r, &RegimeSpec::for_regime(regime), &PromptTemplate::default(), &t, &i.to_string()).unwrap();
                for g in &inst.gold_spans {
                    let ids: Vec<u32> = g.token_positions.iter().map(|&p| inst.tokens[p].id).collect();
                    assert_eq!(t.decode(&ids), g.answer_text);
                }
            }
        }
    }

    #[test]
    fn record_validation() {
        let mut r = newport();
        r.validate().unwrap();
        r.conflicting_passages[1].answer = "Ankara".into();
        r.conflicting_passages[1].text = "Ankara.".into();
        assert!(r.validate().is_err());
        let mut r = newport();
        r.irrelevant_passage.answer = "Lima".into();
        assert!(r.validate().is_err());
    }
}
