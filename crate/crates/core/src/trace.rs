//! Backend-independent trace format and the [`TraceBackend`] that serves
//! explainers from it.
//!
//! A trace file is JSON lines, one [`TraceRecord`] per line. Fields, in
//! serialization order:
//!
//! | field | type | meaning |
//! |---|---|---|
//! | `schema_version` | string | always `"1"` |
//! | `instance_id` | string | matches the instance file |
//! | `token_ids` | `[u32; n]` | input ids |
//! | `token_strings` | `[string; n]` | surface tokens |
//! | `segments` | `[{kind, start, end}]` | half-open token ranges |
//! | `pad_id` | u32 | pad token used for FA/IG baselines |
//! | `generated_answer` | string | greedy continuation |
//! | `answer_token` | u32 | first generated token (the explained target) |
//! | `candidates` | `[u32]` | contrast candidates, followed by `answer_token` if it is not one of them |
//! | `candidate_logits` | `[f32; c]` | gen-position logits of `candidates` |
//! | `fa_ablation_logits` | `[[f32; c]; n]` or absent | logits with position `i` replaced by pad |
//! | `ig_steps` | u64 or absent | Riemann steps used for `ig_scores` |
//! | `ig_scores` | `[f32; n]` or absent | unnormalised IG for `answer_token` |
//! | `attn_rows` | `[[[f32; n]; H]; L]` | gen-position attention row per head |
//! | `head_logit_contributions` | `[[[f32; c]; H]; L]` | per-head logit contribution per candidate |
//! | `attn_head_selection_scores` | `[f32; H]` | last-layer head selection scores for `answer_token` |
//! | `conventions` | object | `layernorm` (`raw`/`folded`), `attn_selection` (`head_contribution`/`hidden_slice`), `precision` |
//!
//! Logits and contributions are in natural-log units. Floats are written as
//! the shortest decimal that round-trips through `f32`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backend::{AttnSelection, Conventions, LayernormConvention, MicroBackend, ModelBackend, PerHead};
use crate::domain::{Instance, Segment, SegmentKind, TokenId};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceConventions {
    pub layernorm: LayernormConvention,
    pub attn_selection: AttnSelection,
    pub precision: String,
}

impl From<Conventions> for TraceConventions {
    fn from(c: Conventions) -> Self {
        TraceConventions {
            layernorm: c.layernorm,
            attn_selection: c.attn_selection,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: String,
    pub instance_id: String,
    pub token_ids: Vec<TokenId>,
    pub token_strings: Vec<String>,
    pub segments: Vec<Segment>,
    pub pad_id: TokenId,
    pub generated_answer: String,
    pub answer_token: TokenId,
    pub candidates: Vec<TokenId>,
    pub candidate_logits: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fa_ablation_logits: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ig_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ig_scores: Option<Vec<f32>>,
    pub attn_rows: Vec<Vec<Vec<f32>>>,
    pub head_logit_contributions: Vec<Vec<Vec<f32>>>,
    pub attn_head_selection_scores: Vec<f32>,
    pub conventions: TraceConventions,
}

impl TraceRecord {
    pub fn n_layers(&self) -> usize {
        self.attn_rows.len()
    }

    pub fn n_heads(&self) -> usize {
        self.attn_rows.first().map_or(0, Vec::len)
    }

    fn candidate_index(&self, token: TokenId) -> Result<usize> {
        self.candidates.iter().position(|&c| c == token).ok_or(Error::Capability {
            method: "trace",
            capability: "logits for a token outside the recorded candidates",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    #[default]
    Strict,
    Lenient,
}

impl Strictness {
    pub fn row_sum_tolerance(self) -> f64 {
        match self {
            Strictness::Strict => 1e-4,
            Strictness::Lenient => 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based line (record index + 1).
    pub line: usize,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceReport {
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl TraceReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_record(r: &TraceRecord, line: usize, strictness: Strictness, out: &mut Vec<Violation>) {
    let mut bad = |field: &str, message: String| {
        out.push(Violation {
            line,
            field: field.to_string(),
            message,
        })
    };
    let n = r.token_ids.len();
    let c = r.candidates.len();
    if r.schema_version != SCHEMA_VERSION {
        bad("schema_version", format!("expected {SCHEMA_VERSION:?}, found {:?}", r.schema_version));
    }
    if r.token_strings.len() != n {
        bad("token_strings", format!("{} strings for {n} tokens", r.token_strings.len()));
    }
    let mut cursor = 0;
    for s in &r.segments {
        if s.start != cursor || s.end < s.start {
            bad("segments", "segments must be contiguous and ordered".into());
            break;
        }
        cursor = s.end;
    }
    if cursor != n {
        bad("segments", format!("segments cover {cursor} of {n} tokens"));
    }
    if !r.candidates.contains(&r.answer_token) {
        bad("candidates", format!("answer token {} missing from candidates", r.answer_token));
    }
    if r.candidate_logits.len() != c {
        bad("candidate_logits", format!("{} logits for {c} candidates", r.candidate_logits.len()));
    }
    if r.candidate_logits.iter().any(|v| !v.is_finite()) {
        bad("candidate_logits", "non-finite value".into());
    }
    if let Some(fa) = &r.fa_ablation_logits {
        if fa.len() != n {
            bad("fa_ablation_logits", format!("{} entries for {n} positions", fa.len()));
        }
        if let Some(i) = fa.iter().position(|row| row.len() != c || row.iter().any(|v| !v.is_finite())) {
            bad("fa_ablation_logits", format!("position {i}: expected {c} finite logits"));
        }
    }
    match (&r.ig_scores, r.ig_steps) {
        (Some(ig), steps) => {
            if ig.len() != n {
                bad("ig_scores", format!("{} scores for {n} tokens", ig.len()));
            }
            if ig.iter().any(|v| !v.is_finite()) {
                bad("ig_scores", "non-finite value".into());
            }
            if steps.unwrap_or(0) == 0 {
                bad("ig_steps", "ig_scores present without a positive step count".into());
            }
        }
        (None, Some(_)) => bad("ig_steps", "step count given without ig_scores".into()),
        (None, None) => {}
    }
    let heads = r.n_heads();
    let tol = strictness.row_sum_tolerance();
    for (l, layer) in r.attn_rows.iter().enumerate() {
        if layer.len() != heads {
            bad("attn_rows", format!("layer {l} has {} heads, expected {heads}", layer.len()));
        }
        for (h, row) in layer.iter().enumerate() {
            if row.len() != n {
                bad("attn_rows", format!("head ({l},{h}) row has {} entries for {n} tokens", row.len()));
                continue;
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                bad("attn_rows", format!("head ({l},{h}) row has negative or non-finite weights"));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > tol {
                bad("attn_rows", format!("head ({l},{h}) row sums to {sum}"));
            }
        }
    }
    let hc = &r.head_logit_contributions;
    if hc.len() != r.n_layers()
        || hc
            .iter()
            .any(|layer| layer.len() != heads || layer.iter().any(|v| v.len() != c || v.iter().any(|x| !x.is_finite())))
    {
        bad(
            "head_logit_contributions",
            format!("expected {} layers × {heads} heads × {c} finite values", r.n_layers()),
        );
    }
    if r.attn_head_selection_scores.len() != heads || r.attn_head_selection_scores.iter().any(|v| !v.is_finite()) {
        bad(
            "attn_head_selection_scores",
            format!("expected {heads} finite values, found {}", r.attn_head_selection_scores.len()),
        );
    }
}

pub fn validate_trace(records: &[TraceRecord], strictness: Strictness) -> TraceReport {
    let mut violations = Vec::new();
    for (i, r) in records.iter().enumerate() {
        check_record(r, i + 1, strictness, &mut violations);
    }
    let shape = records.first().map(|r| (r.n_layers(), r.n_heads()));
    for (i, r) in records.iter().enumerate() {
        if Some((r.n_layers(), r.n_heads())) != shape {
            violations.push(Violation {
                line: i + 1,
                field: "attn_rows".into(),
                message: "model shape differs from the first record".into(),
            });
        }
    }
    TraceReport {
        records: records.len(),
        violations,
    }
}

fn first_violation(report: &TraceReport) -> Result<()> {
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(Error::Trace {
            line: v.line,
            message: format!("{}: {}", v.field, v.message),
        }),
    }
}

/// Refuses to write records that fail validation at `strictness`.
pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W, strictness: Strictness) -> Result<()> {
    first_violation(&validate_trace(records, strictness))?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses without validating; schema mismatches and malformed lines are
/// reported with their line number.
pub fn parse_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Trace { line: i + 1, message };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_str()) {
            Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(err(format!("schema_version {v:?} is not supported (expected {SCHEMA_VERSION:?})"))),
            None => return Err(err("missing schema_version".into())),
        }
        out.push(serde_json::from_value(value).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn read_trace<R: BufRead>(input: R, strictness: Strictness) -> Result<Vec<TraceRecord>> {
    let records = parse_trace(input)?;
    first_violation(&validate_trace(&records, strictness))?;
    Ok(records)
}

/// Which optional primitives an export includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Primitives {
    pub fa_ablation_logits: bool,
    /// IG step count, or `None` to skip IG.
    pub ig_steps: Option<usize>,
}

impl Default for Primitives {
    fn default() -> Self {
        Primitives {
            fa_ablation_logits: true,
            ig_steps: Some(crate::explainers::DEFAULT_IG_STEPS),
        }
    }
}

/// Candidates carried for an instance: the contrast pair in order, then the
/// answer token if it is neither.
pub fn trace_candidates(instance: &Instance) -> Result<Vec<TokenId>> {
    let answer = instance
        .answer_token
        .ok_or_else(|| Error::Invalid(format!("{}: answer token not set", instance.id)))?;
    let mut c = vec![instance
        .candidate_token(SegmentKind::Context1)
        .ok_or_else(|| Error::Invalid(format!("{}: no context answer", instance.id)))?];
    let second = if instance.is_dual() {
        instance.candidate_token(SegmentKind::Context2)
    } else {
        instance.memory_token
    };
    c.extend(second);
    if !c.contains(&answer) {
        c.push(answer);
    }
    Ok(c)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f32_2(v: &[Vec<f64>]) -> Vec<Vec<f32>> {
    v.iter().map(|r| to_f32(r)).collect()
}

/// Exports every primitive the explainers read for one instance.
pub fn export_record(backend: &MicroBackend, instance: &Instance, primitives: Primitives) -> Result<TraceRecord> {
    let answer = instance
        .answer_token
        .ok_or_else(|| Error::Invalid(format!("{}: answer token not set", instance.id)))?;
    let candidates = trace_candidates(instance)?;
    let fa = if primitives.fa_ablation_logits {
        Some(to_f32_2(&backend.ablation_logits(instance, &candidates)?))
    } else {
        None
    };
    let ig = match primitives.ig_steps {
        Some(m) => Some(to_f32(&backend.integrated_gradients(instance, answer, m)?)),
        None => None,
    };
    let record = TraceRecord {
        schema_version: SCHEMA_VERSION.into(),
        instance_id: instance.id.clone(),
        token_ids: instance.token_ids(),
        token_strings: instance.tokens.iter().map(|t| t.text.clone()).collect(),
        segments: instance.segments.clone(),
        pad_id: backend.pad_id(),
        generated_answer: instance.generated_answer.clone().unwrap_or_default(),
        answer_token: answer,
        candidate_logits: to_f32(&backend.candidate_logits(instance, &candidates)?),
        candidates,
        fa_ablation_logits: fa,
        ig_steps: ig.as_ref().and(primitives.ig_steps),
        ig_scores: ig,
        attn_rows: backend.attention_rows(instance)?.iter().map(|l| to_f32_2(l)).collect(),
        head_logit_contributions: backend
            .head_logit_contributions(instance, &trace_candidates(instance)?)?
            .iter()
            .map(|l| to_f32_2(l))
            .collect(),
        attn_head_selection_scores: to_f32(&backend.attn_selection_scores(instance, answer)?),
        conventions: backend.conventions().into(),
    };
    Ok(record)
}

/// Serves explainers from recorded primitives, keyed by instance id.
#[derive(Debug, Clone)]
pub struct TraceBackend {
    records: HashMap<String, TraceRecord>,
    shape: (usize, usize),
    pad_id: TokenId,
    conventions: Conventions,
}

impl TraceBackend {
    pub fn new(records: Vec<TraceRecord>) -> Result<Self> {
        let report = validate_trace(&records, Strictness::Lenient);
        first_violation(&report)?;
        let first = records
            .first()
            .ok_or_else(|| Error::Invalid("trace holds no records".into()))?;
        let shape = (first.n_layers(), first.n_heads());
        let pad_id = first.pad_id;
        let conventions = Conventions {
            layernorm: first.conventions.layernorm,
            attn_selection: first.conventions.attn_selection,
        };
        let mut map = HashMap::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            if map.contains_key(&r.instance_id) {
                return Err(Error::Trace {
                    line: i + 1,
                    message: format!("duplicate instance id {}", r.instance_id),
                });
            }
            map.insert(r.instance_id.clone(), r);
        }
        Ok(TraceBackend {
            records: map,
            shape,
            pad_id,
            conventions,
        })
    }

    pub fn record(&self, id: &str) -> Option<&TraceRecord> {
        self.records.get(id)
    }

    fn lookup(&self, instance: &Instance) -> Result<&TraceRecord> {
        let r = self
            .records
            .get(&instance.id)
            .ok_or_else(|| Error::Alignment(format!("instance {} has no trace record", instance.id)))?;
        if r.token_ids != instance.token_ids() {
            return Err(Error::Alignment(format!(
                "instance {} tokens differ from its trace record",
                instance.id
            )));
        }
        Ok(r)
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl ModelBackend for TraceBackend {
    fn name(&self) -> String {
        format!("trace(L={},H={})", self.shape.0, self.shape.1)
    }

    fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn conventions(&self) -> Conventions {
        self.conventions
    }

    fn candidate_logits(&self, instance: &Instance, candidates: &[TokenId]) -> Result<Vec<f64>> {
        let r = self.lookup(instance)?;
        candidates
            .iter()
            .map(|&c| Ok(r.candidate_logits[r.candidate_index(c)?] as f64))
            .collect()
    }

    fn ablation_logits(&self, instance: &Instance, candidates: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let r = self.lookup(instance)?;
        let fa = r.fa_ablation_logits.as_ref().ok_or(Error::Capability {
            method: "FA",
            capability: "fa_ablation_logits",
        })?;
        let idx: Vec<usize> = candidates.iter().map(|&c| r.candidate_index(c)).collect::<Result<_>>()?;
        Ok(fa.iter().map(|row| idx.iter().map(|&i| row[i] as f64).collect()).collect())
    }

    fn integrated_gradients(&self, instance: &Instance, target: TokenId, steps: usize) -> Result<Vec<f64>> {
        let r = self.lookup(instance)?;
        let ig = r.ig_scores.as_ref().ok_or(Error::Capability {
            method: "IG",
            capability: "ig_scores",
        })?;
        if target != r.answer_token {
            return Err(Error::Capability {
                method: "IG",
                capability: "ig_scores for a token other than the answer",
            });
        }
        if r.ig_steps != Some(steps) {
            return Err(Error::Invalid(format!(
                "{}: trace IG used {:?} steps, {steps} requested",
                instance.id, r.ig_steps
            )));
        }
        Ok(widen(ig))
    }

    fn attention_rows(&self, instance: &Instance) -> Result<PerHead<Vec<f64>>> {
        let r = self.lookup(instance)?;
        Ok(r
            .attn_rows
            .iter()
            .map(|layer| layer.iter().map(|row| widen(row)).collect())
            .collect())
    }

    fn head_logit_contributions(&self, instance: &Instance, candidates: &[TokenId]) -> Result<PerHead<Vec<f64>>> {
        let r = self.lookup(instance)?;
        let idx: Vec<usize> = candidates.iter().map(|&c| r.candidate_index(c)).collect::<Result<_>>()?;
        Ok(r
            .head_logit_contributions
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|v| idx.iter().map(|&i| v[i] as f64).collect())
                    .collect()
            })
            .collect())
    }

    fn attn_selection_scores(&self, instance: &Instance, target: TokenId) -> Result<Vec<f64>> {
        let r = self.lookup(instance)?;
        if target != r.answer_token {
            return Err(Error::Capability {
                method: "ATTN",
                capability: "selection scores for a token other than the answer",
            });
        }
        Ok(widen(&r.attn_head_selection_scores))
    }
}
