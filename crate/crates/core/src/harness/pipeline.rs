//! Stage functions and the end-to-end driver.
//!
//! Every stage reads and writes artifacts under one run directory so the
//! CLI can run them one at a time; [`run_pipeline`] chains them in memory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BackendSpec, CorpusSpec, DrillSpec, RunConfig};
use crate::backend::{MicroBackend, ModelBackend};
use crate::domain::{AttributionVector, BehaviourLabel, Instance, Method, Regime};
use crate::error::{Error, Result};
use crate::explainers::{explain, ExplainConfig};
use crate::microlm::{blob, train, ModelConfig, Params, TrainExample, TrainReport, Tokenizer};
use crate::regimes::{
    assemble, classify_behaviour, memory_check, read_jsonl, render, synth_corpus, write_jsonl, FactRecord,
    MemoryCheck, PromptTemplate, RegimeSpec, ANSWER_TOKENS,
};
use crate::trace::{read_trace, Strictness, TraceBackend};

pub const CONFIG_FILE: &str = "config.toml";
pub const FACTS_FILE: &str = "facts.jsonl";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const MODEL_FILE: &str = "model.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const MEMORY_FILE: &str = "memory_check.jsonl";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const ATTRIBUTIONS_FILE: &str = "attributions.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

/// A per-item problem inside an otherwise successful stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub item: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<Issue>,
    pub elapsed_ms: u64,
}

/// Instance counts per regime after classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub regime: Regime,
    pub assembled: usize,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
    /// Run-relative path → SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
    pub accounting: Vec<Accounting>,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Manifest {
            config_hash: config.hash()?,
            seed: config.seed,
            config: config.clone(),
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
            accounting: Vec::new(),
        })
    }

    /// Replaces the record of a stage that ran before.
    pub fn record(&mut self, record: StageRecord) {
        self.stages.retain(|s| s.stage != record.stage);
        self.stages.push(record);
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// A run directory and the manifest that describes it.
#[derive(Debug)]
pub struct Run {
    pub root: PathBuf,
    pub config: RunConfig,
    pub manifest: Manifest,
}

impl Run {
    /// Opens `config.output_dir`, keeping an existing manifest only when it
    /// was written for the same config.
    pub fn open(config: &RunConfig) -> Result<Self> {
        let root = config.output_dir.clone();
        fs::create_dir_all(&root)?;
        let hash = config.hash()?;
        let manifest = match fs::read(root.join(MANIFEST_FILE)) {
            Ok(bytes) => match serde_json::from_slice::<Manifest>(&bytes) {
                Ok(m) if m.config_hash == hash => m,
                _ => Manifest::new(config)?,
            },
            Err(_) => Manifest::new(config)?,
        };
        fs::write(root.join(CONFIG_FILE), config.to_toml()?)?;
        let mut run = Run {
            root,
            config: config.clone(),
            manifest,
        };
        run.track(CONFIG_FILE)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records the hash of an artifact that was just written.
    pub fn track(&mut self, name: &str) -> Result<()> {
        let h = sha256_file(&self.path(name))?;
        self.manifest.artifacts.insert(name.to_string(), h);
        Ok(())
    }

    pub fn save_manifest(&self) -> Result<()> {
        let mut out = serde_json::to_vec_pretty(&self.manifest)?;
        out.push(b'\n');
        fs::write(self.path(MANIFEST_FILE), out)?;
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.path(name))?);
        write_jsonl(items, &mut w)?;
        w.flush()?;
        drop(w);
        self.track(name)
    }

    pub fn read_jsonl<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<Vec<T>> {
        let path = self.path(name);
        let f = fs::File::open(&path).map_err(|e| Error::Stage {
            stage: "load".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        read_jsonl(BufReader::new(f))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, item: &T) -> Result<()> {
        let mut out = serde_json::to_vec_pretty(item)?;
        out.push(b'\n');
        fs::write(self.path(name), out)?;
        self.track(name)
    }

    /// Runs `f` as stage `name`, recording its outcome. A failing stage is
    /// saved to the manifest before the error is returned.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Run) -> Result<(T, Vec<Issue>)>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}");
        let out = f(self);
        let elapsed_ms = start.elapsed().as_millis() as u64;
        match out {
            Ok((v, issues)) => {
                for i in issues.iter().take(3) {
                    log::warn!("{name}: {}: {}", i.item, i.message);
                }
                if issues.len() > 3 {
                    log::warn!("{name}: {} more issues in the manifest", issues.len() - 3);
                }
                self.manifest.record(StageRecord {
                    stage: name.into(),
                    status: StageStatus::Ok,
                    message: None,
                    issues,
                    elapsed_ms,
                });
                self.save_manifest()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.record(StageRecord {
                    stage: name.into(),
                    status: StageStatus::Failed,
                    message: Some(e.to_string()),
                    issues: Vec::new(),
                    elapsed_ms,
                });
                self.save_manifest()?;
                Err(match e {
                    Error::Config(_) | Error::Stage { .. } => e,
                    other => Error::Stage {
                        stage: name.into(),
                        message: other.to_string(),
                    },
                })
            }
        }
    }

    pub fn skip(&mut self, name: &str, why: &str) -> Result<()> {
        self.manifest.record(StageRecord {
            stage: name.into(),
            status: StageStatus::Skipped,
            message: Some(why.into()),
            issues: Vec::new(),
            elapsed_ms: 0,
        });
        self.save_manifest()
    }
}

pub fn load_corpus(spec: &CorpusSpec) -> Result<Vec<FactRecord>> {
    let records = match spec {
        CorpusSpec::Synthetic { seed, n_facts, names } => synth_corpus(*seed, *n_facts, names)?,
        CorpusSpec::File { path } => {
            let f = fs::File::open(path)
                .map_err(|e| Error::Config(format!("cannot open corpus {}: {e}", path.display())))?;
            read_jsonl(BufReader::new(f))?
        }
    };
    if records.is_empty() {
        return Err(Error::Invalid("corpus holds no records".into()));
    }
    Ok(records)
}

/// Vocabulary over every text the run can render.
pub fn build_tokenizer(records: &[FactRecord], template: &PromptTemplate) -> Tokenizer {
    let mut texts: Vec<String> = vec![template.dual.clone(), template.single.clone(), template.closed_book.clone()];
    for r in records {
        texts.push(r.question_text.clone());
        texts.push(r.memory_answer.clone());
        for p in r.conflicting_passages.iter().chain([&r.irrelevant_passage]) {
            texts.push(p.text.clone());
            texts.push(p.answer.clone());
        }
    }
    Tokenizer::from_corpus(texts.iter().map(String::as_str))
}

fn first_token(tok: &Tokenizer, s: &str) -> Result<crate::domain::TokenId> {
    tok.encode(s)
        .first()
        .copied()
        .ok_or_else(|| Error::Invalid(format!("answer {s:?} encodes to no tokens")))
}

fn pieces(template: &str, c1: &str, c2: &str, q: &str) -> Result<String> {
    Ok(render(template, &[("context1", c1), ("context2", c2), ("question_text", q)])?.text)
}

/// Closed-book examples for every record plus context-reading drills.
///
/// A drill rewrites one of the record's own passages with an answer drawn
/// from other records, so the evaluation passages themselves are never
/// trained on. Single-passage drills target the passage answer with
/// probability `follow_context` and the memory answer otherwise. Dual drills
/// pair the passage with either a second rewritten passage on the same
/// subject (target drawn uniformly from the two) or a rewritten irrelevant
/// passage (target as in the single case), in random order.
pub fn training_set(
    records: &[FactRecord],
    tok: &Tokenizer,
    template: &PromptTemplate,
    drills: &DrillSpec,
) -> Result<Vec<TrainExample>> {
    let mut pool: Vec<&str> = Vec::new();
    for r in records {
        pool.push(&r.memory_answer);
        pool.extend(r.conflicting_passages.iter().map(|p| p.answer.as_str()));
        pool.push(&r.irrelevant_passage.answer);
    }
    pool.sort_unstable();
    pool.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(drills.seed);
    let mut out = Vec::new();
    for r in records {
        let memory = first_token(tok, &r.memory_answer)?;
        let cb = pieces(&template.closed_book, "", "", &r.question_text)?;
        for _ in 0..drills.closed_book_repeats.max(1) {
            out.push(TrainExample {
                ids: tok.encode(&cb),
                target: memory,
                closed_book: true,
            });
        }
        if r.conflicting_passages.is_empty() || drills.per_fact == 0 {
            continue;
        }
        let own: Vec<&str> = std::iter::once(r.memory_answer.as_str())
            .chain(r.conflicting_passages.iter().map(|p| p.answer.as_str()))
            .chain([r.irrelevant_passage.answer.as_str()])
            .collect();
        let candidates: Vec<&str> = pool.iter().copied().filter(|a| !own.contains(a)).collect();
        if candidates.len() < 2 {
            continue;
        }
        for j in 0..drills.per_fact {
            let picked: Vec<&str> = candidates.choose_multiple(&mut rng, 2).copied().collect();
            let (x, y) = (picked[0], picked[1]);
            let base = &r.conflicting_passages[j % r.conflicting_passages.len()];
            let px = base.text.replace(&base.answer, x);
            let follow = rng.gen_bool(drills.follow_context);
            let (prompt, target) = if rng.gen_bool(drills.dual_fraction) {
                let (other, other_answer, same_subject) = if rng.gen_bool(0.5) {
                    let b2 = &r.conflicting_passages[(j + 1) % r.conflicting_passages.len()];
                    (b2.text.replace(&b2.answer, y), y, true)
                } else {
                    let irr = &r.irrelevant_passage;
                    (irr.text.replace(&irr.answer, y), y, false)
                };
                let x_first = rng.gen_bool(0.5);
                let (c1, c2) = if x_first { (&px, &other) } else { (&other, &px) };
                let target = match (same_subject, rng.gen_bool(0.5), follow) {
                    (true, true, _) => x,
                    (true, false, _) => other_answer,
                    (false, _, true) => x,
                    (false, _, false) => r.memory_answer.as_str(),
                };
                (pieces(&template.dual, c1, c2, &r.question_text)?, target)
            } else {
                let target = if follow { x } else { r.memory_answer.as_str() };
                (pieces(&template.single, &px, "", &r.question_text)?, target)
            };
            out.push(TrainExample {
                ids: tok.encode(&prompt),
                target: first_token(tok, target)?,
                closed_book: false,
            });
        }
    }
    Ok(out)
}

/// Longest prompt any regime can render, plus room for the generated
/// answer.
pub fn max_positions(records: &[FactRecord], tok: &Tokenizer, template: &PromptTemplate) -> Result<usize> {
    let mut longest = 0;
    for r in records {
        let mut lens: Vec<&str> = r
            .conflicting_passages
            .iter()
            .chain([&r.irrelevant_passage])
            .map(|p| p.text.as_str())
            .collect();
        lens.sort_by_key(|t| std::cmp::Reverse(tok.encode(t).len()));
        let c1 = lens.first().copied().unwrap_or("");
        let c2 = lens.get(1).copied().unwrap_or("");
        longest = longest.max(tok.encode(&pieces(&template.dual, c1, c2, &r.question_text)?).len());
    }
    Ok(longest + ANSWER_TOKENS + 1)
}

pub fn model_config(cfg: &RunConfig, vocab_size: usize, max_positions: usize) -> ModelConfig {
    ModelConfig {
        n_layers: cfg.model.n_layers,
        n_heads: cfg.model.n_heads,
        d_model: cfg.model.d_model,
        vocab_size,
        max_positions,
        mlp: cfg.model.mlp,
        layernorm: cfg.model.layernorm,
        mlp_hidden: cfg.model.mlp_hidden,
        seed: cfg.model.seed,
    }
}

pub fn train_model(cfg: &RunConfig, records: &[FactRecord], tok: &Tokenizer) -> Result<(Params, TrainReport)> {
    let examples = training_set(records, tok, &cfg.template, &cfg.drills)?;
    let mc = model_config(cfg, tok.len(), max_positions(records, tok, &cfg.template)?);
    let mut params = Params::init(&mc, cfg.model.init_scale)?;
    if cfg.model.tied_init {
        params.unembed = params.tok_emb.clone();
    }
    log::info!(
        "training on {} examples ({} closed-book), {} parameters",
        examples.len(),
        examples.iter().filter(|e| e.closed_book).count(),
        params.n_params()
    );
    train(params, &examples, &cfg.train)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub record: usize,
    pub subject: String,
    pub result: MemoryCheck,
}

pub fn run_memory_check(
    backend: &dyn ModelBackend,
    tok: &Tokenizer,
    records: &[FactRecord],
    cfg: &RunConfig,
) -> Result<Vec<MemoryRow>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(MemoryRow {
                record: i,
                subject: r.subject.clone(),
                result: memory_check(backend, tok, r, &cfg.template, cfg.match_rule)?,
            })
        })
        .collect()
}

pub fn instance_id(regime: Regime, record: usize) -> String {
    format!("{}-{record:05}", regime.name())
}

/// Assembles every configured regime from the kept records, in record
/// order, up to the per-regime cap.
pub fn assemble_all(
    records: &[FactRecord],
    memory: &[MemoryRow],
    tok: &Tokenizer,
    cfg: &RunConfig,
) -> (Vec<Instance>, Vec<Issue>) {
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for &regime in &cfg.regimes {
        let spec = RegimeSpec::for_regime(regime);
        let mut n = 0;
        for row in memory.iter().filter(|m| m.result.is_kept()) {
            if n == cfg.instance_cap {
                break;
            }
            let id = instance_id(regime, row.record);
            match assemble(&records[row.record], &spec, &cfg.template, tok, &id) {
                Ok(inst) => {
                    out.push(inst);
                    n += 1;
                }
                Err(e) => issues.push(Issue {
                    item: id,
                    message: e.to_string(),
                }),
            }
        }
    }
    (out, issues)
}

/// Generates for each instance and sets `generated_answer`, `answer_token`
/// and `label`.
pub fn classify_all(
    backend: &dyn ModelBackend,
    tok: &Tokenizer,
    instances: &mut [Instance],
    cfg: &RunConfig,
) -> Result<()> {
    instances.par_iter_mut().try_for_each(|inst| {
        let out = backend.generate(&inst.token_ids(), ANSWER_TOKENS)?;
        let first = *out
            .first()
            .ok_or_else(|| Error::Model(format!("{}: backend generated no tokens", inst.id)))?;
        let text = tok.decode(&out);
        inst.label = Some(classify_behaviour(&text, inst, cfg.match_rule));
        inst.generated_answer = Some(text);
        inst.answer_token = Some(first);
        Ok(())
    })
}

/// Labels instances from the generated answers a trace carries. Instances
/// without a record lose their label unless it was Other.
pub fn classify_from_trace(backend: &TraceBackend, instances: &mut [Instance], cfg: &RunConfig) -> Vec<Issue> {
    let mut issues = Vec::new();
    for inst in instances.iter_mut() {
        match backend.record(&inst.id) {
            Some(r) => {
                inst.label = Some(classify_behaviour(&r.generated_answer, inst, cfg.match_rule));
                inst.generated_answer = Some(r.generated_answer.clone());
                inst.answer_token = Some(r.answer_token);
            }
            // Other instances are not exported; their label stands.
            None if inst.label == Some(BehaviourLabel::Other) => {}
            None => {
                inst.label = None;
                issues.push(Issue {
                    item: inst.id.clone(),
                    message: "no trace record".into(),
                })
            }
        }
    }
    issues
}

pub fn accounting(instances: &[Instance], regimes: &[Regime]) -> Vec<Accounting> {
    regimes
        .iter()
        .map(|&regime| {
            let mut a = Accounting {
                regime,
                assembled: 0,
                labels: BTreeMap::new(),
            };
            for inst in instances.iter().filter(|i| i.regime == regime) {
                a.assembled += 1;
                let label = inst.label.map(|l| l.name()).unwrap_or("unlabelled");
                *a.labels.entry(label.to_string()).or_default() += 1;
            }
            a
        })
        .collect()
}

/// Explains every labelled, non-Other instance with every configured
/// method. Results come back in instance order, then method order.
pub fn explain_all(
    backend: &dyn ModelBackend,
    instances: &[Instance],
    methods: &[Method],
    cfg: &ExplainConfig,
) -> (Vec<AttributionVector>, Vec<Issue>) {
    let results: Vec<Vec<(String, Result<AttributionVector>)>> = instances
        .par_iter()
        .filter(|i| matches!(i.label, Some(l) if l != BehaviourLabel::Other))
        .map(|inst| {
            methods
                .iter()
                .map(|&m| (format!("{}/{}", inst.id, m), explain(backend, inst, m, cfg)))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (item, r) in results.into_iter().flatten() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => issues.push(Issue {
                item,
                message: e.to_string(),
            }),
        }
    }
    (out, issues)
}

/// The backend a run explains with, plus the tokenizer when it is live.
pub enum LoadedBackend {
    Micro(MicroBackend),
    Trace(TraceBackend),
}

impl LoadedBackend {
    pub fn as_dyn(&self) -> &dyn ModelBackend {
        match self {
            LoadedBackend::Micro(b) => b,
            LoadedBackend::Trace(b) => b,
        }
    }
}

pub fn load_micro(run: &Run, cfg: &RunConfig) -> Result<MicroBackend> {
    let (params_path, tok_path) = match &cfg.backend {
        BackendSpec::Micro {
            params: Some(p),
            tokenizer: Some(t),
        } => (p.clone(), t.clone()),
        _ => (run.path(MODEL_FILE), run.path(TOKENIZER_FILE)),
    };
    let missing = |p: &Path, e: std::io::Error| Error::Stage {
        stage: "load".into(),
        message: format!("{}: {e}", p.display()),
    };
    let params = blob::decode(&fs::read(&params_path).map_err(|e| missing(&params_path, e))?)?;
    let tok = Tokenizer::from_json(&fs::read_to_string(&tok_path).map_err(|e| missing(&tok_path, e))?)?;
    if tok.len() != params.config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} entries, model vocabulary is {}",
            tok.len(),
            params.config.vocab_size
        )));
    }
    Ok(MicroBackend::new(params).with_tokenizer(tok).with_conventions(cfg.conventions))
}

pub fn load_trace_backend(path: &Path) -> Result<TraceBackend> {
    let f = fs::File::open(path).map_err(|e| Error::Config(format!("cannot open trace {}: {e}", path.display())))?;
    TraceBackend::new(read_trace(BufReader::new(f), Strictness::Lenient)?)
}

/// Outcome of a whole pipeline run.
#[derive(Debug)]
pub struct RunSummary {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub metrics: Vec<crate::metrics::MetricReport>,
}

pub fn stage_corpus(run: &mut Run) -> Result<Vec<FactRecord>> {
    let spec = run.config.corpus.clone();
    run.stage("corpus", |run| {
        let records = load_corpus(&spec)?;
        let mut issues = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if let Err(e) = r.validate() {
                issues.push(Issue {
                    item: format!("record {i}"),
                    message: e.to_string(),
                });
            }
        }
        if !issues.is_empty() {
            return Err(Error::Invalid(format!("{} invalid fact records: {}", issues.len(), issues[0].message)));
        }
        run.write_jsonl(FACTS_FILE, &records)?;
        Ok((records, Vec::new()))
    })
}

pub fn stage_train(run: &mut Run, records: &[FactRecord]) -> Result<MicroBackend> {
    if let BackendSpec::Micro {
        params: Some(_),
        tokenizer: Some(_),
    } = &run.config.backend
    {
        let b = load_micro(run, &run.config)?;
        run.skip("train", "parameters loaded from config paths")?;
        return Ok(b);
    }
    let cfg = run.config.clone();
    run.stage("train", |run| {
        let tok = build_tokenizer(records, &cfg.template);
        fs::write(run.path(TOKENIZER_FILE), tok.to_json()?)?;
        run.track(TOKENIZER_FILE)?;
        let (params, report) = train_model(&cfg, records, &tok)?;
        log::info!(
            "trained {} epochs, loss {:.4}, closed-book accuracy {:.3}",
            report.epochs_run,
            report.final_loss,
            report.closed_book_accuracy
        );
        fs::write(run.path(MODEL_FILE), blob::encode(&params))?;
        run.track(MODEL_FILE)?;
        run.write_json(TRAIN_REPORT_FILE, &report)?;
        Ok((
            MicroBackend::new(params).with_tokenizer(tok).with_conventions(cfg.conventions),
            Vec::new(),
        ))
    })
}

/// Memory check, assembly and classification.
pub fn stage_build(run: &mut Run, backend: &MicroBackend, records: &[FactRecord]) -> Result<Vec<Instance>> {
    let cfg = run.config.clone();
    let tok = backend
        .tokenizer
        .clone()
        .ok_or_else(|| Error::Invalid("live backend has no tokenizer".into()))?;
    let memory = run.stage("memory_check", |run| {
        let rows = run_memory_check(backend, &tok, records, &cfg)?;
        let kept = rows.iter().filter(|r| r.result.is_kept()).count();
        log::info!("memory check kept {kept} of {} records", rows.len());
        run.write_jsonl(MEMORY_FILE, &rows)?;
        Ok((rows, Vec::new()))
    })?;
    let mut instances = run.stage("assemble", |_| Ok(assemble_all(records, &memory, &tok, &cfg)))?;
    run.stage("classify", |run| {
        classify_all(backend, &tok, &mut instances, &cfg)?;
        run.manifest.accounting = accounting(&instances, &cfg.regimes);
        run.write_jsonl(INSTANCES_FILE, &instances)?;
        Ok(((), Vec::new()))
    })?;
    Ok(instances)
}

pub fn stage_explain(run: &mut Run, backend: &dyn ModelBackend, instances: &[Instance]) -> Result<Vec<AttributionVector>> {
    let cfg = run.config.clone();
    run.stage("explain", |run| {
        let ecfg = ExplainConfig { ig_steps: cfg.ig_steps };
        let (phis, issues) = explain_all(backend, instances, &cfg.explainers, &ecfg);
        run.write_jsonl(ATTRIBUTIONS_FILE, &phis)?;
        Ok((phis, issues))
    })
}

pub fn stage_evaluate(
    run: &mut Run,
    backend: &dyn ModelBackend,
    instances: &[Instance],
    phis: &[AttributionVector],
) -> Result<Vec<crate::metrics::MetricReport>> {
    let cfg = run.config.clone();
    run.stage("evaluate", |run| {
        let hash = run.manifest.config_hash.clone();
        let (reports, issues) = super::evaluate::evaluate(backend, instances, phis, &cfg)?;
        super::report::write_metrics_csv(&run.path(METRICS_CSV), &reports, &hash)?;
        run.track(METRICS_CSV)?;
        run.write_json(METRICS_JSON, &reports)?;
        Ok((reports, issues))
    })
}

pub fn stage_report(run: &mut Run, reports: &[crate::metrics::MetricReport]) -> Result<()> {
    let ks = run.config.ks.clone();
    run.stage("report", |run| {
        let written = super::report::write_plots(&run.root, reports, &ks)?;
        for name in &written {
            run.track(name)?;
        }
        Ok(((), Vec::new()))
    })
}

/// Loads the labelled instances a trace-backed run explains.
pub fn trace_instances(run: &mut Run, backend: &TraceBackend, path: &Path) -> Result<Vec<Instance>> {
    let cfg = run.config.clone();
    let path = path.to_path_buf();
    run.stage("classify", |run| {
        let f = fs::File::open(&path)
            .map_err(|e| Error::Config(format!("cannot open instances {}: {e}", path.display())))?;
        let mut instances: Vec<Instance> = read_jsonl(BufReader::new(f))?;
        instances.retain(|i| cfg.regimes.contains(&i.regime));
        let issues = classify_from_trace(backend, &mut instances, &cfg);
        instances.retain(|i| i.label.is_some());
        run.manifest.accounting = accounting(&instances, &cfg.regimes);
        run.write_jsonl(INSTANCES_FILE, &instances)?;
        Ok((instances, issues))
    })
}

/// Runs every stage in order and writes the complete run directory.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        let mut run = Run::open(config)?;
        let (backend, instances) = match config.backend.clone() {
            BackendSpec::Micro { .. } => {
                let records = stage_corpus(&mut run)?;
                let backend = stage_train(&mut run, &records)?;
                let instances = stage_build(&mut run, &backend, &records)?;
                (LoadedBackend::Micro(backend), instances)
            }
            BackendSpec::Trace { path, instances } => {
                for s in ["corpus", "train", "memory_check", "assemble"] {
                    run.skip(s, "trace backend")?;
                }
                let backend = run.stage("load_trace", |_| Ok((load_trace_backend(&path)?, Vec::new())))?;
                let inst = trace_instances(&mut run, &backend, &instances)?;
                (LoadedBackend::Trace(backend), inst)
            }
        };
        let phis = stage_explain(&mut run, backend.as_dyn(), &instances)?;
        let metrics = stage_evaluate(&mut run, backend.as_dyn(), &instances, &phis)?;
        stage_report(&mut run, &metrics)?;
        Ok(RunSummary {
            root: run.root.clone(),
            manifest: run.manifest.clone(),
            metrics,
        })
    })
}

/// Rough forward-pass count for the explain and evaluate stages.
pub fn plan_estimate(cfg: &RunConfig, instances_per_regime: usize, mean_len: usize) -> String {
    let per_instance: usize = cfg
        .explainers
        .iter()
        .map(|m| match m {
            Method::FA => mean_len + 1,
            Method::IG => 2 * cfg.ig_steps,
            Method::ATTN | Method::MechLight => 1,
        })
        .sum::<usize>()
        + cfg.explainers.len() * (1 + 2 * 5);
    let n = instances_per_regime * cfg.regimes.len();
    format!(
        "plan: {} regimes x {instances_per_regime} instances x {} explainers ≈ {} forward passes",
        cfg.regimes.len(),
        cfg.explainers.len(),
        n * per_instance
    )
}
