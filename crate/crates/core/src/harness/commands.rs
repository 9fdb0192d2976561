//! Single-stage entry points behind the CLI. Each one opens the run
//! directory named by the config and reads what earlier stages left there.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use super::config::{BackendSpec, CorpusSpec, RunConfig};
use super::pipeline::{
    load_micro, load_trace_backend, plan_estimate, stage_build, stage_corpus, stage_evaluate, stage_explain,
    stage_train, trace_instances, LoadedBackend, Run, ATTRIBUTIONS_FILE, FACTS_FILE, INSTANCES_FILE,
};
use super::report::{report, ReportOutcome};
use crate::domain::{AttributionVector, BehaviourLabel, Instance};
use crate::error::{Error, Result};
use crate::regimes::FactRecord;
use crate::trace::{export_record, parse_trace, validate_trace, write_trace, Primitives, Strictness, TraceReport};

/// Runs `f` inside a rayon pool sized by `config.workers`.
pub fn with_pool<T: Send>(config: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    config.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?
        .install(f)
}

fn facts(run: &Run) -> Result<Vec<FactRecord>> {
    run.read_jsonl(FACTS_FILE)
}

fn backend(run: &Run) -> Result<LoadedBackend> {
    match &run.config.backend {
        BackendSpec::Micro { .. } => Ok(LoadedBackend::Micro(load_micro(run, &run.config)?)),
        BackendSpec::Trace { path, .. } => Ok(LoadedBackend::Trace(load_trace_backend(path)?)),
    }
}

pub fn synth(config: &RunConfig) -> Result<usize> {
    with_pool(config, || {
        let mut run = Run::open(config)?;
        Ok(stage_corpus(&mut run)?.len())
    })
}

pub fn train(config: &RunConfig) -> Result<()> {
    with_pool(config, || {
        let mut run = Run::open(config)?;
        let records = facts(&run)?;
        stage_train(&mut run, &records)?;
        Ok(())
    })
}

/// Memory check, assembly and labelling; for a trace backend, labelling of
/// the configured instance file.
pub fn build(config: &RunConfig) -> Result<Vec<Instance>> {
    with_pool(config, || {
        let mut run = Run::open(config)?;
        match config.backend.clone() {
            BackendSpec::Micro { .. } => {
                let records = facts(&run)?;
                let backend = load_micro(&run, config)?;
                stage_build(&mut run, &backend, &records)
            }
            BackendSpec::Trace { path, instances } => {
                let backend = run.stage("load_trace", |_| Ok((load_trace_backend(&path)?, Vec::new())))?;
                trace_instances(&mut run, &backend, &instances)
            }
        }
    })
}

fn labelled(run: &Run) -> Result<Vec<Instance>> {
    run.read_jsonl(INSTANCES_FILE)
}

/// Plan line for the explain and evaluate work over `instances`.
pub fn plan_for(config: &RunConfig, instances: &[Instance]) -> String {
    let explained: Vec<&Instance> = instances
        .iter()
        .filter(|i| matches!(i.label, Some(l) if l != BehaviourLabel::Other))
        .collect();
    let regimes = config.regimes.len().max(1);
    let mean_len = explained.iter().map(|i| i.len()).sum::<usize>() / explained.len().max(1);
    plan_estimate(config, explained.len().div_ceil(regimes), mean_len)
}

pub fn explain(config: &RunConfig) -> Result<usize> {
    with_pool(config, || {
        let mut run = Run::open(config)?;
        let instances = labelled(&run)?;
        log::info!("{}", plan_for(config, &instances));
        let b = backend(&run)?;
        Ok(stage_explain(&mut run, b.as_dyn(), &instances)?.len())
    })
}

pub fn evaluate(config: &RunConfig) -> Result<usize> {
    with_pool(config, || {
        let mut run = Run::open(config)?;
        let instances = labelled(&run)?;
        let phis: Vec<AttributionVector> = run.read_jsonl(ATTRIBUTIONS_FILE)?;
        let b = backend(&run)?;
        Ok(stage_evaluate(&mut run, b.as_dyn(), &instances, &phis)?.len())
    })
}

/// Rebuilds plots and the report summary; missing inputs are warnings.
pub fn report_run(config: &RunConfig) -> Result<ReportOutcome> {
    let mut run = Run::open(config)?;
    let ks = config.ks.clone();
    run.stage("report", |run| {
        let out = report(&run.root, &ks)?;
        for name in &out.plots {
            run.track(name)?;
        }
        Ok((out, Vec::new()))
    })
}

/// Exports a trace for every labelled, non-Other instance in the run.
pub fn export_trace(config: &RunConfig, out: &Path, primitives: Primitives) -> Result<usize> {
    with_pool(config, || {
        let run = Run::open(config)?;
        let backend = load_micro(&run, config)?;
        let instances = labelled(&run)?;
        let records = instances
            .par_iter()
            .filter(|i| matches!(i.label, Some(l) if l != BehaviourLabel::Other))
            .map(|i| export_record(&backend, i, primitives))
            .collect::<Result<Vec<_>>>()?;
        let mut w = BufWriter::new(fs::File::create(out)?);
        write_trace(&records, &mut w, Strictness::Strict)?;
        w.flush()?;
        Ok(records.len())
    })
}

/// Parses and validates a trace file. Malformed JSON is an error; schema
/// violations come back in the report.
pub fn check_trace(path: &Path, strictness: Strictness) -> Result<TraceReport> {
    let f = fs::File::open(path).map_err(|e| Error::Config(format!("cannot open trace {}: {e}", path.display())))?;
    let records = parse_trace(BufReader::new(f))?;
    Ok(validate_trace(&records, strictness))
}

/// Expected instances per regime and a rough prompt length, for the plan
/// line printed before a full run.
pub fn plan_before_run(config: &RunConfig) -> String {
    let per_regime = match &config.corpus {
        CorpusSpec::Synthetic { n_facts, .. } => (*n_facts).min(config.instance_cap),
        CorpusSpec::File { .. } => config.instance_cap,
    };
    plan_estimate(config, per_regime, 48)
}
