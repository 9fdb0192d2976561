//! Whole-pipeline runs on a small synthetic corpus: artifacts, manifest,
//! regime accounting and the trace-backed path.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ctxeval::harness::pipeline::{sha256_file, ATTRIBUTIONS_FILE, INSTANCES_FILE, MANIFEST_FILE, METRICS_CSV};
use ctxeval::harness::{commands, run_pipeline, BackendSpec, CorpusSpec, Manifest, RunConfig, RunSummary, StageStatus};
use ctxeval::metrics::MetricReport;
use ctxeval::trace::{Primitives, Strictness};
use ctxeval::{Method, Regime};

struct Shared {
    _dir: tempfile::TempDir,
    config: RunConfig,
    summary: RunSummary,
}

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: out.to_path_buf(),
        corpus: CorpusSpec::Synthetic {
            seed: 5,
            n_facts: 40,
            names: Default::default(),
        },
        workers: 1,
        ..RunConfig::default()
    };
    cfg.train.epochs = 6;
    cfg
}

/// One live run shared by every test in this file.
fn live() -> &'static Shared {
    static RUN: OnceLock<Shared> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(&dir.path().join("live"));
        let summary = run_pipeline(&config).expect("live run");
        Shared {
            _dir: dir,
            config,
            summary,
        }
    })
}

fn read_manifest(root: &Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(root.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn every_stage_succeeds_and_artifacts_match_their_hashes() {
    let s = live();
    let m = read_manifest(&s.summary.root);
    let stages: Vec<&str> = m.stages.iter().map(|r| r.stage.as_str()).collect();
    for want in ["corpus", "train", "memory_check", "assemble", "classify", "explain", "evaluate", "report"] {
        assert!(stages.contains(&want), "missing stage {want}: {stages:?}");
    }
    assert!(m.stages.iter().all(|r| r.status == StageStatus::Ok), "{:?}", m.stages);
    assert_eq!(m.config_hash, s.config.hash().unwrap());
    for name in [INSTANCES_FILE, ATTRIBUTIONS_FILE, METRICS_CSV] {
        let digest = m.artifacts.get(name).unwrap_or_else(|| panic!("{name} not tracked"));
        assert_eq!(digest, &sha256_file(&s.summary.root.join(name)).unwrap());
    }
}

#[test]
fn metrics_cover_every_regime_and_explainer() {
    let s = live();
    let cells: BTreeSet<(String, String)> = s
        .summary
        .metrics
        .iter()
        .map(|r| (r.regime.clone(), r.explainer.clone()))
        .collect();
    for regime in Regime::ALL {
        for method in Method::ALL {
            assert!(
                cells.contains(&(regime.to_string(), method.to_string())),
                "no rows for {regime} / {method}"
            );
        }
    }
    for r in &s.summary.metrics {
        match r.value {
            Some(v) => assert!(v.is_finite(), "{r:?}"),
            None => assert!(!r.note.is_empty(), "undefined cell without a note: {r:?}"),
        }
    }
}

#[test]
fn accounting_adds_up() {
    let s = live();
    let m = read_manifest(&s.summary.root);
    assert_eq!(m.accounting.len(), Regime::ALL.len());
    for a in &m.accounting {
        let labelled: usize = a.labels.values().sum();
        assert!(labelled <= a.assembled, "{a:?}");
        assert!(a.assembled <= s.config.instance_cap);
    }
}

#[test]
fn regime_subset_restricts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("subset"));
    cfg.regimes = vec![Regime::Conflicting];
    cfg.explainers = vec![Method::ATTN, Method::MechLight];
    cfg.train = live().config.train.clone();
    let summary = run_pipeline(&cfg).unwrap();
    assert!(summary.metrics.iter().all(|r| r.regime == Regime::Conflicting.to_string()));
    let methods: BTreeSet<&str> = summary.metrics.iter().map(|r| r.explainer.as_str()).collect();
    assert_eq!(methods, BTreeSet::from(["ATTN", "MechLight"]));
}

fn keyed(rows: &[MetricReport]) -> Vec<((String, String, String, usize), Option<f64>)> {
    let mut v: Vec<_> = rows
        .iter()
        .map(|r| ((r.regime.clone(), r.explainer.clone(), r.metric.clone(), r.k), r.value))
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

#[test]
fn trace_backed_run_reproduces_live_metrics() {
    let s = live();
    let dir = tempfile::tempdir().unwrap();
    let trace: PathBuf = dir.path().join("trace.jsonl");
    let primitives = Primitives {
        fa_ablation_logits: true,
        ig_steps: Some(s.config.ig_steps),
    };
    let n = commands::export_trace(&s.config, &trace, primitives).unwrap();
    assert!(n > 0);
    let report = commands::check_trace(&trace, Strictness::Strict).unwrap();
    assert!(report.is_ok(), "{:?}", report.violations);
    assert_eq!(report.records, n);

    let mut cfg = s.config.clone();
    cfg.output_dir = dir.path().join("replay");
    cfg.backend = BackendSpec::Trace {
        path: trace,
        instances: s.summary.root.join(INSTANCES_FILE),
    };
    let replay = run_pipeline(&cfg).unwrap();
    let m = read_manifest(&replay.root);
    let skipped: Vec<&str> = m
        .stages
        .iter()
        .filter(|r| r.status == StageStatus::Skipped)
        .map(|r| r.stage.as_str())
        .collect();
    assert_eq!(skipped, ["corpus", "train", "memory_check", "assemble"]);

    let live_rows = keyed(&s.summary.metrics);
    let replay_rows = keyed(&replay.metrics);
    assert_eq!(
        live_rows.iter().map(|r| &r.0).collect::<Vec<_>>(),
        replay_rows.iter().map(|r| &r.0).collect::<Vec<_>>()
    );
    for ((key, a), (_, b)) in live_rows.iter().zip(&replay_rows) {
        if key.2.starts_with("aopc") {
            // Needs fresh forward passes, which a trace cannot provide.
            assert!(b.is_none(), "{key:?}");
            continue;
        }
        match (a, b) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-4, "{key:?}: {a} vs {b}"),
            (None, None) => {}
            _ => panic!("{key:?}: defined on one path only ({a:?} vs {b:?})"),
        }
    }
}

#[test]
fn trace_without_fa_primitives_leaves_fa_undefined() {
    let s = live();
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let primitives = Primitives {
        fa_ablation_logits: false,
        ig_steps: None,
    };
    commands::export_trace(&s.config, &trace, primitives).unwrap();
    let mut cfg = s.config.clone();
    cfg.output_dir = dir.path().join("replay");
    cfg.regimes = vec![Regime::Conflicting];
    cfg.backend = BackendSpec::Trace {
        path: trace,
        instances: s.summary.root.join(INSTANCES_FILE),
    };
    let replay = run_pipeline(&cfg).unwrap();
    let m = read_manifest(&replay.root);
    let explain = m.stages.iter().find(|r| r.stage == "explain").unwrap();
    assert!(!explain.issues.is_empty(), "missing capabilities should be reported");
    for r in replay.metrics.iter().filter(|r| r.explainer == "FA" || r.explainer == "IG") {
        assert!(r.value.is_none(), "{r:?}");
    }
    assert!(replay
        .metrics
        .iter()
        .any(|r| r.explainer == "ATTN" && r.metric.starts_with("mrr") && r.value.is_some()));
}
