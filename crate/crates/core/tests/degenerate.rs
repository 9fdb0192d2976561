//! Evaluation over groups that are empty or hold a single label.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctxeval::explainers::{explain, ExplainConfig};
use ctxeval::harness::evaluate::evaluate;
use ctxeval::harness::RunConfig;
use ctxeval::{Method, Regime, SegmentKind};

fn config(regimes: Vec<Regime>) -> RunConfig {
    RunConfig {
        regimes,
        explainers: vec![Method::ATTN, Method::MechLight],
        ks: vec![3],
        ..RunConfig::default()
    }
}

#[test]
fn empty_memory_group_leaves_contrast_undefined() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let case = common::planted_case(&mut rng, SegmentKind::Context1);
    let cfg = config(vec![Regime::Conflicting]);
    let mut instances = Vec::new();
    let mut phis = Vec::new();
    for i in 0..4 {
        let mut inst = case.single.clone();
        inst.id = format!("s{i}");
        for m in &cfg.explainers {
            phis.push(explain(&case.backend, &inst, *m, &ExplainConfig::default()).unwrap());
        }
        instances.push(inst);
    }
    let (rows, issues) = evaluate(&case.backend, &instances, &phis, &cfg).unwrap();
    assert!(issues.is_empty(), "{issues:?}");
    for r in &rows {
        assert!(r.group_sizes.starts_with("C=4;M=0"), "{r:?}");
        match r.metric.as_str() {
            "drank_grp_c" | "mdl_bits_total" | "mdl_bits_per_instance" => {
                assert!(r.value.is_none(), "{r:?}");
                assert!(!r.note.is_empty(), "{r:?}");
            }
            "mrr_c" => assert_eq!(r.value, Some(1.0), "{r:?}"),
            _ => {}
        }
        if let Some(v) = r.value {
            assert!(v.is_finite(), "{r:?}");
        }
    }
}

#[test]
fn regime_without_instances_still_reports_its_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let case = common::planted_case(&mut rng, SegmentKind::Context2);
    let cfg = config(vec![Regime::Conflicting, Regime::Mixed]);
    let inst = case.single.clone();
    let phis: Vec<_> = cfg
        .explainers
        .iter()
        .map(|m| explain(&case.backend, &inst, *m, &ExplainConfig::default()).unwrap())
        .collect();
    let (rows, _) = evaluate(&case.backend, &[inst], &phis, &cfg).unwrap();
    let mixed: Vec<_> = rows.iter().filter(|r| r.regime == "Mixed").collect();
    assert!(!mixed.is_empty());
    for r in mixed {
        assert!(r.value.is_none(), "{r:?}");
        assert!(!r.note.is_empty(), "{r:?}");
    }
}
