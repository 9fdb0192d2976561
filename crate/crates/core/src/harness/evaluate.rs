//! The metrics stage: every metric for every (regime, explainer, k) cell.

use std::collections::HashMap;

use rayon::prelude::*;

use super::config::RunConfig;
use super::pipeline::Issue;
use crate::backend::ModelBackend;
use crate::domain::{AttributionVector, BehaviourLabel, Instance, InstanceGroup, Method, Regime, SegmentKind};
use crate::error::{Error, Result};
use crate::metrics::{aopc, drank_grp, drank_inst, mdl_preq, mrr, nmutinf, MetricReport, SimFeatures};

struct Cell<'a> {
    regime: Regime,
    method: Method,
    sizes: String,
    seed: u64,
    out: &'a mut Vec<MetricReport>,
}

impl Cell<'_> {
    fn push(&mut self, metric: &str, k: usize, value: Result<f64>, note: &str) {
        let (value, note) = match value {
            Ok(v) => (Some(v), note.to_string()),
            Err(e) => (None, e.to_string()),
        };
        self.out.push(MetricReport {
            metric: metric.into(),
            k,
            regime: self.regime.name().into(),
            explainer: self.method.name().into(),
            value,
            group_sizes: self.sizes.clone(),
            seed: self.seed,
            note,
        });
    }

    fn undefined(&mut self, metric: &str, k: usize, message: &str) {
        self.out.push(MetricReport {
            metric: metric.into(),
            k,
            regime: self.regime.name().into(),
            explainer: self.method.name().into(),
            value: None,
            group_sizes: self.sizes.clone(),
            seed: self.seed,
            note: message.into(),
        });
    }
}

/// Mean AOPC over the members of `groups`, in member order.
fn mean_aopc(backend: &dyn ModelBackend, groups: &[&InstanceGroup], cfg: &RunConfig) -> Result<(f64, f64)> {
    let members: Vec<_> = groups.iter().flat_map(|g| g.members.iter()).collect();
    if members.is_empty() {
        return Err(Error::UndefinedMetric("no labelled instances".into()));
    }
    let per: Vec<Result<(f64, f64)>> = members
        .par_iter()
        .map(|(inst, phi)| {
            let r = aopc(backend, inst, &phi.scores, &cfg.aopc_grid.ks(inst.len()))?;
            Ok((r.comp, r.suff))
        })
        .collect();
    let mut comp = 0.0;
    let mut suff = 0.0;
    for r in per {
        let (c, s) = r?;
        comp += c;
        suff += s;
    }
    let n = members.len() as f64;
    Ok((comp / n, suff / n))
}

fn simulatability(cell: &mut Cell, a: &InstanceGroup, b: &InstanceGroup, k: usize, cfg: &RunConfig) {
    let features = match SimFeatures::from_groups(a, b, k) {
        Ok(f) => f,
        Err(e) => {
            for m in ["nmi", "mdl_bits_total", "mdl_bits_per_instance"] {
                cell.undefined(m, k, &e.to_string());
            }
            return;
        }
    };
    match nmutinf(&features.x, &features.y, cfg.neighbours) {
        Ok(e) if e.degenerate => cell.push("nmi", k, Ok(e.nmi), "degenerate: one label only"),
        Ok(e) => cell.push("nmi", k, Ok(e.nmi), ""),
        Err(e) => cell.push("nmi", k, Err(e), ""),
    }
    let degenerate = a.is_empty() || b.is_empty();
    let note = if degenerate { "degenerate: one label only" } else { "" };
    match mdl_preq(&features.x, &features.y, &cfg.probe, cfg.seed) {
        Ok(r) => {
            cell.push("mdl_bits_total", k, Ok(r.total_bits), note);
            cell.push("mdl_bits_per_instance", k, Ok(r.bits_per_instance), note);
        }
        Err(e) => {
            let msg = e.to_string();
            cell.undefined("mdl_bits_total", k, &msg);
            cell.undefined("mdl_bits_per_instance", k, &msg);
        }
    }
}

/// Computes all metric reports. Only instances with an attribution for the
/// cell's method enter its groups; the rest are counted in `group_sizes`.
pub fn evaluate(
    backend: &dyn ModelBackend,
    instances: &[Instance],
    phis: &[AttributionVector],
    cfg: &RunConfig,
) -> Result<(Vec<MetricReport>, Vec<Issue>)> {
    let by_key: HashMap<(&str, Method), &AttributionVector> =
        phis.iter().map(|p| ((p.instance_id.as_str(), p.method), p)).collect();
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for &regime in &cfg.regimes {
        let members: Vec<&Instance> = instances.iter().filter(|i| i.regime == regime).collect();
        let labels = if regime.is_dual() {
            [BehaviourLabel::C1, BehaviourLabel::C2]
        } else {
            [BehaviourLabel::C, BehaviourLabel::M]
        };
        let other = members.iter().filter(|i| i.label == Some(BehaviourLabel::Other)).count();
        for &method in &cfg.explainers {
            let mut ga = InstanceGroup::new(labels[0]);
            let mut gb = InstanceGroup::new(labels[1]);
            let mut missing = 0;
            for inst in &members {
                let Some(label) = inst.label.filter(|l| labels.contains(l)) else {
                    continue;
                };
                let Some(phi) = by_key.get(&(inst.id.as_str(), method)) else {
                    missing += 1;
                    continue;
                };
                let g = if label == labels[0] { &mut ga } else { &mut gb };
                if let Err(e) = g.push(inst, phi) {
                    issues.push(Issue {
                        item: format!("{}/{method}", inst.id),
                        message: e.to_string(),
                    });
                }
            }
            let sizes = format!(
                "{}={};{}={};Other={other};unexplained={missing}",
                labels[0],
                ga.len(),
                labels[1],
                gb.len()
            );
            let mut cell = Cell {
                regime,
                method,
                sizes,
                seed: cfg.seed,
                out: &mut out,
            };
            for &k in &cfg.ks {
                if regime.is_dual() {
                    cell.push("drank_grp_c1", k, drank_grp(&ga, &gb, SegmentKind::Context1, k), "");
                    cell.push("drank_grp_c2", k, drank_grp(&gb, &ga, SegmentKind::Context2, k), "");
                    cell.push("drank_inst_c1", k, drank_inst(&ga, k), "");
                    cell.push("drank_inst_c2", k, drank_inst(&gb, k), "");
                } else {
                    cell.push("drank_grp_c", k, drank_grp(&ga, &gb, SegmentKind::Context1, k), "");
                }
                simulatability(&mut cell, &ga, &gb, k, cfg);
            }
            if regime.is_dual() {
                cell.push("mrr_c1", 0, mrr(&ga), "");
                cell.push("mrr_c2", 0, mrr(&gb), "");
            } else {
                cell.push("mrr_c", 0, mrr(&ga), "");
            }
            match mean_aopc(backend, &[&ga, &gb], cfg) {
                Ok((c, s)) => {
                    cell.push("aopc_comp", 0, Ok(c), "");
                    cell.push("aopc_suff", 0, Ok(s), "");
                }
                Err(e) => {
                    let msg = e.to_string();
                    cell.undefined("aopc_comp", 0, &msg);
                    cell.undefined("aopc_suff", 0, &msg);
                }
            }
        }
    }
    Ok((out, issues))
}
