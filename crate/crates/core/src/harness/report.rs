//! Metric CSV/JSON emission and the SVG figure families.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{METRICS_CSV, METRICS_JSON};
use super::svg::{grouped_bars, Series};
use crate::domain::{Method, Regime};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const REPORT_JSON: &str = "report.json";

/// One CSV line; every value traces back to `(config_hash, seed, stage)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
    pub regime: String,
    pub explainer: String,
    pub metric: String,
    pub k: usize,
    pub value: Option<f64>,
    pub group_sizes: String,
    pub note: String,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("metrics csv: {e}"))
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in reports {
        w.serialize(CsvRow {
            config_hash: config_hash.into(),
            seed: r.seed,
            stage: "evaluate".into(),
            regime: r.regime.clone(),
            explainer: r.explainer.clone(),
            metric: r.metric.clone(),
            k: r.k,
            value: r.value,
            group_sizes: r.group_sizes.clone(),
            note: r.note.clone(),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(MetricReport {
                metric: row.metric,
                k: row.k,
                regime: row.regime,
                explainer: row.explainer,
                value: row.value,
                group_sizes: row.group_sizes,
                seed: row.seed,
                note: row.note,
            })
        })
        .collect()
}

fn lookup(reports: &[MetricReport], regime: &str, explainer: &str, metric: &str, k: usize) -> Option<f64> {
    reports
        .iter()
        .find(|r| r.regime == regime && r.explainer == explainer && r.metric == metric && r.k == k)
        .and_then(|r| r.value)
}

fn present<'a>(reports: &[MetricReport], all: impl Iterator<Item = &'a str>, pick: impl Fn(&MetricReport) -> &str) -> Vec<String> {
    all.filter(|n| reports.iter().any(|r| pick(r) == *n)).map(String::from).collect()
}

/// Writes the margin, simulatability and MRR figures and returns their
/// run-relative paths. Margins and simulatability use k = 5 when present.
pub fn write_plots(root: &Path, reports: &[MetricReport], ks: &[usize]) -> Result<Vec<String>> {
    let dir = root.join("plots");
    fs::create_dir_all(&dir)?;
    let k = if ks.contains(&5) { 5 } else { ks.first().copied().unwrap_or(5) };
    let regimes = present(reports, Regime::ALL.iter().map(|r| r.name()), |r| &r.regime);
    let explainers = present(reports, Method::ALL.iter().map(|m| m.name()), |r| &r.explainer);
    let mut written = Vec::new();
    let mut save = |name: String, svg: String| -> Result<()> {
        fs::write(root.join(&name), svg)?;
        written.push(name);
        Ok(())
    };

    let targets = |dual_metrics: [&'static str; 2], single: &'static str| {
        let mut cols = Vec::new();
        for r in &regimes {
            let dual = Regime::parse(r).is_some_and(|r| r.is_dual());
            if dual {
                for m in dual_metrics {
                    cols.push((r.clone(), m));
                }
            } else {
                cols.push((r.clone(), single));
            }
        }
        cols
    };

    let margin_cols = targets(["drank_grp_c1", "drank_grp_c2"], "drank_grp_c");
    let series: Vec<Series> = explainers
        .iter()
        .map(|e| Series {
            name: e.clone(),
            values: margin_cols.iter().map(|(r, m)| lookup(reports, r, e, m, k)).collect(),
        })
        .collect();
    let labels: Vec<String> = margin_cols.iter().map(|(r, m)| format!("{r} {}", &m[10..])).collect();
    save(
        "plots/margins.svg".into(),
        grouped_bars(&format!("Rank margin (k={k})"), &labels, &series, "ΔRank", None),
    )?;

    let mrr_cols = targets(["mrr_c1", "mrr_c2"], "mrr_c");
    let series: Vec<Series> = explainers
        .iter()
        .map(|e| Series {
            name: e.clone(),
            values: mrr_cols.iter().map(|(r, m)| lookup(reports, r, e, m, 0)).collect(),
        })
        .collect();
    let labels: Vec<String> = mrr_cols.iter().map(|(r, m)| format!("{r} {}", &m[4..])).collect();
    save("plots/mrr.svg".into(), grouped_bars("MRR of the answer span", &labels, &series, "MRR", None))?;

    for e in &explainers {
        let series: Vec<Series> = ks
            .iter()
            .map(|&kk| Series {
                name: format!("NMI k={kk}"),
                values: regimes.iter().map(|r| lookup(reports, r, e, "nmi", kk)).collect(),
            })
            .collect();
        let mdl = Series {
            name: format!("MDL bits/instance k={k}"),
            values: regimes
                .iter()
                .map(|r| lookup(reports, r, e, "mdl_bits_per_instance", k))
                .collect(),
        };
        save(
            format!("plots/simulatability_{e}.svg"),
            grouped_bars(
                &format!("Simulatability of {e}"),
                &regimes,
                &series,
                "NMI",
                Some((&mdl, "MDL bits/instance")),
            ),
        )?;
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub source: Option<String>,
    pub rows: usize,
    pub plots: Vec<String>,
    pub warnings: Vec<String>,
}

/// Rebuilds plots and `report.json` from the metric files in `root`.
/// Missing inputs become warnings and a partial report.
pub fn report(root: &Path, ks: &[usize]) -> Result<ReportOutcome> {
    let mut warnings = Vec::new();
    let json: PathBuf = root.join(METRICS_JSON);
    let csv: PathBuf = root.join(METRICS_CSV);
    let (source, reports) = if json.exists() {
        let reports: Vec<MetricReport> = serde_json::from_slice(&fs::read(&json)?)?;
        (Some(METRICS_JSON.to_string()), reports)
    } else if csv.exists() {
        warnings.push(format!("{METRICS_JSON} missing, rebuilt from {METRICS_CSV}"));
        (Some(METRICS_CSV.to_string()), read_metrics_csv(&csv)?)
    } else {
        warnings.push(format!("{METRICS_JSON} and {METRICS_CSV} missing; no metrics to report"));
        (None, Vec::new())
    };
    if !csv.exists() && !reports.is_empty() {
        warnings.push(format!("{METRICS_CSV} missing"));
    }
    let undefined = reports.iter().filter(|r| r.value.is_none()).count();
    if undefined > 0 {
        warnings.push(format!("{undefined} metric cells undefined; see their notes"));
    }
    let plots = write_plots(root, &reports, ks)?;
    for w in &warnings {
        log::warn!("report: {w}");
    }
    let outcome = ReportOutcome {
        source,
        rows: reports.len(),
        plots,
        warnings,
    };
    let mut out = serde_json::to_vec_pretty(&outcome)?;
    out.push(b'\n');
    fs::write(root.join(REPORT_JSON), out)?;
    Ok(outcome)
}
