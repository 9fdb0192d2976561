//! Run configuration: a TOML document with `CTXEVAL_` environment overrides.
//!
//! Override variables name a dotted key path with `__` between levels, e.g.
//! `CTXEVAL_CORPUS__N_FACTS=50` or `CTXEVAL_KS=[5]`. The value is parsed as a
//! TOML value and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::Conventions;
use crate::domain::{Method, Regime};
use crate::error::{Error, Result};
use crate::metrics::{AopcGrid, ProbeConfig};
use crate::microlm::TrainHyper;
use crate::regimes::{MatchRule, NameInventory, PromptTemplate};

pub const ENV_PREFIX: &str = "CTXEVAL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Train (or load) a microlm model inside the run.
    Micro {
        /// Reuse a saved parameter blob and tokenizer instead of training.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokenizer: Option<PathBuf>,
    },
    /// Explain from an exported trace. `instances` must hold the labelled
    /// instances the trace was exported for.
    Trace { path: PathBuf, instances: PathBuf },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Micro {
            params: None,
            tokenizer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSpec {
    Synthetic {
        seed: u64,
        n_facts: usize,
        #[serde(default)]
        names: NameInventory,
    },
    /// Fact records as JSON lines.
    File { path: PathBuf },
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::Synthetic {
            seed: 7,
            n_facts: 200,
            names: NameInventory::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub mlp: bool,
    pub layernorm: bool,
    pub mlp_hidden: usize,
    pub init_scale: f64,
    /// Start the unembedding as a copy of the token embedding (the two are
    /// still trained separately).
    pub tied_init: bool,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            mlp: true,
            layernorm: true,
            mlp_hidden: 64,
            init_scale: 0.1,
            tied_init: true,
            seed: 1,
        }
    }
}

/// How the training set is assembled from the fact records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrillSpec {
    /// Context-reading examples per fact, each with a freshly drawn passage
    /// answer.
    pub per_fact: usize,
    /// Probability that a drill's target is the passage answer rather than
    /// the memory answer.
    pub follow_context: f64,
    /// Fraction of drills with two passages.
    pub dual_fraction: f64,
    /// Copies of each closed-book example in the training set.
    pub closed_book_repeats: usize,
    pub seed: u64,
}

impl Default for DrillSpec {
    fn default() -> Self {
        DrillSpec {
            per_fact: 16,
            follow_context: 0.7,
            dual_fraction: 0.5,
            closed_book_repeats: 8,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backend: BackendSpec,
    pub corpus: CorpusSpec,
    pub regimes: Vec<Regime>,
    pub explainers: Vec<Method>,
    pub ks: Vec<usize>,
    /// Maximum assembled instances per regime.
    pub instance_cap: usize,
    /// Rayon worker count; 0 uses every core.
    pub workers: usize,
    pub template: PromptTemplate,
    pub match_rule: MatchRule,
    pub aopc_grid: AopcGrid,
    pub ig_steps: usize,
    pub neighbours: usize,
    pub conventions: Conventions,
    pub model: ModelSpec,
    pub train: TrainHyper,
    pub drills: DrillSpec,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            backend: BackendSpec::default(),
            corpus: CorpusSpec::default(),
            regimes: Regime::ALL.to_vec(),
            explainers: Method::ALL.to_vec(),
            ks: vec![3, 5, 9],
            instance_cap: 500,
            workers: 0,
            template: PromptTemplate::default(),
            match_rule: MatchRule::default(),
            aopc_grid: AopcGrid::default(),
            ig_steps: crate::explainers::DEFAULT_IG_STEPS,
            neighbours: crate::metrics::DEFAULT_NEIGHBOURS,
            conventions: Conventions::default(),
            model: ModelSpec::default(),
            train: TrainHyper {
                epochs: 8,
                learning_rate: 5e-3,
                batch_size: 16,
                seed: 3,
                stop_at_accuracy: None,
                ..TrainHyper::default()
            },
            drills: DrillSpec::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.regimes.is_empty() {
            return bad("no regimes selected");
        }
        if self.explainers.is_empty() {
            return bad("no explainers selected");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive integers");
        }
        if self.instance_cap == 0 {
            return bad("instance_cap must be positive");
        }
        if self.ig_steps == 0 {
            return bad("ig_steps must be positive");
        }
        if self.neighbours == 0 {
            return bad("neighbours must be positive");
        }
        if !(0.0..=1.0).contains(&self.drills.follow_context) || !(0.0..=1.0).contains(&self.drills.dual_fraction)
        {
            return bad("drill probabilities must lie in [0, 1]");
        }
        if let CorpusSpec::Synthetic { n_facts: 0, .. } = self.corpus {
            return bad("synthetic corpus needs n_facts >= 1");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies overrides from
    /// `vars`, usually `std::env::vars()`.
    pub fn load<I>(path: Option<&Path>, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?,
        };
        let mut overrides: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (k, v) in overrides {
            apply_override(&mut value, &k[ENV_PREFIX.len()..], &v)?;
        }
        Self::from_value(value)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialisation, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("malformed override {ENV_PREFIX}{key}")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = root;
    for part in &path[..path.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
        cur = table
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?
        .insert(path[path.len() - 1].clone(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.ks, vec![3, 5, 9]);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("ks = [5]\n[corpus]\nkind = \"synthetic\"\nseed = 1\nn_facts = 20\n").unwrap();
        assert_eq!(cfg.ks, vec![5]);
        assert_eq!(cfg.instance_cap, 500);
        assert!(matches!(cfg.corpus, CorpusSpec::Synthetic { n_facts: 20, .. }));
    }

    #[test]
    fn env_overrides_apply() {
        let vars = vec![
            ("CTXEVAL_CORPUS__N_FACTS".to_string(), "30".to_string()),
            ("CTXEVAL_KS".to_string(), "[3]".to_string()),
            ("CTXEVAL_OUTPUT_DIR".to_string(), "out/x".to_string()),
            ("CTXEVAL_TRAIN__EPOCHS".to_string(), "5".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = RunConfig::load(None, vars).unwrap();
        assert!(matches!(cfg.corpus, CorpusSpec::Synthetic { n_facts: 30, .. }));
        assert_eq!(cfg.ks, vec![3]);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.train.epochs, 5);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml_str("ks = []"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("regimes = [\"Nope\"]"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::load(None, vec![("CTXEVAL_IG_STEPS".into(), "0".into())]),
            Err(Error::Config(_))
        ));
    }
}
