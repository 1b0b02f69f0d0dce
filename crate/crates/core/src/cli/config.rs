use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// Environment variable read for the seed when `--seed` is absent.
pub const SEED_ENV: &str = "PARSREC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Category dropped at test time by `spillover`.
    pub removed_category: usize,
    /// Categories reported by `spillover`: one correlated with the removed
    /// category in some group, one independent of it everywhere.
    pub correlated_category: usize,
    pub independent_category: usize,
    /// Recommendations per step used as sales.
    pub k: usize,
    pub threshold: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            removed_category: 2,
            correlated_category: 3,
            independent_category: 15,
            k: 10,
            threshold: 0.05,
        }
    }
}

/// Everything one run needs. `seed` is the master seed and is copied into
/// the synth and train sections; `model.n_items` follows the synth config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub analysis: AnalysisOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelConfig {
                n_items: synth.n_items(),
                ..ModelConfig::default()
            },
            synth,
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            analysis: AnalysisOptions::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ks: Option<Vec<usize>>,
    pub removed_category: Option<usize>,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.n_items != self.synth.n_items() {
            return Err(Error::Config(format!(
                "model.n_items = {} contradicts the synth config ({} items)",
                self.model.n_items,
                self.synth.n_items()
            )));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config(
                "eval.ks must be non-empty positive cutoffs".into(),
            ));
        }
        let c = self.synth.n_categories;
        let a = &self.analysis;
        for (name, v) in [
            ("removed_category", a.removed_category),
            ("correlated_category", a.correlated_category),
            ("independent_category", a.independent_category),
        ] {
            if v >= c {
                return Err(Error::Config(format!(
                    "analysis.{name} = {v} but there are {c} categories"
                )));
            }
        }
        if a.k == 0 {
            return Err(Error::Config("analysis.k must be at least 1".into()));
        }
        Ok(())
    }
}

fn has_key(v: &toml::Value, section: &str, key: &str) -> bool {
    v.get(section).and_then(|s| s.get(key)).is_some()
}

/// Parses a config text (empty means all defaults), applies `overrides`
/// and resolves derived fields.
pub fn parse_config(
    text: &str,
    overrides: &Overrides,
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let raw: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for section in ["synth", "train"] {
        if has_key(&raw, section, "seed") {
            return Err(Error::Config(format!(
                "{section}.seed is derived from the top-level seed; set `seed` instead"
            )));
        }
    }
    let explicit_items = has_key(&raw, "model", "n_items");
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let env_seed =
        match env_seed {
            Some(s) => Some(s.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))
            })?),
            None => None,
        };
    if let Some(s) = overrides.seed.or(env_seed) {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.out {
        cfg.out = o.clone();
    }
    if let Some(ks) = &overrides.ks {
        cfg.eval.ks = ks.clone();
    }
    if let Some(c) = overrides.removed_category {
        cfg.analysis.removed_category = c;
    }
    cfg.synth.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    if !explicit_items {
        cfg.model.n_items = cfg.synth.n_items();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults, then the file at `path` (if any), then `overrides`, then the
/// seed from the environment when no `--seed` was given.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let env = std::env::var(SEED_ENV).ok();
    parse_config(&text, overrides, env.as_deref())
}

/// Parses `1,5,10`.
pub fn parse_ks(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| format!("bad cutoff {p:?}"))
        })
        .collect()
}
