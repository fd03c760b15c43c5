//! The run configuration: one JSON file describing the dataset, every stage's
//! parameters and the global seed. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use onionprint::attacks::{AttackConfig, ClassifierId};
use onionprint::evaluation::Strategy;
use onionprint::netfeat::FeatureConfig;
use onionprint::sitefeat::{AdRules, RegressorConfig};
use onionprint::synthgen::WorldSpec;
use onionprint::trace_store::SanitizeConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "ONIONPRINT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// `null` skips sanitization.
    #[serde(default = "default_sanitize")]
    pub sanitize: Option<SanitizeConfig>,
    #[serde(default = "default_classifiers")]
    pub classifiers: Vec<ClassifierId>,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub attacks: AttackConfig,
    #[serde(default = "default_strategy")]
    pub ensemble: Strategy,
    #[serde(default)]
    pub analyses: Analyses,
    #[serde(default)]
    pub variance: VarianceParams,
    #[serde(default)]
    pub graph: GraphParams,
    #[serde(default)]
    pub sitefeat: SitefeatParams,
    /// World written by `generate`; its seed is replaced by the global seed.
    #[serde(default)]
    pub world: Option<WorldSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analyses {
    pub variance: bool,
    pub zscore: bool,
    pub tukey: bool,
    pub graph: bool,
    pub sitefeat: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Analyses { variance: true, zscore: true, tukey: true, graph: true, sitefeat: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceParams {
    pub small_fraction: f64,
    /// Features for the z-score and Tukey reports, looked up in the first
    /// configured feature set that has them.
    pub deviation_features: Vec<String>,
    pub tukey_k: f64,
}

impl Default for VarianceParams {
    fn default() -> Self {
        VarianceParams { small_fraction: 0.1, deviation_features: vec!["incoming_bytes".into()], tukey_k: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    /// Whose confusions form the graph; the first configured classifier
    /// when unset.
    pub classifier: Option<ClassifierId>,
    pub resolution: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams { classifier: Some(ClassifierId::Cumul), resolution: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SitefeatParams {
    pub regressor: RegressorConfig,
    pub top_n: usize,
    pub ad_rules: AdRules,
}

impl Default for SitefeatParams {
    fn default() -> Self {
        SitefeatParams { regressor: RegressorConfig::default(), top_n: 50, ad_rules: AdRules::default() }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_folds() -> usize {
    10
}

fn default_sanitize() -> Option<SanitizeConfig> {
    Some(SanitizeConfig::default())
}

fn default_classifiers() -> Vec<ClassifierId> {
    ClassifierId::ALL.to_vec()
}

fn default_strategy() -> Strategy {
    Strategy::P1p2
}

/// Scalar overrides from the command line and environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|source| CliError::Config { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(f) = ov.folds {
            cfg.folds = f;
        }
        if let Some(d) = &ov.dataset {
            cfg.dataset_root = d.clone();
        } else {
            cfg.dataset_root = base.join(&cfg.dataset_root);
        }
        if let Some(o) = &ov.out {
            cfg.output_dir = o.clone();
        } else {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Invalid(m.to_string()));
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.classifiers.is_empty() {
            return bad("at least one classifier is required");
        }
        let mut seen = self.classifiers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classifiers.len() {
            return bad("classifiers must not repeat");
        }
        if !(self.variance.small_fraction > 0.0 && self.variance.small_fraction <= 1.0) {
            return bad("variance.small_fraction must be in (0, 1]");
        }
        if !(self.variance.tukey_k >= 0.0 && self.variance.tukey_k.is_finite()) {
            return bad("variance.tukey_k must be non-negative");
        }
        if !(self.graph.resolution > 0.0 && self.graph.resolution.is_finite()) {
            return bad("graph.resolution must be positive");
        }
        if let Some(c) = self.graph.classifier {
            if !self.classifiers.contains(&c) {
                return Err(CliError::Invalid(format!("graph.classifier {c} is not among the configured classifiers")));
            }
        }
        Ok(())
    }

    pub fn graph_classifier(&self) -> ClassifierId {
        self.graph.classifier.unwrap_or(self.classifiers[0])
    }
}
