//! Experiment configuration files.
//!
//! A config is TOML. When it names a `preset`, the preset is loaded first and
//! the file is merged over it: tables merge key by key, every other value
//! (including the `strategies` array) replaces the preset's.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use asyncbezier::aggregate::{ClientWeighting, PositionBase, StrategyConfig, StrategyKind};
use asyncbezier::correction::{default_lambda0, CorrectionRule, OrthoScope};
use asyncbezier::curve::CurveTrainConfig;
use asyncbezier::model::{ModelKind, ModelSpec};
use asyncbezier::sim::{DataConfig, ServiceTime, SimConfig};
use serde::Deserialize;
use toml::Table;

use crate::CliError;

const TASK: &str = include_str!("../presets/task.toml");

/// Names and bodies of the built-in presets.
pub const PRESETS: [(&str, &str); 3] = [
    ("femnist-like", include_str!("../presets/femnist-like.toml")),
    ("shakespeare-like", include_str!("../presets/shakespeare-like.toml")),
    ("synthetic-hetero", include_str!("../presets/synthetic-hetero.toml")),
];

pub const DEFAULT_EPOCHS: [usize; 4] = [1, 2, 5, 10];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    #[serde(default)]
    preset: Option<String>,
    seeds: Vec<u64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    n_clients: usize,
    total_updates: u64,
    #[serde(default = "default_eval_every")]
    eval_every: u64,
    #[serde(default)]
    max_staleness: Option<u64>,
    #[serde(default)]
    swa_window: Option<usize>,
    #[serde(default)]
    error_threshold: Option<f64>,
    #[serde(default)]
    epochs: Option<Vec<usize>>,
    #[serde(default)]
    service_time: ServiceTime,
    data: DataConfig,
    model: ModelSection,
    #[serde(default)]
    local: CurveTrainConfig,
    strategies: Vec<StrategyEntry>,
}

fn default_eval_every() -> u64 {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum ModelName {
    Logistic,
    Mlp1,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    kind: ModelName,
    #[serde(default)]
    hidden: Option<usize>,
    #[serde(default)]
    l2: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindName {
    Fedasync,
    Fedbuff,
    Dcasgd,
    Fedgs,
    Fedortho,
    Asyncbezier,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CorrectionName {
    Identity,
    Orthodc,
    Dcasgd,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyEntry {
    #[serde(default)]
    name: Option<String>,
    kind: KindName,
    eta_g: f64,
    #[serde(default)]
    client_weighting: ClientWeighting,
    #[serde(default)]
    position_base: Option<PositionBase>,
    #[serde(default)]
    buffer_k: Option<usize>,
    #[serde(default)]
    lambda0: Option<f64>,
    #[serde(default)]
    adaptive: Option<bool>,
    #[serde(default)]
    alpha: Option<f64>,
    #[serde(default)]
    correction: Option<CorrectionName>,
    #[serde(default)]
    vartheta: Option<f64>,
    #[serde(default)]
    scope: Option<OrthoScope>,
}

fn kind_label(k: KindName) -> &'static str {
    match k {
        KindName::Fedasync => "fedasync",
        KindName::Fedbuff => "fedbuff",
        KindName::Dcasgd => "dcasgd",
        KindName::Fedgs => "fedgs",
        KindName::Fedortho => "fedortho",
        KindName::Asyncbezier => "asyncbezier",
    }
}

impl StrategyEntry {
    fn reject(&self, label: &str, keys: &[(&str, bool)]) -> Result<(), CliError> {
        for (key, present) in keys {
            if *present {
                return Err(CliError::Config(format!("strategies.{key} does not apply to `{label}`")));
            }
        }
        Ok(())
    }

    fn into_config(self) -> Result<StrategyConfig, CliError> {
        let label = kind_label(self.kind);
        let name = self.name.clone().unwrap_or_else(|| label.to_string());
        let kind = match self.kind {
            KindName::Fedasync | KindName::Fedgs | KindName::Fedortho => {
                self.reject(
                    label,
                    &[
                        ("buffer_k", self.buffer_k.is_some()),
                        ("lambda0", self.lambda0.is_some()),
                        ("adaptive", self.adaptive.is_some()),
                        ("alpha", self.alpha.is_some()),
                        ("correction", self.correction.is_some()),
                        ("vartheta", self.vartheta.is_some()),
                        ("scope", self.scope.is_some()),
                    ],
                )?;
                match self.kind {
                    KindName::Fedgs => StrategyKind::FedGs,
                    KindName::Fedortho => StrategyKind::FedOrtho,
                    _ => StrategyKind::FedAsync,
                }
            }
            KindName::Fedbuff => {
                self.reject(
                    label,
                    &[
                        ("lambda0", self.lambda0.is_some()),
                        ("adaptive", self.adaptive.is_some()),
                        ("alpha", self.alpha.is_some()),
                        ("correction", self.correction.is_some()),
                        ("vartheta", self.vartheta.is_some()),
                        ("scope", self.scope.is_some()),
                    ],
                )?;
                StrategyKind::FedBuff { buffer_k: self.buffer_k.unwrap_or(10) }
            }
            KindName::Dcasgd => {
                self.reject(
                    label,
                    &[
                        ("buffer_k", self.buffer_k.is_some()),
                        ("alpha", self.alpha.is_some()),
                        ("correction", self.correction.is_some()),
                        ("vartheta", self.vartheta.is_some()),
                        ("scope", self.scope.is_some()),
                        ("position_base", self.position_base.is_some()),
                    ],
                )?;
                StrategyKind::DcAsgd {
                    lambda0: self.lambda0.unwrap_or_else(default_lambda0),
                    adaptive: self.adaptive.unwrap_or(false),
                }
            }
            KindName::Asyncbezier => {
                self.reject(
                    label,
                    &[("buffer_k", self.buffer_k.is_some()), ("position_base", self.position_base.is_some())],
                )?;
                let orthodc_keys = [("vartheta", self.vartheta.is_some()), ("scope", self.scope.is_some())];
                let dcasgd_keys = [("lambda0", self.lambda0.is_some()), ("adaptive", self.adaptive.is_some())];
                let correction = match self.correction.unwrap_or(CorrectionName::Orthodc) {
                    CorrectionName::Identity => {
                        self.reject("identity correction", &orthodc_keys)?;
                        self.reject("identity correction", &dcasgd_keys)?;
                        CorrectionRule::Identity
                    }
                    CorrectionName::Orthodc => {
                        self.reject("orthodc correction", &dcasgd_keys)?;
                        let vartheta = self
                            .vartheta
                            .ok_or_else(|| CliError::Config(format!("strategies.vartheta is required for `{name}`")))?;
                        CorrectionRule::OrthoDc { vartheta, scope: self.scope.unwrap_or_default() }
                    }
                    CorrectionName::Dcasgd => {
                        self.reject("dcasgd correction", &orthodc_keys)?;
                        CorrectionRule::DcAsgd {
                            lambda0: self.lambda0.unwrap_or_else(default_lambda0),
                            adaptive: self.adaptive.unwrap_or(false),
                        }
                    }
                };
                StrategyKind::AsyncBezier { alpha: self.alpha.unwrap_or(0.0), correction }
            }
        };
        let mut cfg = StrategyConfig::new(name, kind, self.eta_g).with_weighting(self.client_weighting);
        cfg.position_base = self.position_base.unwrap_or_default();
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// A validated experiment: one simulation per (strategy, seed) cell.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub strategies: Vec<StrategyConfig>,
    pub error_threshold: Option<f64>,
    pub epochs: Vec<usize>,
    /// Template for every cell; `strategy` and `seed` are overwritten.
    pub base: SimConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let merged = match user.get("preset") {
            Some(toml::Value::String(name)) => {
                let mut base = preset_table(name)?;
                merge(&mut base, user.clone());
                base
            }
            Some(other) => return Err(CliError::Config(format!("preset must be a string, got {other}"))),
            None => user,
        };
        let file: ExperimentFile =
            merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        file.build()
    }

    /// The configuration of one cell.
    pub fn cell(&self, strategy: &StrategyConfig, seed: u64) -> SimConfig {
        let mut cfg = self.base.clone();
        cfg.strategy = strategy.clone();
        cfg.seed = seed;
        cfg
    }
}

/// Preset merged over the shared task, as a TOML table.
pub fn preset_table(name: &str) -> Result<Table, CliError> {
    let body = PRESETS.iter().find(|(n, _)| *n == name).map(|(_, b)| *b).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
    })?;
    let mut table: Table = TASK.parse().expect("built-in task parses");
    merge(&mut table, body.parse().expect("built-in preset parses"));
    table.insert("preset".into(), toml::Value::String(name.into()));
    Ok(table)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentFile {
    fn build(self) -> Result<ExperimentConfig, CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        if self.strategies.is_empty() {
            return Err(CliError::Config("strategies must list at least one strategy".into()));
        }
        if let Some(e) = self.error_threshold {
            if !(e > 0.0 && e < 1.0) {
                return Err(CliError::Config(format!("error_threshold = {e} must lie in (0, 1)")));
            }
        }
        let epochs = self.epochs.unwrap_or_else(|| DEFAULT_EPOCHS.to_vec());
        if epochs.is_empty() || epochs.contains(&0) {
            return Err(CliError::Config("epochs must be a non-empty list of positive counts".into()));
        }
        let kind = match (self.model.kind, self.model.hidden) {
            (ModelName::Logistic, None) => ModelKind::Logistic,
            (ModelName::Logistic, Some(_)) => {
                return Err(CliError::Config("model.hidden does not apply to `logistic`".into()))
            }
            (ModelName::Mlp1, Some(hidden)) => ModelKind::Mlp1 { hidden },
            (ModelName::Mlp1, None) => return Err(CliError::Config("model.hidden is required for `mlp1`".into())),
        };
        let model =
            ModelSpec { kind, n_features: self.data.n_features, n_classes: self.data.n_classes, l2: self.model.l2 };
        let strategies = self.strategies.into_iter().map(StrategyEntry::into_config).collect::<Result<Vec<_>, _>>()?;
        let mut names = BTreeSet::new();
        for s in &strategies {
            if !names.insert(s.name.clone()) {
                return Err(CliError::Config(format!("duplicate strategy name `{}`", s.name)));
            }
        }
        let base = SimConfig {
            n_clients: self.n_clients,
            total_updates: self.total_updates,
            seed: self.seeds[0],
            service_time: self.service_time,
            max_staleness: self.max_staleness,
            strategy: strategies[0].clone(),
            curve: self.local,
            model,
            data: self.data,
            eval_every: self.eval_every,
            swa_window: self.swa_window,
        };
        for s in &strategies {
            let mut cell = base.clone();
            cell.strategy = s.clone();
            cell.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(ExperimentConfig {
            preset: self.preset,
            seeds: self.seeds,
            output_dir: self.output_dir,
            strategies,
            error_threshold: self.error_threshold,
            epochs,
            base,
        })
    }
}
