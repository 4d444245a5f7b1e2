//! Run configuration: a TOML file with `[data]`, `[model]`, `[diffusion]`,
//! `[train]`, and `[eval]` sections merged with `--set section.key=value`
//! overrides. Every key has a default, unknown keys are rejected, and the
//! fully resolved result is logged before a command does any work.

use crate::CliError;
use gtd_core::{
    DataGenConfig, DiffusionConfig, GatingMode, GrammarPreset, GtanConfig, LabelScaling, LossKind,
    SamplerKind, ScheduleKind, TrainConfig, TrainMode,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Synthetic dataset settings; mirrors the generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub grammar: GrammarPreset,
    pub num_sequences: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub ambiguous_fraction: f64,
    pub ambiguity_window: f64,
    pub ambiguity_extra_sigma: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection {
            grammar: GrammarPreset::SharedPrefix,
            num_sequences: 224,
            feature_dim: 16,
            noise_sigma: 0.1,
            ambiguous_fraction: 0.0,
            ambiguity_window: 0.35,
            ambiguity_extra_sigma: 3.0,
            seed: 11,
        }
    }
}

impl DataSection {
    pub fn to_config(&self) -> DataGenConfig {
        DataGenConfig {
            grammar: self.grammar,
            num_sequences: self.num_sequences,
            feature_dim: self.feature_dim,
            noise_sigma: self.noise_sigma,
            ambiguous_fraction: self.ambiguous_fraction,
            ambiguity_window: self.ambiguity_window,
            ambiguity_extra_sigma: self.ambiguity_extra_sigma,
            seed: self.seed,
        }
    }
}

/// Generator architecture. `num_classes` must match the dataset's grammar
/// and `cond_dim` its feature width.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub num_classes: usize,
    pub cond_dim: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub gating_mode: GatingMode,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        ModelSection {
            num_stages: 2,
            blocks_per_stage: 5,
            channels: 32,
            kernel_size: 3,
            num_classes: 7,
            cond_dim: 16,
            embed_dim: 32,
            dropout: 0.1,
            gating_mode: GatingMode::Gated,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> GtanConfig {
        GtanConfig {
            num_stages: self.num_stages,
            blocks_per_stage: self.blocks_per_stage,
            channels: self.channels,
            kernel_size: self.kernel_size,
            num_classes: self.num_classes,
            cond_dim: self.cond_dim,
            embed_dim: self.embed_dim,
            dropout: self.dropout,
            gating_mode: self.gating_mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub sampler: SamplerKind,
    pub num_steps: usize,
    pub label_scaling: LabelScaling,
}

impl Default for DiffusionSection {
    fn default() -> DiffusionSection {
        DiffusionSection {
            t_max: 200,
            schedule: ScheduleKind::Cosine,
            sampler: SamplerKind::Ddim,
            num_steps: 25,
            label_scaling: LabelScaling::ZeroOne,
        }
    }
}

impl DiffusionSection {
    pub fn to_config(&self) -> DiffusionConfig {
        DiffusionConfig {
            t_max: self.t_max,
            schedule: self.schedule,
            sampler: self.sampler,
            num_steps: self.num_steps,
            label_scaling: self.label_scaling,
        }
    }
}

/// Objective and optimizer settings. The seed is deliberately not a config
/// key: training takes it from the mandatory `--seed` flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub loss: LossKind,
    pub obs_loss_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub self_cond_zero_prob: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            mode: TrainMode::Stochastic,
            loss: LossKind::Mse,
            obs_loss_weight: 1.0,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 1,
            self_cond_zero_prob: 0.5,
            alpha: 0.2,
            beta: 0.3,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            loss: self.loss,
            obs_loss_weight: self.obs_loss_weight,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            self_cond_zero_prob: self.self_cond_zero_prob,
            seed,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// Human-readable block per evaluation group.
    Text,
    /// One JSON line per group, then one per video.
    Jsonl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub format: ReportFormat,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection {
            format: ReportFormat::Text,
        }
    }
}

/// Reads the optional config file and applies `--set` overrides on the raw
/// table before deserializing, so overrides face the same unknown-key and
/// type checks as the file itself.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for entry in overrides {
        apply_override(&mut table, entry)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("config: {e}")))
}

fn apply_override(table: &mut toml::Table, entry: &str) -> Result<(), CliError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects section.key=value, got `{entry}`")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(usage(format!("--set has an empty key segment in `{entry}`")));
    }
    let value = parse_value(raw.trim());
    let mut current = table;
    for key in &keys[..keys.len() - 1] {
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("`{key}` in `{entry}` is not a config section")))?;
    }
    current.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parses an override value with TOML literal syntax; bare words that are
/// not valid TOML (enum names, mostly) are taken as strings.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("value key is present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Logs the resolved config file content to stderr.
pub fn log_config(cfg: &RunConfig) {
    eprintln!("resolved config:");
    match toml::to_string(cfg) {
        Ok(text) => {
            for line in text.lines() {
                eprintln!("  {line}");
            }
        }
        Err(e) => eprintln!("  (config does not serialize: {e})"),
    }
}

/// Logs one named config section (used when the source of truth is a
/// checkpoint rather than a config file).
pub fn log_section<T: Serialize>(name: &str, value: &T) {
    eprintln!("  [{name}]");
    match toml::to_string(value) {
        Ok(text) => {
            for line in text.lines() {
                eprintln!("  {line}");
            }
        }
        Err(e) => eprintln!("  (section does not serialize: {e})"),
    }
}

/// Logs command-line level settings alongside the config body.
pub fn log_kv(pairs: &[(&str, String)]) {
    for (key, value) in pairs {
        eprintln!("  {key} = {value}");
    }
}
