//! Experiment configuration files.
//!
//! Configurations are TOML documents. Every section and key is optional and
//! unknown keys are rejected:
//!
//! ```toml
//! task = "copy"            # copy | reverse | modadd
//! train_steps = 800
//! eval_every = 100
//!
//! [data]                   # prompt_len, batch_size, eval_size, ...
//! [model]                  # sizes, grouping, layer_scope, rewards, optim, ...
//! [model.grouping]
//! [model.optim]
//! [output]                 # dir, checkpoint_every
//! [ablation]               # axis, values
//! ```
//!
//! The effective configuration, defaults included, is written next to the
//! results of every run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use tiermoe_core::grouping::{GroupingKind, ScopeKind};
use tiermoe_core::losses::RewardSchedule;
use tiermoe_core::model::ModelConfig;

use crate::data::{DataConfig, Task, TaskSampler};
use crate::error::{LabError, LabResult};

pub const OUT_ROOT_ENV: &str = "TIERMOE_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    GroupCount,
    Strategy,
    Reward,
    LayerScope,
    GroupParity,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::GroupCount => "group_count",
            AblationAxis::Strategy => "strategy",
            AblationAxis::Reward => "reward",
            AblationAxis::LayerScope => "layer_scope",
            AblationAxis::GroupParity => "group_parity",
        }
    }

    /// Levels swept when the configuration lists none.
    pub fn default_values(self) -> Vec<toml::Value> {
        use toml::Value as V;
        let strs = |xs: &[&str]| xs.iter().map(|s| V::String(s.to_string())).collect();
        match self {
            AblationAxis::GroupCount => (1..=4).map(V::Integer).collect(),
            AblationAxis::Strategy => strs(&["uniform", "high_only", "random"]),
            AblationAxis::Reward => [[1.0, 0.5, 0.0], [2.0, 1.0, 0.0], [0.5, 0.25, 0.0]]
                .iter()
                .map(|r| V::Array(r.iter().map(|&x| V::Float(x)).collect()))
                .collect(),
            AblationAxis::LayerScope => strs(&["full", "shallow", "deep", "even"]),
            AblationAxis::GroupParity => strs(&["even", "uneven"]),
        }
    }

    /// Configuration keys a sub-run may change relative to the base.
    pub fn touched_keys(self) -> &'static [&'static str] {
        match self {
            AblationAxis::GroupCount => &["model.grouping.groups", "model.rewards"],
            AblationAxis::Strategy => &["model.grouping.kind"],
            AblationAxis::Reward => &["model.rewards"],
            AblationAxis::LayerScope => &["model.layer_scope"],
            AblationAxis::GroupParity => &["model.grouping.kind", "model.grouping.sizes"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<toml::Value>>,
}

/// One sub-run of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub train_steps: u64,
    pub eval_every: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub output: OutputConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Copy,
            train_steps: 800,
            eval_every: 100,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            output: OutputConfig::default(),
            ablation: None,
        }
    }
}

fn bad(path: impl std::fmt::Display, msg: impl std::fmt::Display) -> LabError {
    LabError::Config(format!("{path}: {msg}"))
}

pub fn parse_config(text: &str) -> LabResult<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        if path == "." {
            LabError::Config(msg)
        } else {
            bad(path, msg)
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> LabResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| bad(path.display(), e))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> LabResult<()> {
        if self.train_steps == 0 {
            return Err(bad("train_steps", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be positive"));
        }
        if self.data.batch_size == 0 || self.data.eval_size == 0 || self.data.eval_batch_size == 0 {
            return Err(bad(
                "data",
                "batch_size, eval_size and eval_batch_size must be positive",
            ));
        }
        let sampler = TaskSampler::new(self.task, self.model.vocab_size, &self.data)?;
        if sampler.seq_len() > self.model.max_seq_len {
            return Err(bad(
                "data.prompt_len",
                format!(
                    "sequences of length {} exceed model.max_seq_len {}",
                    sampler.seq_len(),
                    self.model.max_seq_len
                ),
            ));
        }
        self.model
            .plan()
            .map_err(|e| LabError::Config(model_error(e)))?;
        if self.ablation.is_some() {
            self.variants()?;
        }
        Ok(())
    }

    /// Fills settings derived from others: rewards default to evenly spaced
    /// values from 1 down to 0 and, without an explicit length, the cosine
    /// schedule spans the whole run.
    pub fn effective(&self) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.model.rewards = Some(cfg.model.reward_schedule());
        if cfg.model.optim.decay_steps.is_none() {
            cfg.model.optim.decay_steps = Some(cfg.train_steps);
        }
        cfg
    }

    pub fn to_toml(&self) -> LabResult<String> {
        toml::to_string_pretty(self)
            .map_err(|e| LabError::Config(format!("cannot serialize configuration: {e}")))
    }

    /// Output directory, placed under `root` when it is relative.
    pub fn output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output.dir.is_relative() => r.join(&self.output.dir),
            _ => self.output.dir.clone(),
        }
    }

    /// Sub-runs of the ablation grid; empty without an ablation section.
    pub fn variants(&self) -> LabResult<Vec<Variant>> {
        let Some(ab) = &self.ablation else {
            return Ok(Vec::new());
        };
        let values = ab
            .values
            .clone()
            .unwrap_or_else(|| ab.axis.default_values());
        if values.is_empty() {
            return Err(bad("ablation.values", "must not be empty"));
        }
        let mut base = self.clone();
        base.ablation = None;
        let mut labels = BTreeSet::new();
        let mut out = Vec::with_capacity(values.len());
        for (i, v) in values.iter().enumerate() {
            let path = format!("ablation.values[{i}]");
            let mut cfg = base.clone();
            let label = apply_level(ab.axis, v, &mut cfg.model).map_err(|m| bad(&path, m))?;
            cfg.model.plan().map_err(|e| bad(&path, model_error(e)))?;
            if !labels.insert(label.clone()) {
                return Err(bad(&path, format!("duplicate level {label}")));
            }
            out.push(Variant { label, config: cfg });
        }
        Ok(out)
    }
}

/// Validation messages of the model start with the offending key.
fn model_error(e: tiermoe_core::Error) -> String {
    match e {
        tiermoe_core::Error::InvalidArgument(m) => format!("model.{m}"),
        other => format!("model: {other}"),
    }
}

fn core_message(e: tiermoe_core::Error) -> String {
    match e {
        tiermoe_core::Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

fn float_list(v: &toml::Value) -> Option<Vec<f64>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
        .collect()
}

fn apply_level(
    axis: AblationAxis,
    v: &toml::Value,
    model: &mut ModelConfig,
) -> Result<String, String> {
    match axis {
        AblationAxis::GroupCount => {
            let c = v
                .as_integer()
                .filter(|&c| c > 0)
                .ok_or_else(|| format!("expected a positive group count, got {v}"))?
                as usize;
            model.grouping.groups = c;
            if model.rewards.as_ref().is_some_and(|r| r.len() != c) {
                model.rewards = None;
            }
            Ok(format!("C{c}"))
        }
        AblationAxis::Strategy => {
            let kind = match v.as_str() {
                Some("uniform") => GroupingKind::Uniform,
                Some("high_only") => GroupingKind::HighOnly,
                Some("random") => GroupingKind::Random,
                _ => return Err(format!("expected uniform, high_only or random, got {v}")),
            };
            model.grouping.kind = kind;
            Ok(v.as_str().unwrap_or_default().to_string())
        }
        AblationAxis::Reward => {
            let r = float_list(v).ok_or_else(|| format!("expected a list of rewards, got {v}"))?;
            let label = format!(
                "r{}",
                r.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join("_")
            );
            model.rewards = Some(RewardSchedule::new(r).map_err(core_message)?);
            Ok(label)
        }
        AblationAxis::LayerScope => {
            let (kind, label) = match v {
                toml::Value::String(s) => match s.as_str() {
                    "full" => (ScopeKind::Full, s.clone()),
                    "shallow" => (ScopeKind::Shallow, s.clone()),
                    "deep" => (ScopeKind::Deep, s.clone()),
                    "even" => (ScopeKind::Even, s.clone()),
                    _ => return Err(format!("unknown scope {s:?}")),
                },
                toml::Value::Array(xs) => {
                    let layers: Option<Vec<usize>> = xs
                        .iter()
                        .map(|x| x.as_integer().and_then(|i| usize::try_from(i).ok()))
                        .collect();
                    let layers =
                        layers.ok_or_else(|| format!("expected layer indices, got {v}"))?;
                    let label = format!(
                        "layers{}",
                        layers
                            .iter()
                            .map(|l| l.to_string())
                            .collect::<Vec<_>>()
                            .join("_")
                    );
                    (ScopeKind::Explicit(layers), label)
                }
                _ => return Err(format!("expected a scope name or a layer list, got {v}")),
            };
            model.layer_scope = kind;
            Ok(label)
        }
        AblationAxis::GroupParity => match v.as_str() {
            Some("even") => {
                model.grouping.kind = GroupingKind::Uniform;
                model.grouping.sizes = None;
                Ok("even".into())
            }
            Some("uneven") => {
                let k = model.top_k;
                let mut sizes = vec![k];
                sizes.resize(model.grouping.groups.max(1), (k / 2).max(1));
                model.grouping.kind = GroupingKind::Uneven;
                model.grouping.sizes = Some(sizes);
                Ok("uneven".into())
            }
            _ => Err(format!("expected even or uneven, got {v}")),
        },
    }
}

/// Dotted key paths whose values differ between two configurations.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> LabResult<Vec<String>> {
    fn walk(prefix: &str, a: &Json, b: &Json, out: &mut Vec<String>) {
        match (a, b) {
            (Json::Object(x), Json::Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(
                        &p,
                        x.get(k).unwrap_or(&Json::Null),
                        y.get(k).unwrap_or(&Json::Null),
                        out,
                    );
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(
        "",
        &serde_json::to_value(a)?,
        &serde_json::to_value(b)?,
        &mut out,
    );
    Ok(out)
}

/// Command-line overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// `seed` sets the model, data and grouping seeds together.
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> LabResult<()> {
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.model.grouping.seed = s;
            cfg.data.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.train_steps = n;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        cfg.validate()
    }

    pub fn is_empty(&self) -> bool {
        self.seed.is_none() && self.steps.is_none() && self.out.is_none()
    }
}
