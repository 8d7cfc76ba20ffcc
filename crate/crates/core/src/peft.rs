//! Parameter-efficient tuning methods attached to an [`EncoderModel`].
//!
//! | method         | new tensors                         | trainable                  |
//! |----------------|-------------------------------------|----------------------------|
//! | `fine_tune`    | none                                | every parameter            |
//! | `prefix_v2`    | per-layer key/value prefixes `[l×d]`| the prefixes               |
//! | `input_prompt` | prompt table `[m×d]`                | the prompt table           |
//! | `adapter`      | per-layer bottleneck after the FFN  | the adapters               |
//! | `bias_only`    | none                                | every backbone `*.bias`    |
//!
//! Prefixes are plain embeddings (no reparameterization network). Adapter
//! up-projections start at zero so a fresh adapter is an exact identity.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{paths, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Standard deviation used for new prefix and prompt embeddings and for the
/// adapter down-projection.
pub const PE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMethod {
    FineTune,
    PrefixV2,
    InputPrompt,
    Adapter,
    BiasOnly,
}

impl fmt::Display for PeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMethod::FineTune => "fine_tune",
            PeMethod::PrefixV2 => "prefix_v2",
            PeMethod::InputPrompt => "input_prompt",
            PeMethod::Adapter => "adapter",
            PeMethod::BiasOnly => "bias_only",
        })
    }
}

impl std::str::FromStr for PeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine_tune" => Ok(PeMethod::FineTune),
            "prefix_v2" => Ok(PeMethod::PrefixV2),
            "input_prompt" => Ok(PeMethod::InputPrompt),
            "adapter" => Ok(PeMethod::Adapter),
            "bias_only" => Ok(PeMethod::BiasOnly),
            other => Err(Error::Config(format!("unknown tuning method '{other}'"))),
        }
    }
}

fn default_prefix_len() -> usize {
    100
}

fn default_prompt_len() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeConfig {
    pub method: PeMethod,
    /// Prefix length `l` for `prefix_v2`.
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    /// Number of prompt vectors `m` for `input_prompt`.
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    /// Adapter bottleneck width `r`; defaults to `d_model / 16` (at least 1).
    #[serde(default)]
    pub adapter_bottleneck: Option<usize>,
    /// Query and passage encoders use one PE state when true.
    #[serde(default)]
    pub share_across_encoders: bool,
}

impl PeConfig {
    pub fn new(method: PeMethod) -> Self {
        PeConfig {
            method,
            prefix_len: default_prefix_len(),
            prompt_len: default_prompt_len(),
            adapter_bottleneck: None,
            share_across_encoders: false,
        }
    }

    pub fn prefix(len: usize) -> Self {
        PeConfig {
            prefix_len: len,
            ..Self::new(PeMethod::PrefixV2)
        }
    }

    pub fn prompt(len: usize) -> Self {
        PeConfig {
            prompt_len: len,
            ..Self::new(PeMethod::InputPrompt)
        }
    }

    pub fn adapter(bottleneck: usize) -> Self {
        PeConfig {
            adapter_bottleneck: Some(bottleneck),
            ..Self::new(PeMethod::Adapter)
        }
    }

    pub fn bottleneck(&self, d_model: usize) -> usize {
        self.adapter_bottleneck.unwrap_or((d_model / 16).max(1))
    }

    /// Fills every model-dependent default so the config can be dumped.
    pub fn resolved(&self, d_model: usize) -> Self {
        PeConfig {
            adapter_bottleneck: Some(self.bottleneck(d_model)),
            ..self.clone()
        }
    }

    pub fn validate(&self, model: &EncoderConfig) -> Result<()> {
        match self.method {
            PeMethod::InputPrompt if self.prompt_len + 2 > model.max_seq_len => {
                Err(Error::Config(format!(
                    "prompt_len {} leaves no room for input within max_seq_len {}",
                    self.prompt_len, model.max_seq_len
                )))
            }
            PeMethod::Adapter if self.bottleneck(model.d_model) == 0 => {
                Err(Error::Config("adapter_bottleneck must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Registry paths of the tensors an attachment added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeState {
    pub method: PeMethod,
    pub paths: Vec<String>,
}

impl PeState {
    pub fn tensors<'a>(&'a self, model: &'a EncoderModel) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.paths
            .iter()
            .filter_map(move |p| model.param(p).map(|t| (p.as_str(), t)))
    }

    pub fn num_parameters(&self, model: &EncoderModel) -> usize {
        self.tensors(model).map(|(_, t)| t.len()).sum()
    }
}

/// Registry paths that receive gradient updates; everything else is frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableSet(BTreeSet<String>);

impl TrainableSet {
    pub fn contains(&self, path: &str) -> bool {
        self.0.contains(path)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn insert(&mut self, path: impl Into<String>) {
        self.0.insert(path.into());
    }

    /// Same set with every path prefixed by `scope`.
    pub fn scoped(&self, scope: &str) -> TrainableSet {
        TrainableSet(self.0.iter().map(|p| format!("{scope}{p}")).collect())
    }

    pub fn extend(&mut self, other: TrainableSet) {
        self.0.extend(other.0);
    }
}

impl FromIterator<String> for TrainableSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        TrainableSet(iter.into_iter().collect())
    }
}

/// Attaches `config` to `model`. A model carries at most one method.
pub fn attach(
    mut model: EncoderModel,
    config: &PeConfig,
    rng: &mut Rng,
) -> Result<(EncoderModel, PeState, TrainableSet)> {
    if let Some(existing) = model.pe() {
        return Err(Error::Config(format!(
            "model already has '{}' attached; methods cannot be combined",
            existing.method
        )));
    }
    let cfg = model.config().clone();
    config.validate(&cfg)?;
    let d = cfg.d_model;
    let mut added = Vec::new();
    match config.method {
        PeMethod::FineTune | PeMethod::BiasOnly => {}
        PeMethod::PrefixV2 => {
            if config.prefix_len > 0 {
                for i in 0..cfg.num_layers {
                    for path in [paths::prefix_key(i), paths::prefix_value(i)] {
                        let t = Tensor::randn(&[config.prefix_len, d], PE_INIT_STD, rng);
                        model.insert_param(path.clone(), t)?;
                        added.push(path);
                    }
                }
            }
        }
        PeMethod::InputPrompt => {
            if config.prompt_len > 0 {
                let t = Tensor::randn(&[config.prompt_len, d], PE_INIT_STD, rng);
                model.insert_param(paths::PROMPT.to_string(), t)?;
                added.push(paths::PROMPT.to_string());
            }
        }
        PeMethod::Adapter => {
            let r = config.bottleneck(d);
            for i in 0..cfg.num_layers {
                let parts = [
                    ("down.weight", Tensor::randn(&[d, r], PE_INIT_STD, rng)),
                    ("down.bias", Tensor::zeros(&[r])),
                    ("up.weight", Tensor::zeros(&[r, d])),
                    ("up.bias", Tensor::zeros(&[d])),
                ];
                for (part, t) in parts {
                    let path = paths::adapter(i, part);
                    model.insert_param(path.clone(), t)?;
                    added.push(path);
                }
            }
        }
    }
    model.set_pe(config.resolved(d));
    let trainable = trainable_set(&model);
    let state = PeState {
        method: config.method,
        paths: added,
    };
    Ok((model, state, trainable))
}

/// The trainable paths implied by the model's attached method (all paths
/// when nothing is attached).
pub fn trainable_set(model: &EncoderModel) -> TrainableSet {
    let method = model.pe().map_or(PeMethod::FineTune, |p| p.method);
    model
        .parameters()
        .map(|(p, _)| p)
        .filter(|p| match method {
            PeMethod::FineTune => true,
            PeMethod::BiasOnly => EncoderModel::is_backbone_path(p) && p.ends_with(".bias"),
            PeMethod::PrefixV2 | PeMethod::InputPrompt | PeMethod::Adapter => {
                !EncoderModel::is_backbone_path(p)
            }
        })
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

impl ParamCount {
    pub fn from_counts(total: usize, trainable: usize) -> Self {
        ParamCount {
            total,
            trainable,
            fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        }
    }

    pub fn combine(self, other: ParamCount) -> ParamCount {
        Self::from_counts(self.total + other.total, self.trainable + other.trainable)
    }
}

/// Exact parameter totals by summing tensor sizes over the registry.
pub fn count_parameters(model: &EncoderModel, trainable: &TrainableSet) -> ParamCount {
    let mut total = 0;
    let mut tuned = 0;
    for (path, t) in model.parameters() {
        total += t.len();
        if trainable.contains(path) {
            tuned += t.len();
        }
    }
    ParamCount::from_counts(total, tuned)
}

/// Closed-form backbone size.
pub fn backbone_parameter_formula(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model;
    let embeddings = cfg.vocab_size * d + cfg.max_seq_len * d + 2 * d;
    let attention = 4 * (d * d + d) + 2 * d;
    let ffn = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d + 2 * d;
    embeddings + cfg.num_layers * (attention + ffn)
}

/// Closed-form count of parameters an attachment adds.
pub fn pe_parameter_formula(cfg: &EncoderConfig, pe: &PeConfig) -> usize {
    let d = cfg.d_model;
    match pe.method {
        PeMethod::FineTune | PeMethod::BiasOnly => 0,
        PeMethod::PrefixV2 => 2 * cfg.num_layers * pe.prefix_len * d,
        PeMethod::InputPrompt => pe.prompt_len * d,
        PeMethod::Adapter => {
            let r = pe.bottleneck(d);
            cfg.num_layers * (d * r + r + r * d + d)
        }
    }
}

/// Closed-form count of bias parameters (attention, FFN and layer-norm
/// biases, including the embedding norm).
pub fn bias_parameter_formula(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model;
    d + cfg.num_layers * (4 * d + 2 * d + cfg.d_ff + d)
}
