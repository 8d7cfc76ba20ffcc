//! Word-level tokenizer and a post-layer-norm transformer encoder.
//!
//! Each layer is multi-head self-attention followed by a position-wise FFN,
//! both wrapped in residual add + layer norm. Rows are token positions and
//! weights are stored `[in × out]`, so projections are `x·W + b`.

pub mod vocab;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{PeConfig, PeMethod};
use crate::tensor::{Activation, Rng, Tape, Tensor, Var};
pub use vocab::{normalize, tokenize, Vocabulary, CLS, PAD, QPAD, SEP, UNK};

/// Struct-level defaults are the BERT-base shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// Rows of the token embedding table; also caps a built vocabulary.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 12,
            d_model: 768,
            num_heads: 12,
            d_ff: 3072,
            vocab_size: 30522,
            max_seq_len: 256,
            dropout: 0.1,
            activation: Activation::Gelu,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.num_heads == 0 {
            return fail("num_layers, d_model, num_heads and d_ff must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len {} < 2", self.max_seq_len));
        }
        if self.vocab_size <= vocab::RESERVED.len() {
            return fail(format!("vocab_size {} has no ordinary tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.init_std <= 0.0 || self.layer_norm_eps <= 0.0 {
            return fail("init_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout only fires in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, rng),
        }
    }
}

pub(crate) mod paths {
    pub const TOKEN: &str = "embeddings.token";
    pub const POSITION: &str = "embeddings.position";
    pub const EMB_GAIN: &str = "embeddings.norm.gain";
    pub const EMB_BIAS: &str = "embeddings.norm.bias";

    pub const LAYER_PARTS: [&str; 16] = [
        "attention.query.weight",
        "attention.query.bias",
        "attention.key.weight",
        "attention.key.bias",
        "attention.value.weight",
        "attention.value.bias",
        "attention.output.weight",
        "attention.output.bias",
        "attention.norm.gain",
        "attention.norm.bias",
        "ffn.intermediate.weight",
        "ffn.intermediate.bias",
        "ffn.output.weight",
        "ffn.output.bias",
        "ffn.norm.gain",
        "ffn.norm.bias",
    ];

    pub fn layer(i: usize, part: &str) -> String {
        format!("layers.{i}.{part}")
    }

    pub fn prefix_key(i: usize) -> String {
        format!("prefix.{i}.key")
    }

    pub fn prefix_value(i: usize) -> String {
        format!("prefix.{i}.value")
    }

    pub const PROMPT: &str = "prompt.embeddings";

    pub fn adapter(i: usize, part: &str) -> String {
        format!("adapter.{i}.{part}")
    }
}

/// Transformer encoder with a named-parameter registry. Parameter-efficient
/// augmentations attached via [`crate::peft::attach`] live in the same
/// registry under `prefix.*`, `prompt.*` or `adapter.*`.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: IndexMap<String, Tensor>,
    pe: Option<PeConfig>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub attn_gain: Var,
    pub attn_bias: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ffn_gain: Var,
    pub ffn_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// Every parameter of an [`EncoderModel`] bound onto one tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub token: Var,
    pub position: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub layers: Vec<LayerVars>,
    pub prefixes: Vec<(Var, Var)>,
    pub prompt: Option<Var>,
    pub adapters: Vec<AdapterVars>,
}

/// Output of [`EncoderModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Final-layer states, one row per position (prompts included).
    pub hidden: Var,
    /// State at the `[CLS]` token.
    pub pooled: Var,
    /// Number of prepended prompt rows in `hidden`.
    pub prompt_rows: usize,
}

impl EncoderModel {
    /// Fresh model: weights `normal(0, init_std)`, biases zero, norm gains one.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = config.init_std;
        let mut params = IndexMap::new();
        params.insert(paths::TOKEN.to_string(), Tensor::randn(&[config.vocab_size, d], std, rng));
        params.insert(
            paths::POSITION.to_string(),
            Tensor::randn(&[config.max_seq_len, d], std, rng),
        );
        params.insert(paths::EMB_GAIN.to_string(), Tensor::filled(&[d], 1.0));
        params.insert(paths::EMB_BIAS.to_string(), Tensor::zeros(&[d]));
        for i in 0..config.num_layers {
            for part in paths::LAYER_PARTS {
                let t = if part.ends_with(".gain") {
                    Tensor::filled(&[d], 1.0)
                } else if part.ends_with(".bias") {
                    let n = if part == "ffn.intermediate.bias" { config.d_ff } else { d };
                    Tensor::zeros(&[n])
                } else {
                    let shape = match part {
                        "ffn.intermediate.weight" => [d, config.d_ff],
                        "ffn.output.weight" => [config.d_ff, d],
                        _ => [d, d],
                    };
                    Tensor::randn(&shape, std, rng)
                };
                params.insert(paths::layer(i, part), t);
            }
        }
        Ok(EncoderModel {
            config,
            params,
            pe: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// The attached parameter-efficient configuration, if any.
    pub fn pe(&self) -> Option<&PeConfig> {
        self.pe.as_ref()
    }

    pub(crate) fn set_pe(&mut self, pe: PeConfig) {
        self.pe = Some(pe);
    }

    pub(crate) fn insert_param(&mut self, path: String, t: Tensor) -> Result<()> {
        if self.params.contains_key(&path) {
            return Err(Error::Internal(format!("parameter {path} registered twice")));
        }
        self.params.insert(path, t);
        Ok(())
    }

    /// Registry in insertion order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn param_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    /// True for registry paths that belong to the pretrained-style backbone.
    pub fn is_backbone_path(path: &str) -> bool {
        path.starts_with("embeddings.") || path.starts_with("layers.")
    }

    /// Puts every parameter on `tape` as a leaf; `trainable` decides which
    /// leaves track gradients. Returns the typed handles and the
    /// `(path, var)` list in registry order.
    pub fn bind(
        &self,
        tape: &mut Tape,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<(EncoderVars, Vec<(String, Var)>)> {
        let mut bound = Vec::with_capacity(self.params.len());
        for (path, t) in &self.params {
            let mut t = t.clone();
            t.set_requires_grad(trainable(path));
            bound.push((path.clone(), tape.leaf(t)));
        }
        let vars = self.vars_from(&bound)?;
        Ok((vars, bound))
    }

    /// Builds typed handles from `(path, var)` pairs covering the registry.
    pub fn vars_from(&self, bound: &[(String, Var)]) -> Result<EncoderVars> {
        let map: std::collections::HashMap<&str, Var> =
            bound.iter().map(|(p, v)| (p.as_str(), *v)).collect();
        let get = |p: &str| -> Result<Var> {
            map.get(p)
                .copied()
                .ok_or_else(|| Error::Internal(format!("parameter {p} not bound")))
        };
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for i in 0..self.config.num_layers {
            let l = |part: &str| get(&paths::layer(i, part));
            layers.push(LayerVars {
                w_q: l("attention.query.weight")?,
                b_q: l("attention.query.bias")?,
                w_k: l("attention.key.weight")?,
                b_k: l("attention.key.bias")?,
                w_v: l("attention.value.weight")?,
                b_v: l("attention.value.bias")?,
                w_o: l("attention.output.weight")?,
                b_o: l("attention.output.bias")?,
                attn_gain: l("attention.norm.gain")?,
                attn_bias: l("attention.norm.bias")?,
                w_1: l("ffn.intermediate.weight")?,
                b_1: l("ffn.intermediate.bias")?,
                w_2: l("ffn.output.weight")?,
                b_2: l("ffn.output.bias")?,
                ffn_gain: l("ffn.norm.gain")?,
                ffn_bias: l("ffn.norm.bias")?,
            });
        }
        let mut vars = EncoderVars {
            token: get(paths::TOKEN)?,
            position: get(paths::POSITION)?,
            norm_gain: get(paths::EMB_GAIN)?,
            norm_bias: get(paths::EMB_BIAS)?,
            layers,
            prefixes: Vec::new(),
            prompt: None,
            adapters: Vec::new(),
        };
        if let Some(pe) = &self.pe {
            match pe.method {
                PeMethod::PrefixV2 if pe.prefix_len > 0 => {
                    for i in 0..self.config.num_layers {
                        vars.prefixes
                            .push((get(&paths::prefix_key(i))?, get(&paths::prefix_value(i))?));
                    }
                }
                PeMethod::InputPrompt if pe.prompt_len > 0 => {
                    vars.prompt = Some(get(paths::PROMPT)?);
                }
                PeMethod::Adapter => {
                    for i in 0..self.config.num_layers {
                        vars.adapters.push(AdapterVars {
                            w_down: get(&paths::adapter(i, "down.weight"))?,
                            b_down: get(&paths::adapter(i, "down.bias"))?,
                            w_up: get(&paths::adapter(i, "up.weight"))?,
                            b_up: get(&paths::adapter(i, "up.bias"))?,
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(vars)
    }

    /// Encodes one token-id sequence. `[PAD]` positions are masked as keys.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        ids: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        if ids.is_empty() {
            return Err(Error::Usage("cannot encode an empty id sequence".into()));
        }
        if ids.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: ids.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather_rows(vars.token, ids)?;
        let pos = tape.gather_rows(vars.position, &positions)?;
        let x = tape.add(tok, pos)?;
        let x = tape.layer_norm(x, vars.norm_gain, vars.norm_bias, cfg.layer_norm_eps)?;
        let mut h = mode.dropout(tape, x, cfg.dropout)?;
        let mut keep: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();

        let mut prompt_rows = 0;
        if let Some(prompt) = vars.prompt {
            h = apply_input_prompt(tape, h, prompt, cfg.max_seq_len)?;
            prompt_rows = tape.shape(prompt)[0];
            let mut extended = vec![true; prompt_rows];
            extended.extend_from_slice(&keep);
            keep = extended;
        }

        for (i, layer) in vars.layers.iter().enumerate() {
            let prefix = vars.prefixes.get(i).copied();
            h = attention_layer(tape, cfg, layer, h, &keep, prefix, mode)?;
            h = ffn_layer(tape, cfg, layer, vars.adapters.get(i), h, mode)?;
        }
        let pooled = tape.row(h, prompt_rows)?;
        Ok(Encoded {
            hidden: h,
            pooled,
            prompt_rows,
        })
    }

    /// Convenience eval-mode encode on a private tape; returns
    /// `(hidden, pooled)` values.
    pub fn encode(&self, ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (vars, _) = self.bind(&mut tape, |_| false)?;
        let out = self.forward(&mut tape, &vars, ids, &mut Mode::Eval)?;
        Ok((tape.value(out.hidden).clone(), tape.value(out.pooled).clone()))
    }
}

/// Prepends prompt rows `[m × d]` to embedded input `[L × d]`. Position
/// embeddings are not applied to the prompts.
pub fn apply_input_prompt(tape: &mut Tape, embedded: Var, prompts: Var, max_len: usize) -> Result<Var> {
    let (l, d) = match *tape.shape(embedded) {
        [l, d] => (l, d),
        ref s => return Err(Error::shape("apply_input_prompt", format!("input {s:?}"))),
    };
    let (m, dp) = match *tape.shape(prompts) {
        [m, dp] => (m, dp),
        ref s => return Err(Error::shape("apply_input_prompt", format!("prompts {s:?}"))),
    };
    if d != dp {
        return Err(Error::shape(
            "apply_input_prompt",
            format!("prompt width {dp} != model width {d}"),
        ));
    }
    if m + l > max_len {
        return Err(Error::Length {
            len: m + l,
            max: max_len,
        });
    }
    tape.concat_rows(&[prompts, embedded])
}

/// Multi-head self-attention sublayer with optional key/value prefixes,
/// followed by residual add and layer norm. `keep` flags which input
/// positions may be attended to; prefix columns are always visible.
pub fn attention_layer(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    layer: &LayerVars,
    h: Var,
    keep: &[bool],
    prefix: Option<(Var, Var)>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let rows = tape.shape(h)[0];
    if keep.len() != rows {
        return Err(Error::shape(
            "attention_layer",
            format!("mask of length {} for {rows} positions", keep.len()),
        ));
    }
    let q = tape.matmul(h, layer.w_q)?;
    let q = tape.add_bias(q, layer.b_q)?;
    let mut k = tape.matmul(h, layer.w_k)?;
    k = tape.add_bias(k, layer.b_k)?;
    let mut v = tape.matmul(h, layer.w_v)?;
    v = tape.add_bias(v, layer.b_v)?;

    let mut mask = Vec::with_capacity(rows);
    if let Some((p_k, p_v)) = prefix {
        for p in [p_k, p_v] {
            if tape.shape(p).len() != 2 || tape.shape(p)[1] != d {
                return Err(Error::shape(
                    "attention_layer",
                    format!("prefix {:?} does not have width {d}", tape.shape(p)),
                ));
            }
        }
        if tape.shape(p_k) != tape.shape(p_v) {
            return Err(Error::shape("attention_layer", "key and value prefixes differ in length"));
        }
        mask.resize(tape.shape(p_k)[0], true);
        k = tape.concat_rows(&[p_k, k])?;
        v = tape.concat_rows(&[p_v, v])?;
    }
    mask.extend_from_slice(keep);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_masked(logits, Some(&mask))?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = tape.matmul(joined, layer.w_o)?;
    let out = tape.add_bias(out, layer.b_o)?;
    let out = mode.dropout(tape, out, cfg.dropout)?;
    let res = tape.add(h, out)?;
    tape.layer_norm(res, layer.attn_gain, layer.attn_bias, cfg.layer_norm_eps)
}

/// `f(h·W₁ + b₁)·W₂ + b₂`, then an optional adapter bottleneck
/// `x + relu(x·W_down + b_down)·W_up + b_up`, then residual add and layer norm.
pub fn ffn_layer(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    layer: &LayerVars,
    adapter: Option<&AdapterVars>,
    h: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let inner = tape.matmul(h, layer.w_1)?;
    let inner = tape.add_bias(inner, layer.b_1)?;
    let inner = tape.activation(inner, cfg.activation);
    let mut out = tape.matmul(inner, layer.w_2)?;
    out = tape.add_bias(out, layer.b_2)?;
    if let Some(a) = adapter {
        let down = tape.matmul(out, a.w_down)?;
        let down = tape.add_bias(down, a.b_down)?;
        let down = tape.activation(down, Activation::Relu);
        let up = tape.matmul(down, a.w_up)?;
        let up = tape.add_bias(up, a.b_up)?;
        out = tape.add(out, up)?;
    }
    let out = mode.dropout(tape, out, cfg.dropout)?;
    let res = tape.add(h, out)?;
    tape.layer_norm(res, layer.ffn_gain, layer.ffn_bias, cfg.layer_norm_eps)
}
