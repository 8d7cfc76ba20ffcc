//! Dense dual-encoder and late-interaction retrievers and the contrastive
//! training objective.
//!
//! Dense scoring is the inner product of `[CLS]` vectors from separate query
//! and passage encoders. Late interaction runs one shared encoder, projects
//! every token state to `embedding_dim`, L2-normalizes it and scores with
//! MaxSim: `Σᵢ maxⱼ ⟨qᵢ, dⱼ⟩`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, EncoderConfig, EncoderModel, EncoderVars, Mode, Vocabulary, QPAD};
use crate::error::{Error, Result};
use crate::peft::{attach, count_parameters, ParamCount, PeConfig, TrainableSet};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Inner product of two embeddings.
pub fn sim_dense(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape(
            "sim_dense",
            format!("lengths {} and {} differ", q.len(), p.len()),
        ));
    }
    Ok(q.iter().zip(p).map(|(a, b)| a * b).sum())
}

/// Sum over query tokens of the best inner product with any document token.
pub fn sim_maxsim(q_toks: &Tensor, d_toks: &Tensor) -> Result<f64> {
    let (qs, ds) = (q_toks.shape(), d_toks.shape());
    if qs.len() != 2 || ds.len() != 2 || qs[1] != ds[1] {
        return Err(Error::shape(
            "sim_maxsim",
            format!("query {qs:?} and document {ds:?} must be [n × d] with equal d"),
        ));
    }
    let dim = qs[1];
    let docs = d_toks.data();
    Ok(q_toks
        .data()
        .chunks_exact(dim)
        .map(|q| {
            docs.chunks_exact(dim)
                .map(|d| q.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum())
}

/// Differentiable MaxSim on the tape.
pub fn maxsim_on_tape(tape: &mut Tape, q_toks: Var, d_toks: Var) -> Result<Var> {
    let dt = tape.transpose(d_toks)?;
    let sims = tape.matmul(q_toks, dt)?;
    let best = tape.max_rows(sims)?;
    Ok(tape.sum(best))
}

/// `−log(e^pos / (e^pos + Σⱼ e^negⱼ))`, via log-sum-exp.
pub fn nce_loss(tape: &mut Tape, pos: Var, negs: Var) -> Result<Var> {
    if tape.value(pos).len() != 1 {
        return Err(Error::shape("nce_loss", "positive score must be a scalar"));
    }
    let n = tape.value(negs).len();
    let p = tape.reshape(pos, vec![1, 1])?;
    let ns = tape.reshape(negs, vec![n, 1])?;
    let all = tape.concat_rows(&[p, ns])?;
    let lse = tape.logsumexp(all)?;
    let pos_scalar = tape.reshape(pos, vec![])?;
    tape.sub(lse, pos_scalar)
}

/// One training record: a query, its positive passage and optional hard
/// negatives, as raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
}

/// Reads a JSON-lines training file. Blank lines are skipped.
pub fn load_training_file(path: &Path) -> Result<Vec<TrainingExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Tokenized queries with one positive each and optional hard negatives.
#[derive(Debug, Clone, Default)]
pub struct TrainingBatch {
    pub queries: Vec<Vec<usize>>,
    pub positives: Vec<Vec<usize>>,
    pub hard_negatives: Vec<Vec<Vec<usize>>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.positives.len() != self.queries.len()
            || (!self.hard_negatives.is_empty() && self.hard_negatives.len() != self.queries.len())
        {
            return Err(Error::Usage("batch needs one positive per query".into()));
        }
        if self.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let hard = self.hard_negatives.iter().map(Vec::len).sum::<usize>();
        if self.len() == 1 && hard == 0 {
            return Err(Error::Config(
                "a batch of one query without hard negatives has no negatives".into(),
            ));
        }
        Ok(())
    }

    fn hard(&self, i: usize) -> &[Vec<usize>] {
        self.hard_negatives.get(i).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Dense,
    Late,
}

impl std::fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RetrieverKind::Dense => "dense",
            RetrieverKind::Late => "late",
        })
    }
}

impl std::str::FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RetrieverKind::Dense),
            "late" => Ok(RetrieverKind::Late),
            other => Err(Error::Config(format!("unknown retriever kind '{other}'"))),
        }
    }
}

fn default_embedding_dim() -> usize {
    128
}
fn default_query_len() -> usize {
    32
}
fn default_doc_len() -> usize {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LateConfig {
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Queries are truncated or padded with `[QPAD]` to exactly this length.
    #[serde(default = "default_query_len")]
    pub query_len: usize,
    #[serde(default = "default_doc_len")]
    pub doc_len: usize,
}

impl Default for LateConfig {
    fn default() -> Self {
        LateConfig {
            embedding_dim: default_embedding_dim(),
            query_len: default_query_len(),
            doc_len: default_doc_len(),
        }
    }
}

/// Everything needed to rebuild a retriever's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: RetrieverKind,
    pub encoder: EncoderConfig,
    pub pe: PeConfig,
    #[serde(default)]
    pub late: LateConfig,
}

/// Query and passage encoders. Both start from the same backbone weights;
/// each gets its own PE state unless `share_across_encoders` is set.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub query: EncoderModel,
    pub passage: EncoderModel,
    shared_pe: bool,
    trainable: TrainableSet,
}

#[derive(Debug, Clone)]
pub struct LateInteractionModel {
    pub encoder: EncoderModel,
    /// `[d_model × embedding_dim]`, no bias.
    pub projection: Tensor,
    pub query_len: usize,
    pub doc_len: usize,
    trainable: TrainableSet,
}

#[derive(Debug, Clone)]
pub enum RetrieverModel {
    Dense(DualEncoder),
    Late(LateInteractionModel),
}

/// An encoded query or passage.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Dense(Vec<f64>),
    /// Unit-norm token embeddings `[n × embedding_dim]`.
    Tokens(Tensor),
}

impl Representation {
    pub fn score(&self, other: &Representation) -> Result<f64> {
        match (self, other) {
            (Representation::Dense(q), Representation::Dense(p)) => sim_dense(q, p),
            (Representation::Tokens(q), Representation::Tokens(d)) => sim_maxsim(q, d),
            _ => Err(Error::Usage("cannot score dense against token representations".into())),
        }
    }
}

const QUERY: &str = "query.";
const PASSAGE: &str = "passage.";
const ENCODER: &str = "encoder.";
const PROJECTION: &str = "projection";

struct Bound {
    query: EncoderVars,
    passage: EncoderVars,
    projection: Option<Var>,
    leaves: Vec<(String, Var)>,
}

impl DualEncoder {
    pub fn new(encoder: EncoderConfig, pe: &PeConfig, rng: &mut Rng) -> Result<Self> {
        let backbone = EncoderModel::new(encoder, rng)?;
        let (query, _, q_train) = attach(backbone.clone(), pe, rng)?;
        let (mut passage, _, p_train) = attach(backbone, pe, rng)?;
        let mut trainable = q_train.scoped(QUERY);
        if pe.share_across_encoders {
            for (path, t) in query.parameters() {
                if !EncoderModel::is_backbone_path(path) {
                    *passage.param_mut(path).expect("same structure") = t.clone();
                }
            }
            let backbone_only: TrainableSet = p_train
                .iter()
                .filter(|p| EncoderModel::is_backbone_path(p))
                .map(str::to_string)
                .collect();
            trainable.extend(backbone_only.scoped(PASSAGE));
        } else {
            trainable.extend(p_train.scoped(PASSAGE));
        }
        Ok(DualEncoder {
            query,
            passage,
            shared_pe: pe.share_across_encoders,
            trainable,
        })
    }

    fn passage_path_is_shared(&self, path: &str) -> bool {
        self.shared_pe && !EncoderModel::is_backbone_path(path)
    }
}

impl LateInteractionModel {
    pub fn new(encoder: EncoderConfig, pe: &PeConfig, late: &LateConfig, rng: &mut Rng) -> Result<Self> {
        if late.embedding_dim == 0 || late.query_len < 2 || late.doc_len < 2 {
            return Err(Error::Config(
                "late interaction needs embedding_dim ≥ 1 and query/doc lengths ≥ 2".into(),
            ));
        }
        let std = encoder.init_std;
        let d = encoder.d_model;
        let backbone = EncoderModel::new(encoder, rng)?;
        let (encoder, _, train) = attach(backbone, pe, rng)?;
        let projection = Tensor::randn(&[d, late.embedding_dim], std, rng);
        let mut trainable = train.scoped(ENCODER);
        trainable.insert(PROJECTION);
        Ok(LateInteractionModel {
            encoder,
            projection,
            query_len: late.query_len,
            doc_len: late.doc_len,
            trainable,
        })
    }
}

impl RetrieverModel {
    pub fn new(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        match spec.kind {
            RetrieverKind::Dense => Ok(RetrieverModel::Dense(DualEncoder::new(
                spec.encoder.clone(),
                &spec.pe,
                rng,
            )?)),
            RetrieverKind::Late => Ok(RetrieverModel::Late(LateInteractionModel::new(
                spec.encoder.clone(),
                &spec.pe,
                &spec.late,
                rng,
            )?)),
        }
    }

    pub fn kind(&self) -> RetrieverKind {
        match self {
            RetrieverModel::Dense(_) => RetrieverKind::Dense,
            RetrieverModel::Late(_) => RetrieverKind::Late,
        }
    }

    fn primary_encoder(&self) -> &EncoderModel {
        match self {
            RetrieverModel::Dense(m) => &m.query,
            RetrieverModel::Late(m) => &m.encoder,
        }
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        self.primary_encoder().config()
    }

    /// Every stored parameter under its full path, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        match self {
            RetrieverModel::Dense(m) => {
                let mut out: Vec<(String, &Tensor)> =
                    m.query.parameters().map(|(p, t)| (format!("{QUERY}{p}"), t)).collect();
                out.extend(
                    m.passage
                        .parameters()
                        .filter(|(p, _)| !m.passage_path_is_shared(p))
                        .map(|(p, t)| (format!("{PASSAGE}{p}"), t)),
                );
                out
            }
            RetrieverModel::Late(m) => {
                let mut out: Vec<(String, &Tensor)> =
                    m.encoder.parameters().map(|(p, t)| (format!("{ENCODER}{p}"), t)).collect();
                out.push((PROJECTION.to_string(), &m.projection));
                out
            }
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            RetrieverModel::Dense(m) => {
                let shared = m.shared_pe;
                let mut out: Vec<(String, &mut Tensor)> = m
                    .query
                    .parameters_mut()
                    .map(|(p, t)| (format!("{QUERY}{p}"), t))
                    .collect();
                out.extend(
                    m.passage
                        .parameters_mut()
                        .filter(|(p, _)| !(shared && !EncoderModel::is_backbone_path(p)))
                        .map(|(p, t)| (format!("{PASSAGE}{p}"), t)),
                );
                out
            }
            RetrieverModel::Late(m) => {
                let mut out: Vec<(String, &mut Tensor)> = m
                    .encoder
                    .parameters_mut()
                    .map(|(p, t)| (format!("{ENCODER}{p}"), t))
                    .collect();
                out.push((PROJECTION.to_string(), &mut m.projection));
                out
            }
        }
    }

    pub fn trainable(&self) -> &TrainableSet {
        match self {
            RetrieverModel::Dense(m) => &m.trainable,
            RetrieverModel::Late(m) => &m.trainable,
        }
    }

    /// Copies shared PE tensors from the query encoder into the passage
    /// encoder; call after parameters change.
    pub fn sync_shared(&mut self) {
        if let RetrieverModel::Dense(m) = self {
            if m.shared_pe {
                let copies: Vec<(String, Tensor)> = m
                    .query
                    .parameters()
                    .filter(|(p, _)| !EncoderModel::is_backbone_path(p))
                    .map(|(p, t)| (p.to_string(), t.clone()))
                    .collect();
                for (p, t) in copies {
                    *m.passage.param_mut(&p).expect("same structure") = t;
                }
            }
        }
    }

    /// Total, trainable and fraction over every stored parameter.
    pub fn count_parameters(&self) -> ParamCount {
        match self {
            RetrieverModel::Dense(m) => {
                let q = count_parameters(&m.query, &strip(&m.trainable, QUERY));
                let mut p = count_parameters(&m.passage, &strip(&m.trainable, PASSAGE));
                if m.shared_pe {
                    let shared: usize = m
                        .passage
                        .parameters()
                        .filter(|(p, _)| !EncoderModel::is_backbone_path(p))
                        .map(|(_, t)| t.len())
                        .sum();
                    p = ParamCount::from_counts(p.total - shared, p.trainable);
                }
                q.combine(p)
            }
            RetrieverModel::Late(m) => {
                let c = count_parameters(&m.encoder, &strip(&m.trainable, ENCODER));
                let proj = m.projection.len();
                c.combine(ParamCount::from_counts(proj, proj))
            }
        }
    }

    fn bind(&self, tape: &mut Tape, track: bool) -> Result<Bound> {
        let trainable = self.trainable();
        match self {
            RetrieverModel::Dense(m) => {
                let (query, q_leaves) =
                    m.query.bind(tape, |p| track && trainable.contains(&format!("{QUERY}{p}")))?;
                let q_map: HashMap<&str, Var> =
                    q_leaves.iter().map(|(p, v)| (p.as_str(), *v)).collect();
                let mut leaves: Vec<(String, Var)> =
                    q_leaves.iter().map(|(p, v)| (format!("{QUERY}{p}"), *v)).collect();
                let mut p_bound = Vec::new();
                for (path, t) in m.passage.parameters() {
                    let var = if m.passage_path_is_shared(path) {
                        q_map[path]
                    } else {
                        let full = format!("{PASSAGE}{path}");
                        let mut t = t.clone();
                        t.set_requires_grad(track && trainable.contains(&full));
                        let v = tape.leaf(t);
                        leaves.push((full, v));
                        v
                    };
                    p_bound.push((path.to_string(), var));
                }
                let passage = m.passage.vars_from(&p_bound)?;
                Ok(Bound {
                    query,
                    passage,
                    projection: None,
                    leaves,
                })
            }
            RetrieverModel::Late(m) => {
                let (vars, enc_leaves) =
                    m.encoder.bind(tape, |p| track && trainable.contains(&format!("{ENCODER}{p}")))?;
                let mut leaves: Vec<(String, Var)> =
                    enc_leaves.iter().map(|(p, v)| (format!("{ENCODER}{p}"), *v)).collect();
                let mut proj = m.projection.clone();
                proj.set_requires_grad(track && trainable.contains(PROJECTION));
                let projection = tape.leaf(proj);
                leaves.push((PROJECTION.to_string(), projection));
                Ok(Bound {
                    query: vars.clone(),
                    passage: vars,
                    projection: Some(projection),
                    leaves,
                })
            }
        }
    }

    fn token_budget(&self, encoder: &EncoderModel) -> usize {
        let prompt = encoder
            .pe()
            .filter(|p| p.method == crate::peft::PeMethod::InputPrompt)
            .map_or(0, |p| p.prompt_len);
        encoder.config().max_seq_len - prompt
    }

    /// Token ids for a query: `[CLS] … [SEP]`, and for late interaction
    /// padded with `[QPAD]` to exactly `query_len`.
    pub fn query_ids(&self, text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
        match self {
            RetrieverModel::Dense(m) => tokenize(text, vocab, self.token_budget(&m.query)),
            RetrieverModel::Late(m) => {
                let len = m.query_len.min(self.token_budget(&m.encoder));
                let mut ids = tokenize(text, vocab, len)?;
                ids.resize(len, QPAD);
                Ok(ids)
            }
        }
    }

    pub fn passage_ids(&self, text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
        match self {
            RetrieverModel::Dense(m) => tokenize(text, vocab, self.token_budget(&m.passage)),
            RetrieverModel::Late(m) => {
                tokenize(text, vocab, m.doc_len.min(self.token_budget(&m.encoder)))
            }
        }
    }

    fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        is_query: bool,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        match self {
            RetrieverModel::Dense(m) => {
                let (model, vars) = if is_query {
                    (&m.query, &bound.query)
                } else {
                    (&m.passage, &bound.passage)
                };
                Ok(model.forward(tape, vars, ids, mode)?.pooled)
            }
            RetrieverModel::Late(m) => {
                let out = m.encoder.forward(tape, &bound.query, ids, mode)?;
                let tokens = if out.prompt_rows > 0 {
                    tape.slice_rows(out.hidden, out.prompt_rows, ids.len())?
                } else {
                    out.hidden
                };
                let proj = bound.projection.expect("late model binds a projection");
                let projected = tape.matmul(tokens, proj)?;
                tape.l2_normalize_rows(projected)
            }
        }
    }

    fn score_on_tape(&self, tape: &mut Tape, q: Var, p: Var) -> Result<Var> {
        match self {
            RetrieverModel::Dense(_) => tape.dot(q, p),
            RetrieverModel::Late(_) => maxsim_on_tape(tape, q, p),
        }
    }

    /// Contrastive loss over a batch: each query's positive competes with
    /// every other query's positive and with its own hard negatives. Returns
    /// the mean loss and the bound parameter leaves for gradient collection.
    pub fn in_batch_loss(
        &self,
        tape: &mut Tape,
        batch: &TrainingBatch,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        batch.validate()?;
        let bound = self.bind(tape, true)?;
        let b = batch.len();
        let mut queries = Vec::with_capacity(b);
        for ids in &batch.queries {
            queries.push(self.encode_on_tape(tape, &bound, ids, true, mode)?);
        }
        let mut positives = Vec::with_capacity(b);
        for ids in &batch.positives {
            positives.push(self.encode_on_tape(tape, &bound, ids, false, mode)?);
        }
        let mut losses = Vec::with_capacity(b);
        for i in 0..b {
            let mut hard = Vec::new();
            for ids in batch.hard(i) {
                hard.push(self.encode_on_tape(tape, &bound, ids, false, mode)?);
            }
            let pos = self.score_on_tape(tape, queries[i], positives[i])?;
            let mut negs = Vec::with_capacity(b - 1 + hard.len());
            for (j, &p) in positives.iter().enumerate() {
                if j != i {
                    negs.push(self.score_on_tape(tape, queries[i], p)?);
                }
            }
            for &h in &hard {
                negs.push(self.score_on_tape(tape, queries[i], h)?);
            }
            let negs = stack_scalars(tape, &negs)?;
            losses.push(nce_loss(tape, pos, negs)?);
        }
        let all = stack_scalars(tape, &losses)?;
        Ok((tape.mean(all), bound.leaves))
    }

    /// Eval-mode encoder that binds the parameters once and reuses the tape.
    pub fn session(&self) -> Result<Session<'_>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let mark = tape.len();
        Ok(Session {
            model: self,
            tape,
            bound,
            mark,
        })
    }
}

fn strip(set: &TrainableSet, scope: &str) -> TrainableSet {
    set.iter()
        .filter_map(|p| p.strip_prefix(scope))
        .map(str::to_string)
        .collect()
}

fn stack_scalars(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let n = xs.len();
    let rows = xs
        .iter()
        .map(|&x| tape.reshape(x, vec![1, 1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&rows)?;
    tape.reshape(stacked, vec![n])
}

/// Inference handle from [`RetrieverModel::session`].
pub struct Session<'m> {
    model: &'m RetrieverModel,
    tape: Tape,
    bound: Bound,
    mark: usize,
}

impl Session<'_> {
    fn encode(&mut self, ids: &[usize], is_query: bool) -> Result<Representation> {
        let out = self
            .model
            .encode_on_tape(&mut self.tape, &self.bound, ids, is_query, &mut Mode::Eval);
        let rep = out.map(|v| match self.model {
            RetrieverModel::Dense(_) => Representation::Dense(self.tape.value(v).data().to_vec()),
            RetrieverModel::Late(_) => Representation::Tokens(self.tape.value(v).clone()),
        });
        self.tape.truncate(self.mark);
        rep
    }

    pub fn encode_query(&mut self, ids: &[usize]) -> Result<Representation> {
        self.encode(ids, true)
    }

    pub fn encode_passage(&mut self, ids: &[usize]) -> Result<Representation> {
        self.encode(ids, false)
    }

    pub fn model(&self) -> &RetrieverModel {
        self.model
    }
}
