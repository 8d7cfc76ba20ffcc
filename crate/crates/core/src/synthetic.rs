//! Desk-scale synthetic retrieval data: random documents over words
//! `w0 … w{n-1}` and queries that are noisy token-level copies of them.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::{Document, Query};
use crate::metrics::Qrels;
use crate::retrievers::TrainingExample;
use crate::tensor::seeded_rng;

pub const MIN_DOC_LEN: usize = 8;
pub const MAX_DOC_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub train: Vec<TrainingExample>,
}

/// `num_pairs` documents of 8–16 words drawn uniformly from `vocab_size`
/// words; query `i` copies document `i` with each token independently
/// replaced by a uniformly drawn word with probability `noise`.
pub fn generate(num_pairs: usize, vocab_size: usize, noise: f64, seed: u64) -> Result<SyntheticData> {
    if num_pairs < 2 {
        return Err(Error::Config("num_pairs must be at least 2".into()));
    }
    if vocab_size == 0 {
        return Err(Error::Config("vocab_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config("noise must be in [0, 1]".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut data = SyntheticData {
        corpus: Vec::with_capacity(num_pairs),
        queries: Vec::with_capacity(num_pairs),
        qrels: Qrels::default(),
        train: Vec::with_capacity(num_pairs),
    };
    for i in 0..num_pairs {
        let len = rng.random_range(MIN_DOC_LEN..=MAX_DOC_LEN);
        let words: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
        let noisy: Vec<usize> = words
            .iter()
            .map(|&w| {
                if rng.random_bool(noise) {
                    rng.random_range(0..vocab_size)
                } else {
                    w
                }
            })
            .collect();
        let text = join(&words);
        let query = join(&noisy);
        let (doc_id, query_id) = (format!("d{i}"), format!("q{i}"));
        data.qrels.insert(&query_id, &doc_id, 1)?;
        data.train.push(TrainingExample {
            query: query.clone(),
            positive: text.clone(),
            negatives: Vec::new(),
        });
        data.corpus.push(Document {
            id: doc_id,
            title: String::new(),
            text,
        });
        data.queries.push(Query { id: query_id, text: query });
    }
    Ok(data)
}

fn join(words: &[usize]) -> String {
    words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.tsv";
pub const TRAIN_FILE: &str = "train.jsonl";

/// Writes `corpus.jsonl`, `queries.jsonl`, `qrels.tsv` and `train.jsonl`.
pub fn write(data: &SyntheticData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(CORPUS_FILE), &data.corpus)?;
    write_jsonl(&dir.join(QUERIES_FILE), &data.queries)?;
    write_jsonl(&dir.join(TRAIN_FILE), &data.train)?;
    data.qrels.save(&dir.join(QRELS_FILE))
}
