//! Corpus ingestion, offline encoding, exact top-k search and TREC run files.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::retrievers::{sim_dense, sim_maxsim, Representation, RetrieverModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    /// Text fed to the passage encoder.
    pub fn encoder_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

/// Per-query ranked `(doc_id, score)` lists, keyed by query id.
pub type RankedRun = BTreeMap<String, Vec<(String, f64)>>;

fn read_jsonl<T, F>(path: &Path, id_of: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> &str,
{
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let id = id_of(&row);
        if id.is_empty() {
            return Err(Error::parse(path, i + 1, "empty _id"));
        }
        if let Some(first) = seen.insert(id.to_string(), i + 1) {
            return Err(Error::parse(
                path,
                i + 1,
                format!("duplicate _id {id:?} (first seen on line {first})"),
            ));
        }
        out.push(row);
    }
    Ok(out)
}

/// Reads a JSON-lines corpus of `{"_id", "title", "text"}` in file order.
pub fn ingest(path: &Path) -> Result<Vec<Document>> {
    read_jsonl(path, |d: &Document| &d.id)
}

/// Reads a JSON-lines query file of `{"_id", "text"}`.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    read_jsonl(path, |q: &Query| &q.id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub doc_ids: Vec<String>,
    dim: usize,
    /// Row-major `[num_docs × dim]`.
    data: Vec<f64>,
}

impl DenseIndex {
    pub fn shape(&self) -> [usize; 2] {
        [self.doc_ids.len(), self.dim]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenIndex {
    pub doc_ids: Vec<String>,
    /// Unit-norm token embeddings per document.
    pub docs: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Index {
    Dense(DenseIndex),
    Token(TokenIndex),
}

impl Index {
    pub fn len(&self) -> usize {
        self.doc_ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn doc_ids(&self) -> &[String] {
        match self {
            Index::Dense(i) => &i.doc_ids,
            Index::Token(i) => &i.doc_ids,
        }
    }

    /// Scores of `query` against every document, in index order.
    pub fn score_all(&self, query: &Representation) -> Result<Vec<f64>> {
        match (self, query) {
            (Index::Dense(ix), Representation::Dense(q)) => {
                (0..ix.doc_ids.len()).map(|i| sim_dense(q, ix.row(i))).collect()
            }
            (Index::Token(ix), Representation::Tokens(q)) => {
                ix.docs.iter().map(|d| sim_maxsim(q, d)).collect()
            }
            _ => Err(Error::Usage("query representation does not match the index kind".into())),
        }
    }
}

/// Runs `f` over `items` split into contiguous chunks, one scoped thread per
/// chunk, and concatenates the results in order.
fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> Result<Vec<R>> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return f(items);
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| f(c))).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Internal("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

/// Encodes every document in eval mode. Row `i` belongs to `corpus[i]`;
/// the result does not depend on `workers`.
pub fn encode_corpus(
    corpus: &[Document],
    model: &RetrieverModel,
    vocab: &Vocabulary,
    workers: usize,
) -> Result<Index> {
    let reps = parallel_map(corpus, workers, |docs| {
        let mut session = model.session()?;
        docs.iter()
            .map(|d| session.encode_passage(&model.passage_ids(&d.encoder_text(), vocab)?))
            .collect()
    })?;
    let doc_ids = corpus.iter().map(|d| d.id.clone()).collect();
    Ok(match model.kind() {
        crate::retrievers::RetrieverKind::Dense => {
            let dim = model.encoder_config().d_model;
            let mut data = Vec::with_capacity(dim * corpus.len());
            for r in reps {
                let Representation::Dense(v) = r else {
                    return Err(Error::Internal("dense model produced token output".into()));
                };
                data.extend(v);
            }
            Index::Dense(DenseIndex { doc_ids, dim, data })
        }
        crate::retrievers::RetrieverKind::Late => {
            let docs = reps
                .into_iter()
                .map(|r| match r {
                    Representation::Tokens(t) => Ok(t),
                    Representation::Dense(_) => {
                        Err(Error::Internal("late model produced a pooled vector".into()))
                    }
                })
                .collect::<Result<_>>()?;
            Index::Token(TokenIndex { doc_ids, docs })
        }
    })
}

/// Descending score, then ascending doc id.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Exact top-`k` over the whole index.
pub fn search(query: &Representation, index: &Index, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let scores = index.score_all(query)?;
    let mut ranked: Vec<(String, f64)> = index.doc_ids().iter().cloned().zip(scores).collect();
    ranked.sort_by(rank_order);
    ranked.truncate(k);
    Ok(ranked)
}

/// Encodes and searches every query; parallel across queries.
pub fn retrieve(
    queries: &[Query],
    model: &RetrieverModel,
    vocab: &Vocabulary,
    index: &Index,
    k: usize,
    workers: usize,
) -> Result<RankedRun> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let lists = parallel_map(queries, workers, |qs| {
        let mut session = model.session()?;
        qs.iter()
            .map(|q| {
                let rep = session.encode_query(&model.query_ids(&q.text, vocab)?)?;
                search(&rep, index, k)
            })
            .collect()
    })?;
    Ok(queries.iter().map(|q| q.id.clone()).zip(lists).collect())
}

/// TREC run lines `qid Q0 docid rank score tag`, queries in id order, scores
/// with six decimals.
pub fn format_run(run: &RankedRun, tag: &str) -> String {
    let mut out = String::new();
    for (qid, list) in run {
        for (rank, (doc, score)) in list.iter().enumerate() {
            writeln!(out, "{qid} Q0 {doc} {} {score:.6} {tag}", rank + 1).expect("string write");
        }
    }
    out
}

pub fn write_run(run: &RankedRun, tag: &str, path: &Path) -> Result<()> {
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(Error::Config(format!("run tag {tag:?} must be one non-empty word")));
    }
    fs::write(path, format_run(run, tag)).map_err(|e| Error::io(path, e))
}

pub fn read_run(path: &Path) -> Result<RankedRun> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut run = RankedRun::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |d: String| Error::parse(path, i + 1, d);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| err(format!("bad rank {:?}", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| err(format!("bad score {:?}", f[4])))?;
        let list = run.entry(f[0].to_string()).or_default();
        if rank != list.len() + 1 {
            return Err(err(format!(
                "rank {rank} for query {} should be {}",
                f[0],
                list.len() + 1
            )));
        }
        list.push((f[2].to_string(), score));
    }
    Ok(run)
}

const INDEX_FORMAT: &str = "pe-retrieval-index";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    format: String,
    kind: crate::retrievers::RetrieverKind,
    doc_ids: Vec<String>,
    /// One shape per document (dense indexes store a single `[n, dim]`).
    shapes: Vec<Vec<usize>>,
}

/// Same layout as a checkpoint: 8-byte little-endian header length, JSON
/// header, little-endian f64 payload.
pub fn save_index(index: &Index, path: &Path) -> Result<()> {
    use crate::retrievers::RetrieverKind;
    let (kind, shapes, blobs): (_, Vec<Vec<usize>>, Vec<&[f64]>) = match index {
        Index::Dense(ix) => (RetrieverKind::Dense, vec![ix.shape().to_vec()], vec![&ix.data[..]]),
        Index::Token(ix) => (
            RetrieverKind::Late,
            ix.docs.iter().map(|t| t.shape().to_vec()).collect(),
            ix.docs.iter().map(Tensor::data).collect(),
        ),
    };
    let header = IndexHeader {
        format: INDEX_FORMAT.into(),
        kind,
        doc_ids: index.doc_ids().to_vec(),
        shapes,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for blob in blobs {
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<Index> {
    use crate::retrievers::RetrieverKind;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::Checkpoint(format!("{}: {d}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated index"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: IndexHeader = serde_json::from_slice(&bytes[8..start]).map_err(|e| bad(&e.to_string()))?;
    if header.format != INDEX_FORMAT {
        return Err(bad("not an index file"));
    }
    let mut values = bytes[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() - start != 8 * expected {
        return Err(bad("payload size does not match header"));
    }
    Ok(match header.kind {
        RetrieverKind::Dense => {
            let (n, dim) = match header.shapes.as_slice() {
                [s] if s.len() == 2 => (s[0], s[1]),
                _ => return Err(bad("dense index needs one [n, dim] shape")),
            };
            if n != header.doc_ids.len() {
                return Err(bad("row count differs from document count"));
            }
            Index::Dense(DenseIndex {
                doc_ids: header.doc_ids,
                dim,
                data: values.collect(),
            })
        }
        RetrieverKind::Late => {
            if header.shapes.len() != header.doc_ids.len() {
                return Err(bad("one shape per document expected"));
            }
            let docs = header
                .shapes
                .into_iter()
                .map(|s| {
                    let n = s.iter().product();
                    Tensor::new(s, values.by_ref().take(n).collect())
                })
                .collect::<Result<_>>()?;
            Index::Token(TokenIndex {
                doc_ids: header.doc_ids,
                docs,
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_keeps_order_and_rejects_duplicates() {
        let f = file(
            "{\"_id\":\"b\",\"title\":\"t\",\"text\":\"x\"}\n{\"_id\":\"a\",\"title\":\"\",\"text\":\"y\"}\n{\"_id\":\"c\",\"text\":\"z\"}\n",
        );
        let docs = ingest(f.path()).unwrap();
        assert_eq!(docs.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        let f = file("{\"_id\":\"a\",\"text\":\"x\"}\n{\"_id\":\"b\",\"text\":\"x\"}\n{\"_id\":\"a\",\"text\":\"y\"}\n");
        let msg = ingest(f.path()).unwrap_err().to_string();
        assert!(msg.contains("\"a\"") && msg.contains("line 1") && msg.contains(":3:"), "{msg}");
        let f = file("{\"_id\":\"a\",\"text\":\"x\"}\nnot json\n");
        assert!(ingest(f.path()).unwrap_err().to_string().contains(":2:"));
        assert!(ingest(file("").path()).unwrap().is_empty());
    }

    #[test]
    fn run_line_format() {
        let run = RankedRun::from([("q1".to_string(), vec![("d7".to_string(), 12.5)])]);
        assert_eq!(format_run(&run, "pt2"), "q1 Q0 d7 1 12.500000 pt2\n");
    }

    #[test]
    fn run_round_trip_orders_blocks_by_query() {
        let run = RankedRun::from([
            ("q2".to_string(), vec![("a".to_string(), 1.25), ("b".to_string(), -0.5)]),
            ("q1".to_string(), vec![("c".to_string(), 3.0)]),
        ]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_run(&run, "tag", f.path()).unwrap();
        let text = fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("q1 Q0 c 1 "));
        assert_eq!(read_run(f.path()).unwrap(), run);
        assert!(read_run(file("q1 Q0 d 2 1.0 t\n").path()).is_err());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let mut v = vec![("b".to_string(), 1.0), ("a".to_string(), 1.0), ("c".to_string(), 2.0)];
        v.sort_by(rank_order);
        assert_eq!(v.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["c", "a", "b"]);
    }

    #[test]
    fn search_clamps_k_and_handles_empty() {
        let ix = Index::Dense(DenseIndex {
            doc_ids: vec!["x".into(), "y".into()],
            dim: 2,
            data: vec![1.0, 0.0, 0.0, 1.0],
        });
        let q = Representation::Dense(vec![0.2, 0.9]);
        let r = search(&q, &ix, 10).unwrap();
        assert_eq!(r, vec![("y".to_string(), 0.9), ("x".to_string(), 0.2)]);
        let empty = Index::Dense(DenseIndex {
            doc_ids: vec![],
            dim: 2,
            data: vec![],
        });
        assert!(search(&q, &empty, 3).unwrap().is_empty());
        assert!(search(&q, &ix, 0).is_err());
    }
}
