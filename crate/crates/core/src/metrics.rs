//! Top-k accuracy and nDCG@k over ranked runs, plus qrels/answer loading.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::encoder::normalize;
use crate::error::{Error, Result};
use crate::index::RankedRun;

const QRELS_HEADER: &str = "query-id\tcorpus-id\tscore";

/// Graded relevance judgments: query → doc → grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels(BTreeMap<String, BTreeMap<String, u32>>);

impl Qrels {
    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) -> Result<()> {
        let docs = self.0.entry(query.to_string()).or_default();
        if docs.insert(doc.to_string(), grade).is_some() {
            return Err(Error::Config(format!("duplicate judgment for ({query}, {doc})")));
        }
        Ok(())
    }

    pub fn grade(&self, query: &str, doc: &str) -> u32 {
        self.0.get(query).and_then(|d| d.get(doc)).copied().unwrap_or(0)
    }

    pub fn judged(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.0.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.0.len()
    }

    /// Number of (query, doc) judgments.
    pub fn len(&self) -> usize {
        self.0.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == QRELS_HEADER => {}
            _ => return Err(Error::parse(path, 1, format!("expected header {QRELS_HEADER:?}"))),
        }
        let mut q = Qrels::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |d: String| Error::parse(path, i + 1, d);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0].is_empty() || f[1].is_empty() {
                return Err(err("expected query-id, corpus-id and score".into()));
            }
            let grade: u32 = f[2]
                .trim()
                .parse()
                .map_err(|_| err(format!("score {:?} is not a non-negative integer", f[2])))?;
            q.insert(f[0], f[1], grade).map_err(|e| err(e.to_string()))?;
        }
        Ok(q)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{QRELS_HEADER}\n");
        for (q, docs) in &self.0 {
            for (d, g) in docs {
                writeln!(out, "{q}\t{d}\t{g}").expect("string write");
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Query id → acceptable answer strings.
pub type AnswerSet = BTreeMap<String, Vec<String>>;

#[derive(Deserialize)]
struct AnswerRow {
    #[serde(rename = "_id")]
    id: String,
    answers: Vec<String>,
}

/// JSON lines `{"_id": …, "answers": [...]}`; every list must be non-empty.
pub fn load_answers(path: &Path) -> Result<AnswerSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = AnswerSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: AnswerRow = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if row.answers.is_empty() {
            return Err(Error::parse(path, i + 1, "empty answer list"));
        }
        if out.insert(row.id.clone(), row.answers).is_some() {
            return Err(Error::parse(path, i + 1, format!("duplicate query {}", row.id)));
        }
    }
    Ok(out)
}

/// What counts as a hit for top-k accuracy.
pub enum Truth<'a> {
    /// Any judged document with grade > 0.
    Qrels(&'a Qrels),
    /// Any document whose normalized text contains a normalized answer.
    Answers {
        answers: &'a AnswerSet,
        /// doc id → document text
        corpus: &'a HashMap<String, String>,
    },
}

fn squash(s: &str) -> String {
    normalize(s).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of judged queries with a hit in their top `k`. Queries absent
/// from the run count as misses.
pub fn top_k_accuracy(run: &RankedRun, truth: &Truth<'_>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let empty = Vec::new();
    let top = |q: &str| run.get(q).unwrap_or(&empty).iter().take(k);
    let (hits, n) = match truth {
        Truth::Qrels(qrels) => {
            if qrels.is_empty() {
                return Err(Error::Usage("no relevance judgments".into()));
            }
            let hits = qrels
                .queries()
                .filter(|q| top(q).any(|(d, _)| qrels.grade(q, d) > 0))
                .count();
            (hits, qrels.num_queries())
        }
        Truth::Answers { answers, corpus } => {
            if answers.is_empty() {
                return Err(Error::Usage("no answers".into()));
            }
            let hits = answers
                .iter()
                .filter(|(q, ans)| {
                    let ans: Vec<String> = ans.iter().map(|a| squash(a)).filter(|a| !a.is_empty()).collect();
                    top(q).any(|(d, _)| {
                        corpus.get(d).is_some_and(|text| {
                            let text = squash(text);
                            ans.iter().any(|a| text.contains(a.as_str()))
                        })
                    })
                })
                .count();
            (hits, answers.len())
        }
    };
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdcgReport {
    pub value: f64,
    /// Queries contributing to the mean.
    pub num_queries: usize,
    /// Run queries with no judgments at all.
    pub unjudged: usize,
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// Per-query nDCG@k for every run query with at least one positive
/// judgment.
pub fn ndcg_per_query(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<BTreeMap<String, f64>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut out = BTreeMap::new();
    for (q, list) in run {
        let Some(judged) = qrels.judged(q) else { continue };
        let mut ideal: Vec<u32> = judged.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / discount(i + 1))
            .sum();
        if idcg == 0.0 {
            continue;
        }
        let dcg: f64 = list
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (d, _))| gain(qrels.grade(q, d)) / discount(i + 1))
            .sum();
        out.insert(q.clone(), dcg / idcg);
    }
    Ok(out)
}

/// Mean nDCG@k with exponential gain `2^rel − 1` and `log₂(rank + 1)`
/// discount. Queries whose judgments are all zero are left out of the
/// mean; run queries missing from the qrels are tallied as unjudged.
pub fn ndcg_at_k(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<NdcgReport> {
    let per = ndcg_per_query(run, qrels, k)?;
    let unjudged = run.keys().filter(|q| qrels.judged(q).is_none()).count();
    let value = if per.is_empty() {
        0.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    };
    Ok(NdcgReport {
        value,
        num_queries: per.len(),
        unjudged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub num_queries: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,k,value,num_queries\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{}", r.metric, r.k, r.value, r.num_queries).expect("string write");
    }
    out
}
