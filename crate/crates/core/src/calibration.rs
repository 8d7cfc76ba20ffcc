//! Expected calibration error over top-5 softmax confidences, reliability
//! diagrams, and performance binned by query length.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::index::RankedRun;
use crate::metrics::Qrels;

pub const TOP: usize = 5;
pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_LENGTH_BINS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CalSample {
    pub query_id: String,
    pub confidence: f64,
    pub correct: bool,
}

/// One sample per query: the softmax probability of the rank-1 document
/// among the top five raw scores, correct iff that document is relevant.
/// Queries with fewer than five results, or with no relevant document in
/// the top five, are skipped.
pub fn cast_ranking(run: &RankedRun, qrels: &Qrels) -> Result<Vec<CalSample>> {
    if !run.keys().any(|q| qrels.judged(q).is_some()) {
        return Err(Error::Usage("run and qrels share no queries".into()));
    }
    let mut out = Vec::new();
    for (q, list) in run {
        if list.len() < TOP || qrels.judged(q).is_none() {
            continue;
        }
        let top = &list[..TOP];
        if !top.iter().any(|(d, _)| qrels.grade(q, d) > 0) {
            continue;
        }
        let max = top.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = top.iter().map(|x| (x.1 - max).exp()).sum();
        out.push(CalSample {
            query_id: q.clone(),
            confidence: (top[0].1 - max).exp() / z,
            correct: qrels.grade(q, &top[0].0) > 0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// 0 for empty bins.
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<CalBin>,
    pub ece: f64,
}

/// `⌊c·M⌋`, so a boundary lands in the higher bin, with 1.0 in the last.
pub fn bin_of(confidence: f64, num_bins: usize) -> usize {
    ((confidence * num_bins as f64).floor() as usize).min(num_bins - 1)
}

fn ece_of(bins: &[CalBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

pub fn ece(samples: &[CalSample], num_bins: usize) -> Result<CalibrationReport> {
    if num_bins == 0 {
        return Err(Error::Config("number of calibration bins must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::Usage("no calibration samples".into()));
    }
    let mut conf = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut count = vec![0usize; num_bins];
    for s in samples {
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(Error::Numeric {
                op: "ece",
                detail: format!("confidence {} outside [0, 1]", s.confidence),
            });
        }
        let b = bin_of(s.confidence, num_bins);
        conf[b] += s.confidence;
        hits[b] += usize::from(s.correct);
        count[b] += 1;
    }
    let bins: Vec<CalBin> = (0..num_bins)
        .map(|m| {
            let c = count[m];
            let (mean_confidence, accuracy) = if c == 0 {
                (0.0, 0.0)
            } else {
                (conf[m] / c as f64, hits[m] as f64 / c as f64)
            };
            CalBin {
                lo: m as f64 / num_bins as f64,
                hi: (m + 1) as f64 / num_bins as f64,
                count: c,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    let ece = ece_of(&bins);
    Ok(CalibrationReport { bins, ece })
}

const RELIABILITY_HEADER: &str = "bin_lo,bin_hi,count,mean_confidence,accuracy";

/// Values are written in shortest round-trip form so a re-import is exact.
pub fn reliability_csv(report: &CalibrationReport) -> String {
    let mut out = format!("{RELIABILITY_HEADER}\n");
    for b in &report.bins {
        writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.count, b.mean_confidence, b.accuracy)
            .expect("string write");
    }
    out
}

/// Reliability diagram: accuracy bars per bin against the y = x diagonal.
pub fn reliability_svg(report: &CalibrationReport) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let x = |v: f64| PAD + v * SIZE;
    let y = |v: f64| PAD + (1.0 - v) * SIZE;
    let mut s = String::new();
    let total = SIZE + 2.0 * PAD;
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#)
        .expect("string write");
    for b in report.bins.iter().filter(|b| b.count > 0) {
        writeln!(
            s,
            r#"<rect class="accuracy" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="steelblue" stroke="navy"/>"#,
            x(b.lo),
            y(b.accuracy),
            (b.hi - b.lo) * SIZE,
            b.accuracy * SIZE
        )
        .expect("string write");
    }
    writeln!(
        s,
        r#"<polyline class="diagonal" points="{},{} {},{}" fill="none" stroke="gray" stroke-dasharray="4 4"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">confidence</text>"#,
        PAD + SIZE / 2.0,
        total - 10.0
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="14" y="{}" font-size="14" transform="rotate(-90 14 {})" text-anchor="middle">accuracy</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">ECE = {:.4}</text>"#,
        PAD + SIZE / 2.0,
        report.ece
    )
    .expect("string write");
    s.push_str("</svg>\n");
    s
}

/// Writes `<path>` as CSV and the diagram next to it with an `.svg`
/// extension.
pub fn export_reliability(report: &CalibrationReport, path: &Path) -> Result<()> {
    fs::write(path, reliability_csv(report)).map_err(|e| Error::io(path, e))?;
    let svg = path.with_extension("svg");
    fs::write(&svg, reliability_svg(report)).map_err(|e| Error::io(&svg, e))
}

/// Reads a reliability CSV back and recomputes its ECE.
pub fn import_reliability(path: &Path) -> Result<CalibrationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RELIABILITY_HEADER => {}
        _ => return Err(Error::parse(path, 1, format!("expected header {RELIABILITY_HEADER:?}"))),
    }
    let mut bins = Vec::new();
    for (i, line) in lines {
        let err = || Error::parse(path, i + 1, "malformed reliability row");
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err());
        bins.push(CalBin {
            lo: num(f[0])?,
            hi: num(f[1])?,
            count: f[2].parse().map_err(|_| err())?,
            mean_confidence: num(f[3])?,
            accuracy: num(f[4])?,
        });
    }
    let ece = ece_of(&bins);
    Ok(CalibrationReport { bins, ece })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthBinning {
    /// Equal-count bins over queries sorted by length.
    #[default]
    Quantile,
    /// Equal-width bins over the observed length range.
    EqualWidth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBin {
    pub length_lo: usize,
    pub length_hi: usize,
    pub num_queries: usize,
    pub mean_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBinReport {
    pub bins: Vec<LengthBin>,
    pub warnings: Vec<String>,
}

/// Whitespace token count of the raw query text.
pub fn query_length(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Groups the queries that have a metric value by length and averages the
/// metric per group. Queries without text are an error; queries without a
/// metric are ignored.
pub fn length_binned_metric(
    per_query: &BTreeMap<String, f64>,
    queries: &BTreeMap<String, String>,
    num_bins: usize,
    binning: LengthBinning,
) -> Result<LengthBinReport> {
    if num_bins == 0 {
        return Err(Error::Config("number of length bins must be positive".into()));
    }
    let mut items: Vec<(usize, &str, f64)> = per_query
        .iter()
        .map(|(q, &m)| {
            queries
                .get(q)
                .map(|t| (query_length(t), q.as_str(), m))
                .ok_or_else(|| Error::Usage(format!("no text for query {q}")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Usage("no queries to bin".into()));
    }
    items.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut warnings = Vec::new();
    let mut bins_wanted = num_bins;
    if items.len() < num_bins {
        let msg = format!(
            "only {} queries for {num_bins} bins; using {} bins",
            items.len(),
            items.len()
        );
        warn!("{msg}");
        warnings.push(msg);
        bins_wanted = items.len();
    }
    let groups: Vec<&[(usize, &str, f64)]> = match binning {
        LengthBinning::Quantile => {
            // first n % b bins get one extra query
            let (n, b) = (items.len(), bins_wanted);
            let mut out = Vec::with_capacity(b);
            let mut start = 0;
            for i in 0..b {
                let size = n / b + usize::from(i < n % b);
                out.push(&items[start..start + size]);
                start += size;
            }
            out
        }
        LengthBinning::EqualWidth => {
            let (lo, hi) = (items[0].0, items[items.len() - 1].0);
            let width = (hi - lo + 1) as f64 / bins_wanted as f64;
            let mut out = Vec::with_capacity(bins_wanted);
            let mut start = 0;
            for i in 0..bins_wanted {
                let end = if i + 1 == bins_wanted {
                    items.len()
                } else {
                    let limit = lo as f64 + width * (i + 1) as f64;
                    start + items[start..].iter().take_while(|x| (x.0 as f64) < limit).count()
                };
                out.push(&items[start..end]);
                start = end;
            }
            out
        }
    };
    let bins = groups
        .into_iter()
        .map(|g| LengthBin {
            length_lo: g.first().map_or(0, |x| x.0),
            length_hi: g.last().map_or(0, |x| x.0),
            num_queries: g.len(),
            mean_metric: if g.is_empty() {
                0.0
            } else {
                g.iter().map(|x| x.2).sum::<f64>() / g.len() as f64
            },
        })
        .collect();
    Ok(LengthBinReport { bins, warnings })
}

pub fn length_report_csv(report: &LengthBinReport) -> String {
    let mut out = String::from("length_lo,length_hi,num_queries,mean_metric\n");
    for b in &report.bins {
        writeln!(out, "{},{},{},{}", b.length_lo, b.length_hi, b.num_queries, b.mean_metric)
            .expect("string write");
    }
    out
}
