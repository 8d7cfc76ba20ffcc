use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use pe_retrieval::calibration::{
    cast_ranking, ece, export_reliability, length_binned_metric, length_report_csv, LengthBinning,
};
use pe_retrieval::encoder::Vocabulary;
use pe_retrieval::index::{
    encode_corpus, ingest, load_index, load_queries, read_run, retrieve as run_queries, save_index,
    write_run, Index, RankedRun,
};
use pe_retrieval::metrics::{
    load_answers, metrics_csv, ndcg_at_k, ndcg_per_query, top_k_accuracy, MetricRow, Qrels, Truth,
};
use pe_retrieval::retrievers::{load_training_file, RetrieverKind, RetrieverModel};
use pe_retrieval::tensor::seeded_rng;
use pe_retrieval::trainer::{load_checkpoint, save_checkpoint, train as train_model, write_loss_log, Checkpoint};
use pe_retrieval::{synthetic, Error};

use crate::config::{Overrides, RunConfig, RunLayout};
use crate::{
    AnalyzeLengthsArgs, CalibrateArgs, EncodeArgs, EvaluateArgs, GenSyntheticArgs, RetrieveArgs, TrainArgs,
};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(&Overrides {
        run_name: a.run_name,
        output_dir: a.output_dir,
        seed: a.seed,
        method: a.method,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
    });
    let cfg = cfg.resolve()?;
    let examples = load_training_file(&cfg.train_file)?;
    let vocab = match &cfg.vocab_file {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(
            examples.iter().flat_map(|e| {
                [e.query.as_str(), e.positive.as_str()]
                    .into_iter()
                    .chain(e.negatives.iter().map(String::as_str))
            }),
            cfg.encoder.vocab_size,
        )?,
    };
    if vocab.len() > cfg.encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but encoder.vocab_size is {}",
            vocab.len(),
            cfg.encoder.vocab_size
        ))
        .into());
    }
    let layout = RunLayout::new(cfg.run_dir());
    layout.create()?;
    write_file(&layout.effective_config(), &cfg.to_toml()?)?;

    let spec = cfg.model_spec();
    let mut model = RetrieverModel::new(&spec, &mut seeded_rng(cfg.seed))?;
    let count = model.count_parameters();
    info!(
        "{} retriever, {}: {} of {} parameters trainable ({:.4}%)",
        cfg.retriever,
        cfg.pe.method,
        count.trainable,
        count.total,
        100.0 * count.fraction
    );
    let train_cfg = cfg.train_config();
    let report = train_model(&mut model, &vocab, &examples, &train_cfg, cfg.pe.method)?;
    write_loss_log(&layout.loss_log(), &report.epoch_losses)?;
    let ckpt = Checkpoint::new(spec, train_cfg, report.steps, model, vocab);
    save_checkpoint(&layout.checkpoint(), &ckpt)?;
    info!("wrote {}", layout.checkpoint().display());
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = ingest(&a.corpus)?;
    let index = encode_corpus(&corpus, &ckpt.model, &ckpt.vocab, a.workers)?;
    ensure_parent(&a.out)?;
    save_index(&index, &a.out)?;
    info!("encoded {} documents into {}", index.len(), a.out.display());
    Ok(())
}

fn index_kind(index: &Index) -> RetrieverKind {
    match index {
        Index::Dense(_) => RetrieverKind::Dense,
        Index::Token(_) => RetrieverKind::Late,
    }
}

pub fn retrieve(a: RetrieveArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let kind = ckpt.model.kind();
    if let Some(want) = a.retriever {
        if want != kind {
            return Err(Error::Usage(format!("checkpoint holds a {kind} retriever, not {want}")).into());
        }
    }
    if a.k == 0 {
        return Err(Error::Usage("--k must be at least 1".into()).into());
    }
    let index = match (&a.index, &a.corpus) {
        (Some(p), _) => {
            let index = load_index(p)?;
            if index_kind(&index) != kind {
                return Err(Error::Usage(format!(
                    "index {} was built by a {} retriever but the checkpoint is {kind}",
                    p.display(),
                    index_kind(&index)
                ))
                .into());
            }
            index
        }
        (None, Some(c)) => encode_corpus(&ingest(c)?, &ckpt.model, &ckpt.vocab, a.workers)?,
        (None, None) => return Err(Error::Usage("need --corpus or --index".into()).into()),
    };
    let queries = load_queries(&a.queries)?;
    let run = run_queries(&queries, &ckpt.model, &ckpt.vocab, &index, a.k, a.workers)?;
    let tag = a
        .tag
        .unwrap_or_else(|| format!("{kind}-{}", ckpt.header.pe_method));
    ensure_parent(&a.out)?;
    write_run(&run, &tag, &a.out)?;
    info!("wrote {} queries to {}", run.len(), a.out.display());
    Ok(())
}

fn shared_queries(run: &RankedRun, qrels: &Qrels) -> usize {
    run.keys().filter(|q| qrels.judged(q).is_some()).count()
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.metrics.is_empty() {
        return Err(Error::Usage("--metrics needs at least one metric".into()).into());
    }
    for m in &a.metrics {
        if !matches!(m.as_str(), "ndcg" | "top_k_accuracy") {
            return Err(Error::Usage(format!("unknown metric {m:?}; use ndcg or top_k_accuracy")).into());
        }
    }
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Error::Usage("--k needs positive cutoffs".into()).into());
    }
    let run = read_run(&a.run)?;
    let qrels = Qrels::load(&a.qrels)?;
    if shared_queries(&run, &qrels) == 0 {
        bail!(
            "run {} and qrels {} have no query in common",
            a.run.display(),
            a.qrels.display()
        );
    }
    let answers = a.answers.as_deref().map(load_answers).transpose()?;
    let corpus: HashMap<String, String> = match &a.corpus {
        Some(p) => ingest(p)?.into_iter().map(|d| (d.id.clone(), d.encoder_text())).collect(),
        None => HashMap::new(),
    };
    let mut rows = Vec::new();
    for m in &a.metrics {
        for &k in &a.k {
            rows.push(match m.as_str() {
                "ndcg" => {
                    let r = ndcg_at_k(&run, &qrels, k)?;
                    if r.unjudged > 0 {
                        warn!("ndcg@{k}: {} run queries have no judgments", r.unjudged);
                    }
                    MetricRow {
                        metric: m.clone(),
                        k,
                        value: r.value,
                        num_queries: r.num_queries,
                    }
                }
                _ => {
                    let (truth, n) = match &answers {
                        Some(ans) => (
                            Truth::Answers {
                                answers: ans,
                                corpus: &corpus,
                            },
                            ans.len(),
                        ),
                        None => (Truth::Qrels(&qrels), qrels.num_queries()),
                    };
                    MetricRow {
                        metric: m.clone(),
                        k,
                        value: top_k_accuracy(&run, &truth, k)?,
                        num_queries: n,
                    }
                }
            });
        }
    }
    let csv = metrics_csv(&rows);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let run = read_run(&a.run)?;
    let qrels = Qrels::load(&a.qrels)?;
    if shared_queries(&run, &qrels) == 0 {
        bail!("run and qrels have no query in common");
    }
    let samples = cast_ranking(&run, &qrels)?;
    if samples.is_empty() {
        bail!("no query has five results with a relevant document among them");
    }
    let report = ece(&samples, a.bins)?;
    ensure_parent(&a.out)?;
    export_reliability(&report, &a.out)?;
    println!("ece={:.6} samples={} bins={}", report.ece, samples.len(), a.bins);
    Ok(())
}

pub fn analyze_lengths(a: AnalyzeLengthsArgs) -> Result<()> {
    if a.k == 0 || a.bins == 0 {
        return Err(Error::Usage("--k and --bins must be positive".into()).into());
    }
    let run = read_run(&a.run)?;
    let qrels = Qrels::load(&a.qrels)?;
    let queries: BTreeMap<String, String> =
        load_queries(&a.queries)?.into_iter().map(|q| (q.id, q.text)).collect();
    let per_query = ndcg_per_query(&run, &qrels, a.k)?;
    if per_query.is_empty() {
        bail!("no judged query with a relevant document appears in the run");
    }
    let binning = if a.equal_width {
        LengthBinning::EqualWidth
    } else {
        LengthBinning::Quantile
    };
    let report = length_binned_metric(&per_query, &queries, a.bins, binning)?;
    write_file(&a.out, &length_report_csv(&report))?;
    Ok(())
}

pub fn gen_synthetic(a: GenSyntheticArgs) -> Result<()> {
    let data = synthetic::generate(a.num_pairs, a.vocab_size, a.noise, a.seed)?;
    synthetic::write(&data, &a.out_dir)?;
    info!("wrote {} pairs to {}", a.num_pairs, a.out_dir.display());
    Ok(())
}
