//! Measurements: per-layer alignment, the answer oracle and its error
//! taxonomy, cross-language answer consistency, and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::cosine;
use crate::corpus::{EncodedPair, FactBase, Lang, TwinLanguageSpec};
use crate::error::{Error, Result};
use crate::model::{pool_values, EmbeddingMode, Model, TokenBatch};
use crate::trainer::PAD_ID;
use crate::xcot::AnswerRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    /// 1-based block index.
    pub layer: usize,
    pub mean_sim: f64,
    /// Sample variance over pairs.
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub layers: Vec<LayerAlignment>,
    pub n_pairs: usize,
}

impl AlignmentReport {
    pub fn last(&self) -> &LayerAlignment {
        self.layers.last().expect("at least one layer")
    }
}

/// Per-pair cosine similarity of mean-pooled states, for every layer.
pub fn pair_similarities(model: &Model, pairs: &[EncodedPair], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut per_layer = vec![Vec::with_capacity(pairs.len()); model.config.n_layers];
    for chunk in pairs.chunks(batch_size.max(1)) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|p| p.a.clone()).chain(chunk.iter().map(|p| p.b.clone())).collect();
        let batch = TokenBatch::from_sequences(&seqs, PAD_ID)?;
        let (hidden, _) = model.forward_values(&batch, true)?;
        let t = chunk.len();
        for (l, h) in hidden.iter().enumerate() {
            let pooled = pool_values(h, &batch, EmbeddingMode::MeanPool)?;
            per_layer[l].extend((0..t).map(|i| cosine(&pooled[i], &pooled[t + i])));
        }
    }
    Ok(per_layer)
}

/// Mean and sample variance of paired-sentence similarity per layer, over
/// the first `n` pairs.
pub fn alignment_curve(model: &Model, pairs: &[EncodedPair], n: usize) -> Result<AlignmentReport> {
    if n < 2 {
        return Err(Error::input(format!("alignment needs at least 2 pairs, got {n}")));
    }
    if pairs.len() < n {
        return Err(Error::input(format!("{n} alignment pairs requested, {} available", pairs.len())));
    }
    let sims = pair_similarities(model, &pairs[..n], 128)?;
    let layers = sims
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let (mean, variance) = mean_and_sample_variance(s);
            LayerAlignment { layer: l + 1, mean_sim: mean, variance }
        })
        .collect();
    Ok(AlignmentReport { layers, n_pairs: n })
}

pub fn mean_and_sample_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() < 2 { 0.0 } else { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) };
    (mean, var)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    HallucinationFree,
    Incomplete,
    FactualError,
    Irrelevant,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::HallucinationFree => "hallucination-free",
            Verdict::Incomplete => "incomplete",
            Verdict::FactualError => "factual-error",
            Verdict::Irrelevant => "irrelevant",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAJudgment {
    pub fact_id: usize,
    pub verdict: Verdict,
}

/// Base-language words of `answer`; words of the other language are dropped.
pub fn canonical_words<'a>(answer: &'a [String], lang: Lang, spec: &'a TwinLanguageSpec) -> BTreeSet<&'a str> {
    answer.iter().filter_map(|w| spec.to_base(w, lang)).collect()
}

/// Object words named in `answer`, in base-language form.
pub fn canonical_objects(answer: &[String], lang: Lang, spec: &TwinLanguageSpec) -> BTreeSet<String> {
    canonical_words(answer, lang, spec)
        .into_iter()
        .filter(|w| spec.grammar.objects.iter().any(|o| o == w))
        .map(str::to_string)
        .collect()
}

/// Judge a target-language answer.
pub fn judge_answer(answer_tgt: &[String], fact_id: usize, facts: &FactBase, spec: &TwinLanguageSpec) -> Result<QAJudgment> {
    judge_answer_in(answer_tgt, Lang::B, fact_id, facts, spec)
}

/// Set-based oracle. Any object word other than the gold one is a factual
/// error; the gold object alone is hallucination-free; no object but the
/// question's subject or relation is incomplete; anything else is irrelevant.
pub fn judge_answer_in(
    answer: &[String],
    lang: Lang,
    fact_id: usize,
    facts: &FactBase,
    spec: &TwinLanguageSpec,
) -> Result<QAJudgment> {
    let fact = facts.get(fact_id).ok_or_else(|| Error::input(format!("unknown fact {fact_id}")))?;
    let words = canonical_words(answer, lang, spec);
    let g = &spec.grammar;
    let gold = g.objects[fact.object].as_str();
    let objects: Vec<&str> = words.iter().copied().filter(|w| g.objects.iter().any(|o| o == w)).collect();
    let verdict = if objects.iter().any(|&o| o != gold) {
        Verdict::FactualError
    } else if objects.contains(&gold) {
        Verdict::HallucinationFree
    } else if words.contains(g.subjects[fact.subject].as_str()) || words.contains(g.relations[fact.relation].as_str()) {
        Verdict::Incomplete
    } else {
        Verdict::Irrelevant
    };
    Ok(QAJudgment { fact_id, verdict })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub n: usize,
    pub rate: f64,
    pub free: usize,
    pub incomplete: usize,
    pub factual: usize,
    pub irrelevant: usize,
}

pub fn hallucination_free_rate(judgments: &[QAJudgment]) -> Result<RateSummary> {
    if judgments.is_empty() {
        return Err(Error::input("no judgments to score"));
    }
    let count = |v: Verdict| judgments.iter().filter(|j| j.verdict == v).count();
    let free = count(Verdict::HallucinationFree);
    Ok(RateSummary {
        n: judgments.len(),
        rate: free as f64 / judgments.len() as f64,
        free,
        incomplete: count(Verdict::Incomplete),
        factual: count(Verdict::FactualError),
        irrelevant: count(Verdict::Irrelevant),
    })
}

/// Percentile bootstrap interval for the mean of `hits`.
pub fn bootstrap_ci(hits: &[bool], resamples: usize, confidence: f64, seed: u64) -> Result<(f64, f64)> {
    if hits.is_empty() || resamples == 0 {
        return Err(Error::input("bootstrap needs data and at least one resample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hits.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| hits[rng.gen_range(0..n)]).count() as f64 / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok((at(alpha), at(1.0 - alpha)))
}

/// Answers of one arm in one language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageDump {
    pub lang: Lang,
    pub records: Vec<AnswerRecord>,
}

/// The final answer of a record: the target-language section when present,
/// otherwise the English one.
pub fn final_answer(r: &AnswerRecord) -> &[String] {
    if r.answer_tgt.is_empty() {
        &r.answer_en
    } else {
        &r.answer_tgt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Fraction of facts whose canonical object sets agree between each pair of
/// dumps. Every dump must cover the same facts.
pub fn consistency_matrix(dumps: &[LanguageDump], spec: &TwinLanguageSpec) -> Result<ConsistencyMatrix> {
    if dumps.len() < 2 {
        return Err(Error::input(format!("consistency needs at least 2 language dumps, got {}", dumps.len())));
    }
    let canon: Vec<BTreeMap<usize, BTreeSet<String>>> = dumps
        .iter()
        .map(|d| {
            let mut m = BTreeMap::new();
            for r in &d.records {
                let obj = canonical_objects(final_answer(r), d.lang, spec);
                if m.insert(r.fact_id, obj).is_some() {
                    return Err(Error::input(format!("fact {} answered twice in the {} dump", r.fact_id, d.lang)));
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let ids: BTreeSet<usize> = canon[0].keys().copied().collect();
    if ids.is_empty() {
        return Err(Error::input("answer dumps are empty"));
    }
    for (d, c) in dumps.iter().zip(&canon).skip(1) {
        if c.keys().copied().collect::<BTreeSet<_>>() != ids {
            return Err(Error::input(format!("the {} dump covers different facts", d.lang)));
        }
    }
    let k = dumps.len();
    let mut values = vec![vec![1.0; k]; k];
    for p in 0..k {
        for q in p + 1..k {
            let agree = ids.iter().filter(|id| canon[p][id] == canon[q][id]).count();
            let v = agree as f64 / ids.len() as f64;
            values[p][q] = v;
            values[q][p] = v;
        }
    }
    Ok(ConsistencyMatrix { labels: dumps.iter().map(|d| d.lang.to_string()).collect(), values })
}

/// One row of a rate table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub arm: String,
    pub language: String,
    pub rate: f64,
    pub incomplete: usize,
    pub factual: usize,
    pub irrelevant: usize,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateRow {
    pub fn new(arm: &str, lang: Lang, judgments: &[QAJudgment], resamples: usize, seed: u64) -> Result<Self> {
        let s = hallucination_free_rate(judgments)?;
        let hits: Vec<bool> = judgments.iter().map(|j| j.verdict == Verdict::HallucinationFree).collect();
        let (ci_low, ci_high) = bootstrap_ci(&hits, resamples, 0.95, seed)?;
        Ok(RateRow {
            arm: arm.to_string(),
            language: lang.to_string(),
            rate: s.rate,
            incomplete: s.incomplete,
            factual: s.factual,
            irrelevant: s.irrelevant,
            n: s.n,
            ci_low,
            ci_high,
        })
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_alignment_csv(path: &Path, report: &AlignmentReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["layer", "mean_sim", "variance"])?;
    for l in &report.layers {
        w.write_record([l.layer.to_string(), format!("{:?}", l.mean_sim), format!("{:?}", l.variance)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_alignment_csv(path: &Path) -> Result<AlignmentReport> {
    let mut r = csv::Reader::from_path(path)?;
    let layers: Vec<LayerAlignment> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(AlignmentReport { layers, n_pairs: 0 })
}

pub fn write_rates_csv(path: &Path, rows: &[RateRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["arm", "language", "rate", "incomplete", "factual", "irrelevant", "n", "ci_low", "ci_high"])?;
    for r in rows {
        w.write_record([
            r.arm.clone(),
            r.language.clone(),
            format!("{:?}", r.rate),
            r.incomplete.to_string(),
            r.factual.to_string(),
            r.irrelevant.to_string(),
            r.n.to_string(),
            format!("{:?}", r.ci_low),
            format!("{:?}", r.ci_high),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rates_csv(path: &Path) -> Result<Vec<RateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Square CSV with language labels on both axes.
pub fn write_consistency_csv(path: &Path, m: &ConsistencyMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec![String::new()];
    header.extend(m.labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in m.labels.iter().zip(&m.values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format rows for plotting: one value per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub report: String,
    pub series: String,
    pub x: String,
    pub metric: String,
    pub value: f64,
}

pub fn alignment_tidy(series: &str, report: &AlignmentReport) -> Vec<TidyRow> {
    report
        .layers
        .iter()
        .flat_map(|l| {
            [("mean_sim", l.mean_sim), ("variance", l.variance)].map(|(metric, value)| TidyRow {
                report: "alignment".into(),
                series: series.into(),
                x: l.layer.to_string(),
                metric: metric.into(),
                value,
            })
        })
        .collect()
}

pub fn rates_tidy(rows: &[RateRow]) -> Vec<TidyRow> {
    rows.iter()
        .flat_map(|r| {
            [
                ("rate", r.rate),
                ("incomplete", r.incomplete as f64),
                ("factual", r.factual as f64),
                ("irrelevant", r.irrelevant as f64),
                ("ci_low", r.ci_low),
                ("ci_high", r.ci_high),
            ]
            .map(|(metric, value)| TidyRow {
                report: "rates".into(),
                series: r.arm.clone(),
                x: r.language.clone(),
                metric: metric.into(),
                value,
            })
        })
        .collect()
}

pub fn consistency_tidy(series: &str, m: &ConsistencyMatrix) -> Vec<TidyRow> {
    let mut out = Vec::new();
    for (p, row) in m.labels.iter().zip(&m.values) {
        for (q, &v) in m.labels.iter().zip(row) {
            out.push(TidyRow {
                report: "consistency".into(),
                series: series.into(),
                x: format!("{p}-{q}"),
                metric: "agreement".into(),
                value: v,
            });
        }
    }
    out
}

pub fn write_tidy_csv(path: &Path, rows: &[TidyRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
