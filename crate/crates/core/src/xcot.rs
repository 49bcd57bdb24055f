//! Test-time decoding: English reasoning then a target-language answer, or a
//! direct answer with no intermediate sections.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Lang, Sections, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, TokenBatch};
use crate::trainer::PAD_ID;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// Sample at this temperature instead of taking the argmax.
    pub temperature: Option<f64>,
    pub seed: u64,
    /// Sequences decoded together.
    pub batch_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { max_new_tokens: 24, temperature: None, seed: 0, batch_size: 64 }
    }
}

/// A generated chain-of-thought answer and its sections.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct XCoTOutput {
    /// Prompt plus generated tokens.
    pub raw: Vec<String>,
    pub reasoning_en: Vec<String>,
    pub answer_en: Vec<String>,
    pub answer_tgt: Vec<String>,
    pub parse_ok: bool,
}

impl XCoTOutput {
    /// Sections are kept even when the parse fails.
    pub fn parse(raw: Vec<String>) -> Self {
        let s = Sections::split(&raw);
        let parse_ok =
            s.well_formed && !s.reasoning.is_empty() && !s.answer_en.is_empty() && !s.answer_tgt.is_empty();
        XCoTOutput { raw, reasoning_en: s.reasoning, answer_en: s.answer_en, answer_tgt: s.answer_tgt, parse_ok }
    }
}

/// Continue every prompt until `<eos>` or the length cap. Returns only the
/// generated tokens, `<eos>` included when produced.
///
/// Prompts are right-padded; with causal attention and masked padding keys
/// the logits at each prompt's last real position do not see the padding.
pub fn generate(model: &Model, prompts: &[Vec<usize>], cfg: &DecodeConfig, eos: usize) -> Result<Vec<Vec<usize>>> {
    if prompts.iter().any(Vec::is_empty) {
        return Err(Error::input("empty prompt"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![Vec::new(); prompts.len()];
    let max_len = model.config.max_seq_len;
    for chunk_start in (0..prompts.len()).step_by(cfg.batch_size.max(1)) {
        let chunk_end = (chunk_start + cfg.batch_size.max(1)).min(prompts.len());
        let mut live: Vec<usize> = (chunk_start..chunk_end).collect();
        let mut seqs: Vec<Vec<usize>> = prompts[chunk_start..chunk_end].to_vec();
        for _ in 0..cfg.max_new_tokens {
            live.retain(|&i| {
                let s = &seqs[i - chunk_start];
                s.len() < max_len && out[i].last() != Some(&eos)
            });
            if live.is_empty() {
                break;
            }
            let batch_seqs: Vec<Vec<usize>> = live.iter().map(|&i| seqs[i - chunk_start].clone()).collect();
            let batch = TokenBatch::from_sequences(&batch_seqs, PAD_ID)?;
            let (_, logits) = model.forward_values(&batch, true)?;
            let v = logits.last_dim();
            for (row, &i) in live.iter().enumerate() {
                let pos = batch_seqs[row].len() - 1;
                let scores = logits.row(row * batch.len() + pos);
                let next = pick(scores, cfg.temperature, &mut rng)?;
                debug_assert!(next < v);
                seqs[i - chunk_start].push(next);
                out[i].push(next);
            }
        }
    }
    Ok(out)
}

fn pick(scores: &[f64], temperature: Option<f64>, rng: &mut ChaCha8Rng) -> Result<usize> {
    match temperature {
        None => Ok(argmax(scores)),
        Some(t) if t > 0.0 => {
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| ((s - m) / t).exp()).collect();
            let dist = WeightedIndex::new(&w).map_err(|e| Error::numeric(format!("sampling weights: {e}")))?;
            Ok(dist.sample(rng))
        }
        Some(t) => Err(Error::config(format!("sampling temperature must be > 0, got {t}"))),
    }
}

/// Lowest index among ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_question(q: &[String]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::input("empty question"));
    }
    Ok(())
}

/// `<q> question <think_en>`: the model writes reasoning, then both answers.
pub fn xcot_prompt(question_tgt: &[String], vocab: &Vocabulary) -> Result<Vec<usize>> {
    check_question(question_tgt)?;
    let mut p = vec![vocab.special(corpus::Q)];
    p.extend(vocab.encode(question_tgt)?);
    p.push(vocab.special(corpus::THINK_EN));
    Ok(p)
}

/// `<q> question <ans_*>` with the answer delimiter of `lang`.
pub fn direct_prompt(question: &[String], lang: Lang, vocab: &Vocabulary) -> Result<Vec<usize>> {
    check_question(question)?;
    let mut p = vec![vocab.special(corpus::Q)];
    p.extend(vocab.encode(question)?);
    p.push(vocab.special(corpus::answer_delimiter(lang)));
    Ok(p)
}

pub fn decode_xcot_batch(
    model: &Model,
    vocab: &Vocabulary,
    questions: &[Vec<String>],
    cfg: &DecodeConfig,
) -> Result<Vec<XCoTOutput>> {
    let prompts: Vec<Vec<usize>> = questions.iter().map(|q| xcot_prompt(q, vocab)).collect::<Result<_>>()?;
    let gen = generate(model, &prompts, cfg, vocab.eos())?;
    Ok(prompts
        .into_iter()
        .zip(gen)
        .map(|(mut p, g)| {
            p.extend(g);
            XCoTOutput::parse(vocab.decode(&p))
        })
        .collect())
}

pub fn decode_xcot(model: &Model, vocab: &Vocabulary, question_tgt: &[String], cfg: &DecodeConfig) -> Result<XCoTOutput> {
    Ok(decode_xcot_batch(model, vocab, &[question_tgt.to_vec()], cfg)?.remove(0))
}

/// Generated answers without the trailing `<eos>`.
pub fn decode_direct_batch(
    model: &Model,
    vocab: &Vocabulary,
    questions: &[Vec<String>],
    lang: Lang,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<String>>> {
    let prompts: Vec<Vec<usize>> =
        questions.iter().map(|q| direct_prompt(q, lang, vocab)).collect::<Result<_>>()?;
    let eos = vocab.eos();
    Ok(generate(model, &prompts, cfg, eos)?
        .into_iter()
        .map(|mut g| {
            if g.last() == Some(&eos) {
                g.pop();
            }
            vocab.decode(&g)
        })
        .collect())
}

pub fn decode_direct(
    model: &Model,
    vocab: &Vocabulary,
    question: &[String],
    lang: Lang,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    Ok(decode_direct_batch(model, vocab, &[question.to_vec()], lang, cfg)?.remove(0))
}

/// One line of an answer dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRecord {
    pub fact_id: usize,
    pub arm: String,
    pub parse_ok: bool,
    pub answer_tgt: Vec<String>,
    pub answer_en: Vec<String>,
    pub reasoning_en: Vec<String>,
}

impl AnswerRecord {
    pub fn from_xcot(fact_id: usize, arm: &str, out: XCoTOutput) -> Self {
        AnswerRecord {
            fact_id,
            arm: arm.to_string(),
            parse_ok: out.parse_ok,
            answer_tgt: out.answer_tgt,
            answer_en: out.answer_en,
            reasoning_en: out.reasoning_en,
        }
    }

    /// A direct answer sits in `answer_tgt`; the other sections stay empty.
    pub fn from_direct(fact_id: usize, arm: &str, answer: Vec<String>) -> Self {
        AnswerRecord {
            fact_id,
            arm: arm.to_string(),
            parse_ok: !answer.is_empty(),
            answer_tgt: answer,
            answer_en: Vec::new(),
            reasoning_en: Vec::new(),
        }
    }
}
