//! Optimization loops: language-model pretraining, continued pretraining under
//! the contrastive curriculum, and instruction fine-tuning.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{self, make_batches, EncodedPair, Granularity, Sections, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{self, checkpoint, freeze_mask, FreezeMask, LayerSegments, Model, ParameterSet, Segment, TokenBatch};
use crate::objectives::{
    contrastive_loss, curriculum_step, joint_loss, joint_loss_node, ntp_loss, ntp_loss_value, ContrastiveConfig,
    CurriculumSchedule, LossBreakdown, NextTokenTargets, Stage,
};
use crate::tensor::Tensor;

/// Token id of `<pad>` in every vocabulary.
pub const PAD_ID: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Causal LM on unpaired text in both languages, before any alignment.
    Base,
    PretrainNtpOnly,
    PretrainCcl,
    Sft,
    SftXcot,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::PretrainNtpOnly => "pretrain-ntp-only",
            Phase::PretrainCcl => "pretrain-ccl",
            Phase::Sft => "sft",
            Phase::SftXcot => "sft-xcot",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("moment decays must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("adam eps must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Optimizer steps. Curriculum pretraining takes its step count from the
    /// schedule instead.
    #[serde(default)]
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Segments that receive updates.
    pub freeze: Vec<Segment>,
    /// Layer partition; an even three-way split when absent.
    #[serde(default)]
    pub segments: Option<LayerSegments>,
    /// Log a progress line every this many steps (0 disables).
    #[serde(default)]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(phase: Phase, steps: usize, batch_size: usize, freeze: Vec<Segment>) -> Self {
        TrainConfig {
            phase,
            optimizer: AdamConfig::default(),
            steps,
            batch_size,
            seed: 0,
            freeze,
            segments: None,
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.freeze.is_empty() {
            return Err(Error::config("freeze selection is empty"));
        }
        Ok(())
    }

    pub fn mask(&self, model: &Model) -> Result<FreezeMask> {
        let segments = match &self.segments {
            Some(s) => {
                s.validate(model.config.n_layers)?;
                s.clone()
            }
            None => LayerSegments::even(model.config.n_layers)?,
        };
        freeze_mask(&model.params, &segments, &self.freeze)
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Clip the global gradient norm, then take one Adam step on trainable
/// parameters. A parameter whose gradient is absent or all zero keeps its
/// value; its moments still decay.
pub fn apply_update(
    params: &mut ParameterSet,
    grads: &[Option<Tensor>],
    mask: &FreezeMask,
    state: &mut AdamState,
    cfg: &AdamConfig,
    step: usize,
) -> Result<UpdateStats> {
    if grads.len() != params.len() || mask.trainable().len() != params.len() || state.m.len() != params.len() {
        return Err(Error::input("parameters, gradients, mask and optimizer state disagree in length"));
    }
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g.as_ref().filter(|_| mask.is_trainable(i)) else { continue };
        if g.shape() != params.tensors()[i].shape() {
            return Err(Error::input(format!("gradient shape mismatch for {}", params.names()[i])));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {} at step {step}", params.names()[i])));
        }
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let clipped = grad_norm > cfg.clip_norm;
    let factor = if clipped { cfg.clip_norm / grad_norm } else { 1.0 };

    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in (0..params.len()).filter(|&i| mask.is_trainable(i)) {
        let g = grads[i].as_ref().filter(|g| g.data().iter().any(|&x| x != 0.0));
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let Some(g) = g else {
            m.iter_mut().for_each(|x| *x *= cfg.beta1);
            v.iter_mut().for_each(|x| *x *= cfg.beta2);
            continue;
        };
        let p = params.tensors_mut()[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j] * factor;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
        }
    }
    Ok(UpdateStats { grad_norm, clipped })
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    /// Curriculum stage, 0 outside curriculum pretraining.
    pub stage: u8,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub config: serde_json::Value,
    /// Held-out LM loss at named points of the run.
    pub heldout: Vec<(String, f64)>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    fn new(config: serde_json::Value) -> Self {
        RunRecord { steps: Vec::new(), checkpoints: Vec::new(), config, heldout: Vec::new(), wall_clock_secs: 0.0 }
    }

    pub fn heldout_at(&self, label: &str) -> Option<f64> {
        self.heldout.iter().find(|(l, _)| l == label).map(|&(_, v)| v)
    }

    /// Append `step,phase,stage,ntp,contrastive,total` rows.
    pub fn write_metrics<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.phase.to_string(),
                s.stage.to_string(),
                format!("{:?}", s.loss.ntp),
                format!("{:?}", s.loss.contrastive),
                format!("{:?}", s.loss.total),
            ])?;
        }
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 6] = ["step", "phase", "stage", "ntp", "contrastive", "total"];

/// Write one metrics CSV covering several records, in order.
pub fn write_metrics_csv(path: &Path, records: &[&RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in records {
        r.write_metrics(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Where checkpoints go; `None` disables them.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    /// Prefix for checkpoint stems, e.g. `"pretrain"`.
    pub prefix: String,
}

impl Outputs {
    pub fn none() -> Self {
        Outputs::default()
    }

    pub fn at(dir: impl Into<PathBuf>, prefix: &str) -> Self {
        Outputs { dir: Some(dir.into()), prefix: prefix.to_string() }
    }

    fn save(&self, model: &Model, label: &str, record: &mut RunRecord) -> Result<()> {
        if let Some(dir) = &self.dir {
            std::fs::create_dir_all(dir)?;
            let path = checkpoint::save(model, &dir.join(format!("{}_{label}", self.prefix)))?;
            log::info!("checkpoint {}", path.display());
            record.checkpoints.push(path);
        }
        Ok(())
    }
}

/// Mean next-token loss of `model` over `texts`, in batches of `batch_size`.
pub fn heldout_ntp_loss(model: &Model, texts: &[Vec<usize>], batch_size: usize, pad: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::input("held-out set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in texts.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_sequences(chunk, pad)?;
        let t = NextTokenTargets::new(&batch, None)?;
        let n = t.count();
        if n == 0 {
            continue;
        }
        let (_, logits) = model.forward_values(&batch, true)?;
        total += ntp_loss_value(&logits, &t.targets, &t.weights)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::input("held-out set has no next-token targets"));
    }
    Ok(total / count as f64)
}

struct Stepper<'a> {
    model: &'a mut Model,
    mask: FreezeMask,
    state: AdamState,
    cfg: AdamConfig,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a mut Model, cfg: &TrainConfig) -> Result<Self> {
        let mask = cfg.mask(model)?;
        let state = AdamState::new(&model.params);
        Ok(Stepper { model, mask, state, cfg: cfg.optimizer })
    }

    /// Build the loss with `build`, backpropagate, update.
    fn step<F>(&mut self, step: usize, build: F) -> Result<LossBreakdown>
    where
        F: FnOnce(&Model, &mut Graph, &model::BoundParams) -> Result<(crate::autodiff::NodeId, LossBreakdown)>,
    {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, Some(&self.mask));
        let (root, breakdown) = build(self.model, &mut g, &bound)?;
        let mut grads = g.backward(root).map_err(|e| match e {
            Error::Numeric(m) => Error::numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        let grads: Vec<Option<Tensor>> = bound
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, &n)| if bound.is_trainable(i) { grads.take(n) } else { None })
            .collect();
        apply_update(&mut self.model.params, &grads, &self.mask, &mut self.state, &self.cfg, step)?;
        Ok(breakdown)
    }
}

fn lm_loss(
    model: &Model,
    g: &mut Graph,
    bound: &model::BoundParams,
    seqs: &[Vec<usize>],
    masks: Option<&[Vec<bool>]>,
    pad: usize,
) -> Result<(crate::autodiff::NodeId, LossBreakdown)> {
    let batch = TokenBatch::from_sequences(seqs, pad)?;
    let flat_mask = masks.map(|ms| {
        let l = batch.len();
        let mut flat = vec![false; batch.batch() * l];
        for (b, m) in ms.iter().enumerate() {
            flat[b * l..b * l + m.len()].copy_from_slice(m);
        }
        flat
    });
    let targets = NextTokenTargets::new(&batch, flat_mask.as_deref())?;
    let out = model.forward(g, bound, &batch, true)?;
    let loss = ntp_loss(g, out.logits, &targets.targets, &targets.weights)?;
    let v = g.value(loss).item();
    Ok((loss, joint_loss(v, 0.0, 0.0)?))
}

fn log_progress(cfg: &TrainConfig, step: usize, total: usize, loss: &LossBreakdown) {
    if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
        log::info!(
            "{} step {}/{}: ntp {:.4} contrastive {:.4} total {:.4}",
            cfg.phase,
            step + 1,
            total,
            loss.ntp,
            loss.contrastive,
            loss.total
        );
    }
}

/// Causal LM training on unpaired token sequences.
pub fn pretrain_lm(model: &mut Model, texts: &[Vec<usize>], cfg: &TrainConfig, out: &Outputs) -> Result<RunRecord> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::input("language-model corpus is empty"));
    }
    let started = Instant::now();
    let mut record = RunRecord::new(serde_json::to_value(cfg)?);
    let mut stepper = Stepper::new(model, cfg)?;
    let mut sampler = EpochSampler::new(texts.len(), cfg.batch_size, cfg.seed);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| texts[i].clone()).collect();
        let loss = stepper.step(step, |m, g, b| lm_loss(m, g, b, &seqs, None, PAD_ID))?;
        log_progress(cfg, step, cfg.steps, &loss);
        record.steps.push(StepLog { step, phase: cfg.phase, stage: 0, loss });
    }
    out.save(stepper.model, "end", &mut record)?;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Index batches drawn without replacement, reshuffled every epoch.
struct EpochSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = EpochSampler { n, batch: batch.min(n), seed, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.epoch)));
        self.pos = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Parallel data for continued pretraining.
#[derive(Clone, Debug, Default)]
pub struct PretrainData {
    pub sentences: Vec<EncodedPair>,
    pub paragraphs: Vec<EncodedPair>,
    /// Unpaired text whose LM loss is tracked across the run.
    pub heldout: Vec<Vec<usize>>,
}

/// Batches of one granularity, re-cut with a fresh shuffle every epoch.
struct BatchStream<'a> {
    pairs: &'a [EncodedPair],
    t: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<corpus::ParallelBatch>,
}

impl<'a> BatchStream<'a> {
    fn new(pairs: &'a [EncodedPair], t: usize, seed: u64) -> Result<Self> {
        if pairs.len() < t {
            return Err(Error::config(format!("{} pairs cannot fill one batch of {t}", pairs.len())));
        }
        Ok(BatchStream { pairs, t, seed, epoch: 0, queue: Vec::new().into_iter() })
    }

    fn next_batch(&mut self) -> Result<corpus::ParallelBatch> {
        if let Some(b) = self.queue.next() {
            return Ok(b);
        }
        let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch);
        self.epoch += 1;
        self.queue = make_batches(self.pairs, self.t, seed)?.into_iter();
        Ok(self.queue.next().expect("at least one batch"))
    }
}

/// Joint NTP plus contrastive loss on one parallel batch. Both languages go
/// through one forward pass; NTP covers every sequence of the batch.
pub fn parallel_batch_loss(
    model: &Model,
    g: &mut Graph,
    bound: &model::BoundParams,
    batch: &corpus::ParallelBatch,
    stage: Stage,
    contrastive: &ContrastiveConfig,
    pad: usize,
) -> Result<(crate::autodiff::NodeId, LossBreakdown)> {
    let t = batch.len();
    let seqs: Vec<Vec<usize>> =
        batch.lang_a_sequences.iter().chain(&batch.lang_b_sequences).cloned().collect();
    let tokens = TokenBatch::from_sequences(&seqs, pad)?;
    let targets = NextTokenTargets::new(&tokens, None)?;
    let out = model.forward(g, bound, &tokens, true)?;
    let ntp = ntp_loss(g, out.logits, &targets.targets, &targets.weights)?;
    let emb = model::sentence_embedding(g, out.last_hidden(), &tokens, stage.mode)?;
    let ea = g.slice(emb, 0, 0, t);
    let eb = g.slice(emb, 0, t, 2 * t);
    let cl = contrastive_loss(g, ea, eb, contrastive.temperature)?;
    let total = joint_loss_node(g, ntp, Some(cl), contrastive.lambda)?;
    let breakdown = joint_loss(g.value(ntp).item(), g.value(cl).item(), contrastive.lambda)?;
    Ok((total, breakdown))
}

/// Continued pretraining under the curriculum. With λ = 0 this is plain NTP
/// on the same batches. Checkpoints after stage 1 (when a stage 2 follows)
/// and at the end.
pub fn pretrain(
    model: &mut Model,
    data: &PretrainData,
    schedule: &CurriculumSchedule,
    contrastive: &ContrastiveConfig,
    cfg: &TrainConfig,
    out: &Outputs,
) -> Result<RunRecord> {
    cfg.validate()?;
    contrastive.validate()?;
    schedule.check_corpus_sizes(data.sentences.len(), data.paragraphs.len())?;
    let started = Instant::now();
    let mut record = RunRecord::new(serde_json::json!({
        "train": cfg, "schedule": schedule, "contrastive": contrastive,
    }));
    let pad = PAD_ID;
    let mut sentences = BatchStream::new(&data.sentences, cfg.batch_size, cfg.seed).ok();
    let mut paragraphs = BatchStream::new(&data.paragraphs, cfg.batch_size, cfg.seed ^ 0xA5A5).ok();
    if schedule.stage1_steps > 0 && sentences.is_none() {
        return Err(Error::config(format!("fewer than {} sentence pairs for stage 1", cfg.batch_size)));
    }
    if schedule.stage2_steps > 0 && paragraphs.is_none() {
        return Err(Error::config(format!("fewer than {} paragraph pairs for stage 2", cfg.batch_size)));
    }
    let track = |m: &Model, label: &str, record: &mut RunRecord| -> Result<()> {
        if !data.heldout.is_empty() {
            let v = heldout_ntp_loss(m, &data.heldout, 64, pad)?;
            log::info!("held-out ntp at {label}: {v:.5}");
            record.heldout.push((label.to_string(), v));
        }
        Ok(())
    };
    track(model, "start", &mut record)?;
    let total = schedule.total_steps();
    let mut stepper = Stepper::new(model, cfg)?;
    for step in 0..total {
        let stage = curriculum_step(schedule, step)?;
        let batch = match stage.granularity {
            Granularity::Sentence => sentences.as_mut().unwrap().next_batch()?,
            Granularity::Paragraph => paragraphs.as_mut().unwrap().next_batch()?,
        };
        let loss = stepper.step(step, |m, g, b| parallel_batch_loss(m, g, b, &batch, stage, contrastive, pad))?;
        log_progress(cfg, step, total, &loss);
        record.steps.push(StepLog { step, phase: cfg.phase, stage: stage.index, loss });
        if step + 1 == schedule.stage1_steps && schedule.stage2_steps > 0 {
            track(stepper.model, "stage1", &mut record)?;
            out.save(stepper.model, "stage1", &mut record)?;
        }
    }
    track(stepper.model, "end", &mut record)?;
    out.save(stepper.model, "end", &mut record)?;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

/// One training sequence and the positions that carry loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionExample {
    pub tokens: Vec<usize>,
    /// True at response positions.
    pub loss_mask: Vec<bool>,
}

impl InstructionExample {
    /// Direct answers carry loss after the answer delimiter; chain-of-thought
    /// examples carry loss on everything after `<think_en>`. The question
    /// never does. A chain-of-thought example may end at its English answer.
    pub fn from_words(words: &[String], vocab: &Vocabulary) -> Result<Self> {
        let tokens = vocab.encode(words)?;
        if words.first().map(String::as_str) != Some(corpus::Q) || words.last().map(String::as_str) != Some(corpus::EOS) {
            return Err(Error::data("instruction sequence must start with <q> and end with <eos>"));
        }
        let start = if words.iter().any(|w| w == corpus::THINK_EN) {
            // English questions stop after the English answer.
            let pos = |tok: &str| words.iter().position(|w| w == tok);
            let think = pos(corpus::THINK_EN).unwrap();
            let ordered = match (pos(corpus::ANS_EN), pos(corpus::ANS_TGT)) {
                (Some(en), None) => think < en,
                (Some(_), Some(_)) => Sections::split(words).well_formed,
                _ => false,
            };
            if !ordered {
                return Err(Error::data("malformed chain-of-thought sequence"));
            }
            think + 1
        } else {
            let p = words
                .iter()
                .position(|w| w == corpus::ANS_EN || w == corpus::ANS_TGT)
                .ok_or_else(|| Error::data("instruction sequence has no answer delimiter"))?;
            p + 1
        };
        let loss_mask = (0..words.len()).map(|i| i >= start).collect();
        Ok(InstructionExample { tokens, loss_mask })
    }
}

/// Read a JSON-lines file of `{"fact_id", "tokens"}`; errors name the line.
pub fn load_instruction_file(path: &Path, vocab: &Vocabulary) -> Result<Vec<InstructionExample>> {
    let lines: Vec<corpus::io::XCoTLine> = corpus::io::read_jsonl(path)?;
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            InstructionExample::from_words(&l.tokens, vocab)
                .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Instruction fine-tuning with masked NTP loss.
pub fn finetune(model: &mut Model, set: &[InstructionExample], cfg: &TrainConfig, out: &Outputs) -> Result<RunRecord> {
    cfg.validate()?;
    if !matches!(cfg.phase, Phase::Sft | Phase::SftXcot) {
        return Err(Error::config(format!("finetune needs phase sft or sft-xcot, got {}", cfg.phase)));
    }
    if set.is_empty() {
        return Err(Error::input("instruction set is empty"));
    }
    let started = Instant::now();
    let mut record = RunRecord::new(serde_json::to_value(cfg)?);
    let mut stepper = Stepper::new(model, cfg)?;
    let mut sampler = EpochSampler::new(set.len(), cfg.batch_size, cfg.seed);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| set[i].tokens.clone()).collect();
        let masks: Vec<Vec<bool>> = idx.iter().map(|&i| set[i].loss_mask.clone()).collect();
        let loss = stepper.step(step, |m, g, b| lm_loss(m, g, b, &seqs, Some(&masks), PAD_ID))?;
        log_progress(cfg, step, cfg.steps, &loss);
        record.steps.push(StepLog { step, phase: cfg.phase, stage: 0, loss });
    }
    out.save(stepper.model, "end", &mut record)?;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParameterSet {
        ParameterSet::from_named(vec![("layer0.attn.wq".into(), Tensor::vector(vec![v]))]).unwrap()
    }

    #[test]
    fn single_scalar_adam_step_matches_closed_form() {
        let cfg = AdamConfig { lr: 0.1, clip_norm: 100.0, ..AdamConfig::default() };
        let mut p = one_param(0.5);
        let mask = FreezeMask::all_trainable(&p);
        let mut st = AdamState::new(&p);
        let g = 0.3;
        apply_update(&mut p, &[Some(Tensor::vector(vec![g]))], &mask, &mut st, &cfg, 0).unwrap();
        // m = 0.1 g, v = 0.001 g^2; bias-corrected mhat = g, vhat = g^2.
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let want = 0.5 - cfg.lr * (m / (1.0 - cfg.beta1)) / ((v / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_the_gradient() {
        let cfg = AdamConfig { lr: 0.1, clip_norm: 1.0, ..AdamConfig::default() };
        let mut p = one_param(0.0);
        let mask = FreezeMask::all_trainable(&p);
        let mut st = AdamState::new(&p);
        let s = apply_update(&mut p, &[Some(Tensor::vector(vec![4.0]))], &mask, &mut st, &cfg, 0).unwrap();
        assert!(s.clipped);
        assert_eq!(s.grad_norm, 4.0);
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = one_param(0.5);
        let mask = FreezeMask::all_trainable(&p);
        let mut st = AdamState::new(&p);
        apply_update(&mut p, &[Some(Tensor::vector(vec![0.0]))], &mask, &mut st, &cfg, 0).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.5);
        apply_update(&mut p, &[Some(Tensor::vector(vec![0.2]))], &mask, &mut st, &cfg, 1).unwrap();
        let (before, m, v) = (p.tensors()[0].data()[0], st.m[0].data()[0], st.v[0].data()[0]);
        apply_update(&mut p, &[Some(Tensor::vector(vec![0.0]))], &mask, &mut st, &cfg, 2).unwrap();
        assert_eq!(p.tensors()[0].data()[0], before);
        assert_eq!(st.m[0].data()[0], m * cfg.beta1);
        assert_eq!(st.v[0].data()[0], v * cfg.beta2);
    }

    #[test]
    fn frozen_parameter_is_untouched_and_nan_aborts() {
        let cfg = AdamConfig::default();
        let mut p = one_param(0.5);
        let frozen = freeze_mask(&p, &LayerSegments::even(3).unwrap(), &[Segment::High]).unwrap();
        let mut st = AdamState::new(&p);
        apply_update(&mut p, &[Some(Tensor::vector(vec![1.0]))], &frozen, &mut st, &cfg, 0).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.5);
        let mask = FreezeMask::all_trainable(&p);
        let err = apply_update(&mut p, &[Some(Tensor::vector(vec![f64::NAN]))], &mask, &mut st, &cfg, 17).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("step 17")), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Phase::Sft, 1, 1, vec![Segment::All]);
        assert!(c.validate().is_ok());
        c.optimizer.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::new(Phase::Sft, 1, 1, vec![Segment::All]);
        c.optimizer.clip_norm = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, 3, 4);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }
}
