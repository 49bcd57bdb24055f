//! End-to-end experiments: testbed generation, the four training arms, and
//! the evaluation passes, driven by one JSON configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::io::{read_jsonl, read_pairs, read_qa, write_jsonl, write_pairs, write_qa, XCoTLine};
use crate::corpus::{
    self, direct_sequence, encode_pairs, english_cot_sequence, format_xcot, generate_monolingual, qa_item, generate_parallel, generate_qa, FactBase,
    FactRole, Grammar, Granularity, Lang, MeaningSpace, MonoText, ParallelPair, QaItem, QaSets, QaSplit,
    TwinLanguageSpec, Vocabulary, WordOrder,
};
use crate::error::{Error, Result};
use crate::eval::{
    self, alignment_curve, judge_answer_in, AlignmentReport, ConsistencyMatrix, LanguageDump, RateRow, TidyRow,
};
use crate::model::{checkpoint, Model, ModelConfig, Segment};
use crate::objectives::{ContrastiveConfig, CurriculumSchedule};
use crate::trainer::{
    self, finetune, pretrain, pretrain_lm, write_metrics_csv, InstructionExample, Outputs, Phase, PretrainData,
    RunRecord, TrainConfig,
};
use crate::xcot::{decode_direct_batch, decode_xcot_batch, AnswerRecord, DecodeConfig};

/// Environment variable naming the output root when the config does not.
pub const OUTPUT_ROOT_ENV: &str = "CCLX_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "cclx-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageConfig {
    pub subjects: usize,
    pub relations: usize,
    pub objects: usize,
    /// Role order of the twin language.
    pub word_order: WordOrder,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        LanguageConfig { subjects: 50, relations: 10, objects: 50, word_order: WordOrder::SOR }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_facts: usize,
    pub qa_split: QaSplit,
    pub sentence_pairs: usize,
    pub paragraph_pairs: usize,
    /// Held-out sentence pairs for alignment measurement.
    pub alignment_pairs: usize,
    /// Unpaired texts per language for base language-model training.
    pub monolingual_per_lang: usize,
    /// Sentence translations (one language followed by the other) mixed
    /// into base language-model training.
    pub bitext_pairs: usize,
    pub paragraph_fraction: f64,
    /// Unpaired texts per language for the forgetting guard.
    pub heldout_per_lang: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_facts: 400,
            qa_split: QaSplit::default(),
            sentence_pairs: 2400,
            paragraph_pairs: 600,
            alignment_pairs: 1000,
            monolingual_per_lang: 4000,
            bitext_pairs: 1500,
            paragraph_fraction: 0.3,
            heldout_per_lang: 200,
        }
    }
}

/// Model shape; the vocabulary size comes from the testbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { n_layers: 6, n_heads: 4, d_model: 64, d_ff: 256, max_seq_len: 32, tie_embeddings: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alignment_pairs: usize,
    pub bootstrap_resamples: usize,
    /// Allowed relative rise of held-out LM loss from stage 1 to the end.
    pub forgetting_tolerance: f64,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { alignment_pairs: 1000, bootstrap_resamples: 1000, forgetting_tolerance: 0.10, jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub language: LanguageConfig,
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub base: TrainConfig,
    pub pretrain: TrainConfig,
    pub schedule: CurriculumSchedule,
    pub contrastive: ContrastiveConfig,
    pub finetune: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut base = TrainConfig::new(Phase::Base, 1500, 32, vec![Segment::All]);
        base.optimizer.lr = 1e-3;
        base.log_every = 100;
        let mut pretrain = TrainConfig::new(Phase::PretrainCcl, 0, 32, vec![Segment::Mid]);
        pretrain.optimizer.lr = 3e-4;
        pretrain.log_every = 100;
        let mut finetune = TrainConfig::new(Phase::SftXcot, 1500, 32, vec![Segment::All]);
        finetune.optimizer.lr = 2e-3;
        finetune.log_every = 100;
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            language: LanguageConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelShape::default(),
            base,
            pretrain,
            schedule: CurriculumSchedule { stage1_steps: 400, stage2_steps: 100 },
            contrastive: ContrastiveConfig::default(),
            finetune,
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.contrastive.validate()?;
        let c = &self.corpus;
        self.schedule.check_corpus_sizes(c.sentence_pairs, c.paragraph_pairs)?;
        if self.eval.alignment_pairs > c.alignment_pairs {
            return Err(Error::config(format!(
                "eval.alignment_pairs ({}) exceeds corpus.alignment_pairs ({})",
                self.eval.alignment_pairs, c.alignment_pairs
            )));
        }
        if self.eval.alignment_pairs < 2 {
            return Err(Error::config("eval.alignment_pairs must be >= 2"));
        }
        if self.decode.max_new_tokens == 0 {
            return Err(Error::config("decode.max_new_tokens must be >= 1"));
        }
        Ok(())
    }

    /// Config value, then the environment, then the default.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            vocab_size,
            max_seq_len: m.max_seq_len,
            seed: sub_seed(self.seed, Tag::Init),
            tie_embeddings: m.tie_embeddings,
        }
    }
}

/// Parse a config document, apply `path=value` overrides, and validate.
/// Schema errors name the offending field.
pub fn parse_config(text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = match text {
        Some(t) => serde_json::from_str::<serde_json::Value>(t)
            .map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?,
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(format!("field `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    parse_config(text.as_deref(), overrides)
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| Error::config(format!("override {spec:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override path `{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Err(Error::config("empty override path"))
}

#[derive(Clone, Copy)]
enum Tag {
    Language = 1,
    Facts,
    Qa,
    Sentences,
    Paragraphs,
    Monolingual,
    Heldout,
    Init,
    Base,
    Pretrain,
    Finetune,
    Bootstrap,
}

fn sub_seed(seed: u64, tag: Tag) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ ((tag as u64) << 56)).gen()
}

/// Everything generated from a config: language, facts, text and questions.
#[derive(Clone, Debug)]
pub struct Testbed {
    pub spec: TwinLanguageSpec,
    pub vocab: Vocabulary,
    pub facts: FactBase,
    pub roles: Vec<FactRole>,
    pub qa: QaSets,
    pub sentences: Vec<ParallelPair>,
    pub paragraphs: Vec<ParallelPair>,
    pub alignment: Vec<ParallelPair>,
    pub bitext: Vec<ParallelPair>,
    pub monolingual: Vec<MonoText>,
    pub heldout: Vec<MonoText>,
    /// English QA on transfer and demo facts plus direct target-language
    /// answers on demo facts.
    pub sft_direct: Vec<XCoTLine>,
    /// English QA in both the direct and the chain-of-thought layout (the
    /// question restated as reasoning), plus chain-of-thought target-language
    /// demonstrations.
    pub sft_xcot: Vec<XCoTLine>,
}

pub fn build_testbed(cfg: &ExperimentConfig) -> Result<Testbed> {
    let l = &cfg.language;
    let grammar = Grammar::sized(l.subjects, l.relations, l.objects)?;
    let spec = TwinLanguageSpec::generate(grammar, l.word_order, sub_seed(cfg.seed, Tag::Language))?;
    let c = &cfg.corpus;
    let facts = FactBase::generate(&spec.grammar, c.n_facts, sub_seed(cfg.seed, Tag::Facts))?;
    let qa = generate_qa(&facts, &spec, c.qa_split, sub_seed(cfg.seed, Tag::Qa))?;
    let space = MeaningSpace::excluding_facts(&spec.grammar, &facts);
    let mut sentences = generate_parallel(
        &spec,
        &space,
        c.sentence_pairs + c.alignment_pairs + c.bitext_pairs,
        Granularity::Sentence,
        sub_seed(cfg.seed, Tag::Sentences),
    )?;
    let bitext = sentences.split_off(c.sentence_pairs + c.alignment_pairs);
    let alignment = sentences.split_off(c.sentence_pairs);
    let paragraphs = if c.paragraph_pairs > 0 {
        generate_parallel(&spec, &space, c.paragraph_pairs, Granularity::Paragraph, sub_seed(cfg.seed, Tag::Paragraphs))?
    } else {
        Vec::new()
    };
    let monolingual = generate_monolingual(
        &spec,
        &space,
        c.monolingual_per_lang,
        c.paragraph_fraction,
        sub_seed(cfg.seed, Tag::Monolingual),
    )?;
    let heldout =
        generate_monolingual(&spec, &space, c.heldout_per_lang, c.paragraph_fraction, sub_seed(cfg.seed, Tag::Heldout))?;
    // English questions cover transfer and demo facts, so demo facts are
    // known in both languages.
    let mut english_items = qa.english_train.clone();
    for item in &qa.twin_demo {
        english_items.push(qa_item(&spec, facts.get(item.fact_id).expect("demo fact"), Lang::A));
    }
    let render = |items: &[QaItem], f: fn(&QaItem, &FactBase, &TwinLanguageSpec) -> Result<Vec<String>>| {
        items
            .iter()
            .map(|i| Ok(XCoTLine { fact_id: i.fact_id, tokens: f(i, &facts, &spec)? }))
            .collect::<Result<Vec<_>>>()
    };
    let mut sft_direct = render(&english_items, direct_sequence)?;
    sft_direct.extend(render(&qa.twin_demo, direct_sequence)?);
    let mut sft_xcot = render(&english_items, english_cot_sequence)?;
    sft_xcot.extend(render(&english_items, direct_sequence)?);
    for item in &qa.twin_demo {
        sft_xcot.push(XCoTLine { fact_id: item.fact_id, tokens: format_xcot(item, &facts, &spec)?.serialize() });
    }
    let vocab = Vocabulary::new(&spec);
    Ok(Testbed {
        spec,
        vocab,
        roles: qa.roles.clone(),
        facts,
        qa,
        sentences,
        paragraphs,
        alignment,
        bitext,
        monolingual,
        heldout,
        sft_direct,
        sft_xcot,
    })
}

/// Names of the files `gen` writes, relative to the data directory.
pub mod files {
    pub const LANGUAGE: &str = "language.json";
    pub const FACTS: &str = "facts.json";
    pub const SENTENCES: &str = "sentences.jsonl";
    pub const PARAGRAPHS: &str = "paragraphs.jsonl";
    pub const ALIGNMENT: &str = "alignment.jsonl";
    pub const BITEXT: &str = "bitext.jsonl";
    pub const MONOLINGUAL: &str = "monolingual.jsonl";
    pub const HELDOUT: &str = "heldout.jsonl";
    pub const QA_TRAIN_A: &str = "qa_train_a.jsonl";
    pub const QA_DEMO_B: &str = "qa_demo_b.jsonl";
    pub const QA_TEST_B: &str = "qa_test_b.jsonl";
    pub const QA_PROBE_A: &str = "qa_probe_a.jsonl";
    pub const SFT_DIRECT: &str = "sft_direct.jsonl";
    pub const SFT_XCOT: &str = "sft_xcot.jsonl";
    pub const MANIFEST: &str = "manifest.json";

    pub const ALL: [&str; 14] = [
        LANGUAGE, FACTS, SENTENCES, PARAGRAPHS, ALIGNMENT, BITEXT, MONOLINGUAL, HELDOUT, QA_TRAIN_A, QA_DEMO_B, QA_TEST_B,
        QA_PROBE_A, SFT_DIRECT, SFT_XCOT,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FactsFile {
    facts: FactBase,
    roles: Vec<FactRole>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    pub hashes: BTreeMap<String, String>,
    /// Hash over every data file, in name order.
    pub corpus_hash: String,
}

pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Write the testbed under `<root>/data` with a manifest of counts and hashes.
pub fn cmd_gen(cfg: &ExperimentConfig, root: &Path) -> Result<Manifest> {
    let tb = build_testbed(cfg)?;
    let dir = data_dir(root);
    std::fs::create_dir_all(&dir)?;
    let p = |name: &str| dir.join(name);
    write_json(&p(files::LANGUAGE), &tb.spec)?;
    write_json(&p(files::FACTS), &FactsFile { facts: tb.facts.clone(), roles: tb.roles.clone() })?;
    write_pairs(&p(files::SENTENCES), &tb.sentences)?;
    write_pairs(&p(files::PARAGRAPHS), &tb.paragraphs)?;
    write_pairs(&p(files::ALIGNMENT), &tb.alignment)?;
    write_pairs(&p(files::BITEXT), &tb.bitext)?;
    write_jsonl(&p(files::MONOLINGUAL), &tb.monolingual)?;
    write_jsonl(&p(files::HELDOUT), &tb.heldout)?;
    write_qa(&p(files::QA_TRAIN_A), &tb.qa.english_train)?;
    write_qa(&p(files::QA_DEMO_B), &tb.qa.twin_demo)?;
    write_qa(&p(files::QA_TEST_B), &tb.qa.twin_test)?;
    write_qa(&p(files::QA_PROBE_A), &tb.qa.english_probe)?;
    write_jsonl(&p(files::SFT_DIRECT), &tb.sft_direct)?;
    write_jsonl(&p(files::SFT_XCOT), &tb.sft_xcot)?;
    let counts: BTreeMap<String, usize> = [
        (files::FACTS, tb.facts.len()),
        (files::SENTENCES, tb.sentences.len()),
        (files::PARAGRAPHS, tb.paragraphs.len()),
        (files::ALIGNMENT, tb.alignment.len()),
        (files::BITEXT, tb.bitext.len()),
        (files::MONOLINGUAL, tb.monolingual.len()),
        (files::HELDOUT, tb.heldout.len()),
        (files::QA_TRAIN_A, tb.qa.english_train.len()),
        (files::QA_DEMO_B, tb.qa.twin_demo.len()),
        (files::QA_TEST_B, tb.qa.twin_test.len()),
        (files::QA_PROBE_A, tb.qa.english_probe.len()),
        (files::SFT_DIRECT, tb.sft_direct.len()),
        (files::SFT_XCOT, tb.sft_xcot.len()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let manifest = manifest_for(&dir, cfg.seed, counts)?;
    write_json(&p(files::MANIFEST), &manifest)?;
    log::info!("wrote testbed to {} (corpus hash {})", dir.display(), &manifest.corpus_hash[..12]);
    Ok(manifest)
}

fn manifest_for(dir: &Path, seed: u64, counts: BTreeMap<String, usize>) -> Result<Manifest> {
    let mut hashes = BTreeMap::new();
    let mut contents = Vec::new();
    for name in files::ALL {
        let bytes = std::fs::read(dir.join(name))?;
        hashes.insert(name.to_string(), corpus::content_hash([bytes.as_slice()]));
        contents.push(bytes);
    }
    let corpus_hash = corpus::content_hash(contents.iter().map(Vec::as_slice));
    Ok(Manifest { seed, counts, hashes, corpus_hash })
}

/// Read a testbed written by [`cmd_gen`].
pub fn load_testbed(root: &Path) -> Result<(Testbed, Manifest)> {
    let dir = data_dir(root);
    let missing: Vec<String> = files::ALL
        .iter()
        .chain([&files::MANIFEST])
        .filter(|f| !dir.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "corpus not found in {} (missing {}); run `cclx gen` with the same config first",
            dir.display(),
            missing.join(", ")
        )));
    }
    let p = |name: &str| dir.join(name);
    let spec: TwinLanguageSpec = read_json(&p(files::LANGUAGE))?;
    spec.validate()?;
    let ff: FactsFile = read_json(&p(files::FACTS))?;
    ff.facts.validate()?;
    let qa = QaSets {
        roles: ff.roles.clone(),
        english_train: read_qa(&p(files::QA_TRAIN_A))?,
        twin_demo: read_qa(&p(files::QA_DEMO_B))?,
        twin_test: read_qa(&p(files::QA_TEST_B))?,
        english_probe: read_qa(&p(files::QA_PROBE_A))?,
    };
    let manifest: Manifest = read_json(&p(files::MANIFEST))?;
    let tb = Testbed {
        vocab: Vocabulary::new(&spec),
        spec,
        facts: ff.facts,
        roles: ff.roles,
        qa,
        sentences: read_pairs(&p(files::SENTENCES))?,
        paragraphs: read_pairs(&p(files::PARAGRAPHS))?,
        alignment: read_pairs(&p(files::ALIGNMENT))?,
        bitext: read_pairs(&p(files::BITEXT))?,
        monolingual: read_jsonl(&p(files::MONOLINGUAL))?,
        heldout: read_jsonl(&p(files::HELDOUT))?,
        sft_direct: read_jsonl(&p(files::SFT_DIRECT))?,
        sft_xcot: read_jsonl(&p(files::SFT_XCOT))?,
    };
    Ok((tb, manifest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Sft,
    Xcot,
    ClXcot,
    CclXcot,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Sft, Arm::Xcot, Arm::ClXcot, Arm::CclXcot];

    pub fn uses_xcot(self) -> bool {
        self != Arm::Sft
    }

    pub fn pretrain_phase(self) -> Phase {
        match self {
            Arm::Sft | Arm::Xcot => Phase::PretrainNtpOnly,
            Arm::ClXcot | Arm::CclXcot => Phase::PretrainCcl,
        }
    }

    /// Schedule and contrastive settings this arm actually uses. All arms
    /// take the same number of continued-pretraining steps.
    pub fn pretrain_settings(
        self,
        schedule: &CurriculumSchedule,
        contrastive: &ContrastiveConfig,
    ) -> (CurriculumSchedule, ContrastiveConfig, Option<String>) {
        let mut c = *contrastive;
        let mut notice = None;
        let s = match self {
            Arm::Sft | Arm::Xcot => {
                if c.lambda > 0.0 {
                    notice = Some(format!("arm {self}: contrastive weight {} forced to 0", c.lambda));
                }
                c.lambda = 0.0;
                *schedule
            }
            Arm::ClXcot => CurriculumSchedule { stage1_steps: schedule.total_steps(), stage2_steps: 0 },
            Arm::CclXcot => *schedule,
        };
        (s, c, notice)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Sft => "sft",
            Arm::Xcot => "xcot",
            Arm::ClXcot => "cl-xcot",
            Arm::CclXcot => "ccl-xcot",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sft" => Arm::Sft,
            "xcot" => Arm::Xcot,
            "cl-xcot" => Arm::ClXcot,
            "ccl-xcot" => Arm::CclXcot,
            other => {
                return Err(Error::config(format!("unknown arm {other:?}; expected sft, xcot, cl-xcot or ccl-xcot")))
            }
        })
    }
}

fn encode_texts(tb: &Testbed, texts: &[MonoText]) -> Result<Vec<Vec<usize>>> {
    texts.iter().map(|t| tb.vocab.encode_text(&t.words)).collect()
}

pub fn pretrain_data(tb: &Testbed) -> Result<PretrainData> {
    Ok(PretrainData {
        sentences: encode_pairs(&tb.vocab, &tb.sentences)?,
        paragraphs: encode_pairs(&tb.vocab, &tb.paragraphs)?,
        heldout: encode_texts(tb, &tb.heldout)?,
    })
}

pub fn instruction_set(tb: &Testbed, arm: Arm) -> Result<Vec<InstructionExample>> {
    let lines = if arm.uses_xcot() { &tb.sft_xcot } else { &tb.sft_direct };
    lines.iter().map(|l| InstructionExample::from_words(&l.tokens, &tb.vocab)).collect()
}

/// Monolingual texts, then each bitext pair as one sequence, alternating
/// which language comes first.
pub fn base_texts(tb: &Testbed) -> Result<Vec<Vec<usize>>> {
    let mut texts = encode_texts(tb, &tb.monolingual)?;
    for (i, p) in tb.bitext.iter().enumerate() {
        let (first, second) = if i % 2 == 0 { (&p.a, &p.b) } else { (&p.b, &p.a) };
        let words: Vec<String> = first.iter().chain(second).cloned().collect();
        texts.push(tb.vocab.encode_text(&words)?);
    }
    Ok(texts)
}

/// Base LM training shared by every arm.
pub fn train_base(cfg: &ExperimentConfig, tb: &Testbed, out: &Outputs) -> Result<(Model, RunRecord)> {
    let mut model = Model::init(cfg.model_config(tb.vocab.len()))?;
    let texts = base_texts(tb)?;
    let mut tc = cfg.base.clone();
    tc.phase = Phase::Base;
    tc.seed = sub_seed(cfg.seed, Tag::Base);
    let record = pretrain_lm(&mut model, &texts, &tc, out)?;
    Ok((model, record))
}

/// Load the cached base model under `<root>/base` when its key matches, or
/// train and cache it. The key covers the model shape, the base phase
/// settings and the files the base phase reads.
pub fn cached_base(cfg: &ExperimentConfig, tb: &Testbed, manifest: &Manifest, root: &Path) -> Result<Model> {
    let dir = root.join("base");
    let input = |name: &str| manifest.hashes.get(name).map_or("", String::as_str).to_string();
    let key = corpus::content_hash([
        serde_json::to_string(&cfg.model_config(tb.vocab.len()))?.as_bytes(),
        serde_json::to_string(&cfg.base)?.as_bytes(),
        input(files::LANGUAGE).as_bytes(),
        input(files::MONOLINGUAL).as_bytes(),
        input(files::BITEXT).as_bytes(),
    ]);
    let key_path = dir.join("key.txt");
    let stem = dir.join("base_end");
    if std::fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) {
        if let Ok(m) = checkpoint::load(&stem.with_extension("json")) {
            log::info!("reusing base model from {}", dir.display());
            return Ok(m);
        }
    }
    log::info!("training base model");
    let (model, record) = train_base(cfg, tb, &Outputs::at(&dir, "base"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &[&record])?;
    std::fs::write(key_path, &key)?;
    Ok(model)
}

/// Continued pretraining plus fine-tuning of one arm from a base model.
pub struct ArmRun {
    pub arm: Arm,
    pub model: Model,
    pub pretrain: RunRecord,
    pub finetune: RunRecord,
    pub notices: Vec<String>,
}

/// Options that vary an arm without changing its recipe.
#[derive(Clone, Debug, Default)]
pub struct ArmOptions {
    /// Replace the continued-pretraining freeze selection.
    pub pretrain_freeze: Option<Vec<Segment>>,
    /// Where checkpoints go.
    pub dir: Option<PathBuf>,
}

pub fn train_arm(cfg: &ExperimentConfig, tb: &Testbed, base: &Model, arm: Arm, opts: &ArmOptions) -> Result<ArmRun> {
    let mut model = base.clone();
    let (schedule, contrastive, notice) = arm.pretrain_settings(&cfg.schedule, &cfg.contrastive);
    let mut notices = Vec::new();
    if let Some(n) = notice {
        log::warn!("{n}");
        notices.push(n);
    }
    let mut pc = cfg.pretrain.clone();
    pc.phase = arm.pretrain_phase();
    pc.seed = sub_seed(cfg.seed, Tag::Pretrain);
    if let Some(f) = &opts.pretrain_freeze {
        pc.freeze = f.clone();
    }
    let out = |prefix: &str| opts.dir.as_ref().map_or_else(Outputs::none, |d| Outputs::at(d, prefix));
    let data = pretrain_data(tb)?;
    let pre = pretrain(&mut model, &data, &schedule, &contrastive, &pc, &out("pretrain"))?;
    let mut fc = cfg.finetune.clone();
    fc.phase = if arm.uses_xcot() { Phase::SftXcot } else { Phase::Sft };
    fc.seed = sub_seed(cfg.seed, Tag::Finetune);
    let set = instruction_set(tb, arm)?;
    let ft = finetune(&mut model, &set, &fc, &out("finetune"))?;
    Ok(ArmRun { arm, model, pretrain: pre, finetune: ft, notices })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub arm: Arm,
    pub seed: u64,
    pub corpus_hash: String,
    pub notices: Vec<String>,
    pub checkpoints: Vec<PathBuf>,
    pub heldout: Vec<(String, f64)>,
    pub pretrain_secs: f64,
    pub finetune_secs: f64,
}

pub fn run_dir(root: &Path, arm: Arm) -> PathBuf {
    root.join("runs").join(arm.to_string())
}

/// Train one arm from the generated corpus and write its run directory.
pub fn cmd_run(cfg: &ExperimentConfig, root: &Path, arm: Arm) -> Result<PathBuf> {
    let (tb, manifest) = load_testbed(root)?;
    let base = cached_base(cfg, &tb, &manifest, root)?;
    let dir = run_dir(root, arm);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let run = train_arm(cfg, &tb, &base, arm, &ArmOptions { dir: Some(dir.clone()), ..Default::default() })?;
    write_metrics_csv(&dir.join("metrics.csv"), &[&run.pretrain, &run.finetune])?;
    let mut checkpoints = run.pretrain.checkpoints.clone();
    checkpoints.extend(run.finetune.checkpoints.iter().cloned());
    let info = RunInfo {
        arm,
        seed: cfg.seed,
        corpus_hash: manifest.corpus_hash,
        notices: run.notices,
        checkpoints,
        heldout: run.pretrain.heldout.clone(),
        pretrain_secs: run.pretrain.wall_clock_secs,
        finetune_secs: run.finetune.wall_clock_secs,
    };
    write_json(&dir.join("run.json"), &info)?;
    Ok(dir)
}

/// Answers of one model to the target-language test questions and to the
/// same questions asked in English.
pub struct QaAnswers {
    pub target: Vec<AnswerRecord>,
    pub english: Vec<AnswerRecord>,
}

pub fn answer_questions(model: &Model, tb: &Testbed, arm: &str, xcot: bool, decode: &DecodeConfig) -> Result<QaAnswers> {
    let qs = |items: &[QaItem]| items.iter().map(|i| i.q.clone()).collect::<Vec<_>>();
    let target_q = qs(&tb.qa.twin_test);
    let target = if xcot {
        decode_xcot_batch(model, &tb.vocab, &target_q, decode)?
            .into_iter()
            .zip(&tb.qa.twin_test)
            .map(|(o, i)| AnswerRecord::from_xcot(i.fact_id, arm, o))
            .collect()
    } else {
        decode_direct_batch(model, &tb.vocab, &target_q, Lang::B, decode)?
            .into_iter()
            .zip(&tb.qa.twin_test)
            .map(|(a, i)| AnswerRecord::from_direct(i.fact_id, arm, a))
            .collect()
    };
    let english = decode_direct_batch(model, &tb.vocab, &qs(&tb.qa.english_probe), Lang::A, decode)?
        .into_iter()
        .zip(&tb.qa.english_probe)
        .map(|(a, i)| AnswerRecord::from_direct(i.fact_id, arm, a))
        .collect();
    Ok(QaAnswers { target, english })
}

/// Judge every record; target answers use the target-language section only.
pub fn judge_records(records: &[AnswerRecord], lang: Lang, tb: &Testbed) -> Result<Vec<eval::QAJudgment>> {
    records
        .iter()
        .map(|r| {
            let answer = match lang {
                Lang::B => &r.answer_tgt,
                Lang::A => eval::final_answer(r),
            };
            judge_answer_in(answer, lang, r.fact_id, &tb.facts, &tb.spec)
        })
        .collect()
}

/// Rate rows for the target language, and English when `english` is set.
pub fn rate_rows(cfg: &ExperimentConfig, tb: &Testbed, arm: &str, answers: &QaAnswers) -> Result<Vec<RateRow>> {
    let seed = sub_seed(cfg.seed, Tag::Bootstrap);
    let n = cfg.eval.bootstrap_resamples;
    Ok(vec![
        RateRow::new(arm, Lang::B, &judge_records(&answers.target, Lang::B, tb)?, n, seed)?,
        RateRow::new(arm, Lang::A, &judge_records(&answers.english, Lang::A, tb)?, n, seed)?,
    ])
}

/// Rates restricted to facts of one role, for the target language.
pub fn target_rate_by_role(answers: &QaAnswers, tb: &Testbed, role: FactRole) -> Result<eval::RateSummary> {
    let keep: Vec<AnswerRecord> = answers.target.iter().filter(|r| tb.roles[r.fact_id] == role).cloned().collect();
    eval::hallucination_free_rate(&judge_records(&keep, Lang::B, tb)?)
}

pub fn consistency(answers: &QaAnswers, tb: &Testbed) -> Result<ConsistencyMatrix> {
    eval::consistency_matrix(
        &[
            LanguageDump { lang: Lang::A, records: answers.english.clone() },
            LanguageDump { lang: Lang::B, records: answers.target.clone() },
        ],
        &tb.spec,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    Align,
    Qa,
    Consistency,
    Ablate,
}

impl FromStr for EvalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "align" => EvalKind::Align,
            "qa" => EvalKind::Qa,
            "consistency" => EvalKind::Consistency,
            "ablate" => EvalKind::Ablate,
            other => return Err(Error::config(format!("unknown eval kind {other:?}"))),
        })
    }
}

pub const ANSWERS_B: &str = "answers_b.jsonl";
pub const ANSWERS_A: &str = "answers_a.jsonl";

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!("missing artifacts: {}", missing.join(", "))))
    }
}

fn read_info(dir: &Path) -> Result<RunInfo> {
    let p = dir.join("run.json");
    require(&[p.clone()])?;
    read_json(&p)
}

/// Map `f` over `items` on up to `jobs` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Contract("evaluation worker panicked".into()))??);
        }
        Ok(out)
    })
}

/// Evaluate run directories; returns the report files written.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    root: &Path,
    runs: &[PathBuf],
    kind: EvalKind,
    plot_data: bool,
) -> Result<Vec<PathBuf>> {
    let reports = root.join("reports");
    let mut written = Vec::new();
    match kind {
        EvalKind::Align => {
            if runs.is_empty() {
                return Err(Error::input("eval align needs at least one run directory"));
            }
            let (tb, _) = load_testbed(root)?;
            let pairs = encode_pairs(&tb.vocab, &tb.alignment)?;
            let mut jobs = Vec::new();
            for dir in runs {
                let info = read_info(dir)?;
                require(&info.checkpoints)?;
                for ck in info.checkpoints.iter().filter(|c| c.file_stem().is_some_and(|s| s.to_string_lossy().starts_with("pretrain"))) {
                    jobs.push((dir.clone(), ck.clone()));
                }
            }
            let results = parallel_map(&jobs, cfg.eval.jobs, |(_, ck)| {
                let m = checkpoint::load(ck)?;
                alignment_curve(&m, &pairs, cfg.eval.alignment_pairs)
            })?;
            let mut tidy = Vec::new();
            for ((dir, ck), report) in jobs.iter().zip(&results) {
                let stem = ck.file_stem().unwrap().to_string_lossy().to_string();
                let path = dir.join(format!("alignment_{stem}.csv"));
                eval::write_alignment_csv(&path, report)?;
                tidy.extend(eval::alignment_tidy(&format!("{}/{stem}", dir_label(dir)), report));
                written.push(path);
            }
            if plot_data {
                let p = reports.join("alignment_tidy.csv");
                eval::write_tidy_csv(&p, &tidy)?;
                written.push(p);
            }
        }
        EvalKind::Qa => {
            if runs.is_empty() {
                return Err(Error::input("eval qa needs at least one run directory"));
            }
            let (tb, _) = load_testbed(root)?;
            let rows = parallel_map(runs, cfg.eval.jobs, |dir| {
                let info = read_info(dir)?;
                let ck = dir.join("finetune_end.json");
                require(&[ck.clone()])?;
                let model = checkpoint::load(&ck)?;
                let run_cfg = run_config(dir, cfg)?;
                let arm = info.arm.to_string();
                let answers = answer_questions(&model, &tb, &arm, info.arm.uses_xcot(), &run_cfg.decode)?;
                write_jsonl(&dir.join(ANSWERS_B), &answers.target)?;
                write_jsonl(&dir.join(ANSWERS_A), &answers.english)?;
                rate_rows(&run_cfg, &tb, &arm, &answers)
            })?;
            let rows: Vec<RateRow> = rows.into_iter().flatten().collect();
            let path = reports.join("rates.csv");
            eval::write_rates_csv(&path, &rows)?;
            written.push(path);
            for dir in runs {
                written.push(dir.join(ANSWERS_B));
                written.push(dir.join(ANSWERS_A));
            }
            if plot_data {
                let p = reports.join("rates_tidy.csv");
                eval::write_tidy_csv(&p, &eval::rates_tidy(&rows))?;
                written.push(p);
            }
        }
        EvalKind::Consistency => {
            if runs.is_empty() {
                return Err(Error::input("eval consistency needs at least one run directory"));
            }
            let (tb, _) = load_testbed(root)?;
            let mut tidy: Vec<TidyRow> = Vec::new();
            for dir in runs {
                let dumps: Vec<LanguageDump> = [(Lang::A, ANSWERS_A), (Lang::B, ANSWERS_B)]
                    .into_iter()
                    .filter(|(_, f)| dir.join(f).exists())
                    .map(|(lang, f)| Ok(LanguageDump { lang, records: read_jsonl(&dir.join(f))? }))
                    .collect::<Result<_>>()?;
                let m = eval::consistency_matrix(&dumps, &tb.spec)?;
                let path = dir.join("consistency.csv");
                eval::write_consistency_csv(&path, &m)?;
                tidy.extend(eval::consistency_tidy(&dir_label(dir), &m));
                written.push(path);
            }
            if plot_data {
                let p = reports.join("consistency_tidy.csv");
                eval::write_tidy_csv(&p, &tidy)?;
                written.push(p);
            }
        }
        EvalKind::Ablate => {
            let (tb, manifest) = load_testbed(root)?;
            let base = cached_base(cfg, &tb, &manifest, root)?;
            let arms = [vec![Segment::Low], vec![Segment::Mid], vec![Segment::High], vec![Segment::All]];
            let rows = ablate_layers(cfg, &tb, &base, &arms)?;
            let path = reports.join("ablation.csv");
            eval::write_rates_csv(&path, &rows)?;
            written.push(path);
            if plot_data {
                let p = reports.join("ablation_tidy.csv");
                eval::write_tidy_csv(&p, &eval::rates_tidy(&rows))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// The config snapshot a run was trained with, or `fallback` when absent.
fn run_config(dir: &Path, fallback: &ExperimentConfig) -> Result<ExperimentConfig> {
    let p = dir.join("config.json");
    if p.exists() {
        read_json(&p)
    } else {
        Ok(fallback.clone())
    }
}

fn dir_label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().to_string())
}

pub fn selection_label(sel: &[Segment]) -> String {
    sel.iter().map(Segment::to_string).collect::<Vec<_>>().join("+")
}

/// Full ccl-xcot runs that differ only in which layers continued
/// pretraining updates. Rows are target-language rates, one per arm.
pub fn ablate_layers(cfg: &ExperimentConfig, tb: &Testbed, base: &Model, arms: &[Vec<Segment>]) -> Result<Vec<RateRow>> {
    if arms.is_empty() {
        return Err(Error::input("ablation needs at least one freeze selection"));
    }
    parallel_map(arms, cfg.eval.jobs, |sel| {
        let opts = ArmOptions { pretrain_freeze: Some(sel.clone()), dir: None };
        let run = train_arm(cfg, tb, base, Arm::CclXcot, &opts)?;
        let label = selection_label(sel);
        let answers = answer_questions(&run.model, tb, &label, true, &cfg.decode)?;
        let judgments = judge_records(&answers.target, Lang::B, tb)?;
        RateRow::new(&label, Lang::B, &judgments, cfg.eval.bootstrap_resamples, sub_seed(cfg.seed, Tag::Bootstrap))
    })
}

/// Alignment report of a model on the held-out pairs.
pub fn alignment_of(cfg: &ExperimentConfig, tb: &Testbed, model: &Model) -> Result<AlignmentReport> {
    let pairs = encode_pairs(&tb.vocab, &tb.alignment)?;
    alignment_curve(model, &pairs, cfg.eval.alignment_pairs)
}

/// Relative change of held-out LM loss from stage 1 to the end of pretraining.
pub fn forgetting(record: &RunRecord) -> Option<f64> {
    let s1 = record.heldout_at("stage1")?;
    let end = record.heldout_at("end")?;
    Some((end - s1) / s1)
}

/// Re-export for callers that only need the trainer's record type.
pub use trainer::RunRecord as Record;
