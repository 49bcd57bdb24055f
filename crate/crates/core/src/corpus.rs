//! Synthetic twin-language testbed.
//!
//! Language A is a tiny subject-relation-object grammar. Language B relabels
//! every word through a bijection and reorders the three roles, so every A
//! sentence has exactly one B translation and alignment ground truth is exact.
//! Facts used for QA live on (subject, relation) slots that the pretraining
//! text never mentions, so the only route from a fact to language B runs
//! through cross-lingual transfer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub mod io;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const Q: &str = "<q>";
pub const THINK_EN: &str = "<think_en>";
pub const ANS_EN: &str = "<ans_en>";
pub const ANS_TGT: &str = "<ans_tgt>";
pub const SPECIALS: [&str; 6] = [PAD, EOS, Q, THINK_EN, ANS_EN, ANS_TGT];

/// Wh-word standing in for the object slot of a question.
pub const WHAT: &str = "what";
/// Clause connective inside paragraphs.
pub const AND: &str = "and";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    A,
    B,
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::A => "a",
            Lang::B => "b",
        })
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Lang::A),
            "b" => Ok(Lang::B),
            other => Err(Error::input(format!("unknown language {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Subject,
    Relation,
    Object,
}

/// Order of the three clause roles, written like `"SOR"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WordOrder([Role; 3]);

impl WordOrder {
    pub const SRO: WordOrder = WordOrder([Role::Subject, Role::Relation, Role::Object]);
    pub const SOR: WordOrder = WordOrder([Role::Subject, Role::Object, Role::Relation]);

    pub fn new(roles: [Role; 3]) -> Result<Self> {
        let distinct: HashSet<_> = roles.iter().collect();
        if distinct.len() != 3 {
            return Err(Error::config(format!("word order {roles:?} is not a permutation of S, R, O")));
        }
        Ok(WordOrder(roles))
    }

    pub fn roles(&self) -> [Role; 3] {
        self.0
    }

    /// Arrange `(subject, relation, object)` in this order.
    pub fn arrange<T: Clone>(&self, s: T, r: T, o: T) -> [T; 3] {
        self.0.map(|role| match role {
            Role::Subject => s.clone(),
            Role::Relation => r.clone(),
            Role::Object => o.clone(),
        })
    }

    /// Inverse of [`arrange`](Self::arrange): `(subject, relation, object)`.
    pub fn unarrange<T: Clone>(&self, words: &[T; 3]) -> (T, T, T) {
        let pick = |want: Role| words[self.0.iter().position(|&r| r == want).unwrap()].clone();
        (pick(Role::Subject), pick(Role::Relation), pick(Role::Object))
    }
}

impl fmt::Display for WordOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.0 {
            f.write_str(match r {
                Role::Subject => "S",
                Role::Relation => "R",
                Role::Object => "O",
            })?;
        }
        Ok(())
    }
}

impl FromStr for WordOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let roles: Vec<Role> = s
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .map(|c| match c.to_ascii_uppercase() {
                'S' => Ok(Role::Subject),
                'R' | 'V' => Ok(Role::Relation),
                'O' => Ok(Role::Object),
                other => Err(Error::config(format!("unknown role {other:?} in word order {s:?}"))),
            })
            .collect::<Result<_>>()?;
        let roles: [Role; 3] =
            roles.try_into().map_err(|_| Error::config(format!("word order {s:?} must name exactly 3 roles")))?;
        WordOrder::new(roles)
    }
}

impl Serialize for WordOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WordOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

const SUBJECTS: [&str; 50] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "karl", "laura", "mallory",
    "nina", "oscar", "peggy", "quinn", "rupert", "sybil", "trent", "ursula", "victor", "walter", "xena", "yusuf",
    "zoe", "amir", "bella", "chen", "dina", "emil", "fiona", "gus", "hana", "igor", "jade", "kofi", "lena", "marco",
    "noor", "otto", "priya", "rosa", "sven", "tara", "uma", "vera", "wes", "yara", "zane",
];

const RELATIONS: [&str; 10] =
    ["likes", "owns", "visits", "paints", "sells", "fears", "studies", "wants", "cooks", "finds"];

const OBJECTS: [&str; 50] = [
    "tea", "coffee", "bread", "rice", "apples", "boats", "kites", "lamps", "maps", "drums", "bells", "books", "coins",
    "shells", "stones", "roses", "tigers", "horses", "owls", "fish", "clocks", "chairs", "hats", "gloves", "shoes",
    "rings", "cups", "bowls", "spoons", "kettles", "carpets", "mirrors", "candles", "ropes", "nets", "baskets",
    "ladders", "pianos", "violins", "flutes", "trains", "bikes", "tents", "jars", "pears", "plums", "figs", "limes",
    "nuts", "honey",
];

/// Word lists of the base language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grammar {
    pub subjects: Vec<String>,
    pub relations: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for Grammar {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Grammar { subjects: own(&SUBJECTS), relations: own(&RELATIONS), objects: own(&OBJECTS) }
    }
}

impl Grammar {
    /// First `n` entries of each default list.
    pub fn sized(subjects: usize, relations: usize, objects: usize) -> Result<Self> {
        let d = Grammar::default();
        if subjects == 0 || relations == 0 || objects < 2 {
            return Err(Error::config("grammar needs >= 1 subject, >= 1 relation and >= 2 objects"));
        }
        if subjects > d.subjects.len() || relations > d.relations.len() || objects > d.objects.len() {
            return Err(Error::config(format!(
                "grammar sizes are capped at {}/{}/{}",
                d.subjects.len(),
                d.relations.len(),
                d.objects.len()
            )));
        }
        Ok(Grammar {
            subjects: d.subjects[..subjects].to_vec(),
            relations: d.relations[..relations].to_vec(),
            objects: d.objects[..objects].to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.relations.is_empty() || self.objects.len() < 2 {
            return Err(Error::config("grammar needs >= 1 subject, >= 1 relation and >= 2 objects"));
        }
        let mut seen = HashSet::new();
        for w in self.words() {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w.starts_with('<') {
                return Err(Error::config(format!("grammar word {w:?} is not a plain token")));
            }
            if !seen.insert(w) {
                return Err(Error::config(format!("grammar word {w:?} appears twice")));
            }
        }
        Ok(())
    }

    /// Every base-language word, function words included.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.subjects
            .iter()
            .chain(&self.relations)
            .chain(&self.objects)
            .map(String::as_str)
            .chain([WHAT, AND])
    }

    pub fn slot_count(&self) -> usize {
        self.subjects.len() * self.relations.len()
    }
}

/// A base language plus its relabeled, reordered twin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinLanguageSpec {
    pub grammar: Grammar,
    pub token_bijection: BTreeMap<String, String>,
    pub word_order: WordOrder,
    pub seed: u64,
}

impl TwinLanguageSpec {
    /// Random pseudo-word relabeling drawn from `seed`.
    pub fn generate(grammar: Grammar, word_order: WordOrder, seed: u64) -> Result<Self> {
        grammar.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: HashSet<&str> = grammar.words().collect();
        let mut used = HashSet::new();
        let mut bijection = BTreeMap::new();
        for w in grammar.words() {
            let twin = loop {
                let cand = pseudo_word(&mut rng);
                if !base.contains(cand.as_str()) && used.insert(cand.clone()) {
                    break cand;
                }
            };
            bijection.insert(w.to_string(), twin);
        }
        Self::with_parts(grammar, bijection, word_order, seed)
    }

    /// Twin that is the base language itself.
    pub fn identity(grammar: Grammar) -> Result<Self> {
        let bijection = grammar.words().map(|w| (w.to_string(), w.to_string())).collect();
        Self::with_parts(grammar, bijection, WordOrder::SRO, 0)
    }

    pub fn with_parts(
        grammar: Grammar,
        token_bijection: BTreeMap<String, String>,
        word_order: WordOrder,
        seed: u64,
    ) -> Result<Self> {
        let spec = TwinLanguageSpec { grammar, token_bijection, word_order, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Bijection covers exactly the base vocabulary, is injective, and never
    /// maps a word onto a different base word.
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        let base: HashSet<&str> = self.grammar.words().collect();
        if self.token_bijection.len() != base.len() || !self.token_bijection.keys().all(|k| base.contains(k.as_str())) {
            return Err(Error::config("token_bijection must cover exactly the base vocabulary"));
        }
        let mut images = HashSet::new();
        for (k, v) in &self.token_bijection {
            if v.is_empty() || v.chars().any(char::is_whitespace) || v.starts_with('<') {
                return Err(Error::config(format!("twin word {v:?} is not a plain token")));
            }
            if !images.insert(v.as_str()) {
                return Err(Error::config(format!("token_bijection maps two words onto {v:?}")));
            }
            if v != k && base.contains(v.as_str()) {
                return Err(Error::config(format!("twin word {v:?} collides with a base word")));
            }
        }
        Ok(())
    }

    pub fn base_vocab(&self) -> Vec<String> {
        self.grammar.words().map(str::to_string).collect()
    }

    pub fn twin(&self, word: &str) -> &str {
        &self.token_bijection[word]
    }

    /// Map one word of language `lang` to its base form, if it is one.
    pub fn to_base<'a>(&'a self, word: &'a str, lang: Lang) -> Option<&'a str> {
        match lang {
            Lang::A => self.token_bijection.contains_key(word).then_some(word),
            Lang::B => self.inverse().get(word).copied(),
        }
    }

    fn inverse(&self) -> HashMap<&str, &str> {
        self.token_bijection.iter().map(|(k, v)| (v.as_str(), k.as_str())).collect()
    }

    fn word(&self, w: &str, lang: Lang) -> String {
        match lang {
            Lang::A => w.to_string(),
            Lang::B => self.twin(w).to_string(),
        }
    }

    /// Surface words of one clause.
    pub fn render_clause(&self, c: Clause, lang: Lang) -> Vec<String> {
        let g = &self.grammar;
        self.render_roles(&g.subjects[c.subject], &g.relations[c.relation], &g.objects[c.object], lang)
    }

    fn render_roles(&self, s: &str, r: &str, o: &str, lang: Lang) -> Vec<String> {
        let (s, r, o) = (self.word(s, lang), self.word(r, lang), self.word(o, lang));
        match lang {
            Lang::A => vec![s, r, o],
            Lang::B => self.word_order.arrange(s, r, o).to_vec(),
        }
    }

    /// A question asking for the object of `(subject, relation)`.
    pub fn render_question(&self, subject: usize, relation: usize, lang: Lang) -> Vec<String> {
        let g = &self.grammar;
        self.render_roles(&g.subjects[subject], &g.relations[relation], WHAT, lang)
    }

    pub fn render_meaning(&self, m: &Meaning, lang: Lang) -> Vec<String> {
        let mut out = Vec::new();
        for (i, &c) in m.clauses.iter().enumerate() {
            if i > 0 {
                out.push(self.word(AND, lang));
            }
            out.extend(self.render_clause(c, lang));
        }
        out
    }

    /// Translate language-B text back into language A: inverse bijection per
    /// word, inverse role order per clause.
    pub fn back_translate(&self, words: &[String]) -> Result<Vec<String>> {
        let inv = self.inverse();
        let base: Vec<&str> = words
            .iter()
            .map(|w| inv.get(w.as_str()).copied().ok_or_else(|| Error::input(format!("{w:?} is not a twin word"))))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(words.len());
        for (i, clause) in base.split(|&w| w == AND).enumerate() {
            let clause: [&str; 3] = clause
                .try_into()
                .map_err(|_| Error::input(format!("clause {i} does not have exactly three words")))?;
            if i > 0 {
                out.push(AND.to_string());
            }
            let (s, r, o) = self.word_order.unarrange(&clause);
            out.extend([s, r, o].map(str::to_string));
        }
        Ok(out)
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w
}

/// Shared token table for both languages and the delimiter tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(spec: &TwinLanguageSpec) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(spec.base_vocab());
        for w in spec.grammar.words() {
            let t = spec.twin(w);
            if t != w {
                tokens.push(t.to_string());
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn special(&self, token: &str) -> usize {
        self.index[token]
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::data(format!("token {w:?} is not in the vocabulary"))))
            .collect()
    }

    /// Words followed by end-of-sequence.
    pub fn encode_text(&self, words: &[String]) -> Result<Vec<usize>> {
        let mut ids = self.encode(words)?;
        ids.push(self.eos());
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>").to_string()).collect()
    }
}

/// One subject-relation-object statement, by grammar index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Clause {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Sentence,
    Paragraph,
}

/// A sentence (one clause) or a paragraph (3 to 6 clauses).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Meaning {
    pub clauses: Vec<Clause>,
}

impl Meaning {
    /// Stable id: the clause index itself for sentences, a hash for paragraphs.
    pub fn id(&self, grammar: &Grammar) -> u64 {
        let (r, o) = (grammar.relations.len() as u64, grammar.objects.len() as u64);
        let flat = |c: &Clause| (c.subject as u64 * r + c.relation as u64) * o + c.object as u64;
        if let [c] = self.clauses.as_slice() {
            return flat(c);
        }
        let mut h = Sha256::new();
        for c in &self.clauses {
            h.update(flat(c).to_le_bytes());
        }
        let digest = h.finalize();
        // Top bit set keeps paragraph ids clear of sentence ids.
        u64::from_le_bytes(digest[..8].try_into().unwrap()) | (1 << 63)
    }
}

/// Subject-relation slots that generated text may use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeaningSpace {
    slots: Vec<(usize, usize)>,
    objects: usize,
}

impl MeaningSpace {
    pub fn full(grammar: &Grammar) -> Self {
        let slots = (0..grammar.subjects.len())
            .flat_map(|s| (0..grammar.relations.len()).map(move |r| (s, r)))
            .collect();
        MeaningSpace { slots, objects: grammar.objects.len() }
    }

    /// Every slot not claimed by a fact.
    pub fn excluding_facts(grammar: &Grammar, facts: &FactBase) -> Self {
        let taken: HashSet<(usize, usize)> = facts.facts.iter().map(|f| (f.subject, f.relation)).collect();
        let mut space = Self::full(grammar);
        space.slots.retain(|s| !taken.contains(s));
        space
    }

    pub fn slots(&self) -> &[(usize, usize)] {
        &self.slots
    }

    pub fn sentence_capacity(&self) -> usize {
        self.slots.len() * self.objects
    }

    fn clause(&self, i: usize) -> Clause {
        let (subject, relation) = self.slots[i / self.objects];
        Clause { subject, relation, object: i % self.objects }
    }

    fn random_clause(&self, rng: &mut ChaCha8Rng) -> Clause {
        self.clause(rng.gen_range(0..self.sentence_capacity()))
    }
}

/// One translation pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub granularity: Granularity,
    pub meaning_id: u64,
}

pub const PARAGRAPH_CLAUSES: std::ops::RangeInclusive<usize> = 3..=6;

/// `n` pairwise-distinct meanings rendered in both languages.
pub fn generate_parallel(
    spec: &TwinLanguageSpec,
    space: &MeaningSpace,
    n: usize,
    granularity: Granularity,
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    if n == 0 {
        return Err(Error::input("generate_parallel needs n >= 1"));
    }
    if space.sentence_capacity() == 0 {
        return Err(Error::input("meaning space has no free slots"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meanings: Vec<Meaning> = match granularity {
        Granularity::Sentence => {
            let cap = space.sentence_capacity();
            if n > cap {
                return Err(Error::input(format!("{n} sentences requested but only {cap} distinct meanings exist")));
            }
            rand::seq::index::sample(&mut rng, cap, n)
                .into_iter()
                .map(|i| Meaning { clauses: vec![space.clause(i)] })
                .collect()
        }
        Granularity::Paragraph => {
            if space.sentence_capacity() < *PARAGRAPH_CLAUSES.start() {
                return Err(Error::input("meaning space too small for paragraphs"));
            }
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0usize;
            while out.len() < n {
                attempts += 1;
                if attempts > 100 * n + 1000 {
                    return Err(Error::input(format!("could not draw {n} distinct paragraphs")));
                }
                let k = rng.gen_range(PARAGRAPH_CLAUSES);
                let mut clauses: Vec<Clause> = Vec::with_capacity(k);
                while clauses.len() < k {
                    let c = space.random_clause(&mut rng);
                    if !clauses.contains(&c) {
                        clauses.push(c);
                    }
                }
                let m = Meaning { clauses };
                if seen.insert(m.clone()) {
                    out.push(m);
                }
            }
            out
        }
    };
    Ok(meanings
        .iter()
        .map(|m| ParallelPair {
            a: spec.render_meaning(m, Lang::A),
            b: spec.render_meaning(m, Lang::B),
            granularity,
            meaning_id: m.id(&spec.grammar),
        })
        .collect())
}

/// Unpaired text in one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoText {
    pub lang: Lang,
    pub words: Vec<String>,
}

/// Independent random texts per language; a fraction are paragraphs.
pub fn generate_monolingual(
    spec: &TwinLanguageSpec,
    space: &MeaningSpace,
    n_per_lang: usize,
    paragraph_fraction: f64,
    seed: u64,
) -> Result<Vec<MonoText>> {
    if space.sentence_capacity() < *PARAGRAPH_CLAUSES.end() {
        return Err(Error::input("meaning space too small for monolingual text"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_lang);
    for lang in [Lang::A, Lang::B] {
        for _ in 0..n_per_lang {
            let k = if rng.gen_bool(paragraph_fraction.clamp(0.0, 1.0)) { rng.gen_range(PARAGRAPH_CLAUSES) } else { 1 };
            let mut clauses: Vec<Clause> = Vec::with_capacity(k);
            while clauses.len() < k {
                let c = space.random_clause(&mut rng);
                if !clauses.contains(&c) {
                    clauses.push(c);
                }
            }
            out.push(MonoText { lang, words: spec.render_meaning(&Meaning { clauses }, lang) });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// A translation pair as token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub meaning_id: u64,
    pub granularity: Granularity,
}

pub fn encode_pairs(vocab: &Vocabulary, pairs: &[ParallelPair]) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(EncodedPair {
                a: vocab.encode_text(&p.a)?,
                b: vocab.encode_text(&p.b)?,
                meaning_id: p.meaning_id,
                granularity: p.granularity,
            })
        })
        .collect()
}

/// Index-aligned batches: `a[i]` translates `b[i]`, all other indices are negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    pub lang_a_sequences: Vec<Vec<usize>>,
    pub lang_b_sequences: Vec<Vec<usize>>,
    pub meaning_ids: Vec<u64>,
    pub granularity: Granularity,
}

impl ParallelBatch {
    pub fn len(&self) -> usize {
        self.lang_a_sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lang_a_sequences.is_empty()
    }
}

/// Shuffle and cut into batches of `t`, dropping the ragged tail.
pub fn make_batches(pairs: &[EncodedPair], t: usize, seed: u64) -> Result<Vec<ParallelBatch>> {
    if t < 1 {
        return Err(Error::input("batch size must be >= 1"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = pairs.iter().find(|p| !seen.insert(p.meaning_id)) {
        return Err(Error::input(format!("meaning {} occurs twice; negatives would not be true negatives", dup.meaning_id)));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks_exact(t)
        .map(|chunk| ParallelBatch {
            lang_a_sequences: chunk.iter().map(|&i| pairs[i].a.clone()).collect(),
            lang_b_sequences: chunk.iter().map(|&i| pairs[i].b.clone()).collect(),
            meaning_ids: chunk.iter().map(|&i| pairs[i].meaning_id).collect(),
            granularity: pairs[chunk[0]].granularity,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl Fact {
    pub fn clause(&self) -> Clause {
        Clause { subject: self.subject, relation: self.relation, object: self.object }
    }
}

/// Facts with unique `(subject, relation)`, so every question has one answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactBase {
    pub facts: Vec<Fact>,
}

impl FactBase {
    pub fn generate(grammar: &Grammar, n: usize, seed: u64) -> Result<Self> {
        let cap = grammar.slot_count();
        if n > cap {
            return Err(Error::input(format!("{n} facts requested but only {cap} (subject, relation) slots exist")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = grammar.relations.len();
        let facts = rand::seq::index::sample(&mut rng, cap, n)
            .into_iter()
            .enumerate()
            .map(|(id, slot)| Fact {
                id,
                subject: slot / r,
                relation: slot % r,
                object: rng.gen_range(0..grammar.objects.len()),
            })
            .collect();
        let fb = FactBase { facts };
        fb.validate()?;
        Ok(fb)
    }

    pub fn validate(&self) -> Result<()> {
        let mut slots = HashSet::new();
        for (i, f) in self.facts.iter().enumerate() {
            if f.id != i {
                return Err(Error::data(format!("fact at position {i} has id {}", f.id)));
            }
            if !slots.insert((f.subject, f.relation)) {
                return Err(Error::data(format!("facts share (subject, relation) = ({}, {})", f.subject, f.relation)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&Fact> {
        self.facts.get(id)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// One question. `gold` is the base-language object word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub q: Vec<String>,
    pub gold: String,
    pub lang: Lang,
    pub fact_id: usize,
}

/// What a fact is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactRole {
    /// Taught in language A only, tested in language B.
    Transfer,
    /// Shown in language B as a format demonstration; never tested.
    Demo,
    /// Never taught; tested as a control.
    Control,
}

/// Fractions of the fact base per role; the rest is control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSplit {
    pub transfer: f64,
    pub demo: f64,
}

impl Default for QaSplit {
    fn default() -> Self {
        QaSplit { transfer: 0.5, demo: 0.375 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaSets {
    pub roles: Vec<FactRole>,
    /// Language-A questions on transfer facts: the injected knowledge.
    pub english_train: Vec<QaItem>,
    /// Language-B questions on demo facts.
    pub twin_demo: Vec<QaItem>,
    /// Language-B questions on transfer and control facts.
    pub twin_test: Vec<QaItem>,
    /// Language-A questions on the same facts as `twin_test`, for consistency.
    pub english_probe: Vec<QaItem>,
}

pub fn qa_item(spec: &TwinLanguageSpec, fact: &Fact, lang: Lang) -> QaItem {
    QaItem {
        q: spec.render_question(fact.subject, fact.relation, lang),
        gold: spec.grammar.objects[fact.object].clone(),
        lang,
        fact_id: fact.id,
    }
}

/// Full-clause answer to a fact's question.
pub fn answer_words(spec: &TwinLanguageSpec, fact: &Fact, lang: Lang) -> Vec<String> {
    spec.render_clause(fact.clause(), lang)
}

pub fn generate_qa(facts: &FactBase, spec: &TwinLanguageSpec, split: QaSplit, seed: u64) -> Result<QaSets> {
    if facts.is_empty() {
        return Err(Error::input("fact base is empty"));
    }
    if !(split.transfer > 0.0 && split.demo >= 0.0 && split.transfer + split.demo <= 1.0) {
        return Err(Error::config("qa split fractions must be positive and sum to at most 1"));
    }
    let n = facts.len();
    let n_transfer = ((n as f64) * split.transfer).round() as usize;
    let n_demo = ((n as f64) * split.demo).round() as usize;
    if n_transfer == 0 || n_transfer + n_demo > n {
        return Err(Error::input(format!("split of {n} facts leaves no transfer facts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut roles = vec![FactRole::Control; n];
    for &i in &order[..n_transfer] {
        roles[i] = FactRole::Transfer;
    }
    for &i in &order[n_transfer..n_transfer + n_demo] {
        roles[i] = FactRole::Demo;
    }
    let by_role = |role: FactRole, lang: Lang| -> Vec<QaItem> {
        facts.facts.iter().filter(|f| roles[f.id] == role).map(|f| qa_item(spec, f, lang)).collect()
    };
    let english_train = by_role(FactRole::Transfer, Lang::A);
    let twin_demo = by_role(FactRole::Demo, Lang::B);
    let tested = |lang: Lang| -> Vec<QaItem> {
        facts.facts.iter().filter(|f| roles[f.id] != FactRole::Demo).map(|f| qa_item(spec, f, lang)).collect()
    };
    let (twin_test, english_probe) = (tested(Lang::B), tested(Lang::A));
    let sets = QaSets { roles, english_train, twin_demo, twin_test, english_probe };
    let overlap = test_train_overlap(&sets);
    if overlap > 0 {
        return Err(Error::input(format!("{overlap} test questions also occur in training")));
    }
    Ok(sets)
}

/// Number of twin test questions whose surface form appears in training.
pub fn test_train_overlap(sets: &QaSets) -> usize {
    let train: HashSet<&Vec<String>> = sets.english_train.iter().chain(&sets.twin_demo).map(|i| &i.q).collect();
    sets.twin_test.iter().filter(|i| train.contains(&i.q)).count()
}

/// Question in the twin language answered through English reasoning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct XCoTExample {
    pub fact_id: usize,
    pub question_tgt: Vec<String>,
    pub reasoning_en: Vec<String>,
    pub answer_en: Vec<String>,
    pub answer_tgt: Vec<String>,
    pub gold_object: String,
}

impl XCoTExample {
    /// `<q> .. <think_en> .. <ans_en> .. <ans_tgt> .. <eos>`
    pub fn serialize(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.question_tgt.len() + self.reasoning_en.len() + 12);
        out.push(Q.to_string());
        out.extend(self.question_tgt.iter().cloned());
        out.push(THINK_EN.to_string());
        out.extend(self.reasoning_en.iter().cloned());
        out.push(ANS_EN.to_string());
        out.extend(self.answer_en.iter().cloned());
        out.push(ANS_TGT.to_string());
        out.extend(self.answer_tgt.iter().cloned());
        out.push(EOS.to_string());
        out
    }

    /// Strict inverse of [`serialize`](Self::serialize).
    pub fn parse(tokens: &[String], fact_id: usize, spec: &TwinLanguageSpec) -> Result<Self> {
        let s = Sections::split(tokens);
        if !s.well_formed {
            return Err(Error::data("xcot sequence is missing a delimiter or is out of order"));
        }
        if s.question.is_empty() || s.reasoning.is_empty() || s.answer_en.is_empty() || s.answer_tgt.is_empty() {
            return Err(Error::data("xcot sequence has an empty section"));
        }
        let gold_object = s
            .answer_en
            .iter()
            .find(|w| spec.grammar.objects.contains(w))
            .cloned()
            .ok_or_else(|| Error::data("xcot English answer names no object"))?;
        Ok(XCoTExample {
            fact_id,
            question_tgt: s.question,
            reasoning_en: s.reasoning,
            answer_en: s.answer_en,
            answer_tgt: s.answer_tgt,
            gold_object,
        })
    }
}

/// Delimited sections of a serialized or generated XCoT sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sections {
    pub question: Vec<String>,
    pub reasoning: Vec<String>,
    pub answer_en: Vec<String>,
    pub answer_tgt: Vec<String>,
    /// Every delimiter present exactly once, in order, ending in `<eos>`.
    pub well_formed: bool,
}

impl Sections {
    /// Split on delimiters. Text before `<q>` is ignored; parsing stops at
    /// `<eos>`. Sections that were never opened stay empty.
    pub fn split(tokens: &[String]) -> Self {
        const ORDER: [&str; 5] = [Q, THINK_EN, ANS_EN, ANS_TGT, EOS];
        let mut out = Sections::default();
        let mut stage = 0usize; // index into ORDER of the next expected delimiter
        let mut in_order = true;
        for t in tokens {
            if let Some(pos) = ORDER.iter().position(|d| d == t) {
                if pos == stage {
                    stage += 1;
                } else {
                    in_order = false;
                }
                if t == EOS {
                    break;
                }
                continue;
            }
            let target = match stage {
                1 => &mut out.question,
                2 => &mut out.reasoning,
                3 => &mut out.answer_en,
                4 => &mut out.answer_tgt,
                _ => continue,
            };
            target.push(t.clone());
        }
        out.well_formed = in_order && stage == ORDER.len();
        out
    }
}

/// English paraphrase of the question: the same question in language A.
pub fn format_xcot(item: &QaItem, facts: &FactBase, spec: &TwinLanguageSpec) -> Result<XCoTExample> {
    let fact = facts.get(item.fact_id).ok_or_else(|| Error::input(format!("unknown fact {}", item.fact_id)))?;
    let question_tgt = match item.lang {
        Lang::B => item.q.clone(),
        Lang::A => qa_item(spec, fact, Lang::B).q,
    };
    Ok(XCoTExample {
        fact_id: fact.id,
        question_tgt,
        reasoning_en: spec.render_question(fact.subject, fact.relation, Lang::A),
        answer_en: answer_words(spec, fact, Lang::A),
        answer_tgt: answer_words(spec, fact, Lang::B),
        gold_object: spec.grammar.objects[fact.object].clone(),
    })
}

/// Chain-of-thought layout for an English question, which stops at the
/// English answer: `<q> q <think_en> q <ans_en> answer <eos>`.
pub fn english_cot_sequence(item: &QaItem, facts: &FactBase, spec: &TwinLanguageSpec) -> Result<Vec<String>> {
    if item.lang != Lang::A {
        return Err(Error::input(format!("english_cot_sequence needs a language-a question, got {}", item.lang)));
    }
    let fact = facts.get(item.fact_id).ok_or_else(|| Error::input(format!("unknown fact {}", item.fact_id)))?;
    let mut out = vec![Q.to_string()];
    out.extend(item.q.iter().cloned());
    out.push(THINK_EN.to_string());
    out.extend(item.q.iter().cloned());
    out.push(ANS_EN.to_string());
    out.extend(answer_words(spec, fact, Lang::A));
    out.push(EOS.to_string());
    Ok(out)
}

/// Prompt and response for direct answering: `<q> question <ans_*> answer <eos>`.
pub fn direct_sequence(item: &QaItem, facts: &FactBase, spec: &TwinLanguageSpec) -> Result<Vec<String>> {
    let fact = facts.get(item.fact_id).ok_or_else(|| Error::input(format!("unknown fact {}", item.fact_id)))?;
    let mut out = vec![Q.to_string()];
    out.extend(item.q.iter().cloned());
    out.push(answer_delimiter(item.lang).to_string());
    out.extend(answer_words(spec, fact, item.lang));
    out.push(EOS.to_string());
    Ok(out)
}

pub fn answer_delimiter(lang: Lang) -> &'static str {
    match lang {
        Lang::A => ANS_EN,
        Lang::B => ANS_TGT,
    }
}

/// SHA-256 over a sequence of byte chunks, hex encoded.
pub fn content_hash<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    hex::encode(h.finalize())
}
