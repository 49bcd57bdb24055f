//! Tiny decoder-only causal transformer.
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, then `x + mlp(ln2(x))`), learned
//! absolute positions, a final layer norm, and an output projection tied to
//! the token embedding unless configured otherwise. `forward` returns the
//! residual stream after every block so alignment can be measured per layer.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod checkpoint;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 512,
            max_seq_len: 64,
            seed: 0,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("model.n_layers must be >= 2"));
        }
        if self.n_heads == 0 {
            return Err(Error::config("model.n_heads must be >= 1"));
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("model.d_model must be a positive multiple of model.n_heads"));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config("model.d_ff, model.vocab_size and model.max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which layer a parameter belongs to, for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Layer(usize),
    Head,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    fn new() -> Self {
        ParameterSet { names: vec![], groups: vec![], tensors: vec![] }
    }

    fn push(&mut self, name: String, group: ParamGroup, t: Tensor) {
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor)> {
        self.names.iter().zip(&self.groups).zip(&self.tensors).map(|((n, g), t)| (n.as_str(), *g, t))
    }

    /// Rebuild from names and tensors, assigning groups from the naming scheme.
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParameterSet::new();
        for (name, t) in named {
            let group = group_of(&name)?;
            set.push(name, group, t);
        }
        Ok(set)
    }
}

/// Group from a parameter name: `embed.*`, `layer{i}.*` or `head.*`.
pub fn group_of(name: &str) -> Result<ParamGroup> {
    if name.starts_with("embed.") {
        return Ok(ParamGroup::Embedding);
    }
    if name.starts_with("head.") {
        return Ok(ParamGroup::Head);
    }
    if let Some(rest) = name.strip_prefix("layer") {
        if let Some((idx, _)) = rest.split_once('.') {
            if let Ok(i) = idx.parse() {
                return Ok(ParamGroup::Layer(i));
            }
        }
    }
    Err(Error::data(format!("parameter name {name:?} has no layer group")))
}

/// Token ids padded on the right to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    real: Vec<bool>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        Self::padded_to(seqs, pad_id, 0)
    }

    /// Like [`from_sequences`](Self::from_sequences) but at least `min_len` long.
    pub fn padded_to(seqs: &[Vec<usize>], pad_id: usize, min_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::input("empty token batch"));
        }
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::input("token batch contains an empty sequence"));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap().max(min_len);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut real = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            real.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(pad_id).take(len - s.len()));
            real.extend(std::iter::repeat(false).take(len - s.len()));
        }
        Ok(TokenBatch { ids, real, batch: seqs.len(), len })
    }

    /// Explicit ids and real-token mask, both `batch * len` long.
    pub fn from_parts(ids: Vec<usize>, real: Vec<bool>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len || real.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::input("token batch parts do not match batch x len"));
        }
        Ok(TokenBatch { ids, real, batch, len })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn real(&self) -> &[bool] {
        &self.real
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn real_row(&self, b: usize) -> &[bool] {
        &self.real[b * self.len..(b + 1) * self.len]
    }

    /// Number of real tokens per sequence.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch).map(|b| self.real_row(b).iter().filter(|&&r| r).count()).collect()
    }
}

/// How a sequence is summarized into one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Last-layer state at the last real position.
    FinalHiddenState,
    /// Last-layer states averaged over real positions.
    MeanPool,
}

/// Node ids of the parameters bound into one graph, in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: Vec<NodeId>,
    trainable: Vec<bool>,
}

impl BoundParams {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }
}

pub struct ForwardOutput {
    /// Residual stream after each block, each `[batch, len, d_model]`.
    pub hidden: Vec<NodeId>,
    /// Next-token logits `[batch, len, vocab]`.
    pub logits: NodeId,
}

impl ForwardOutput {
    pub fn last_hidden(&self) -> NodeId {
        *self.hidden.last().expect("at least two layers")
    }
}

/// Contiguous low / mid / high layer ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegments {
    pub low: Range<usize>,
    pub mid: Range<usize>,
    pub high: Range<usize>,
}

impl LayerSegments {
    pub fn new(low: Range<usize>, mid: Range<usize>, high: Range<usize>, n_layers: usize) -> Result<Self> {
        let s = LayerSegments { low, mid, high };
        s.validate(n_layers)?;
        Ok(s)
    }

    /// Three near-equal contiguous thirds; leftovers go to the middle first.
    pub fn even(n_layers: usize) -> Result<Self> {
        if n_layers < 3 {
            return Err(Error::config(format!("cannot split {n_layers} layers into three segments")));
        }
        let base = n_layers / 3;
        let extra = n_layers % 3;
        let mid_len = base + usize::from(extra >= 1);
        let high_len = base + usize::from(extra >= 2);
        let low_len = n_layers - mid_len - high_len;
        Self::new(0..low_len, low_len..low_len + mid_len, low_len + mid_len..n_layers, n_layers)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let ok = self.low.start == 0
            && self.low.end == self.mid.start
            && self.mid.end == self.high.start
            && self.high.end == n_layers
            && !self.low.is_empty()
            && !self.mid.is_empty()
            && !self.high.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "segments {:?}/{:?}/{:?} do not partition 0..{n_layers} in order",
                self.low, self.mid, self.high
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Low,
    Mid,
    High,
    All,
    Embeddings,
    Head,
}

impl std::str::FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "low" => Segment::Low,
            "mid" => Segment::Mid,
            "high" => Segment::High,
            "all" => Segment::All,
            "embeddings" => Segment::Embeddings,
            "head" => Segment::Head,
            other => return Err(Error::config(format!("unknown layer segment {other:?}"))),
        })
    }
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Segment::Low => "low",
            Segment::Mid => "mid",
            Segment::High => "high",
            Segment::All => "all",
            Segment::Embeddings => "embeddings",
            Segment::Head => "head",
        };
        f.write_str(s)
    }
}

/// Per-parameter trainable flags, aligned with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(params: &ParameterSet) -> Self {
        FreezeMask { names: params.names.clone(), trainable: vec![true; params.len()] }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn count_trainable(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

/// Trainable flags for a selection of segments. Embeddings and the head are
/// frozen unless selected directly or through `all`.
pub fn freeze_mask(params: &ParameterSet, segments: &LayerSegments, selection: &[Segment]) -> Result<FreezeMask> {
    if selection.is_empty() {
        return Err(Error::input("freeze selection is empty"));
    }
    let has = |s: Segment| selection.contains(&Segment::All) || selection.contains(&s);
    let trainable = params
        .groups
        .iter()
        .map(|g| match *g {
            ParamGroup::Embedding => has(Segment::Embeddings),
            ParamGroup::Head => has(Segment::Head),
            ParamGroup::Layer(i) => {
                (has(Segment::Low) && segments.low.contains(&i))
                    || (has(Segment::Mid) && segments.mid.contains(&i))
                    || (has(Segment::High) && segments.high.contains(&i))
            }
        })
        .collect();
    Ok(FreezeMask { names: params.names.clone(), trainable })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    /// Fresh model with GPT-2 style initialization drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let proj_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let proj = Normal::new(0.0, proj_std).expect("valid std");
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut gauss = |shape: &[usize], dist: &Normal<f64>| {
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        let mut p = ParameterSet::new();
        p.push("embed.tokens".into(), ParamGroup::Embedding, gauss(&[v, d], &normal));
        p.push("embed.positions".into(), ParamGroup::Embedding, gauss(&[config.max_seq_len, d], &normal));
        for l in 0..config.n_layers {
            let grp = ParamGroup::Layer(l);
            p.push(format!("layer{l}.ln1.gamma"), grp, Tensor::full(&[d], 1.0));
            p.push(format!("layer{l}.ln1.beta"), grp, Tensor::zeros(&[d]));
            p.push(format!("layer{l}.attn.wq"), grp, gauss(&[d, d], &normal));
            p.push(format!("layer{l}.attn.wk"), grp, gauss(&[d, d], &normal));
            p.push(format!("layer{l}.attn.wv"), grp, gauss(&[d, d], &normal));
            p.push(format!("layer{l}.attn.wo"), grp, gauss(&[d, d], &proj));
            p.push(format!("layer{l}.ln2.gamma"), grp, Tensor::full(&[d], 1.0));
            p.push(format!("layer{l}.ln2.beta"), grp, Tensor::zeros(&[d]));
            p.push(format!("layer{l}.mlp.w1"), grp, gauss(&[d, f], &normal));
            p.push(format!("layer{l}.mlp.b1"), grp, Tensor::zeros(&[f]));
            p.push(format!("layer{l}.mlp.w2"), grp, gauss(&[f, d], &proj));
            p.push(format!("layer{l}.mlp.b2"), grp, Tensor::zeros(&[d]));
        }
        p.push("head.ln.gamma".into(), ParamGroup::Head, Tensor::full(&[d], 1.0));
        p.push("head.ln.beta".into(), ParamGroup::Head, Tensor::zeros(&[d]));
        if !config.tie_embeddings {
            p.push("head.out".into(), ParamGroup::Head, gauss(&[d, v], &normal));
        }
        Ok(Model { config, params: p })
    }

    /// Register parameters on `g`: trainable ones as leaves, the rest as constants.
    pub fn bind(&self, g: &mut Graph, mask: Option<&FreezeMask>) -> BoundParams {
        let mut nodes = Vec::with_capacity(self.params.len());
        let mut trainable = Vec::with_capacity(self.params.len());
        for (i, t) in self.params.tensors.iter().enumerate() {
            let train = mask.map_or(true, |m| m.is_trainable(i));
            nodes.push(if train { g.leaf(t.clone()) } else { g.constant(t.clone()) });
            trainable.push(train);
        }
        BoundParams { nodes, trainable }
    }

    /// Register every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        let mut nodes = Vec::with_capacity(self.params.len());
        for t in &self.params.tensors {
            nodes.push(g.constant(t.clone()));
        }
        BoundParams { trainable: vec![false; nodes.len()], nodes }
    }

    fn node(&self, p: &BoundParams, name: &str) -> NodeId {
        p.nodes[self.params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.len() > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = batch.ids().iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::input(format!("token id {bad} out of range for vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, batch: &TokenBatch, causal: bool) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, l) = (batch.batch(), batch.len());
        let dh = cfg.head_dim();

        let tok = g.embedding(self.node(p, "embed.tokens"), batch.ids(), &[b, l]);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.embedding(self.node(p, "embed.positions"), &pos_ids, &[b, l]);
        let mut x = g.elem_add(tok, pos);

        // [b, l, l]: query i may not see key j when j is in the future or padding.
        let mut mask = Vec::with_capacity(b * l * l);
        for bi in 0..b {
            let real = batch.real_row(bi);
            for i in 0..l {
                for (j, &r) in real.iter().enumerate() {
                    mask.push((causal && j > i) || !r);
                }
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();

        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let pn = |s: &str| self.node(p, &format!("layer{layer}.{s}"));
            let h = g.layer_norm(x, pn("ln1.gamma"), pn("ln1.beta"), LN_EPS);
            let q = g.matmul(h, pn("attn.wq"));
            let k = g.matmul(h, pn("attn.wk"));
            let v = g.matmul(h, pn("attn.wv"));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let qh = g.slice(q, 2, s, e);
                let kh = g.slice(k, 2, s, e);
                let vh = g.slice(v, 2, s, e);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let scores = g.masked_fill(scores, &mask, MASKED);
                let att = g.softmax(scores);
                heads.push(g.matmul(att, vh));
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2) };
            let o = g.matmul(cat, pn("attn.wo"));
            x = g.elem_add(x, o);

            let h2 = g.layer_norm(x, pn("ln2.gamma"), pn("ln2.beta"), LN_EPS);
            let f = g.matmul(h2, pn("mlp.w1"));
            let f = g.add(f, pn("mlp.b1"));
            let f = g.gelu(f);
            let f = g.matmul(f, pn("mlp.w2"));
            let f = g.add(f, pn("mlp.b2"));
            x = g.elem_add(x, f);
            hidden.push(x);
        }

        let hf = g.layer_norm(x, self.node(p, "head.ln.gamma"), self.node(p, "head.ln.beta"), LN_EPS);
        let out_w = if cfg.tie_embeddings {
            g.transpose(self.node(p, "embed.tokens"))
        } else {
            self.node(p, "head.out")
        };
        let logits = g.matmul(hf, out_w);
        debug_assert_eq!(g.shape(logits), &[b, l, cfg.vocab_size]);
        Ok(ForwardOutput { hidden, logits })
    }

    /// Inference-only forward returning plain tensors.
    pub fn forward_values(&self, batch: &TokenBatch, causal: bool) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, batch, causal)?;
        g.check_finite()?;
        let hidden = out.hidden.iter().map(|&h| g.value(h).clone()).collect();
        Ok((hidden, g.value(out.logits).clone()))
    }
}

/// Pool `hidden` `[batch, len, d]` into one vector per sequence, shape `[batch, d]`.
pub fn sentence_embedding(g: &mut Graph, hidden: NodeId, batch: &TokenBatch, mode: EmbeddingMode) -> Result<NodeId> {
    let weights = pooling_weights(batch, mode)?;
    let (b, l) = (batch.batch(), batch.len());
    assert_eq!(&g.shape(hidden)[..2], &[b, l], "hidden states do not match batch");
    let w = g.constant(Tensor::from_parts(vec![b, l, 1], weights));
    let weighted = g.mul(hidden, w);
    Ok(g.sum(weighted, 1))
}

/// Per-position pooling weights, `batch * len` long.
pub fn pooling_weights(batch: &TokenBatch, mode: EmbeddingMode) -> Result<Vec<f64>> {
    let l = batch.len();
    let mut w = vec![0.0; batch.batch() * l];
    for b in 0..batch.batch() {
        let real = batch.real_row(b);
        let n = real.iter().filter(|&&r| r).count();
        if n == 0 {
            return Err(Error::input(format!("sequence {b} has no real tokens")));
        }
        match mode {
            EmbeddingMode::FinalHiddenState => {
                let last = real.iter().rposition(|&r| r).unwrap();
                w[b * l + last] = 1.0;
            }
            EmbeddingMode::MeanPool => {
                for (j, &r) in real.iter().enumerate() {
                    if r {
                        w[b * l + j] = 1.0 / n as f64;
                    }
                }
            }
        }
    }
    Ok(w)
}

/// Value-level pooling of one layer's hidden states, for evaluation.
pub fn pool_values(hidden: &Tensor, batch: &TokenBatch, mode: EmbeddingMode) -> Result<Vec<Vec<f64>>> {
    let w = pooling_weights(batch, mode)?;
    let d = hidden.last_dim();
    let l = batch.len();
    Ok((0..batch.batch())
        .map(|b| {
            let mut v = vec![0.0; d];
            for j in 0..l {
                let wj = w[b * l + j];
                if wj != 0.0 {
                    for (acc, h) in v.iter_mut().zip(hidden.row(b * l + j)) {
                        *acc += wj * h;
                    }
                }
            }
            v
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 11, max_seq_len: 8, seed: 3, tie_embeddings: true }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_layers: 1, ..small() }.validate().is_err());
        assert!(ModelConfig { d_model: 9, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn shapes() {
        let m = Model::init(small()).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3, 4, 5]], 0).unwrap();
        let (hidden, logits) = m.forward_values(&batch, true).unwrap();
        assert_eq!(hidden.len(), 2);
        for h in &hidden {
            assert_eq!(h.shape(), &[1, 5, 8]);
        }
        assert_eq!(logits.shape(), &[1, 5, 11]);
    }

    #[test]
    fn input_errors() {
        let m = Model::init(small()).unwrap();
        let bad = TokenBatch::from_sequences(&[vec![1, 11]], 0).unwrap();
        assert!(matches!(m.forward_values(&bad, true), Err(Error::Input(_))));
        let long = TokenBatch::from_sequences(&[vec![1; 9]], 0).unwrap();
        assert!(matches!(m.forward_values(&long, true), Err(Error::Input(_))));
    }

    #[test]
    fn groups_from_names() {
        assert_eq!(group_of("embed.tokens").unwrap(), ParamGroup::Embedding);
        assert_eq!(group_of("layer12.mlp.w1").unwrap(), ParamGroup::Layer(12));
        assert_eq!(group_of("head.ln.beta").unwrap(), ParamGroup::Head);
        assert!(group_of("bogus").is_err());
    }

    #[test]
    fn segments() {
        let s = LayerSegments::even(6).unwrap();
        assert_eq!((s.low, s.mid, s.high), (0..2, 2..4, 4..6));
        let s = LayerSegments::even(7).unwrap();
        assert_eq!((s.low.clone(), s.mid.clone(), s.high.clone()), (0..2, 2..5, 5..7));
        assert!(LayerSegments::new(0..2, 3..4, 4..6, 6).is_err());
        assert!(LayerSegments::even(2).is_err());
    }

    #[test]
    fn freeze_selection() {
        let m = Model::init(ModelConfig { n_layers: 6, ..small() }).unwrap();
        let seg = LayerSegments::even(6).unwrap();
        let all = freeze_mask(&m.params, &seg, &[Segment::All]).unwrap();
        assert_eq!(all.count_trainable(), m.params.len());
        let mid = freeze_mask(&m.params, &seg, &[Segment::Mid]).unwrap();
        for (i, (_, grp, _)) in m.params.iter().enumerate() {
            let want = matches!(grp, ParamGroup::Layer(2) | ParamGroup::Layer(3));
            assert_eq!(mid.is_trainable(i), want);
        }
        assert!(matches!(freeze_mask(&m.params, &seg, &[]), Err(Error::Input(_))));
        let emb = freeze_mask(&m.params, &seg, &[Segment::Embeddings, Segment::Head]).unwrap();
        assert_eq!(emb.count_trainable(), 4);
    }

    #[test]
    fn single_token_modes_agree() {
        let m = Model::init(small()).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![4]], 0).unwrap();
        let (hidden, _) = m.forward_values(&batch, true).unwrap();
        let last = hidden.last().unwrap();
        let a = pool_values(last, &batch, EmbeddingMode::FinalHiddenState).unwrap();
        let b = pool_values(last, &batch, EmbeddingMode::MeanPool).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_pool_is_average() {
        let hidden = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![1, 2]], 0).unwrap();
        let v = pool_values(&hidden, &batch, EmbeddingMode::MeanPool).unwrap();
        assert_eq!(v, vec![vec![2.0, 4.0]]);
        let v = pool_values(&hidden, &batch, EmbeddingMode::FinalHiddenState).unwrap();
        assert_eq!(v, vec![vec![3.0, 6.0]]);
    }

    #[test]
    fn all_pad_is_rejected() {
        let batch = TokenBatch::from_parts(vec![0, 0], vec![false, false], 1, 2).unwrap();
        assert!(matches!(pooling_weights(&batch, EmbeddingMode::MeanPool), Err(Error::Input(_))));
    }

    #[test]
    fn graph_and_value_pooling_agree() {
        let m = Model::init(small()).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![4, 5]], 0).unwrap();
        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let out = m.forward(&mut g, &p, &batch, true).unwrap();
        for mode in [EmbeddingMode::FinalHiddenState, EmbeddingMode::MeanPool] {
            let e = sentence_embedding(&mut g, out.last_hidden(), &batch, mode).unwrap();
            let v = pool_values(g.value(out.last_hidden()), &batch, mode).unwrap();
            assert_eq!(g.shape(e), &[2, 8]);
            for (b, row) in v.iter().enumerate() {
                for (j, x) in row.iter().enumerate() {
                    assert!((g.value(e).row(b)[j] - x).abs() < 1e-15);
                }
            }
        }
    }
}
