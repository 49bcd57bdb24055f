//! Training losses: next-token cross-entropy, the bidirectional in-batch
//! contrastive loss, their weighted sum, and the sentence-to-paragraph
//! curriculum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, Graph, NodeId};
use crate::corpus::Granularity;
use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, TokenBatch};
use crate::tensor::Tensor;

/// Next-token targets for a padded batch: position `t` predicts token `t + 1`.
///
/// `weights` is true where the target is a real token and, if `loss_mask` is
/// given, where the mask selects the target position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NextTokenTargets {
    pub targets: Vec<usize>,
    pub weights: Vec<bool>,
}

impl NextTokenTargets {
    pub fn new(batch: &TokenBatch, loss_mask: Option<&[bool]>) -> Result<Self> {
        let (b, l) = (batch.batch(), batch.len());
        if let Some(m) = loss_mask {
            if m.len() != b * l {
                return Err(Error::input(format!("loss mask has {} entries, batch has {}", m.len(), b * l)));
            }
        }
        let mut targets = vec![0; b * l];
        let mut weights = vec![false; b * l];
        for bi in 0..b {
            for t in 0..l.saturating_sub(1) {
                let next = bi * l + t + 1;
                targets[bi * l + t] = batch.ids()[next];
                weights[bi * l + t] = batch.real()[next] && loss_mask.map_or(true, |m| m[next]);
            }
        }
        Ok(NextTokenTargets { targets, weights })
    }

    pub fn count(&self) -> usize {
        self.weights.iter().filter(|&&w| w).count()
    }
}

/// Mean cross-entropy of `logits` `[.., vocab]` over weighted positions.
pub fn ntp_loss(g: &mut Graph, logits: NodeId, targets: &[usize], weights: &[bool]) -> Result<NodeId> {
    let v = *g.shape(logits).last().unwrap();
    let rows = g.value(logits).numel() / v;
    check_targets(rows, v, targets, weights)?;
    let n = weights.iter().filter(|&&w| w).count() as f64;
    let mut pick = vec![0.0; rows * v];
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w {
            pick[r * v + t] = -1.0 / n;
        }
    }
    let lsm = g.log_softmax(logits);
    let pick = g.constant(Tensor::from_parts(g.shape(logits).to_vec(), pick));
    let picked = g.mul(lsm, pick);
    Ok(g.sum_all(picked))
}

/// Value-only [`ntp_loss`].
pub fn ntp_loss_value(logits: &Tensor, targets: &[usize], weights: &[bool]) -> Result<f64> {
    let v = logits.last_dim();
    let rows = logits.numel() / v;
    check_targets(rows, v, targets, weights)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for r in (0..rows).filter(|&r| weights[r]) {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
        n += 1;
    }
    Ok(total / n as f64)
}

fn check_targets(rows: usize, vocab: usize, targets: &[usize], weights: &[bool]) -> Result<()> {
    if targets.len() != rows || weights.len() != rows {
        return Err(Error::input(format!("{rows} logit rows but {} targets / {} weights", targets.len(), weights.len())));
    }
    if !weights.iter().any(|&w| w) {
        return Err(Error::input("no unmasked target positions"));
    }
    if let Some(&t) = targets.iter().zip(weights).filter(|(_, &w)| w).map(|(t, _)| t).find(|&&t| t >= vocab) {
        return Err(Error::input(format!("target {t} out of range for vocab {vocab}")));
    }
    Ok(())
}

/// Temperature and weight of the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Weight λ of the contrastive term in the joint loss.
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.07, lambda: 1.0 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        check_lambda(self.lambda)
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("contrastive weight must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// Bidirectional in-batch contrastive loss over `emb_a`, `emb_b` `[T, d]`.
///
/// Row `i` of each side is the positive for row `i` of the other; every other
/// row of the opposite language is a negative. Returns
/// `(1/T) Σ_i [-log softmax_j(s_ij/τ)_i - log softmax_j(s_ji/τ)_i]`.
pub fn contrastive_loss(g: &mut Graph, emb_a: NodeId, emb_b: NodeId, tau: f64) -> Result<NodeId> {
    check_temperature(tau)?;
    let (sa, sb) = (g.shape(emb_a).to_vec(), g.shape(emb_b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa != sb {
        return Err(Error::input(format!("contrastive embeddings must both be [T, d]; got {sa:?} and {sb:?}")));
    }
    let t = sa[0];
    let sims = g.cosine_matrix(emb_a, emb_b);
    let logits = g.scale(sims, 1.0 / tau);
    let a_to_b = g.log_softmax(logits);
    let logits_t = g.transpose(logits);
    let b_to_a = g.log_softmax(logits_t);
    let both = g.elem_add(a_to_b, b_to_a);
    let mut diag = vec![0.0; t * t];
    for i in 0..t {
        diag[i * t + i] = -1.0 / t as f64;
    }
    let diag = g.constant(Tensor::from_parts(vec![t, t], diag));
    let picked = g.mul(both, diag);
    Ok(g.sum_all(picked))
}

/// Value-only [`contrastive_loss`] over plain vectors.
pub fn contrastive_loss_value(emb_a: &[Vec<f64>], emb_b: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if emb_a.len() != emb_b.len() || emb_a.is_empty() {
        return Err(Error::input(format!("contrastive batches of {} and {} embeddings", emb_a.len(), emb_b.len())));
    }
    let t = emb_a.len();
    let s: Vec<Vec<f64>> = emb_a.iter().map(|a| emb_b.iter().map(|b| cosine(a, b) / tau).collect()).collect();
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let xs: Vec<f64> = xs.collect();
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..t {
        total += lse(&mut s[i].iter().copied()) - s[i][i];
        total += lse(&mut (0..t).map(|j| s[j][i])) - s[i][i];
    }
    Ok(total / t as f64)
}

/// Per-step losses of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp: f64,
    pub contrastive: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn joint_loss(ntp: f64, contrastive: f64, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    Ok(LossBreakdown { ntp, contrastive, total: ntp + lambda * contrastive, lambda })
}

/// Graph form of [`joint_loss`]. With λ = 0 the contrastive term is dropped
/// from the graph entirely.
pub fn joint_loss_node(g: &mut Graph, ntp: NodeId, contrastive: Option<NodeId>, lambda: f64) -> Result<NodeId> {
    check_lambda(lambda)?;
    match contrastive {
        Some(c) if lambda > 0.0 => {
            let weighted = g.scale(c, lambda);
            Ok(g.elem_add(ntp, weighted))
        }
        _ => Ok(ntp),
    }
}

/// Sentence stage for `stage1_steps`, then paragraph stage for `stage2_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

impl CurriculumSchedule {
    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    /// The paragraph corpus may not be larger than the sentence corpus.
    pub fn check_corpus_sizes(&self, sentences: usize, paragraphs: usize) -> Result<()> {
        if self.stage2_steps > 0 && paragraphs == 0 {
            return Err(Error::config("stage2_steps > 0 but there is no paragraph data"));
        }
        if self.stage1_steps > 0 && sentences == 0 {
            return Err(Error::config("stage1_steps > 0 but there is no sentence data"));
        }
        if paragraphs > sentences && self.stage2_steps > 0 {
            return Err(Error::config(format!(
                "paragraph corpus ({paragraphs}) must not exceed the sentence corpus ({sentences})"
            )));
        }
        Ok(())
    }
}

/// What one curriculum step trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// 1 or 2.
    pub index: u8,
    pub granularity: Granularity,
    pub mode: EmbeddingMode,
}

pub const SENTENCE_STAGE: Stage =
    Stage { index: 1, granularity: Granularity::Sentence, mode: EmbeddingMode::FinalHiddenState };
pub const PARAGRAPH_STAGE: Stage =
    Stage { index: 2, granularity: Granularity::Paragraph, mode: EmbeddingMode::MeanPool };

pub fn curriculum_step(schedule: &CurriculumSchedule, global_step: usize) -> Result<Stage> {
    if global_step >= schedule.total_steps() {
        return Err(Error::input(format!("step {global_step} outside a {}-step curriculum", schedule.total_steps())));
    }
    Ok(if global_step < schedule.stage1_steps { SENTENCE_STAGE } else { PARAGRAPH_STAGE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ntp_uniform_logits() {
        let logits = Tensor::zeros(&[1, 2, 4]);
        let v = ntp_loss_value(&logits, &[1, 3], &[true, true]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let mut g = Graph::new();
        let l = g.leaf(logits);
        let n = ntp_loss(&mut g, l, &[1, 3], &[true, true]).unwrap();
        assert!((g.value(n).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ntp_requires_a_target() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(ntp_loss_value(&logits, &[0, 0], &[false, false]), Err(Error::Input(_))));
    }

    #[test]
    fn next_token_targets_shift_and_mask() {
        let batch = TokenBatch::from_sequences(&[vec![5, 6, 7], vec![8, 9]], 0).unwrap();
        let t = NextTokenTargets::new(&batch, None).unwrap();
        assert_eq!(t.targets, vec![6, 7, 0, 9, 0, 0]);
        assert_eq!(t.weights, vec![true, true, false, true, false, false]);
        let mask = [false, false, true, false, true, false];
        let t = NextTokenTargets::new(&batch, Some(&mask)).unwrap();
        assert_eq!(t.weights, vec![false, true, false, true, false, false]);
    }

    #[test]
    fn contrastive_degenerate_and_hand_cases() {
        assert_eq!(contrastive_loss_value(&[vec![1.0, 2.0]], &[vec![3.0, -1.0]], 0.07).unwrap(), 0.0);
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = contrastive_loss_value(&a, &a, 1.0).unwrap();
        assert!((v - 2.0 * (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_errors() {
        let a = vec![vec![1.0]];
        assert!(matches!(contrastive_loss_value(&a, &a, 0.0), Err(Error::Config(_))));
        assert!(matches!(contrastive_loss_value(&a, &[], 1.0), Err(Error::Input(_))));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        let y = g.leaf(Tensor::zeros(&[3, 3]));
        assert!(matches!(contrastive_loss(&mut g, x, y, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(1.0, 0.5, 1.0).unwrap().total, 1.5);
        assert_eq!(joint_loss(1.0, 0.5, 0.0).unwrap().total, 1.0);
        assert_eq!(joint_loss(1.0, 0.0, 1.0).unwrap().total, 1.0);
        assert!(matches!(joint_loss(1.0, 0.5, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn curriculum_boundary() {
        let s = CurriculumSchedule { stage1_steps: 3, stage2_steps: 2 };
        assert_eq!(curriculum_step(&s, 0).unwrap(), SENTENCE_STAGE);
        assert_eq!(curriculum_step(&s, 2).unwrap(), SENTENCE_STAGE);
        assert_eq!(curriculum_step(&s, 3).unwrap(), PARAGRAPH_STAGE);
        assert_eq!(curriculum_step(&s, 4).unwrap(), PARAGRAPH_STAGE);
        assert!(matches!(curriculum_step(&s, 5), Err(Error::Input(_))));
        let cl = CurriculumSchedule { stage1_steps: 4, stage2_steps: 0 };
        assert!((0..4).all(|i| curriculum_step(&cl, i).unwrap() == SENTENCE_STAGE));
    }

    #[test]
    fn corpus_size_checks() {
        let s = CurriculumSchedule { stage1_steps: 3, stage2_steps: 2 };
        assert!(s.check_corpus_sizes(10, 5).is_ok());
        assert!(matches!(s.check_corpus_sizes(10, 0), Err(Error::Config(_))));
        assert!(s.check_corpus_sizes(5, 10).is_err());
    }
}
