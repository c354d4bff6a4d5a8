//! Causal and masked language-modeling objectives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::{AttentionMode, Batch, Target};
use super::params::ModelParams;
use super::real::{cast, Real};
use crate::bpe::{CLS, MASK, NUM_SPECIALS, SEP};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::seed::{stream_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Clm,
    Mlm,
}

impl Objective {
    pub fn attention(self) -> AttentionMode {
        match self {
            Objective::Clm => AttentionMode::Causal,
            Objective::Mlm => AttentionMode::Bidirectional,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Clm => "clm",
            Objective::Mlm => "mlm",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clm" => Ok(Objective::Clm),
            "mlm" => Ok(Objective::Mlm),
            other => Err(Error::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

/// BERT-style corruption recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Masking {
    pub ratio: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for Masking {
    fn default() -> Self {
        Masking {
            ratio: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

impl Masking {
    pub fn with_ratio(ratio: f64) -> Masking {
        Masking {
            ratio,
            ..Masking::default()
        }
    }
}

/// `[CLS] tokens [SEP]`, truncated to fit `max_seq`.
pub fn wrap(sentence: &[TokenId], max_seq: usize) -> Vec<TokenId> {
    let keep = sentence.len().min(max_seq.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(CLS);
    out.extend_from_slice(&sentence[..keep]);
    out.push(SEP);
    out
}

/// Next-token targets at every non-final position.
pub fn clm_batch(sentences: &[&[TokenId]], max_seq: usize) -> Batch {
    let seqs: Vec<Vec<TokenId>> = sentences.iter().map(|s| wrap(s, max_seq)).collect();
    let mut batch = Batch::new(&seqs, AttentionMode::Causal);
    for (b, s) in seqs.iter().enumerate() {
        for t in 0..s.len() - 1 {
            batch.targets.push(Target {
                row: b * batch.seq_len + t,
                label: s[t + 1],
            });
        }
    }
    batch
}

/// Uncorrupted bidirectional batch; see [`corrupt`].
pub fn plain_batch(sentences: &[&[TokenId]], max_seq: usize) -> Batch {
    let seqs: Vec<Vec<TokenId>> = sentences.iter().map(|s| wrap(s, max_seq)).collect();
    Batch::new(&seqs, AttentionMode::Bidirectional)
}

/// Lexical id range of the language half that `id` belongs to.
fn half_of(id: TokenId, boundary: usize, vocab_size: usize) -> std::ops::Range<usize> {
    if (id as usize) < boundary {
        NUM_SPECIALS..boundary
    } else {
        boundary + NUM_SPECIALS..vocab_size
    }
}

/// Selects `ratio` of the lexical positions (at least one), labels them
/// with the original token and replaces 80% with MASK, 10% with a random
/// token of the same language half and leaves 10% unchanged.
pub fn corrupt(batch: &Batch, masking: &Masking, boundary: usize, vocab_size: usize, seed: u64) -> Result<Batch> {
    let eligible: Vec<usize> = (0..batch.rows())
        .filter(|&r| !batch.is_pad_row(r) && batch.tokens[r] as usize >= NUM_SPECIALS)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoTargets);
    }
    let mut rng = stream_rng(seed, Purpose::Mask, 0);
    let mut selected: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random_bool(masking.ratio.clamp(0.0, 1.0)))
        .collect();
    if selected.is_empty() {
        selected.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut out = batch.clone();
    out.attention = AttentionMode::Bidirectional;
    out.targets.clear();
    for r in selected {
        let original = batch.tokens[r];
        out.targets.push(Target { row: r, label: original });
        let u: f64 = rng.random();
        if u < masking.mask_prob {
            out.tokens[r] = MASK;
        } else if u < masking.mask_prob + masking.random_prob {
            let range = half_of(original, boundary, vocab_size);
            if !range.is_empty() {
                out.tokens[r] = rng.random_range(range) as TokenId;
            }
        }
    }
    Ok(out)
}

/// One row per lexical position of `sentence`, each with that position
/// masked; used for deterministic pseudo-perplexity.
pub fn pseudo_likelihood_batch(sentence: &[TokenId], max_seq: usize) -> Batch {
    let seq = wrap(sentence, max_seq);
    let positions: Vec<usize> = (1..seq.len() - 1).collect();
    let rows: Vec<Vec<TokenId>> = positions
        .iter()
        .map(|&p| {
            let mut s = seq.clone();
            s[p] = MASK;
            s
        })
        .collect();
    let mut batch = Batch::new(&rows, AttentionMode::Bidirectional);
    for (b, &p) in positions.iter().enumerate() {
        batch.targets.push(Target {
            row: b * batch.seq_len + p,
            label: seq[p],
        });
    }
    batch
}

/// Mean NLL (natural log) of `labels` under row-wise softmax of `logits`,
/// plus its gradient w.r.t. the logits.
pub fn nll_from_logits<T: Real>(logits: &[T], width: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if labels.is_empty() {
        return Err(Error::NoTargets);
    }
    let inv_n = cast::<T>(1.0 / labels.len() as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (k, &label) in labels.iter().enumerate() {
        let row = &logits[k * width..(k + 1) * width];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        total += log_z - row[label];
        let g = &mut grad[k * width..(k + 1) * width];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Per-target NLLs, for perplexity and entropy accounting.
pub fn target_nlls<T: Real>(params: &ModelParams<T>, batch: &Batch) -> Result<Vec<f64>> {
    if batch.targets.is_empty() {
        return Ok(Vec::new());
    }
    let trace = params.trace(batch)?;
    let (logits, width) = params.target_logits(batch, &trace);
    let start = batch.output_range.as_ref().map_or(0, |r| r.start);
    Ok(batch
        .targets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let row = &logits[k * width..(k + 1) * width];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            (z.ln() + max - row[t.label as usize - start]).to_f64().unwrap_or(f64::NAN)
        })
        .collect())
}

fn labels(batch: &Batch) -> Vec<usize> {
    let start = batch.output_range.as_ref().map_or(0, |r| r.start);
    batch.targets.iter().map(|t| t.label as usize - start).collect()
}

impl<T: Real> ModelParams<T> {
    /// Mean NLL over the batch targets.
    pub fn loss(&self, batch: &Batch) -> Result<T> {
        if batch.targets.is_empty() {
            return Err(Error::NoTargets);
        }
        let trace = self.trace(batch)?;
        let (logits, width) = self.target_logits(batch, &trace);
        Ok(nll_from_logits(&logits, width, &labels(batch))?.0)
    }

    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(T, Vec<T>)> {
        if batch.targets.is_empty() {
            return Err(Error::NoTargets);
        }
        let trace = self.trace(batch)?;
        let (logits, width) = self.target_logits(batch, &trace);
        let (loss, dlogits) = nll_from_logits(&logits, width, &labels(batch))?;
        Ok((loss, self.backward(batch, &trace, &dlogits)))
    }
}

/// Causal LM loss; the batch must come from [`clm_batch`].
pub fn clm_loss<T: Real>(params: &ModelParams<T>, batch: &Batch) -> Result<T> {
    if batch.attention != AttentionMode::Causal {
        return Err(Error::InvalidConfig("clm_loss needs a causal batch".into()));
    }
    params.loss(batch)
}

/// Masked LM loss on a freshly corrupted copy of an uncorrupted batch.
pub fn mlm_loss<T: Real>(params: &ModelParams<T>, batch: &Batch, masking: &Masking, seed: u64) -> Result<T> {
    if batch.batch_size() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let corrupted = corrupt(batch, masking, params.boundary, params.config.vocab_size, seed)?;
    params.loss(&corrupted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn two_token_uniform_logits() {
        // logits (0,0) against gold [0,1,0]
        let logits = vec![0.0f64; 6];
        let (loss, _) = nll_from_logits(&logits, 2, &[0, 1, 0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn certain_predictor_has_zero_loss() {
        let logits = vec![0.0f64, 800.0, 0.0, 800.0, 0.0, 0.0];
        let (loss, _) = nll_from_logits(&logits, 3, &[1, 0]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn no_labels_is_an_error() {
        assert!(matches!(nll_from_logits::<f64>(&[], 3, &[]), Err(Error::NoTargets)));
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let cfg = ModelConfig::tiny(20);
        let p = ModelParams::<f64>::zeros(cfg, 10).unwrap();
        let s: Vec<TokenId> = vec![6, 7, 8];
        let b = clm_batch(&[&s], 32);
        assert!((clm_loss(&p, &b).unwrap() - 20f64.ln()).abs() < 1e-12);
        let plain = plain_batch(&[&s], 32);
        assert!((mlm_loss(&p, &plain, &Masking::default(), 1).unwrap() - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_ratio_on_single_token_gives_one_target() {
        let s: Vec<TokenId> = vec![7];
        let b = plain_batch(&[&s], 16);
        let c = corrupt(&b, &Masking::with_ratio(1.0), 10, 20, 3).unwrap();
        assert_eq!(c.targets.len(), 1);
        assert_eq!(c.targets[0].label, 7);
    }

    #[test]
    fn zero_ratio_forces_one_position() {
        let s: Vec<TokenId> = vec![7, 8, 9, 6];
        let b = plain_batch(&[&s], 16);
        let c = corrupt(&b, &Masking::with_ratio(0.0), 10, 20, 3).unwrap();
        assert_eq!(c.targets.len(), 1);
    }

    #[test]
    fn specials_only_batch_has_no_targets() {
        let s: Vec<TokenId> = vec![];
        let b = plain_batch(&[&s], 16);
        assert!(matches!(corrupt(&b, &Masking::default(), 10, 20, 0), Err(Error::NoTargets)));
    }

    #[test]
    fn corruption_rates_follow_recipe() {
        let s: Vec<TokenId> = (0..2000).map(|i| 5 + (i % 5) as TokenId).collect();
        let b = plain_batch(&[&s], 4096);
        let c = corrupt(&b, &Masking::with_ratio(0.5), 10, 20, 11).unwrap();
        let n = c.targets.len() as f64;
        assert!((n / 2000.0 - 0.5).abs() < 0.05);
        let masked = c.targets.iter().filter(|t| c.tokens[t.row] == MASK).count() as f64;
        let kept = c.targets.iter().filter(|t| c.tokens[t.row] == t.label).count() as f64;
        assert!((masked / n - 0.8).abs() < 0.05);
        // unchanged includes random draws that hit the original token
        assert!((kept / n - 0.1).abs() < 0.05);
        for t in &c.targets {
            let tok = c.tokens[t.row] as usize;
            assert!(tok == MASK as usize || (NUM_SPECIALS..10).contains(&tok));
        }
    }

    proptest! {
        #[test]
        fn masking_is_seed_deterministic(seed in any::<u64>(), ratio in 0.0f64..1.0) {
            let s: Vec<TokenId> = vec![5, 6, 7, 8, 9, 12, 15];
            let b = plain_batch(&[&s, &s[..3]], 16);
            let m = Masking::with_ratio(ratio);
            prop_assert_eq!(corrupt(&b, &m, 10, 20, seed).unwrap(), corrupt(&b, &m, 10, 20, seed).unwrap());
        }
    }
}
