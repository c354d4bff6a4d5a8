//! Training regimes and key induction between the two embedding halves.

mod train;

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::{BilingualVocab, NUM_SPECIALS};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::lm::ModelParams;

pub use train::{
    align_step, decipher_unidirectional, train_joint, train_monolingual, unidirectional_trainer, AlignSpec, LossRecord,
    Regime, StepPlan,
    TrainConfig, TrainState, Trainer,
};

/// Target-to-source key recovered from embedding geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    /// Id of `phi[0]`'s target token.
    pub target_start: TokenId,
    pub phi: Vec<TokenId>,
    /// Cosine similarity of each chosen pair, `-1` when a row has zero norm.
    pub scores: Vec<f64>,
}

impl Mapping {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn target_ids(&self) -> Range<TokenId> {
        self.target_start..self.target_start + self.phi.len() as TokenId
    }

    pub fn get(&self, target: TokenId) -> Option<TokenId> {
        let j = target.checked_sub(self.target_start)? as usize;
        self.phi.get(j).copied()
    }

    pub fn score(&self, target: TokenId) -> Option<f64> {
        let j = target.checked_sub(self.target_start)? as usize;
        self.scores.get(j).copied()
    }

    /// `target_surface \t source_surface \t cosine`, one line per target id.
    pub fn to_tsv(&self, vocab: &BilingualVocab) -> String {
        let mut out = String::new();
        for (j, (&src, &score)) in self.phi.iter().zip(&self.scores).enumerate() {
            let tgt = self.target_start + j as TokenId;
            let ts = vocab.surface(tgt).unwrap_or_default();
            let ss = vocab.surface(src).unwrap_or_default();
            let _ = writeln!(out, "{ts}\t{ss}\t{score:.6}");
        }
        out
    }

    pub fn save_tsv(&self, vocab: &BilingualVocab, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv(vocab)).map_err(|e| Error::io(path, e))
    }
}

fn cosine(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// For each row of `target`, the index of the most cosine-similar row of
/// `source` (lowest index on ties) and that similarity.
pub fn nearest_rows(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidConfig("nearest_rows needs non-empty row sets".into()));
    }
    let d = source[0].len();
    if source.iter().chain(target).any(|r| r.len() != d) {
        return Err(Error::InvalidConfig("embedding dimensions differ".into()));
    }
    let norm = |r: &Vec<f64>| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sn: Vec<f64> = source.iter().map(norm).collect();
    Ok(target
        .iter()
        .map(|t| {
            let tn = norm(t);
            let mut best = (0, f64::NEG_INFINITY);
            for (i, s) in source.iter().enumerate() {
                let c = cosine(t, tn, s, sn[i]);
                if c > best.1 {
                    best = (i, c);
                }
            }
            (best.0, best.1.clamp(-1.0, 1.0))
        })
        .collect())
}

/// Cosine nearest neighbour of each target lexical row among the source
/// lexical rows. `e_rows` and `f_rows` are the lexical parts of E_e and E_f;
/// their first rows have ids `e_start` and `f_start`.
pub fn induce_mapping(e_rows: &[Vec<f64>], e_start: TokenId, f_rows: &[Vec<f64>], f_start: TokenId) -> Result<Mapping> {
    let nn = nearest_rows(e_rows, f_rows)?;
    Ok(Mapping {
        target_start: f_start,
        phi: nn.iter().map(|&(i, _)| e_start + i as TokenId).collect(),
        scores: nn.iter().map(|&(_, s)| s).collect(),
    })
}

fn rows<T: crate::lm::Real>(params: &ModelParams<T>, ids: Range<usize>) -> Vec<Vec<f64>> {
    ids.map(|i| params.embedding_row(i).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
        .collect()
}

/// Lexical id ranges of the two halves of a model's vocabulary.
pub fn lexical_halves<T>(params: &ModelParams<T>) -> (Range<usize>, Range<usize>) {
    let b = params.boundary;
    (NUM_SPECIALS..b, b + NUM_SPECIALS..params.config.vocab_size)
}

/// Key induced between the source half of `e_model` and the target half of
/// `f_model`; pass the same model twice for a jointly trained one.
pub fn mapping_between<T: crate::lm::Real>(e_model: &ModelParams<T>, f_model: &ModelParams<T>) -> Result<Mapping> {
    let (e, _) = lexical_halves(e_model);
    let (_, f) = lexical_halves(f_model);
    if e_model.config.hidden != f_model.config.hidden {
        return Err(Error::InvalidConfig("models differ in width".into()));
    }
    induce_mapping(&rows(e_model, e.clone()), e.start as TokenId, &rows(f_model, f.clone()), f.start as TokenId)
}

pub fn mapping_from_params<T: crate::lm::Real>(params: &ModelParams<T>) -> Result<Mapping> {
    mapping_between(params, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(e: &[Vec<f64>], f: &[Vec<f64>]) -> Vec<usize> {
        f.iter()
            .map(|t| {
                let sims: Vec<f64> = e
                    .iter()
                    .map(|s| {
                        let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
                        let n = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        dot / (n(t) * n(s))
                    })
                    .collect();
                let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                sims.iter().position(|&s| s == max).unwrap()
            })
            .collect()
    }

    #[test]
    fn two_by_two_examples() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = induce_mapping(&e, 5, &[vec![0.9, 0.1], vec![0.2, 0.8]], 20).unwrap();
        assert_eq!(m.phi, vec![5, 6]);
        let m = induce_mapping(&e, 5, &[vec![0.0, 1.0], vec![1.0, 0.0]], 20).unwrap();
        assert_eq!(m.phi, vec![6, 5]);
        assert_eq!(m.get(21), Some(5));
        assert_eq!(m.get(19), None);
    }

    #[test]
    fn copied_rows_give_the_shift() {
        let e: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|k| ((i * 7 + k * 3) % 5) as f64 - 2.0).collect()).collect();
        let m = induce_mapping(&e, 5, &e, 30).unwrap();
        // rows may coincide up to scale; the earliest equal row wins
        let oracle = brute_force(&e, &e);
        assert_eq!(m.phi, oracle.iter().map(|&i| 5 + i as TokenId).collect::<Vec<_>>());
        assert!(m.scores.iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ties_go_to_lowest_source_id() {
        let e = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let m = induce_mapping(&e, 5, &[vec![3.0, 0.0]], 9).unwrap();
        assert_eq!(m.phi, vec![5]);
    }

    #[test]
    fn zero_rows_score_minus_one() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = induce_mapping(&e, 5, &[vec![0.0, 0.0]], 9).unwrap();
        assert_eq!(m.scores, vec![-1.0]);
        assert_eq!(m.phi, vec![5]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(induce_mapping(&[vec![1.0]], 5, &[vec![1.0, 0.0]], 9).is_err());
        assert!(induce_mapping(&[], 5, &[vec![1.0]], 9).is_err());
    }

    fn row_set(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..n)
    }

    proptest! {
        #[test]
        fn matches_brute_force(e in row_set(10), f in row_set(10)) {
            let m = induce_mapping(&e, 5, &f, 100).unwrap();
            let oracle: Vec<TokenId> = brute_force(&e, &f).iter().map(|&i| 5 + i as TokenId).collect();
            prop_assert_eq!(m.phi, oracle);
            prop_assert!(m.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        }

        #[test]
        fn positive_row_scaling_keeps_the_key(e in row_set(8), f in row_set(8), p in -3i32..4) {
            let k = 2f64.powi(p);
            let m = induce_mapping(&e, 5, &f, 100).unwrap();
            let scaled: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|x| x * k).collect()).collect();
            let m2 = induce_mapping(&e, 5, &scaled, 100).unwrap();
            prop_assert_eq!(m.phi, m2.phi);
        }
    }
}
