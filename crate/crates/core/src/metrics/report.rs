use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{
    bli_p_at_1, contextual_alignment_f1, entropy_bound, js_divergence, sentence_retrieval_f1, PairStates, Scorer,
};
use crate::bpe::UNK;
use crate::corpus::{Dataset, TokenId};
use crate::decipher::{mapping_between, Mapping};
use crate::error::{Error, Result};
use crate::lm::{ModelParams, Objective};

pub const REPORT_SCHEMA: &str = "decipher-eval-v1";

/// The models that read each language, with their softmax supports. A
/// jointly trained model plays both roles.
#[derive(Clone)]
pub struct ModelPair<'a> {
    pub e: &'a ModelParams<f32>,
    pub f: &'a ModelParams<f32>,
    pub e_range: Option<Range<usize>>,
    pub f_range: Option<Range<usize>>,
}

impl<'a> ModelPair<'a> {
    pub fn joint(params: &'a ModelParams<f32>) -> Self {
        ModelPair {
            e: params,
            f: params,
            e_range: None,
            f_range: None,
        }
    }

    /// One model per language, each scoring over its own half.
    pub fn per_language(e: &'a ModelParams<f32>, f: &'a ModelParams<f32>) -> Self {
        ModelPair {
            e,
            f,
            e_range: Some(0..e.boundary),
            f_range: Some(f.boundary..f.config.vocab_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub objective: Objective,
    pub layers: Vec<usize>,
    /// Held-out pairs used for alignment, retrieval and perplexities.
    pub max_pairs: usize,
    /// Constant added to `H(e|f)` for the bound.
    pub c: f64,
}

impl EvalSettings {
    pub fn new(objective: Objective, layers: Vec<usize>) -> EvalSettings {
        EvalSettings {
            objective,
            layers,
            max_pairs: 1000,
            c: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub step: usize,
    pub bli_p1: f64,
    /// Mutual nearest neighbour alignment F1, mean over layers.
    pub alignment_f1: f64,
    /// One-directional nearest neighbour variant.
    pub alignment_f1_forward: f64,
    pub retrieval_f1: f64,
    /// Unweighted mean of the three scores above.
    pub ucl: f64,
    pub ppl_e: f64,
    pub ppl_f: f64,
    /// e-model perplexity on deciphered f text, `exp(H(e|f))`.
    pub ppl_e_on_f: f64,
    /// f-model perplexity on e text enciphered through the inverse key.
    pub ppl_f_on_e: f64,
    pub js_unigram: f64,
    pub h_e_given_f: f64,
    pub entropy_c: f64,
    pub entropy_bound: f64,
    pub pairs: usize,
    pub layers: Vec<usize>,
}

/// Source-to-target key: each source id goes to its best-scoring preimage
/// under `mapping`.
fn inverse_key(mapping: &Mapping) -> HashMap<TokenId, TokenId> {
    let mut best: HashMap<TokenId, (TokenId, f64)> = HashMap::new();
    for t in mapping.target_ids() {
        let (s, score) = (mapping.get(t).expect("in range"), mapping.score(t).expect("in range"));
        let e = best.entry(s).or_insert((t, score));
        if score > e.1 {
            *e = (t, score);
        }
    }
    best.into_iter().map(|(s, (t, _))| (s, t)).collect()
}

pub fn evaluate(models: &ModelPair, dataset: &Dataset, settings: &EvalSettings, step: usize) -> Result<EvalReport> {
    let pairs = &dataset.heldout[..dataset.heldout.len().min(settings.max_pairs)];
    if pairs.len() < 2 {
        return Err(Error::InvalidConfig("evaluation needs at least two held-out pairs".into()));
    }
    let mapping = mapping_between(models.e, models.f)?;
    let bli = bli_p_at_1(&mapping, &dataset.dictionary)?;
    let states = PairStates::compute(models.e, models.f, pairs, &settings.layers, settings.objective.attention())?;
    let align = contextual_alignment_f1(&states, pairs)?;
    let retrieval = sentence_retrieval_f1(&states)?;

    let e_scorer = Scorer::new(models.e, settings.objective).with_output_range(models.e_range.clone());
    let f_scorer = Scorer::new(models.f, settings.objective).with_output_range(models.f_range.clone());
    let e_text: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.source.clone()).collect();
    let f_text: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.target.clone()).collect();
    let ppl_e = e_scorer.perplexity(&e_text)?;
    let ppl_f = f_scorer.perplexity(&f_text)?;
    let bound = entropy_bound(&e_scorer, &f_text, &mapping, settings.c)?;

    let unknown = (dataset.vocab.offset() + UNK as usize) as TokenId;
    let inv = inverse_key(&mapping);
    let enciphered: Vec<Vec<TokenId>> = e_text
        .iter()
        .map(|s| s.iter().map(|t| inv.get(t).copied().unwrap_or(unknown)).collect())
        .collect();
    let ppl_f_on_e = f_scorer.perplexity(&enciphered)?;

    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        step,
        bli_p1: bli,
        alignment_f1: align.mutual,
        alignment_f1_forward: align.forward,
        retrieval_f1: retrieval,
        ucl: (bli + align.mutual + retrieval) / 3.0,
        ppl_e,
        ppl_f,
        ppl_e_on_f: bound.h_e_given_f.exp(),
        ppl_f_on_e,
        js_unigram: js_divergence(&dataset.source, &dataset.target, &dataset.vocab)?,
        h_e_given_f: bound.h_e_given_f,
        entropy_c: bound.c,
        entropy_bound: bound.bound,
        pairs: pairs.len(),
        layers: settings.layers.clone(),
    })
}
