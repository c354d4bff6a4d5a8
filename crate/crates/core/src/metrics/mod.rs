//! Evaluation instruments: lexicon induction, contextual alignment,
//! sentence retrieval, perplexities, corpus divergence, the permutation
//! probe and the cross-language entropy.

mod report;
mod stats;

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{BilingualVocab, NUM_SPECIALS, UNK};
use crate::corpus::{Corpus, GroundTruthDictionary, ParallelPair, TokenId};
use crate::decipher::{nearest_rows, Mapping};
use crate::error::{Error, Result};
use crate::lm::{
    clm_batch, plain_batch, pseudo_likelihood_batch, target_nlls, AttentionMode, ModelParams, Objective,
};
use crate::seed::{stream_rng, Purpose};

pub use report::{evaluate, EvalReport, EvalSettings, ModelPair, REPORT_SCHEMA};
pub use stats::{mean, sample_sd, spearman};

const CHUNK: usize = 64;

/// Scores token sequences under one model and objective.
#[derive(Clone)]
pub struct Scorer<'a> {
    pub params: &'a ModelParams<f32>,
    pub objective: Objective,
    /// Softmax support; labels outside it are skipped.
    pub output_range: Option<Range<usize>>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams<f32>, objective: Objective) -> Scorer<'a> {
        Scorer {
            params,
            objective,
            output_range: None,
        }
    }

    pub fn with_output_range(mut self, range: Option<Range<usize>>) -> Self {
        self.output_range = range;
        self
    }

    fn restrict(&self, batch: &mut crate::lm::Batch) {
        if let Some(r) = &self.output_range {
            batch.targets.retain(|t| r.contains(&(t.label as usize)));
            batch.output_range = Some(r.clone());
        }
    }

    /// Sum of per-token NLLs (nats) and the number of scored tokens. MLM
    /// uses exhaustive one-position masking.
    pub fn nll_stats(&self, sentences: &[Vec<TokenId>]) -> Result<(f64, usize)> {
        let max_seq = self.params.config.max_seq;
        let mut total = 0.0;
        let mut count = 0;
        let mut add = |nll: Vec<f64>| {
            count += nll.len();
            total += nll.iter().sum::<f64>();
        };
        let usable: Vec<&[TokenId]> = sentences.iter().filter(|s| !s.is_empty()).map(|s| s.as_slice()).collect();
        match self.objective {
            Objective::Clm => {
                for chunk in usable.chunks(CHUNK) {
                    let mut b = clm_batch(chunk, max_seq);
                    self.restrict(&mut b);
                    add(target_nlls(self.params, &b)?);
                }
            }
            Objective::Mlm => {
                for s in usable {
                    let mut b = pseudo_likelihood_batch(s, max_seq);
                    self.restrict(&mut b);
                    add(target_nlls(self.params, &b)?);
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok((total, count))
    }

    /// Mean NLL per scored token.
    pub fn cross_entropy(&self, sentences: &[Vec<TokenId>]) -> Result<f64> {
        let (total, count) = self.nll_stats(sentences)?;
        Ok(total / count as f64)
    }

    pub fn perplexity(&self, sentences: &[Vec<TokenId>]) -> Result<f64> {
        Ok(self.cross_entropy(sentences)?.exp())
    }
}

pub fn perplexity(params: &ModelParams<f32>, corpus: &Corpus, objective: Objective) -> Result<f64> {
    Scorer::new(params, objective).perplexity(&corpus.sentences)
}

fn plogp_sum<K: Hash + Eq>(p: &HashMap<&K, f64>, m: &HashMap<&K, f64>) -> f64 {
    p.iter().filter(|(_, &v)| v > 0.0).map(|(&k, &v)| v * (v / m[&k]).ln()).sum()
}

/// Jensen-Shannon divergence (nats) between two count histograms.
pub fn js_divergence_counts<K: Hash + Eq>(a: &HashMap<K, u64>, b: &HashMap<K, u64>) -> Result<f64> {
    let na: u64 = a.values().sum();
    let nb: u64 = b.values().sum();
    if na == 0 || nb == 0 {
        return Err(Error::EmptyCorpus);
    }
    let p: HashMap<&K, f64> = a.iter().map(|(k, &c)| (k, c as f64 / na as f64)).collect();
    let q: HashMap<&K, f64> = b.iter().map(|(k, &c)| (k, c as f64 / nb as f64)).collect();
    let mut m: HashMap<&K, f64> = HashMap::new();
    for (&k, &v) in p.iter().chain(q.iter()) {
        *m.entry(k).or_default() += 0.5 * v;
    }
    let js = 0.5 * plogp_sum(&p, &m) + 0.5 * plogp_sum(&q, &m);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Unigram divergence over surfaces, with the target prefix stripped so the
/// two halves share one event space.
pub fn js_divergence(a: &Corpus, b: &Corpus, vocab: &BilingualVocab) -> Result<f64> {
    let surfaces = |c: &Corpus| -> HashMap<String, u64> {
        let mut out = HashMap::new();
        for (id, n) in c.unigram_counts() {
            let s = vocab.plain_surface(id).unwrap_or_else(|| format!("#{id}"));
            *out.entry(s).or_default() += n;
        }
        out
    };
    js_divergence_counts(&surfaces(a), &surfaces(b))
}

/// Fraction of dictionary targets whose induced source is the gold one.
pub fn bli_p_at_1(mapping: &Mapping, dictionary: &GroundTruthDictionary) -> Result<f64> {
    if dictionary.is_empty() {
        return Err(Error::EmptyDictionary("cannot score an empty dictionary".into()));
    }
    let mut hits = 0;
    for &(e, f) in &dictionary.pairs {
        let got = mapping.get(f).ok_or(Error::IdOutOfRange {
            id: f as usize,
            vocab_size: mapping.target_ids().end as usize,
        })?;
        hits += usize::from(got == e);
    }
    Ok(hits as f64 / dictionary.len() as f64)
}

/// Hidden states of each sentence at each requested layer:
/// `[layer][sentence][position][dim]`, positions including CLS and SEP.
pub fn sentence_states(
    params: &ModelParams<f32>,
    sentences: &[&[TokenId]],
    layers: &[usize],
    attention: AttentionMode,
) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    if let Some(&l) = layers.iter().find(|&&l| l > params.config.layers) {
        return Err(Error::InvalidConfig(format!("layer {l} exceeds depth {}", params.config.layers)));
    }
    let d = params.config.hidden;
    let mut out = vec![Vec::with_capacity(sentences.len()); layers.len()];
    for chunk in sentences.chunks(CHUNK) {
        let mut batch = plain_batch(chunk, params.config.max_seq);
        batch.attention = attention;
        let trace = params.trace(&batch)?;
        for (li, &l) in layers.iter().enumerate() {
            let h = &trace.hidden[l];
            for b in 0..batch.batch_size() {
                let rows = (0..batch.lengths[b])
                    .map(|t| {
                        let r = b * batch.seq_len + t;
                        h[r * d..(r + 1) * d].iter().map(|&x| x as f64).collect()
                    })
                    .collect();
                out[li].push(rows);
            }
        }
    }
    Ok(out)
}

fn mean_rows(rows: &[Vec<f64>], idx: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; rows.first().map_or(0, Vec::len)];
    let mut n = 0;
    for i in idx {
        for (a, x) in acc.iter_mut().zip(&rows[i]) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: Vec<f64> = b.iter().map(norm).collect();
    a.iter()
        .map(|x| {
            let nx = norm(x);
            b.iter()
                .zip(&nb)
                .map(|(y, &ny)| {
                    if nx == 0.0 || ny == 0.0 {
                        -1.0
                    } else {
                        x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)
                    }
                })
                .collect()
        })
        .collect()
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Word alignment F1 against the identity gold for one word-vector pair:
/// `(mutual nearest neighbours, one-directional e→f nearest neighbours)`.
pub fn word_alignment_f1(e_words: &[Vec<f64>], f_words: &[Vec<f64>]) -> (f64, f64) {
    if e_words.is_empty() || f_words.is_empty() {
        return (0.0, 0.0);
    }
    let sim = cosine_matrix(e_words, f_words);
    let fwd: Vec<usize> = sim.iter().map(|row| argmax(row.iter().copied())).collect();
    let bwd: Vec<usize> = (0..f_words.len()).map(|j| argmax(sim.iter().map(|row| row[j]))).collect();
    let gold = e_words.len().min(f_words.len());
    let f1 = |pred: &[(usize, usize)]| {
        let hits = pred.iter().filter(|(i, j)| i == j).count() as f64;
        if hits == 0.0 {
            return 0.0;
        }
        let p = hits / pred.len() as f64;
        let r = hits / gold as f64;
        2.0 * p * r / (p + r)
    };
    let mutual: Vec<(usize, usize)> = fwd.iter().enumerate().filter(|&(i, &j)| bwd[j] == i).map(|(i, &j)| (i, j)).collect();
    let forward: Vec<(usize, usize)> = fwd.iter().copied().enumerate().collect();
    (f1(&mutual), f1(&forward))
}

/// Word indices whose subwords all survive truncation to `kept` tokens.
fn surviving_words(groups: &[Vec<usize>], kept: usize) -> HashSet<usize> {
    groups
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty() && g.iter().all(|&p| p < kept))
        .map(|(w, _)| w)
        .collect()
}

/// Both sides' states for the held-out pairs under their respective models.
pub struct PairStates {
    pub layers: Vec<usize>,
    pub source: Vec<Vec<Vec<Vec<f64>>>>,
    pub target: Vec<Vec<Vec<Vec<f64>>>>,
}

impl PairStates {
    pub fn compute(
        e_model: &ModelParams<f32>,
        f_model: &ModelParams<f32>,
        pairs: &[ParallelPair],
        layers: &[usize],
        attention: AttentionMode,
    ) -> Result<PairStates> {
        let src: Vec<&[TokenId]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let tgt: Vec<&[TokenId]> = pairs.iter().map(|p| p.target.as_slice()).collect();
        Ok(PairStates {
            layers: layers.to_vec(),
            source: sentence_states(e_model, &src, layers, attention)?,
            target: sentence_states(f_model, &tgt, layers, attention)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub mutual: f64,
    pub forward: f64,
}

/// Per-layer alignment F1 averaged over pairs, then over layers. Word
/// vectors average their subword states; words cut by truncation on either
/// side are dropped from both.
pub fn contextual_alignment_f1(states: &PairStates, pairs: &[ParallelPair]) -> Result<AlignmentScores> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut per_layer = Vec::new();
    for (s_layer, t_layer) in states.source.iter().zip(&states.target) {
        let mut acc = AlignmentScores::default();
        for (k, pair) in pairs.iter().enumerate() {
            let (es, fs) = (&s_layer[k], &t_layer[k]);
            let keep_e = surviving_words(&pair.source_words, es.len().saturating_sub(2));
            let keep_f = surviving_words(&pair.target_words, fs.len().saturating_sub(2));
            let mut words: Vec<usize> = keep_e.intersection(&keep_f).copied().collect();
            words.sort_unstable();
            let vec_of = |rows: &Vec<Vec<f64>>, g: &Vec<usize>| mean_rows(rows, g.iter().map(|&p| p + 1));
            let ew: Vec<Vec<f64>> = words.iter().map(|&w| vec_of(es, &pair.source_words[w])).collect();
            let fw: Vec<Vec<f64>> = words.iter().map(|&w| vec_of(fs, &pair.target_words[w])).collect();
            let (m, f) = word_alignment_f1(&ew, &fw);
            acc.mutual += m;
            acc.forward += f;
        }
        let n = pairs.len() as f64;
        per_layer.push(AlignmentScores {
            mutual: acc.mutual / n,
            forward: acc.forward / n,
        });
    }
    let n = per_layer.len().max(1) as f64;
    Ok(AlignmentScores {
        mutual: per_layer.iter().map(|s| s.mutual).sum::<f64>() / n,
        forward: per_layer.iter().map(|s| s.forward).sum::<f64>() / n,
    })
}

/// Nearest-target retrieval accuracy over pooled sentence vectors. Every
/// query returns exactly one candidate, so precision, recall and F1 agree.
pub fn retrieval_f1(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if source.len() < 2 || source.len() != target.len() {
        return Err(Error::InvalidConfig(format!(
            "retrieval needs at least two aligned pairs, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let nn = nearest_rows(target, source)?;
    let hits = nn.iter().enumerate().filter(|(i, (j, _))| i == j).count();
    Ok(hits as f64 / source.len() as f64)
}

/// Retrieval F1 per layer averaged over layers; sentence vectors are the
/// mean of lexical positions (CLS and SEP excluded).
pub fn sentence_retrieval_f1(states: &PairStates) -> Result<f64> {
    let pool = |s: &Vec<Vec<f64>>| mean_rows(s, 1..s.len().saturating_sub(1));
    let mut scores = Vec::new();
    for (s_layer, t_layer) in states.source.iter().zip(&states.target) {
        let sv: Vec<Vec<f64>> = s_layer.iter().map(pool).collect();
        let tv: Vec<Vec<f64>> = t_layer.iter().map(pool).collect();
        scores.push(retrieval_f1(&sv, &tv)?);
    }
    Ok(mean(&scores).unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub k: usize,
    pub seed: u64,
    pub ppl: f64,
}

/// Perplexity after relabeling the lexical ids in `ids` through `k`
/// cumulative random transpositions, for every `k` in `schedule` and every
/// seed. The transposition sequence depends only on the seed.
pub fn permutation_probe(
    scorer: &Scorer,
    sentences: &[Vec<TokenId>],
    ids: Range<usize>,
    schedule: &[usize],
    seeds: &[u64],
) -> Result<Vec<ProbeRow>> {
    let n = ids.len();
    let max_k = schedule.iter().copied().max().unwrap_or(0);
    let available = n * n.saturating_sub(1) / 2;
    if max_k > available {
        return Err(Error::TooManySwaps {
            requested: max_k,
            available,
        });
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut rng = stream_rng(seed, Purpose::Probe, 0);
        let mut used = HashSet::new();
        let mut swaps = Vec::with_capacity(max_k);
        while swaps.len() < max_k {
            let a = rng.random_range(ids.clone());
            let b = rng.random_range(ids.clone());
            if a != b && used.insert((a.min(b), a.max(b))) {
                swaps.push((a, b));
            }
        }
        for &k in schedule {
            let mut key: Vec<TokenId> = (0..scorer.params.config.vocab_size as TokenId).collect();
            for &(a, b) in &swaps[..k] {
                key.swap(a, b);
            }
            let relabeled: Vec<Vec<TokenId>> = sentences
                .iter()
                .map(|s| s.iter().map(|&t| key[t as usize]).collect())
                .collect();
            rows.push(ProbeRow {
                k,
                seed,
                ppl: scorer.perplexity(&relabeled)?,
            });
        }
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "seed", "ppl"])?;
    for r in rows {
        w.write_record([r.k.to_string(), r.seed.to_string(), format!("{}", r.ppl)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean and sample standard deviation of perplexity per `k`, in schedule order.
pub fn probe_summary(rows: &[ProbeRow]) -> Vec<(usize, f64, Option<f64>)> {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.dedup();
    let mut seen = HashSet::new();
    ks.retain(|k| seen.insert(*k));
    ks.iter()
        .map(|&k| {
            let v: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.ppl).collect();
            (k, mean(&v).unwrap_or(f64::NAN), sample_sd(&v))
        })
        .collect()
}

/// Re-indexes target text into source ids through `mapping`; ids it does
/// not cover become UNK.
pub fn decipher_sentences(sentences: &[Vec<TokenId>], mapping: &Mapping) -> Vec<Vec<TokenId>> {
    sentences
        .iter()
        .map(|s| s.iter().map(|&t| mapping.get(t).unwrap_or(UNK)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBound {
    /// Cross-entropy (nats/token) of the e-model on deciphered f text.
    pub h_e_given_f: f64,
    pub c: f64,
    pub bound: f64,
}

/// `H(e|f)` from deciphering `f_sentences` through `mapping` and scoring
/// with the e-model; unmapped tokens are scored as UNK, whose NLL is the
/// penalty.
pub fn entropy_bound(e_scorer: &Scorer, f_sentences: &[Vec<TokenId>], mapping: &Mapping, c: f64) -> Result<EntropyBound> {
    if !(c >= 0.0) {
        return Err(Error::InvalidConfig(format!("entropy constant must be non-negative, got {c}")));
    }
    let h = e_scorer.cross_entropy(&decipher_sentences(f_sentences, mapping))?.max(0.0);
    Ok(EntropyBound {
        h_e_given_f: h,
        c,
        bound: h + c,
    })
}

/// Lexical ids of one half, as used by the probe.
pub fn lexical_ids(params: &ModelParams<f32>, target_half: bool) -> Range<usize> {
    if target_half {
        params.boundary + NUM_SPECIALS..params.config.vocab_size
    } else {
        NUM_SPECIALS..params.boundary
    }
}

#[cfg(test)]
mod tests;
