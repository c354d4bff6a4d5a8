//! Corpora and the Fake-English transforms that turn one monolingual corpus
//! into the target side of a decipherment condition.

mod condition;
mod dictionary;
pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::mix_seed;

pub use condition::{build_condition, ConditionName, ConditionSpec, ConditionTokenizers, Dataset, ParallelPair};
pub use dictionary::{DictionaryConstruction, GroundTruthDictionary};

pub type TokenId = u32;

/// Language side of a corpus or an id range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    /// Source language (plaintext).
    #[serde(rename = "e")]
    Source,
    /// Target language (ciphertext, Fake-English).
    #[serde(rename = "f")]
    Target,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::Source => Lang::Target,
            Lang::Target => Lang::Source,
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::Source => "e",
            Lang::Target => "f",
        })
    }
}

/// Word-order transform applied to the target side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderTransform {
    None,
    Invert,
    Randomize,
}

impl FromStr for OrderTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OrderTransform::None),
            "invert" => Ok(OrderTransform::Invert),
            "randomize" => Ok(OrderTransform::Randomize),
            other => Err(Error::UnknownTransform(other.to_string())),
        }
    }
}

impl fmt::Display for OrderTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderTransform::None => "none",
            OrderTransform::Invert => "invert",
            OrderTransform::Randomize => "randomize",
        })
    }
}

/// One entry of a corpus' provenance log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformRecord {
    Shift { offset: usize },
    Order { transform: OrderTransform, seed: u64 },
}

/// Sentence strings read from disk, not yet tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub lines: Vec<String>,
    pub domain_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub lines: usize,
    pub words: usize,
    pub avg_len: f64,
}

impl RawCorpus {
    pub fn new(lines: Vec<String>, domain_tag: impl Into<String>) -> Self {
        RawCorpus {
            lines,
            domain_tag: domain_tag.into(),
        }
    }

    pub fn stats(&self) -> CorpusStats {
        let words: usize = self.lines.iter().map(|l| l.split_whitespace().count()).sum();
        let lines = self.lines.len();
        CorpusStats {
            lines,
            words,
            avg_len: if lines == 0 { 0.0 } else { words as f64 / lines as f64 },
        }
    }
}

/// Reads a one-sentence-per-line UTF-8 corpus.
pub fn load_corpus(path: impl AsRef<Path>, domain_tag: &str) -> Result<RawCorpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::InvalidUtf8 {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    parse_corpus(&text, domain_tag)
}

pub fn parse_corpus(text: &str, domain_tag: &str) -> Result<RawCorpus> {
    let lines: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    if lines.iter().all(|l| l.trim().is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    Ok(RawCorpus::new(lines, domain_tag))
}

/// A tokenized, language-tagged corpus with its transform history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Vec<TokenId>>,
    pub lang: Lang,
    pub domain_tag: String,
    pub transform_log: Vec<TransformRecord>,
}

impl Corpus {
    pub fn new(sentences: Vec<Vec<TokenId>>, lang: Lang, domain_tag: impl Into<String>) -> Self {
        Corpus {
            sentences,
            lang,
            domain_tag: domain_tag.into(),
            transform_log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn max_id(&self) -> Option<TokenId> {
        self.sentences.iter().flatten().copied().max()
    }

    pub fn unigram_counts(&self) -> HashMap<TokenId, u64> {
        let mut counts = HashMap::new();
        for &t in self.sentences.iter().flatten() {
            *counts.entry(t).or_insert(0) += 1;
        }
        counts
    }

    /// Re-applies this corpus' transform log on top of `base`, which must be
    /// the tokenized corpus the log started from.
    pub fn replay(&self, base: &Corpus) -> Result<Corpus> {
        let mut out = base.clone();
        out.transform_log.clear();
        for record in &self.transform_log {
            out = match *record {
                TransformRecord::Shift { offset } => make_fake_corpus(&out, offset)?,
                TransformRecord::Order { transform, seed } => apply_order_transform(&out, transform, seed)?,
            };
        }
        Ok(out)
    }
}

/// Shifts every id by `offset` and retags the corpus as the target language.
pub fn make_fake_corpus(corpus: &Corpus, offset: usize) -> Result<Corpus> {
    if let Some(max_id) = corpus.max_id() {
        if offset < max_id as usize + 1 {
            return Err(Error::OffsetCollision {
                offset,
                max_id: max_id as usize,
            });
        }
    }
    let shift = offset as TokenId;
    let mut log = corpus.transform_log.clone();
    log.push(TransformRecord::Shift { offset });
    Ok(Corpus {
        sentences: corpus
            .sentences
            .iter()
            .map(|s| s.iter().map(|&t| t + shift).collect())
            .collect(),
        lang: Lang::Target,
        domain_tag: corpus.domain_tag.clone(),
        transform_log: log,
    })
}

/// Inverse of [`make_fake_corpus`].
pub fn unshift_corpus(corpus: &Corpus, offset: usize) -> Corpus {
    let shift = offset as TokenId;
    let mut log = corpus.transform_log.clone();
    if matches!(log.last(), Some(TransformRecord::Shift { offset: o }) if *o == offset) {
        log.pop();
    }
    Corpus {
        sentences: corpus
            .sentences
            .iter()
            .map(|s| s.iter().map(|&t| t.saturating_sub(shift)).collect())
            .collect(),
        lang: Lang::Source,
        domain_tag: corpus.domain_tag.clone(),
        transform_log: log,
    }
}

/// Permutation applied by an order transform to sentence `index` of length
/// `len`: the output position `j` holds the input token at `perm[j]`.
pub fn order_permutation(transform: OrderTransform, seed: u64, index: usize, len: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    match transform {
        OrderTransform::None => {}
        OrderTransform::Invert => perm.reverse(),
        OrderTransform::Randomize => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
            perm.shuffle(&mut rng);
        }
    }
    perm
}

pub fn apply_order_transform(corpus: &Corpus, transform: OrderTransform, seed: u64) -> Result<Corpus> {
    let sentences = corpus
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            order_permutation(transform, seed, i, s.len())
                .into_iter()
                .map(|p| s[p])
                .collect()
        })
        .collect();
    let mut log = corpus.transform_log.clone();
    log.push(TransformRecord::Order { transform, seed });
    Ok(Corpus {
        sentences,
        lang: corpus.lang,
        domain_tag: corpus.domain_tag.clone(),
        transform_log: log,
    })
}

/// String-keyed variant used by the CLI and config files.
pub fn apply_named_order_transform(corpus: &Corpus, name: &str, seed: u64) -> Result<Corpus> {
    apply_order_transform(corpus, name.parse()?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_three_line_file() {
        let raw = parse_corpus("a b\nc\nd e f", "T").unwrap();
        let s = raw.stats();
        assert_eq!(s.lines, 3);
        assert_eq!(s.words, 6);
        assert_eq!(s.avg_len, 2.0);
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        let err = load_corpus(&path, "T").unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn missing_file_is_rejected() {
        assert!(matches!(load_corpus("/nonexistent/x.txt", "T"), Err(Error::Io { .. })));
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, b"abc\n\xffdef").unwrap();
        match load_corpus(&path, "T") {
            Err(Error::InvalidUtf8 { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fake_corpus_shifts_ids() {
        let c = Corpus::new(vec![vec![1, 2], vec![2]], Lang::Source, "NT");
        let f = make_fake_corpus(&c, 4).unwrap();
        assert_eq!(f.sentences, vec![vec![5, 6], vec![6]]);
        assert_eq!(f.lang, Lang::Target);

        let c = Corpus::new(vec![vec![17]], Lang::Source, "NT");
        assert_eq!(make_fake_corpus(&c, 2000).unwrap().sentences, vec![vec![2017]]);
    }

    #[test]
    fn fake_of_empty_flips_tag() {
        let c = Corpus::new(vec![], Lang::Source, "NT");
        let f = make_fake_corpus(&c, 10).unwrap();
        assert!(f.is_empty());
        assert_eq!(f.lang, Lang::Target);
    }

    #[test]
    fn colliding_offset_is_rejected() {
        let c = Corpus::new(vec![vec![3, 9]], Lang::Source, "NT");
        assert!(matches!(make_fake_corpus(&c, 9), Err(Error::OffsetCollision { .. })));
        assert!(make_fake_corpus(&c, 10).is_ok());
    }

    #[test]
    fn invert_reverses() {
        let c = Corpus::new(vec![vec![1, 2, 3]], Lang::Target, "NT");
        let out = apply_order_transform(&c, OrderTransform::Invert, 0).unwrap();
        assert_eq!(out.sentences, vec![vec![3, 2, 1]]);
    }

    #[test]
    fn randomize_single_token() {
        let c = Corpus::new(vec![vec![7]], Lang::Target, "NT");
        let out = apply_order_transform(&c, OrderTransform::Randomize, 99).unwrap();
        assert_eq!(out.sentences, vec![vec![7]]);
    }

    #[test]
    fn unknown_transform_name() {
        let c = Corpus::new(vec![vec![7]], Lang::Target, "NT");
        assert!(matches!(
            apply_named_order_transform(&c, "rotate", 0),
            Err(Error::UnknownTransform(_))
        ));
    }

    fn corpus_strategy() -> impl Strategy<Value = Corpus> {
        prop::collection::vec(prop::collection::vec(0u32..50, 0..12), 0..20)
            .prop_map(|s| Corpus::new(s, Lang::Source, "P"))
    }

    proptest! {
        #[test]
        fn randomize_preserves_unigrams(c in corpus_strategy(), seed in any::<u64>()) {
            let out = apply_order_transform(&c, OrderTransform::Randomize, seed).unwrap();
            prop_assert_eq!(out.unigram_counts(), c.unigram_counts());
            let lens: Vec<usize> = out.sentences.iter().map(Vec::len).collect();
            let orig: Vec<usize> = c.sentences.iter().map(Vec::len).collect();
            prop_assert_eq!(lens, orig);
        }

        #[test]
        fn shift_then_unshift_is_identity(c in corpus_strategy(), extra in 0usize..100) {
            let offset = c.max_id().map_or(0, |m| m as usize + 1) + extra;
            let f = make_fake_corpus(&c, offset).unwrap();
            prop_assert_eq!(unshift_corpus(&f, offset), c);
        }

        #[test]
        fn transform_log_replays(c in corpus_strategy(), seed in any::<u64>(), invert in any::<bool>()) {
            let f = make_fake_corpus(&c, 64).unwrap();
            let t = if invert { OrderTransform::Invert } else { OrderTransform::Randomize };
            let f = apply_order_transform(&f, t, seed).unwrap();
            prop_assert_eq!(f.replay(&c).unwrap(), f);
        }
    }
}
