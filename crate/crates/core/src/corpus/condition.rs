use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{make_fake_corpus, order_permutation, Corpus, GroundTruthDictionary, Lang, OrderTransform, RawCorpus, TokenId};
use crate::bpe::{BilingualVocab, BpeModel};
use crate::error::{Error, Result};

/// The nine named decipherment conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionName {
    #[serde(rename = "NT-NT")]
    NtNt,
    #[serde(rename = "NT-OT")]
    NtOt,
    #[serde(rename = "NT-TED")]
    NtTed,
    #[serde(rename = "NT-WIKI")]
    NtWiki,
    #[serde(rename = "NT-500")]
    Nt500,
    #[serde(rename = "NT-1K")]
    Nt1k,
    #[serde(rename = "NT-4K")]
    Nt4k,
    #[serde(rename = "NT-INV")]
    NtInv,
    #[serde(rename = "NT-RND")]
    NtRnd,
}

/// Target vocabulary size of the granularity conditions at the reference
/// 2K source budget.
const REFERENCE_SOURCE_VOCAB: usize = 2000;

impl ConditionName {
    pub const ALL: [ConditionName; 9] = [
        ConditionName::NtNt,
        ConditionName::NtOt,
        ConditionName::NtTed,
        ConditionName::NtWiki,
        ConditionName::Nt500,
        ConditionName::Nt1k,
        ConditionName::Nt4k,
        ConditionName::NtInv,
        ConditionName::NtRnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionName::NtNt => "NT-NT",
            ConditionName::NtOt => "NT-OT",
            ConditionName::NtTed => "NT-TED",
            ConditionName::NtWiki => "NT-WIKI",
            ConditionName::Nt500 => "NT-500",
            ConditionName::Nt1k => "NT-1K",
            ConditionName::Nt4k => "NT-4K",
            ConditionName::NtInv => "NT-INV",
            ConditionName::NtRnd => "NT-RND",
        }
    }

    /// Domain label of the target corpus for the domain conditions.
    pub fn target_domain(self) -> Option<&'static str> {
        match self {
            ConditionName::NtOt => Some("OT"),
            ConditionName::NtTed => Some("TED"),
            ConditionName::NtWiki => Some("WIKI"),
            _ => None,
        }
    }

    pub fn is_domain(self) -> bool {
        self.target_domain().is_some()
    }

    pub fn is_granularity(self) -> bool {
        matches!(self, ConditionName::Nt500 | ConditionName::Nt1k | ConditionName::Nt4k)
    }

    pub fn order_transform(self) -> OrderTransform {
        match self {
            ConditionName::NtInv => OrderTransform::Invert,
            ConditionName::NtRnd => OrderTransform::Randomize,
            _ => OrderTransform::None,
        }
    }

    /// Target vocabulary budget. Granularity conditions scale with the
    /// source budget so that a 2000-entry source gives 500 / 1000 / 4000.
    pub fn target_vocab_size(self, source_vocab_size: usize) -> usize {
        let scaled = |n: usize| n * source_vocab_size / REFERENCE_SOURCE_VOCAB;
        match self {
            ConditionName::Nt500 => scaled(500),
            ConditionName::Nt1k => scaled(1000),
            ConditionName::Nt4k => scaled(4000),
            _ => source_vocab_size,
        }
    }
}

impl fmt::Display for ConditionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionName::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownCondition(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: ConditionName,
    pub source_corpus: PathBuf,
    pub target_corpus: PathBuf,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub order_transform: OrderTransform,
    pub heldout: usize,
    pub seed: u64,
}

impl ConditionSpec {
    /// Builds the spec implied by `name`. `domain_corpus` is only read for
    /// the domain conditions; every other condition reuses the source file.
    pub fn for_name(
        name: ConditionName,
        source_corpus: impl Into<PathBuf>,
        domain_corpus: Option<&Path>,
        source_vocab_size: usize,
        seed: u64,
    ) -> Result<ConditionSpec> {
        let source_corpus = source_corpus.into();
        let target_corpus = if name.is_domain() {
            domain_corpus
                .ok_or_else(|| Error::InvalidConfig(format!("{name} needs a target-domain corpus")))?
                .to_path_buf()
        } else {
            source_corpus.clone()
        };
        Ok(ConditionSpec {
            name,
            source_corpus,
            target_corpus,
            source_vocab_size,
            target_vocab_size: name.target_vocab_size(source_vocab_size),
            order_transform: name.order_transform(),
            heldout: 1000,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("{}: {msg}", self.name)));
        if self.order_transform != self.name.order_transform() {
            return bad("order transform does not match the condition");
        }
        if !self.name.is_domain() && self.target_corpus != self.source_corpus {
            return bad("target corpus must equal the source corpus");
        }
        if self.target_vocab_size != self.name.target_vocab_size(self.source_vocab_size) {
            return bad("target vocabulary size does not match the condition");
        }
        if self.heldout == 0 {
            return bad("held-out set must be non-empty");
        }
        Ok(())
    }

    /// Flat `key = value` text, one entry per line.
    pub fn to_text(&self) -> String {
        format!(
            "name = {}\nsource_corpus = {}\ntarget_corpus = {}\nsource_vocab_size = {}\ntarget_vocab_size = {}\norder_transform = {}\nheldout = {}\nseed = {}\n",
            self.name,
            self.source_corpus.display(),
            self.target_corpus.display(),
            self.source_vocab_size,
            self.target_vocab_size,
            self.order_transform,
            self.heldout,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<ConditionSpec> {
        let mut name = None;
        let mut source = None;
        let mut target = None;
        let mut svs = None;
        let mut tvs = None;
        let mut order = None;
        let mut heldout = 1000;
        let mut seed = 0;
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Parse(format!("`{k}` expects a count, got `{v}`")))
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key = value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "name" => name = Some(v.parse::<ConditionName>()?),
                "source_corpus" => source = Some(PathBuf::from(v)),
                "target_corpus" => target = Some(PathBuf::from(v)),
                "source_vocab_size" => svs = Some(num(k, v)?),
                "target_vocab_size" => tvs = Some(num(k, v)?),
                "order_transform" => order = Some(v.parse::<OrderTransform>()?),
                "heldout" => heldout = num(k, v)?,
                "seed" => seed = v.parse().map_err(|_| Error::Parse(format!("bad seed `{v}`")))?,
                other => return Err(Error::Parse(format!("unknown key `{other}`"))),
            }
        }
        let name = name.ok_or_else(|| Error::Parse("missing `name`".into()))?;
        let source_corpus = source.ok_or_else(|| Error::Parse("missing `source_corpus`".into()))?;
        let source_vocab_size = svs.unwrap_or(REFERENCE_SOURCE_VOCAB);
        let spec = ConditionSpec {
            name,
            target_corpus: target.unwrap_or_else(|| source_corpus.clone()),
            source_corpus,
            source_vocab_size,
            target_vocab_size: tvs.unwrap_or_else(|| name.target_vocab_size(source_vocab_size)),
            order_transform: order.unwrap_or_else(|| name.order_transform()),
            heldout,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Tokenizers used by a condition, either freshly trained or loaded.
#[derive(Debug, Clone)]
pub struct ConditionTokenizers {
    pub source: BpeModel,
    pub target: BpeModel,
}

impl ConditionTokenizers {
    pub fn train(spec: &ConditionSpec, source_lines: &[String], target_lines: &[String]) -> Result<Self> {
        Ok(ConditionTokenizers {
            source: BpeModel::train(source_lines, spec.source_vocab_size)?,
            target: BpeModel::train(target_lines, spec.target_vocab_size)?,
        })
    }
}

/// One held-out sentence pair with word groups. Word `k` of the source
/// side is gold-aligned to word `k` of the target side; the target groups
/// already follow the condition's order transform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub source_words: Vec<Vec<usize>>,
    pub target_words: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: ConditionSpec,
    pub vocab: BilingualVocab,
    pub source: Corpus,
    pub target: Corpus,
    pub dictionary: GroundTruthDictionary,
    pub heldout: Vec<ParallelPair>,
}

fn tokenize(model: &BpeModel, lines: &[String], lang: Lang, domain: &str) -> Corpus {
    let mut cache = std::collections::HashMap::new();
    let sentences = lines.iter().map(|l| model.encode_cached(l, &mut cache)).collect();
    Corpus::new(sentences, lang, domain)
}

fn word_groups(words: &[Vec<TokenId>]) -> (Vec<TokenId>, Vec<Vec<usize>>) {
    let mut flat = Vec::new();
    let mut groups = Vec::new();
    for w in words {
        groups.push((flat.len()..flat.len() + w.len()).collect());
        flat.extend_from_slice(w);
    }
    (flat, groups)
}

/// Assembles the bilingual dataset for one condition. Blank lines are
/// dropped; the held-out pairs are the last `spec.heldout` source lines,
/// taken before any transform.
pub fn build_condition(
    spec: &ConditionSpec,
    source_raw: &RawCorpus,
    target_raw: &RawCorpus,
    tokenizers: Option<ConditionTokenizers>,
) -> Result<Dataset> {
    spec.validate()?;
    let source_lines: Vec<String> = source_raw.lines.iter().filter(|l| !l.trim().is_empty()).cloned().collect();
    if spec.heldout >= source_lines.len() {
        return Err(Error::HeldOutTooLarge {
            requested: spec.heldout,
            available: source_lines.len(),
        });
    }
    let split = source_lines.len() - spec.heldout;
    let (train_e, held) = source_lines.split_at(split);
    let train_f: Vec<String> = if spec.name.is_domain() {
        target_raw.lines.iter().filter(|l| !l.trim().is_empty()).cloned().collect()
    } else {
        train_e.to_vec()
    };
    if train_f.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let tokenizers = match tokenizers {
        Some(t) => t,
        None => ConditionTokenizers::train(spec, train_e, &train_f)?,
    };
    let vocab = BilingualVocab::new(tokenizers.source, tokenizers.target)?;
    let offset = vocab.offset();

    let source = tokenize(&vocab.source, train_e, Lang::Source, &source_raw.domain_tag);
    let target_domain = if spec.name.is_domain() {
        target_raw.domain_tag.clone()
    } else {
        source_raw.domain_tag.clone()
    };
    let target_local = tokenize(&vocab.target, &train_f, Lang::Source, &target_domain);
    let mut target = make_fake_corpus(&target_local, offset)?;
    if spec.order_transform != OrderTransform::None {
        target = super::apply_order_transform(&target, spec.order_transform, spec.seed)?;
    }

    let dictionary = GroundTruthDictionary::identity_prefix(&vocab).restrict_to_attested(&source, &target);
    if dictionary.is_empty() {
        return Err(Error::EmptyDictionary(format!("{} has no shared surfaces", spec.name)));
    }

    let heldout = held
        .iter()
        .enumerate()
        .map(|(k, line)| {
            let (e, e_words) = word_groups(&vocab.source.encode_words(line));
            let f_words_local = vocab.target.encode_words(line);
            let (f_pre, f_groups_pre) = word_groups(&f_words_local);
            let mut word_of = vec![0usize; f_pre.len()];
            for (w, g) in f_groups_pre.iter().enumerate() {
                for &p in g {
                    word_of[p] = w;
                }
            }
            // held-out sentences continue the training index range
            let perm = order_permutation(spec.order_transform, spec.seed, split + k, f_pre.len());
            let f: Vec<TokenId> = perm.iter().map(|&p| f_pre[p] + offset as TokenId).collect();
            let mut f_words = vec![Vec::new(); f_groups_pre.len()];
            for (j, &p) in perm.iter().enumerate() {
                f_words[word_of[p]].push(j);
            }
            ParallelPair {
                source: e,
                target: f,
                source_words: e_words,
                target_words: f_words,
            }
        })
        .collect();

    Ok(Dataset {
        spec: spec.clone(),
        vocab,
        source,
        target,
        dictionary,
        heldout,
    })
}
