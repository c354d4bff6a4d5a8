use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Lang, TokenId};
use crate::bpe::BilingualVocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionaryConstruction {
    IdentityPrefix,
    RestrictedIntersection,
    ExternalFile,
}

/// Gold (source id, target id) translation pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthDictionary {
    pub pairs: Vec<(TokenId, TokenId)>,
    pub construction: DictionaryConstruction,
}

impl GroundTruthDictionary {
    /// Pairs every source lexical token with the target token of the same
    /// surface. When both halves were built by the same tokenizer this is the
    /// full `(cat, ::cat)` dictionary, otherwise it is the surface
    /// intersection of the two vocabularies.
    pub fn identity_prefix(vocab: &BilingualVocab) -> GroundTruthDictionary {
        let mut pairs = Vec::new();
        for s in vocab.lexical_range(Lang::Source) {
            let surface = vocab.source.surface(s as TokenId).expect("id in range");
            if let Some(t) = vocab.target.id(surface) {
                let t = t as usize + vocab.offset();
                if vocab.lexical_range(Lang::Target).contains(&t) {
                    pairs.push((s as TokenId, t as TokenId));
                }
            }
        }
        let construction = if vocab.source == vocab.target {
            DictionaryConstruction::IdentityPrefix
        } else {
            DictionaryConstruction::RestrictedIntersection
        };
        GroundTruthDictionary { pairs, construction }
    }

    /// Keeps only pairs whose source token occurs in `source` and whose
    /// target token occurs in `target`.
    pub fn restrict_to_attested(&self, source: &Corpus, target: &Corpus) -> GroundTruthDictionary {
        let seen_e: HashSet<TokenId> = source.sentences.iter().flatten().copied().collect();
        let seen_f: HashSet<TokenId> = target.sentences.iter().flatten().copied().collect();
        GroundTruthDictionary {
            pairs: self
                .pairs
                .iter()
                .copied()
                .filter(|(s, t)| seen_e.contains(s) && seen_f.contains(t))
                .collect(),
            construction: self.construction,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One-one on its domain: no source id and no target id repeats.
    pub fn is_bijective(&self) -> bool {
        let sources: HashSet<_> = self.pairs.iter().map(|p| p.0).collect();
        let targets: HashSet<_> = self.pairs.iter().map(|p| p.1).collect();
        sources.len() == self.pairs.len() && targets.len() == self.pairs.len()
    }

    pub fn to_tsv(&self, vocab: &BilingualVocab) -> String {
        let mut out = String::new();
        for &(s, t) in &self.pairs {
            let _ = writeln!(
                out,
                "{}\t{}",
                vocab.surface(s).unwrap_or_default(),
                vocab.surface(t).unwrap_or_default()
            );
        }
        out
    }

    pub fn from_tsv(text: &str, vocab: &BilingualVocab) -> Result<GroundTruthDictionary> {
        let mut pairs = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("bad dictionary line `{line}`")))?;
            let s = vocab
                .id(s)
                .filter(|&i| vocab.lang_of(i) == Lang::Source)
                .ok_or_else(|| Error::Parse(format!("unknown source surface `{s}`")))?;
            let t = vocab
                .id(t)
                .filter(|&i| vocab.lang_of(i) == Lang::Target)
                .ok_or_else(|| Error::Parse(format!("unknown target surface `{t}`")))?;
            pairs.push((s, t));
        }
        Ok(GroundTruthDictionary {
            pairs,
            construction: DictionaryConstruction::ExternalFile,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &BilingualVocab) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv(vocab)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, vocab: &BilingualVocab) -> Result<GroundTruthDictionary> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GroundTruthDictionary::from_tsv(&text, vocab)
    }

    pub fn gold_by_target(&self) -> HashMap<TokenId, TokenId> {
        self.pairs.iter().map(|&(s, t)| (t, s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{BpeModel, TARGET_PREFIX};

    const LINES: [&str; 3] = ["the cat sat on the mat", "the bat ate the rat", "a cat and a bat sat"];

    #[test]
    fn identical_halves_give_full_bijection() {
        let m = BpeModel::train(&LINES, 60).unwrap();
        let v = BilingualVocab::new(m.clone(), m.clone()).unwrap();
        let d = GroundTruthDictionary::identity_prefix(&v);
        assert_eq!(d.construction, DictionaryConstruction::IdentityPrefix);
        assert_eq!(d.len(), v.lexical_range(Lang::Source).len());
        assert!(d.is_bijective());
        for &(s, t) in &d.pairs {
            assert_eq!(v.surface(t).unwrap(), format!("{TARGET_PREFIX}{}", v.surface(s).unwrap()));
        }
    }

    /// Intersection oracle: brute-force set intersection of the surface tables.
    #[test]
    fn granular_target_matches_intersection_oracle() {
        let src = BpeModel::train(&LINES, 60).unwrap();
        let tgt = BpeModel::train(&LINES, 31).unwrap();
        assert_ne!(src.len(), tgt.len());
        let v = BilingualVocab::new(src.clone(), tgt.clone()).unwrap();
        let d = GroundTruthDictionary::identity_prefix(&v);
        assert_eq!(d.construction, DictionaryConstruction::RestrictedIntersection);

        let src_set: HashSet<&str> = src.surfaces().skip(5).collect();
        let tgt_set: HashSet<&str> = tgt.surfaces().skip(5).collect();
        let expected = src_set.intersection(&tgt_set).count();
        assert_eq!(d.len(), expected);
        assert!(d.len() <= src_set.len().min(tgt.len()));
        for &(s, t) in &d.pairs {
            assert_eq!(v.plain_surface(s), v.plain_surface(t));
        }
    }

    #[test]
    fn tsv_round_trip() {
        let m = BpeModel::train(&LINES, 50).unwrap();
        let v = BilingualVocab::new(m.clone(), m).unwrap();
        let d = GroundTruthDictionary::identity_prefix(&v);
        let back = GroundTruthDictionary::from_tsv(&d.to_tsv(&v), &v).unwrap();
        assert_eq!(back.pairs, d.pairs);
        assert_eq!(back.construction, DictionaryConstruction::ExternalFile);
    }
}
