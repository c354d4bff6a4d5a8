//! Word-internal byte-pair encoding with an end-of-word marker.
//!
//! Words are split on whitespace; each word becomes a character sequence
//! whose final character carries [`END_OF_WORD`]. Merges are learned
//! greedily by pair frequency with lexicographic tie-breaking, so training
//! is fully deterministic.

mod bilingual;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub use bilingual::{BilingualVocab, TARGET_PREFIX};

pub const END_OF_WORD: &str = "</w>";

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<mask>", "<cls>", "<sep>", "<unk>"];
pub const NUM_SPECIALS: usize = SPECIALS.len();

const HEADER: &str = "bpe-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ids: HashMap<String, TokenId>,
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn base_alphabet<'a>(words: impl Iterator<Item = &'a str>) -> BTreeSet<String> {
    let mut alphabet = BTreeSet::new();
    for word in words {
        for c in word.chars() {
            alphabet.insert(c.to_string());
            alphabet.insert(format!("{c}{END_OF_WORD}"));
        }
    }
    alphabet
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl BpeModel {
    /// Learns merges until the vocabulary holds `vocab_size` entries
    /// (specials included) or no pair occurs at least twice.
    pub fn train<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Result<BpeModel> {
        let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
        for line in lines {
            for w in line.as_ref().split_whitespace() {
                *word_freq.entry(w).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let alphabet = base_alphabet(word_freq.keys().copied());
        let base = NUM_SPECIALS + alphabet.len();
        if vocab_size < base {
            return Err(Error::VocabTooSmall {
                requested: vocab_size,
                base,
            });
        }

        let mut model = BpeModel::from_parts(Vec::new(), SPECIALS.iter().map(|s| s.to_string()).chain(alphabet).collect());
        let mut words: Vec<(Vec<String>, u64)> = word_freq.iter().map(|(w, &n)| (word_symbols(w), n)).collect();

        while model.vocab.len() < vocab_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (symbols, n) in &words {
                for pair in symbols.windows(2) {
                    *pairs.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += n;
                }
            }
            // most frequent, then lexicographically smallest
            let best = pairs
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), _)) = best else { break };
            let (left, right) = (left.to_string(), right.to_string());
            for (symbols, _) in &mut words {
                merge_pair(symbols, &left, &right);
            }
            model.push_merge(left, right);
        }
        Ok(model)
    }

    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> BpeModel {
        let ids = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as TokenId)).collect();
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        BpeModel {
            merges,
            vocab,
            ids,
            ranks,
        }
    }

    fn push_merge(&mut self, left: String, right: String) {
        let merged = format!("{left}{right}");
        if !self.ids.contains_key(&merged) {
            self.ids.insert(merged.clone(), self.vocab.len() as TokenId);
            self.vocab.push(merged);
        }
        self.ranks.insert((left.clone(), right.clone()), self.merges.len());
        self.merges.push((left, right));
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.ids.get(surface).copied()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str)
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.rank(&p[0], &p[1]).map(|r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        out.extend(symbols.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    /// Applies merges in training order; symbols outside the vocabulary
    /// become [`UNK`].
    pub fn encode(&self, sentence: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in sentence.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Like [`encode`](Self::encode) but memoizes per-word results.
    pub fn encode_cached(&self, sentence: &str, cache: &mut HashMap<String, Vec<TokenId>>) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in sentence.split_whitespace() {
            if let Some(ids) = cache.get(word) {
                out.extend_from_slice(ids);
            } else {
                let mut ids = Vec::new();
                self.encode_word(word, &mut ids);
                out.extend_from_slice(&ids);
                cache.insert(word.to_string(), ids);
            }
        }
        out
    }

    /// Token ids grouped by whitespace word.
    pub fn encode_words(&self, sentence: &str) -> Vec<Vec<TokenId>> {
        sentence
            .split_whitespace()
            .map(|w| {
                let mut ids = Vec::new();
                self.encode_word(w, &mut ids);
                ids
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut text = String::new();
        for &id in ids {
            if id == PAD {
                continue;
            }
            let surface = self.surface(id).unwrap_or(SPECIALS[UNK as usize]);
            match surface.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    text.push_str(stem);
                    text.push(' ');
                }
                None => text.push_str(surface),
            }
        }
        if text.ends_with(' ') {
            text.pop();
        }
        text
    }

    /// Whether `id` closes a word.
    pub fn ends_word(&self, id: TokenId) -> bool {
        self.surface(id).is_some_and(|s| s.ends_with(END_OF_WORD))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.vocab.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        for (i, s) in self.vocab.iter().enumerate() {
            let _ = writeln!(out, "{s}\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<BpeModel> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("missing bpe header".into()))?;
        let declared: usize = header
            .strip_prefix(HEADER)
            .map(str::trim)
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad bpe header `{header}`")))?;
        let mut merges = Vec::new();
        let mut vocab = Vec::new();
        for line in lines {
            if let Some((surface, id)) = line.split_once('\t') {
                let id: usize = id.parse().map_err(|_| Error::Parse(format!("bad vocab line `{line}`")))?;
                if id != vocab.len() {
                    return Err(Error::Parse(format!("vocab ids out of order at `{line}`")));
                }
                vocab.push(surface.to_string());
            } else {
                let (l, r) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Parse(format!("bad merge line `{line}`")))?;
                merges.push((l.to_string(), r.to_string()));
            }
        }
        if vocab.len() != declared {
            return Err(Error::Parse(format!(
                "header declares {declared} entries, found {}",
                vocab.len()
            )));
        }
        Ok(BpeModel::from_parts(merges, vocab))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BpeModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BpeModel::from_text(&text)
    }
}
