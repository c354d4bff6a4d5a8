use std::ops::Range;

use super::{BpeModel, END_OF_WORD, NUM_SPECIALS};
use crate::corpus::{Lang, TokenId};
use crate::error::{Error, Result};

/// Surface prefix marking the Fake-English half.
pub const TARGET_PREFIX: &str = "::";

/// Two tokenizers sharing one id space: source ids first, then target ids
/// shifted by `offset`. Specials live once, at the bottom of the source
/// half; the mirrored special slots in the target half are never emitted by
/// batching, except the target-side unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilingualVocab {
    pub source: BpeModel,
    pub target: BpeModel,
}

impl BilingualVocab {
    pub fn new(source: BpeModel, target: BpeModel) -> Result<BilingualVocab> {
        if let Some(s) = source.surfaces().find(|s| s.starts_with(TARGET_PREFIX)) {
            return Err(Error::PrefixCollision(s.to_string()));
        }
        Ok(BilingualVocab { source, target })
    }

    pub fn offset(&self) -> usize {
        self.source.len()
    }

    pub fn total_size(&self) -> usize {
        self.source.len() + self.target.len()
    }

    pub fn half(&self, lang: Lang) -> &BpeModel {
        match lang {
            Lang::Source => &self.source,
            Lang::Target => &self.target,
        }
    }

    pub fn id_range(&self, lang: Lang) -> Range<usize> {
        match lang {
            Lang::Source => 0..self.offset(),
            Lang::Target => self.offset()..self.total_size(),
        }
    }

    /// Ids of real tokens (specials excluded) in one half.
    pub fn lexical_range(&self, lang: Lang) -> Range<usize> {
        let r = self.id_range(lang);
        r.start + NUM_SPECIALS..r.end
    }

    pub fn lang_of(&self, id: TokenId) -> Lang {
        if (id as usize) < self.offset() {
            Lang::Source
        } else {
            Lang::Target
        }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let id = id as usize;
        id < NUM_SPECIALS || (id >= self.offset() && id - self.offset() < NUM_SPECIALS)
    }

    pub fn surface(&self, id: TokenId) -> Option<String> {
        let id = id as usize;
        if id < self.offset() {
            self.source.surface(id as TokenId).map(str::to_string)
        } else {
            self.target
                .surface((id - self.offset()) as TokenId)
                .map(|s| format!("{TARGET_PREFIX}{s}"))
        }
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        match surface.strip_prefix(TARGET_PREFIX) {
            Some(rest) => self.target.id(rest).map(|i| i + self.offset() as TokenId),
            None => self.source.id(surface),
        }
    }

    /// Surface with the target prefix removed, for comparing halves.
    pub fn plain_surface(&self, id: TokenId) -> Option<String> {
        let s = self.surface(id)?;
        Some(s.strip_prefix(TARGET_PREFIX).map(str::to_string).unwrap_or(s))
    }

    pub fn ends_word(&self, id: TokenId) -> bool {
        self.surface(id).is_some_and(|s| s.ends_with(END_OF_WORD))
    }

    /// Encodes text with one half and returns ids in the shared space.
    pub fn encode(&self, lang: Lang, sentence: &str) -> Vec<TokenId> {
        let shift = self.id_range(lang).start as TokenId;
        self.half(lang).encode(sentence).into_iter().map(|t| t + shift).collect()
    }
}
