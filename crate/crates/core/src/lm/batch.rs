use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bpe::PAD;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

/// A supervised position: flat row `batch_index * seq_len + position`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub label: TokenId,
}

/// Padded token matrix plus the positions that carry a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<TokenId>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
    pub attention: AttentionMode,
    pub targets: Vec<Target>,
    /// Softmax support; the full vocabulary when `None`.
    pub output_range: Option<Range<usize>>,
}

impl Batch {
    pub fn new(sequences: &[Vec<TokenId>], attention: AttentionMode) -> Batch {
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = vec![PAD; sequences.len() * seq_len];
        for (b, s) in sequences.iter().enumerate() {
            tokens[b * seq_len..b * seq_len + s.len()].copy_from_slice(s);
        }
        Batch {
            tokens,
            lengths: sequences.iter().map(Vec::len).collect(),
            seq_len,
            attention,
            targets: Vec::new(),
            output_range: None,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, b: usize, t: usize) -> TokenId {
        self.tokens[b * self.seq_len + t]
    }

    pub fn is_pad_row(&self, row: usize) -> bool {
        row % self.seq_len >= self.lengths[row / self.seq_len]
    }

    pub fn validate(&self, vocab_size: usize, max_seq: usize) -> Result<()> {
        if self.seq_len > max_seq {
            return Err(Error::SequenceTooLong {
                len: self.seq_len,
                max_seq,
            });
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::IdOutOfRange {
                id: id as usize,
                vocab_size,
            });
        }
        if let Some(r) = &self.output_range {
            if r.end > vocab_size || r.is_empty() {
                return Err(Error::InvalidConfig(format!("bad output range {r:?}")));
            }
        }
        for t in &self.targets {
            if t.row >= self.rows() || self.is_pad_row(t.row) {
                return Err(Error::InvalidConfig(format!("target at padded row {}", t.row)));
            }
            if let Some(r) = &self.output_range {
                if !r.contains(&(t.label as usize)) {
                    return Err(Error::InvalidConfig(format!("label {} outside output range", t.label)));
                }
            }
            if t.label as usize >= vocab_size {
                return Err(Error::IdOutOfRange {
                    id: t.label as usize,
                    vocab_size,
                });
            }
            if self.attention == AttentionMode::Causal {
                let (b, pos) = (t.row / self.seq_len, t.row % self.seq_len);
                if pos + 1 >= self.lengths[b] || self.token(b, pos + 1) != t.label {
                    return Err(Error::InvalidConfig(
                        "causal batches only supervise the next token".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
