use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::real::{cast, Real};
use crate::error::Result;
use crate::seed::{stream_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Offsets of every tensor inside the flat parameter vector. The order is
/// token embeddings, optional output head, then the contextual stack
/// (positions, blocks, final norm) as one contiguous tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub tok_emb: usize,
    pub head: Option<usize>,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Layout {
        let d = c.hidden;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(c.vocab_size * d);
        let head = (!c.tie_embeddings).then(|| take(c.vocab_size * d));
        let pos_emb = take(c.max_seq * d);
        let layers = (0..c.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_1: take(d * c.ff_dim),
                b_1: take(c.ff_dim),
                w_2: take(c.ff_dim * d),
                b_2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        Layout {
            tok_emb,
            head,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            total: at,
        }
    }

    /// Offset of the output projection (the embedding table when tied).
    pub fn output(&self) -> usize {
        self.head.unwrap_or(self.tok_emb)
    }
}

/// Independently freezable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Embedding rows below the partition boundary (E_e).
    SourceEmbeddings,
    /// Embedding rows at or above the boundary (E_f).
    TargetEmbeddings,
    /// Untied output projection, when present.
    Head,
    /// Positions, attention and feed-forward blocks, norms (W).
    Contextual,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::SourceEmbeddings,
        Group::TargetEmbeddings,
        Group::Head,
        Group::Contextual,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableFlags {
    pub source_embeddings: bool,
    pub target_embeddings: bool,
    pub head: bool,
    pub contextual: bool,
}

impl TrainableFlags {
    pub const ALL: TrainableFlags = TrainableFlags {
        source_embeddings: true,
        target_embeddings: true,
        head: true,
        contextual: true,
    };

    pub const NONE: TrainableFlags = TrainableFlags {
        source_embeddings: false,
        target_embeddings: false,
        head: false,
        contextual: false,
    };

    pub const TARGET_ONLY: TrainableFlags = TrainableFlags {
        target_embeddings: true,
        ..TrainableFlags::NONE
    };

    pub fn get(&self, g: Group) -> bool {
        match g {
            Group::SourceEmbeddings => self.source_embeddings,
            Group::TargetEmbeddings => self.target_embeddings,
            Group::Head => self.head,
            Group::Contextual => self.contextual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    /// First embedding row of the target half.
    pub boundary: usize,
    pub trainable: TrainableFlags,
    pub data: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: ModelConfig, boundary: usize) -> Result<ModelParams<T>> {
        config.validate()?;
        if boundary > config.vocab_size {
            return Err(crate::Error::InvalidConfig(format!(
                "partition boundary {boundary} beyond vocabulary {}",
                config.vocab_size
            )));
        }
        let layout = Layout::new(&config);
        let data = vec![T::zero(); layout.total];
        Ok(ModelParams {
            config,
            layout,
            boundary,
            trainable: TrainableFlags::ALL,
            data,
        })
    }

    /// Gaussian weights, unit norm gains, zero biases.
    pub fn init(config: ModelConfig, boundary: usize, seed: u64) -> Result<ModelParams<T>> {
        let mut p = ModelParams::zeros(config, boundary)?;
        let mut rng = stream_rng(seed, Purpose::Init, 0);
        let normal = Normal::new(0.0, p.config.init_std).expect("positive std");
        let d = p.config.hidden;
        let mut fill = |data: &mut [T], at: usize, n: usize| {
            for x in &mut data[at..at + n] {
                *x = cast(normal.sample(&mut rng));
            }
        };
        let c = p.config.clone();
        let l = p.layout.clone();
        fill(&mut p.data, l.tok_emb, c.vocab_size * d);
        if let Some(h) = l.head {
            fill(&mut p.data, h, c.vocab_size * d);
        }
        fill(&mut p.data, l.pos_emb, c.max_seq * d);
        for lo in &l.layers {
            fill(&mut p.data, lo.w_qkv, 3 * d * d);
            fill(&mut p.data, lo.w_o, d * d);
            fill(&mut p.data, lo.w_1, d * c.ff_dim);
            fill(&mut p.data, lo.w_2, c.ff_dim * d);
            p.data[lo.ln1_g..lo.ln1_g + d].fill(T::one());
            p.data[lo.ln2_g..lo.ln2_g + d].fill(T::one());
        }
        p.data[l.lnf_g..l.lnf_g + d].fill(T::one());
        Ok(p)
    }

    pub fn group_range(&self, g: Group) -> Range<usize> {
        let d = self.config.hidden;
        let l = &self.layout;
        match g {
            Group::SourceEmbeddings => l.tok_emb..l.tok_emb + self.boundary * d,
            Group::TargetEmbeddings => l.tok_emb + self.boundary * d..l.tok_emb + self.config.vocab_size * d,
            Group::Head => match l.head {
                Some(h) => h..h + self.config.vocab_size * d,
                None => 0..0,
            },
            Group::Contextual => l.pos_emb..l.total,
        }
    }

    pub fn group(&self, g: Group) -> &[T] {
        &self.data[self.group_range(g)]
    }

    pub fn embedding_row(&self, id: usize) -> &[T] {
        let d = self.config.hidden;
        &self.data[self.layout.tok_emb + id * d..self.layout.tok_emb + (id + 1) * d]
    }

    /// Redraws one group from the initializer with a fresh seed.
    pub fn reinit_group(&mut self, g: Group, seed: u64) {
        let range = self.group_range(g);
        let mut rng = stream_rng(seed, Purpose::ReinitTarget, g as u64);
        let normal = Normal::new(0.0, self.config.init_std).expect("positive std");
        for x in &mut self.data[range] {
            *x = cast(normal.sample(&mut rng));
        }
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            boundary: self.boundary,
            trainable: self.trainable,
            data: self.data.iter().map(|x| cast::<U>(x.to_f64().unwrap_or(0.0))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_the_vector() {
        for tie in [true, false] {
            let mut c = ModelConfig::tiny(20);
            c.tie_embeddings = tie;
            let p = ModelParams::<f32>::init(c, 12, 0).unwrap();
            let mut covered = 0;
            let mut ranges: Vec<_> = Group::ALL.iter().map(|&g| p.group_range(g)).collect();
            ranges.sort_by_key(|r| r.start);
            for r in ranges.iter().filter(|r| !r.is_empty()) {
                assert_eq!(r.start, covered);
                covered = r.end;
            }
            assert_eq!(covered, p.num_params());
            assert_eq!(p.group(Group::SourceEmbeddings).len(), 12 * 32);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::<f32>::init(ModelConfig::tiny(20), 10, 3).unwrap();
        let b = ModelParams::<f32>::init(ModelConfig::tiny(20), 10, 3).unwrap();
        let c = ModelParams::<f32>::init(ModelConfig::tiny(20), 10, 4).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn reinit_touches_one_group() {
        let mut p = ModelParams::<f32>::init(ModelConfig::tiny(20), 10, 3).unwrap();
        let before = p.clone();
        p.reinit_group(Group::TargetEmbeddings, 9);
        assert_eq!(p.group(Group::SourceEmbeddings), before.group(Group::SourceEmbeddings));
        assert_eq!(p.group(Group::Contextual), before.group(Group::Contextual));
        assert_ne!(p.group(Group::TargetEmbeddings), before.group(Group::TargetEmbeddings));
    }
}
