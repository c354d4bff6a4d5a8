use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, GroundTruthDictionary, Lang, TokenId};
use crate::error::{Error, Result};
use crate::lm::{
    clm_batch, corrupt, plain_batch, training_step, AdamConfig, AdamState, Batch, Group, Masking, ModelConfig,
    ModelParams, Objective, TrainableFlags,
};
use crate::seed::{mix_seed, stream_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Two independent monolingual models, key induced afterwards.
    Separate,
    /// Pretrain on e, then retrain only a fresh E_f on f.
    Unidirectional,
    /// One model over both halves, alternating languages per step.
    Joint,
    /// Joint training followed by joint training plus the dictionary loss.
    Align,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Separate, Regime::Unidirectional, Regime::Joint, Regime::Align];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Separate => "separate",
            Regime::Unidirectional => "unidirectional",
            Regime::Joint => "joint",
            Regime::Align => "align",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Regime> {
        match s {
            "separate" => Ok(Regime::Separate),
            "unidirectional" => Ok(Regime::Unidirectional),
            "joint" => Ok(Regime::Joint),
            "align" | "joint+align" => Ok(Regime::Align),
            other => Err(Error::Parse(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub masking: Masking,
    pub seed: u64,
    /// Length of the whole run, for the warmup schedule.
    pub total_steps: usize,
}

impl TrainConfig {
    pub fn new(objective: Objective, seed: u64, total_steps: usize) -> TrainConfig {
        TrainConfig {
            objective,
            batch_size: 32,
            adam: AdamConfig::default(),
            masking: Masking::default(),
            seed,
            total_steps,
        }
    }
}

/// Dictionary pairs pulled together by a weighted mean squared distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSpec {
    pub pairs: Vec<(TokenId, TokenId)>,
    pub lambda: f64,
}

impl AlignSpec {
    pub fn new(dictionary: &GroundTruthDictionary, lambda: f64) -> Result<AlignSpec> {
        let spec = AlignSpec {
            pairs: dictionary.pairs.clone(),
            lambda,
        };
        if spec.pairs.is_empty() {
            return Err(Error::EmptyDictionary("align step needs at least one pair".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("align weight must be non-negative, got {lambda}")));
        }
        Ok(spec)
    }

    fn validate(&self, params: &ModelParams<f32>) -> Result<()> {
        let v = params.config.vocab_size;
        for &(e, f) in &self.pairs {
            if e as usize >= params.boundary {
                return Err(Error::IdOutOfRange {
                    id: e as usize,
                    vocab_size: params.boundary,
                });
            }
            if (f as usize) < params.boundary || f as usize >= v {
                return Err(Error::IdOutOfRange { id: f as usize, vocab_size: v });
            }
        }
        Ok(())
    }

    /// Mean squared distance between paired embedding rows.
    pub fn mean_distance(&self, params: &ModelParams<f32>) -> f64 {
        let total: f64 = self
            .pairs
            .iter()
            .map(|&(e, f)| {
                let (a, b) = (params.embedding_row(e as usize), params.embedding_row(f as usize));
                a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>()
            })
            .sum();
        total / self.pairs.len() as f64
    }

    /// Adds the weighted penalty gradient to `grad`; returns the penalty.
    fn accumulate(&self, params: &ModelParams<f32>, grad: &mut [f32]) -> f32 {
        let d = params.config.hidden;
        let base = params.layout.tok_emb;
        let scale = (2.0 * self.lambda / self.pairs.len() as f64) as f32;
        for &(e, f) in &self.pairs {
            let (e, f) = (e as usize, f as usize);
            for k in 0..d {
                let diff = params.data[base + e * d + k] - params.data[base + f * d + k];
                grad[base + e * d + k] += scale * diff;
                grad[base + f * d + k] -= scale * diff;
            }
        }
        (self.lambda * self.mean_distance(params)) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lang: Lang,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub align: Option<f64>,
}

/// Everything needed to continue a run: parameters, optimizer moments and
/// the step counter. Batches and masks are derived from the step, so no
/// generator state is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    pub step: usize,
    pub losses: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>) -> TrainState {
        let n = params.num_params();
        TrainState {
            params,
            optimizer: AdamState::new(n),
            step: 0,
            losses: Vec::new(),
        }
    }
}

/// Which corpus feeds a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPlan {
    Only(Lang),
    /// Even steps draw from the source corpus, odd steps from the target.
    Alternate,
}

pub struct Trainer<'a> {
    pub state: TrainState,
    config: TrainConfig,
    plan: StepPlan,
    source: Vec<&'a [TokenId]>,
    target: Vec<&'a [TokenId]>,
    output_range: Option<Range<usize>>,
    language_softmax: bool,
    align: Option<AlignSpec>,
}

fn usable<'a>(corpus: Option<&'a Corpus>, ids: Range<usize>) -> Result<Vec<&'a [TokenId]>> {
    let Some(corpus) = corpus else {
        return Ok(Vec::new());
    };
    for s in &corpus.sentences {
        if let Some(&t) = s.iter().find(|&&t| !ids.contains(&(t as usize))) {
            return Err(Error::IdOutOfRange {
                id: t as usize,
                vocab_size: ids.end,
            });
        }
    }
    Ok(corpus.sentences.iter().filter(|s| !s.is_empty()).map(|s| s.as_slice()).collect())
}

impl<'a> Trainer<'a> {
    pub fn new(
        state: TrainState,
        config: TrainConfig,
        plan: StepPlan,
        source: Option<&'a Corpus>,
        target: Option<&'a Corpus>,
    ) -> Result<Trainer<'a>> {
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        let b = state.params.boundary;
        let v = state.params.config.vocab_size;
        let source = usable(source, 0..b)?;
        let target = usable(target, b..v)?;
        let need_source = matches!(plan, StepPlan::Only(Lang::Source) | StepPlan::Alternate);
        let need_target = matches!(plan, StepPlan::Only(Lang::Target) | StepPlan::Alternate);
        if (need_source && source.is_empty()) || (need_target && target.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        Ok(Trainer {
            state,
            config,
            plan,
            source,
            target,
            output_range: None,
            language_softmax: false,
            align: None,
        })
    }

    /// Restricts the softmax to `range` and drops targets outside it.
    pub fn with_output_range(mut self, range: Range<usize>) -> Self {
        self.output_range = Some(range);
        self
    }

    /// Each step's softmax covers only the vocabulary half of its language.
    pub fn with_language_softmax(mut self) -> Self {
        self.language_softmax = true;
        self
    }

    pub fn with_align(mut self, spec: AlignSpec) -> Result<Self> {
        spec.validate(&self.state.params)?;
        self.align = Some(spec);
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn lang_at(&self, step: usize) -> Lang {
        match self.plan {
            StepPlan::Only(l) => l,
            StepPlan::Alternate if step % 2 == 0 => Lang::Source,
            StepPlan::Alternate => Lang::Target,
        }
    }

    /// The exact batch consumed at `step`.
    pub fn batch_at(&self, step: usize) -> Result<Batch> {
        let lang = self.lang_at(step);
        let pool = match lang {
            Lang::Source => &self.source,
            Lang::Target => &self.target,
        };
        let mut rng = stream_rng(self.config.seed, Purpose::Batch, step as u64);
        let picked: Vec<&[TokenId]> = (0..self.config.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let max_seq = self.state.params.config.max_seq;
        let mut batch = match self.config.objective {
            Objective::Clm => clm_batch(&picked, max_seq),
            Objective::Mlm => corrupt(
                &plain_batch(&picked, max_seq),
                &self.config.masking,
                self.state.params.boundary,
                self.state.params.config.vocab_size,
                mix_seed(self.config.seed, step as u64),
            )?,
        };
        let range = if self.language_softmax {
            Some(half_range(&self.state.params, lang))
        } else {
            self.output_range.clone()
        };
        if let Some(r) = &range {
            batch.targets.retain(|t| r.contains(&(t.label as usize)));
            batch.output_range = Some(r.clone());
        }
        Ok(batch)
    }

    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.state.step;
        let batch = self.batch_at(step)?;
        let lr = self.config.adam.lr_at(step, self.config.total_steps);
        let align_loss = std::cell::Cell::new(None);
        let extra = |p: &ModelParams<f32>, g: &mut [f32]| {
            let spec = self.align.as_ref().expect("align set");
            let l = spec.accumulate(p, g);
            align_loss.set(Some(l as f64));
            l
        };
        let loss = training_step(
            &mut self.state.params,
            &batch,
            &mut self.state.optimizer,
            &self.config.adam,
            lr,
            self.align.as_ref().map(|_| &extra as &dyn Fn(&ModelParams<f32>, &mut [f32]) -> f32),
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
            other => other,
        })?;
        let record = LossRecord {
            step,
            lang: self.lang_at(step),
            loss: loss as f64,
            align: align_loss.get(),
        };
        self.state.step += 1;
        self.state.losses.push(record.clone());
        Ok(record)
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

/// Output range for a single-language model: its own half plus, for the
/// source half, the special tokens.
fn half_range(params: &ModelParams<f32>, lang: Lang) -> Range<usize> {
    match lang {
        Lang::Source => 0..params.boundary,
        Lang::Target => params.boundary..params.config.vocab_size,
    }
}

/// Fresh model trained on one language; the other half of the vocabulary
/// is present but never receives gradient.
pub fn train_monolingual(
    corpus: &Corpus,
    model: ModelConfig,
    boundary: usize,
    config: &TrainConfig,
    steps: usize,
) -> Result<TrainState> {
    let params = ModelParams::init(model, boundary, config.seed)?;
    let range = half_range(&params, corpus.lang);
    let (src, tgt) = match corpus.lang {
        Lang::Source => (Some(corpus), None),
        Lang::Target => (None, Some(corpus)),
    };
    let mut t = Trainer::new(TrainState::new(params), *config, StepPlan::Only(corpus.lang), src, tgt)?
        .with_output_range(range);
    t.run(steps)?;
    Ok(t.into_state())
}

/// Prepares the freeze-and-retrain stage: E_f is redrawn and becomes the
/// only trainable group, and the softmax covers the target half only.
pub fn unidirectional_trainer<'a>(
    mut pretrained: ModelParams<f32>,
    corpus_f: &'a Corpus,
    config: &TrainConfig,
) -> Result<Trainer<'a>> {
    pretrained.reinit_group(Group::TargetEmbeddings, config.seed);
    pretrained.trainable = TrainableFlags::TARGET_ONLY;
    let range = half_range(&pretrained, Lang::Target);
    Ok(
        Trainer::new(TrainState::new(pretrained), *config, StepPlan::Only(Lang::Target), None, Some(corpus_f))?
            .with_output_range(range),
    )
}

pub fn decipher_unidirectional(
    pretrained: ModelParams<f32>,
    corpus_f: &Corpus,
    config: &TrainConfig,
    steps: usize,
) -> Result<TrainState> {
    let mut t = unidirectional_trainer(pretrained, corpus_f, config)?;
    t.run(steps)?;
    Ok(t.into_state())
}

pub fn train_joint(
    corpus_e: &Corpus,
    corpus_f: &Corpus,
    model: ModelConfig,
    boundary: usize,
    config: &TrainConfig,
    steps: usize,
) -> Result<TrainState> {
    let params = ModelParams::init(model, boundary, config.seed)?;
    let mut t = Trainer::new(TrainState::new(params), *config, StepPlan::Alternate, Some(corpus_e), Some(corpus_f))?;
    t.run(steps)?;
    Ok(t.into_state())
}

/// Continues joint training from `state` with the dictionary penalty added.
pub fn align_step(
    state: TrainState,
    spec: AlignSpec,
    corpus_e: &Corpus,
    corpus_f: &Corpus,
    config: &TrainConfig,
    steps: usize,
) -> Result<TrainState> {
    let mut state = state;
    state.params.trainable = TrainableFlags::ALL;
    let mut t =
        Trainer::new(state, *config, StepPlan::Alternate, Some(corpus_e), Some(corpus_f))?.with_align(spec)?;
    t.run(steps)?;
    Ok(t.into_state())
}
