use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::RunManifest;
use crate::bpe::BpeModel;
use crate::corpus::{build_condition, load_corpus, ConditionSpec, ConditionTokenizers, Dataset, GroundTruthDictionary, Lang};
use crate::decipher::{mapping_between, unidirectional_trainer, AlignSpec, LossRecord, Regime, StepPlan, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::lm::{Checkpoint, ModelConfig, ModelParams, TrainableFlags};
use crate::metrics::{evaluate, lexical_ids, permutation_probe, EvalReport, ModelPair, ProbeRow, Scorer};
use crate::seed::mix_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SOURCE_MODEL_FILE: &str = "source_model.bin";
pub const MAPPING_FILE: &str = "mapping.tsv";
pub const DONE_FILE: &str = "DONE";
pub const PROBE_FILE: &str = "probe.csv";
pub const PROBE_SCHEMA: &str = "decipher-probe-v1";
pub const LOSSES_SCHEMA: &str = "decipher-losses-v1";
const LOSSES_HEADER: &str = "schema,step,lang,loss,align";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SourceOnly,
    TargetOnly,
    Unidirectional,
    Joint,
    Align,
}

impl Phase {
    fn fresh_seed(self, seed: u64) -> u64 {
        match self {
            Phase::SourceOnly | Phase::Joint | Phase::Align => seed,
            Phase::TargetOnly => mix_seed(seed, 1),
            Phase::Unidirectional => mix_seed(seed, 2),
        }
    }
}

/// Phases of a regime with their step counts.
pub fn phases(m: &RunManifest) -> Vec<(Phase, usize)> {
    match m.regime {
        Regime::Separate => vec![(Phase::SourceOnly, m.steps), (Phase::TargetOnly, m.steps)],
        Regime::Unidirectional => vec![(Phase::SourceOnly, m.steps), (Phase::Unidirectional, m.steps)],
        Regime::Joint => vec![(Phase::Joint, m.steps)],
        Regime::Align => vec![(Phase::Joint, m.steps), (Phase::Align, m.align_steps)],
    }
}

fn evaluated(regime: Regime, phase: Phase) -> bool {
    match regime {
        Regime::Separate => phase == Phase::TargetOnly,
        Regime::Unidirectional => phase == Phase::Unidirectional,
        Regime::Joint | Regime::Align => true,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop at the first checkpoint at or after this global step.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub reports: Vec<EvalReport>,
    pub completed: bool,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Progress {
    phase: usize,
    global_step: usize,
    reports: usize,
    losses: usize,
}

/// Loads the condition's corpora and tokenizers. Tokenizers found in
/// `tokenizer_dir` are reused; otherwise they are trained and saved there.
pub fn prepare_dataset(spec: &ConditionSpec, tokenizer_dir: Option<&Path>) -> Result<Dataset> {
    let tag = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let source = load_corpus(&spec.source_corpus, &tag(&spec.source_corpus))?;
    let target = if spec.target_corpus == spec.source_corpus {
        source.clone()
    } else {
        load_corpus(&spec.target_corpus, &tag(&spec.target_corpus))?
    };
    let saved = tokenizer_dir.map(|d| (d.join("source.bpe"), d.join("target.bpe")));
    let tokenizers = match &saved {
        Some((s, t)) if s.exists() && t.exists() => Some(ConditionTokenizers {
            source: BpeModel::load(s)?,
            target: BpeModel::load(t)?,
        }),
        _ => None,
    };
    let dataset = build_condition(spec, &source, &target, tokenizers)?;
    if let Some((s, t)) = &saved {
        if !s.exists() || !t.exists() {
            dataset.vocab.source.save(s)?;
            dataset.vocab.target.save(t)?;
        }
    }
    Ok(dataset)
}

/// Runs the manifest end to end, loading its corpora from disk.
pub fn run_condition(manifest: &RunManifest, opts: RunOptions) -> Result<RunOutcome> {
    let dir = open_run_dir(manifest, opts.resume)?;
    let dataset = prepare_dataset(&manifest.condition, Some(&dir))?;
    run_prepared(manifest, &dataset, &dir, opts)
}

/// Runs the manifest on an already built dataset.
pub fn run_with_dataset(manifest: &RunManifest, dataset: &Dataset, opts: RunOptions) -> Result<RunOutcome> {
    let dir = open_run_dir(manifest, opts.resume)?;
    run_prepared(manifest, dataset, &dir, opts)
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    Ok(fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none())
}

fn open_run_dir(manifest: &RunManifest, resume: bool) -> Result<PathBuf> {
    let manifest = manifest.clone().normalized();
    manifest.validate()?;
    let dir = manifest.run_dir();
    if dir.exists() && !is_empty_dir(&dir)? {
        if !resume {
            return Err(Error::DirtyOutput(dir));
        }
        let existing = RunManifest::load(dir.join(MANIFEST_FILE))?;
        if existing != manifest {
            return Err(Error::CheckpointMismatch(format!(
                "{} was started with a different manifest",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(dir)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Cuts a line-oriented file back to its first `keep` lines.
fn truncate_lines(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let lines = read_lines(path)?;
    let mut text = lines.into_iter().take(keep).collect::<Vec<_>>().join("\n");
    if keep > 0 {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    read_lines(&dir.join(REPORTS_FILE))?
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn loss_line(r: &LossRecord, offset: usize) -> String {
    let lang = match r.lang {
        Lang::Source => "e",
        Lang::Target => "f",
    };
    let align = r.align.map(|a| a.to_string()).unwrap_or_default();
    format!("{LOSSES_SCHEMA},{},{lang},{},{align}\n", r.step + offset, r.loss)
}

struct Runner<'a> {
    m: RunManifest,
    dataset: &'a Dataset,
    dir: PathBuf,
    model: ModelConfig,
    boundary: usize,
    phases: Vec<(Phase, usize)>,
    progress: Progress,
    source_model: Option<ModelParams<f32>>,
}

impl<'a> Runner<'a> {
    fn phase_start(&self, i: usize) -> usize {
        self.phases[..i].iter().map(|p| p.1).sum()
    }

    /// Trainer for phase `i`, starting from `carried` (the previous phase's
    /// final state) or from a checkpointed state of this phase.
    fn trainer(&self, i: usize, carried: Option<TrainState>, resumed: bool) -> Result<Trainer<'a>> {
        let (phase, _) = self.phases[i];
        let ds = self.dataset;
        let mut config = self.m.train;
        config.seed = phase.fresh_seed(self.m.seed);
        let fresh = |seed: u64| -> Result<TrainState> { Ok(TrainState::new(ModelParams::init(self.model.clone(), self.boundary, seed)?)) };
        let trainer = match phase {
            Phase::SourceOnly => {
                let state = match carried {
                    Some(s) => s,
                    None => fresh(config.seed)?,
                };
                Trainer::new(state, config, StepPlan::Only(Lang::Source), Some(&ds.source), None)?
                    .with_output_range(0..self.boundary)
            }
            Phase::TargetOnly => {
                let state = match (carried, resumed) {
                    (Some(s), true) => s,
                    _ => fresh(config.seed)?,
                };
                Trainer::new(state, config, StepPlan::Only(Lang::Target), None, Some(&ds.target))?
                    .with_output_range(self.boundary..self.model.vocab_size)
            }
            Phase::Unidirectional => {
                let state = carried.ok_or_else(|| Error::CheckpointMismatch("no pretrained model".into()))?;
                if resumed {
                    let range = self.boundary..self.model.vocab_size;
                    Trainer::new(state, config, StepPlan::Only(Lang::Target), None, Some(&ds.target))?
                        .with_output_range(range)
                } else {
                    unidirectional_trainer(state.params, &ds.target, &config)?
                }
            }
            Phase::Joint | Phase::Align => {
                let mut state = match carried {
                    Some(s) => s,
                    None => fresh(config.seed)?,
                };
                state.params.trainable = TrainableFlags::ALL;
                let mut t = Trainer::new(state, config, StepPlan::Alternate, Some(&ds.source), Some(&ds.target))?;
                if self.m.language_softmax {
                    t = t.with_language_softmax();
                }
                if phase == Phase::Align {
                    let dictionary = GroundTruthDictionary::identity_prefix(&ds.vocab);
                    t = t.with_align(AlignSpec::new(&dictionary, self.m.align_lambda)?)?;
                }
                t
            }
        };
        Ok(trainer)
    }

    fn model_pair<'p>(&'p self, current: &'p ModelParams<f32>) -> ModelPair<'p> {
        match self.m.regime {
            Regime::Separate => ModelPair::per_language(self.source_model.as_ref().unwrap_or(current), current),
            Regime::Unidirectional => ModelPair::per_language(current, current),
            Regime::Joint | Regime::Align if self.m.language_softmax => ModelPair::per_language(current, current),
            Regime::Joint | Regime::Align => ModelPair::joint(current),
        }
    }

    fn save(&mut self, state: &TrainState, losses_from: usize, step_offset: usize) -> Result<()> {
        let lines: String = state.losses[losses_from..].iter().map(|r| loss_line(r, step_offset)).collect();
        let path = self.dir.join(LOSSES_FILE);
        if !path.exists() {
            append(&path, &format!("{LOSSES_HEADER}\n"))?;
        }
        append(&path, &lines)?;
        self.progress.losses += state.losses.len() - losses_from;
        Checkpoint {
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            step: state.step,
            meta: serde_json::to_value(self.progress)?,
        }
        .save(self.dir.join(CHECKPOINT_FILE))
    }
}

fn run_prepared(manifest: &RunManifest, dataset: &Dataset, dir: &Path, opts: RunOptions) -> Result<RunOutcome> {
    let m = manifest.clone().normalized();
    if dir.join(DONE_FILE).exists() {
        let reports = read_reports(dir)?;
        return Ok(RunOutcome {
            dir: dir.to_path_buf(),
            step: m.total_steps(),
            reports,
            completed: true,
        });
    }
    let mut model = m.model.clone();
    model.vocab_size = dataset.vocab.total_size();
    model.validate()?;
    let mut runner = Runner {
        phases: phases(&m),
        m,
        dataset,
        dir: dir.to_path_buf(),
        model,
        boundary: dataset.vocab.offset(),
        progress: Progress {
            phase: 0,
            global_step: 0,
            reports: 0,
            losses: 0,
        },
        source_model: None,
    };

    let ck_path = dir.join(CHECKPOINT_FILE);
    let mut carried = None;
    let mut resumed = false;
    if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.params.config != runner.model || ck.params.boundary != runner.boundary {
            return Err(Error::CheckpointMismatch("checkpoint model does not match the manifest".into()));
        }
        runner.progress = serde_json::from_value(ck.meta.clone())?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::CheckpointMismatch("checkpoint lacks optimizer state".into()))?;
        carried = Some(TrainState {
            params: ck.params,
            optimizer,
            step: ck.step,
            losses: Vec::new(),
        });
        resumed = runner.progress.global_step > runner.phase_start(runner.progress.phase.min(runner.phases.len() - 1));
    }
    truncate_lines(&dir.join(REPORTS_FILE), runner.progress.reports)?;
    let loss_lines = if runner.progress.losses > 0 || dir.join(LOSSES_FILE).exists() {
        runner.progress.losses + 1
    } else {
        0
    };
    truncate_lines(&dir.join(LOSSES_FILE), loss_lines)?;
    if dir.join(SOURCE_MODEL_FILE).exists() {
        runner.source_model = Some(Checkpoint::load(dir.join(SOURCE_MODEL_FILE))?.params);
    }

    let eval_every = runner.m.eval_every;
    for i in runner.progress.phase..runner.phases.len() {
        let (phase, steps) = runner.phases[i];
        let start = runner.phase_start(i);
        let mut trainer = runner.trainer(i, carried.take(), resumed)?;
        // steps already taken in this phase when resuming mid-phase
        let done = runner.progress.global_step.saturating_sub(start).min(steps);
        let offset = start - (trainer.state.step - done);
        let mut losses_from = trainer.state.losses.len();
        resumed = false;
        for local in done..steps {
            trainer.step()?;
            let g = start + local + 1;
            let is_eval = evaluated(runner.m.regime, phase) && (g % eval_every == 0 || local + 1 == steps);
            let is_end = local + 1 == steps;
            if !is_eval && !is_end {
                continue;
            }
            if is_eval {
                let pair = runner.model_pair(&trainer.state.params);
                let report = evaluate(&pair, dataset, &runner.m.eval, g)?;
                append(&dir.join(REPORTS_FILE), &format!("{}\n", serde_json::to_string(&report)?))?;
                runner.progress.reports += 1;
            }
            runner.progress.global_step = g;
            runner.progress.phase = if is_end { i + 1 } else { i };
            runner.save(&trainer.state, losses_from, offset)?;
            losses_from = trainer.state.losses.len();
            if is_end && phase == Phase::SourceOnly && runner.m.regime == Regime::Separate {
                let params = trainer.state.params.clone();
                Checkpoint {
                    params: params.clone(),
                    optimizer: None,
                    step: trainer.state.step,
                    meta: serde_json::Value::Null,
                }
                .save(dir.join(SOURCE_MODEL_FILE))?;
                runner.source_model = Some(params);
            }
            if opts.stop_after.is_some_and(|s| g >= s) && g < runner.m.total_steps() {
                return Ok(RunOutcome {
                    dir: dir.to_path_buf(),
                    reports: read_reports(dir)?,
                    completed: false,
                    step: g,
                });
            }
        }
        carried = Some(trainer.into_state());
    }

    let last = carried.ok_or_else(|| Error::InvalidConfig("run has no phases".into()))?;
    let pair = runner.model_pair(&last.params);
    let mapping = mapping_between(pair.e, pair.f)?;
    mapping.save_tsv(&dataset.vocab, dir.join(MAPPING_FILE))?;
    let total = runner.m.total_steps();
    fs::write(dir.join(DONE_FILE), format!("{total}\n")).map_err(|e| Error::io(dir.join(DONE_FILE), e))?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        reports: read_reports(dir)?,
        completed: true,
        step: total,
    })
}

/// The finished source-side model of a run with its softmax support.
fn source_model(dir: &Path, m: &RunManifest) -> Result<(ModelParams<f32>, Option<std::ops::Range<usize>>)> {
    if !dir.join(DONE_FILE).exists() {
        return Err(Error::InvalidConfig(format!("{} is not a finished run", dir.display())));
    }
    let file = if m.regime == Regime::Separate { SOURCE_MODEL_FILE } else { CHECKPOINT_FILE };
    let params = Checkpoint::load(dir.join(file))?.params;
    let range = match m.regime {
        Regime::Joint | Regime::Align if !m.language_softmax => None,
        _ => Some(0..params.boundary),
    };
    Ok((params, range))
}

/// Permutation probe on the source-side model of a finished run, over the
/// held-out source sentences. Rows are also written to the run directory.
pub fn probe_run(dir: &Path, dataset: &Dataset, schedule: &[usize], seeds: &[u64]) -> Result<Vec<ProbeRow>> {
    let m = RunManifest::load(dir.join(MANIFEST_FILE))?;
    let (params, range) = source_model(dir, &m)?;
    let scorer = Scorer::new(&params, m.objective).with_output_range(range);
    let n = dataset.heldout.len().min(m.eval.max_pairs);
    let sentences: Vec<Vec<_>> = dataset.heldout[..n].iter().map(|p| p.source.clone()).collect();
    let rows = permutation_probe(&scorer, &sentences, lexical_ids(&params, false), schedule, seeds)?;
    let mut w = csv::Writer::from_path(dir.join(PROBE_FILE)).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_record(["schema", "k", "seed", "ppl"])?;
    for r in &rows {
        w.write_record([PROBE_SCHEMA.to_string(), r.k.to_string(), r.seed.to_string(), r.ppl.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(PROBE_FILE), e))?;
    Ok(rows)
}

pub fn read_probe(dir: &Path) -> Result<Vec<ProbeRow>> {
    let path = dir.join(PROBE_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Parse(format!("{}: short row", path.display())));
        let bad = |e: String| Error::Parse(format!("{}: {e}", path.display()));
        if field(0)? != PROBE_SCHEMA {
            return Err(bad(format!("unknown schema {}", field(0)?)));
        }
        rows.push(ProbeRow {
            k: field(1)?.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            seed: field(2)?.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            ppl: field(3)?.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        });
    }
    Ok(rows)
}

/// Re-evaluates the final models of a finished run.
pub fn evaluate_run(dir: &Path, dataset: &Dataset) -> Result<EvalReport> {
    let m = RunManifest::load(dir.join(MANIFEST_FILE))?;
    let (source, _) = source_model(dir, &m)?;
    let last = Checkpoint::load(dir.join(CHECKPOINT_FILE))?;
    let pair = match m.regime {
        Regime::Separate => ModelPair::per_language(&source, &last.params),
        Regime::Joint | Regime::Align if !m.language_softmax => ModelPair::joint(&last.params),
        _ => ModelPair::per_language(&last.params, &last.params),
    };
    evaluate(&pair, dataset, &m.eval, m.total_steps())
}
