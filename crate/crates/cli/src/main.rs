use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use decipher_core::corpus::synth::{SynthConfig, SyntheticLanguage};
use decipher_core::corpus::{ConditionName, ConditionSpec};
use decipher_core::decipher::Regime;
use decipher_core::harness::{
    aggregate, evaluate_run, find_runs, prepare_dataset, probe_run, run_condition, sweep, RunManifest, RunOptions,
    SweepGrid, MANIFEST_FILE,
};
use decipher_core::lm::{ModelConfig, Objective};
use decipher_core::metrics::{probe_summary, EvalReport};

/// Controlled English/Fake-English decipherment experiments.
#[derive(Parser)]
#[command(name = "decipher", version)]
struct Cli {
    /// Directory with the raw corpora: NT.txt plus OT.txt, TED.txt and
    /// WIKI.txt for the domain conditions.
    #[arg(long, env = "DECIPHER_DATA", default_value = "data", global = true)]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check (or synthesize) corpora and build each condition's tokenizers.
    PrepareData(PrepareArgs),
    /// Train and evaluate one cell.
    Train(TrainArgs),
    /// Re-evaluate the final models of a finished run.
    Eval(RunDirArgs),
    /// Permutation probe on a finished run.
    Probe(ProbeArgs),
    /// Run every cell of a grid, skipping finished ones.
    Sweep(SweepArgs),
    /// Summarize finished runs into figure tables.
    Aggregate(AggregateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSize {
    /// 4 layers, width 128
    Desk,
    /// 2 layers, width 32
    Tiny,
}

#[derive(Args, Clone)]
struct Settings {
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 1000)]
    eval_every: usize,
    /// Source-side BPE budget; granularity conditions scale the target side.
    #[arg(long, default_value_t = 500)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0.15)]
    mask_ratio: f64,
    /// Weight of the dictionary term in the align phase.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Align-phase steps; defaults to a quarter of --steps.
    #[arg(long)]
    align_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
    model: ModelSize,
    /// Held-out sentence pairs taken from the end of the source corpus.
    #[arg(long, default_value_t = 1000)]
    heldout: usize,
    /// Use the full softmax in joint training instead of per-language halves.
    #[arg(long)]
    full_softmax: bool,
    /// Root directory for run outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    /// Conditions to prepare; all nine by default.
    #[arg(long, value_delimiter = ',')]
    condition: Vec<ConditionName>,
    #[arg(long, default_value_t = 500)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    heldout: usize,
    /// Write synthetic corpora into the data root first.
    #[arg(long)]
    synthetic: bool,
    /// Lines per synthetic corpus.
    #[arg(long, default_value_t = 20_000)]
    lines: usize,
    /// Where tokenizers and dictionaries go; defaults to <data-root>/prepared.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    condition: ConditionName,
    #[arg(long, default_value = "mlm")]
    objective: Objective,
    #[arg(long, default_value = "joint")]
    regime: Regime,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    settings: Settings,
    /// Continue a partially finished run.
    #[arg(long)]
    resume: bool,
    /// Run from a saved manifest instead of the flags above.
    #[arg(long, conflicts_with = "condition")]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct RunDirArgs {
    /// Run directory.
    run: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    run: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_k: usize,
    #[arg(long, default_value_t = 7)]
    probe_seeds: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Conditions; all nine by default.
    #[arg(long, value_delimiter = ',')]
    condition: Vec<ConditionName>,
    #[arg(long, value_delimiter = ',', default_value = "mlm")]
    objective: Vec<Objective>,
    #[arg(long, value_delimiter = ',', default_value = "joint")]
    regime: Vec<Regime>,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct AggregateArgs {
    /// Root searched for run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long, default_value = "aggregate")]
    out: PathBuf,
}

fn condition_spec(data_root: &Path, name: ConditionName, vocab: usize, heldout: usize, seed: u64) -> Result<ConditionSpec> {
    let source = data_root.join("NT.txt");
    let domain = name.target_domain().map(|d| data_root.join(format!("{d}.txt")));
    let mut spec = ConditionSpec::for_name(name, source, domain.as_deref(), vocab, seed)?;
    spec.heldout = heldout;
    Ok(spec)
}

fn build_manifest(
    data_root: &Path,
    name: ConditionName,
    objective: Objective,
    regime: Regime,
    seed: u64,
    s: &Settings,
) -> Result<RunManifest> {
    let spec = condition_spec(data_root, name, s.vocab_size, s.heldout, seed)?;
    let mut m = RunManifest::new(spec, objective, regime, seed, &s.out);
    m.model = match s.model {
        ModelSize::Desk => ModelConfig::new(0),
        ModelSize::Tiny => ModelConfig::tiny(0),
    };
    m.eval.layers = m.model.eval_layers.clone();
    m.steps = s.steps;
    m.align_steps = s.align_steps.unwrap_or(s.steps / 4);
    m.eval_every = s.eval_every;
    m.align_lambda = s.lambda;
    m.language_softmax = !s.full_softmax;
    m.train.masking.ratio = s.mask_ratio;
    if let Some(lr) = s.lr {
        m.train.adam.lr = lr;
    }
    if let Some(b) = s.batch_size {
        m.train.batch_size = b;
    }
    let m = m.normalized();
    m.validate()?;
    Ok(m)
}

fn print_report(r: &EvalReport) {
    println!(
        "step {:>7}  bli {:.3}  align {:.3}  retrieval {:.3}  ucl {:.3}  ppl_e {:.2}  ppl_f {:.2}  H(e|f) {:.3}",
        r.step, r.bli_p1, r.alignment_f1, r.retrieval_f1, r.ucl, r.ppl_e, r.ppl_f, r.h_e_given_f
    );
}

fn write_synthetic(root: &Path, lines: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let base = SyntheticLanguage::new(&SynthConfig {
        seed,
        ..SynthConfig::default()
    });
    let mut corpora = vec![("NT", base.clone())];
    for (i, (domain, drift)) in [("OT", 0.2), ("TED", 0.5), ("WIKI", 0.8)].into_iter().enumerate() {
        corpora.push((domain, base.drifted(drift, seed + 1 + i as u64)));
    }
    for (i, (name, lang)) in corpora.iter().enumerate() {
        let path = root.join(format!("{name}.txt"));
        fs::write(&path, lang.sample_lines(lines, seed + 100 + i as u64).join("\n") + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn prepare(data_root: &Path, a: PrepareArgs) -> Result<()> {
    if a.synthetic {
        write_synthetic(data_root, a.lines, a.seed)?;
    }
    let names = if a.condition.is_empty() { ConditionName::ALL.to_vec() } else { a.condition };
    let out = a.out.unwrap_or_else(|| data_root.join("prepared"));
    for name in names {
        let spec = condition_spec(data_root, name, a.vocab_size, a.heldout, a.seed)?;
        let dir = out.join(format!("{name}-v{}-seed{}", a.vocab_size, a.seed));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let ds = prepare_dataset(&spec, Some(&dir)).with_context(|| format!("preparing {name}"))?;
        ds.dictionary.save(dir.join("dictionary.tsv"), &ds.vocab)?;
        fs::write(dir.join("condition.txt"), spec.to_text())?;
        println!(
            "{name}: vocab {}+{}  dictionary {}  train {} / {} sentences  held-out {}  -> {}",
            ds.vocab.source.len(),
            ds.vocab.target.len(),
            ds.dictionary.len(),
            ds.source.len(),
            ds.target.len(),
            ds.heldout.len(),
            dir.display()
        );
    }
    Ok(())
}

fn train(data_root: &Path, a: TrainArgs) -> Result<()> {
    let m = match &a.manifest {
        Some(path) => RunManifest::load(path)?,
        None => build_manifest(data_root, a.condition, a.objective, a.regime, a.seed, &a.settings)?,
    };
    let out = run_condition(
        &m,
        RunOptions {
            resume: a.resume,
            stop_after: None,
        },
    )?;
    for r in &out.reports {
        print_report(r);
    }
    println!("{}", out.dir.display());
    Ok(())
}

fn load_run(dir: &Path) -> Result<(RunManifest, decipher_core::corpus::Dataset)> {
    let m = RunManifest::load(dir.join(MANIFEST_FILE)).with_context(|| format!("{} is not a run directory", dir.display()))?;
    let ds = prepare_dataset(&m.condition, Some(dir))?;
    Ok((m, ds))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::PrepareData(a) => prepare(&cli.data_root, a),
        Command::Train(a) => train(&cli.data_root, a),
        Command::Eval(a) => {
            let (_, ds) = load_run(&a.run)?;
            let report = evaluate_run(&a.run, &ds)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Probe(a) => {
            let (_, ds) = load_run(&a.run)?;
            let schedule: Vec<usize> = (0..=a.max_k).collect();
            let seeds: Vec<u64> = (0..a.probe_seeds).collect();
            let rows = probe_run(&a.run, &ds, &schedule, &seeds)?;
            println!("k,ppl_mean,ppl_sd");
            for (k, mean, sd) in probe_summary(&rows) {
                println!("{k},{mean},{}", sd.map(|s| s.to_string()).unwrap_or_default());
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let names = if a.condition.is_empty() { ConditionName::ALL.to_vec() } else { a.condition };
            let conditions = names
                .iter()
                .map(|&n| condition_spec(&cli.data_root, n, a.settings.vocab_size, a.settings.heldout, 0))
                .collect::<Result<Vec<_>>>()?;
            let template = build_manifest(&cli.data_root, names.first().copied().unwrap_or(ConditionName::NtNt), Objective::Mlm, Regime::Joint, 0, &a.settings)?;
            let grid = SweepGrid {
                conditions,
                objectives: a.objective,
                regimes: a.regime,
                seeds: (0..a.seeds).collect(),
            };
            let summary = sweep(&grid, &template)?;
            println!("{} cells: {} run, {} already complete", summary.runs.len(), summary.executed, summary.skipped);
            Ok(())
        }
        Command::Aggregate(a) => {
            let dirs = find_runs(&a.runs)?;
            if dirs.is_empty() {
                bail!("no run directories under {}", a.runs.display());
            }
            let summary = aggregate(&dirs, &a.out)?;
            println!("{} finished runs in {} cells -> {}", summary.runs, summary.cells.len(), a.out.display());
            for c in &summary.correlations {
                if let Some(rho) = c.spearman {
                    println!("{} [{}] n={} spearman {rho:.3}", c.name, c.scope, c.n);
                }
            }
            Ok(())
        }
    }
}
