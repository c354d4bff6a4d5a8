use std::fs;
use std::path::{Path, PathBuf};

use decipher_core::corpus::synth::{SynthConfig, SyntheticLanguage};
use decipher_core::corpus::{ConditionName, ConditionSpec};
use decipher_core::decipher::Regime;
use decipher_core::harness::{
    aggregate, find_runs, probe_run, prepare_dataset, read_reports, run_condition, sweep, RunManifest, RunOptions,
    SweepGrid, CHECKPOINT_FILE, DONE_FILE, LOSSES_FILE, MAPPING_FILE, REPORTS_FILE,
};
use decipher_core::lm::{ModelConfig, Objective};
use decipher_core::Error;
use tempfile::TempDir;

fn write_corpus(dir: &Path, name: &str, seed: u64, drift: Option<f64>) -> PathBuf {
    let mut lang = SyntheticLanguage::new(&SynthConfig::small(7));
    if let Some(d) = drift {
        lang = lang.drifted(d, seed);
    }
    let path = dir.join(format!("{name}.txt"));
    fs::write(&path, lang.sample_lines(260, seed).join("\n")).unwrap();
    path
}

fn tiny_manifest(dir: &Path, name: ConditionName, objective: Objective, regime: Regime, seed: u64) -> RunManifest {
    let source = write_corpus(dir, "news", 1, None);
    let domain = write_corpus(dir, "talks", 2, Some(0.5));
    let mut cond = ConditionSpec::for_name(name, source, Some(&domain), 90, seed).unwrap();
    cond.heldout = 16;
    let mut m = RunManifest::new(cond, objective, regime, seed, dir.join("runs"));
    m.model = ModelConfig {
        hidden: 16,
        ff_dim: 32,
        max_seq: 24,
        ..ModelConfig::tiny(0)
    };
    m.eval.layers = m.model.eval_layers.clone();
    m.eval.max_pairs = 16;
    m.steps = 12;
    m.align_steps = 6;
    m.eval_every = 4;
    m.train.batch_size = 4;
    m.train.adam.lr = 1e-3;
    m.normalized()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn joint_run_writes_one_report_per_eval_interval() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Mlm, Regime::Joint, 0);
    let out = run_condition(&m, RunOptions::default()).unwrap();
    assert!(out.completed);
    assert_eq!(out.reports.len(), m.steps / m.eval_every);
    let steps: Vec<usize> = out.reports.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![4, 8, 12]);
    for f in [DONE_FILE, CHECKPOINT_FILE, MAPPING_FILE, LOSSES_FILE, REPORTS_FILE, "manifest.json"] {
        assert!(out.dir.join(f).exists(), "{f} missing");
    }
    let losses = fs::read_to_string(out.dir.join(LOSSES_FILE)).unwrap();
    assert_eq!(losses.lines().count(), 1 + m.steps);
    assert!(out.dir.ends_with("NT-NT/mlm/joint/seed-0"));
}

#[test]
fn dirty_directory_needs_resume() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Clm, Regime::Joint, 0);
    fs::create_dir_all(m.run_dir()).unwrap();
    fs::write(m.run_dir().join("stray"), "x").unwrap();
    let err = run_condition(&m, RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::DirtyOutput(_)), "{err}");
}

#[test]
fn resume_rejects_a_changed_manifest() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Clm, Regime::Joint, 0);
    run_condition(&m, RunOptions { resume: false, stop_after: Some(4) }).unwrap();
    let mut changed = m.clone();
    changed.align_lambda = 3.0;
    let err = run_condition(&changed, RunOptions { resume: true, stop_after: None }).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
}

fn interrupted_equals_uninterrupted(regime: Regime, stops: &[usize]) {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ma = tiny_manifest(a.path(), ConditionName::NtNt, Objective::Mlm, regime, 3);
    let mb = tiny_manifest(b.path(), ConditionName::NtNt, Objective::Mlm, regime, 3);
    let full = run_condition(&ma, RunOptions::default()).unwrap();

    let mut resume = false;
    for &s in stops {
        let part = run_condition(&mb, RunOptions { resume, stop_after: Some(s) }).unwrap();
        assert!(!part.completed);
        resume = true;
    }
    let done = run_condition(&mb, RunOptions { resume: true, stop_after: None }).unwrap();
    assert!(done.completed);
    let fa = files(&full.dir);
    let fb = files(&done.dir);
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, fb.iter().map(|f| f.0.as_str()).collect::<Vec<_>>());
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        if name == "manifest.json" {
            continue;
        }
        assert!(x == y, "{name} differs after resume ({regime})");
    }
}

#[test]
fn resumed_joint_run_is_bit_identical() {
    interrupted_equals_uninterrupted(Regime::Joint, &[4, 8]);
}

#[test]
fn resumed_two_stage_runs_are_bit_identical() {
    interrupted_equals_uninterrupted(Regime::Unidirectional, &[12]);
    interrupted_equals_uninterrupted(Regime::Separate, &[5, 16]);
    interrupted_equals_uninterrupted(Regime::Align, &[12, 16]);
}

#[test]
fn identical_manifests_give_identical_report_streams() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ra = run_condition(&tiny_manifest(a.path(), ConditionName::NtInv, Objective::Clm, Regime::Joint, 1), RunOptions::default()).unwrap();
    let rb = run_condition(&tiny_manifest(b.path(), ConditionName::NtInv, Objective::Clm, Regime::Joint, 1), RunOptions::default()).unwrap();
    assert_eq!(
        fs::read(ra.dir.join(REPORTS_FILE)).unwrap(),
        fs::read(rb.dir.join(REPORTS_FILE)).unwrap()
    );
}

#[test]
fn separate_and_align_regimes_report_in_their_evaluated_phases() {
    let tmp = TempDir::new().unwrap();
    let sep = run_condition(&tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Mlm, Regime::Separate, 0), RunOptions::default()).unwrap();
    let steps: Vec<usize> = sep.reports.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![16, 20, 24]);
    let al = run_condition(&tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Mlm, Regime::Align, 0), RunOptions::default()).unwrap();
    let steps: Vec<usize> = al.reports.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![4, 8, 12, 16, 18]);
}

fn grid(tmp: &Path, names: &[ConditionName], seeds: &[u64]) -> (SweepGrid, RunManifest) {
    let template = tiny_manifest(tmp, ConditionName::NtNt, Objective::Mlm, Regime::Joint, 0);
    let conditions = names
        .iter()
        .map(|&n| tiny_manifest(tmp, n, Objective::Mlm, Regime::Joint, 0).condition)
        .collect();
    let g = SweepGrid {
        conditions,
        objectives: vec![Objective::Mlm],
        regimes: vec![Regime::Joint],
        seeds: seeds.to_vec(),
    };
    (g, template)
}

#[test]
fn full_grid_plans_sixty_three_cells() {
    let tmp = TempDir::new().unwrap();
    let seeds: Vec<u64> = (0..7).collect();
    let (g, template) = grid(tmp.path(), &ConditionName::ALL, &seeds);
    let manifests = g.manifests(&template).unwrap();
    assert_eq!(manifests.len(), 63);
    let mut dirs: Vec<PathBuf> = manifests.iter().map(|m| m.run_dir()).collect();
    dirs.sort();
    dirs.dedup();
    assert_eq!(dirs.len(), 63);
}

#[test]
fn empty_grid_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let (mut g, template) = grid(tmp.path(), &[ConditionName::NtNt], &[0]);
    g.seeds.clear();
    assert!(matches!(sweep(&g, &template), Err(Error::InvalidConfig(_))));
}

#[test]
fn sweep_is_idempotent_and_aggregates_order_independently() {
    let tmp = TempDir::new().unwrap();
    let names = [ConditionName::NtNt, ConditionName::NtTed, ConditionName::NtRnd];
    let (g, template) = grid(tmp.path(), &names, &[0, 1]);
    let first = sweep(&g, &template).unwrap();
    assert_eq!((first.executed, first.skipped), (6, 0));
    let second = sweep(&g, &template).unwrap();
    assert_eq!((second.executed, second.skipped), (0, 6));

    let mut runs = find_runs(&tmp.path().join("runs")).unwrap();
    assert_eq!(runs.len(), 6);
    let dataset = prepare_dataset(&template.condition, Some(&runs[0])).unwrap();
    probe_run(&runs[0], &dataset, &[0, 1, 2], &[0, 1]).unwrap();

    let out_a = tmp.path().join("agg-a");
    let out_b = tmp.path().join("agg-b");
    let a = aggregate(&runs, &out_a).unwrap();
    runs.reverse();
    let b = aggregate(&runs, &out_b).unwrap();
    assert_eq!(a, b);
    for f in ["fig1.csv", "fig2.csv", "fig3.csv", "fig4.csv", "fig5.csv", "correlations.csv", "aggregate.json"] {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{f}");
    }
    let fig3 = fs::read_to_string(out_a.join("fig3.csv")).unwrap();
    assert_eq!(fig3.lines().count(), 1 + names.len());
    let fig2 = fs::read_to_string(out_a.join("fig2.csv")).unwrap();
    assert_eq!(fig2.lines().count(), 1 + 3);
    assert!(a.cells.iter().all(|c| c.seeds == 2 && c.fields["ucl"].sd.is_some()));
}

#[test]
fn sweep_rejects_finished_cell_with_other_settings() {
    let tmp = TempDir::new().unwrap();
    let (g, template) = grid(tmp.path(), &[ConditionName::NtNt], &[0]);
    sweep(&g, &template).unwrap();
    let mut longer = template.clone();
    longer.steps += 4;
    assert!(matches!(sweep(&g, &longer), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn single_run_cell_has_means_without_sd() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Clm, Regime::Joint, 0);
    let run = run_condition(&m, RunOptions::default()).unwrap();
    let summary = aggregate(&[run.dir.clone()], &tmp.path().join("agg")).unwrap();
    let cell = &summary.cells[0];
    assert_eq!(cell.seeds, 1);
    let last = read_reports(&run.dir).unwrap().pop().unwrap();
    assert_eq!(cell.fields["bli_p1"].mean, last.bli_p1);
    assert_eq!(cell.fields["ucl"].mean, last.ucl);
    assert!(cell.fields.values().all(|f| f.sd.is_none()));
}

#[test]
fn aggregate_rejects_mixed_settings() {
    let tmp = TempDir::new().unwrap();
    let a = tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Clm, Regime::Joint, 0);
    let mut b = tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Clm, Regime::Joint, 1);
    b.eval_every = 6;
    let ra = run_condition(&a, RunOptions::default()).unwrap();
    let rb = run_condition(&b, RunOptions::default()).unwrap();
    let err = aggregate(&[ra.dir, rb.dir], &tmp.path().join("agg")).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
}

#[test]
fn aggregate_needs_a_finished_run() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_manifest(tmp.path(), ConditionName::NtNt, Objective::Clm, Regime::Joint, 0);
    let part = run_condition(&m, RunOptions { resume: false, stop_after: Some(4) }).unwrap();
    assert!(aggregate(&[part.dir], &tmp.path().join("agg")).is_err());
}
