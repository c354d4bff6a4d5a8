use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::manifest::RunManifest;
use super::run::{read_probe, read_reports, DONE_FILE, MANIFEST_FILE};
use crate::corpus::ConditionName;
use crate::decipher::Regime;
use crate::error::{Error, Result};
use crate::metrics::{mean, sample_sd, spearman, EvalReport};

pub const AGGREGATE_SCHEMA: &str = "decipher-aggregate-v1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldStats {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    pub condition: String,
    pub objective: String,
    pub regime: String,
    pub seeds: usize,
    pub fields: BTreeMap<String, FieldStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlation {
    pub name: String,
    pub scope: String,
    pub n: usize,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateSummary {
    pub schema: String,
    pub runs: usize,
    pub cells: Vec<CellStats>,
    pub correlations: Vec<Correlation>,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    reports: Vec<EvalReport>,
}

impl Run {
    fn cell(&self) -> (String, String, String) {
        (
            self.manifest.condition.name.to_string(),
            self.manifest.objective.to_string(),
            self.manifest.regime.to_string(),
        )
    }

    fn last(&self) -> &EvalReport {
        self.reports.last().expect("runs without reports are filtered out")
    }
}

/// Settings that must agree across every run of one aggregate: everything
/// except the grid coordinates and the output location.
fn shared_settings(m: &RunManifest) -> Result<Value> {
    let mut v = serde_json::to_value(m)?;
    let obj = v.as_object_mut().expect("manifest serializes to an object");
    for key in ["condition", "objective", "regime", "seed", "out_root"] {
        obj.remove(key);
    }
    for (section, keys) in [("train", &["objective", "seed", "total_steps"][..]), ("eval", &["objective"][..])] {
        if let Some(s) = obj.get_mut(section).and_then(Value::as_object_mut) {
            for k in keys {
                s.remove(*k);
            }
        }
    }
    obj.insert("source_vocab_size".into(), m.condition.source_vocab_size.into());
    obj.insert("heldout".into(), m.condition.heldout.into());
    Ok(v)
}

/// Finds run directories (those holding a manifest) below `root`.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_FILE).exists() {
            out.push(dir);
            continue;
        }
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if dir == root => return Err(Error::io(&dir, e)),
            Err(_) => continue,
        };
        for e in entries {
            let e = e.map_err(|e| Error::io(&dir, e))?;
            if e.file_type().map_err(|err| Error::io(e.path(), err))?.is_dir() {
                stack.push(e.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn numeric_fields(r: &EvalReport) -> Result<BTreeMap<String, f64>> {
    let v = serde_json::to_value(r)?;
    Ok(v.as_object()
        .expect("report serializes to an object")
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "step" | "pairs"))
        .filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x)))
        .collect())
}

fn stats(xs: &[f64]) -> FieldStats {
    FieldStats {
        mean: mean(xs).unwrap_or(f64::NAN),
        sd: sample_sd(xs),
    }
}

fn fmt(x: f64) -> String {
    x.to_string()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h = vec!["schema"];
    h.extend_from_slice(header);
    w.write_record(&h)?;
    for r in rows {
        let mut rec = vec![AGGREGATE_SCHEMA.to_string()];
        rec.extend(r.iter().cloned());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reports of all runs grouped by step.
fn trace<'a>(runs: &[&'a Run]) -> BTreeMap<usize, Vec<&'a EvalReport>> {
    let mut by_step: BTreeMap<usize, Vec<&'a EvalReport>> = BTreeMap::new();
    for r in runs {
        for rep in &r.reports {
            by_step.entry(rep.step).or_default().push(rep);
        }
    }
    by_step
}

fn regime_rank(r: Regime) -> usize {
    match r {
        Regime::Joint => 0,
        Regime::Align => 1,
        Regime::Unidirectional => 2,
        Regime::Separate => 3,
    }
}

/// Summarizes the finished runs among `dirs` and writes the figure tables
/// into `out`. Unfinished runs are ignored; the result does not depend on
/// the order of `dirs`.
pub fn aggregate(dirs: &[PathBuf], out: &Path) -> Result<AggregateSummary> {
    let mut dirs: Vec<PathBuf> = dirs.to_vec();
    dirs.sort();
    dirs.dedup();
    let mut runs = Vec::new();
    for dir in dirs {
        if !dir.join(DONE_FILE).exists() {
            continue;
        }
        let manifest = RunManifest::load(dir.join(MANIFEST_FILE))?;
        let reports = read_reports(&dir)?;
        if !reports.is_empty() {
            runs.push(Run { dir, manifest, reports });
        }
    }
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no finished runs to aggregate".into()));
    }
    runs.sort_by(|a, b| a.manifest.cell_key().cmp(&b.manifest.cell_key()).then(a.dir.cmp(&b.dir)));
    let reference = shared_settings(&runs[0].manifest)?;
    for r in &runs[1..] {
        if shared_settings(&r.manifest)? != reference {
            return Err(Error::InvalidConfig(format!(
                "{} and {} were run with incompatible settings",
                runs[0].dir.display(),
                r.dir.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut cells: BTreeMap<(String, String, String), Vec<&Run>> = BTreeMap::new();
    for r in &runs {
        cells.entry(r.cell()).or_default().push(r);
    }

    let mut cell_stats = Vec::new();
    for ((condition, objective, regime), members) in &cells {
        let finals: Vec<BTreeMap<String, f64>> = members.iter().map(|r| numeric_fields(r.last())).collect::<Result<_>>()?;
        let fields = finals[0]
            .keys()
            .map(|k| {
                let xs: Vec<f64> = finals.iter().map(|f| f[k]).collect();
                (k.clone(), stats(&xs))
            })
            .collect();
        cell_stats.push(CellStats {
            condition: condition.clone(),
            objective: objective.clone(),
            regime: regime.clone(),
            seeds: members.len(),
            fields,
        });
    }

    // fig1: UCL components per cell
    let components = ["bli_p1", "alignment_f1", "retrieval_f1", "ucl"];
    let mut header = vec!["condition", "objective", "regime", "seeds"];
    let names: Vec<(String, String)> = components.iter().map(|c| (format!("{c}_mean"), format!("{c}_sd"))).collect();
    for (m, s) in &names {
        header.push(m);
        header.push(s);
    }
    let rows: Vec<Vec<String>> = cell_stats
        .iter()
        .map(|c| {
            let mut row = vec![c.condition.clone(), c.objective.clone(), c.regime.clone(), c.seeds.to_string()];
            for comp in components {
                let f = &c.fields[comp];
                row.push(fmt(f.mean));
                row.push(fmt_opt(f.sd));
            }
            row
        })
        .collect();
    write_csv(&out.join("fig1.csv"), &header, &rows)?;

    // fig2: probe perplexity and inflation over k
    let mut rows = Vec::new();
    for ((condition, objective, regime), members) in &cells {
        let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in members {
            for p in read_probe(&r.dir)? {
                by_k.entry(p.k).or_default().push(p.ppl);
            }
        }
        let base = by_k.get(&0).and_then(|v| mean(v));
        for (k, v) in &by_k {
            let s = stats(v);
            rows.push(vec![
                condition.clone(),
                objective.clone(),
                regime.clone(),
                k.to_string(),
                v.len().to_string(),
                fmt(s.mean),
                fmt_opt(s.sd),
                fmt_opt(base.map(|b| s.mean / b)),
            ]);
        }
    }
    write_csv(
        &out.join("fig2.csv"),
        &["condition", "objective", "regime", "k", "samples", "ppl_mean", "ppl_sd", "inflation"],
        &rows,
    )?;

    // fig3: one point per (condition, objective), preferring joint training
    let mut scatter: BTreeMap<(String, String), &CellStats> = BTreeMap::new();
    for c in &cell_stats {
        let key = (c.condition.clone(), c.objective.clone());
        let rank = |c: &CellStats| regime_rank(c.regime.parse().expect("regime names round-trip"));
        match scatter.get(&key) {
            Some(prev) if rank(prev) <= rank(c) => {}
            _ => {
                scatter.insert(key, c);
            }
        }
    }
    let rows: Vec<Vec<String>> = scatter
        .values()
        .map(|c| {
            vec![
                c.condition.clone(),
                c.objective.clone(),
                c.regime.clone(),
                c.seeds.to_string(),
                fmt(c.fields["js_unigram"].mean),
                fmt(c.fields["ucl"].mean),
                fmt_opt(c.fields["ucl"].sd),
            ]
        })
        .collect();
    write_csv(
        &out.join("fig3.csv"),
        &["condition", "objective", "regime", "seeds", "js_unigram", "ucl_mean", "ucl_sd"],
        &rows,
    )?;

    // fig4: checkpoint traces
    let trace_fields = ["h_e_given_f", "ppl_e_on_f", "ppl_f", "bli_p1", "retrieval_f1"];
    let mut rows = Vec::new();
    for ((condition, objective, regime), members) in &cells {
        for (step, reps) in trace(members) {
            let mut row = vec![condition.clone(), objective.clone(), regime.clone(), step.to_string(), reps.len().to_string()];
            for f in trace_fields {
                let xs: Vec<f64> = reps.iter().map(|r| numeric_fields(r).map(|m| m[f])).collect::<Result<_>>()?;
                row.push(fmt(mean(&xs).unwrap_or(f64::NAN)));
            }
            rows.push(row);
        }
    }
    let mut header = vec!["condition", "objective", "regime", "step", "seeds"];
    header.extend(trace_fields);
    write_csv(&out.join("fig4.csv"), &header, &rows)?;

    // fig5: align runs before and after the dictionary phase
    let mut rows = Vec::new();
    for ((condition, objective, regime), members) in &cells {
        if regime != Regime::Align.as_str() {
            continue;
        }
        let mut pre = (Vec::new(), Vec::new());
        let mut post = (Vec::new(), Vec::new());
        for r in members {
            let Some(before) = r.reports.iter().rfind(|rep| rep.step <= r.manifest.steps) else {
                continue;
            };
            pre.0.push(before.bli_p1);
            pre.1.push(before.retrieval_f1);
            post.0.push(r.last().bli_p1);
            post.1.push(r.last().retrieval_f1);
        }
        if pre.0.is_empty() {
            continue;
        }
        let m = |v: &Vec<f64>| fmt(mean(v).unwrap_or(f64::NAN));
        rows.push(vec![
            condition.clone(),
            objective.clone(),
            pre.0.len().to_string(),
            m(&pre.0),
            m(&post.0),
            m(&pre.1),
            m(&post.1),
        ]);
    }
    write_csv(
        &out.join("fig5.csv"),
        &["condition", "objective", "seeds", "bli_pre", "bli_post", "retrieval_pre", "retrieval_post"],
        &rows,
    )?;

    // correlations
    let mut correlations = Vec::new();
    let domain: std::collections::BTreeSet<String> = runs
        .iter()
        .filter(|r| r.manifest.condition.name.is_domain() || r.manifest.condition.name == ConditionName::NtNt)
        .map(|r| r.manifest.condition.name.to_string())
        .collect();
    for (scope, only_domain) in [("all", false), ("domain", true)] {
        let sel: Vec<&CellStats> = scatter
            .values()
            .copied()
            .filter(|c| !only_domain || domain.contains(&c.condition))
            .collect();
        let js: Vec<f64> = sel.iter().map(|c| c.fields["js_unigram"].mean).collect();
        let ucl: Vec<f64> = sel.iter().map(|c| c.fields["ucl"].mean).collect();
        correlations.push(Correlation {
            name: "js_unigram_vs_ucl".into(),
            scope: scope.into(),
            n: sel.len(),
            spearman: spearman(&js, &ucl),
        });
    }
    for r in &runs {
        let h: Vec<f64> = r.reports.iter().map(|x| x.h_e_given_f).collect();
        let b: Vec<f64> = r.reports.iter().map(|x| x.bli_p1).collect();
        correlations.push(Correlation {
            name: "h_e_given_f_vs_bli_p1".into(),
            scope: r.manifest.cell_key(),
            n: h.len(),
            spearman: spearman(&h, &b),
        });
    }
    let rows: Vec<Vec<String>> = correlations
        .iter()
        .map(|c| vec![c.name.clone(), c.scope.clone(), c.n.to_string(), fmt_opt(c.spearman)])
        .collect();
    write_csv(&out.join("correlations.csv"), &["name", "scope", "n", "spearman"], &rows)?;

    let summary = AggregateSummary {
        schema: AGGREGATE_SCHEMA.into(),
        runs: runs.len(),
        cells: cell_stats,
        correlations,
    };
    let path = out.join("aggregate.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
