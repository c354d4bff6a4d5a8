use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn decipher(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decipher"))
        .current_dir(cwd)
        .env("DECIPHER_DATA", cwd.join("data"))
        .args(args)
        .output()
        .expect("spawn decipher")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = decipher(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &[
    "--model", "tiny", "--steps", "8", "--eval-every", "4", "--vocab-size", "100", "--heldout", "10", "--batch-size", "4",
];

#[test]
fn end_to_end_on_synthetic_data() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let prep = ok(
        dir,
        &["prepare-data", "--synthetic", "--lines", "200", "--vocab-size", "100", "--heldout", "10", "--condition", "nt-nt,nt-ted"],
    );
    assert!(prep.contains("NT-TED"));
    for f in ["NT.txt", "OT.txt", "TED.txt", "WIKI.txt"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }

    let mut args = vec!["train", "--condition", "nt-nt"];
    args.extend_from_slice(SMALL);
    let train = ok(dir, &args);
    assert_eq!(train.lines().filter(|l| l.starts_with("step")).count(), 2);
    let run = dir.join("runs/NT-NT/mlm/joint/seed-0");
    assert!(run.join("DONE").exists());

    // A second fresh start must not clobber the finished run.
    assert!(!decipher(dir, &args).status.success());
    args.push("--resume");
    ok(dir, &args);

    let eval: serde_json::Value = serde_json::from_str(&ok(dir, &["eval", run.to_str().unwrap()])).unwrap();
    assert_eq!(eval["step"], 8);
    let last = std::fs::read_to_string(run.join("reports.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(last.lines().last().unwrap()).unwrap();
    assert_eq!(eval["bli_p1"], last["bli_p1"]);

    let probe = ok(dir, &["probe", run.to_str().unwrap(), "--max-k", "2", "--probe-seeds", "2"]);
    assert_eq!(probe.lines().count(), 4);

    let mut sweep = vec!["sweep", "--condition", "nt-nt,nt-ted", "--seeds", "2"];
    sweep.extend_from_slice(SMALL);
    assert!(ok(dir, &sweep).contains("4 cells: 3 run, 1 already complete"));
    assert!(ok(dir, &sweep).contains("4 cells: 0 run, 4 already complete"));

    ok(dir, &["aggregate"]);
    for f in ["fig1.csv", "fig2.csv", "fig3.csv", "fig4.csv", "fig5.csv", "correlations.csv", "aggregate.json"] {
        assert!(dir.join("aggregate").join(f).exists(), "{f}");
    }
}

#[test]
fn missing_corpus_is_reported() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["train", "--condition", "nt-wiki"];
    args.extend_from_slice(SMALL);
    let out = decipher(tmp.path(), &args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("NT.txt"));
}
