use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slyt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slyt")).args(args).output().expect("run slyt")
}

fn ok(args: &[&str]) -> Output {
    let out = slyt(args);
    assert!(
        out.status.success(),
        "slyt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Rows of a CSV file as header-keyed string maps.
fn csv_rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, kind: &str, count: &str, seed: &str, bits: &str) -> (PathBuf, PathBuf) {
        let corpus = self.path(&format!("{kind}-{seed}.jsonl"));
        let cats = self.path(&format!("{kind}.categories.json"));
        ok(&[
            "synth", "--kind", kind, "--count", count, "--seed", seed, "--bits", bits, "--max-elements", "8",
            "--out", p(&corpus), "--categories-out", p(&cats),
        ]);
        (corpus, cats)
    }
}

const TINY: [&str; 10] = ["--d", "16", "--layers", "1", "--heads", "2", "--d-ff", "32", "--max-elements", "8"];

#[test]
fn synth_is_deterministic_per_seed() {
    let f = Fixture::new();
    let a = f.path("a.jsonl");
    let b = f.path("b.jsonl");
    for out in [&a, &b] {
        ok(&["synth", "--kind", "document", "--count", "100", "--seed", "7", "--out", p(out)]);
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 100);
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(slyt(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(slyt(&[]).status.code(), Some(1));
    assert_eq!(slyt(&["nope"]).status.code(), Some(1));
    assert_eq!(slyt(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_2() {
    let f = Fixture::new();
    let (_, cats) = f.synth("document", "4", "1", "8");
    let bad = f.path("bad.jsonl");
    std::fs::write(&bad, "{\"elements\":[]}\nnot json\n").unwrap();
    let out = slyt(&["render", "--corpus", p(&bad), "--categories", p(&cats), "--out-dir", p(&f.path("svg"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    let ckpt = f.path("broken.slyt");
    std::fs::write(&ckpt, b"SLYT but not really a checkpoint").unwrap();
    let out = slyt(&["sample", "--checkpoint", p(&ckpt), "--count", "1", "--out", p(&f.path("s.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_head_checkpoint_scores_uniformly() {
    let f = Fixture::new();
    let (corpus, cats) = f.synth("document", "20", "3", "6");
    let ckpt = f.path("zero.slyt");
    let mut args = vec!["init", "--categories", p(&cats), "--bits", "6", "--zero-head", "--out", p(&ckpt)];
    args.extend(TINY);
    ok(&args);
    let scores = f.path("scores.csv");
    ok(&["score", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--out", p(&scores)]);
    let ln_v = ((3 + 5 + 64) as f64).ln();
    let rows = csv_rows(&scores);
    assert_eq!(rows.len(), 20);
    for r in rows {
        let nll: f64 = r["nll_per_token"].parse().unwrap();
        assert!((nll - ln_v).abs() < 1e-9, "{nll} vs {ln_v}");
    }
}

#[test]
fn grid_corpus_has_zero_overlap() {
    let f = Fixture::new();
    let (corpus, cats) = f.synth("grid", "50", "4", "8");
    let metrics = f.path("metrics.csv");
    let ngrams = f.path("ngrams.csv");
    let out = ok(&[
        "eval", "--corpus", p(&corpus), "--categories", p(&cats), "--out", p(&metrics), "--ngrams", p(&ngrams),
    ]);
    for r in csv_rows(&metrics) {
        assert_eq!(r["overlap"], "0.0");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"overlap\":0.0"));
    assert!(!csv_rows(&ngrams).is_empty());
}

#[test]
fn train_sample_complete_and_analyse() {
    let f = Fixture::new();
    let (corpus, cats) = f.synth("document", "40", "5", "5");
    let best = f.path("best.slyt");
    let last = f.path("last.slyt");
    let log = f.path("log.csv");
    let mut args = vec![
        "train", "--corpus", p(&corpus), "--categories", p(&cats), "--out", p(&best), "--last", p(&last), "--log",
        p(&log), "--bits", "5", "--epochs", "2", "--lr", "0.003", "--seed", "1",
    ];
    args.extend(TINY);
    ok(&args);
    assert_eq!(csv_rows(&log).len(), 2);

    // resuming continues the epoch count
    let resumed = f.path("resumed.slyt");
    ok(&["train", "--corpus", p(&corpus), "--resume", p(&last), "--epochs", "3", "--out", p(&resumed)]);

    let samples = f.path("samples.jsonl");
    let svgs = f.path("svg");
    ok(&[
        "sample", "--checkpoint", p(&best), "--count", "5", "--seed", "2", "--out", p(&samples), "--svg-dir", p(&svgs),
    ]);
    assert_eq!(std::fs::read_to_string(&samples).unwrap().lines().count(), 5);
    assert_eq!(std::fs::read_dir(&svgs).unwrap().count(), 5);

    let again = f.path("again.jsonl");
    ok(&["sample", "--checkpoint", p(&best), "--count", "5", "--seed", "2", "--out", p(&again)]);
    assert_eq!(std::fs::read(&samples).unwrap(), std::fs::read(&again).unwrap());

    let seeds = f.path("seeds.jsonl");
    let first_lines: Vec<String> = std::fs::read_to_string(&corpus).unwrap().lines().take(3).map(String::from).collect();
    std::fs::write(&seeds, first_lines.join("\n")).unwrap();
    let completed = f.path("completed.jsonl");
    ok(&["complete", "--checkpoint", p(&best), "--seeds", p(&seeds), "--out", p(&completed)]);
    assert_eq!(std::fs::read_to_string(&completed).unwrap().lines().count(), 3);

    let metrics = f.path("metrics.csv");
    let flips = f.path("flips.csv");
    let attention = f.path("attention.json");
    let nn = f.path("nn.csv");
    let out = ok(&[
        "eval", "--corpus", p(&corpus), "--checkpoint", p(&best), "--out", p(&metrics), "--flips", p(&flips),
        "--analogy", "text,title,list", "--nn-queries", p(&samples), "--nn-out", p(&nn), "--attention",
        p(&attention),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["nll_per_token"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["analogy"]["answers"].as_array().unwrap().len(), 2);
    assert_eq!(csv_rows(&flips).len(), 40);
    assert_eq!(csv_rows(&nn).len(), 15);
    let att: serde_json::Value = serde_json::from_slice(&std::fs::read(&attention).unwrap()).unwrap();
    assert!(!att["elements"].as_array().unwrap().is_empty());
}

#[test]
fn ablate_reports_one_row_per_precision() {
    let f = Fixture::new();
    let (corpus, cats) = f.synth("document", "30", "6", "8");
    let table = f.path("ablate.csv");
    let mut args = vec![
        "ablate", "--corpus", p(&corpus), "--categories", p(&cats), "--bits", "3,6", "--epochs", "1", "--lr",
        "0.003", "--out", p(&table),
    ];
    args.extend(TINY);
    ok(&args);
    let rows = csv_rows(&table);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["bits"], "3");
    assert_eq!(rows[1]["vocab_size"], "72");
}

#[test]
fn divergence_exits_with_3() {
    let f = Fixture::new();
    let (corpus, cats) = f.synth("document", "10", "8", "5");
    let out_path = f.path("x.slyt");
    let mut args = vec![
        "train", "--corpus", p(&corpus), "--categories", p(&cats), "--bits", "5", "--lr", "1e38", "--epochs", "3",
        "--out", p(&out_path),
    ];
    args.extend(TINY);
    let out = slyt(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = Fixture::new();
    let (_, cats) = f.synth("document", "2", "9", "8");
    let config = f.path("run.json");
    std::fs::write(&config, r#"{"model": {"d": 16, "n_layer": 1, "n_head": 2, "d_ff": 32, "bits": 4}}"#).unwrap();
    let ckpt = f.path("m.slyt");
    ok(&["init", "--categories", p(&cats), "--config", p(&config), "--bits", "6", "--out", p(&ckpt)]);
    let scores = f.path("s.csv");
    let corpus = f.path("one.jsonl");
    std::fs::write(&corpus, r#"{"elements":[{"category":"text","bbox":[0.5,0.5,0.2,0.2]}]}"#).unwrap();
    ok(&["score", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--out", p(&scores)]);
    assert_eq!(csv_rows(&scores).len(), 1);

    for bad in [r#"{"model": {"depth": 3}}"#, r#"{"train": {"loss": {"epsilon": 0.1, "eps": 0.2}}}"#] {
        std::fs::write(&config, bad).unwrap();
        let out = slyt(&["init", "--categories", p(&cats), "--config", p(&config), "--out", p(&ckpt)]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
}
