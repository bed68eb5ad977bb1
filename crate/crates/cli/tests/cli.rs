use std::path::Path;
use std::process::{Command, Output};

fn egrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egrid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = egrid(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.txt");
    std::fs::write(
        &path,
        "# tiny\nembedding_dim = 8\nnum_filters = 4\nfilter_length = 2\npool_length = 3\nmax_epochs = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn grid_prints_one_block_per_document() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.jsonl");
    ok(&[
        "synth",
        "--kind",
        "documents",
        "--count",
        "3",
        "--seed",
        "4",
        "--output",
        p(&docs),
    ]);
    let out = ok(&["grid", "--input", p(&docs)]);
    assert_eq!(out.lines().filter(|l| l.starts_with("# ")).count(), 3);

    let grids = dir.path().join("grids");
    ok(&["grid", "--input", p(&docs), "--output", p(&grids)]);
    assert!(grids.join("synth-doc-0.tsv").exists());
    assert!(grids.join("manifest.json").exists());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&[
        "synth",
        "--kind",
        "threads",
        "--count",
        "5",
        "--seed",
        "9",
        "--output",
        p(&a),
    ]);
    ok(&[
        "synth",
        "--kind",
        "threads",
        "--count",
        "5",
        "--seed",
        "9",
        "--output",
        p(&b),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn permute_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let threads = dir.path().join("threads.jsonl");
    let pairs = dir.path().join("pairs.jsonl");
    ok(&["synth", "--kind", "threads", "--count", "4", "--output", p(&threads)]);
    ok(&[
        "permute",
        "--input",
        p(&threads),
        "--setting",
        "tree",
        "--cap",
        "3",
        "--output",
        p(&pairs),
    ]);
    let lines = std::fs::read_to_string(&pairs).unwrap().lines().count();
    assert!(lines > 0 && lines <= 12);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pairs.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "permute");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn train_then_evaluate_and_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let threads = dir.path().join("threads.jsonl");
    let model = dir.path().join("model.json");
    ok(&[
        "synth",
        "--kind",
        "threads",
        "--count",
        "12",
        "--seed",
        "3",
        "--output",
        p(&threads),
    ]);
    let cfg = small_config(dir.path());
    ok(&[
        "--workers",
        "2",
        "train",
        "--input",
        p(&threads),
        "--setting",
        "tree",
        "--config",
        p(&cfg),
        "--seed",
        "5",
        "--output",
        p(&model),
    ]);
    assert!(model.exists());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("model.log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let report_dir = dir.path().join("eval");
    let table = ok(&[
        "eval",
        "discriminate",
        "--input",
        p(&threads),
        "--setting",
        "tree",
        "--model",
        p(&model),
        "--cap",
        "4",
        "--output",
        p(&report_dir),
    ]);
    assert!(table.contains("accuracy"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["total"].as_u64().unwrap() > 0);
    assert!(
        std::fs::read_to_string(report_dir.join("decisions.csv"))
            .unwrap()
            .lines()
            .count()
            > 1
    );

    ok(&[
        "eval",
        "inverse",
        "--input",
        p(&threads),
        "--setting",
        "tree",
        "--model",
        p(&model),
    ]);

    let rec = dir.path().join("rec");
    let table = ok(&[
        "reconstruct",
        "--input",
        p(&threads),
        "--model",
        p(&model),
        "--output",
        p(&rec),
    ]);
    assert!(table.contains("model") && table.contains("cos_sim"));
    assert_eq!(
        std::fs::read_to_string(rec.join("predictions.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.jsonl");
    ok(&["synth", "--kind", "documents", "--count", "10", "--output", p(&docs)]);
    let cfg = small_config(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["train", "--input", p(&docs), "--config", p(&cfg), "--output", p(&a)]);
    ok(&[
        "--workers",
        "1",
        "train",
        "--input",
        p(&docs),
        "--config",
        p(&cfg),
        "--output",
        p(&b),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let runs = dir.path().join("r.json");
    ok(&[
        "train",
        "--input",
        p(&docs),
        "--config",
        p(&cfg),
        "--runs",
        "2",
        "--output",
        p(&runs),
    ]);
    assert!(dir.path().join("r-run0.json").exists() && dir.path().join("r-run1.json").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(egrid(&["grid", "--input", p(&missing)]).status.code(), Some(1));

    let docs = dir.path().join("docs.jsonl");
    ok(&["synth", "--kind", "documents", "--count", "5", "--output", p(&docs)]);
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "filter_length = 40\n").unwrap();
    let out = egrid(&[
        "train",
        "--input",
        p(&docs),
        "--config",
        p(&bad),
        "--output",
        p(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let model = dir.path().join("m.json");
    ok(&[
        "train",
        "--input",
        p(&docs),
        "--config",
        p(&small_config(dir.path())),
        "--output",
        p(&model),
    ]);
    let threads = dir.path().join("threads.jsonl");
    ok(&["synth", "--kind", "threads", "--count", "3", "--output", p(&threads)]);
    let out = egrid(&[
        "eval",
        "discriminate",
        "--input",
        p(&threads),
        "--setting",
        "tree",
        "--model",
        p(&model),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.jsonl");
    ok(&["synth", "--kind", "documents", "--count", "10", "--output", p(&docs)]);
    let cfg = dir.path().join("huge.txt");
    std::fs::write(
        &cfg,
        "embedding_dim = 8\nnum_filters = 4\nmax_epochs = 3\nlearning_rate = 1e300\n",
    )
    .unwrap();
    let out = egrid(&[
        "train",
        "--input",
        p(&docs),
        "--config",
        p(&cfg),
        "--output",
        p(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
