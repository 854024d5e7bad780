use std::path::Path;
use std::process::{Command, Output};

fn ctcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctcn")).args(args).output().expect("run ctcn")
}

fn ok(args: &[&str]) -> String {
    let o = ctcn(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["synth", "--dir", data.to_str().unwrap(), "--positives", "20", "--negatives", "16", "--size", "16"]);
    let cfg = dir.join("small.cfg");
    std::fs::write(
        &cfg,
        format!(
            "dataset.format = image-dir\ndataset.path = {}\n\
             image.height = 16\nimage.width = 16\ngmod.patch = 4\ngmod.dim = 8\ngmod.heads = 1\ngmod.depth = 1\ngmod.mlp = 8\n\
             clahe.tiles = 2, 2\nextract.epochs = 1\nselect.pop = 4\nselect.iters = 3\nselect.abhc_iters = 3\n\
             hdlc.epochs = 3\nhdlc.filters = 4\n",
            data.display()
        ),
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn synth_writes_class_folders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = ok(&["synth", "--dir", d.to_str().unwrap(), "--positives", "3", "--negatives", "2", "--size", "8"]);
    assert!(out.contains("wrote 5 images"));
    assert_eq!(std::fs::read_dir(d.join("all")).unwrap().count(), 3);
    assert_eq!(std::fs::read_dir(d.join("hem")).unwrap().count(), 2);
}

#[test]
fn pipeline_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let printed = ok(&["--config", &cfg, "--out", r, "--preset", "toy", "--seed", "3", "pipeline"]);
    for f in ["metrics.csv", "roc.csv", "fitness_trace.csv", "manifest.txt", "hdlc.ctcn", "extractor.ctcn"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report = ok(&["--out", r, "report"]);
    assert_eq!(printed.lines().next(), report.lines().next());
    assert!(report.lines().any(|l| l.starts_with("accuracy ")));
    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 3"), "{manifest}");
}

#[test]
fn stages_run_separately() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let base = ["--preset", "toy", "--config", cfg.as_str(), "--out", r];
    let with = |extra: &[&str]| -> String { ok(&[&base[..], extra].concat()) };

    with(&["preprocess"]);
    assert!(run.join("preprocessed/index.csv").exists());
    with(&["extract"]);
    let features = run.join("features");
    let f = features.to_str().unwrap();
    with(&["graph", "--features", f, "--diagnostics"]);
    let diag = std::fs::read_to_string(run.join("grafr_train.csv")).unwrap();
    assert!(diag.starts_with("node_index,mean_similarity,selected"));
    let graph = run.join("graph");
    let g = graph.to_str().unwrap();
    let sel = with(&["select", "--features", g, "--pop", "3", "--iters", "2", "--lambda", "0.05"]);
    assert!(sel.contains("selected"));
    let trace = std::fs::read_to_string(run.join("fitness_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,best_fitness,mean_fitness,selected_count"));
    assert_eq!(trace.lines().count(), 1 + 3);
    let mask = run.join("selected.csv");
    with(&["train", "--features", g, "--mask", mask.to_str().unwrap()]);
    let model = run.join("hdlc.ctcn");
    let eval = with(&["eval", "--features", g, "--model", model.to_str().unwrap()]);
    assert!(eval.contains("accuracy"));
    assert!(run.join("roc.csv").exists());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let missing = dir.path().join("nope");
    let set = format!("dataset.path={}", missing.display());
    let o = ctcn(&["--out", r, "--set", "dataset.format=image-dir", "--set", &set, "pipeline"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ingest"));
    assert!(run.join("FAILED").exists());
    let o = ctcn(&["--out", r, "report"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run failed at ingest"));

    let o = ctcn(&["--set", "hdlc.lr=fast", "report"]);
    assert!(!o.status.success());
    let o = ctcn(&["--set", "novalue", "report"]);
    assert!(!o.status.success());
}
