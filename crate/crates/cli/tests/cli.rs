use std::path::Path;
use std::process::{Command, Output};

fn viprom(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viprom"))
        .args(["--out-root", root.to_str().unwrap()])
        .args(args)
        .env_remove("VIPROM_DATA_ROOT")
        .output()
        .expect("spawn viprom")
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const TINY: &str = r#"
[global]
seed = 3
toy = true

[dataset.synth]
n_clips = 24
n_classes = 4

[contrastive]
batch = 16
max_steps = 3
[contrastive.encoder]
architecture = "tiny-conv"
embedding_dim = 16
input_hw = [16, 16]
width = 4

[supervised]
batch = 16
max_steps = 3
n_classes = 4

[imitation]
steps = 100
eval_every = 50
eval_episodes = 3
hidden = 16
"#;

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(viprom(dir.path(), &["--help"]));
    for c in ["build-manifest", "synth-corpus", "pretrain-contrastive", "gen-pseudo-labels", "pretrain-supervised", "collect-demos", "bc-eval", "bench", "report"] {
        assert!(out.contains(c), "{c} missing from:\n{out}");
    }
}

#[test]
fn bad_input_exits_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[imitation]\nepisodes = 4\n").unwrap();
    let o = viprom(dir.path(), &["--config", cfg.to_str().unwrap(), "collect-demos", "--task", "push", "--seed", "1", "--out", "d"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("episodes"));

    let o = viprom(dir.path(), &["frobnicate"]);
    assert!(!o.status.success());
    let o = viprom(dir.path(), &["collect-demos", "--task", "stack", "--seed", "1", "--out", "d"]);
    assert!(!o.status.success());
    let o = viprom(dir.path(), &["report", "--result", "missing.json", "--out", "r"]);
    assert!(!o.status.success());
}

#[test]
fn collect_demos_is_deterministic_and_snapshots_config() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(viprom(dir.path(), &["collect-demos", "--task", "push", "--n", "2", "--seed", "11", "--out", out]));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("demos.vpdm")).unwrap();
    assert_eq!(read("a"), read("b"));
    let files: Vec<String> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(files.iter().filter(|f| f.starts_with("config.")).count(), 2);
}

fn pipeline(root: &Path, cfg: &Path, run: &str) -> Vec<u8> {
    let c = cfg.to_str().unwrap();
    let d = |s: &str| format!("{run}/{s}");
    ok(viprom(root, &["--config", c, "synth-corpus", "--out", &d("corpus")]));
    ok(viprom(root, &["--config", c, "pretrain-contrastive", "--corpus", &d("corpus"), "--out", &d("stage1")]));
    ok(viprom(root, &["--config", c, "gen-pseudo-labels", "--corpus", &d("corpus"), "--out", &d("labels")]));
    ok(viprom(
        root,
        &[
            "--config", c, "pretrain-supervised", "--ckpt", &d("stage1/encoder.vpck"), "--corpus", &d("corpus"),
            "--labels", &d("labels/pseudo_labels.jsonl"), "--out", &d("stage2"),
        ],
    ));
    let out = ok(viprom(root, &["--config", c, "bc-eval", "--ckpt", &d("stage2/encoder.vpck"), "--tasks", "reach", "--seeds", "100", "--out", &d("eval")]));
    assert!(out.contains("aggregate"));
    for stage in ["corpus", "stage1", "labels", "stage2", "eval"] {
        assert!(root.join(d(stage)).join("config.resolved.json").exists());
    }
    std::fs::read(root.join(d("eval/eval_report.json"))).unwrap()
}

#[test]
fn full_pipeline_twice_gives_identical_reports() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    assert_eq!(pipeline(root.path(), &cfg, "a"), pipeline(root.path(), &cfg, "b"));
    let fp = |run: &str| std::fs::read_to_string(root.path().join(run).join("stage2/config.fingerprint")).unwrap();
    assert_eq!(fp("a"), fp("b"));
    assert_eq!(fp("a").trim().len(), 64);
}

#[test]
fn bench_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("grid.toml");
    std::fs::write(
        &spec,
        r#"
corpus = ["clips"]
architecture = ["tiny-conv"]
method = ["scratch", "contrastive"]
tasks = ["reach"]
seeds = [100]

[protocol]
steps = 40
eval_every = 20
eval_episodes = 2
hidden = 8

[pretrain]
n_clips = 12
n_classes = 3
embedding_dim = 8
batch = 8
contrastive_steps = 2
supervised_steps = 2
"#,
    )
    .unwrap();
    let table = ok(viprom(dir.path(), &["bench", "run", "--spec", spec.to_str().unwrap(), "--out", "grid"]));
    assert!(table.contains("clips/tiny-conv/scratch/demos-5") && table.contains("clips/tiny-conv/contrastive/demos-5"), "{table}");
    for format in ["table-text", "delimited", "plot"] {
        let path = ok(viprom(dir.path(), &["report", "--result", "grid/bench_result.json", "--format", format, "--out", "rep"]));
        assert!(std::fs::metadata(path.trim()).unwrap().len() > 0);
    }
    let o = viprom(dir.path(), &["report", "--result", "grid/bench_result.json", "--format", "pdf", "--out", "rep"]);
    assert!(!o.status.success());
}
