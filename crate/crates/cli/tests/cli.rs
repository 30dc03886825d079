use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &str = "\
d_model = 16
d = 4
heads = 2
max_seq_len = 64
train.batch = 2
train.warmup = 2
train.eval_every = 2
train.eval_size = 2
task.seq_len = 48
";

fn dint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dint"))
        .args(args)
        .env_remove("DINT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_toy(dir: &Path) -> PathBuf {
    let p = dir.join("toy.cfg");
    fs::write(&p, TOY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_toy(tmp: &TempDir, name: &str, arch: &str, steps: &str) -> PathBuf {
    let cfg = write_toy(tmp.path());
    let out = tmp.path().join(name);
    let o = dint(&["train", "--config", s(&cfg), "--arch", arch, "--steps", steps, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = dint(&["train", "--config", "/nonexistent/x.cfg", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn bad_config_reports_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "d_model = 16\nd = 4\nheads = 2\nwidth = 3\n").unwrap();
    let o = dint(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn zero_steps_writes_manifest_and_init_checkpoint_only() {
    let tmp = TempDir::new().unwrap();
    let out = train_toy(&tmp, "run", "dint", "0");
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["checkpoint.bin", "manifest.json"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "train");
    assert!(m["config"].as_str().unwrap().contains("arch = dint"));
}

#[test]
fn out_dir_env_overrides_flag() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_toy(tmp.path());
    let env_dir = tmp.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_dint"))
        .args(["train", "--config", s(&cfg), "--steps", "0", "--out", s(&tmp.path().join("flag"))])
        .env("DINT_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(env_dir.join("manifest.json").exists());
    assert!(!tmp.path().join("flag").exists());
}

#[test]
fn csv_outputs_reference_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = train_toy(&tmp, "run", "diff", "4");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let tag = format!("# manifest={}", m["manifest_hash"].as_str().unwrap());
    for f in ["report.csv", "eval.csv"] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert_eq!(text.lines().next().unwrap(), tag);
    }
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2 + 4);
    assert_eq!(report.lines().nth(1).unwrap(), "step,loss,ar_hit_loss,others_loss,lr,grad_norm,row_sum_max_dev");
}

#[test]
fn needle_grid_shape_and_checkpoint_errors() {
    let tmp = TempDir::new().unwrap();
    let run = train_toy(&tmp, "run", "vanilla", "0");
    let ck = run.join("checkpoint.bin");
    let out = tmp.path().join("grid");
    let o = dint(&[
        "needle", "--checkpoints", s(&ck), "--needles", "1,2", "--queries", "1,2", "--ctx-len", "32,48",
        "--samples", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    // (N, R) = (1, 2) cannot be generated
    assert_eq!(grid.lines().count(), 2 + 3 * 2 * 5);
    assert!(grid.lines().skip(2).all(|l| l.split(',').nth(5) == Some("3")));

    let single = tmp.path().join("single");
    let o = dint(&["needle", "--checkpoints", s(&ck), "--needles", "1", "--queries", "1", "--ctx-len", "32", "--out", s(&single)]);
    assert_eq!(code(&o), 0);
    let grid = fs::read_to_string(single.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2 + 5);
    assert!(grid.lines().skip(2).all(|l| l.split(',').nth(5) == Some("50")));

    let mut bytes = fs::read(&ck).unwrap();
    bytes[8] = 9;
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, &bytes).unwrap();
    let o = dint(&["needle", "--checkpoints", s(&bad), "--out", s(&tmp.path().join("g2"))]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
    fs::write(&bad, &bytes[..40]).unwrap();
    let o = dint(&["needle", "--checkpoints", s(&bad), "--out", s(&tmp.path().join("g3"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn analyze_dumps_and_audits() {
    let tmp = TempDir::new().unwrap();
    let run = train_toy(&tmp, "run", "dint", "0");
    let tasks_dir = tmp.path().join("tasks");
    let o = dint(&[
        "tasks", "--needles", "2", "--queries", "1", "--ctx-len", "32", "--depths", "0.5", "--samples", "1", "--out",
        s(&tasks_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("an");
    let o = dint(&[
        "analyze", "--checkpoint", s(&run.join("checkpoint.bin")), "--task", s(&tasks_dir.join("tasks.jsonl")),
        "--capture", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index = fs::read_to_string(out.join("matrices.csv")).unwrap();
    assert_eq!(index.lines().count(), 2 + 2 * 2 * 5);
    let audit = fs::read_to_string(out.join("audit.csv")).unwrap();
    for line in audit.lines().skip(2) {
        let dev: f64 = line.split(',').nth(7).unwrap().parse().unwrap();
        assert!(dev < 1e-5, "{line}");
    }
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(scores.lines().nth(1).unwrap().contains("answer_abs,noise_abs,answer_signed,noise_signed"));
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let o = dint(&["gradcheck", "--points", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = String::from_utf8_lossy(&o.stdout);
    assert!(report.lines().any(|l| l.starts_with("softmax_causal,")));
    assert!(report.lines().any(|l| l.starts_with("model,")));

    let o = dint(&["gradcheck", "--points", "10", "--inject-fault", "rmsnorm"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("rmsnorm"), "{}", stderr(&o));

    let o = dint(&["gradcheck", "--inject-fault", "nope"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_rejects_unknown_variant() {
    let tmp = TempDir::new().unwrap();
    let o = dint(&["ablate", "--variants", "dint,dint-rope", "--out", s(&tmp.path().join("ab"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dint-rope"));
}

#[test]
fn ablate_writes_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("ab.cfg");
    fs::write(&cfg, format!("{TOY}task = corpus\ntask.loss = all\n")).unwrap();
    let out = tmp.path().join("ab");
    let o = dint(&["ablate", "--config", s(&cfg), "--steps", "2", "--seed", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[1], "variant,valid,ar_hit,others");
    let variants: Vec<&str> = lines[2..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["dint", "dint-groupnorm", "dint-lambda0.8", "dint-lambda0.5"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["args"]["shared_seed"], 3);
}
