use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sci_core::pipeline::{read_jsonl, read_metrics, ABLATION_FILE, CHECKPOINT_FILE, METRICS_FILE, TRAIN_LOG_FILE};

const TINY: &str = r#"
protocols = ["general", "same_clothes", "cloth_changing"]
kmax = 5

[synth]
num_pids = 6
num_train_pids = 3
outfits_per_pid = 2
cams = 2
images_per_group = 2
height = 8
width = 8

[encoder]
height = 8
width = 8
patch = 4
channels = 8
token_dim = 8
text_dim = 8
text_heads = 2

[sampler]
p = 2
k = 2

[stage1]
epochs = 2
lr = 1e-3
schedule = "cosine"

[stage2]
epochs = 2
lr = 1e-3
schedule = "step_decay"
milestones = [1]
"#;

fn sci(args: &[&str]) -> Output {
    sci_env(args, &[])
}

fn sci_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sci"));
    cmd.args(args).env_remove("SCI_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run sci")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn config(&self) -> String {
        self.path("tiny.toml")
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let w = Work::new();
    let (a, b) = (w.path("a"), w.path("b"));
    for out in [&a, &b] {
        let o = sci(&["gen", "--config", &w.config(), "--seed", "3", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(dir_bytes(Path::new(&a)), dir_bytes(Path::new(&b)));
    let o = sci(&["gen", "--config", &w.config(), "--seed", "3", "--out", &a]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = sci(&["gen", "--config", &w.config(), "--seed", "4", "--out", &a, "--force"]);
    assert_eq!(code(&o), 0);
    assert_ne!(dir_bytes(Path::new(&a)), dir_bytes(Path::new(&b)));
}

#[test]
fn usage_errors_exit_1() {
    let w = Work::new();
    let out = w.path("o");
    let o = sci(&["gen", "--config", &w.config(), "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    let o = sci(&["train", "--config", &w.config(), "--seed", "1", "--out", &out, "--protocol", "general,bogus"]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("bogus") && e.contains("cloth_changing") && e.contains("same_clothes"), "{e}");

    let bad = w.path("bad.toml");
    fs::write(&bad, "seed = 1\n[sampler]\np = 0\nk = 2\n").unwrap();
    let o = sci(&["gen", "--config", &bad, "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sampler.p"), "{}", stderr(&o));

    let o = sci(&["gen", "--config", &w.path("missing.toml"), "--seed", "1", "--out", &out]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&sci(&[])), 1);
    assert_eq!(code(&sci(&["frobnicate"])), 1);
    assert_eq!(code(&sci(&["train", "--seed", "x"])), 1);
    assert_eq!(code(&sci(&["--help"])), 0);
    assert_eq!(code(&sci(&["gen", "--seed", "1"])), 1);
}

#[test]
fn train_eval_round_trip() {
    let w = Work::new();
    let run = w.path("run");
    let o = sci(&["train", "--config", &w.config(), "--seed", "5", "--out", &run]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("sha256"));
    let log = read_jsonl(&Path::new(&run).join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log[0]["kind"], "config");
    assert_eq!(log[0]["seed"], 5);
    assert_eq!(log.iter().filter(|v| v["kind"] == "stage1").count(), 2);
    assert_eq!(log.iter().filter(|v| v["kind"] == "stage2").count(), 2);

    let o = sci(&["train", "--config", &w.config(), "--seed", "5", "--out", &run]);
    assert_eq!(code(&o), 1);

    let o = sci(&["eval", "--out", &run, "--protocol", "cloth_changing,general"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = read_metrics(&Path::new(&run).join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics[0].protocol.name(), "cloth_changing");
    for m in &metrics {
        assert!(m.cmc.len() == 5 && (0.0..=1.0).contains(&m.rank1) && m.map > 0.0);
        assert!(stdout(&o).contains(&format!("{:.4}", m.rank1)));
    }

    let o = sci_env(&["eval", "--out", &run, "--force"], &[("SCI_THREADS", "1")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let one = fs::read(Path::new(&run).join(METRICS_FILE)).unwrap();
    let o = sci_env(&["eval", "--out", &run, "--force"], &[("SCI_THREADS", "4")]);
    assert_eq!(code(&o), 0);
    assert_eq!(one, fs::read(Path::new(&run).join(METRICS_FILE)).unwrap());

    let o = sci_env(&["eval", "--out", &run, "--force"], &[("SCI_THREADS", "many")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_is_deterministic() {
    let w = Work::new();
    let (a, b) = (w.path("a"), w.path("b"));
    for out in [&a, &b] {
        let o = sci(&["train", "--config", &w.config(), "--seed", "9", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |d: &str| fs::read(Path::new(d).join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn bad_checkpoints_are_data_errors() {
    let w = Work::new();
    let o = sci(&["eval", "--checkpoint", &w.path("none.bin"), "--out", &w.path("e")]);
    assert_eq!(code(&o), 2);
    let junk = w.path("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = sci(&["eval", "--checkpoint", &junk, "--out", &w.path("e")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn ablate_reports_four_variants() {
    let w = Work::new();
    let out = w.path("ab");
    let o = sci(&["ablate", "--config", &w.config(), "--seed", "2", "--out", &out, "--protocol", "cloth_changing"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_jsonl(&Path::new(&out).join(ABLATION_FILE)).unwrap();
    let variants: Vec<_> = rows.iter().filter(|r| r["kind"] == "ablation").map(|r| r["variant"].clone()).collect();
    assert_eq!(variants, ["baseline", "+sse", "+sim", "+sse+sim"]);
    let table = stdout(&o);
    assert!(table.contains("baseline") && table.contains("+sse+sim"));
}
