use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
data.dir = data
data.train_counts = 24,24,24,24
data.val_counts = 8,8,8,8
data.test_counts = 8,8,8,8
net.widths = 4,8
net.blocks = 1
train.epochs = 1
train.batch_size = 16
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("small.cfg"), SMALL).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pcrnet"))
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }

    fn gen(&self) {
        self.ok(&["gen", "--config", "small.cfg", "--out", "data"]);
    }
}

fn header(path: &Path) -> [u32; 4] {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[..4], b"PCRD");
    let w = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    [w(0), w(1), w(2), w(3)]
}

fn config_map(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn gen_writes_decodable_splits() {
    let ws = Workspace::new();
    ws.gen();
    assert_eq!(header(&ws.path("data/train.pcrd")), [96, 4, 32, 32]);
    assert_eq!(header(&ws.path("data/val.pcrd")), [32, 4, 32, 32]);
    assert_eq!(header(&ws.path("data/test.pcrd")), [32, 4, 32, 32]);
    assert!(ws.read("data/config.txt").contains("data.train_counts=24,24,24,24\n"));
}

#[test]
fn gen_is_deterministic() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--config", "small.cfg", "--out", "a"]);
    ws.ok(&["gen", "--config", "small.cfg", "--out", "b"]);
    for f in ["train.pcrd", "val.pcrd", "test.pcrd", "frequencies.txt"] {
        assert_eq!(std::fs::read(ws.path(&format!("a/{f}"))).unwrap(), std::fs::read(ws.path(&format!("b/{f}"))).unwrap());
    }
}

#[test]
fn frequencies_echo_training_counts() {
    let ws = Workspace::new();
    ws.ok(&[
        "gen",
        "--set",
        "data.train_counts=1000,1000,1000,100",
        "--set",
        "data.val_counts=2,2,2,2",
        "--set",
        "data.test_counts=2,2,2,2",
        "--out",
        "imb",
    ]);
    let lines: Vec<String> = ws
        .read("imb/frequencies.txt")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    assert_eq!(lines, ["0 1000", "1 1000", "2 1000", "3 100"]);
}

#[test]
fn unknown_key_is_rejected() {
    let ws = Workspace::new();
    let err = ws.fails(&["gen", "--set", "net.gait=relu"]);
    assert!(err.contains("net.gait"), "{err}");
    std::fs::write(ws.path("typo.cfg"), "train.epoch = 3\n").unwrap();
    assert!(ws.fails(&["train", "--config", "typo.cfg"]).contains("train.epoch"));
}

#[test]
fn ce_and_il_configs_differ_only_in_the_loss() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--set", "train.epochs=0", "--out", "ce"]);
    ws.ok(&[
        "train",
        "--config",
        "small.cfg",
        "--set",
        "train.epochs=0",
        "--set",
        "loss.kind=il",
        "--set",
        "loss.lambda=0.5",
        "--out",
        "il",
    ]);
    let ce = config_map(&ws.read("ce/config.txt"));
    let il = config_map(&ws.read("il/config.txt"));
    let mut diff: Vec<&str> = il
        .iter()
        .filter(|kv| !ce.contains(kv))
        .chain(ce.iter().filter(|kv| !il.contains(kv)))
        .map(|(k, _)| k.as_str())
        .filter(|&k| k != "out")
        .collect();
    diff.sort();
    diff.dedup();
    assert_eq!(diff, ["loss.kind", "loss.lambda"]);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_empty_history() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--set", "train.epochs=0", "--out", "init"]);
    assert_eq!(ws.read("init/history.txt"), "");
    let manifest = ws.read("init/checkpoint/manifest.txt");
    assert!(manifest.contains("checkpoint.best_epoch=none\n"));
    assert!(ws.path("init/checkpoint/fc.weight.pcrt").exists());
}

#[test]
fn training_is_reproducible_from_its_echoed_config() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--out", "first"]);
    ws.ok(&["train", "--config", "first/config.txt", "--out", "second"]);
    assert_eq!(ws.read("first/history.txt"), ws.read("second/history.txt"));
    assert_eq!(ws.read("first/history.txt").lines().count(), 1);
    let a = std::fs::read(ws.path("first/checkpoint/fc.weight.pcrt")).unwrap();
    let b = std::fs::read(ws.path("second/checkpoint/fc.weight.pcrt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_reports_metrics_in_range() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--out", "run"]);
    ws.ok(&["eval", "--checkpoint", "run/checkpoint", "--dataset", "data/train.pcrd", "--out", "ev"]);
    let metrics = config_map(&ws.read("ev/metrics.txt"));
    assert!(metrics.contains(&("averaging".to_string(), "macro".to_string())));
    for (k, v) in metrics.iter().filter(|(k, _)| *k != "averaging") {
        let v: f64 = v.parse().unwrap();
        match k.as_str() {
            "accuracy" | "sensitivity" | "f1" => assert!((0.0..=1.0).contains(&v), "{k}={v}"),
            "kappa" => assert!((-1.0..=1.0).contains(&v), "{k}={v}"),
            "samples" => assert_eq!(v, 96.0),
            _ => {}
        }
    }
    let confusion = ws.read("ev/confusion.csv");
    assert_eq!(confusion.lines().count(), 4);
    let total: u64 = confusion
        .lines()
        .flat_map(|l| l.split(','))
        .map(|c| c.parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 96);
}

#[test]
fn eval_rejects_class_mismatch_naming_both_counts() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--set", "train.epochs=0", "--out", "run"]);
    ws.ok(&[
        "gen",
        "--set",
        "data.classes=3",
        "--set",
        "data.train_counts=2,2,2",
        "--set",
        "data.val_counts=2,2,2",
        "--set",
        "data.test_counts=2,2,2",
        "--out",
        "three",
    ]);
    let err = ws.fails(&["eval", "--checkpoint", "run/checkpoint", "--dataset", "three/test.pcrd", "--out", "ev"]);
    assert!(err.contains("config error"), "{err}");
    assert!(err.contains('3') && err.contains('4'), "{err}");
}

#[test]
fn eval_of_empty_file_is_input_error() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--set", "train.epochs=0", "--out", "run"]);
    std::fs::write(ws.path("empty.pcrd"), b"").unwrap();
    let err = ws.fails(&["eval", "--checkpoint", "run/checkpoint", "--dataset", "empty.pcrd", "--out", "ev"]);
    assert!(err.contains("input error"), "{err}");
}

#[test]
fn gradcheck_passes_and_lists_tolerances() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["gradcheck", "--out", "gc"]);
    let report = ws.read("gc/gradcheck.txt");
    assert_eq!(report.lines().count(), 31);
    for line in report.lines() {
        assert!(line.ends_with("PASS"), "{line}");
        let tol = if line.starts_with("loss.") { "tol=1e-6" } else { "tol=1e-4" };
        assert!(line.contains(tol), "{line}");
    }
    assert!(stdout.contains("31 checks, 0 failed"));
    assert!(ws.read("gc/config.txt").contains("precision=64\n"));
}

#[test]
fn gradcheck_catches_a_broken_sigmoid_rule() {
    let ws = Workspace::new();
    let out = ws.run(&["gradcheck", "--inject-sigmoid-fault", "--out", "gc"]);
    assert!(!out.status.success());
    let failed: Vec<String> = ws
        .read("gc/gradcheck.txt")
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(
        failed,
        ["activation.sigmoid", "epga.sigmoid", "pcr_chain", "res_pcr", "pcrnet_tiny"]
    );
}

#[test]
fn export_of_untrained_network_echoes_bottom_init() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--set", "train.epochs=0", "--out", "init"]);
    ws.ok(&["export-attention", "--checkpoint", "init/checkpoint", "--index", "5", "--out", "maps"]);
    let stats = ws.read("maps/stats.txt");
    let e_lines: Vec<&str> = stats.lines().filter(|l| l.contains("map=E")).collect();
    assert_eq!(e_lines.len(), 2);
    for l in e_lines {
        assert!(l.ends_with("top_mean=0 bottom_mean=1"), "{l}");
    }
    for f in ["stage2.block0.g.pgm", "stage2.block0.p.pcrt", "stage1.block0.e.pgm"] {
        assert!(ws.path(&format!("maps/{f}")).exists(), "{f}");
    }
}

#[test]
fn export_with_forced_unit_gate_is_mid_gray() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&[
        "train",
        "--config",
        "small.cfg",
        "--set",
        "net.force_unit_gate=true",
        "--out",
        "unit",
    ]);
    ws.ok(&["export-attention", "--checkpoint", "unit/checkpoint", "--out", "maps"]);
    let pgm = std::fs::read(ws.path("maps/stage1.block0.g.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert!(pgm[pgm.len() - 32 * 32..].iter().all(|&b| b == 128));
}

#[test]
fn export_index_out_of_range_is_input_error() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["train", "--config", "small.cfg", "--set", "train.epochs=0", "--out", "init"]);
    let err = ws.fails(&["export-attention", "--checkpoint", "init/checkpoint", "--index", "32", "--out", "maps"]);
    assert!(err.contains("input error"), "{err}");
}

#[test]
fn theta_sweep_rows_and_per_run_replay() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&["sweep", "--axis", "theta", "--config", "small.cfg", "--out", "sw"]);
    let table = ws.read("sw/sweep_theta.csv");
    let values: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["off", "25", "50", "75"]);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(2) == Some("ok")));
    ws.ok(&["train", "--config", "sw/theta_50/config.txt", "--out", "replay"]);
    assert_eq!(ws.read("sw/theta_50/history.txt"), ws.read("replay/history.txt"));
    assert_eq!(ws.read("sw/theta_50/test_metrics.txt"), ws.read("replay/test_metrics.txt"));
}

#[test]
fn gate_sweep_rows() {
    let ws = Workspace::new();
    ws.gen();
    ws.ok(&[
        "sweep",
        "--axis",
        "gate",
        "--config",
        "small.cfg",
        "--set",
        "train.epochs=0",
        "--workers",
        "2",
        "--out",
        "sw",
    ]);
    let table = ws.read("sw/sweep_gate.csv");
    let values: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["relu", "tanh", "softmax", "sigmoid"]);
}

#[test]
fn failed_sweep_run_is_marked_and_exit_is_nonzero() {
    let ws = Workspace::new();
    ws.gen();
    std::fs::write(ws.path("data/frequencies.txt"), "0 10\n1 10\n2 10\n").unwrap();
    let out = ws.run(&["sweep", "--axis", "theta", "--config", "small.cfg", "--set", "loss.kind=il", "--out", "sw"]);
    assert!(!out.status.success());
    let table = ws.read("sw/sweep_theta.csv");
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().skip(1).all(|l| l.contains(",failed,")));
}

#[test]
fn unknown_sweep_axis_fails() {
    let ws = Workspace::new();
    assert!(ws.fails(&["sweep", "--axis", "depth"]).contains("depth"));
}
