use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 0

[encoder]
stage_channels = [4, 8]
blocks_per_stage = 1
output_upsample_factor = 2
out_channels = 8

[heads]
projector_hidden = 16
predictor_hidden = 8
out_dim = 8

[pretrain]
epochs = 1
batch_size = 4

[finetune]
epochs = 1
batch_size = 4
samples_per_epoch = 8
fpn_channels = 4
"#;

fn sdrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdrl"))
        .current_dir(dir)
        .env("SDRL_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), TINY).unwrap();
    ok(&sdrl(dir.path(), &["gen-data", "--config", "c.toml", "--scenes", "3", "--size", "64", "--patch", "32", "--out", "pre"]));
    ok(&sdrl(dir.path(), &["gen-data", "--config", "c.toml", "--kind", "cd", "--scenes", "4", "--size", "64", "--patch", "32", "--out", "cd"]));
    dir
}

#[test]
fn gen_data_grid_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdrl(dir.path(), &["gen-data", "--scenes", "4", "--size", "256", "--patch", "64", "--out", "d"]);
    ok(&out);
    let manifest = std::fs::read_to_string(dir.path().join("d/manifest.jsonl")).unwrap();
    let records = manifest.lines().count() - 1;
    assert!(records > 0 && records <= 64, "{records}");
    let resolved = std::fs::read_to_string(dir.path().join("d/config.toml")).unwrap();
    assert!(resolved.contains("scenes = 4"));
}

#[test]
fn pretrain_twice_gives_identical_csvs_and_records_overrides() {
    let dir = setup();
    for run in ["a", "b"] {
        ok(&sdrl(dir.path(), &["pretrain", "--config", "c.toml", "--seed", "7", "--data", "pre", "--out", run]));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert_eq!(read("a/epochs.csv"), read("b/epochs.csv"));
    let resolved = String::from_utf8(read("a/config.toml")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed = 7"), "{resolved}");
}

#[test]
fn objective_and_stopgrad_flags_reach_the_resolved_config() {
    let dir = setup();
    ok(&sdrl(dir.path(), &["pretrain", "--config", "c.toml", "--objective", "global", "--debug-no-stopgrad", "--data", "pre", "--out", "g"]));
    let resolved = std::fs::read_to_string(dir.path().join("g/config.toml")).unwrap();
    assert!(resolved.contains("mode = \"global\""));
    assert!(resolved.contains("stop_gradient = false"));
}

#[test]
fn finetune_eval_probe_and_plot() {
    let dir = setup();
    ok(&sdrl(dir.path(), &["pretrain", "--config", "c.toml", "--data", "pre", "--out", "p"]));
    let out = sdrl(
        dir.path(),
        &["finetune", "--config", "c.toml", "--fraction", "0.5", "--init", "checkpoint", "--checkpoint", "p/best.ckpt", "--seed", "3", "--data", "cd", "--out", "f"],
    );
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("f/report.json")).unwrap()).unwrap();
    assert_eq!(report["fraction"], 0.5);
    assert_eq!(report["seed"], 3);
    assert_eq!(report["init"], "checkpoint");
    assert!(report["test"]["f1"].is_number());

    let eval = sdrl(dir.path(), &["eval", "--config", "c.toml", "--checkpoint", "f/model.ckpt", "--data", "cd", "--out", "e"]);
    ok(&eval);
    let scores: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("e/eval.json")).unwrap()).unwrap();
    assert_eq!(scores["f1"], report["test"]["f1"]);

    let probe = sdrl(dir.path(), &["probe", "--config", "c.toml", "--checkpoint", "p/last.ckpt", "--data", "pre", "--split", "train"]);
    ok(&probe);
    assert!(String::from_utf8_lossy(&probe.stdout).contains("collapse_stat"));

    ok(&sdrl(dir.path(), &["plot", "--csv", "p/metrics.csv"]));
    assert!(std::fs::read_to_string(dir.path().join("p/metrics.svg")).unwrap().contains("<polyline"));
}

#[test]
fn errors_are_categorized_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad_flag = sdrl(dir.path(), &["pretrain", "--bogus"]);
    assert!(!bad_flag.status.success());
    assert!(String::from_utf8_lossy(&bad_flag.stderr).contains("Usage"));

    let no_cmd = sdrl(dir.path(), &[]);
    assert!(!no_cmd.status.success());

    std::fs::write(dir.path().join("bad.toml"), "[pretrain]\nepoch = 3\n").unwrap();
    let cfg = sdrl(dir.path(), &["pretrain", "--config", "bad.toml"]);
    assert_eq!(cfg.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&cfg.stderr).contains("config-invalid"));

    let missing = sdrl(dir.path(), &["pretrain", "--data", "nowhere"]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("data-missing"));

    let fraction = sdrl(dir.path(), &["finetune", "--fraction", "1.5", "--data", "nowhere"]);
    assert_eq!(fraction.status.code(), Some(3));
}
