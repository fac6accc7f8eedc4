use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[train]\npatches_per_epoch = 4\nbatch_size = 2\nlr_drop_epochs = 1\n\
[model]\nbackbone_channels = 4\nsubnet_channels = 4\nsubnet_depth = 1\n[data]\nsize_range = 16,64\n";

fn fan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fan"))
        .current_dir(dir)
        .args(args)
        .env_remove("FAN_TRAIN_LR")
        .output()
        .expect("spawn fan")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.ini"), TINY).unwrap();
    let o = fan(dir.path(), &["--config", "tiny.ini", "gen-data", "--out", "data", "--count", "4", "--seed", "5", "--size", "128x128"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn gen_data_writes_corpus_and_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    assert!(d.join("data/annotations.jsonl").exists());
    assert!(d.join("data/stats.csv").exists());
    assert!(d.join("data/images/000003.png").exists());
    let o = fan(d, &["--config", "tiny.ini", "gen-data", "--out", "again", "--count", "4", "--seed", "5", "--size", "128x128"]);
    assert_eq!(code(&o), 0);
    for f in ["annotations.jsonl", "stats.csv", "images/000002.png"] {
        assert_eq!(std::fs::read(d.join("data").join(f)).unwrap(), std::fs::read(d.join("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_eval_pipeline_is_bit_reproducible() {
    let dir = setup();
    let d = dir.path();
    for out in ["a.ckpt", "b.ckpt"] {
        let o = fan(d, &["--config", "tiny.ini", "--threads", "1", "train", "--data", "data", "--out", out, "--epochs", "2", "--seed", "9"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("a.ckpt.log.csv")).unwrap(), std::fs::read(d.join("b.ckpt.log.csv")).unwrap());
    let log = std::fs::read_to_string(d.join("a.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("step,lr,total,cls,reg,att\n"));
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    for out in ["r1.csv", "r2.csv"] {
        let o = fan(d, &["eval", "--ckpt", "a.ckpt", "--data", "data", "--out", out, "--pr-svg", "pr.svg"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report = std::fs::read_to_string(d.join("r1.csv")).unwrap();
    assert!(report.starts_with("subset,AP,n_gt,n_det\n"));
    assert_eq!(report, std::fs::read_to_string(d.join("r2.csv")).unwrap());
    assert!(std::fs::read_to_string(d.join("pr.svg")).unwrap().contains("<svg"));

    let o = fan(d, &["detect", "--ckpt", "a.ckpt", "--image", "data/images/000000.png", "--scales", "128,256", "--out", "det.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let det: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("det.json")).unwrap()).unwrap();
    assert!(det["detections"].is_array());

    let o = fan(d, &["export-attention", "--ckpt", "a.ckpt", "--image", "data/images/000000.png", "--out", "att"]);
    assert_eq!(code(&o), 0);
    for level in 3..=7 {
        let pgm = std::fs::read(d.join(format!("att/attention_p{level}.pgm"))).unwrap();
        let side = 128 >> level;
        assert!(pgm.starts_with(format!("P5\n{side} {side}\n255\n").as_bytes()));
    }

    let o = fan(d, &["bench", "--ckpt", "a.ckpt", "--sizes", "128", "--repeat", "2"]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("size,median_ms,min_ms,repeat\n128,"));
}

#[test]
fn attention_off_trains_baseline_without_branch() {
    let dir = setup();
    let d = dir.path();
    let o = fan(d, &["--config", "tiny.ini", "train", "--data", "data", "--out", "base.ckpt", "--epochs", "2", "--attention", "off"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.join("base.ckpt.log.csv")).unwrap();
    for row in log.lines().skip(1) {
        assert!(row.ends_with(",0"), "attention term must vanish: {row}");
    }
    let o = fan(d, &["export-attention", "--ckpt", "base.ckpt", "--image", "data/images/000000.png"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_layers_flag_over_file_and_env_over_flag() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("lr.ini"), "[train]\nlr = 0.5\n[run]\nseed = 3\n").unwrap();
    let run = |env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_fan"));
        c.current_dir(d).args(["--config", "lr.ini", "coverage", "--sides", "16", "--placements", "10"]);
        c.env_remove("FAN_TRAIN_LR");
        if let Some(v) = env {
            c.env("FAN_TRAIN_LR", v);
        }
        c.output().unwrap()
    };
    let o = run(None);
    let echo = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(echo.contains("# train.lr set by File"), "{echo}");
    assert!(echo.contains("\"lr\": 0.5"), "{echo}");
    let o = run(Some("0.25"));
    let echo = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(echo.contains("# train.lr set by Env"), "{echo}");
    assert!(echo.contains("\"lr\": 0.25"), "{echo}");

    let o = fan(d, &["--config", "lr.ini", "--seed", "4", "coverage", "--sides", "16", "--placements", "10"]);
    let echo = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(echo.contains("# run.seed set by Flag"), "{echo}");
    assert!(echo.contains("\"seed\": 4"), "{echo}");
}

#[test]
fn coverage_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["coverage", "--spec", "fan", "--sides", "16,32,406", "--placements", "200", "--seed", "1"];
    let a = fan(dir.path(), &args);
    let b = fan(dir.path(), &args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let csv = String::from_utf8(a.stdout).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    // usage
    assert_eq!(code(&fan(d, &["train", "--no-such-flag"])), 1);
    assert_eq!(code(&fan(d, &["frobnicate"])), 1);
    assert_eq!(code(&fan(d, &["gen-data", "--out", "x", "--size", "128"])), 1);
    std::fs::write(d.join("bad.ini"), "[train]\nnope = 1\n").unwrap();
    assert_eq!(code(&fan(d, &["--config", "bad.ini", "coverage"])), 1);
    assert_eq!(code(&fan(d, &["coverage", "--spec", "nosuch"])), 1);
    assert_eq!(code(&fan(d, &["--help"])), 0);
    // data
    assert_eq!(code(&fan(d, &["--config", "tiny.ini", "train", "--data", "missing", "--out", "m.ckpt"])), 2);
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&fan(d, &["eval", "--ckpt", "junk.ckpt", "--data", "data", "--out", "r.csv"])), 2);
    // numerical: a huge learning rate diverges to a non-finite loss
    let o = fan(d, &["--config", "tiny.ini", "train", "--data", "data", "--out", "nan.ckpt", "--epochs", "2", "--lr", "1e30"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}
