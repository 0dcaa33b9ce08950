use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
height = 16
width = 16
contrasts = 3
n_samples = 4
train_frac = 0.5
val_frac = 0.0
preselect = 2
depth = 2
channels = [4, 8]
n_blocks = 2
epochs = 2
batch_size = 2
";

fn mcmri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcmri"))
        .args(args)
        .env("MCMRI_THREADS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(mcmri(&["gen-data", "--config", &cfg, "--seed", "7", "--n", "4", "--out", s(out)]));
    }
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 4);
    assert!(a.join("run_manifest.json").is_file());
}

#[test]
fn eval_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mcmri(&["eval", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_checkpoint_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mcmri(&["eval", "--checkpoint", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_verb_is_a_usage_error() {
    assert_eq!(mcmri(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mcmri(&["train", "--baseline", "z"]).status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "alpha = 3.0\n").unwrap();
    let o = mcmri(&["train", "--config", s(&p), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    fs::write(&p, "no_such_key = 1\n").unwrap();
    let o = mcmri(&["gen-data", "--config", s(&p), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_mcmri"))
        .args(["gen-data", "--out", "/nonexistent/never"])
        .env("MCMRI_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn every_verb_help_lists_flag_defaults() {
    for verb in [
        "gen-data",
        "train",
        "train-map",
        "eval",
        "ablate-blocks",
        "fit-regressor",
        "plot-masks",
        "plot-maps",
    ] {
        let o = ok(mcmri(&[verb, "--help"]));
        let text = String::from_utf8(o.stdout).unwrap();
        for flag in ["--config", "--out", "--seed", "--baseline", "--alpha", "--ratio-mode", "--blocks"] {
            assert!(text.contains(flag), "{verb} lacks {flag}");
        }
        // clap wraps long lines, so check per flag entry rather than per line
        let entries: Vec<&str> = text.split("\n  ").filter(|e| e.trim_start().starts_with("--")).collect();
        assert!(!entries.is_empty());
        for e in entries {
            if !e.contains("--help") {
                assert!(e.contains("[default:"), "{verb}: {e}");
            }
        }
    }
}

#[test]
fn train_eval_and_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let before = fs::read(&cfg).unwrap();
    let run = dir.path().join("run");
    ok(mcmri(&["train", "--config", &cfg, "--out", s(&run)]));
    assert_eq!(fs::read(&cfg).unwrap(), before);
    assert_eq!(fs::read_to_string(run.join("config.toml")).unwrap(), TINY);
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "psnr", "ssim", "alpha", "wall_time"] {
        assert!(first.get(key).is_some(), "log lacks {key}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"][0]["path"].as_str().unwrap(), cfg);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    for f in ["checkpoint.safetensors", "report.json", "report.csv", "log.jsonl", "config.toml"] {
        assert!(outputs.contains(&f), "{f} not recorded");
        assert!(run.join(f).is_file());
    }

    let ckpt = run.join("checkpoint.safetensors");
    let ev = dir.path().join("eval");
    ok(mcmri(&["eval", "--checkpoint", s(&ckpt), "--zero-filled", "--out", s(&ev)]));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"].as_str().unwrap(), TINY);
    assert_eq!(report["report"]["per_contrast"].as_array().unwrap().len(), 3);
    assert!(ev.join("report_zero_filled.csv").is_file());

    let pm = dir.path().join("masks");
    ok(mcmri(&["plot-masks", "--checkpoint", s(&ckpt), "--out", s(&pm)]));
    for c in 0..3 {
        let img = image::open(pm.join(format!("mask_hist_c{c}.png"))).unwrap();
        assert!(img.width() > 0);
    }
    assert!(!pm.join("mask_hist_c3.png").exists());

    let reg = dir.path().join("reg");
    ok(mcmri(&[
        "fit-regressor", "--config", &cfg, "--steps", "20", "--samples", "500", "--out", s(&reg),
    ]));
    let maps = dir.path().join("maps");
    let reg_file = reg.join("regressor.json");
    ok(mcmri(&["plot-maps", "--checkpoint", s(&ckpt), "--regressor", s(&reg_file), "--out", s(&maps)]));
    for f in ["t2star_reference.png", "t2star_reconstructed.png", "t2star_error.png", "recon_c0.png"] {
        assert!(maps.join(f).is_file(), "{f}");
    }
    let o = mcmri(&["plot-maps", "--checkpoint", s(&ckpt), "--out", s(&maps)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_map_fits_a_regressor_when_none_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("map.toml");
    fs::write(&p, format!("{TINY}regressor_samples = 500\nregressor_steps = 20\n")).unwrap();
    let run = dir.path().join("run");
    ok(mcmri(&["train-map", "--config", s(&p), "--ratio-mode", "learnable", "--out", s(&run)]));
    assert!(run.join("regressor.json").is_file());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    for key in ["psnr_bg", "ssim_bg", "psnr_nbg", "ssim_nbg"] {
        assert!(report["report"]["map"][key].is_number(), "{key}");
    }
}

#[test]
fn eval_reads_a_generated_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(mcmri(&["gen-data", "--config", &cfg, "--out", s(&data)]));
    let run = dir.path().join("run");
    ok(mcmri(&["train", "--config", &cfg, "--baseline", "a", "--out", s(&run)]));
    let ev = dir.path().join("eval");
    ok(mcmri(&[
        "eval", "--checkpoint", s(&run.join("checkpoint.safetensors")), "--data-dir", s(&data), "--out", s(&ev),
    ]));
    let manifest = fs::read_to_string(ev.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("manifest.json"));
}
