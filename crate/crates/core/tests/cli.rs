use std::path::Path;

use cooptrack::cli::{self, Manifest, EXIT_CHECK_FAILURE, EXIT_OK, EXIT_VALIDATION};
use cooptrack::config::Config;
use cooptrack::eval::read_reports_csv;
use cooptrack::training::read_loss_csv;
use cooptrack_numerics::ParamStore;

fn tiny() -> Config {
    Config {
        d: 8,
        heads: 2,
        caa_block: 4,
        tau: 1,
        n_fresh: 6,
        train_scenarios: 1,
        eval_scenarios: 1,
        duration: 0.6,
        n_cars: 4,
        n_pedestrians: 1,
        n_trucks: 0,
        epochs_stage1: 2,
        epochs_stage2: 1,
        ..Config::default()
    }
}

fn write_config(dir: &Path, cfg: &Config) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_commented_toml()).unwrap();
    p.display().to_string()
}

fn run(args: &[&str]) -> i32 {
    let mut v = vec!["cooptrack"];
    v.extend_from_slice(args);
    cli::run(v)
}

fn read_manifest(dir: &Path) -> (Manifest, String) {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let hash = {
        use sha2::Digest;
        hex::encode(sha2::Sha256::digest(text.as_bytes()))
    };
    (serde_json::from_str(&text).unwrap(), hash)
}

#[test]
fn gen_is_deterministic_and_manifest_covers_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["gen", "--config", &cfg, "--seed", "4", "--out", a.to_str().unwrap()]), EXIT_OK);
    assert_eq!(run(&["gen", "--config", &cfg, "--seed", "4", "--out", b.to_str().unwrap()]), EXIT_OK);
    let (ma, ha) = read_manifest(&a);
    let (_, hb) = read_manifest(&b);
    assert_eq!(ha, hb);
    assert_eq!(ma.seed, 4);
    assert_eq!(ma.files.len(), 1 + 2);
    for f in &ma.files {
        let bytes = std::fs::read(a.join(&f.path)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    let stanza: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("reproducibility.json")).unwrap()).unwrap();
    assert_eq!(stanza["seed"], 4);
    assert_eq!(stanza["config_hash"], ma.config_hash.as_str());
    assert!(stanza["version"].is_string());

    let c = tmp.path().join("c");
    assert_eq!(run(&["gen", "--config", &cfg, "--seed", "5", "--out", c.to_str().unwrap()]), EXIT_OK);
    assert_ne!(read_manifest(&c).1, ha);
}

#[test]
fn frame_count_scales_with_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let count = |rate: f64, name: &str| {
        let cfg = write_config(tmp.path(), &Config { frame_rate: rate, duration: 2.0, ..tiny() });
        let out = tmp.path().join(name);
        assert_eq!(run(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]), EXIT_OK);
        let text = std::fs::read_to_string(out.join("scenarios/train_000.jsonl")).unwrap();
        text.lines().count() - 1
    };
    assert_eq!(count(10.0, "fast"), 5 * count(2.0, "slow"));
}

#[test]
fn bad_inputs_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["train", "--stage", "3", "--out", o]), EXIT_VALIDATION);
    assert_eq!(run(&["frobnicate"]), EXIT_VALIDATION);
    assert_eq!(run(&["gen", "--config", "/nonexistent/x.toml", "--out", o]), cli::EXIT_RUNTIME);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "d = 7\n").unwrap();
    assert_eq!(run(&["gen", "--config", bad.to_str().unwrap(), "--out", o]), EXIT_VALIDATION);
    assert_eq!(run(&["sweep", "--kind", "latency", "--levels", "", "--out", o]), EXIT_VALIDATION);
    assert_eq!(run(&["sweep", "--kind", "warp", "--out", o]), EXIT_VALIDATION);
    assert_eq!(run(&["eval", "--mode", "telepathy", "--out", o]), EXIT_VALIDATION);
}

#[test]
fn stage2_without_stage1_names_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let err = cli::cmd_train(&cfg, 2, tmp.path(), false).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("stage1_vehicle.ckpt") && msg.contains("stage1_infrastructure.ckpt"), "{msg}");
    assert_eq!(cli::exit_code_for(&err), EXIT_VALIDATION);
}

#[test]
fn train_eval_round_trip_with_resume_and_mode_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["train", "--config", &cfg_path, "--stage", "1", "--out", o]), EXIT_OK);
    let vehicle = ParamStore::load(&out.join("stage1_vehicle.ckpt")).unwrap();
    assert!(vehicle.ids().all(|id| vehicle.name(id).starts_with("vehicle.")));
    let steps_one_pass = vehicle.step();
    assert!(steps_one_pass > 0);
    let logs = read_loss_csv(&out.join("loss_stage1_vehicle.csv")).unwrap();
    assert_eq!(logs.len() as u64, steps_one_pass);
    let header = std::fs::read_to_string(out.join("loss_stage1_vehicle.csv")).unwrap();
    assert!(header.starts_with("step,lr,l_bbx,l_cls,l_asso,total"));

    // Resuming with more epochs continues the counter instead of restarting.
    let longer = write_config(tmp.path(), &Config { epochs_stage1: 3, ..tiny() });
    assert_eq!(run(&["train", "--config", &longer, "--stage", "1", "--out", o, "--resume"]), EXIT_OK);
    let resumed = ParamStore::load(&out.join("stage1_vehicle.ckpt")).unwrap();
    assert_eq!(resumed.step(), steps_one_pass / 2 * 3);
    let logs = read_loss_csv(&out.join("loss_stage1_vehicle.csv")).unwrap();
    assert_eq!(logs.len() as u64, resumed.step());
    assert!(logs.windows(2).all(|w| w[1].step == w[0].step + 1));

    assert_eq!(run(&["train", "--config", &cfg_path, "--stage", "2", "--out", o]), EXIT_OK);
    assert!(out.join("stage2.ckpt").exists() && out.join("loss_stage2.csv").exists());

    assert_eq!(run(&["eval", "--config", &cfg_path, "--out", o]), EXIT_OK);
    let reports = read_reports_csv(&out.join("eval/metrics.csv")).unwrap();
    assert_eq!(reports.len(), 3);
    let bps = |label: &str| reports.iter().find(|r| r.label == label).unwrap().bps;
    assert_eq!(bps("no_fusion"), 0.0);
    assert!(bps("late_fusion") <= bps("coop"));
    for f in ["metrics.svg", "bps.svg", "summary.json", "coop_eval_000.jsonl"] {
        assert!(out.join("eval").join(f).exists(), "{f}");
    }

    let stage1 = out.join("stage1_vehicle.ckpt");
    assert_eq!(run(&["eval", "--config", &cfg_path, "--mode", "coop", "--checkpoint", stage1.to_str().unwrap(), "--out", o]), EXIT_VALIDATION);
    let stage2 = out.join("stage2.ckpt");
    assert_eq!(run(&["eval", "--config", &cfg_path, "--mode", "no_fusion", "--checkpoint", stage2.to_str().unwrap(), "--out", o]), EXIT_VALIDATION);
    assert_eq!(run(&["eval", "--config", &cfg_path, "--mode", "no_fusion", "--checkpoint", stage1.to_str().unwrap(), "--out", o]), EXIT_OK);

    assert_eq!(run(&["sweep", "--config", &cfg_path, "--kind", "latency", "--levels", "0,200", "--out", o]), EXIT_OK);
    let curve = std::fs::read_to_string(out.join("sweep/latency.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2 * 2);
    assert!(out.join("sweep/latency.svg").exists());
}

#[test]
fn check_passes_and_detects_a_perturbed_backward() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    assert_eq!(run(&["check", "--out", o]), EXIT_OK);
    let report = std::fs::read_to_string(tmp.path().join("check.txt")).unwrap();
    assert!(report.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(report.contains('s'), "per-check wall time");
    assert_eq!(run(&["check", "--only", "gba", "--perturb", "gba", "--out", o]), EXIT_CHECK_FAILURE);
    let report = std::fs::read_to_string(tmp.path().join("check.txt")).unwrap();
    assert!(report.contains("FAIL coop-fusion  gba"), "{report}");
    assert_eq!(run(&["check", "--only", "no-such-check"]), EXIT_VALIDATION);
}

#[test]
fn config_round_trips_through_text() {
    let cfg = tiny();
    let back = Config::from_toml_str(&cfg.to_commented_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}
