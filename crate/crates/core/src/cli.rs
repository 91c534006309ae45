//! Command-line front end: scenario generation, training, evaluation,
//! sweeps and the self-check suite.
//!
//! Exit codes: 0 ok, 1 validation, 2 runtime, 3 check failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cooptrack_numerics::ParamStore;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::benchmark::{eval_set, scenarios, train_set, Split};
use crate::check::{format_report, run_checks_filtered, CheckOptions};
use crate::config::Config;
use crate::error::{CoopError, Result};
use crate::eval::{evaluate, history_sweep, link_sweep, parse_levels, write_reports_csv, write_sweep_csv, MetricReport, SweepKind, SweepPoint};
use crate::model::{load_prefix, require_files, save_checkpoint, CoopModel};
use crate::plot;
use crate::sim::{write_scenario, AgentKind, ScenarioSpec};
use crate::tracker::{write_frame_outputs, LinkConditions, Mode};
use crate::training::{read_loss_csv, stage1_train, stage2_train, write_loss_csv, Schedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILURE: i32 = 3;

pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";

pub fn stage1_checkpoint(kind: AgentKind) -> String {
    format!("stage1_{}.ckpt", kind.name())
}

#[derive(Debug, Parser)]
#[command(name = "cooptrack", version, about = "Cooperative vehicle-infrastructure 3D multi-object tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and eval scenario corpus with a manifest.
    Gen(Common),
    /// Train stage 1 (both single-agent trackers) or stage 2 (cooperation).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate one mode (or all) on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// coop, no_fusion, late_fusion or all.
        #[arg(long, default_value = "all")]
        mode: String,
        /// Checkpoint file or run directory; defaults to --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Robustness or history sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// latency, rotation_noise, no_infra or history.
        #[arg(long)]
        kind: String,
        /// Comma-separated levels; the kind's defaults when omitted.
        #[arg(long)]
        levels: Option<String>,
        /// Stage-2 checkpoint file or run directory; defaults to --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the gradient, oracle and invariant suite.
    Check {
        /// Directory for the report files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only run checks whose name contains this text.
        #[arg(long)]
        only: Option<String>,
        /// Scale the analytic gradient of the named check (mutation smoke test).
        #[arg(long)]
        perturb: Option<String>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &CoopError) -> i32 {
    match e {
        CoopError::Config(_) | CoopError::Validation(_) | CoopError::Parse { .. } | CoopError::MissingCheckpoint(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(c) => cmd_gen(&load_config(&c)?, &c.out).map(|_| EXIT_OK),
        Command::Train { common, stage, resume } => cmd_train(&load_config(&common)?, stage, &common.out, resume).map(|_| EXIT_OK),
        Command::Eval { common, mode, checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| common.out.clone());
            cmd_eval(&load_config(&common)?, &mode, &ckpt, &common.out).map(|_| EXIT_OK)
        }
        Command::Sweep { common, kind, levels, checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| common.out.clone());
            cmd_sweep(&load_config(&common)?, &kind, levels.as_deref(), &ckpt, &common.out).map(|_| EXIT_OK)
        }
        Command::Check { out, only, perturb } => cmd_check(out.as_deref(), only.as_deref(), perturb),
    }
}

pub fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoopError::io(dir, e))
}

#[derive(Serialize)]
struct Stanza<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'a str,
}

/// Writes `reproducibility.json` and the resolved config into `out`.
pub fn write_stanza(out: &Path, command: &str, cfg: &Config) -> Result<()> {
    create_dir(out)?;
    let stanza = Stanza {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    let path = out.join("reproducibility.json");
    std::fs::write(&path, serde_json::to_string_pretty(&stanza).expect("stanza serializes")).map_err(|e| CoopError::io(&path, e))?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_commented_toml()).map_err(|e| CoopError::io(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

fn file_entry(root: &Path, rel: &str) -> Result<ManifestEntry> {
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| CoopError::io(&path, e))?;
    Ok(ManifestEntry {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Writes every train and eval scenario plus `manifest.json`; returns the
/// manifest and the SHA-256 of its file.
pub fn cmd_gen(cfg: &Config, out: &Path) -> Result<(Manifest, String)> {
    write_stanza(out, "gen", cfg)?;
    create_dir(&out.join("scenarios"))?;
    let spec = ScenarioSpec::from_config(cfg)?;
    let mut files = vec![file_entry(out, "config.toml")?];
    for (split, name) in [(Split::Train, "train"), (Split::Eval, "eval")] {
        for (i, sc) in scenarios(cfg, split, &spec)?.iter().enumerate() {
            let rel = format!("scenarios/{name}_{i:03}.jsonl");
            write_scenario(&out.join(&rel), sc)?;
            files.push(file_entry(out, &rel)?);
        }
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = out.join("manifest.json");
    std::fs::write(&path, &text).map_err(|e| CoopError::io(&path, e))?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    println!("wrote {} files to {}; manifest sha256 {hash}", manifest.files.len(), out.display());
    Ok((manifest, hash))
}

fn merge_logs(path: &Path, resume: bool, new: &[crate::training::StepLog]) -> Result<()> {
    let mut all = if resume && path.exists() { read_loss_csv(path)? } else { Vec::new() };
    all.extend_from_slice(new);
    write_loss_csv(path, &all)
}

/// Stage 1 writes one checkpoint per agent holding only that agent's
/// parameters; stage 2 needs both and writes the full model.
pub fn cmd_train(cfg: &Config, stage: u8, out: &Path, resume: bool) -> Result<()> {
    write_stanza(out, &format!("train --stage {stage}"), cfg)?;
    let (model, _) = CoopModel::new(cfg)?;
    match stage {
        1 => {
            let train = train_set(cfg)?;
            let sched = Schedule::from_config(cfg, cfg.epochs_stage1);
            for kind in [AgentKind::Vehicle, AgentKind::Infrastructure] {
                let prefix = model.agent(kind).prefix();
                let ckpt = out.join(stage1_checkpoint(kind));
                let (_, mut ps) = CoopModel::new(cfg)?;
                if resume && ckpt.exists() {
                    ps.restore_prefix(&ParamStore::load(&ckpt)?, &prefix)?;
                    println!("resuming {} from step {}", kind.name(), ps.step());
                }
                let logs = stage1_train(&model, &mut ps, cfg, kind, &train, &sched, &mut |epoch, ps| {
                    save_checkpoint(&ps.subset(&prefix), &ckpt)?;
                    println!("stage 1 {} epoch {} done (step {})", kind.name(), epoch + 1, ps.step());
                    Ok(())
                })?;
                save_checkpoint(&ps.subset(&prefix), &ckpt)?;
                merge_logs(&out.join(format!("loss_stage1_{}.csv", kind.name())), resume, &logs)?;
            }
        }
        2 => {
            let inputs: Vec<PathBuf> = [AgentKind::Vehicle, AgentKind::Infrastructure].iter().map(|&k| out.join(stage1_checkpoint(k))).collect();
            require_files(&inputs)?;
            let ckpt = out.join(STAGE2_CHECKPOINT);
            let (_, mut ps) = CoopModel::new(cfg)?;
            if resume && ckpt.exists() {
                ps.restore_from(&ParamStore::load(&ckpt)?)?;
                println!("resuming stage 2 from step {}", ps.step());
            } else {
                load_prefix(&mut ps, &inputs[0], "vehicle.")?;
                load_prefix(&mut ps, &inputs[1], "infrastructure.")?;
            }
            let train = train_set(cfg)?;
            let sched = Schedule::from_config(cfg, cfg.epochs_stage2);
            let logs = stage2_train(&model, &mut ps, cfg, &train, &sched, &mut |epoch, ps| {
                save_checkpoint(ps, &ckpt)?;
                println!("stage 2 epoch {} done (step {})", epoch + 1, ps.step());
                Ok(())
            })?;
            save_checkpoint(&ps, &ckpt)?;
            merge_logs(&out.join("loss_stage2.csv"), resume, &logs)?;
        }
        s => return Err(CoopError::Validation(format!("stage must be 1 or 2, got {s}"))),
    }
    Ok(())
}

fn has_prefix(ps: &ParamStore, prefix: &str) -> bool {
    ps.ids().any(|id| ps.name(id).starts_with(prefix))
}

/// Loads the parameters `mode` needs from a checkpoint file or a run
/// directory into a fresh model store.
pub fn load_for_mode(cfg: &Config, mode: Mode, ckpt: &Path) -> Result<(CoopModel, ParamStore)> {
    let (model, mut ps) = CoopModel::new(cfg)?;
    let files: Vec<PathBuf> = if ckpt.is_dir() {
        match mode {
            Mode::Coop => vec![ckpt.join(STAGE2_CHECKPOINT)],
            Mode::NoFusion => vec![ckpt.join(stage1_checkpoint(AgentKind::Vehicle))],
            Mode::LateFusion => [AgentKind::Vehicle, AgentKind::Infrastructure].iter().map(|&k| ckpt.join(stage1_checkpoint(k))).collect(),
        }
    } else {
        vec![ckpt.to_path_buf()]
    };
    require_files(&files)?;
    let needed: &[&str] = match mode {
        Mode::Coop => &["vehicle.", "infrastructure.", "fusion."],
        Mode::NoFusion => &["vehicle."],
        Mode::LateFusion => &["vehicle.", "infrastructure."],
    };
    let stores: Vec<ParamStore> = files.iter().map(|f| ParamStore::load(f)).collect::<std::result::Result<_, _>>()?;
    let trained_fusion = stores.iter().any(|s| has_prefix(s, "fusion."));
    if mode == Mode::Coop && !trained_fusion {
        return Err(CoopError::Validation(format!("{} is a stage-1 checkpoint; coop mode needs the stage-2 checkpoint", files[0].display())));
    }
    if mode != Mode::Coop && trained_fusion {
        return Err(CoopError::Validation(format!("{} is a stage-2 checkpoint; {} uses the stage-1 checkpoints", files[0].display(), mode.name())));
    }
    for prefix in needed {
        let Some(src) = stores.iter().find(|s| has_prefix(s, prefix)) else {
            return Err(CoopError::Validation(format!("{} mode needs `{prefix}*` parameters, not found in {}", mode.name(), ckpt.display())));
        };
        crate::model::copy_prefix(&mut ps, src, prefix)?;
    }
    Ok((model, ps))
}

fn parse_modes(mode: &str) -> Result<Vec<Mode>> {
    if mode == "all" {
        Ok(Mode::ALL.to_vec())
    } else {
        Ok(vec![mode.parse()?])
    }
}

/// Evaluates each requested mode; writes `metrics.csv`, `summary.json`,
/// per-mode tracker outputs and two plots under `out/eval`.
pub fn cmd_eval(cfg: &Config, mode: &str, ckpt: &Path, out: &Path) -> Result<Vec<MetricReport>> {
    let modes = parse_modes(mode)?;
    write_stanza(out, &format!("eval --mode {mode}"), cfg)?;
    let dir = out.join("eval");
    create_dir(&dir)?;
    let eval = eval_set(cfg)?;
    let mut reports = Vec::new();
    for m in modes {
        let (model, ps) = load_for_mode(cfg, m, ckpt)?;
        let ev = evaluate(&model, &ps, cfg, &eval, m, LinkConditions::default(), m.name())?;
        for (i, outs) in ev.outputs.iter().enumerate() {
            write_frame_outputs(&dir.join(format!("{}_eval_{i:03}.jsonl", m.name())), outs)?;
        }
        let r = &ev.report;
        println!("{:<12} AMOTA {:.3} AMOTP {:.3} mAP {:.3} IDS {} BPS {:.0}", r.label, r.amota, r.amotp, r.map, r.ids, r.bps);
        reports.push(ev.report);
    }
    write_reports_csv(&dir.join("metrics.csv"), &reports)?;
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&reports).expect("reports serialize")).map_err(|e| CoopError::io(&path, e))?;
    let labels: Vec<String> = reports.iter().map(|r| r.label.clone()).collect();
    let bars = plot::bar_chart(
        "Tracking and detection by mode",
        "score",
        &labels,
        &[("AMOTA", reports.iter().map(|r| r.amota).collect()), ("mAP", reports.iter().map(|r| r.map).collect())],
    );
    plot::write_svg(&dir.join("metrics.svg"), &bars)?;
    let pts: Vec<(String, f64, f64, f64)> = reports.iter().map(|r| (r.label.clone(), r.bps, r.amota, r.map)).collect();
    plot::write_svg(&dir.join("bps.svg"), &plot::bubble_chart("AMOTA against transmission cost (bubble: mAP)", "AMOTA", &pts))?;
    Ok(reports)
}

pub fn cmd_sweep(cfg: &Config, kind: &str, levels: Option<&str>, ckpt: &Path, out: &Path) -> Result<Vec<SweepPoint>> {
    let kind: SweepKind = kind.parse()?;
    let levels = match levels {
        Some(s) => parse_levels(s)?,
        None => kind.default_levels(),
    };
    kind.validate_levels(&levels)?;
    write_stanza(out, &format!("sweep --kind {}", kind.name()), cfg)?;
    let eval = eval_set(cfg)?;
    let points = if kind == SweepKind::History {
        history_sweep(cfg, &train_set(cfg)?, &eval, &levels)?
    } else {
        let (model, ps) = load_for_mode(cfg, Mode::Coop, ckpt)?;
        link_sweep(&model, &ps, cfg, &eval, kind, &levels)?
    };
    let dir = out.join("sweep");
    create_dir(&dir)?;
    write_sweep_csv(&dir.join(format!("{}.csv", kind.name())), &points)?;
    let series: Vec<(&str, Vec<f64>)> = kind
        .variants()
        .iter()
        .map(|&v| (v, levels.iter().map(|&l| points.iter().find(|p| p.level == l && p.variant == v).map_or(0.0, |p| p.report.amota)).collect()))
        .collect();
    let svg = plot::line_chart(&format!("AMOTA under {}", kind.name()), kind.name(), "AMOTA", &levels, &series);
    plot::write_svg(&dir.join(format!("{}.svg", kind.name())), &svg)?;
    for p in &points {
        println!("{}={} {:<14} AMOTA {:.3} mAP {:.3}", kind.name(), p.level, p.variant, p.report.amota, p.report.map);
    }
    Ok(points)
}

pub fn cmd_check(out: Option<&Path>, only: Option<&str>, perturb: Option<String>) -> Result<i32> {
    let opts = CheckOptions { perturb };
    let results = run_checks_filtered(&opts, &|name| only.is_none_or(|o| name.contains(o)));
    let report = format_report(&results);
    print!("{report}");
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("check.txt");
        std::fs::write(&path, &report).map_err(|e| CoopError::io(&path, e))?;
        let path = dir.join("check.json");
        std::fs::write(&path, serde_json::to_string_pretty(&results).expect("results serialize")).map_err(|e| CoopError::io(&path, e))?;
    }
    if results.is_empty() {
        return Err(CoopError::Validation(format!("no check matches {:?}", only.unwrap_or(""))));
    }
    Ok(if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_CHECK_FAILURE })
}
