//! Tracking accuracy as the infrastructure link gets slower, with and
//! without motion compensation of the stale messages. Writes the curve as
//! CSV and SVG next to the working directory.
//!
//! `cargo run --release --example latency_sweep [config.toml stage2.ckpt]`
//! Without arguments a small model is trained first.

use cooptrack::benchmark::{eval_set, train_set};
use cooptrack::config::Config;
use cooptrack::eval::{link_sweep, write_sweep_csv, SweepKind};
use cooptrack::model::CoopModel;
use cooptrack::plot::{line_chart, write_svg};
use cooptrack::training::train_pipeline;
use cooptrack_numerics::ParamStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cfg, model, ps) = if let [config, ckpt] = args.as_slice() {
        let cfg = Config::load(config.as_ref())?;
        let (model, _) = CoopModel::new(&cfg)?;
        (cfg.clone(), model, ParamStore::load(ckpt.as_ref())?)
    } else {
        let cfg = Config {
            d: 16,
            heads: 2,
            caa_block: 4,
            tau: 2,
            n_fresh: 30,
            train_scenarios: 4,
            eval_scenarios: 3,
            epochs_stage1: 4,
            epochs_stage2: 4,
            ..Config::default()
        };
        let p = train_pipeline(&cfg, &train_set(&cfg)?)?;
        (cfg, p.model, p.coop)
    };
    let levels = SweepKind::Latency.default_levels();
    let points = link_sweep(&model, &ps, &cfg, &eval_set(&cfg)?, SweepKind::Latency, &levels)?;
    let mut series = Vec::new();
    for &variant in SweepKind::Latency.variants() {
        let ys: Vec<f64> = points.iter().filter(|p| p.variant == variant).map(|p| p.report.amota).collect();
        println!("{variant:<14} {}", ys.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("  "));
        series.push((variant, ys));
    }
    write_sweep_csv("latency_sweep.csv".as_ref(), &points)?;
    write_svg("latency_sweep.svg".as_ref(), &line_chart("AMOTA under link latency", "latency (ms)", "AMOTA", &levels, &series))?;
    println!("wrote latency_sweep.csv and latency_sweep.svg");
    Ok(())
}
