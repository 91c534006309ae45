//! Runs the cooperative tracker over one held-out scenario and prints the
//! first output records as JSON lines, then where the boxes came from.
//!
//! `cargo run --release --example track [config.toml stage2.ckpt]`
//! Without arguments a small model is trained first.

use cooptrack::benchmark::{eval_set, observation_seed, train_set, Split};
use cooptrack::config::Config;
use cooptrack::fusion::Provenance;
use cooptrack::model::CoopModel;
use cooptrack::tracker::{run_scenario, LinkConditions, Mode, OutputRecord};
use cooptrack::training::train_pipeline;
use cooptrack_numerics::ParamStore;

fn small() -> Config {
    Config {
        d: 16,
        heads: 2,
        caa_block: 4,
        tau: 2,
        n_fresh: 30,
        train_scenarios: 4,
        eval_scenarios: 1,
        epochs_stage1: 4,
        epochs_stage2: 4,
        ..Config::default()
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cfg, model, ps) = if let [config, ckpt] = args.as_slice() {
        let cfg = Config::load(config.as_ref())?;
        let (model, _) = CoopModel::new(&cfg)?;
        (cfg.clone(), model, ParamStore::load(ckpt.as_ref())?)
    } else {
        let cfg = small();
        let p = train_pipeline(&cfg, &train_set(&cfg)?)?;
        (cfg, p.model, p.coop)
    };
    let sc = &eval_set(&cfg)?[0];
    let frames = run_scenario(&model, &ps, &cfg, sc, Mode::Coop, LinkConditions::default(), observation_seed(&cfg, Split::Eval, 0, 0))?;
    for b in frames[0].boxes.iter().take(5) {
        println!("{}", serde_json::to_string(&OutputRecord::from_box(0, b))?);
    }
    let mut counts = [0usize; 3];
    for b in frames.iter().flat_map(|f| &f.boxes) {
        counts[b.provenance as usize] += 1;
    }
    let bytes: usize = frames.iter().map(|f| f.diagnostics.message_bytes).sum();
    println!(
        "{} frames: {} vehicle-only, {} infrastructure-only, {} fused boxes; {:.0} message bytes per frame",
        frames.len(),
        counts[Provenance::Vehicle as usize],
        counts[Provenance::Infra as usize],
        counts[Provenance::Fused as usize],
        bytes as f64 / frames.len() as f64
    );
    Ok(())
}
