//! Trains both stages on the synthetic benchmark and compares the
//! cooperative tracker with the no-fusion and late-fusion baselines.
//!
//! `cargo run --release --example benchmark [config.toml]`

use std::time::Instant;

use cooptrack::benchmark::{eval_set, train_set};
use cooptrack::config::Config;
use cooptrack::eval::evaluate;
use cooptrack::tracker::{LinkConditions, Mode};
use cooptrack::training::train_pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = match std::env::args().nth(1) {
        Some(path) => Config::load(path.as_ref())?,
        None => Config::default(),
    };
    let start = Instant::now();
    let train = train_set(&config)?;
    let eval = eval_set(&config)?;
    let p = train_pipeline(&config, &train)?;
    let last = |l: &[cooptrack::training::StepLog]| l.last().map_or(f64::NAN, |s| s.total);
    println!(
        "trained in {:.0}s (final loss: vehicle {:.3}, infra {:.3}, coop {:.3})",
        start.elapsed().as_secs_f64(),
        last(&p.logs.stage1_vehicle),
        last(&p.logs.stage1_infra),
        last(&p.logs.stage2)
    );
    println!("{:<12} {:>7} {:>7} {:>7} {:>5} {:>10}", "mode", "AMOTA", "AMOTP", "mAP", "IDS", "BPS");
    for mode in Mode::ALL {
        let ps = if mode == Mode::Coop { &p.coop } else { &p.single };
        let r = evaluate(&p.model, ps, &config, &eval, mode, LinkConditions::default(), mode.name())?.report;
        println!("{:<12} {:>7.3} {:>7.3} {:>7.3} {:>5} {:>10.0}", mode.name(), r.amota, r.amotp, r.map, r.ids, r.bps);
    }
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
