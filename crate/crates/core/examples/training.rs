//! Two-stage training on a reduced benchmark, printing the mean loss of
//! every epoch. Single-agent stage first, then the cooperative stage.

use cooptrack::benchmark::train_set;
use cooptrack::config::Config;
use cooptrack::training::{train_pipeline, StepLog};

fn epoch_means(logs: &[StepLog], epochs: usize) -> Vec<f64> {
    let per = (logs.len() / epochs.max(1)).max(1);
    logs.chunks(per).map(|c| c.iter().map(|s| s.total).sum::<f64>() / c.len() as f64).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = Config {
        d: 16,
        heads: 2,
        caa_block: 4,
        tau: 2,
        n_fresh: 30,
        train_scenarios: 4,
        epochs_stage1: 4,
        epochs_stage2: 4,
        ..Config::default()
    };
    let p = train_pipeline(&cfg, &train_set(&cfg)?)?;
    for (name, logs, epochs) in [
        ("vehicle", &p.logs.stage1_vehicle, cfg.epochs_stage1),
        ("infrastructure", &p.logs.stage1_infra, cfg.epochs_stage1),
        ("cooperative", &p.logs.stage2, cfg.epochs_stage2),
    ] {
        let means: Vec<String> = epoch_means(logs, epochs).iter().map(|m| format!("{m:.3}")).collect();
        println!("{name:<15} {} steps, loss per epoch: {}", logs.len(), means.join(" "));
    }
    Ok(())
}
