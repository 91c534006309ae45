//! Cross-agent association precision and recall of the learned matcher
//! next to a center-distance Hungarian, as detector position noise grows.
//!
//! `cargo run --release --example association [config.toml stage2.ckpt]`
//! Without arguments a small model is trained first.

use cooptrack::benchmark::{eval_set, train_set};
use cooptrack::config::Config;
use cooptrack::eval::association_quality;
use cooptrack::model::CoopModel;
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
    println!("{:>9}  {:>22}  {:>22}", "sigma_pos", "learned P / R / F1", "distance P / R / F1");
    for sigma in [0.0, 0.25, 0.5, 1.0] {
        let c = Config { sigma_pos: sigma, ..cfg.clone() };
        let q = association_quality(&model, &ps, &c, &eval_set(&c)?)?;
        let fmt = |p: &cooptrack::eval::PairCounts| format!("{:.3} / {:.3} / {:.3}", p.precision(), p.recall(), p.f1());
        println!("{sigma:>9}  {:>22}  {:>22}", fmt(&q.learned), fmt(&q.distance));
    }
    Ok(())
}
