//! Generates a scenario and prints per-agent visibility statistics.

use cooptrack::config::Config;
use cooptrack::geometry::CAR;
use cooptrack::sim::{generate_scenario, observe, AgentKind, ScenarioSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config::default();
    let spec = ScenarioSpec::from_config(&config)?;
    let (mut coop, mut veh, mut infra_only, mut dets) = (0usize, 0usize, 0usize, 0usize);
    let n_scen = 10;
    for seed in 0..n_scen {
        let sc = generate_scenario(&spec, seed)?;
        for t in 0..sc.n_frames() {
            let v: Vec<u64> = sc.visible_gt(AgentKind::Vehicle, t).iter().filter(|g| g.1.class_label == CAR).map(|g| g.0).collect();
            let c = sc.coop_gt(t);
            let cars: Vec<_> = c.iter().filter(|g| g.1.class_label == CAR).collect();
            coop += cars.len();
            veh += v.len();
            infra_only += cars.iter().filter(|g| !v.contains(&g.0)).count();
            dets += observe(&sc, AgentKind::Vehicle, t, seed).len() + observe(&sc, AgentKind::Infrastructure, t, seed).len();
        }
    }
    let frames = (n_scen as usize * spec.n_frames) as f64;
    println!("cars per frame: cooperative {:.1}, vehicle-visible {:.1}, infrastructure-only {:.1}", coop as f64 / frames, veh as f64 / frames, infra_only as f64 / frames);
    println!("detections per frame (both agents): {:.1}", dets as f64 / frames);
    Ok(())
}
