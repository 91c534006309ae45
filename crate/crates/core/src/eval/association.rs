//! Cross-agent association quality against ground-truth pairings.

use cooptrack_numerics::ParamStore;
use serde::{Deserialize, Serialize};

use crate::benchmark::{observation_seed, Split};
use crate::config::Config;
use crate::error::Result;
use crate::model::CoopModel;
use crate::sim::Scenario;
use crate::tracker::{distance_match, AssociationRecord, FrameInput, LinkConditions, Mode, Tracker, TrackerParams};
use crate::training::gen_assoc_labels;

/// Pair counts for one matcher. A true pair links a vehicle and an
/// infrastructure instance bound to the same object.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub correct: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl PairCounts {
    /// Empty prediction sets count as perfectly precise.
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.actual == 0 {
            1.0
        } else {
            self.correct as f64 / self.actual as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, predicted: &[(usize, usize)], actual: &[(usize, usize)]) {
        self.predicted += predicted.len();
        self.actual += actual.len();
        self.correct += predicted.iter().filter(|p| actual.contains(p)).count();
    }
}

/// The learned matcher next to a center-distance Hungarian on the same
/// decoded boxes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationQuality {
    pub learned: PairCounts,
    pub distance: PairCounts,
    pub frames: usize,
}

/// Scores one recorded frame against the ground truth of `sc`.
pub fn score_record(quality: &mut AssociationQuality, rec: &AssociationRecord, sc: &Scenario, label_gate: f64, distance_gate: f64) {
    let labels = gen_assoc_labels(&rec.vehicle_boxes, &rec.infra_boxes, &sc.coop_gt(rec.frame), label_gate);
    let actual = labels.positives();
    let learned: Vec<(usize, usize)> = rec.matches.pairs.iter().map(|&(i, j, _)| (i, j)).collect();
    quality.learned.add(&learned, &actual);
    quality.distance.add(&distance_match(&rec.vehicle_boxes, &rec.infra_boxes, distance_gate), &actual);
    quality.frames += 1;
}

/// Runs the cooperative tracker over `scenarios` and scores every fused
/// frame. The distance baseline uses the late-fusion merge gate.
pub fn association_quality(model: &CoopModel, ps: &ParamStore, cfg: &Config, scenarios: &[Scenario]) -> Result<AssociationQuality> {
    let params = TrackerParams::from_config(cfg);
    let gate = params.late_gate;
    let mut quality = AssociationQuality::default();
    for (i, sc) in scenarios.iter().enumerate() {
        let obs = observation_seed(cfg, Split::Eval, i, 0);
        let mut tracker = Tracker::new(Mode::Coop, params.clone(), cfg.tau, LinkConditions::default());
        tracker.association_log = Some(Vec::new());
        for t in 0..sc.n_frames() {
            tracker.step(model, ps, &FrameInput::from_scenario(sc, t, obs))?;
        }
        for rec in tracker.association_log.take().unwrap_or_default() {
            score_record(&mut quality, &rec, sc, cfg.label_gate, gate);
        }
    }
    Ok(quality)
}
