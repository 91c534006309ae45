//! Benchmark evaluation: tracking and detection metrics, transmission
//! cost, and robustness sweeps over link conditions and history length.

mod association;
mod metrics;

pub use association::{association_quality, score_record, AssociationQuality, PairCounts};

pub use metrics::{
    amota, average_precision, clear_mot, map_detection, match_frame, recall_targets, DetectionMetrics, FrameMatch, MotCounts, PredBox, Sequence,
    TrackingMetrics, AP_THRESHOLDS, MIN_PRECISION, MIN_RECALL, MOSTLY_LOST, MOSTLY_TRACKED, RECALL_POINTS, TP_ERROR_THRESHOLD,
};

use std::path::Path;
use std::str::FromStr;

use cooptrack_numerics::ParamStore;
use serde::{Deserialize, Serialize};

use crate::benchmark::{observation_seed, Split};
use crate::config::Config;
use crate::error::{CoopError, Result};
use crate::model::CoopModel;
use crate::sim::Scenario;
use crate::tracker::{run_scenario, FrameOutput, LinkConditions, Mode};
use crate::training::train_pipeline;

/// Side length, in cells, of the dense BEV grid used as the
/// transmission-cost reference.
pub const DENSE_GRID_CELLS: usize = 200;

/// Mean bytes per frame times the frame rate. No frames costs nothing.
pub fn transmission_cost(bytes_per_frame: &[usize], frame_rate: f64) -> f64 {
    if bytes_per_frame.is_empty() {
        return 0.0;
    }
    bytes_per_frame.iter().sum::<usize>() as f64 / bytes_per_frame.len() as f64 * frame_rate
}

/// One frame of a dense `200 × 200 × d` grid of 32-bit reals.
pub fn dense_grid_bytes(d: usize) -> usize {
    DENSE_GRID_CELLS * DENSE_GRID_CELLS * d * 4
}

/// Flat per-run summary, one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub amota: f64,
    pub amota_raw: f64,
    pub amotp: f64,
    pub mota: f64,
    pub ids: usize,
    pub mt: usize,
    pub ml: usize,
    pub gt_tracks: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_gt: usize,
    pub map: f64,
    pub ap_0_5: f64,
    pub ap_1: f64,
    pub ap_2: f64,
    pub ap_4: f64,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub bps: f64,
}

impl MetricReport {
    pub fn new(label: &str, t: &TrackingMetrics, d: &DetectionMetrics, bps: f64) -> Self {
        Self {
            label: label.to_string(),
            amota: t.amota,
            amota_raw: t.amota_raw,
            amotp: t.amotp,
            mota: t.mota,
            ids: t.best.ids,
            mt: t.best.mostly_tracked,
            ml: t.best.mostly_lost,
            gt_tracks: t.best.gt_tracks,
            tp: t.best.tp,
            fp: t.best.fp,
            fn_: t.best.fn_,
            n_gt: t.best.n_gt,
            map: d.map,
            ap_0_5: d.ap[0],
            ap_1: d.ap[1],
            ap_2: d.ap[2],
            ap_4: d.ap[3],
            ate: d.ate,
            ase: d.ase,
            aoe: d.aoe,
            ave: d.ave,
            bps,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CoopError {
    CoopError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_reports_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in reports {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CoopError::io(path, e))
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|x| x.map_err(|e| csv_err(path, e))).collect()
}

/// Predictions and cooperative ground truth of one scenario, restricted
/// to the evaluated classes.
pub fn sequence_from_outputs(sc: &Scenario, outputs: &[FrameOutput], classes: &[usize]) -> Sequence {
    let preds = outputs
        .iter()
        .map(|f| f.boxes.iter().map(|b| PredBox { id: b.id, bbox: b.bbox }).collect())
        .collect();
    let gt = (0..sc.n_frames()).map(|t| sc.coop_gt(t)).collect();
    Sequence { preds, gt }.filter_classes(classes)
}

/// Scores already computed tracker outputs, one list per scenario.
pub fn score_outputs(cfg: &Config, scenarios: &[Scenario], outputs: &[Vec<FrameOutput>], label: &str) -> Result<MetricReport> {
    if scenarios.len() != outputs.len() {
        return Err(CoopError::Validation(format!("{} scenarios but {} output sets", scenarios.len(), outputs.len())));
    }
    let seqs: Vec<Sequence> = scenarios.iter().zip(outputs).map(|(sc, o)| sequence_from_outputs(sc, o, &cfg.eval_classes)).collect();
    let tracking = amota(&seqs, cfg.eval_radius)?;
    let detection = map_detection(&seqs)?;
    let bytes: Vec<usize> = outputs.iter().flatten().map(|f| f.diagnostics.message_bytes).collect();
    Ok(MetricReport::new(label, &tracking, &detection, transmission_cost(&bytes, cfg.frame_rate)))
}

/// A benchmark run and its score.
pub struct Evaluation {
    pub report: MetricReport,
    pub outputs: Vec<Vec<FrameOutput>>,
}

/// Runs the tracker over every evaluation scenario and scores it.
pub fn evaluate(model: &CoopModel, ps: &ParamStore, cfg: &Config, scenarios: &[Scenario], mode: Mode, link: LinkConditions, label: &str) -> Result<Evaluation> {
    let outputs = scenarios
        .iter()
        .enumerate()
        .map(|(i, sc)| run_scenario(model, ps, cfg, sc, mode, link, observation_seed(cfg, Split::Eval, i, 0)))
        .collect::<Result<Vec<_>>>()?;
    let report = score_outputs(cfg, scenarios, &outputs, label)?;
    Ok(Evaluation { report, outputs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Latency,
    RotationNoise,
    NoInfra,
    History,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Latency => "latency",
            SweepKind::RotationNoise => "rotation_noise",
            SweepKind::NoInfra => "no_infra",
            SweepKind::History => "history",
        }
    }

    /// Levels used when none are given: milliseconds, radians, on/off, or
    /// history frames.
    pub fn default_levels(self) -> Vec<f64> {
        match self {
            SweepKind::Latency => vec![0.0, 100.0, 300.0, 500.0],
            SweepKind::RotationNoise => vec![0.0, 0.05, 0.1, 0.2],
            SweepKind::NoInfra => vec![0.0, 1.0],
            SweepKind::History => vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        }
    }

    /// Paired variants run at every level.
    pub fn variants(self) -> &'static [&'static str] {
        match self {
            SweepKind::Latency => &["uncompensated", "compensated"],
            SweepKind::RotationNoise => &["caa_only", "global"],
            SweepKind::NoInfra | SweepKind::History => &["coop"],
        }
    }

    pub fn validate_levels(self, levels: &[f64]) -> Result<()> {
        if levels.is_empty() {
            return Err(CoopError::Validation(format!("{} sweep needs at least one level", self.name())));
        }
        for &l in levels {
            if !(l.is_finite() && l >= 0.0) {
                return Err(CoopError::Validation(format!("{} level {l} must be finite and non-negative", self.name())));
            }
            if self == SweepKind::History && l.fract() != 0.0 {
                return Err(CoopError::Validation(format!("history level {l} must be a whole number of frames")));
            }
        }
        Ok(())
    }
}

impl FromStr for SweepKind {
    type Err = CoopError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency" => Ok(SweepKind::Latency),
            "rotation_noise" => Ok(SweepKind::RotationNoise),
            "no_infra" => Ok(SweepKind::NoInfra),
            "history" => Ok(SweepKind::History),
            other => Err(CoopError::Validation(format!("unknown sweep kind {other:?} (latency, rotation_noise, no_infra, history)"))),
        }
    }
}

/// Parses a comma-separated level list.
pub fn parse_levels(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<f64>().map_err(|_| CoopError::Validation(format!("bad level {x:?}"))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kind: SweepKind,
    pub level: f64,
    pub variant: String,
    pub report: MetricReport,
}

/// Link conditions for one sweep level and variant.
pub fn link_for(kind: SweepKind, level: f64, variant: &str, frame_rate: f64, seed: u64) -> LinkConditions {
    let mut link = LinkConditions::default();
    match kind {
        SweepKind::Latency => {
            link.delay_frames = (level / 1000.0 * frame_rate).round() as usize;
            link.compensate = variant == "compensated";
        }
        SweepKind::RotationNoise => {
            link.rotation_noise = level;
            link.noise_global = variant == "global";
            link.noise_seed = seed;
        }
        SweepKind::NoInfra => link.drop_infra = level > 0.0,
        SweepKind::History => {}
    }
    link
}

/// Re-runs the cooperative benchmark under perturbed link conditions, one
/// run per level and variant. Levels run on separate threads; results come
/// back ordered by level then variant.
pub fn link_sweep(model: &CoopModel, ps: &ParamStore, cfg: &Config, scenarios: &[Scenario], kind: SweepKind, levels: &[f64]) -> Result<Vec<SweepPoint>> {
    kind.validate_levels(levels)?;
    if kind == SweepKind::History {
        return Err(CoopError::Validation("history sweeps retrain; use history_sweep".into()));
    }
    let runs: Vec<Result<Vec<SweepPoint>>> = std::thread::scope(|s| {
        let handles: Vec<_> = levels
            .iter()
            .map(|&level| {
                s.spawn(move || {
                    kind.variants()
                        .iter()
                        .map(|&variant| {
                            let link = link_for(kind, level, variant, cfg.frame_rate, cfg.seed);
                            let label = format!("{}={level}/{variant}", kind.name());
                            let ev = evaluate(model, ps, cfg, scenarios, Mode::Coop, link, &label)?;
                            Ok(SweepPoint {
                                kind,
                                level,
                                variant: variant.to_string(),
                                report: ev.report,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut out = Vec::new();
    for r in runs {
        out.extend(r?);
    }
    Ok(out)
}

/// Retrains the full pipeline at each history length and evaluates the
/// cooperative tracker.
pub fn history_sweep(cfg: &Config, train: &[Scenario], eval: &[Scenario], levels: &[f64]) -> Result<Vec<SweepPoint>> {
    SweepKind::History.validate_levels(levels)?;
    let runs: Vec<Result<SweepPoint>> = std::thread::scope(|s| {
        let handles: Vec<_> = levels
            .iter()
            .map(|&level| {
                s.spawn(move || {
                    let c = Config { tau: level as usize, ..cfg.clone() };
                    let p = train_pipeline(&c, train)?;
                    let label = format!("history={level}");
                    let ev = evaluate(&p.model, &p.coop, &c, eval, Mode::Coop, LinkConditions::default(), &label)?;
                    Ok(SweepPoint {
                        kind: SweepKind::History,
                        level,
                        variant: "coop".into(),
                        report: ev.report,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    runs.into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct SweepRow {
    kind: SweepKind,
    level: f64,
    variant: String,
    amota: f64,
    amota_raw: f64,
    amotp: f64,
    mota: f64,
    map: f64,
    ids: usize,
    bps: f64,
}

pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in points {
        w.serialize(SweepRow {
            kind: p.kind,
            level: p.level,
            variant: p.variant.clone(),
            amota: p.report.amota,
            amota_raw: p.report.amota_raw,
            amotp: p.report.amotp,
            mota: p.report.mota,
            map: p.report.map,
            ids: p.report.ids,
            bps: p.report.bps,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CoopError::io(path, e))
}

#[cfg(test)]
mod tests;
