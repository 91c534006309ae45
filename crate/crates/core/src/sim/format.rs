//! Line-delimited scenario files: a header line carrying the spec and seed,
//! then one JSON object per (frame, agent) with detections and ground truth.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_scenario, observe, AgentKind, Scenario, ScenarioSpec};
use crate::error::{CoopError, Result};
use crate::geometry::Box3D;

#[derive(Serialize, Deserialize)]
struct Header {
    record: String,
    format_version: u32,
    seed: u64,
    spec: ScenarioSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: Box3D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub latent: Vec<f64>,
    pub gt_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub record: String,
    pub frame: usize,
    pub agent: AgentKind,
    /// Agent-to-world rotation rows and translation.
    pub pose_r: [[f64; 3]; 3],
    pub pose_t: [f64; 3],
    pub detections: Vec<DetectionRecord>,
    /// Visible ground truth in the agent frame.
    pub gt: Vec<GtRecord>,
}

fn parse_err(path: &Path, line: usize, e: impl std::fmt::Display) -> CoopError {
    CoopError::Parse {
        context: format!("{}:{}", path.display(), line),
        message: e.to_string(),
    }
}

pub fn write_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CoopError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CoopError::io(path, e);
    let header = Header {
        record: "header".into(),
        format_version: 1,
        seed: scenario.seed,
        spec: scenario.spec.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for t in 0..scenario.n_frames() {
        for kind in [AgentKind::Vehicle, AgentKind::Infrastructure] {
            let pose = scenario.agent(kind).poses[t];
            let rec = FrameRecord {
                record: "frame".into(),
                frame: t,
                agent: kind,
                pose_r: pose.r,
                pose_t: pose.t,
                detections: observe(scenario, kind, t, scenario.seed)
                    .into_iter()
                    .map(|d| DetectionRecord {
                        bbox: d.bbox,
                        latent: d.latent,
                        gt_id: d.gt_id,
                    })
                    .collect(),
                gt: scenario
                    .visible_gt(kind, t)
                    .into_iter()
                    .map(|(id, bbox)| GtRecord { id, bbox })
                    .collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Rebuilds the scenario from the header (generation is deterministic).
pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let file = std::fs::File::open(path).map_err(|e| CoopError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first).map_err(|e| CoopError::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(path, 1, e))?;
    if header.record != "header" {
        return Err(parse_err(path, 1, "first record must be the header"));
    }
    generate_scenario(&header.spec, header.seed)
}

pub fn read_frame_records(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = std::fs::File::open(path).map_err(|e| CoopError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(|e| CoopError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn file_round_trip() {
        let mut spec = ScenarioSpec::from_config(&Config::default()).unwrap();
        spec.n_frames = 4;
        let sc = generate_scenario(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_scenario(&p, &sc).unwrap();
        assert_eq!(read_scenario(&p).unwrap(), sc);
        let recs = read_frame_records(&p).unwrap();
        assert_eq!(recs.len(), 8);
        assert_eq!(recs[2].frame, 1);
        assert_eq!(recs[3].agent, AgentKind::Infrastructure);
        let dets = observe(&sc, AgentKind::Vehicle, 1, 3);
        assert_eq!(recs[2].detections.len(), dets.len());
    }

    #[test]
    fn unknown_fields_are_tolerated() {
        let line = r#"{"record":"frame","frame":0,"agent":"vehicle","pose_r":[[1,0,0],[0,1,0],[0,0,1]],"pose_t":[0,0,0],"detections":[],"gt":[],"future_field":5}"#;
        let r: FrameRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.frame, 0);
    }
}
