//! Per-frame tracker output and its line-delimited record form.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoopError, Result};
use crate::fusion::Provenance;
use crate::geometry::Box3D;

#[derive(Clone, Debug, PartialEq)]
pub struct OutputBox {
    pub id: u64,
    pub bbox: Box3D,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    /// Vehicle instances processed this frame.
    pub n_vehicle: usize,
    /// Instances in the message that arrived.
    pub n_sent: usize,
    /// Message instances inside the vehicle range.
    pub n_used: usize,
    pub n_matched: usize,
    pub message_bytes: usize,
    pub mean_matched_affinity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub frame: usize,
    pub boxes: Vec<OutputBox>,
    pub diagnostics: FrameDiagnostics,
}

/// One output box per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub frame: usize,
    pub id: u64,
    pub class: usize,
    /// x, y, z, w, l, h, theta, vx, vy.
    #[serde(rename = "box")]
    pub bbox: [f64; 9],
    pub score: f64,
    pub provenance: Provenance,
}

impl OutputRecord {
    pub fn from_box(frame: usize, b: &OutputBox) -> Self {
        Self {
            frame,
            id: b.id,
            class: b.bbox.class_label,
            bbox: b.bbox.to_array(),
            score: b.bbox.score,
            provenance: b.provenance,
        }
    }

    pub fn to_box(&self) -> OutputBox {
        OutputBox {
            id: self.id,
            bbox: Box3D::from_array(self.bbox, self.class, self.score),
            provenance: self.provenance,
        }
    }
}

pub fn write_frame_outputs(path: &Path, frames: &[FrameOutput]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| CoopError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for fr in frames {
        for b in &fr.boxes {
            let line = serde_json::to_string(&OutputRecord::from_box(fr.frame, b)).map_err(|e| CoopError::Runtime(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| CoopError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CoopError::io(path, e))
}

/// Reads records back into `n_frames` outputs; frames without boxes come
/// back empty. Diagnostics are not stored in the records.
pub fn read_frame_outputs(path: &Path, n_frames: usize) -> Result<Vec<FrameOutput>> {
    let f = std::fs::File::open(path).map_err(|e| CoopError::io(path, e))?;
    let mut frames: Vec<FrameOutput> = (0..n_frames)
        .map(|frame| FrameOutput {
            frame,
            boxes: Vec::new(),
            diagnostics: FrameDiagnostics::default(),
        })
        .collect();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CoopError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OutputRecord = serde_json::from_str(&line).map_err(|e| CoopError::Parse {
            context: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        let slot = frames.get_mut(rec.frame).ok_or_else(|| CoopError::Validation(format!("{}:{}: frame {} beyond {n_frames}", path.display(), i + 1, rec.frame)))?;
        slot.boxes.push(rec.to_box());
    }
    Ok(frames)
}
