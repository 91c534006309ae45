//! Supervision targets: ground-truth binding of decoded instances and
//! cross-agent association labels.

use cooptrack_numerics::{hungarian, Matrix};

use crate::geometry::Box3D;

/// L1 distance over centre and size.
pub fn box_l1(a: &Box3D, b: &Box3D) -> f64 {
    (a.x - b.x).abs() + (a.y - b.y).abs() + (a.z - b.z).abs() + (a.w - b.w).abs() + (a.l - b.l).abs() + (a.h - b.h).abs()
}

const OUT_OF_GATE: f64 = 1e6;

/// Minimum-L1 one-to-one assignment of `preds` to `gts`, restricted to
/// pairs whose centres are within `gate` metres. Returns the gt index for
/// every prediction.
pub fn gated_assignment(preds: &[&Box3D], gts: &[&Box3D], gate: f64) -> Vec<Option<usize>> {
    let mut cost = Matrix::zeros(preds.len(), gts.len());
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            cost[(i, j)] = if p.center_distance(g) <= gate { box_l1(p, g) } else { OUT_OF_GATE };
        }
    }
    let mut out = vec![None; preds.len()];
    for (i, j) in hungarian(&cost).pairs {
        if cost[(i, j)] < OUT_OF_GATE {
            out[i] = Some(j);
        }
    }
    out
}

/// Instances to supervise: `bound` is the ground-truth id a track slot was
/// bound to last frame.
#[derive(Clone, Copy, Debug)]
pub struct SlotInfo {
    pub bound: Option<u64>,
    pub pred: Box3D,
}

/// Bound slots keep their ground truth while it is present; the rest are
/// matched to the unclaimed ground truth. Returns a gt index per slot
/// (`None` means background).
pub fn gt_match(slots: &[SlotInfo], gt: &[(u64, Box3D)], gate: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; slots.len()];
    let mut claimed = vec![false; gt.len()];
    for (k, s) in slots.iter().enumerate() {
        if let Some(id) = s.bound {
            if let Some(j) = gt.iter().position(|g| g.0 == id) {
                if !claimed[j] {
                    claimed[j] = true;
                    out[k] = Some(j);
                }
            }
        }
    }
    let free_slots: Vec<usize> = (0..slots.len()).filter(|&k| out[k].is_none()).collect();
    let free_gt: Vec<usize> = (0..gt.len()).filter(|&j| !claimed[j]).collect();
    let preds: Vec<&Box3D> = free_slots.iter().map(|&k| &slots[k].pred).collect();
    let gts: Vec<&Box3D> = free_gt.iter().map(|&j| &gt[j].1).collect();
    for (a, m) in gated_assignment(&preds, &gts, gate).into_iter().enumerate() {
        if let Some(b) = m {
            out[free_slots[a]] = Some(free_gt[b]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationLabels {
    /// `N_V × N_I`, row-major.
    pub labels: Vec<Vec<Label>>,
    /// Ground-truth id each vehicle instance matched.
    pub vehicle_gt: Vec<Option<u64>>,
    pub infra_gt: Vec<Option<u64>>,
}

impl AssociationLabels {
    pub fn positives(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, row) in self.labels.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                if *l == Label::Positive {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Each agent's predictions are matched to the ground truth on L1 cost
/// within `gate`; a cell is positive when both sides matched the same id.
pub fn gen_assoc_labels(vehicle: &[Box3D], infra: &[Box3D], gt: &[(u64, Box3D)], gate: f64) -> AssociationLabels {
    let gts: Vec<&Box3D> = gt.iter().map(|g| &g.1).collect();
    let ids = |preds: &[Box3D]| -> Vec<Option<u64>> {
        let refs: Vec<&Box3D> = preds.iter().collect();
        gated_assignment(&refs, &gts, gate).into_iter().map(|m| m.map(|j| gt[j].0)).collect()
    };
    let vehicle_gt = ids(vehicle);
    let infra_gt = ids(infra);
    let labels = vehicle_gt
        .iter()
        .map(|v| {
            infra_gt
                .iter()
                .map(|i| match (v, i) {
                    (Some(a), Some(b)) if a == b => Label::Positive,
                    _ => Label::Negative,
                })
                .collect()
        })
        .collect();
    AssociationLabels { labels, vehicle_gt, infra_gt }
}
