//! Track bookkeeping: query construction, selection, constant-velocity
//! propagation and id management.

use cooptrack_numerics::{hungarian, Matrix};
use rand::Rng;

use crate::geometry::{Box3D, Pose};
use crate::mdfe::{QuerySet, SlotKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    /// Query feature carried to the next frame.
    pub feature: Vec<f64>,
    pub ref_point: [f64; 3],
    /// Last decoded box, already moved forward by one frame.
    pub prior: Box3D,
    pub score: f64,
    pub age: usize,
    pub misses: u32,
    pub class_label: usize,
    /// Ground-truth binding, used only while training.
    pub gt_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub next_id: u64,
}

impl Default for TrackSet {
    fn default() -> Self {
        Self {
            tracks: Vec::new(),
            next_id: 1,
        }
    }
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.tracks.iter().map(|t| t.id).collect()
    }

    /// Moves every track from the previous agent frame into the current
    /// one. `motion` maps previous-frame coordinates to current ones.
    pub fn compensate(&mut self, motion: &Pose) {
        for t in &mut self.tracks {
            t.ref_point = motion.apply(&t.ref_point);
            t.prior = motion.apply_box(&t.prior);
        }
    }
}

/// `n` fresh reference points on a grid over `range = [x0, x1, y0, y1]`,
/// with a seeded sub-cell offset.
pub fn fresh_points(n: usize, range: &[f64; 4], seed: u64) -> Matrix {
    let mut out = Matrix::zeros(n, 3);
    if n == 0 {
        return out;
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (cw, ch) = ((range[1] - range[0]) / cols as f64, (range[3] - range[2]) / rows as f64);
    let mut rng = crate::sim::rng_for(&[seed, 0xF8E5]);
    let (ox, oy): (f64, f64) = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        out[(i, 0)] = range[0] + (c as f64 + ox) * cw;
        out[(i, 1)] = range[2] + (r as f64 + oy) * ch;
    }
    out
}

/// Track slots first, in track order, then `n_fresh` fresh slots sharing
/// `fresh_feature`.
pub fn init_queries(tracks: &TrackSet, fresh_feature: &[f64], points: &Matrix) -> QuerySet {
    let d = fresh_feature.len();
    let n_fresh = points.rows();
    let n = tracks.len() + n_fresh;
    let mut features = Matrix::zeros(n, d);
    let mut ref_points = Matrix::zeros(n, 3);
    let mut kinds = Vec::with_capacity(n);
    let mut prior_boxes = Vec::with_capacity(n);
    for (i, t) in tracks.tracks.iter().enumerate() {
        features.row_mut(i).copy_from_slice(&t.feature);
        ref_points.row_mut(i).copy_from_slice(&t.ref_point);
        kinds.push(SlotKind::Track(t.id));
        prior_boxes.push(Some(t.prior));
    }
    for j in 0..n_fresh {
        let i = tracks.len() + j;
        features.row_mut(i).copy_from_slice(fresh_feature);
        ref_points.row_mut(i).copy_from_slice(points.row(j));
        kinds.push(SlotKind::Fresh);
        prior_boxes.push(None);
    }
    QuerySet {
        features,
        ref_points,
        kinds,
        prior_boxes,
    }
}

/// One decoded instance offered to the selection step.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub id: Option<u64>,
    pub bbox: Box3D,
    pub feature: Vec<f64>,
    pub keep: bool,
    pub gt_id: Option<u64>,
}

/// `p + (vx, vy, 0)·dt`.
pub fn propagate_point(p: [f64; 3], vx: f64, vy: f64, dt: f64) -> [f64; 3] {
    [p[0] + vx * dt, p[1] + vy * dt, p[2]]
}

fn propagate_box(b: &Box3D, dt: f64) -> Box3D {
    Box3D {
        x: b.x + b.vx * dt,
        y: b.y + b.vy * dt,
        ..*b
    }
}

/// Updates `tracks` from one frame of candidates and returns the id every
/// candidate ends up with. Kept candidates refresh or spawn a track; a
/// tracked candidate that is not kept accrues a miss and is dropped once
/// misses exceed `patience`. Tracks absent from the candidates also miss.
pub fn select_and_propagate(tracks: &mut TrackSet, cands: &[Candidate], dt: f64, patience: u32) -> Vec<Option<u64>> {
    assert!(dt > 0.0, "propagation step must be positive");
    let mut assigned = vec![None; cands.len()];
    let mut seen = std::collections::BTreeSet::new();
    let mut spawned = Vec::new();
    for (k, c) in cands.iter().enumerate() {
        let refreshed = |t: &mut Track| {
            t.feature.clone_from(&c.feature);
            t.ref_point = propagate_point(c.bbox.center(), c.bbox.vx, c.bbox.vy, dt);
            t.prior = propagate_box(&c.bbox, dt);
            t.score = c.bbox.score;
            t.class_label = c.bbox.class_label;
            t.age += 1;
        };
        match c.id {
            Some(id) => {
                seen.insert(id);
                let Some(t) = tracks.tracks.iter_mut().find(|t| t.id == id) else {
                    continue;
                };
                refreshed(t);
                if c.keep {
                    t.misses = 0;
                    t.gt_id = c.gt_id;
                    assigned[k] = Some(id);
                } else {
                    t.misses += 1;
                    if t.misses <= patience {
                        assigned[k] = Some(id);
                    }
                }
            }
            None if c.keep => {
                let id = tracks.next_id;
                tracks.next_id += 1;
                let mut t = Track {
                    id,
                    feature: Vec::new(),
                    ref_point: [0.0; 3],
                    prior: c.bbox,
                    score: 0.0,
                    age: 0,
                    misses: 0,
                    class_label: 0,
                    gt_id: c.gt_id,
                };
                refreshed(&mut t);
                spawned.push(t);
                assigned[k] = Some(id);
            }
            None => {}
        }
    }
    for t in &mut tracks.tracks {
        if !seen.contains(&t.id) {
            t.misses += 1;
        }
    }
    tracks.tracks.retain(|t| t.misses <= patience);
    tracks.tracks.extend(spawned);
    assigned
}

/// Box wire size for late fusion: nine 32-bit box numbers, a 32-bit score
/// and an 8-bit class id.
pub const LATE_BOX_BYTES: usize = 9 * 4 + 4 + 1;

/// Minimum total center distance pairing, keeping pairs within `gate`.
/// Both sides must already share a frame.
pub fn distance_match(a: &[Box3D], b: &[Box3D], gate: f64) -> Vec<(usize, usize)> {
    let mut cost = Matrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let dist = x.center_distance(y);
            cost[(i, j)] = if dist <= gate { dist } else { 1e6 };
        }
    }
    hungarian(&cost).pairs.into_iter().filter(|&(i, j)| cost[(i, j)] <= gate).collect()
}

/// Union of vehicle boxes and infrastructure boxes moved into the vehicle
/// frame, with duplicates within `gate` metres merged (higher score wins).
/// Returns each surviving box with its source index: `Ok(v)` for vehicle,
/// `Err(i)` for infrastructure.
pub fn late_fuse_boxes(vehicle: &[Box3D], infra: &[Box3D], pose: &Pose, gate: f64) -> Vec<(Box3D, std::result::Result<usize, usize>)> {
    let moved: Vec<Box3D> = infra.iter().map(|b| pose.apply_box(b)).collect();
    let mut partner_of_v = vec![None; vehicle.len()];
    let mut taken = vec![false; moved.len()];
    for (i, j) in distance_match(vehicle, &moved, gate) {
        partner_of_v[i] = Some(j);
        taken[j] = true;
    }
    let mut out = Vec::new();
    for (i, v) in vehicle.iter().enumerate() {
        match partner_of_v[i] {
            Some(j) if moved[j].score > v.score => out.push((moved[j], Err(j))),
            _ => out.push((*v, Ok(i))),
        }
    }
    for (j, b) in moved.iter().enumerate() {
        if !taken[j] {
            out.push((*b, Err(j)));
        }
    }
    out
}
