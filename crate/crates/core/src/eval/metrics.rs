//! Center-distance tracking and detection metrics over per-frame boxes.

use std::collections::BTreeMap;

use cooptrack_numerics::rotation::wrap_angle;
use serde::{Deserialize, Serialize};

use crate::error::{CoopError, Result};
use crate::geometry::Box3D;

/// Recall targets of the tracking score sweep.
pub const RECALL_POINTS: usize = 40;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
/// Matching radii for average precision, meters.
pub const AP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Radius at which the true-positive error means are taken.
pub const TP_ERROR_THRESHOLD: f64 = 2.0;
/// A ground-truth track is mostly tracked above this matched fraction.
pub const MOSTLY_TRACKED: f64 = 0.8;
/// ...and mostly lost below this one.
pub const MOSTLY_LOST: f64 = 0.2;

/// A predicted box with its track id. The score lives in `bbox.score`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredBox {
    pub id: u64,
    pub bbox: Box3D,
}

/// One scenario: predictions and ground truth per frame, same frame of
/// reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequence {
    pub preds: Vec<Vec<PredBox>>,
    pub gt: Vec<Vec<(u64, Box3D)>>,
}

impl Sequence {
    /// Keeps only boxes whose class is listed.
    pub fn filter_classes(&self, classes: &[usize]) -> Sequence {
        Sequence {
            preds: self.preds.iter().map(|f| f.iter().filter(|p| classes.contains(&p.bbox.class_label)).copied().collect()).collect(),
            gt: self.gt.iter().map(|f| f.iter().filter(|g| classes.contains(&g.1.class_label)).copied().collect()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatch {
    /// `(pred, gt, center distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub missed: Vec<usize>,
}

/// Prediction order for greedy matching: score descending, then id, then
/// position, so the result does not depend on input order.
fn score_order(preds: &[PredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.bbox
            .score
            .total_cmp(&pa.bbox.score)
            .then(pa.id.cmp(&pb.id))
            .then(pa.bbox.x.total_cmp(&pb.bbox.x))
            .then(pa.bbox.y.total_cmp(&pb.bbox.y))
    });
    order
}

/// Greedy matching: predictions in descending score each take the nearest
/// unmatched ground truth strictly within `radius`.
pub fn match_frame(preds: &[PredBox], gt: &[Box3D], radius: f64) -> FrameMatch {
    let mut taken = vec![false; gt.len()];
    let mut out = FrameMatch::default();
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let dist = preds[p].bbox.center_distance(b);
            if dist < radius && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((g, dist));
            }
        }
        match best {
            Some((g, dist)) => {
                taken[g] = true;
                out.pairs.push((p, g, dist));
            }
            None => out.false_positives.push(p),
        }
    }
    out.missed = (0..gt.len()).filter(|&g| !taken[g]).collect();
    out
}

/// CLEAR-MOT counts at one score threshold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotCounts {
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub distance_sum: f64,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
    pub gt_tracks: usize,
}

impl MotCounts {
    pub fn recall(&self) -> f64 {
        if self.n_gt == 0 {
            0.0
        } else {
            self.tp as f64 / self.n_gt as f64
        }
    }

    pub fn mota(&self) -> f64 {
        1.0 - (self.fn_ + self.fp + self.ids) as f64 / self.n_gt.max(1) as f64
    }

    /// MOTA normalized by the recall achieved: `1 − (IDS + FP) / TP`.
    pub fn motar(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            1.0 - (self.ids + self.fp) as f64 / self.tp as f64
        }
    }

    pub fn motp(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.distance_sum / self.tp as f64)
    }
}

/// Frame-by-frame CLEAR-MOT over predictions scoring at least `min_score`.
/// A ground truth keeps last frame's track while it stays within radius;
/// the rest are matched greedily. An identity switch is a ground truth
/// matched to a different track id than at its previous match.
pub fn clear_mot(seqs: &[Sequence], radius: f64, min_score: f64) -> MotCounts {
    let mut c = MotCounts::default();
    // (sequence, gt id) -> (frames present, frames matched)
    let mut coverage: BTreeMap<(usize, u64), (usize, usize)> = BTreeMap::new();
    for (si, seq) in seqs.iter().enumerate() {
        let mut last: BTreeMap<u64, u64> = BTreeMap::new();
        for (t, frame_gt) in seq.gt.iter().enumerate() {
            let mut gt = frame_gt.clone();
            gt.sort_by_key(|g| g.0);
            let preds: Vec<PredBox> = seq.preds.get(t).map_or(Vec::new(), |f| f.iter().filter(|p| p.bbox.score >= min_score).copied().collect());
            c.n_gt += gt.len();
            let mut pred_used = vec![false; preds.len()];
            let mut gt_match: Vec<Option<(usize, f64)>> = vec![None; gt.len()];
            for (g, (gid, gb)) in gt.iter().enumerate() {
                let Some(&tid) = last.get(gid) else { continue };
                if let Some(p) = (0..preds.len()).find(|&p| !pred_used[p] && preds[p].id == tid) {
                    let dist = preds[p].bbox.center_distance(gb);
                    if dist < radius {
                        pred_used[p] = true;
                        gt_match[g] = Some((p, dist));
                    }
                }
            }
            let free_p: Vec<usize> = (0..preds.len()).filter(|&p| !pred_used[p]).collect();
            let free_g: Vec<usize> = (0..gt.len()).filter(|&g| gt_match[g].is_none()).collect();
            let sub_p: Vec<PredBox> = free_p.iter().map(|&p| preds[p]).collect();
            let sub_g: Vec<Box3D> = free_g.iter().map(|&g| gt[g].1).collect();
            let m = match_frame(&sub_p, &sub_g, radius);
            for (p, g, dist) in m.pairs {
                gt_match[free_g[g]] = Some((free_p[p], dist));
                pred_used[free_p[p]] = true;
            }
            for (g, (gid, _)) in gt.iter().enumerate() {
                let cov = coverage.entry((si, *gid)).or_default();
                cov.0 += 1;
                match gt_match[g] {
                    Some((p, dist)) => {
                        cov.1 += 1;
                        c.tp += 1;
                        c.distance_sum += dist;
                        let tid = preds[p].id;
                        if last.get(gid).is_some_and(|&prev| prev != tid) {
                            c.ids += 1;
                        }
                        last.insert(*gid, tid);
                    }
                    None => c.fn_ += 1,
                }
            }
            c.fp += pred_used.iter().filter(|u| !**u).count();
        }
    }
    c.gt_tracks = coverage.len();
    for (present, matched) in coverage.values() {
        let frac = *matched as f64 / *present as f64;
        if frac >= MOSTLY_TRACKED {
            c.mostly_tracked += 1;
        }
        if frac < MOSTLY_LOST {
            c.mostly_lost += 1;
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    /// Mean recall-normalized MOTA, each point clipped at zero.
    pub amota: f64,
    /// Same without the clipping.
    pub amota_raw: f64,
    pub amotp: f64,
    /// Counts at the score threshold with the best MOTAR.
    pub best: MotCounts,
    pub best_threshold: f64,
    pub mota: f64,
    /// `(recall target, MOTAR raw, score threshold)`, `None` where the
    /// target recall is never reached.
    pub curve: Vec<(f64, Option<(f64, f64)>)>,
}

pub fn recall_targets() -> Vec<f64> {
    (0..RECALL_POINTS)
        .map(|k| MIN_RECALL + (1.0 - MIN_RECALL) * k as f64 / (RECALL_POINTS - 1) as f64)
        .collect()
}

/// Averages recall-normalized MOTA over the recall targets. For each target
/// the highest score threshold reaching that recall is used; unreached
/// targets count as zero accuracy and `radius` position error.
pub fn amota(seqs: &[Sequence], radius: f64) -> Result<TrackingMetrics> {
    let n_gt: usize = seqs.iter().flat_map(|s| &s.gt).map(|f| f.len()).sum();
    if n_gt == 0 {
        return Err(CoopError::Validation("no ground truth to evaluate against".into()));
    }
    let mut scores: Vec<f64> = seqs.iter().flat_map(|s| &s.preds).flatten().map(|p| p.bbox.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut memo: BTreeMap<usize, MotCounts> = BTreeMap::new();
    let mut at = |i: usize| -> MotCounts { memo.entry(i).or_insert_with(|| clear_mot(seqs, radius, scores[i])).clone() };
    let mut curve = Vec::with_capacity(RECALL_POINTS);
    let (mut sum, mut sum_raw, mut sum_motp) = (0.0, 0.0, 0.0);
    let mut best: Option<(f64, MotCounts, f64)> = None;
    for r in recall_targets() {
        // smallest threshold index (highest score) whose recall reaches r
        let found = if scores.is_empty() || at(scores.len() - 1).recall() < r - 1e-12 {
            None
        } else {
            let (mut lo, mut hi) = (0, scores.len() - 1);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if at(mid).recall() >= r - 1e-12 {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            Some(lo)
        };
        match found {
            Some(i) => {
                let c = at(i);
                let m = c.motar();
                sum += m.max(0.0);
                sum_raw += m;
                sum_motp += c.motp().unwrap_or(radius);
                if best.as_ref().is_none_or(|(bm, _, _)| m > *bm) {
                    best = Some((m, c, scores[i]));
                }
                curve.push((r, Some((m, scores[i]))));
            }
            None => {
                sum_motp += radius;
                curve.push((r, None));
            }
        }
    }
    let (best, best_threshold) = match best {
        Some((_, c, s)) => (c, s),
        None => (clear_mot(seqs, radius, f64::NEG_INFINITY), f64::NEG_INFINITY),
    };
    let k = RECALL_POINTS as f64;
    Ok(TrackingMetrics {
        amota: sum / k,
        amota_raw: sum_raw / k,
        amotp: sum_motp / k,
        mota: best.mota(),
        best,
        best_threshold,
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map: f64,
    /// AP per matching radius in [`AP_THRESHOLDS`] order.
    pub ap: Vec<f64>,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
}

/// Score-sorted detection outcomes at one radius, plus TP errors.
struct ScoredMatches {
    /// `(score, is_tp)` in descending score.
    outcomes: Vec<(f64, bool)>,
    errors: Vec<[f64; 4]>,
}

fn scored_matches(seqs: &[Sequence], radius: f64) -> ScoredMatches {
    let mut outcomes = Vec::new();
    let mut errors = Vec::new();
    for seq in seqs {
        for (t, gt) in seq.gt.iter().enumerate() {
            let preds = seq.preds.get(t).map_or(&[][..], |f| &f[..]);
            let gboxes: Vec<Box3D> = gt.iter().map(|g| g.1).collect();
            let m = match_frame(preds, &gboxes, radius);
            for &(p, g, dist) in &m.pairs {
                let (a, b) = (&preds[p].bbox, &gboxes[g]);
                outcomes.push((a.score, true));
                errors.push([
                    dist,
                    1.0 - a.aligned_iou(b),
                    wrap_angle(a.theta - b.theta).abs(),
                    ((a.vx - b.vx).powi(2) + (a.vy - b.vy).powi(2)).sqrt(),
                ]);
            }
            for &p in &m.false_positives {
                outcomes.push((preds[p].bbox.score, false));
            }
        }
    }
    // true positives first among equal scores keeps the curve independent of
    // input order
    outcomes.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    ScoredMatches { outcomes, errors }
}

/// Average precision from score-sorted outcomes: the precision envelope
/// sampled at 101 recall points, restricted to recall above
/// [`MIN_RECALL`], shifted by [`MIN_PRECISION`] and renormalized.
pub fn average_precision(outcomes: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(outcomes.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in outcomes {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0;
    let mut count = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if r <= MIN_RECALL + 1e-12 {
            continue;
        }
        let p = curve.iter().filter(|(rc, _)| *rc >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
        total += (p - MIN_PRECISION).max(0.0);
        count += 1;
    }
    total / count as f64 / (1.0 - MIN_PRECISION)
}

/// AP averaged over the matching radii, with translation, scale,
/// orientation and velocity errors of the true positives at the 2 m radius
/// (1 where there are none).
pub fn map_detection(seqs: &[Sequence]) -> Result<DetectionMetrics> {
    let n_gt: usize = seqs.iter().flat_map(|s| &s.gt).map(|f| f.len()).sum();
    if n_gt == 0 {
        return Err(CoopError::Validation("no ground truth to evaluate against".into()));
    }
    let mut ap = Vec::with_capacity(AP_THRESHOLDS.len());
    let mut err = [1.0; 4];
    for &radius in &AP_THRESHOLDS {
        let sm = scored_matches(seqs, radius);
        ap.push(average_precision(&sm.outcomes, n_gt));
        if radius == TP_ERROR_THRESHOLD && !sm.errors.is_empty() {
            for (k, e) in err.iter_mut().enumerate() {
                *e = sm.errors.iter().map(|x| x[k]).sum::<f64>() / sm.errors.len() as f64;
            }
        }
    }
    Ok(DetectionMetrics {
        map: ap.iter().sum::<f64>() / ap.len() as f64,
        ap,
        ate: err[0],
        ase: err[1],
        aoe: err[2],
        ave: err[3],
    })
}
