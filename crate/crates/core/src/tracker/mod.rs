//! The per-frame tracking loop: query construction, feature extraction,
//! cooperative fusion, decoding, selection and propagation.

mod heads;
mod output;
mod tracks;

pub use heads::{decode_box, regression_target, DecodeHeads, Decoded, HeadsCache, REG_DIM};
pub use output::{read_frame_outputs, write_frame_outputs, FrameDiagnostics, FrameOutput, OutputBox, OutputRecord};
pub use tracks::{distance_match, fresh_points, init_queries, late_fuse_boxes, propagate_point, select_and_propagate, Candidate, Track, TrackSet, LATE_BOX_BYTES};

use std::collections::VecDeque;
use std::str::FromStr;

use cooptrack_numerics::rotation::{axis_angle, mat3_mul};
use cooptrack_numerics::{Matrix, ParamStore};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CoopError, Result};
use crate::fusion::{match_instances, AggregateCache, CaaCache, GbaCache, MatchSet, Provenance, V2xMessage, HEADER_BYTES};
use crate::geometry::{in_range, spatial_transform, Box3D, Pose};
use crate::mdfe::{HistoryBuffer, InstanceFeatures, MdfeCache, MdfeOutput};
use crate::model::{AgentModel, CoopModel};
use crate::sim::{observe, AgentKind, Detection, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Coop,
    NoFusion,
    LateFusion,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NoFusion, Mode::LateFusion, Mode::Coop];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Coop => "coop",
            Mode::NoFusion => "no_fusion",
            Mode::LateFusion => "late_fusion",
        }
    }
}

impl FromStr for Mode {
    type Err = CoopError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coop" => Ok(Mode::Coop),
            "no_fusion" => Ok(Mode::NoFusion),
            "late_fusion" => Ok(Mode::LateFusion),
            other => Err(CoopError::Validation(format!("unknown mode {other:?} (expected coop, no_fusion or late_fusion)"))),
        }
    }
}

/// Tracker thresholds and ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerParams {
    pub sigma_keep: f64,
    pub patience: u32,
    pub match_threshold: f64,
    pub n_fresh: usize,
    pub vehicle_range: [f64; 4],
    pub infra_range: [f64; 4],
    pub height_range: [f64; 2],
    pub late_gate: f64,
    pub seed: u64,
}

impl TrackerParams {
    pub fn from_config(c: &Config) -> Self {
        Self {
            sigma_keep: c.sigma_keep,
            patience: c.miss_patience,
            match_threshold: c.match_threshold,
            n_fresh: c.n_fresh,
            vehicle_range: c.vehicle_range,
            infra_range: c.infra_range,
            height_range: c.height_range,
            late_gate: 2.0,
            seed: c.seed,
        }
    }

    pub fn range(&self, kind: AgentKind) -> &[f64; 4] {
        match kind {
            AgentKind::Vehicle => &self.vehicle_range,
            AgentKind::Infrastructure => &self.infra_range,
        }
    }
}

/// Disturbances applied to the infrastructure link.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinkConditions {
    /// Messages arrive this many frames late.
    pub delay_frames: usize,
    /// Advance delayed reference points by their decoded velocity.
    pub compensate: bool,
    /// Standard deviation (rad) of a random-axis rotation applied to the
    /// relative pose.
    pub rotation_noise: f64,
    /// Apply the rotation noise to the point transform as well, not only to
    /// the alignment input.
    pub noise_global: bool,
    pub noise_seed: u64,
    /// Replace every message with an empty one.
    pub drop_infra: bool,
}

/// Everything the tracker sees at one frame.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub frame: usize,
    pub dt: f64,
    pub vehicle_dets: Vec<Detection>,
    pub infra_dets: Vec<Detection>,
    /// Agent-to-world poses.
    pub vehicle_pose: Pose,
    pub infra_pose: Pose,
}

impl FrameInput {
    pub fn from_scenario(sc: &Scenario, t: usize, obs_seed: u64) -> Self {
        Self {
            frame: t,
            dt: sc.dt(),
            vehicle_dets: observe(sc, AgentKind::Vehicle, t, obs_seed),
            infra_dets: observe(sc, AgentKind::Infrastructure, t, obs_seed),
            vehicle_pose: sc.vehicle.poses[t],
            infra_pose: sc.infra.poses[t],
        }
    }

    pub fn dets(&self, kind: AgentKind) -> &[Detection] {
        match kind {
            AgentKind::Vehicle => &self.vehicle_dets,
            AgentKind::Infrastructure => &self.infra_dets,
        }
    }

    pub fn pose(&self, kind: AgentKind) -> &Pose {
        match kind {
            AgentKind::Vehicle => &self.vehicle_pose,
            AgentKind::Infrastructure => &self.infra_pose,
        }
    }
}

/// Tracks and feature history of one agent.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub kind: AgentKind,
    pub tracks: TrackSet,
    pub history: HistoryBuffer,
    pub fresh_points: Matrix,
    pub last_pose: Option<Pose>,
}

impl AgentState {
    pub fn new(kind: AgentKind, tau: usize, params: &TrackerParams) -> Self {
        Self {
            kind,
            tracks: TrackSet::default(),
            history: HistoryBuffer::new(tau),
            fresh_points: fresh_points(params.n_fresh, params.range(kind), params.seed ^ kind.index()),
            last_pose: None,
        }
    }

    /// Moves tracks into the agent's current frame.
    pub fn advance_to(&mut self, pose: &Pose) {
        if let Some(prev) = self.last_pose {
            let motion = pose.inverse().compose(&prev);
            self.tracks.compensate(&motion);
        }
        self.last_pose = Some(*pose);
    }
}

/// Feature extraction for one agent at one frame.
pub struct ExtractPass {
    pub out: MdfeOutput,
    pub cache: MdfeCache,
}

pub fn extract(model: &AgentModel, ps: &ParamStore, state: &AgentState, dets: &[Detection]) -> ExtractPass {
    let fresh = ps.value(model.mdfe.fresh_query).row(0).to_vec();
    let queries = init_queries(&state.tracks, &fresh, &state.fresh_points);
    let (out, cache) = model.mdfe.forward(ps, dets, &queries, &state.history);
    ExtractPass { out, cache }
}

/// Pushes the features of every row that still carries a live id.
pub fn update_history(state: &mut AgentState, ids: &[Option<u64>], feats: &InstanceFeatures) {
    let rows: Vec<(u64, &[f64], &[f64])> = ids
        .iter()
        .enumerate()
        .filter_map(|(r, id)| id.filter(|id| state.tracks.get(*id).is_some()).map(|id| (id, feats.m.row(r), feats.s.row(r))))
        .collect();
    state.history.update(&rows);
}

/// Message built from the kept instances of an infrastructure frame.
pub fn build_message(feats: &InstanceFeatures, boxes: &[Box3D], keep: &[bool]) -> (V2xMessage, Vec<usize>) {
    let rows: Vec<usize> = (0..boxes.len()).filter(|&r| keep[r]).collect();
    let d = feats.m.cols();
    let mut msg = V2xMessage::empty(d);
    for &r in &rows {
        let b = &boxes[r];
        msg.m.push_row(feats.m.row(r));
        msg.s.push_row(feats.s.row(r));
        msg.ref_points.push_row(&b.center());
        msg.scores.push(b.score);
        msg.classes.push(b.class_label as u8);
    }
    (msg, rows)
}

/// Products of the cooperative branch for one frame.
pub struct FusionPass {
    /// Message rows that survived the range filter.
    pub used: Vec<usize>,
    pub points: Matrix,
    pub aligned: InstanceFeatures,
    pub caa: CaaCache,
    pub logits: Matrix,
    pub affinity: Matrix,
    pub gba: GbaCache,
    pub matches: MatchSet,
    pub features: InstanceFeatures,
    pub ref_points: Matrix,
    pub tags: Vec<Provenance>,
    pub sources: Vec<(Option<usize>, Option<usize>)>,
    pub aggregate: AggregateCache,
}

/// Relative poses for one message: the one used to move points and the one
/// fed to the alignment heads.
#[derive(Clone, Copy, Debug)]
pub struct LinkPoses {
    pub spatial: Pose,
    pub caa: Pose,
}

/// Runs alignment, association and aggregation. `routing` replaces the
/// learned match when given (teacher forcing during training); it indexes
/// the used message rows.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    model: &CoopModel,
    ps: &ParamStore,
    vehicle: &InstanceFeatures,
    vehicle_points: &Matrix,
    msg: &V2xMessage,
    poses: &LinkPoses,
    params: &TrackerParams,
    advance: Option<f64>,
    routing: Option<&dyn Fn(&Matrix, &Matrix) -> MatchSet>,
) -> Result<FusionPass> {
    let moved = spatial_transform(&msg.ref_points, &poses.spatial);
    let used: Vec<usize> = (0..moved.rows())
        .filter(|&r| {
            let p = [moved[(r, 0)], moved[(r, 1)], moved[(r, 2)]];
            in_range(&p, &params.vehicle_range, &params.height_range)
        })
        .collect();
    let infra = InstanceFeatures {
        m: msg.m.select_rows(&used),
        s: msg.s.select_rows(&used),
    };
    let mut points = moved.select_rows(&used);
    let (aligned, caa) = model.fusion.caa.forward(ps, &poses.caa, &infra)?;
    if let Some(delay) = advance {
        if delay > 0.0 {
            points = compensate_latency(&points, &model.vehicle.heads.velocities(ps, &aligned.m), delay)?;
        }
    }
    let (aff, gba) = model.fusion.gba.forward(ps, vehicle, &aligned, vehicle_points, &points);
    let matches = match routing {
        Some(route) => route(vehicle_points, &points),
        None => match_instances(&aff.a, params.match_threshold),
    };
    let (agg, aggregate) = model.fusion.aggregator.forward(ps, &matches, vehicle, &aligned, vehicle_points, &points);
    Ok(FusionPass {
        used,
        points,
        aligned,
        caa,
        logits: aff.logits,
        affinity: aff.a,
        gba,
        matches,
        features: agg.features,
        ref_points: agg.ref_points,
        tags: agg.tags,
        sources: agg.sources,
        aggregate,
    })
}

/// Advances stale reference points by `velocity · delay`.
pub fn compensate_latency(points: &Matrix, velocities: &[[f64; 2]], delay: f64) -> Result<Matrix> {
    if !(delay >= 0.0) {
        return Err(CoopError::Validation(format!("latency must be non-negative, got {delay}")));
    }
    assert_eq!(points.rows(), velocities.len(), "one velocity per point");
    let mut out = points.clone();
    if delay > 0.0 {
        for (r, v) in velocities.iter().enumerate() {
            out[(r, 0)] += v[0] * delay;
            out[(r, 1)] += v[1] * delay;
        }
    }
    Ok(out)
}

/// Random-axis rotation with a normally distributed angle.
pub fn rotation_noise(sigma: f64, rng: &mut impl Rng) -> Pose {
    if sigma <= 0.0 {
        return Pose::identity();
    }
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let angle = Normal::new(0.0, sigma).expect("finite sigma").sample(rng);
    Pose::new(axis_angle(&axis, angle), [0.0; 3])
}

struct QueuedMessage {
    msg: V2xMessage,
    boxes: Vec<(u64, Box3D)>,
    /// Decoded box of every message row, infrastructure frame.
    row_boxes: Vec<Box3D>,
    infra_pose: Pose,
}

/// What the cooperative branch saw and decided in one frame, kept when
/// `Tracker::association_log` is enabled.
#[derive(Clone, Debug)]
pub struct AssociationRecord {
    pub frame: usize,
    /// Vehicle boxes decoded before fusion.
    pub vehicle_boxes: Vec<Box3D>,
    /// Used infrastructure boxes, moved into the vehicle frame.
    pub infra_boxes: Vec<Box3D>,
    pub affinity: Matrix,
    pub matches: MatchSet,
}

/// Streaming tracker for one scenario.
pub struct Tracker {
    pub mode: Mode,
    pub params: TrackerParams,
    pub link: LinkConditions,
    pub vehicle: AgentState,
    pub infra: AgentState,
    queue: VecDeque<QueuedMessage>,
    noise_rng: rand_chacha::ChaCha8Rng,
    /// Set to `Some(vec![])` to collect one record per fused frame.
    pub association_log: Option<Vec<AssociationRecord>>,
}

/// Offset separating infrastructure-only ids from vehicle ids in late
/// fusion output.
pub const LATE_INFRA_ID_OFFSET: u64 = 1_000_000;

impl Tracker {
    pub fn new(mode: Mode, params: TrackerParams, tau: usize, link: LinkConditions) -> Self {
        let noise_rng = crate::sim::rng_for(&[link.noise_seed, 0x401_5E]);
        Self {
            mode,
            vehicle: AgentState::new(AgentKind::Vehicle, tau, &params),
            infra: AgentState::new(AgentKind::Infrastructure, tau, &params),
            params,
            link,
            queue: VecDeque::new(),
            noise_rng,
            association_log: None,
        }
    }

    fn agent_step(&mut self, model: &AgentModel, ps: &ParamStore, input: &FrameInput) -> (ExtractPass, Decoded, Vec<Option<u64>>) {
        let state = match model.kind {
            AgentKind::Vehicle => &mut self.vehicle,
            AgentKind::Infrastructure => &mut self.infra,
        };
        state.advance_to(input.pose(model.kind));
        let pass = extract(model, ps, state, input.dets(model.kind));
        let dec = model.heads.run(ps, &pass.out.features, &pass.out.ref_points);
        let cands = candidates(&pass.out.ids, &dec.boxes, &pass.out.features.s, self.params.sigma_keep);
        let ids = select_and_propagate(&mut state.tracks, &cands, input.dt, self.params.patience);
        update_history(state, &ids, &pass.out.features);
        (pass, dec, ids)
    }

    /// The infrastructure side of one frame: track, then queue the message.
    fn infra_step(&mut self, model: &CoopModel, ps: &ParamStore, input: &FrameInput) {
        let (pass, dec, ids) = self.agent_step(&model.infra, ps, input);
        let keep: Vec<bool> = dec.boxes.iter().map(|b| b.score >= self.params.sigma_keep).collect();
        let (msg, rows) = build_message(&pass.out.features, &dec.boxes, &keep);
        let boxes = rows.iter().filter_map(|&r| ids[r].map(|id| (id, dec.boxes[r]))).collect();
        let row_boxes = rows.iter().map(|&r| dec.boxes[r]).collect();
        self.queue.push_back(QueuedMessage {
            msg,
            boxes,
            row_boxes,
            infra_pose: input.infra_pose,
        });
        while self.queue.len() > self.link.delay_frames + 1 {
            self.queue.pop_front();
        }
    }

    fn arrived(&self) -> Option<&QueuedMessage> {
        if self.queue.len() == self.link.delay_frames + 1 {
            self.queue.front()
        } else {
            None
        }
    }

    fn link_poses(&mut self, vehicle_pose: &Pose, infra_pose: &Pose) -> LinkPoses {
        let exact = vehicle_pose.inverse().compose(infra_pose);
        if self.link.rotation_noise <= 0.0 {
            return LinkPoses { spatial: exact, caa: exact };
        }
        let noise = rotation_noise(self.link.rotation_noise, &mut self.noise_rng);
        let noisy = Pose::new(mat3_mul(&noise.r, &exact.r), exact.t);
        LinkPoses {
            spatial: if self.link.noise_global { noisy } else { exact },
            caa: noisy,
        }
    }

    pub fn step(&mut self, model: &CoopModel, ps: &ParamStore, input: &FrameInput) -> Result<FrameOutput> {
        match self.mode {
            Mode::NoFusion => Ok(self.vehicle_only(model, ps, input)),
            Mode::LateFusion => Ok(self.late(model, ps, input)),
            Mode::Coop => self.coop(model, ps, input),
        }
    }

    fn vehicle_only(&mut self, model: &CoopModel, ps: &ParamStore, input: &FrameInput) -> FrameOutput {
        let (pass, dec, ids) = self.agent_step(&model.vehicle, ps, input);
        let tags = vec![Provenance::Vehicle; ids.len()];
        let mut out = emit(input.frame, &ids, &dec, &tags, self.params.sigma_keep);
        out.diagnostics.n_vehicle = pass.out.slots.len();
        out
    }

    fn late(&mut self, model: &CoopModel, ps: &ParamStore, input: &FrameInput) -> FrameOutput {
        self.infra_step(model, ps, input);
        let mut out = self.vehicle_only(model, ps, input);
        let Some(q) = self.arrived() else {
            return out;
        };
        let sent = if self.link.drop_infra { Vec::new() } else { q.boxes.clone() };
        let pose = input.vehicle_pose.inverse().compose(&q.infra_pose);
        let vboxes: Vec<Box3D> = out.boxes.iter().map(|b| b.bbox).collect();
        let iboxes: Vec<Box3D> = sent.iter().map(|(_, b)| *b).collect();
        let fused = late_fuse_boxes(&vboxes, &iboxes, &pose, self.params.late_gate);
        let mut boxes = Vec::with_capacity(fused.len());
        for (b, src) in fused {
            let (id, provenance) = match src {
                Ok(v) => (out.boxes[v].id, Provenance::Vehicle),
                Err(i) => (LATE_INFRA_ID_OFFSET + sent[i].0, Provenance::Infra),
            };
            if !in_range(&b.center(), &self.params.vehicle_range, &self.params.height_range) {
                continue;
            }
            boxes.push(OutputBox { id, bbox: b, provenance });
        }
        out.boxes = boxes;
        out.diagnostics.n_sent = sent.len();
        out.diagnostics.message_bytes = HEADER_BYTES + LATE_BOX_BYTES * sent.len();
        out
    }

    fn coop(&mut self, model: &CoopModel, ps: &ParamStore, input: &FrameInput) -> Result<FrameOutput> {
        self.infra_step(model, ps, input);
        let d = model.d;
        let (msg, row_boxes, infra_pose) = match self.arrived() {
            Some(q) if !self.link.drop_infra => (q.msg.clone(), q.row_boxes.clone(), q.infra_pose),
            _ => (V2xMessage::empty(d), Vec::new(), input.infra_pose),
        };
        let message_bytes = if self.arrived().is_some() { msg.byte_size() } else { 0 };
        if msg.is_empty() {
            let mut out = self.vehicle_only(model, ps, input);
            out.diagnostics.message_bytes = message_bytes;
            return Ok(out);
        }
        let poses = self.link_poses(&input.vehicle_pose, &infra_pose);
        let advance = (self.link.compensate && self.link.delay_frames > 0).then(|| self.link.delay_frames as f64 * input.dt);
        self.vehicle.advance_to(&input.vehicle_pose);
        let pass = extract(&model.vehicle, ps, &self.vehicle, &input.vehicle_dets);
        let fp = fuse(model, ps, &pass.out.features, &pass.out.ref_points, &msg, &poses, &self.params, advance, None)?;
        if let Some(log) = self.association_log.as_mut() {
            log.push(AssociationRecord {
                frame: input.frame,
                vehicle_boxes: model.vehicle.heads.run(ps, &pass.out.features, &pass.out.ref_points).boxes,
                infra_boxes: fp.used.iter().map(|&k| poses.spatial.apply_box(&row_boxes[k])).collect(),
                affinity: fp.affinity.clone(),
                matches: fp.matches.clone(),
            });
        }
        let dec = model.vehicle.heads.run(ps, &fp.features, &fp.ref_points);
        let row_ids: Vec<Option<u64>> = fp.sources.iter().map(|(v, _)| v.and_then(|v| pass.out.ids[v])).collect();
        let cands = candidates(&row_ids, &dec.boxes, &fp.features.s, self.params.sigma_keep);
        let ids = select_and_propagate(&mut self.vehicle.tracks, &cands, input.dt, self.params.patience);
        update_history(&mut self.vehicle, &ids, &fp.features);
        let mut out = emit(input.frame, &ids, &dec, &fp.tags, self.params.sigma_keep);
        out.diagnostics = FrameDiagnostics {
            n_vehicle: pass.out.slots.len(),
            n_sent: msg.len(),
            n_used: fp.used.len(),
            n_matched: fp.matches.pairs.len(),
            message_bytes,
            mean_matched_affinity: if fp.matches.pairs.is_empty() {
                0.0
            } else {
                fp.matches.pairs.iter().map(|p| p.2).sum::<f64>() / fp.matches.pairs.len() as f64
            },
        };
        Ok(out)
    }
}

/// Score-gated candidates for inference.
pub fn candidates(ids: &[Option<u64>], boxes: &[Box3D], s: &Matrix, sigma_keep: f64) -> Vec<Candidate> {
    ids.iter()
        .zip(boxes)
        .enumerate()
        .map(|(r, (&id, b))| Candidate {
            id,
            bbox: *b,
            feature: s.row(r).to_vec(),
            keep: b.score >= sigma_keep,
            gt_id: None,
        })
        .collect()
}

fn emit(frame: usize, ids: &[Option<u64>], dec: &Decoded, tags: &[Provenance], sigma_keep: f64) -> FrameOutput {
    let boxes = ids
        .iter()
        .enumerate()
        .filter_map(|(r, id)| {
            let b = dec.boxes[r];
            id.filter(|_| b.score >= sigma_keep).map(|id| OutputBox {
                id,
                bbox: b,
                provenance: tags[r],
            })
        })
        .collect();
    FrameOutput {
        frame,
        boxes,
        diagnostics: FrameDiagnostics::default(),
    }
}

/// Runs a whole scenario and returns one output per frame.
pub fn run_scenario(model: &CoopModel, ps: &ParamStore, cfg: &Config, sc: &Scenario, mode: Mode, link: LinkConditions, obs_seed: u64) -> Result<Vec<FrameOutput>> {
    let mut tracker = Tracker::new(mode, TrackerParams::from_config(cfg), cfg.tau, link);
    (0..sc.n_frames())
        .map(|t| tracker.step(model, ps, &FrameInput::from_scenario(sc, t, obs_seed)))
        .collect()
}
