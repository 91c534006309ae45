//! Two-stage streaming training. Stage 1 fits each agent's tracker on its
//! own view; stage 2 fits the cooperative pipeline and the association
//! head against the joint ground truth.

mod labels;
mod losses;

pub use labels::{box_l1, gated_assignment, gen_assoc_labels, gt_match, AssociationLabels, Label, SlotInfo};
pub use losses::{association_loss, detection_loss, DetectionGrads, LossReport, LossWeights};

use std::path::Path;

use cooptrack_numerics::{clip_grad_norm, cosine_lr, AdamW, Matrix, ParamStore};
use serde::{Deserialize, Serialize};

use crate::benchmark::{observation_seed, Split};
use crate::config::Config;
use crate::error::{CoopError, Result};
use crate::fusion::MatchSet;
use crate::geometry::{spatial_transform, in_range, Box3D};
use crate::mdfe::InstanceFeatures;
use crate::model::{copy_prefix, AgentModel, CoopModel};
use crate::sim::{AgentKind, Scenario};
use crate::tracker::{build_message, extract, fuse, select_and_propagate, update_history, AgentState, Candidate, FrameInput, LinkPoses, TrackerParams};

/// One optimizer step's record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub l_bbx: f64,
    pub l_cls: f64,
    pub l_asso: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoopError::Runtime(format!("{}: {e}", path.display())))?;
    for l in logs {
        w.serialize(l).map_err(|e| CoopError::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CoopError::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CoopError::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|x| x.map_err(|e| CoopError::Parse { context: path.display().to_string(), message: e.to_string() }))
        .collect()
}

/// Optimizer settings shared by both stages.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub lr: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    pub optimizer: AdamW,
}

impl Schedule {
    pub fn from_config(c: &Config, epochs: usize) -> Self {
        Self {
            lr: c.lr,
            epochs,
            grad_clip: c.grad_clip,
            optimizer: AdamW {
                weight_decay: c.weight_decay,
                beta1: c.beta1,
                beta2: c.beta2,
                eps: 1e-8,
            },
        }
    }
}

fn apply_step(ps: &mut ParamStore, sched: &Schedule, total_steps: u64, report: &LossReport) -> Result<StepLog> {
    let step = ps.step();
    if !report.total.is_finite() || !ps.grads_finite() {
        return Err(CoopError::Diverged {
            step,
            detail: format!("loss {} (bbx {}, cls {}, asso {})", report.total, report.l_bbx, report.l_cls, report.l_asso),
        });
    }
    if sched.grad_clip > 0.0 {
        clip_grad_norm(ps, sched.grad_clip);
    }
    let lr = cosine_lr(step, total_steps, sched.lr)?;
    sched.optimizer.step(ps, lr);
    ps.zero_grad();
    Ok(StepLog {
        step: step + 1,
        lr,
        l_bbx: report.l_bbx,
        l_cls: report.l_cls,
        l_asso: report.l_asso,
        total: report.total,
    })
}

/// Teacher-forced candidates: a row stays alive when it has a target.
fn forced_candidates(ids: &[Option<u64>], boxes: &[Box3D], s: &Matrix, matched: &[Option<usize>], gt: &[(u64, Box3D)]) -> Vec<Candidate> {
    (0..ids.len())
        .map(|r| Candidate {
            id: ids[r],
            bbox: boxes[r],
            feature: s.row(r).to_vec(),
            keep: matched[r].is_some(),
            gt_id: matched[r].map(|j| gt[j].0),
        })
        .collect()
}

fn slot_infos(ids: &[Option<u64>], boxes: &[Box3D], state: &AgentState) -> Vec<SlotInfo> {
    ids.iter()
        .zip(boxes)
        .map(|(id, b)| SlotInfo {
            bound: id.and_then(|id| state.tracks.get(id)).and_then(|t| t.gt_id),
            pred: *b,
        })
        .collect()
}

/// Single-agent frame: forward, loss, backward into `ps`'s gradients, then
/// teacher-forced track update. Returns the loss and the decoded rows.
pub fn single_agent_frame(
    model: &AgentModel,
    ps: &mut ParamStore,
    cfg: &Config,
    state: &mut AgentState,
    input: &FrameInput,
    gt: &[(u64, Box3D)],
) -> LossReport {
    let w = LossWeights::from_config(cfg);
    state.advance_to(input.pose(model.kind));
    let pass = extract(model, ps, state, input.dets(model.kind));
    let dec = model.heads.run(ps, &pass.out.features, &pass.out.ref_points);
    let matched = gt_match(&slot_infos(&pass.out.ids, &dec.boxes, state), gt, cfg.gate_radius);
    let targets: Vec<Option<Box3D>> = matched.iter().map(|m| m.map(|j| gt[j].1)).collect();
    let (report, g) = detection_loss(&dec.reg, &dec.logits, &pass.out.ref_points, &targets, &w);
    let df = model.heads.backward(ps, &dec.cache, &g.dreg, &g.dlogits);
    model.mdfe.backward(ps, &pass.cache, &df.m, &df.s);
    let cands = forced_candidates(&pass.out.ids, &dec.boxes, &pass.out.features.s, &matched, gt);
    let ids = select_and_propagate(&mut state.tracks, &cands, input.dt, cfg.miss_patience);
    update_history(state, &ids, &pass.out.features);
    report
}

/// Frames per epoch over a scenario set.
fn frames_in(scenarios: &[Scenario]) -> u64 {
    scenarios.iter().map(|s| s.n_frames() as u64).sum()
}

/// Trains one agent alone. Everything else in the store stays frozen.
/// Resumes from `ps.step()` at an epoch boundary; `after_epoch` runs with
/// the epoch index once each epoch finishes.
pub fn stage1_train(
    model: &CoopModel,
    ps: &mut ParamStore,
    cfg: &Config,
    kind: AgentKind,
    scenarios: &[Scenario],
    sched: &Schedule,
    after_epoch: &mut dyn FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<StepLog>> {
    if scenarios.is_empty() {
        return Err(CoopError::Validation("training needs at least one scenario".into()));
    }
    let agent = model.agent(kind);
    let prefix = agent.prefix();
    for id in ps.ids().collect::<Vec<_>>() {
        let own = ps.name(id).starts_with(&prefix);
        ps.set_frozen(id, !own);
    }
    let per_epoch = frames_in(scenarios);
    let total = per_epoch * sched.epochs as u64;
    let start_epoch = (ps.step() / per_epoch.max(1)) as usize;
    let params = TrackerParams::from_config(cfg);
    let mut logs = Vec::new();
    ps.zero_grad();
    for epoch in start_epoch..sched.epochs {
        for (i, sc) in scenarios.iter().enumerate() {
            let obs = observation_seed(cfg, Split::Train, i, epoch);
            let mut state = AgentState::new(kind, cfg.tau, &params);
            for t in 0..sc.n_frames() {
                let input = FrameInput::from_scenario(sc, t, obs);
                let gt = sc.visible_gt(kind, t);
                let report = single_agent_frame(agent, ps, cfg, &mut state, &input, &gt);
                logs.push(apply_step(ps, sched, total, &report)?);
            }
        }
        after_epoch(epoch, ps)?;
    }
    for id in ps.ids().collect::<Vec<_>>() {
        ps.set_frozen(id, false);
    }
    Ok(logs)
}

/// Products of one cooperative training frame, for inspection.
pub struct CoopFrame {
    pub report: LossReport,
    pub labels: Option<AssociationLabels>,
    pub affinity: Option<Matrix>,
}

/// One cooperative frame: both agents forward, fusion, joint loss and full
/// backward. With `teacher` set, the message carries the GT-matched infra
/// rows and fusion routes along the association labels; otherwise both
/// follow what inference would do (score-kept rows, thresholded affinity).
#[allow(clippy::too_many_arguments)]
pub fn coop_frame(
    model: &CoopModel,
    ps: &mut ParamStore,
    cfg: &Config,
    params: &TrackerParams,
    vstate: &mut AgentState,
    istate: &mut AgentState,
    input: &FrameInput,
    sc: &Scenario,
    teacher: bool,
) -> Result<CoopFrame> {
    let w = LossWeights::from_config(cfg);
    let t = input.frame;

    // infrastructure, in its own frame
    istate.advance_to(&input.infra_pose);
    let ipass = extract(&model.infra, ps, istate, &input.infra_dets);
    let idec = model.infra.heads.run(ps, &ipass.out.features, &ipass.out.ref_points);
    let igt = sc.visible_gt(AgentKind::Infrastructure, t);
    let imatched = gt_match(&slot_infos(&ipass.out.ids, &idec.boxes, istate), &igt, cfg.gate_radius);
    let itargets: Vec<Option<Box3D>> = imatched.iter().map(|m| m.map(|j| igt[j].1)).collect();
    let (mut report, ig) = detection_loss(&idec.reg, &idec.logits, &ipass.out.ref_points, &itargets, &w);
    let mut idf = model.infra.heads.backward(ps, &idec.cache, &ig.dreg, &ig.dlogits);
    let keep: Vec<bool> = if teacher {
        imatched.iter().map(|m| m.is_some()).collect()
    } else {
        idec.boxes.iter().map(|b| b.score >= params.sigma_keep).collect()
    };
    let (msg, rows) = build_message(&ipass.out.features, &idec.boxes, &keep);

    let spatial = input.vehicle_pose.inverse().compose(&input.infra_pose);
    let poses = LinkPoses { spatial, caa: spatial };
    let moved = spatial_transform(&msg.ref_points, &spatial);
    let used: Vec<usize> = (0..moved.rows())
        .filter(|&r| in_range(&[moved[(r, 0)], moved[(r, 1)], moved[(r, 2)]], &params.vehicle_range, &params.height_range))
        .collect();
    let msg = msg.select(&used);
    let infra_rows: Vec<usize> = used.iter().map(|&k| rows[k]).collect();

    vstate.advance_to(&input.vehicle_pose);
    let vpass = extract(&model.vehicle, ps, vstate, &input.vehicle_dets);
    let cgt = sc.coop_gt(t);

    let (features, ref_points, sources, fusion) = if msg.is_empty() {
        let n = vpass.out.features.len();
        (vpass.out.features.clone(), vpass.out.ref_points.clone(), (0..n).map(|v| (Some(v), None)).collect::<Vec<_>>(), None)
    } else {
        let vpred = model.vehicle.heads.run(ps, &vpass.out.features, &vpass.out.ref_points).boxes;
        let ipred: Vec<Box3D> = infra_rows.iter().map(|&r| spatial.apply_box(&idec.boxes[r])).collect();
        let labels = gen_assoc_labels(&vpred, &ipred, &cgt, cfg.label_gate);
        let positives = labels.positives();
        let route = |pv: &Matrix, pi: &Matrix| MatchSet::from_pairs(pv.rows(), pi.rows(), positives.iter().map(|&(i, j)| (i, j, 1.0)).collect());
        let fp = fuse(model, ps, &vpass.out.features, &vpass.out.ref_points, &msg, &poses, params, None, teacher.then_some(&route as _))?;
        (fp.features.clone(), fp.ref_points.clone(), fp.sources.clone(), Some((fp, labels)))
    };

    let dec = model.vehicle.heads.run(ps, &features, &ref_points);
    let row_ids: Vec<Option<u64>> = sources.iter().map(|(v, _)| v.and_then(|v| vpass.out.ids[v])).collect();
    let matched = gt_match(&slot_infos(&row_ids, &dec.boxes, vstate), &cgt, cfg.gate_radius);
    let targets: Vec<Option<Box3D>> = matched.iter().map(|m| m.map(|j| cgt[j].1)).collect();
    let (vrep, g) = detection_loss(&dec.reg, &dec.logits, &ref_points, &targets, &w);
    report.merge(&vrep);
    let df = model.vehicle.heads.backward(ps, &dec.cache, &g.dreg, &g.dlogits);

    let mut out_labels = None;
    let mut out_aff = None;
    let dv = match fusion {
        None => df,
        Some((fp, labels)) => {
            let (arep, dz) = association_loss(&fp.logits, &labels, &w);
            report.merge(&arep);
            let (gv1, gi1) = model.fusion.aggregator.backward(ps, &fp.aggregate, &df.m, &df.s);
            let (gv2, gi2) = model.fusion.gba.backward(ps, &fp.gba, &dz);
            let (dmi, dsi) = model.fusion.caa.backward(ps, &fp.caa, &gi1.m.add(&gi2.m), &gi1.s.add(&gi2.s));
            for (k, &r) in infra_rows.iter().enumerate() {
                for c in 0..model.d {
                    idf.m[(r, c)] += dmi[(k, c)];
                    idf.s[(r, c)] += dsi[(k, c)];
                }
            }
            out_aff = Some(fp.affinity.clone());
            out_labels = Some(labels);
            InstanceFeatures {
                m: gv1.m.add(&gv2.m),
                s: gv1.s.add(&gv2.s),
            }
        }
    };
    model.infra.mdfe.backward(ps, &ipass.cache, &idf.m, &idf.s);
    model.vehicle.mdfe.backward(ps, &vpass.cache, &dv.m, &dv.s);

    let cands = forced_candidates(&row_ids, &dec.boxes, &features.s, &matched, &cgt);
    let ids = select_and_propagate(&mut vstate.tracks, &cands, input.dt, cfg.miss_patience);
    update_history(vstate, &ids, &features);
    let icands = forced_candidates(&ipass.out.ids, &idec.boxes, &ipass.out.features.s, &imatched, &igt);
    let iids = select_and_propagate(&mut istate.tracks, &icands, input.dt, cfg.miss_patience);
    update_history(istate, &iids, &ipass.out.features);
    Ok(CoopFrame {
        report,
        labels: out_labels,
        affinity: out_aff,
    })
}

/// Trains the cooperative pipeline end to end, starting from whatever is
/// in `ps` (normally both stage-1 agents).
pub fn stage2_train(
    model: &CoopModel,
    ps: &mut ParamStore,
    cfg: &Config,
    scenarios: &[Scenario],
    sched: &Schedule,
    after_epoch: &mut dyn FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<StepLog>> {
    if scenarios.is_empty() {
        return Err(CoopError::Validation("training needs at least one scenario".into()));
    }
    ps.freeze_prefix("vehicle.mdfe", cfg.freeze_stage1);
    ps.freeze_prefix("infrastructure.mdfe", cfg.freeze_stage1);
    let per_epoch = frames_in(scenarios);
    let total = per_epoch * sched.epochs as u64;
    let start_epoch = (ps.step() / per_epoch.max(1)) as usize;
    let params = TrackerParams::from_config(cfg);
    let mut logs = Vec::new();
    ps.zero_grad();
    for epoch in start_epoch..sched.epochs {
        let mut coin = crate::sim::rng_for(&[cfg.seed, epoch as u64, 0x7EAC]);
        for (i, sc) in scenarios.iter().enumerate() {
            let obs = observation_seed(cfg, Split::Train, i, epoch);
            let mut vstate = AgentState::new(AgentKind::Vehicle, cfg.tau, &params);
            let mut istate = AgentState::new(AgentKind::Infrastructure, cfg.tau, &params);
            for t in 0..sc.n_frames() {
                let input = FrameInput::from_scenario(sc, t, obs);
                let teacher = rand::Rng::random_bool(&mut coin, cfg.teacher_forcing);
                let frame = coop_frame(model, ps, cfg, &params, &mut vstate, &mut istate, &input, sc, teacher)?;
                logs.push(apply_step(ps, sched, total, &frame.report)?);
            }
        }
        after_epoch(epoch, ps)?;
    }
    ps.freeze_prefix("vehicle.mdfe", false);
    ps.freeze_prefix("infrastructure.mdfe", false);
    Ok(logs)
}

/// Loss logs of a full two-stage run.
#[derive(Clone, Debug, Default)]
pub struct PipelineLogs {
    pub stage1_vehicle: Vec<StepLog>,
    pub stage1_infra: Vec<StepLog>,
    pub stage2: Vec<StepLog>,
}

/// A trained model with both parameter sets: `single` holds the two
/// stage-1 agents (fusion untrained), `coop` the stage-2 result.
pub struct TrainedPipeline {
    pub model: CoopModel,
    pub single: ParamStore,
    pub coop: ParamStore,
    pub logs: PipelineLogs,
}

/// Both stages in memory: each agent alone in its own store, then the
/// cooperative stage starting from the two.
pub fn train_pipeline(cfg: &Config, scenarios: &[Scenario]) -> Result<TrainedPipeline> {
    let (model, mut vehicle) = CoopModel::new(cfg)?;
    let mut logs = PipelineLogs::default();
    let s1 = Schedule::from_config(cfg, cfg.epochs_stage1);
    logs.stage1_vehicle = stage1_train(&model, &mut vehicle, cfg, AgentKind::Vehicle, scenarios, &s1, &mut |_, _| Ok(()))?;
    let (_, mut infra) = CoopModel::new(cfg)?;
    logs.stage1_infra = stage1_train(&model, &mut infra, cfg, AgentKind::Infrastructure, scenarios, &s1, &mut |_, _| Ok(()))?;
    let (_, mut single) = CoopModel::new(cfg)?;
    copy_prefix(&mut single, &vehicle, "vehicle.")?;
    copy_prefix(&mut single, &infra, "infrastructure.")?;
    let (_, mut coop) = CoopModel::new(cfg)?;
    copy_prefix(&mut coop, &single, "")?;
    let s2 = Schedule::from_config(cfg, cfg.epochs_stage2);
    logs.stage2 = stage2_train(&model, &mut coop, cfg, scenarios, &s2, &mut |_, _| Ok(()))?;
    Ok(TrainedPipeline { model, single, coop, logs })
}
