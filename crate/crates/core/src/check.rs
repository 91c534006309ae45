//! Headless self-check suite: gradient agreement for every learnable
//! operation, exact oracles for assignment and rotations, metric fixtures,
//! transmission accounting and the empty-message degeneracy.
//!
//! `CheckOptions::perturb` scales the analytic gradient of one named op
//! before comparison, which must turn that check red.

use std::time::Instant;

use cooptrack_numerics::attention::{attend, attend_backward};
use cooptrack_numerics::gradcheck::{check_input_grad, check_param_grads};
use cooptrack_numerics::rotation::{axis_angle, det3, orthonormality_error};
use cooptrack_numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::eval::{amota, dense_grid_bytes, map_detection, transmission_cost, PredBox, Sequence};
use crate::fusion::{message_bytes, Aggregator, Caa, FusionModel, Gba, MatchSet};
use crate::geometry::{Box3D, Pose, CAR};
use crate::mdfe::{max_pool8, max_pool8_backward, motion_points, HistoryBuffer, InstanceFeatures, Mdfe, MotionHead, QuerySet, SlotKind};
use crate::model::CoopModel;
use crate::sim::{generate_scenario, Detection, ScenarioSpec};
use crate::tracker::{run_scenario, DecodeHeads, LinkConditions, Mode, LATE_BOX_BYTES, REG_DIM};
use crate::training::{association_loss, detection_loss, AssociationLabels, Label, LossWeights};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
const PERTURB_FACTOR: f64 = 1.01;

#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    /// Name of a gradient check whose analytic gradients get scaled.
    pub perturb: Option<String>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CheckResult {
    pub module: &'static str,
    pub op: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = std::result::Result<String, String>;
type CheckFn = fn(bool) -> Outcome;

const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("numerics", "mlp", grad_mlp),
    ("numerics", "attention", grad_attention),
    ("numerics", "layer_norm", grad_layer_norm),
    ("numerics", "focal_and_l1", grad_losses_scalar),
    ("numerics", "hungarian", hungarian_oracle),
    ("numerics", "rot6d", rotation_codec),
    ("mdfe", "max_pool", grad_max_pool),
    ("mdfe", "motion_and_semantic", grad_motion_semantic),
    ("mdfe", "extractor", grad_extractor),
    ("coop-fusion", "caa", grad_caa),
    ("coop-fusion", "gba", grad_gba),
    ("coop-fusion", "aggregation", grad_aggregation),
    ("coop-fusion", "fusion_chain", grad_fusion_chain),
    ("tracker", "decode_heads", grad_decode_heads),
    ("training", "detection_loss", grad_detection_loss),
    ("training", "association_loss", grad_association_loss),
    ("eval", "tracking_fixture", tracking_fixture),
    ("eval", "detection_fixture", detection_fixture),
    ("eval", "transmission_ordering", transmission_ordering),
    ("tracker", "empty_message_degeneracy", degeneracy),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.1).collect()
}

/// Runs every check whose op name passes `filter`.
pub fn run_checks_filtered(opts: &CheckOptions, filter: &dyn Fn(&str) -> bool) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|c| filter(c.1))
        .map(|&(module, op, f)| {
            let start = Instant::now();
            let perturb = opts.perturb.as_deref() == Some(op);
            let out = std::panic::catch_unwind(|| f(perturb)).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match out {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                module,
                op,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn run_checks(opts: &CheckOptions) -> Vec<CheckResult> {
    run_checks_filtered(opts, &|_| true)
}

pub fn format_report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{} {:<12} {:<26} {:>7.3}s  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.module,
            r.op,
            r.seconds,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    s
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_feats(rng: &mut impl Rng, n: usize, d: usize) -> InstanceFeatures {
    InstanceFeatures {
        m: random_matrix(rng, n, d),
        s: random_matrix(rng, n, d),
    }
}

fn feats_with(f: &InstanceFeatures, which: char, v: &[f64]) -> InstanceFeatures {
    let rebuilt = Matrix::from_vec(f.m.rows(), f.m.cols(), v.to_vec()).unwrap();
    match which {
        'm' => InstanceFeatures { m: rebuilt, s: f.s.clone() },
        _ => InstanceFeatures { m: f.m.clone(), s: rebuilt },
    }
}

fn bump(m: &Matrix, perturb: bool) -> Matrix {
    if perturb {
        m.scale(PERTURB_FACTOR)
    } else {
        m.clone()
    }
}

/// Tracks the worst relative error seen by one check.
struct Tally {
    worst: f64,
    tol: f64,
    skipped: usize,
}

impl Tally {
    fn new(tol: f64) -> Self {
        Self { worst: 0.0, tol, skipped: 0 }
    }

    fn params(&mut self, ps: &mut ParamStore, ids: &[ParamId], samples: usize, rng: &mut impl Rng, perturb: bool, f: &mut dyn FnMut(&ParamStore) -> f64) {
        if perturb {
            ps.scale_grads(PERTURB_FACTOR);
        }
        for c in check_param_grads(ps, ids, samples, rng, f) {
            self.worst = self.worst.max(c.rel_error);
            self.skipped += c.skipped;
        }
    }

    fn input(&mut self, x: &[f64], analytic: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) {
        let (e, _) = check_input_grad(x, analytic, f);
        self.worst = self.worst.max(e);
    }

    fn finish(self) -> Outcome {
        let msg = format!("max rel err {:.2e} (tol {:.0e}, {} kinks skipped)", self.worst, self.tol, self.skipped);
        if self.worst < self.tol {
            Ok(msg)
        } else {
            Err(msg)
        }
    }
}

fn grad_mlp(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, "mlp", &[8, 8, 8, 8], Activation::Relu, Init::XavierUniform, &mut rng);
        let x = random_matrix(&mut rng, 5, 8);
        let r = random_matrix(&mut rng, 5, 8);
        let (_, cache) = mlp.forward(&ps, &x);
        let dx = bump(&mlp.backward(&mut ps, &cache, &r), perturb);
        t.params(&mut ps, &mlp.params(), 32, &mut rng, perturb, &mut |p| mlp.infer(p, &x).hadamard(&r).sum());
        t.input(x.data(), dx.data(), &mut |v| mlp.infer(&ps, &Matrix::from_vec(5, 8, v.to_vec()).unwrap()).hadamard(&r).sum());
    }
    t.finish()
}

fn grad_attention(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (nq, nk, d, heads) = (3, 5, 8, 2);
        let (q, k, v) = (random_matrix(&mut rng, nq, d), random_matrix(&mut rng, nk, d), random_matrix(&mut rng, nk, d));
        let mask: Vec<Vec<bool>> = (0..nq).map(|i| (0..nk).map(|j| i == 0 || (i + j) % 3 != 0).collect()).collect();
        let keys = KeySets::from_mask(&mask);
        let r = random_matrix(&mut rng, nq, d);
        let (_, cache) = attend(&q, &k, &v, &keys, heads);
        let (dq, dk, dv) = attend_backward(&q, &k, &v, &keys, &cache, &r);
        let f = |q: &Matrix, k: &Matrix, v: &Matrix| attend(q, k, v, &keys, heads).0.hadamard(&r).sum();
        let re = |x: &[f64], n| Matrix::from_vec(n, d, x.to_vec()).unwrap();
        t.input(q.data(), bump(&dq, perturb).data(), &mut |x| f(&re(x, nq), &k, &v));
        t.input(k.data(), dk.data(), &mut |x| f(&q, &re(x, nk), &v));
        t.input(v.data(), dv.data(), &mut |x| f(&q, &k, &re(x, nk)));

        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ps, "mha", d, heads, &mut rng);
        let (xq, xkv) = (random_matrix(&mut rng, nq, d), random_matrix(&mut rng, nk, d));
        let (_, c) = mha.forward(&ps, &xq, &xkv, keys.clone());
        mha.backward(&mut ps, &c, &r);
        t.params(&mut ps, &mha.params(), 32, &mut rng, perturb, &mut |p| mha.forward(p, &xq, &xkv, keys.clone()).0.hadamard(&r).sum());
    }
    t.finish()
}

fn grad_layer_norm(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let x = random_matrix(&mut rng, 4, 6).scale(3.0);
        let r = random_matrix(&mut rng, 4, 6);
        let (y, inv) = layer_norm(&x);
        let dx = bump(&layer_norm_backward(&y, &inv, &r), perturb);
        t.input(x.data(), dx.data(), &mut |v| layer_norm(&Matrix::from_vec(4, 6, v.to_vec()).unwrap()).0.hadamard(&r).sum());
    }
    t.finish()
}

fn grad_losses_scalar(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = if perturb { PERTURB_FACTOR } else { 1.0 };
    for _ in 0..20 {
        let z = rng.random_range(-4.0..4.0);
        for &(target, a, g) in &[(true, 0.25, 2.0), (false, 0.25, 2.0), (true, 0.5, 1.0), (false, 0.5, 1.0)] {
            let (_, dz) = focal_loss_logit(z, target, a, g);
            t.input(&[z], &[dz * k], &mut |v| focal_loss_logit(v[0], target, a, g).0);
        }
        let pred: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = l1_loss_grad(&pred, &target).unwrap().iter().map(|v| v * k).collect();
        t.input(&pred, &g, &mut |v| l1_loss(v, &target).unwrap());
    }
    t.finish()
}

fn brute_force_assignment(cost: &Matrix) -> f64 {
    let (n, m) = cost.shape();
    if n > m {
        return brute_force_assignment(&cost.transpose());
    }
    fn rec(cost: &Matrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.rows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                rec(cost, row + 1, used, acc + cost[(row, c)], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

fn hungarian_oracle(_: bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut n_cases = 0;
    for n in 1..=6 {
        for m in 1..=6 {
            for _ in 0..4 {
                let c = random_matrix(&mut rng, n, m);
                let a = hungarian(&c);
                let best = brute_force_assignment(&c);
                if a.pairs.len() != n.min(m) || (a.total_cost - best).abs() > 1e-12 {
                    return Err(format!("{n}x{m}: cost {} vs enumeration {best}", a.total_cost));
                }
                n_cases += 1;
            }
        }
    }
    Ok(format!("{n_cases} matrices up to 6x6 match enumeration"))
}

fn rotation_codec(_: bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let r = axis_angle(&axis, rng.random_range(-3.1..3.1));
        let back = rot6d_decode(&rot6d_encode(&r).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((back[i][j] - r[i][j]).abs());
            }
        }
        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        if let Ok(d) = rot6d_decode(&v) {
            worst = worst.max(orthonormality_error(&d)).max((det3(&d) - 1.0).abs());
        }
    }
    if worst < 1e-9 {
        Ok(format!("1000 round trips, max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.1e}"))
    }
}

fn det(rng: &mut impl Rng, x: f64, y: f64, d: usize) -> Detection {
    Detection {
        bbox: Box3D {
            x,
            y,
            z: 0.8,
            w: rng.random_range(1.6..2.0),
            l: rng.random_range(4.0..4.8),
            h: 1.6,
            theta: rng.random_range(-3.0..3.0),
            vx: rng.random_range(-3.0..3.0),
            vy: rng.random_range(-3.0..3.0),
            class_label: CAR,
            score: 1.0,
        },
        latent: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        gt_id: None,
    }
}

fn grad_max_pool(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let x = random_matrix(&mut rng, 16, 5);
        let r = random_matrix(&mut rng, 2, 5);
        let (_, arg) = max_pool8(&x);
        let dx = bump(&max_pool8_backward(16, &arg, &r), perturb);
        t.input(x.data(), dx.data(), &mut |v| max_pool8(&Matrix::from_vec(16, 5, v.to_vec()).unwrap()).0.hadamard(&r).sum());
    }
    t.finish()
}

fn grad_motion_semantic(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut ps = ParamStore::new();
        let head = MotionHead::new(&mut ps, "mh", 8, &mut rng);
        let sem = Mlp::new(&mut ps, "sem", &[8, 8, 8], Activation::Relu, Init::XavierUniform, &mut rng);
        let boxes: Vec<Box3D> = (0..3).map(|_| det(&mut rng, 0.0, 0.0, 2).bbox).collect();
        let pts = motion_points(&boxes);
        let q = random_matrix(&mut rng, 3, 8);
        let r = random_matrix(&mut rng, 3, 8);
        let (_, c) = head.forward(&ps, &pts);
        head.backward(&mut ps, &c, &r);
        let (_, c) = sem.forward(&ps, &q);
        sem.backward(&mut ps, &c, &r);
        let mut ids = head.mlp.params();
        ids.extend(sem.params());
        t.params(&mut ps, &ids, 32, &mut rng, perturb, &mut |p| head.forward(p, &pts).0.hadamard(&r).sum() + sem.infer(p, &q).hadamard(&r).sum());
    }
    t.finish()
}

fn grad_extractor(perturb: bool) -> Outcome {
    let mut t = Tally::new(COMPOSITE_TOLERANCE);
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut ps = ParamStore::new();
        let d = 8;
        let mdfe = Mdfe::new(&mut ps, "v", d, 2, 2, 2, 4.0, &mut rng);
        let fq_id = mdfe.fresh_query;
        let fq = ps.value(fq_id).row(0).to_vec();
        let dets = vec![det(&mut rng, 1.0, 2.0, d), det(&mut rng, 10.0, -3.0, d), det(&mut rng, 25.0, 6.0, d)];
        let mut q = QuerySet {
            features: random_matrix(&mut rng, 4, d),
            ref_points: Matrix::from_rows(&[[1.2, 2.1, 0.8], [40.0, 0.0, 0.8], [0.0; 3], [5.0, 5.0, 0.0]]),
            prior_boxes: vec![None; 4],
            kinds: vec![SlotKind::Track(4), SlotKind::Track(5), SlotKind::Fresh, SlotKind::Fresh],
        };
        q.features.row_mut(2).copy_from_slice(&fq);
        q.features.row_mut(3).copy_from_slice(&fq);
        q.prior_boxes[1] = Some(det(&mut rng, 40.0, 0.0, d).bbox);
        let mut h = HistoryBuffer::new(2);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        h.update(&[(4, &a, &b)]);
        h.update(&[(4, &b, &a), (5, &a, &a)]);
        let (_, cache) = mdfe.forward(&ps, &dets, &q, &h);
        let (rm, rs) = (random_matrix(&mut rng, 4, d), random_matrix(&mut rng, 4, d));
        mdfe.backward(&mut ps, &cache, &rm, &rs);
        t.params(&mut ps, &mdfe.params(), 16, &mut rng, perturb, &mut |p| {
            let mut q2 = q.clone();
            let f = p.value(fq_id).row(0).to_vec();
            q2.features.row_mut(2).copy_from_slice(&f);
            q2.features.row_mut(3).copy_from_slice(&f);
            let (o, _) = mdfe.forward(p, &dets, &q2, &h);
            o.features.m.hadamard(&rm).sum() + o.features.s.hadamard(&rs).sum()
        });
    }
    t.finish()
}

fn randomize(ps: &mut ParamStore, ids: &[ParamId], rng: &mut impl Rng, scale: f64) {
    for &id in ids {
        ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn grad_caa(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut ps = ParamStore::new();
        let caa = Caa::new(&mut ps, "caa", 8, 4, &mut rng).map_err(|e| e.to_string())?;
        randomize(&mut ps, &caa.params(), &mut rng, 0.5);
        let pose = Pose::from_yaw(rng.random_range(-3.0..3.0), [20.0, -10.0, 4.0]);
        let f = random_feats(&mut rng, 3, 8);
        let (rm, rs) = (random_matrix(&mut rng, 3, 8), random_matrix(&mut rng, 3, 8));
        let (_, cache) = caa.forward(&ps, &pose, &f).map_err(|e| e.to_string())?;
        let (dm, ds) = caa.backward(&mut ps, &cache, &rm, &rs);
        let loss = |p: &ParamStore, f: &InstanceFeatures| {
            let (o, _) = caa.forward(p, &pose, f).unwrap();
            o.m.hadamard(&rm).sum() + o.s.hadamard(&rs).sum()
        };
        t.params(&mut ps, &caa.params(), 32, &mut rng, perturb, &mut |p| loss(p, &f));
        t.input(f.m.data(), bump(&dm, perturb).data(), &mut |v| loss(&ps, &feats_with(&f, 'm', v)));
        t.input(f.s.data(), ds.data(), &mut |v| loss(&ps, &feats_with(&f, 's', v)));
    }
    t.finish()
}

fn grad_gba(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut ps = ParamStore::new();
        let gba = Gba::new(&mut ps, "gba", 8, &mut rng);
        let (fv, fi) = (random_feats(&mut rng, 3, 8), random_feats(&mut rng, 4, 8));
        let (pv, pi) = (random_matrix(&mut rng, 3, 3).scale(10.0), random_matrix(&mut rng, 4, 3).scale(10.0));
        let r = random_matrix(&mut rng, 3, 4);
        let (_, cache) = gba.forward(&ps, &fv, &fi, &pv, &pi);
        let (gv, gi) = gba.backward(&mut ps, &cache, &r);
        let logits = |p: &ParamStore, fv: &InstanceFeatures, fi: &InstanceFeatures| gba.forward(p, fv, fi, &pv, &pi).0.logits.hadamard(&r).sum();
        t.params(&mut ps, &gba.params(), 32, &mut rng, perturb, &mut |p| logits(p, &fv, &fi));
        t.input(fv.m.data(), bump(&gv.m, perturb).data(), &mut |v| logits(&ps, &feats_with(&fv, 'm', v), &fi));
        t.input(fi.s.data(), gi.s.data(), &mut |v| logits(&ps, &fv, &feats_with(&fi, 's', v)));
    }
    t.finish()
}

fn grad_aggregation(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut ps = ParamStore::new();
        let agg = Aggregator::new(&mut ps, "agg", 8, &mut rng);
        let (fv, fi) = (random_feats(&mut rng, 3, 8), random_feats(&mut rng, 3, 8));
        let (pv, pi) = (random_matrix(&mut rng, 3, 3), random_matrix(&mut rng, 3, 3));
        let ms = MatchSet::from_pairs(3, 3, vec![(0, 1, 0.9), (2, 0, 0.6)]);
        let (rm, rs) = (random_matrix(&mut rng, 4, 8), random_matrix(&mut rng, 4, 8));
        let (_, cache) = agg.forward(&ps, &ms, &fv, &fi, &pv, &pi);
        let (gv, gi) = agg.backward(&mut ps, &cache, &rm, &rs);
        let loss = |p: &ParamStore, fv: &InstanceFeatures, fi: &InstanceFeatures| {
            let (o, _) = agg.forward(p, &ms, fv, fi, &pv, &pi);
            o.features.m.hadamard(&rm).sum() + o.features.s.hadamard(&rs).sum()
        };
        t.params(&mut ps, &agg.params(), 32, &mut rng, perturb, &mut |p| loss(p, &fv, &fi));
        t.input(fv.m.data(), bump(&gv.m, perturb).data(), &mut |v| loss(&ps, &feats_with(&fv, 'm', v), &fi));
        t.input(fi.s.data(), gi.s.data(), &mut |v| loss(&ps, &fv, &feats_with(&fi, 's', v)));
    }
    t.finish()
}

fn grad_fusion_chain(perturb: bool) -> Outcome {
    let mut t = Tally::new(COMPOSITE_TOLERANCE);
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut ps = ParamStore::new();
        let fm = FusionModel::new(&mut ps, 8, 4, &mut rng).map_err(|e| e.to_string())?;
        randomize(&mut ps, &fm.caa.params(), &mut rng, 0.3);
        let pose = Pose::from_yaw(0.7, [30.0, 20.0, 4.0]);
        let (fv, fi) = (random_feats(&mut rng, 3, 8), random_feats(&mut rng, 3, 8));
        let (pv, pi) = (random_matrix(&mut rng, 3, 3).scale(10.0), random_matrix(&mut rng, 3, 3).scale(10.0));
        let ms = MatchSet::from_pairs(3, 3, vec![(0, 0, 0.9), (1, 2, 0.7)]);
        let (rm, rs) = (random_matrix(&mut rng, 4, 8), random_matrix(&mut rng, 4, 8));
        let ra = random_matrix(&mut rng, 3, 3);
        let loss = |p: &ParamStore, fi: &InstanceFeatures| {
            let (al, _) = fm.caa.forward(p, &pose, fi).unwrap();
            let (aff, _) = fm.gba.forward(p, &fv, &al, &pv, &pi);
            let (o, _) = fm.aggregator.forward(p, &ms, &fv, &al, &pv, &pi);
            aff.logits.hadamard(&ra).sum() + o.features.m.hadamard(&rm).sum() + o.features.s.hadamard(&rs).sum()
        };
        let (al, cc) = fm.caa.forward(&ps, &pose, &fi).map_err(|e| e.to_string())?;
        let (_, gc) = fm.gba.forward(&ps, &fv, &al, &pv, &pi);
        let (_, ac) = fm.aggregator.forward(&ps, &ms, &fv, &al, &pv, &pi);
        let (_, gi1) = fm.gba.backward(&mut ps, &gc, &ra);
        let (_, gi2) = fm.aggregator.backward(&mut ps, &ac, &rm, &rs);
        let (dm, ds) = fm.caa.backward(&mut ps, &cc, &gi1.m.add(&gi2.m), &gi1.s.add(&gi2.s));
        t.params(&mut ps, &fm.params(), 16, &mut rng, perturb, &mut |p| loss(p, &fi));
        t.input(fi.m.data(), bump(&dm, perturb).data(), &mut |v| loss(&ps, &feats_with(&fi, 'm', v)));
        t.input(fi.s.data(), ds.data(), &mut |v| loss(&ps, &feats_with(&fi, 's', v)));
    }
    t.finish()
}

fn grad_decode_heads(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut ps = ParamStore::new();
        let heads = DecodeHeads::new(&mut ps, "h", 8, 3, &mut rng);
        for id in heads.params() {
            ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let feats = random_feats(&mut rng, 4, 8);
        let refs = random_matrix(&mut rng, 4, 3);
        let target = random_matrix(&mut rng, 4, REG_DIM).scale(3.0);
        let r = random_matrix(&mut rng, 4, 3);
        let dec = heads.run(&ps, &feats, &refs);
        let dreg = Matrix::from_vec(4, REG_DIM, l1_loss_grad(dec.reg.data(), target.data()).unwrap()).unwrap();
        heads.backward(&mut ps, &dec.cache, &dreg, &r);
        t.params(&mut ps, &heads.params(), 40, &mut rng, perturb, &mut |p| {
            let d = heads.run(p, &feats, &refs);
            l1_loss(d.reg.data(), target.data()).unwrap() + d.logits.hadamard(&r).sum()
        });
    }
    t.finish()
}

fn target_car(x: f64, y: f64, class_label: usize) -> Box3D {
    Box3D {
        x,
        y,
        z: 0.1,
        w: 1.8,
        l: 4.5,
        h: 1.6,
        theta: 0.4,
        vx: 1.0,
        vy: -0.5,
        class_label,
        score: 1.0,
    }
}

fn grad_detection_loss(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    let w = LossWeights::from_config(&Config::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let (n, c) = (4, 3);
        let reg = random_matrix(&mut rng, n, REG_DIM);
        let logits = random_matrix(&mut rng, n, c).scale(3.0);
        let refs = random_matrix(&mut rng, n, 3);
        let targets = vec![Some(target_car(0.5, 0.2, 0)), None, Some(target_car(-0.3, 0.4, 2)), None];
        let (_, g) = detection_loss(&reg, &logits, &refs, &targets, &w);
        t.input(reg.data(), bump(&g.dreg, perturb).data(), &mut |x| {
            detection_loss(&Matrix::from_vec(n, REG_DIM, x.to_vec()).unwrap(), &logits, &refs, &targets, &w).0.total
        });
        t.input(logits.data(), g.dlogits.data(), &mut |x| {
            detection_loss(&reg, &Matrix::from_vec(n, c, x.to_vec()).unwrap(), &refs, &targets, &w).0.total
        });
    }
    t.finish()
}

fn grad_association_loss(perturb: bool) -> Outcome {
    let mut t = Tally::new(OP_TOLERANCE);
    let w = LossWeights::from_config(&Config::default());
    let labels = AssociationLabels {
        labels: vec![
            vec![Label::Positive, Label::Negative, Label::Negative],
            vec![Label::Negative, Label::Ignore, Label::Positive],
        ],
        vehicle_gt: vec![Some(1), Some(2)],
        infra_gt: vec![Some(1), None, Some(2)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let z = random_matrix(&mut rng, 2, 3).scale(3.0);
        let (_, dz) = association_loss(&z, &labels, &w);
        t.input(z.data(), bump(&dz, perturb).data(), &mut |x| association_loss(&Matrix::from_vec(2, 3, x.to_vec()).unwrap(), &labels, &w).0.total);
    }
    t.finish()
}

fn fixture_car(x: f64, y: f64, score: f64) -> Box3D {
    Box3D {
        x,
        y,
        z: 0.0,
        w: 1.8,
        l: 4.5,
        h: 1.6,
        theta: 0.0,
        vx: 0.0,
        vy: 0.0,
        class_label: CAR,
        score,
    }
}

/// Two parked cars over five frames; the second car's id changes once.
fn tracking_fixture(_: bool) -> Outcome {
    let gt = (0..5).map(|_| vec![(1, fixture_car(0.0, 0.0, 1.0)), (2, fixture_car(10.0, 0.0, 1.0))]).collect();
    let preds = (0..5)
        .map(|t| {
            let mut f = Vec::new();
            if t < 4 {
                f.push(PredBox { id: 100, bbox: fixture_car(0.0, 0.0, 0.9) });
            }
            f.push(PredBox { id: if t < 2 { 200 } else { 300 }, bbox: fixture_car(10.0, 0.0, 0.9) });
            if t == 3 {
                f.push(PredBox { id: 400, bbox: fixture_car(50.0, 0.0, 0.9) });
            }
            f
        })
        .collect();
    let m = amota(&[Sequence { preds, gt }], 2.0).map_err(|e| e.to_string())?;
    let expect = 35.0 * 7.0 / (40.0 * 9.0);
    if m.best.ids == 1 && (m.amota - expect).abs() < 1e-12 {
        Ok(format!("IDS {} AMOTA {:.4}", m.best.ids, m.amota))
    } else {
        Err(format!("IDS {} AMOTA {} (want 1, {expect})", m.best.ids, m.amota))
    }
}

/// Every prediction sits 3 m from its ground truth: only the 4 m threshold matches.
fn detection_fixture(_: bool) -> Outcome {
    let gt: Vec<Vec<(u64, Box3D)>> = (0..4).map(|t| vec![(1, fixture_car(0.0, t as f64 * 5.0, 1.0)), (2, fixture_car(20.0, 3.0, 1.0))]).collect();
    let preds = gt
        .iter()
        .map(|f| f.iter().map(|(i, b)| PredBox { id: *i, bbox: Box3D { x: b.x + 3.0, ..*b } }).collect())
        .collect();
    let d = map_detection(&[Sequence { preds, gt }]).map_err(|e| e.to_string())?;
    if (d.map - 0.25).abs() < 1e-12 {
        Ok(format!("mAP {:.4}", d.map))
    } else {
        Err(format!("mAP {} (want 0.25)", d.map))
    }
}

fn transmission_ordering(_: bool) -> Outcome {
    let (d, rate) = (Config::default().d, 10.0);
    for n in 1..=50usize {
        let late = transmission_cost(&[crate::fusion::HEADER_BYTES + n * LATE_BOX_BYTES], rate);
        let coop = transmission_cost(&[message_bytes(n, d)], rate);
        let dense = transmission_cost(&[dense_grid_bytes(d)], rate);
        if !(0.0 < late && late < coop && coop < dense && 100.0 * coop <= dense) {
            return Err(format!("N={n}: late {late} coop {coop} dense {dense}"));
        }
    }
    let ratio = dense_grid_bytes(d) as f64 / message_bytes(50, d) as f64;
    Ok(format!("0 < late < coop < dense for N<=50, dense/coop >= {ratio:.0}x"))
}

fn degeneracy(_: bool) -> Outcome {
    let cfg = Config {
        d: 8,
        heads: 2,
        caa_block: 4,
        tau: 2,
        n_fresh: 6,
        sigma_keep: 0.05,
        ..Config::default()
    };
    let (model, mut ps) = CoopModel::new(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in model.params() {
        ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let mut spec = ScenarioSpec::from_config(&cfg).map_err(|e| e.to_string())?;
    spec.n_frames = 8;
    let sc = generate_scenario(&spec, 3).map_err(|e| e.to_string())?;
    let dropped = LinkConditions {
        drop_infra: true,
        ..LinkConditions::default()
    };
    let coop = run_scenario(&model, &ps, &cfg, &sc, Mode::Coop, dropped, 11).map_err(|e| e.to_string())?;
    let solo = run_scenario(&model, &ps, &cfg, &sc, Mode::NoFusion, LinkConditions::default(), 11).map_err(|e| e.to_string())?;
    let n: usize = solo.iter().map(|f| f.boxes.len()).sum();
    if n > 0 && coop.iter().zip(&solo).all(|(a, b)| a.boxes == b.boxes) {
        Ok(format!("{} frames, {n} boxes identical", solo.len()))
    } else {
        Err("coop output with empty messages differs from no_fusion".into())
    }
}
