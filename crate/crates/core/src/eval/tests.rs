use super::*;
use crate::fusion::{message_bytes, V2xMessage};
use crate::geometry::Box3D;
use crate::sim::{generate_scenario, ScenarioSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn car(x: f64, y: f64, score: f64) -> Box3D {
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
        class_label: 0,
        score,
    }
}

fn pred(id: u64, x: f64, y: f64, score: f64) -> PredBox {
    PredBox { id, bbox: car(x, y, score) }
}

/// Two parked cars over five frames. The tracker loses the first car in
/// the last frame, swaps the second car's id at frame 2 and reports one
/// phantom at frame 3.
fn id_switch_fixture() -> Sequence {
    let gt = (0..5).map(|_| vec![(1, car(0.0, 0.0, 1.0)), (2, car(10.0, 0.0, 1.0))]).collect();
    let preds = (0..5)
        .map(|t| {
            let mut f = Vec::new();
            if t < 4 {
                f.push(pred(100, 0.0, 0.0, 0.9));
            }
            f.push(pred(if t < 2 { 200 } else { 300 }, 10.0, 0.0, 0.9));
            if t == 3 {
                f.push(pred(400, 50.0, 0.0, 0.9));
            }
            f
        })
        .collect();
    Sequence { preds, gt }
}

#[test]
fn id_switch_fixture_counts() {
    let seqs = [id_switch_fixture()];
    let c = clear_mot(&seqs, 2.0, 0.0);
    assert_eq!((c.n_gt, c.tp, c.fn_, c.fp, c.ids), (10, 9, 1, 1, 1));
    assert_eq!((c.mostly_tracked, c.mostly_lost, c.gt_tracks), (2, 0, 2));
    assert!((c.mota() - 0.7).abs() < 1e-12);
    let m = amota(&seqs, 2.0).unwrap();
    assert_eq!(m.best.ids, 1);
    // 35 of the 40 recall targets lie at or below the 0.9 recall reached
    assert_eq!(m.curve.iter().filter(|c| c.1.is_some()).count(), 35);
    assert!((m.amota - 35.0 * 7.0 / (40.0 * 9.0)).abs() < 1e-12, "{}", m.amota);
    assert_eq!(m.amota, m.amota_raw);
    assert!((m.amotp - 5.0 * 2.0 / 40.0).abs() < 1e-12);
}

#[test]
fn perfect_and_empty_tracking() {
    let gt: Vec<Vec<(u64, Box3D)>> = (0..6).map(|t| vec![(5, car(t as f64, 0.0, 1.0))]).collect();
    let perfect = Sequence {
        preds: gt.iter().map(|f| f.iter().map(|(_, b)| PredBox { id: 9, bbox: *b }).collect()).collect(),
        gt: gt.clone(),
    };
    let m = amota(&[perfect], 2.0).unwrap();
    assert_eq!((m.amota, m.best.ids, m.best.mostly_tracked, m.best.mostly_lost), (1.0, 0, 1, 0));
    assert_eq!(m.amotp, 0.0);
    let empty = Sequence { preds: vec![vec![]; 6], gt };
    let m = amota(&[empty], 2.0).unwrap();
    assert_eq!((m.amota, m.best.mostly_lost, m.best.gt_tracks), (0.0, 1, 1));
    assert!(amota(&[Sequence::default()], 2.0).is_err());
    assert!(map_detection(&[Sequence::default()]).is_err());
}

#[test]
fn detection_fixtures() {
    let gt: Vec<Vec<(u64, Box3D)>> = (0..4).map(|t| vec![(1, car(0.0, t as f64 * 5.0, 1.0)), (2, car(20.0, 3.0, 1.0))]).collect();
    let perfect = Sequence {
        preds: gt.iter().map(|f| f.iter().map(|(i, b)| PredBox { id: *i, bbox: *b }).collect()).collect(),
        gt: gt.clone(),
    };
    let d = map_detection(&[perfect]).unwrap();
    assert!((d.map - 1.0).abs() < 1e-12);
    assert_eq!((d.ate, d.ase, d.aoe, d.ave), (0.0, 0.0, 0.0, 0.0));
    let shifted = Sequence {
        preds: gt.iter().map(|f| f.iter().map(|(i, b)| PredBox { id: *i, bbox: Box3D { x: b.x + 3.0, ..*b } }).collect()).collect(),
        gt,
    };
    let d = map_detection(&[shifted]).unwrap();
    assert_eq!(&d.ap[..3], &[0.0, 0.0, 0.0]);
    assert!((d.ap[3] - 1.0).abs() < 1e-12);
    assert!((d.map - 0.25).abs() < 1e-12);
    // no match within 2 m: errors fall back to 1
    assert_eq!(d.ate, 1.0);
}

#[test]
fn greedy_matching_follows_score_order() {
    let preds = [pred(1, 0.9, 0.0, 0.3), pred(2, 0.2, 0.0, 0.8), pred(3, 5.0, 0.0, 0.5)];
    let gt = [car(0.0, 0.0, 1.0), car(1.5, 0.0, 1.0)];
    let m = match_frame(&preds, &gt, 2.0);
    // pred 2 (0.8) takes the nearest gt 0; pred 1 (0.3) then gets gt 1; pred 3 is too far
    assert_eq!(m.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(1, 0), (0, 1)]);
    assert_eq!(m.false_positives, vec![2]);
    assert!(m.missed.is_empty());
    assert_eq!(match_frame(&[], &gt, 2.0).missed, vec![0, 1]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let preds: Vec<PredBox> = (0..rng.random_range(0..5)).map(|i| pred(i, rng.random_range(0.0..6.0), 0.0, rng.random_range(0.0..1.0))).collect();
        let gt: Vec<Box3D> = (0..rng.random_range(0..5)).map(|_| car(rng.random_range(0.0..6.0), 0.0, 1.0)).collect();
        let m = match_frame(&preds, &gt, 1.5);
        // definition: walking predictions by score, each match is the nearest
        // gt not claimed by a higher-scored prediction
        let mut by_score: Vec<usize> = (0..preds.len()).collect();
        by_score.sort_by(|&a, &b| preds[b].bbox.score.total_cmp(&preds[a].bbox.score));
        let mut claimed = vec![false; gt.len()];
        for p in by_score {
            let nearest = (0..gt.len())
                .filter(|&g| !claimed[g] && preds[p].bbox.center_distance(&gt[g]) < 1.5)
                .min_by(|&a, &b| preds[p].bbox.center_distance(&gt[a]).total_cmp(&preds[p].bbox.center_distance(&gt[b])));
            let got = m.pairs.iter().find(|x| x.0 == p).map(|x| x.1);
            assert_eq!(got, nearest);
            if let Some(g) = nearest {
                claimed[g] = true;
            }
        }
        assert_eq!(m.pairs.len() + m.false_positives.len(), preds.len());
        assert_eq!(m.pairs.len() + m.missed.len(), gt.len());
    }
}

/// AP by enumerating score thresholds: matches of higher-scored boxes do
/// not depend on lower-scored ones, so each threshold gives one PR point.
fn brute_force_ap(seq: &Sequence, radius: f64) -> f64 {
    let n_gt: usize = seq.gt.iter().map(|f| f.len()).sum();
    let mut scores: Vec<f64> = seq.preds.iter().flatten().map(|p| p.bbox.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut points = Vec::new();
    for s in scores {
        let (mut tp, mut n) = (0, 0);
        for (t, gt) in seq.gt.iter().enumerate() {
            let kept: Vec<PredBox> = seq.preds[t].iter().filter(|p| p.bbox.score >= s).copied().collect();
            let g: Vec<Box3D> = gt.iter().map(|x| x.1).collect();
            tp += match_frame(&kept, &g, radius).pairs.len();
            n += kept.len();
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / n as f64));
    }
    let mut acc = 0.0;
    for k in 11..=100 {
        let r = k as f64 / 100.0;
        let p = points.iter().filter(|x| x.0 >= r - 1e-12).map(|x| x.1).fold(0.0, f64::max);
        acc += (p - 0.1).max(0.0);
    }
    acc / 90.0 / 0.9
}

fn random_sequence(rng: &mut ChaCha8Rng, n_objects: usize, n_frames: usize) -> Sequence {
    let starts: Vec<(f64, f64)> = (0..n_objects).map(|_| (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0))).collect();
    let gt: Vec<Vec<(u64, Box3D)>> = (0..n_frames)
        .map(|t| starts.iter().enumerate().map(|(i, &(x, y))| (i as u64, car(x + t as f64, y, 1.0))).collect())
        .collect();
    let preds = gt
        .iter()
        .map(|f| {
            let mut out = Vec::new();
            for (i, b) in f {
                if rng.random_bool(0.8) {
                    let id = *i + if rng.random_bool(0.1) { 50 } else { 0 };
                    out.push(pred(id, b.x + rng.random_range(-2.5..2.5), b.y + rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0)));
                }
            }
            for _ in 0..rng.random_range(0..3) {
                out.push(pred(99, rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(0.05..1.0)));
            }
            out
        })
        .collect();
    Sequence { preds, gt }
}

#[test]
fn average_precision_matches_threshold_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let seq = random_sequence(&mut rng, 10, 3);
        let d = map_detection(std::slice::from_ref(&seq)).unwrap();
        for (k, &r) in AP_THRESHOLDS.iter().enumerate() {
            assert!((d.ap[k] - brute_force_ap(&seq, r)).abs() < 1e-12, "radius {r}: {} vs {}", d.ap[k], brute_force_ap(&seq, r));
        }
        assert!((0.0..=1.0).contains(&d.map));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn metrics_ignore_row_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_sequence(&mut rng, 6, 5);
        let mut shuffled = seq.clone();
        for f in &mut shuffled.preds {
            f.shuffle(&mut rng);
        }
        for f in &mut shuffled.gt {
            f.shuffle(&mut rng);
        }
        let (a, b) = (amota(&[seq.clone()], 2.0).unwrap(), amota(&[shuffled.clone()], 2.0).unwrap());
        prop_assert_eq!(a.amota, b.amota);
        prop_assert_eq!(a.best, b.best);
        prop_assert_eq!(map_detection(&[seq]).unwrap(), map_detection(&[shuffled]).unwrap());
        prop_assert!(a.amota >= 0.0 && a.amota <= 1.0 && a.amota_raw <= a.amota);
    }

    #[test]
    fn cost_is_linear_in_instances(n in 0usize..60, d in (1usize..40).prop_map(|x| 2 * x)) {
        let one = transmission_cost(&[message_bytes(1, d)], 10.0) - transmission_cost(&[message_bytes(0, d)], 10.0);
        let got = transmission_cost(&[message_bytes(n, d)], 10.0) - transmission_cost(&[message_bytes(0, d)], 10.0);
        prop_assert!((got - n as f64 * one).abs() < 1e-9);
    }
}

#[test]
fn transmission_cost_examples() {
    let body = message_bytes(10, 32) - message_bytes(0, 32);
    assert_eq!(body, 10 * (2 * 32 * 4 + 3 * 4 + 4 + 1));
    assert_eq!(body, 2730);
    assert_eq!(transmission_cost(&[body], 10.0), 27300.0);
    let empty = V2xMessage::empty(32).byte_size();
    assert_eq!(transmission_cost(&[empty; 5], 10.0), empty as f64 * 10.0);
    assert_eq!(transmission_cost(&[], 10.0), 0.0);
    for n in 0..=50 {
        assert!(100 * message_bytes(n, 32) <= dense_grid_bytes(32));
    }
    assert_eq!(dense_grid_bytes(32), 5_120_000);
}

#[test]
fn sweep_kinds_and_levels() {
    for k in [SweepKind::Latency, SweepKind::RotationNoise, SweepKind::NoInfra, SweepKind::History] {
        assert_eq!(k.name().parse::<SweepKind>().unwrap(), k);
        k.validate_levels(&k.default_levels()).unwrap();
        assert!(k.validate_levels(&[]).is_err());
    }
    assert!("warp".parse::<SweepKind>().is_err());
    assert!(SweepKind::History.validate_levels(&[1.5]).is_err());
    assert!(SweepKind::Latency.validate_levels(&[-100.0]).is_err());
    assert_eq!(parse_levels("0, 100,300 ,500").unwrap(), vec![0.0, 100.0, 300.0, 500.0]);
    assert!(parse_levels("1,x").is_err());
    assert_eq!(link_for(SweepKind::Latency, 300.0, "compensated", 10.0, 1).delay_frames, 3);
    assert_eq!(link_for(SweepKind::Latency, 500.0, "uncompensated", 2.0, 1).delay_frames, 1);
}

fn tiny_setup() -> (Config, Vec<Scenario>) {
    let cfg = Config {
        d: 8,
        heads: 2,
        caa_block: 4,
        tau: 2,
        n_fresh: 8,
        ..Config::default()
    };
    let mut spec = ScenarioSpec::from_config(&cfg).unwrap();
    spec.n_frames = 6;
    let sc = (0..2).map(|i| generate_scenario(&spec, 40 + i).unwrap()).collect();
    (cfg, sc)
}

#[test]
fn zero_levels_reproduce_the_plain_run() {
    let (cfg, sc) = tiny_setup();
    let (model, ps) = CoopModel::new(&cfg).unwrap();
    let base = evaluate(&model, &ps, &cfg, &sc, Mode::Coop, LinkConditions::default(), "base").unwrap();
    for kind in [SweepKind::Latency, SweepKind::RotationNoise, SweepKind::NoInfra] {
        let pts = link_sweep(&model, &ps, &cfg, &sc, kind, &[0.0]).unwrap();
        assert_eq!(pts.len(), kind.variants().len());
        for (p, v) in pts.iter().zip(kind.variants()) {
            let link = link_for(kind, 0.0, v, cfg.frame_rate, cfg.seed);
            let ev = evaluate(&model, &ps, &cfg, &sc, Mode::Coop, link, "x").unwrap();
            assert_eq!(ev.outputs, base.outputs, "{} {v}", kind.name());
            assert_eq!(MetricReport { label: base.report.label.clone(), ..p.report.clone() }, base.report);
        }
    }
}

#[test]
fn no_fusion_costs_nothing_and_reports_round_trip() {
    let (cfg, sc) = tiny_setup();
    let (model, ps) = CoopModel::new(&cfg).unwrap();
    let none = evaluate(&model, &ps, &cfg, &sc, Mode::NoFusion, LinkConditions::default(), "no_fusion").unwrap();
    assert_eq!(none.report.bps, 0.0);
    let late = evaluate(&model, &ps, &cfg, &sc, Mode::LateFusion, LinkConditions::default(), "late_fusion").unwrap();
    let again = score_outputs(&cfg, &sc, &late.outputs, "late_fusion").unwrap();
    assert_eq!(again, late.report);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    write_reports_csv(&p, &[none.report.clone(), late.report.clone()]).unwrap();
    assert_eq!(read_reports_csv(&p).unwrap(), vec![none.report, late.report]);
    let header = std::fs::read_to_string(&p).unwrap();
    assert!(header.starts_with("label,amota,amota_raw,amotp,mota,ids,mt,ml,"));
}

#[test]
fn pair_counts_precision_recall_f1() {
    let mut c = PairCounts::default();
    c.add(&[(0, 0), (1, 2)], &[(0, 0), (1, 1), (2, 2)]);
    assert_eq!((c.correct, c.predicted, c.actual), (1, 2, 3));
    assert!((c.precision() - 0.5).abs() < 1e-12);
    assert!((c.recall() - 1.0 / 3.0).abs() < 1e-12);
    assert!((c.f1() - 0.4).abs() < 1e-12);
    c.add(&[(3, 3)], &[(3, 3)]);
    assert!((c.precision() - 2.0 / 3.0).abs() < 1e-12);
    assert!((c.recall() - 0.5).abs() < 1e-12);
}

#[test]
fn pair_counts_empty_sets() {
    let c = PairCounts::default();
    assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
    let mut none_found = PairCounts::default();
    none_found.add(&[], &[(0, 0)]);
    assert_eq!((none_found.precision(), none_found.recall(), none_found.f1()), (1.0, 0.0, 0.0));
}
