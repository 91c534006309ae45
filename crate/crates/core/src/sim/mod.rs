//! Synthetic two-agent traffic scenes and emulated per-agent detectors.
//!
//! A scenario is a set of ground-truth tracks in a world frame plus a
//! moving vehicle agent and a static roadside infrastructure agent. Each
//! agent observes the scene through [`observe`], which returns noisy boxes
//! in the agent's own frame together with latent feature vectors. The
//! latent of an object is a fixed embedding of its class, size and heading
//! (as seen by the agent) mapped through the agent's domain operator.

mod format;

pub use format::{read_frame_records, read_scenario, write_scenario, FrameRecord, GtRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use cooptrack_numerics::rotation::wrap_angle;
use cooptrack_numerics::Matrix;

use crate::config::Config;
use crate::error::{CoopError, Result};
use crate::geometry::{in_range, Box3D, Pose, CAR, PEDESTRIAN, TRUCK};

/// Width of the object descriptor fed to the latent embedding.
pub const DESCRIPTOR_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Infrastructure,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Infrastructure => "infrastructure",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            AgentKind::Vehicle => 0,
            AgentKind::Infrastructure => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub horizontal_range: [f64; 4],
    pub height_range: [f64; 2],
    pub sigma_pos: f64,
    pub sigma_dim: f64,
    pub sigma_yaw: f64,
    pub sigma_vel: f64,
    pub sigma_feat: f64,
    pub miss_rate: f64,
    pub clutter_rate: f64,
    pub occlusion: bool,
}

impl SensorSpec {
    pub fn noiseless(mut self) -> Self {
        self.sigma_pos = 0.0;
        self.sigma_dim = 0.0;
        self.sigma_yaw = 0.0;
        self.sigma_vel = 0.0;
        self.sigma_feat = 0.0;
        self.miss_rate = 0.0;
        self.clutter_rate = 0.0;
        self
    }

    fn validate(&self, who: &str) -> Result<()> {
        let r = &self.horizontal_range;
        if !(r[0] < r[1] && r[2] < r[3] && self.height_range[0] < self.height_range[1]) {
            return Err(CoopError::Config(format!("{who} ranges must be ordered")));
        }
        if !(0.0..1.0).contains(&self.miss_rate) || !(self.clutter_rate >= 0.0) {
            return Err(CoopError::Config(format!("{who} miss/clutter rates out of range")));
        }
        Ok(())
    }
}

/// An explicitly placed object (world frame). A constant `yaw_rate` makes
/// it drive a circle; zero drives straight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_label: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub frame_rate: f64,
    pub n_frames: usize,
    pub d: usize,
    pub n_cars: usize,
    pub n_pedestrians: usize,
    pub n_trucks: usize,
    pub ego_speed: f64,
    /// Chance per moving object of one yaw-rate turn during the scenario.
    pub turn_probability: f64,
    pub vehicle: SensorSpec,
    pub infra: SensorSpec,
    pub domain_gap: bool,
    pub domain_seed: u64,
    /// `[x, y, z, yaw]` of the infrastructure sensor in the world frame;
    /// drawn per scenario when absent.
    pub infra_pose: Option<[f64; 4]>,
    /// When non-empty, replaces the random population.
    pub objects: Vec<ObjectSpec>,
}

impl ScenarioSpec {
    pub fn from_config(c: &Config) -> Result<Self> {
        if !c.scenario_file.is_empty() {
            let path = std::path::Path::new(&c.scenario_file);
            let text = std::fs::read_to_string(path).map_err(|e| CoopError::io(path, e))?;
            return toml::from_str(&text).map_err(|e| CoopError::Parse {
                context: c.scenario_file.clone(),
                message: e.to_string(),
            });
        }
        let sensor = |range: [f64; 4], occlusion: bool| SensorSpec {
            horizontal_range: range,
            height_range: c.height_range,
            sigma_pos: c.sigma_pos,
            sigma_dim: c.sigma_dim,
            sigma_yaw: c.sigma_yaw,
            sigma_vel: c.sigma_vel,
            sigma_feat: c.sigma_feat,
            miss_rate: c.miss_rate,
            clutter_rate: c.clutter_rate,
            occlusion,
        };
        Ok(Self {
            frame_rate: c.frame_rate,
            n_frames: c.n_frames(),
            d: c.d,
            n_cars: c.n_cars,
            n_pedestrians: c.n_pedestrians,
            n_trucks: c.n_trucks,
            ego_speed: c.ego_speed,
            turn_probability: 0.3,
            vehicle: sensor(c.vehicle_range, c.vehicle_occlusion),
            infra: sensor(c.infra_range, false),
            domain_gap: c.domain_gap,
            domain_seed: c.domain_seed,
            infra_pose: None,
            objects: Vec::new(),
        })
    }

    pub fn noiseless(mut self) -> Self {
        self.vehicle = self.vehicle.noiseless();
        self.infra = self.infra.noiseless();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(CoopError::Config("scenario needs at least one frame".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(CoopError::Config("frame rate must be positive".into()));
        }
        if self.d == 0 {
            return Err(CoopError::Config("latent width must be positive".into()));
        }
        self.vehicle.validate("vehicle")?;
        self.infra.validate("infrastructure")
    }

    pub fn sensor(&self, kind: AgentKind) -> &SensorSpec {
        match kind {
            AgentKind::Vehicle => &self.vehicle,
            AgentKind::Infrastructure => &self.infra,
        }
    }
}

/// Latent map `x ↦ x Dᵀ + e` applied to object embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainOperator {
    pub d: Matrix,
    pub e: Vec<f64>,
}

impl DomainOperator {
    pub fn identity(dim: usize) -> Self {
        Self {
            d: Matrix::identity(dim),
            e: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.e.clone();
        for (i, o) in out.iter_mut().enumerate() {
            *o += cooptrack_numerics::matrix::dot(self.d.row(i), x);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    /// Agent-to-world pose per frame.
    pub poses: Vec<Pose>,
    pub sensor: SensorSpec,
    pub domain: DomainOperator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrack {
    pub track_id: u64,
    pub class_label: usize,
    /// World-frame box per frame.
    pub boxes: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub seed: u64,
    pub tracks: Vec<GroundTruthTrack>,
    pub vehicle: AgentConfig,
    pub infra: AgentConfig,
    /// Infrastructure-to-vehicle pose per frame.
    pub relative_poses: Vec<Pose>,
    /// Fixed projection from object descriptors to latent space.
    pub embedding: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub latent: Vec<f64>,
    /// Source object; `None` for clutter.
    pub gt_id: Option<u64>,
}

impl Scenario {
    pub fn n_frames(&self) -> usize {
        self.spec.n_frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.spec.frame_rate
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.spec.frame_rate
    }

    pub fn agent(&self, kind: AgentKind) -> &AgentConfig {
        match kind {
            AgentKind::Vehicle => &self.vehicle,
            AgentKind::Infrastructure => &self.infra,
        }
    }

    /// Ground-truth boxes of frame `t` in the agent's frame (all objects).
    pub fn gt_in_agent_frame(&self, kind: AgentKind, t: usize) -> Vec<(u64, Box3D)> {
        let to_agent = self.agent(kind).poses[t].inverse();
        self.tracks
            .iter()
            .map(|tr| (tr.track_id, to_agent.apply_box(&tr.boxes[t])))
            .collect()
    }

    /// Objects the agent can perceive at frame `t`: inside its range and not
    /// shadowed, in the agent's frame. Detector misses are not applied.
    pub fn visible_gt(&self, kind: AgentKind, t: usize) -> Vec<(u64, Box3D)> {
        let sensor = &self.agent(kind).sensor;
        let all = self.gt_in_agent_frame(kind, t);
        let occluded = if sensor.occlusion {
            occlusion_mask(&all.iter().map(|(_, b)| *b).collect::<Vec<_>>())
        } else {
            vec![false; all.len()]
        };
        all.into_iter()
            .zip(occluded)
            .filter(|((_, b), occ)| !occ && in_range(&b.center(), &sensor.horizontal_range, &sensor.height_range))
            .map(|(x, _)| x)
            .collect()
    }

    /// Objects visible to either agent and inside the vehicle range, in the
    /// vehicle frame. This is the cooperative ground truth.
    pub fn coop_gt(&self, t: usize) -> Vec<(u64, Box3D)> {
        let mut ids: Vec<u64> = self.visible_gt(AgentKind::Vehicle, t).iter().map(|g| g.0).collect();
        ids.extend(self.visible_gt(AgentKind::Infrastructure, t).iter().map(|g| g.0));
        ids.sort_unstable();
        ids.dedup();
        let s = &self.vehicle.sensor;
        self.gt_in_agent_frame(AgentKind::Vehicle, t)
            .into_iter()
            .filter(|(id, b)| ids.binary_search(id).is_ok() && in_range(&b.center(), &s.horizontal_range, &s.height_range))
            .collect()
    }

    /// Latent of a described object as the given agent perceives it,
    /// without detector noise.
    pub fn latent_of(&self, kind: AgentKind, b: &Box3D) -> Vec<f64> {
        let desc = descriptor(b);
        let raw: Vec<f64> = (0..self.embedding.rows())
            .map(|i| cooptrack_numerics::matrix::dot(self.embedding.row(i), &desc))
            .collect();
        self.agent(kind).domain.apply(&raw)
    }
}

/// Class one-hot, normalized size, and heading as (cos, sin).
pub fn descriptor(b: &Box3D) -> [f64; DESCRIPTOR_DIM] {
    let mut d = [0.0; DESCRIPTOR_DIM];
    d[b.class_label.min(2)] = 1.0;
    d[3] = b.w / 2.0;
    d[4] = b.l / 5.0;
    d[5] = b.h / 2.0;
    d[6] = b.theta.cos();
    d[7] = b.theta.sin();
    d
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian columns.
fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| gaussian(rng, 1.0)).collect();
            for c in &cols {
                let p = cooptrack_numerics::matrix::dot(c, &v);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
            let nv = cooptrack_numerics::matrix::dot(&v, &v).sqrt();
            if nv < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            cols.push(v);
        }
        if ok {
            let mut m = Matrix::zeros(n, n);
            for (j, c) in cols.iter().enumerate() {
                for i in 0..n {
                    m[(i, j)] = c[i];
                }
            }
            return m;
        }
    }
}

/// `U diag(s) Vᵀ` with singular values in `[0.7, 1.6]`, so the condition
/// number stays below 2.3.
pub fn sample_domain_operator(dim: usize, rng: &mut impl Rng) -> DomainOperator {
    let u = random_orthogonal(dim, rng);
    let v = random_orthogonal(dim, rng);
    let mut us = u.clone();
    for j in 0..dim {
        let s = rng.random_range(0.7..1.6);
        for i in 0..dim {
            us[(i, j)] *= s;
        }
    }
    DomainOperator {
        d: us.matmul_t(&v),
        e: (0..dim).map(|_| gaussian(rng, 0.1)).collect(),
    }
}

/// Embedding projection shared by all scenarios with the same domain seed.
pub fn embedding_matrix(dim: usize, domain_seed: u64) -> Matrix {
    let mut rng = rng_for(&[domain_seed, 0xE3B]);
    let scale = 1.0 / (DESCRIPTOR_DIM as f64).sqrt();
    let data = (0..dim * DESCRIPTOR_DIM).map(|_| gaussian(&mut rng, scale)).collect();
    Matrix::from_vec(dim, DESCRIPTOR_DIM, data).expect("shape")
}

pub fn domain_operators(spec: &ScenarioSpec) -> (DomainOperator, DomainOperator) {
    if !spec.domain_gap {
        return (DomainOperator::identity(spec.d), DomainOperator::identity(spec.d));
    }
    let mut rng = rng_for(&[spec.domain_seed, 0xD0]);
    let v = sample_domain_operator(spec.d, &mut rng);
    let i = sample_domain_operator(spec.d, &mut rng);
    (v, i)
}

fn class_size(class: usize, rng: &mut impl Rng) -> (f64, f64, f64) {
    match class {
        CAR => (rng.random_range(1.7..2.0), rng.random_range(4.0..4.9), rng.random_range(1.4..1.7)),
        PEDESTRIAN => (rng.random_range(0.5..0.8), rng.random_range(0.5..0.8), rng.random_range(1.6..1.9)),
        _ => (rng.random_range(2.4..2.6), rng.random_range(8.0..11.0), rng.random_range(3.2..3.8)),
    }
}

struct Motion {
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    /// `(start_time, end_time, yaw_rate)`
    turn: Option<(f64, f64, f64)>,
    constant_yaw_rate: f64,
}

fn roll_out(m: &Motion, class: usize, dims: (f64, f64, f64), n_frames: usize, dt: f64) -> Vec<Box3D> {
    let (w, l, h) = dims;
    let (mut x, mut y, mut hd) = (m.x, m.y, m.heading);
    let mut out = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        out.push(Box3D {
            x,
            y,
            z: h / 2.0,
            w,
            l,
            h,
            theta: wrap_angle(hd),
            vx: m.speed * hd.cos(),
            vy: m.speed * hd.sin(),
            class_label: class,
            score: 1.0,
        });
        let t = k as f64 * dt;
        let mut omega = m.constant_yaw_rate;
        if let Some((t0, t1, w)) = m.turn {
            if t >= t0 && t < t1 {
                omega += w;
            }
        }
        let mid = hd + omega * dt / 2.0;
        x += m.speed * dt * mid.cos();
        y += m.speed * dt * mid.sin();
        hd += omega * dt;
    }
    out
}

pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let n = spec.n_frames;
    let dt = 1.0 / spec.frame_rate;
    let mut rng = rng_for(&[seed, 0x5CE]);

    let vehicle_poses: Vec<Pose> = (0..n)
        .map(|k| Pose::from_yaw(0.0, [spec.ego_speed * dt * k as f64, 0.0, 0.0]))
        .collect();
    let travel = spec.ego_speed * dt * n as f64;

    let infra_pose = match spec.infra_pose {
        Some([x, y, z, yaw]) => Pose::from_yaw(yaw, [x, y, z]),
        None => {
            let side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let x0 = travel / 2.0 + rng.random_range(-10.0..25.0);
            let y0 = side * rng.random_range(22.0..32.0);
            let yaw = -side * std::f64::consts::FRAC_PI_2 + rng.random_range(-0.3..0.3);
            Pose::from_yaw(yaw, [x0, y0, 4.0])
        }
    };

    let mut motions: Vec<(usize, Motion, (f64, f64, f64))> = Vec::new();
    if spec.objects.is_empty() {
        let lanes = [-10.5, -7.0, -3.5, 3.5, 7.0, 10.5];
        for _ in 0..spec.n_cars {
            let dims = class_size(CAR, &mut rng);
            let m = if rng.random_bool(0.65) {
                let lane = lanes[rng.random_range(0..lanes.len())];
                let heading = if lane > 0.0 { std::f64::consts::PI } else { 0.0 };
                Motion {
                    x: rng.random_range(-35.0..travel + 45.0),
                    y: lane + rng.random_range(-0.4..0.4),
                    heading: heading + rng.random_range(-0.05..0.05),
                    speed: rng.random_range(2.0..11.0),
                    turn: None,
                    constant_yaw_rate: 0.0,
                }
            } else {
                let moving = rng.random_bool(0.5);
                Motion {
                    x: rng.random_range(-40.0..travel + 50.0),
                    y: rng.random_range(-45.0..45.0),
                    heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                    speed: if moving { rng.random_range(1.0..7.0) } else { 0.0 },
                    turn: None,
                    constant_yaw_rate: 0.0,
                }
            };
            motions.push((CAR, m, dims));
        }
        for _ in 0..spec.n_pedestrians {
            let dims = class_size(PEDESTRIAN, &mut rng);
            let m = Motion {
                x: rng.random_range(-30.0..travel + 40.0),
                y: rng.random_range(-30.0..30.0),
                heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                speed: rng.random_range(0.0..1.5),
                turn: None,
                constant_yaw_rate: 0.0,
            };
            motions.push((PEDESTRIAN, m, dims));
        }
        for _ in 0..spec.n_trucks {
            let dims = class_size(TRUCK, &mut rng);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let m = Motion {
                x: rng.random_range(-5.0..travel + 35.0),
                y: side * rng.random_range(13.0..15.0),
                heading: rng.random_range(-0.1..0.1),
                speed: 0.0,
                turn: None,
                constant_yaw_rate: 0.0,
            };
            motions.push((TRUCK, m, dims));
        }
        let duration = n as f64 * dt;
        for (_, m, _) in motions.iter_mut() {
            if m.speed > 0.0 && rng.random_bool(spec.turn_probability) {
                let t0 = rng.random_range(0.0..duration.max(1e-3));
                let len = rng.random_range(1.0..3.0);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                m.turn = Some((t0, t0 + len, sign * rng.random_range(0.2..0.5)));
            }
        }
    } else {
        for o in &spec.objects {
            let dims = match o.class_label {
                CAR => (1.8, 4.5, 1.6),
                PEDESTRIAN => (0.6, 0.6, 1.75),
                _ => (2.5, 10.0, 3.5),
            };
            motions.push((
                o.class_label,
                Motion {
                    x: o.x,
                    y: o.y,
                    heading: o.heading,
                    speed: o.speed,
                    turn: None,
                    constant_yaw_rate: o.yaw_rate,
                },
                dims,
            ));
        }
    }

    let tracks = motions
        .iter()
        .enumerate()
        .map(|(i, (class, m, dims))| GroundTruthTrack {
            track_id: i as u64 + 1,
            class_label: *class,
            boxes: roll_out(m, *class, *dims, n, dt),
        })
        .collect();

    let (dv, di) = domain_operators(spec);
    let infra_poses = vec![infra_pose; n];
    let relative_poses = vehicle_poses.iter().map(|v| v.inverse().compose(&infra_pose)).collect();
    Ok(Scenario {
        spec: spec.clone(),
        seed,
        tracks,
        vehicle: AgentConfig {
            kind: AgentKind::Vehicle,
            poses: vehicle_poses,
            sensor: spec.vehicle.clone(),
            domain: dv,
        },
        infra: AgentConfig {
            kind: AgentKind::Infrastructure,
            poses: infra_poses,
            sensor: spec.infra.clone(),
            domain: di,
        },
        relative_poses,
        embedding: embedding_matrix(spec.d, spec.domain_seed),
    })
}

/// Angular-overlap shadowing seen from the origin: an object is hidden
/// when at least 60% of its bearing interval is covered by nearer objects
/// that are at least 1.2 m tall.
pub fn occlusion_mask(boxes: &[Box3D]) -> Vec<bool> {
    let intervals: Vec<(f64, f64, f64, f64)> = boxes
        .iter()
        .map(|b| {
            let center = b.y.atan2(b.x);
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for c in b.corners_local() {
                let a = wrap_angle((b.y + c[1]).atan2(b.x + c[0]) - center);
                lo = lo.min(a);
                hi = hi.max(a);
            }
            (center, lo, hi, (b.x * b.x + b.y * b.y).sqrt())
        })
        .collect();
    let mut out = vec![false; boxes.len()];
    for (k, &(ck, lo, hi, rk)) in intervals.iter().enumerate() {
        if rk < 3.0 || hi - lo <= 0.0 {
            continue;
        }
        let mut covers: Vec<(f64, f64)> = Vec::new();
        for (j, &(cj, ljo, ljh, rj)) in intervals.iter().enumerate() {
            if j == k || rj >= rk || boxes[j].h < 1.2 {
                continue;
            }
            let off = wrap_angle(cj - ck);
            let (a, b) = ((off + ljo).max(lo), (off + ljh).min(hi));
            if b > a {
                covers.push((a, b));
            }
        }
        covers.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (a, b) in covers {
            match cur {
                Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
                Some((ca, cb)) => {
                    covered += cb - ca;
                    cur = Some((a, b));
                }
                None => cur = Some((a, b)),
            }
        }
        if let Some((ca, cb)) = cur {
            covered += cb - ca;
        }
        out[k] = covered / (hi - lo) >= 0.6;
    }
    out
}

/// Emulated detector output of one agent at frame `t`, in the agent frame.
pub fn observe(scenario: &Scenario, kind: AgentKind, t: usize, seed: u64) -> Vec<Detection> {
    assert!(t < scenario.n_frames(), "frame {t} outside scenario");
    let agent = scenario.agent(kind);
    let s = &agent.sensor;
    let mut rng = rng_for(&[seed, kind.index(), t as u64, 0x0B5]);
    let mut out = Vec::new();
    for (id, gt) in scenario.visible_gt(kind, t) {
        if s.miss_rate > 0.0 && rng.random_bool(s.miss_rate) {
            continue;
        }
        let mut b = gt;
        b.x += gaussian(&mut rng, s.sigma_pos);
        b.y += gaussian(&mut rng, s.sigma_pos);
        b.z += gaussian(&mut rng, 0.2 * s.sigma_pos);
        b.w = (b.w + gaussian(&mut rng, s.sigma_dim)).max(0.2);
        b.l = (b.l + gaussian(&mut rng, s.sigma_dim)).max(0.2);
        b.h = (b.h + gaussian(&mut rng, s.sigma_dim)).max(0.2);
        b.theta = wrap_angle(b.theta + gaussian(&mut rng, s.sigma_yaw));
        b.vx += gaussian(&mut rng, s.sigma_vel);
        b.vy += gaussian(&mut rng, s.sigma_vel);
        b.score = 1.0;
        let mut latent = scenario.latent_of(kind, &gt);
        for v in latent.iter_mut() {
            *v += gaussian(&mut rng, s.sigma_feat);
        }
        out.push(Detection {
            bbox: b,
            latent,
            gt_id: Some(id),
        });
    }
    if s.clutter_rate > 0.0 {
        let count = Poisson::new(s.clutter_rate).expect("positive rate").sample(&mut rng) as usize;
        let agent_z = agent.poses[t].t[2];
        let r = &s.horizontal_range;
        for _ in 0..count {
            let class = rng.random_range(0..3);
            let (w, l, h) = class_size(class, &mut rng);
            let speed = if class == TRUCK { 0.0 } else { rng.random_range(0.0..6.0) };
            let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let fake = Box3D {
                x: rng.random_range(r[0]..r[1]),
                y: rng.random_range(r[2]..r[3]),
                z: h / 2.0 - agent_z,
                w,
                l,
                h,
                theta,
                vx: speed * theta.cos(),
                vy: speed * theta.sin(),
                class_label: class,
                score: 1.0,
            };
            let mut latent = scenario.latent_of(kind, &fake);
            for v in latent.iter_mut() {
                *v += gaussian(&mut rng, s.sigma_feat);
            }
            out.push(Detection {
                bbox: fake,
                latent,
                gt_id: None,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> ScenarioSpec {
        ScenarioSpec::from_config(&Config::default()).unwrap()
    }

    fn single(obj: ObjectSpec, frames: usize) -> ScenarioSpec {
        let mut s = base_spec().noiseless();
        s.n_frames = frames;
        s.objects = vec![obj];
        s.ego_speed = 0.0;
        s.domain_gap = false;
        s.vehicle.occlusion = false;
        s.infra_pose = Some([20.0, -25.0, 4.0, std::f64::consts::FRAC_PI_2]);
        s
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = base_spec();
        let a = generate_scenario(&s, 42).unwrap();
        let b = generate_scenario(&s, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(observe(&a, AgentKind::Vehicle, 3, 42), observe(&b, AgentKind::Vehicle, 3, 42));
        assert_ne!(a, generate_scenario(&s, 43).unwrap());
    }

    #[test]
    fn zero_frames_rejected() {
        let mut s = base_spec();
        s.n_frames = 0;
        assert!(matches!(generate_scenario(&s, 1), Err(CoopError::Config(_))));
    }

    #[test]
    fn static_object_keeps_its_box() {
        let s = single(ObjectSpec { class_label: CAR, x: 10.0, y: 2.0, heading: 0.3, speed: 0.0, yaw_rate: 0.0 }, 10);
        let sc = generate_scenario(&s, 1).unwrap();
        assert_eq!(sc.tracks.len(), 1);
        assert!(sc.tracks[0].boxes.iter().all(|b| *b == sc.tracks[0].boxes[0]));
    }

    #[test]
    fn constant_speed_kinematics() {
        let s = single(ObjectSpec { class_label: CAR, x: 0.0, y: 5.0, heading: 0.0, speed: 5.0, yaw_rate: 0.0 }, 10);
        let sc = generate_scenario(&s, 1).unwrap();
        for w in sc.tracks[0].boxes.windows(2) {
            assert!((w[1].x - w[0].x - 0.5).abs() < 1e-12);
            assert_eq!(w[1].y, w[0].y);
        }
    }

    #[test]
    fn out_of_range_objects_are_not_detected() {
        let s = single(ObjectSpec { class_label: CAR, x: 80.0, y: 0.0, heading: 0.0, speed: 0.0, yaw_rate: 0.0 }, 2);
        let sc = generate_scenario(&s, 1).unwrap();
        assert!(observe(&sc, AgentKind::Vehicle, 0, 1).is_empty());
    }

    #[test]
    fn noiseless_detection_equals_ground_truth() {
        let s = single(ObjectSpec { class_label: CAR, x: 12.0, y: -3.0, heading: 0.5, speed: 3.0, yaw_rate: 0.0 }, 3);
        let sc = generate_scenario(&s, 1).unwrap();
        for kind in [AgentKind::Vehicle, AgentKind::Infrastructure] {
            let dets = observe(&sc, kind, 1, 9);
            assert_eq!(dets.len(), 1);
            let world = sc.agent(kind).poses[1].apply_box(&dets[0].bbox);
            let gt = sc.tracks[0].boxes[1];
            for (a, b) in world.to_array().iter().zip(gt.to_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_operators_give_identical_latents() {
        let mut s = single(ObjectSpec { class_label: CAR, x: 12.0, y: -3.0, heading: 0.5, speed: 0.0, yaw_rate: 0.0 }, 1);
        // Aligned frames so the heading descriptor agrees too.
        s.infra_pose = Some([5.0, 0.0, 0.0, 0.0]);
        let sc = generate_scenario(&s, 1).unwrap();
        let v = observe(&sc, AgentKind::Vehicle, 0, 1);
        let i = observe(&sc, AgentKind::Infrastructure, 0, 1);
        assert_eq!(v[0].latent, i[0].latent);
    }

    #[test]
    fn domain_operator_is_well_conditioned() {
        let mut rng = rng_for(&[3]);
        let op = sample_domain_operator(8, &mut rng);
        // power iteration on DᵀD for the extreme singular values
        let dtd = op.d.t_matmul(&op.d);
        let mut x = vec![1.0; 8];
        for _ in 0..200 {
            let y: Vec<f64> = (0..8).map(|i| cooptrack_numerics::matrix::dot(dtd.row(i), &x)).collect();
            let n = cooptrack_numerics::matrix::dot(&y, &y).sqrt();
            x = y.iter().map(|v| v / n).collect();
        }
        let top: f64 = (0..8).map(|i| cooptrack_numerics::matrix::dot(dtd.row(i), &x) * x[i]).sum();
        assert!(top.sqrt() <= 1.6 + 1e-9);
        let shifted = dtd.sub(&Matrix::identity(8).scale(top));
        let mut y = vec![1.0; 8];
        for _ in 0..500 {
            let z: Vec<f64> = (0..8).map(|i| cooptrack_numerics::matrix::dot(shifted.row(i), &y)).collect();
            let n = cooptrack_numerics::matrix::dot(&z, &z).sqrt();
            y = z.iter().map(|v| v / n).collect();
        }
        let low: f64 = (0..8).map(|i| cooptrack_numerics::matrix::dot(dtd.row(i), &y) * y[i]).sum();
        assert!(top.sqrt() / low.sqrt() < 5.0);
    }

    #[test]
    fn relative_pose_matches_agent_poses() {
        let sc = generate_scenario(&base_spec(), 5).unwrap();
        for t in [0, 10, 30] {
            let p = [3.0, -2.0, 1.0];
            let via_world = sc.vehicle.poses[t].inverse().apply(&sc.infra.poses[t].apply(&p));
            let direct = sc.relative_poses[t].apply(&p);
            for k in 0..3 {
                assert!((via_world[k] - direct[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn infra_detections_land_near_vehicle_frame_truth() {
        let sc = generate_scenario(&base_spec(), 11).unwrap();
        let sigma = sc.spec.infra.sigma_pos;
        let (mut inside, mut total) = (0, 0);
        for t in 0..sc.n_frames() {
            let gt: std::collections::HashMap<u64, Box3D> = sc.gt_in_agent_frame(AgentKind::Vehicle, t).into_iter().collect();
            for det in observe(&sc, AgentKind::Infrastructure, t, 11) {
                let Some(id) = det.gt_id else { continue };
                let p = sc.relative_poses[t].apply(&det.bbox.center());
                let g = gt[&id];
                total += 1;
                if (p[0] - g.x).abs() <= 3.0 * sigma && (p[1] - g.y).abs() <= 3.0 * sigma {
                    inside += 1;
                }
            }
        }
        assert!(total > 100);
        assert!(inside as f64 / total as f64 > 0.98, "{inside}/{total}");
    }

    #[test]
    fn nearer_wall_hides_object_behind_it() {
        let mk = |x: f64, y: f64, w: f64, l: f64, h: f64| Box3D {
            x, y, z: 0.0, w, l, h, theta: std::f64::consts::FRAC_PI_2, vx: 0.0, vy: 0.0, class_label: CAR, score: 1.0,
        };
        let wall = mk(6.0, 0.0, 2.5, 10.0, 3.5);
        let hidden = mk(20.0, 0.0, 1.8, 4.5, 1.6);
        let beside = mk(20.0, 40.0, 1.8, 4.5, 1.6);
        assert_eq!(occlusion_mask(&[wall, hidden, beside]), vec![false, true, false]);
    }
}
