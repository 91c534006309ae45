//! Box regression and classification heads.

use cooptrack_numerics::nn::MlpCache;
use cooptrack_numerics::rotation::wrap_angle;
use cooptrack_numerics::{sigmoid, Activation, Init, Matrix, Mlp, ParamId, ParamStore};
use rand::Rng;

use crate::geometry::Box3D;
use crate::mdfe::InstanceFeatures;

/// Regression outputs per instance: center offset (3), log size (3),
/// heading as (sin, cos), planar velocity (2).
pub const REG_DIM: usize = 10;
const LOG_SIZE_RANGE: (f64, f64) = (-3.0, 3.0);
/// Output bias at initialization: a car-sized box facing +x.
const REG_PRIOR: [f64; REG_DIM] = [0.0, 0.0, 0.0, 0.587_786_664_902_119, 1.504_077_396_776_274, 0.470_003_629_245_736, 0.0, 1.0, 0.0, 0.0];
const CLS_PRIOR: f64 = -2.0;

#[derive(Clone, Debug)]
pub struct DecodeHeads {
    pub reg: Mlp,
    pub cls: Mlp,
    pub n_classes: usize,
}

pub struct HeadsCache {
    reg: MlpCache,
    cls: MlpCache,
}

/// Decoded instances plus the raw head outputs they came from.
pub struct Decoded {
    pub reg: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    pub boxes: Vec<Box3D>,
    pub cache: HeadsCache,
}

impl DecodeHeads {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let reg = Mlp::new(ps, &format!("{name}.reg"), &[d, d, REG_DIM], Activation::Relu, Init::Zeros, rng);
        let cls = Mlp::new(ps, &format!("{name}.cls"), &[d, d, n_classes], Activation::Relu, Init::Zeros, rng);
        let rb = reg.layers.last().expect("layers").bias;
        ps.value_mut(rb).data_mut().copy_from_slice(&REG_PRIOR);
        let cb = cls.layers.last().expect("layers").bias;
        ps.value_mut(cb).data_mut().iter_mut().for_each(|v| *v = CLS_PRIOR);
        Self { reg, cls, n_classes }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.reg.params();
        p.extend(self.cls.params());
        p
    }

    /// Regression from the motion features, classes from the semantic ones.
    pub fn run(&self, ps: &ParamStore, feats: &InstanceFeatures, refs: &Matrix) -> Decoded {
        let (reg, rc) = self.reg.forward(ps, &feats.m);
        let (logits, cc) = self.cls.forward(ps, &feats.s);
        let probs = logits.map(sigmoid);
        let boxes = (0..reg.rows()).map(|r| decode_box(reg.row(r), refs.row(r), probs.row(r))).collect();
        Decoded {
            reg,
            logits,
            probs,
            boxes,
            cache: HeadsCache { reg: rc, cls: cc },
        }
    }

    /// Gradients w.r.t. the motion and semantic inputs.
    pub fn backward(&self, ps: &mut ParamStore, cache: &HeadsCache, dreg: &Matrix, dlogits: &Matrix) -> InstanceFeatures {
        InstanceFeatures {
            m: self.reg.backward(ps, &cache.reg, dreg),
            s: self.cls.backward(ps, &cache.cls, dlogits),
        }
    }

    /// Planar velocity read from the regression head alone.
    pub fn velocities(&self, ps: &ParamStore, m: &Matrix) -> Vec<[f64; 2]> {
        let reg = self.reg.infer(ps, m);
        (0..reg.rows()).map(|r| [reg[(r, 8)], reg[(r, 9)]]).collect()
    }
}

/// Box from one regression row, its reference point and class
/// probabilities. Score is the top class probability.
pub fn decode_box(reg: &[f64], reference: &[f64], probs: &[f64]) -> Box3D {
    let size = |v: f64| v.clamp(LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1).exp();
    let (class_label, score) = probs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    Box3D {
        x: reference[0] + reg[0],
        y: reference[1] + reg[1],
        z: reference[2] + reg[2],
        w: size(reg[3]),
        l: size(reg[4]),
        h: size(reg[5]),
        theta: wrap_angle(reg[6].atan2(reg[7])),
        vx: reg[8],
        vy: reg[9],
        class_label,
        score: score.max(0.0),
    }
}

/// Regression target that decodes exactly to `gt` from `reference`.
pub fn regression_target(gt: &Box3D, reference: &[f64]) -> [f64; REG_DIM] {
    [
        gt.x - reference[0],
        gt.y - reference[1],
        gt.z - reference[2],
        gt.w.ln(),
        gt.l.ln(),
        gt.h.ln(),
        gt.theta.sin(),
        gt.theta.cos(),
        gt.vx,
        gt.vy,
    ]
}
