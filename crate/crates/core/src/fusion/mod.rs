//! Cross-agent alignment, graph-based association, matching, and gated
//! aggregation of vehicle and infrastructure instances.

mod message;

pub use message::{instance_bytes, message_bytes, V2xMessage, HEADER_BYTES};

use cooptrack_numerics::nn::MlpCache;
use cooptrack_numerics::{hungarian, rot6d_encode, sigmoid, Activation, Init, Matrix, Mlp, ParamId, ParamStore};
use rand::Rng;

use crate::error::{CoopError, Result};
use crate::geometry::Pose;
use crate::mdfe::InstanceFeatures;

/// Translation scale applied to the pose code before the alignment heads.
const POSE_INPUT_SCALE: f64 = 0.02;
/// Scale applied to point differences before the edge MLP.
const EDGE_INPUT_SCALE: f64 = 0.1;

/// 6D rotation code followed by the raw translation.
pub fn encode_pose(pose: &Pose) -> Result<[f64; 9]> {
    let r = rot6d_encode(&pose.r)?;
    Ok([r[0], r[1], r[2], r[3], r[4], r[5], pose.t[0], pose.t[1], pose.t[2]])
}

/// Block-diagonal latent map `x ↦ x R̂ᵀ + t̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTransform {
    pub block: usize,
    pub r: Matrix,
    pub t: Vec<f64>,
}

impl LatentTransform {
    pub fn identity(d: usize, block: usize) -> Self {
        Self {
            block,
            r: Matrix::identity(d),
            t: vec![0.0; d],
        }
    }

    /// `I + blockdiag(residual)` where `residual` holds `d/k` row-major
    /// `k×k` blocks.
    pub fn assemble(d: usize, block: usize, residual: &[f64], t: Vec<f64>) -> Result<Self> {
        if block == 0 || d % block != 0 {
            return Err(CoopError::Config(format!("feature width {d} not divisible by block size {block}")));
        }
        assert_eq!(residual.len(), d * block, "rotation head width");
        let mut r = Matrix::identity(d);
        let kk = block * block;
        for b in 0..d / block {
            for i in 0..block {
                for j in 0..block {
                    r[(b * block + i, b * block + j)] += residual[b * kk + i * block + j];
                }
            }
        }
        Ok(Self { block, r, t })
    }

    /// Gradient of the block entries given `dR̂`.
    fn residual_grad(&self, dr: &Matrix) -> Vec<f64> {
        let (d, k) = (self.r.rows(), self.block);
        let mut g = vec![0.0; d * k];
        for b in 0..d / k {
            for i in 0..k {
                for j in 0..k {
                    g[b * k * k + i * k + j] = dr[(b * k + i, b * k + j)];
                }
            }
        }
        g
    }
}

/// Row-wise `X R̂ᵀ + t̂`.
pub fn caa_align(x: &Matrix, t: &LatentTransform) -> Matrix {
    let mut y = x.matmul_t(&t.r);
    y.add_row_broadcast(&Matrix::row_vector(&t.t));
    y
}

/// Rotation and translation heads for one feature kind.
#[derive(Clone, Debug)]
pub struct TransformHeads {
    pub rot: Mlp,
    pub trans: Mlp,
    pub d: usize,
    pub block: usize,
}

struct HeadsCache {
    rot: MlpCache,
    trans: MlpCache,
    transform: LatentTransform,
}

impl TransformHeads {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, block: usize, rng: &mut impl Rng) -> Result<Self> {
        if block == 0 || d % block != 0 {
            return Err(CoopError::Config(format!("feature width {d} not divisible by block size {block}")));
        }
        Ok(Self {
            rot: Mlp::new(ps, &format!("{name}.rot"), &[9, d, d * block], Activation::Relu, Init::Zeros, rng),
            trans: Mlp::new(ps, &format!("{name}.trans"), &[9, d, d], Activation::Relu, Init::Zeros, rng),
            d,
            block,
        })
    }

    /// Number of rotation-head outputs, `d·k`.
    pub fn rotation_outputs(&self) -> usize {
        self.d * self.block
    }

    fn input(code: &[f64; 9]) -> Matrix {
        let mut v = code.to_vec();
        v[6..].iter_mut().for_each(|x| *x *= POSE_INPUT_SCALE);
        Matrix::row_vector(&v)
    }

    pub fn predict(&self, ps: &ParamStore, code: &[f64; 9]) -> LatentTransform {
        let input = Self::input(code);
        let res = self.rot.infer(ps, &input);
        let t = self.trans.infer(ps, &input);
        LatentTransform::assemble(self.d, self.block, res.data(), t.data().to_vec()).expect("validated at construction")
    }

    fn forward(&self, ps: &ParamStore, code: &[f64; 9]) -> HeadsCache {
        let input = Self::input(code);
        let (res, rot) = self.rot.forward(ps, &input);
        let (t, trans) = self.trans.forward(ps, &input);
        let transform = LatentTransform::assemble(self.d, self.block, res.data(), t.data().to_vec()).expect("validated at construction");
        HeadsCache { rot, trans, transform }
    }

    fn backward(&self, ps: &mut ParamStore, cache: &HeadsCache, x: &Matrix, dy: &Matrix) -> Matrix {
        let dx = dy.matmul(&cache.transform.r);
        let dr = dy.t_matmul(x);
        let dres = Matrix::row_vector(&cache.transform.residual_grad(&dr));
        self.rot.backward(ps, &cache.rot, &dres);
        self.trans.backward(ps, &cache.trans, &dy.sum_rows());
        dx
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.rot.params();
        p.extend(self.trans.params());
        p
    }
}

/// Pose-conditioned latent alignment with separate maps for motion and
/// semantic features.
#[derive(Clone, Debug)]
pub struct Caa {
    pub motion: TransformHeads,
    pub semantic: TransformHeads,
}

pub struct CaaCache {
    m: HeadsCache,
    s: HeadsCache,
    input: InstanceFeatures,
}

impl Caa {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, block: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            motion: TransformHeads::new(ps, &format!("{name}.motion"), d, block, rng)?,
            semantic: TransformHeads::new(ps, &format!("{name}.semantic"), d, block, rng)?,
        })
    }

    pub fn forward(&self, ps: &ParamStore, pose: &Pose, feats: &InstanceFeatures) -> Result<(InstanceFeatures, CaaCache)> {
        let code = encode_pose(pose)?;
        let m = self.motion.forward(ps, &code);
        let s = self.semantic.forward(ps, &code);
        let out = InstanceFeatures {
            m: caa_align(&feats.m, &m.transform),
            s: caa_align(&feats.s, &s.transform),
        };
        Ok((
            out,
            CaaCache {
                m,
                s,
                input: feats.clone(),
            },
        ))
    }

    /// Returns gradients w.r.t. the unaligned infrastructure features.
    pub fn backward(&self, ps: &mut ParamStore, cache: &CaaCache, dm: &Matrix, ds: &Matrix) -> (Matrix, Matrix) {
        let gm = self.motion.backward(ps, &cache.m, &cache.input.m, dm);
        let gs = self.semantic.backward(ps, &cache.s, &cache.input.s, ds);
        (gm, gs)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.motion.params();
        p.extend(self.semantic.params());
        p
    }
}

/// Component-wise `|p_V,i − p_I,j|`, row `i·N_I + j`.
pub fn pair_differences(pv: &Matrix, pi: &Matrix) -> Matrix {
    let (nv, ni) = (pv.rows(), pi.rows());
    let mut out = Matrix::zeros(nv * ni, 3);
    for i in 0..nv {
        for j in 0..ni {
            for k in 0..3 {
                out[(i * ni + j, k)] = (pv[(i, k)] - pi[(j, k)]).abs();
            }
        }
    }
    out
}

/// `Â = (P_V)(P_I)ᵀ/√d + Σ_k EW[·, k]` with `P_V = N_V W^V`, `P_I = N_I W^I`.
pub fn attention_logits(pv: &Matrix, pi: &Matrix, ew: &Matrix) -> Matrix {
    let d = pv.cols() as f64;
    let mut a = pv.matmul_t(pi).scale(1.0 / d.sqrt());
    let ni = pi.rows();
    for i in 0..pv.rows() {
        for j in 0..ni {
            a[(i, j)] += ew.row(i * ni + j).iter().sum::<f64>();
        }
    }
    a
}

/// Graph-attention affinity between vehicle and infrastructure instances.
#[derive(Clone, Debug)]
pub struct Gba {
    pub d: usize,
    pub node: Mlp,
    pub edge: Mlp,
    pub wv: ParamId,
    pub wi: ParamId,
    pub we: ParamId,
    pub ffn: Mlp,
}

pub struct GbaCache {
    node_v: MlpCache,
    node_i: MlpCache,
    nv: Matrix,
    ni: Matrix,
    pv: Matrix,
    pi: Matrix,
    edge: MlpCache,
    e: Matrix,
    ffn: MlpCache,
    n_v: usize,
    n_i: usize,
}

#[derive(Clone, Debug)]
pub struct AffinityOutput {
    /// Pre-sigmoid scores.
    pub logits: Matrix,
    pub a: Matrix,
}

impl Gba {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            d,
            node: Mlp::new(ps, &format!("{name}.node"), &[2 * d, d, d], Activation::Relu, Init::XavierUniform, rng),
            edge: Mlp::new(ps, &format!("{name}.edge"), &[3, d, d], Activation::Relu, Init::XavierUniform, rng),
            wv: ps.add_init(&format!("{name}.w_v"), d, d, Init::XavierUniform, rng),
            wi: ps.add_init(&format!("{name}.w_i"), d, d, Init::XavierUniform, rng),
            we: ps.add_init(&format!("{name}.w_e"), d, d, Init::XavierUniform, rng),
            ffn: Mlp::new(ps, &format!("{name}.ffn"), &[1 + d, d, 1], Activation::Relu, Init::XavierUniform, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.node.params();
        p.extend(self.edge.params());
        p.extend([self.wv, self.wi, self.we]);
        p.extend(self.ffn.params());
        p
    }

    /// Row-wise node embedding of `[M ‖ S]`.
    pub fn node_features(&self, ps: &ParamStore, f: &InstanceFeatures) -> Matrix {
        self.node.infer(ps, &Matrix::concat_cols(&f.m, &f.s))
    }

    /// Edge embeddings, row `i·N_I + j`.
    pub fn edge_features(&self, ps: &ParamStore, pv: &Matrix, pi: &Matrix) -> Matrix {
        self.edge.infer(ps, &pair_differences(pv, pi).scale(EDGE_INPUT_SCALE))
    }

    pub fn forward(&self, ps: &ParamStore, fv: &InstanceFeatures, fi: &InstanceFeatures, pv: &Matrix, pi: &Matrix) -> (AffinityOutput, GbaCache) {
        let (n_v, n_i) = (fv.len(), fi.len());
        let (nv, node_v) = self.node.forward(ps, &Matrix::concat_cols(&fv.m, &fv.s));
        let (ni, node_i) = self.node.forward(ps, &Matrix::concat_cols(&fi.m, &fi.s));
        let p_v = nv.matmul(ps.value(self.wv));
        let p_i = ni.matmul(ps.value(self.wi));
        let (e, edge) = self.edge.forward(ps, &pair_differences(pv, pi).scale(EDGE_INPUT_SCALE));
        let ew = e.matmul(ps.value(self.we));
        let a_hat = attention_logits(&p_v, &p_i, &ew);
        let x = Matrix::concat_cols(&Matrix::from_vec(n_v * n_i, 1, a_hat.data().to_vec()).expect("shape"), &ew);
        let (z, ffn) = self.ffn.forward(ps, &x);
        let logits = Matrix::from_vec(n_v, n_i, z.into_vec()).expect("shape");
        let a = logits.map(sigmoid);
        (
            AffinityOutput { logits, a },
            GbaCache {
                node_v,
                node_i,
                nv,
                ni,
                pv: p_v,
                pi: p_i,
                edge,
                e,
                ffn,
                n_v,
                n_i,
            },
        )
    }

    pub fn affinity(&self, ps: &ParamStore, fv: &InstanceFeatures, fi: &InstanceFeatures, pv: &Matrix, pi: &Matrix) -> Matrix {
        self.forward(ps, fv, fi, pv, pi).0.a
    }

    /// Backward from `dZ` (gradient w.r.t. the logits). Returns gradients
    /// w.r.t. `(M_V, S_V)` and `(M_I, S_I)`.
    pub fn backward(&self, ps: &mut ParamStore, c: &GbaCache, dz: &Matrix) -> (InstanceFeatures, InstanceFeatures) {
        let d = self.d;
        let (n_v, n_i) = (c.n_v, c.n_i);
        let dz_col = Matrix::from_vec(n_v * n_i, 1, dz.data().to_vec()).expect("shape");
        let dx = self.ffn.backward(ps, &c.ffn, &dz_col);
        let (da_col, mut dew) = dx.split_cols(1);
        for r in 0..n_v * n_i {
            let g = da_col[(r, 0)];
            dew.row_mut(r).iter_mut().for_each(|v| *v += g);
        }
        let da = Matrix::from_vec(n_v, n_i, da_col.into_vec()).expect("shape");
        let inv = 1.0 / (d as f64).sqrt();
        let dpv = da.matmul(&c.pi).scale(inv);
        let dpi = da.t_matmul(&c.pv).scale(inv);
        ps.accumulate_grad(self.wv, &c.nv.t_matmul(&dpv));
        ps.accumulate_grad(self.wi, &c.ni.t_matmul(&dpi));
        ps.accumulate_grad(self.we, &c.e.t_matmul(&dew));
        let de = dew.matmul_t(ps.value(self.we));
        self.edge.backward(ps, &c.edge, &de);
        let dnv = dpv.matmul_t(ps.value(self.wv));
        let dni = dpi.matmul_t(ps.value(self.wi));
        let gv = self.node.backward(ps, &c.node_v, &dnv);
        let gi = self.node.backward(ps, &c.node_i, &dni);
        let (mv, sv) = gv.split_cols(d);
        let (mi, si) = gi.split_cols(d);
        (InstanceFeatures { m: mv, s: sv }, InstanceFeatures { m: mi, s: si })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    /// `(vehicle index, infrastructure index, affinity)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_vehicle: Vec<usize>,
    pub unmatched_infra: Vec<usize>,
}

impl MatchSet {
    pub fn none(n_v: usize, n_i: usize) -> Self {
        Self {
            pairs: Vec::new(),
            unmatched_vehicle: (0..n_v).collect(),
            unmatched_infra: (0..n_i).collect(),
        }
    }

    /// Builds a match set from explicit pairs.
    pub fn from_pairs(n_v: usize, n_i: usize, pairs: Vec<(usize, usize, f64)>) -> Self {
        let mut used_v = vec![false; n_v];
        let mut used_i = vec![false; n_i];
        for &(i, j, _) in &pairs {
            used_v[i] = true;
            used_i[j] = true;
        }
        Self {
            pairs,
            unmatched_vehicle: (0..n_v).filter(|&i| !used_v[i]).collect(),
            unmatched_infra: (0..n_i).filter(|&j| !used_i[j]).collect(),
        }
    }
}

/// Hungarian on `1 − A`, keeping pairs with affinity ≥ `threshold`.
pub fn match_instances(a: &Matrix, threshold: f64) -> MatchSet {
    let (n_v, n_i) = a.shape();
    let cost = a.map(|v| 1.0 - v);
    let pairs = hungarian(&cost)
        .pairs
        .into_iter()
        .filter(|&(i, j)| a[(i, j)] >= threshold)
        .map(|(i, j)| (i, j, a[(i, j)]))
        .collect();
    MatchSet::from_pairs(n_v, n_i, pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Vehicle,
    Infra,
    Fused,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Vehicle => "vehicle",
            Provenance::Infra => "infra",
            Provenance::Fused => "fused",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AggregateOutput {
    pub features: InstanceFeatures,
    pub ref_points: Matrix,
    pub tags: Vec<Provenance>,
    /// Source rows `(vehicle, infrastructure)` of every output row.
    pub sources: Vec<(Option<usize>, Option<usize>)>,
}

/// Per-kind gates `g = σ(MLP([f_V ‖ f_I]))` and the convex blend
/// `g ⊙ f_V + (1 − g) ⊙ f_I` for matched pairs.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub gate_m: Mlp,
    pub gate_s: Mlp,
}

pub struct AggregateCache {
    pairs: Vec<(usize, usize)>,
    xm: Matrix,
    xs: Matrix,
    gm: Matrix,
    gs: Matrix,
    cm: Option<MlpCache>,
    cs: Option<MlpCache>,
    rows: Vec<(Option<usize>, Option<usize>)>,
    d: usize,
    n_v: usize,
    n_i: usize,
}

impl Aggregator {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate_m: Mlp::new(ps, &format!("{name}.gate_m"), &[2 * d, d, d], Activation::Relu, Init::XavierUniform, rng),
            gate_s: Mlp::new(ps, &format!("{name}.gate_s"), &[2 * d, d, d], Activation::Relu, Init::XavierUniform, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.gate_m.params();
        p.extend(self.gate_s.params());
        p
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        matches: &MatchSet,
        fv: &InstanceFeatures,
        fi: &InstanceFeatures,
        pv: &Matrix,
        pi: &Matrix,
    ) -> (AggregateOutput, AggregateCache) {
        let d = fv.m.cols();
        let (n_v, n_i) = (fv.len(), fi.len());
        let pairs: Vec<(usize, usize)> = matches.pairs.iter().map(|&(i, j, _)| (i, j)).collect();
        let vi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ii: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let xm = Matrix::concat_cols(&fv.m.select_rows(&vi), &fi.m.select_rows(&ii));
        let xs = Matrix::concat_cols(&fv.s.select_rows(&vi), &fi.s.select_rows(&ii));
        let (gm, cm, gs, cs) = if pairs.is_empty() {
            (Matrix::zeros(0, d), None, Matrix::zeros(0, d), None)
        } else {
            let (zm, cm) = self.gate_m.forward(ps, &xm);
            let (zs, cs) = self.gate_s.forward(ps, &xs);
            (zm.map(sigmoid), Some(cm), zs.map(sigmoid), Some(cs))
        };
        let mut pair_of_v = vec![None; n_v];
        for (k, &(i, _)) in pairs.iter().enumerate() {
            pair_of_v[i] = Some(k);
        }
        let mut m = Matrix::zeros(0, d);
        let mut s = Matrix::zeros(0, d);
        let mut refs = Matrix::zeros(0, 3);
        let mut tags = Vec::new();
        let mut rows = Vec::new();
        for i in 0..n_v {
            refs.push_row(pv.row(i));
            match pair_of_v[i] {
                Some(k) => {
                    let j = pairs[k].1;
                    let blend = |g: &Matrix, a: &[f64], b: &[f64]| -> Vec<f64> { (0..d).map(|c| g[(k, c)] * a[c] + (1.0 - g[(k, c)]) * b[c]).collect() };
                    m.push_row(&blend(&gm, fv.m.row(i), fi.m.row(j)));
                    s.push_row(&blend(&gs, fv.s.row(i), fi.s.row(j)));
                    tags.push(Provenance::Fused);
                    rows.push((Some(i), Some(j)));
                }
                None => {
                    m.push_row(fv.m.row(i));
                    s.push_row(fv.s.row(i));
                    tags.push(Provenance::Vehicle);
                    rows.push((Some(i), None));
                }
            }
        }
        for &j in &matches.unmatched_infra {
            refs.push_row(pi.row(j));
            m.push_row(fi.m.row(j));
            s.push_row(fi.s.row(j));
            tags.push(Provenance::Infra);
            rows.push((None, Some(j)));
        }
        (
            AggregateOutput {
                features: InstanceFeatures { m, s },
                ref_points: refs,
                tags,
                sources: rows.clone(),
            },
            AggregateCache {
                pairs,
                xm,
                xs,
                gm,
                gs,
                cm,
                cs,
                rows,
                d,
                n_v,
                n_i,
            },
        )
    }

    /// Returns gradients w.r.t. vehicle and aligned infrastructure features.
    pub fn backward(&self, ps: &mut ParamStore, c: &AggregateCache, dm: &Matrix, ds: &Matrix) -> (InstanceFeatures, InstanceFeatures) {
        let d = c.d;
        let mut gv = InstanceFeatures {
            m: Matrix::zeros(c.n_v, d),
            s: Matrix::zeros(c.n_v, d),
        };
        let mut gi = InstanceFeatures {
            m: Matrix::zeros(c.n_i, d),
            s: Matrix::zeros(c.n_i, d),
        };
        let mut dgm = Matrix::zeros(c.pairs.len(), d);
        let mut dgs = Matrix::zeros(c.pairs.len(), d);
        let pair_index: std::collections::HashMap<(usize, usize), usize> = c.pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
        for (r, &(v, i)) in c.rows.iter().enumerate() {
            match (v, i) {
                (Some(v), Some(i)) => {
                    let k = pair_index[&(v, i)];
                    for col in 0..d {
                        let (fvm, fim) = (c.xm[(k, col)], c.xm[(k, d + col)]);
                        let (fvs, fis) = (c.xs[(k, col)], c.xs[(k, d + col)]);
                        let (g_m, g_s) = (c.gm[(k, col)], c.gs[(k, col)]);
                        gv.m[(v, col)] += g_m * dm[(r, col)];
                        gi.m[(i, col)] += (1.0 - g_m) * dm[(r, col)];
                        gv.s[(v, col)] += g_s * ds[(r, col)];
                        gi.s[(i, col)] += (1.0 - g_s) * ds[(r, col)];
                        // through the sigmoid gate
                        dgm[(k, col)] = dm[(r, col)] * (fvm - fim) * g_m * (1.0 - g_m);
                        dgs[(k, col)] = ds[(r, col)] * (fvs - fis) * g_s * (1.0 - g_s);
                    }
                }
                (Some(v), None) => {
                    gv.m.row_mut(v).iter_mut().zip(dm.row(r)).for_each(|(a, b)| *a += b);
                    gv.s.row_mut(v).iter_mut().zip(ds.row(r)).for_each(|(a, b)| *a += b);
                }
                (None, Some(i)) => {
                    gi.m.row_mut(i).iter_mut().zip(dm.row(r)).for_each(|(a, b)| *a += b);
                    gi.s.row_mut(i).iter_mut().zip(ds.row(r)).for_each(|(a, b)| *a += b);
                }
                (None, None) => unreachable!("every output row has a source"),
            }
        }
        if let (Some(cm), Some(cs)) = (&c.cm, &c.cs) {
            let dxm = self.gate_m.backward(ps, cm, &dgm);
            let dxs = self.gate_s.backward(ps, cs, &dgs);
            for (k, &(v, i)) in c.pairs.iter().enumerate() {
                for col in 0..d {
                    gv.m[(v, col)] += dxm[(k, col)];
                    gi.m[(i, col)] += dxm[(k, d + col)];
                    gv.s[(v, col)] += dxs[(k, col)];
                    gi.s[(i, col)] += dxs[(k, d + col)];
                }
            }
        }
        (gv, gi)
    }
}

/// All cooperative-fusion parameters.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub caa: Caa,
    pub gba: Gba,
    pub aggregator: Aggregator,
}

impl FusionModel {
    pub fn new(ps: &mut ParamStore, d: usize, block: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            caa: Caa::new(ps, "fusion.caa", d, block, rng)?,
            gba: Gba::new(ps, "fusion.gba", d, rng),
            aggregator: Aggregator::new(ps, "fusion.aggregate", d, rng),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.caa.params();
        p.extend(self.gba.params());
        p.extend(self.aggregator.params());
        p
    }
}
