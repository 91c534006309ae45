//! Multi-dimensional feature extraction: binds detections to query slots,
//! splits each instance into a semantic feature (from its query) and a
//! motion feature (from its box corners), and enhances both with a
//! temporal transformer over a short per-track history.

use std::collections::{BTreeMap, VecDeque};

use cooptrack_numerics::attention::MhaCache;
use cooptrack_numerics::nn::MlpCache;
use cooptrack_numerics::{hungarian, layer_norm, layer_norm_backward, sinusoidal_pe, Activation, Init, KeySets, Linear, Matrix, Mlp, MultiHeadAttention, ParamId, ParamStore};
use rand::Rng;

use crate::geometry::Box3D;
use crate::sim::Detection;

/// Scale applied to coarse-box velocity before it joins the corner points.
const VELOCITY_INPUT_SCALE: f64 = 0.2;
/// Width of one motion-head input point: corner xyz plus scaled vx, vy.
pub const MOTION_POINT_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Track(u64),
    Fresh,
}

impl SlotKind {
    pub fn track_id(self) -> Option<u64> {
        match self {
            SlotKind::Track(id) => Some(id),
            SlotKind::Fresh => None,
        }
    }
}

/// Query features and reference points for one frame. Track slots come
/// first; `prior_boxes` holds each track's predicted box.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub features: Matrix,
    pub ref_points: Matrix,
    pub kinds: Vec<SlotKind>,
    pub prior_boxes: Vec<Option<Box3D>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn ref_point(&self, i: usize) -> [f64; 3] {
        let r = self.ref_points.row(i);
        [r[0], r[1], r[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatures {
    pub m: Matrix,
    pub s: Matrix,
}

impl InstanceFeatures {
    pub fn empty(d: usize) -> Self {
        Self {
            m: Matrix::zeros(0, d),
            s: Matrix::zeros(0, d),
        }
    }

    pub fn len(&self) -> usize {
        self.m.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.rows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            m: self.m.select_rows(rows),
            s: self.s.select_rows(rows),
        }
    }
}

/// Query slot → detection index.
#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    pub slot_to_det: Vec<Option<usize>>,
}

/// Track slots take the gated minimum-distance one-to-one assignment to
/// detections (most in-gate pairs first, then least total distance);
/// leftover detections fill fresh slots in order.
pub fn bind_detections(dets: &[Detection], queries: &QuerySet, gate: f64) -> Binding {
    let mut slot_to_det = vec![None; queries.len()];
    let track_slots: Vec<usize> = (0..queries.len()).filter(|&i| matches!(queries.kinds[i], SlotKind::Track(_))).collect();
    let mut used = vec![false; dets.len()];
    if !track_slots.is_empty() && !dets.is_empty() {
        let big = 1e6;
        let mut cost = Matrix::zeros(track_slots.len(), dets.len());
        for (r, &slot) in track_slots.iter().enumerate() {
            let p = queries.ref_point(slot);
            for (c, d) in dets.iter().enumerate() {
                let dist = ((p[0] - d.bbox.x).powi(2) + (p[1] - d.bbox.y).powi(2)).sqrt();
                cost[(r, c)] = if dist <= gate { dist } else { big };
            }
        }
        for (r, c) in hungarian(&cost).pairs {
            if cost[(r, c)] < big {
                slot_to_det[track_slots[r]] = Some(c);
                used[c] = true;
            }
        }
    }
    let mut free = (0..dets.len()).filter(|&c| !used[c]);
    for (slot, kind) in queries.kinds.iter().enumerate() {
        if *kind == SlotKind::Fresh {
            match free.next() {
                Some(c) => slot_to_det[slot] = Some(c),
                None => break,
            }
        }
    }
    Binding { slot_to_det }
}

/// Box emitted for an unbound fresh slot.
pub fn placeholder_box(p: [f64; 3]) -> Box3D {
    Box3D {
        x: p[0],
        y: p[1],
        z: p[2],
        w: 1.0,
        l: 1.0,
        h: 1.0,
        theta: 0.0,
        vx: 0.0,
        vy: 0.0,
        class_label: 0,
        score: 0.0,
    }
}

/// Per-track FIFO of past `(M, S)` rows, newest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryBuffer {
    pub tau: usize,
    entries: BTreeMap<u64, VecDeque<(Vec<f64>, Vec<f64>)>>,
}

/// History rows for a batch of instances: `tau` rows per instance, zero
/// where `valid` is false, with the age encoding already added.
#[derive(Clone, Debug)]
pub struct HistoryBatch {
    pub m: Matrix,
    pub s: Matrix,
    pub valid: Vec<bool>,
}

impl HistoryBuffer {
    pub fn new(tau: usize) -> Self {
        Self {
            tau,
            entries: BTreeMap::new(),
        }
    }

    pub fn valid_count(&self, id: u64) -> usize {
        self.entries.get(&id).map_or(0, |q| q.len())
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, id: u64) -> Option<&VecDeque<(Vec<f64>, Vec<f64>)>> {
        self.entries.get(&id)
    }

    /// Pushes one frame for every active id; drops ids not listed.
    pub fn update(&mut self, active: &[(u64, &[f64], &[f64])]) {
        let keep: std::collections::BTreeSet<u64> = active.iter().map(|a| a.0).collect();
        self.entries.retain(|id, _| keep.contains(id));
        if self.tau == 0 {
            self.entries.clear();
            return;
        }
        for &(id, m, s) in active {
            let q = self.entries.entry(id).or_default();
            q.push_front((m.to_vec(), s.to_vec()));
            q.truncate(self.tau);
        }
    }

    /// Slot `i·τ + a` holds the entry of age `a + 1` for instance `i`.
    pub fn gather(&self, ids: &[Option<u64>], d: usize) -> HistoryBatch {
        let tau = self.tau;
        let mut m = Matrix::zeros(ids.len() * tau, d);
        let mut s = Matrix::zeros(ids.len() * tau, d);
        let mut valid = vec![false; ids.len() * tau];
        for (i, id) in ids.iter().enumerate() {
            let Some(q) = id.and_then(|id| self.entries.get(&id)) else { continue };
            for (a, (hm, hs)) in q.iter().take(tau).enumerate() {
                let pe = sinusoidal_pe(a + 1, d).expect("even width");
                let row = i * tau + a;
                for k in 0..d {
                    m[(row, k)] = hm[k] + pe[k];
                    s[(row, k)] = hs[k] + pe[k];
                }
                valid[row] = true;
            }
        }
        HistoryBatch { m, s, valid }
    }
}

/// Self-attention over instances, cross-attention to each instance's own
/// history, then a feed-forward layer; each wrapped in a residual and a
/// layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    sa: MhaCache,
    ca: Option<(MhaCache, Matrix, Vec<f64>)>,
    ffn: MlpCache,
    /// Normalized outputs and scales after the self-attention and
    /// feed-forward residuals.
    norms: [(Matrix, Vec<f64>); 2],
}

#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub layers: Vec<DecoderLayer>,
}

impl TemporalBlock {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_width: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..2)
            .map(|i| DecoderLayer {
                self_attn: MultiHeadAttention::new(ps, &format!("{name}.{i}.self"), d, heads, rng),
                cross_attn: MultiHeadAttention::new(ps, &format!("{name}.{i}.cross"), d, heads, rng),
                ffn: Mlp::new(ps, &format!("{name}.{i}.ffn"), &[d, ffn_width, d], Activation::Relu, Init::XavierUniform, rng),
            })
            .collect();
        Self { layers }
    }

    /// `history = None` skips the cross-attention sublayers entirely.
    pub fn forward(&self, ps: &ParamStore, x: &Matrix, history: Option<(&Matrix, &KeySets)>) -> (Matrix, Vec<LayerCache>) {
        let n = x.rows();
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, sa) = layer.self_attn.forward(ps, &h, &h, KeySets::full(n, n));
            h.add_assign(&a);
            let (h1, inv1) = layer_norm(&h);
            h = h1.clone();
            let ca = history.map(|(hist, keys)| {
                let (c, ca) = layer.cross_attn.forward(ps, &h, hist, keys.clone());
                h.add_assign(&c);
                // rows without history skip this sublayer entirely
                let (mut h2, mut inv2) = layer_norm(&h);
                for (r, k) in keys.0.iter().enumerate() {
                    if k.is_empty() {
                        h2.row_mut(r).copy_from_slice(h.row(r));
                        inv2[r] = f64::NAN;
                    }
                }
                h = h2.clone();
                (ca, h2, inv2)
            });
            let (f, fc) = layer.ffn.forward(ps, &h);
            h.add_assign(&f);
            let (h3, inv3) = layer_norm(&h);
            h = h3.clone();
            caches.push(LayerCache {
                sa,
                ca,
                ffn: fc,
                norms: [(h1, inv1), (h3, inv3)],
            });
        }
        (h, caches)
    }

    /// Gradient w.r.t. the block input; history receives none.
    pub fn backward(&self, ps: &mut ParamStore, caches: &[LayerCache], dy: &Matrix) -> Matrix {
        let mut g = dy.clone();
        for (layer, c) in self.layers.iter().zip(caches).rev() {
            g = layer_norm_backward(&c.norms[1].0, &c.norms[1].1, &g);
            let df = layer.ffn.backward(ps, &c.ffn, &g);
            g.add_assign(&df);
            if let Some((ca, y, inv)) = &c.ca {
                let passed = g.clone();
                g = layer_norm_backward(y, inv, &g);
                for (r, k) in inv.iter().enumerate() {
                    if k.is_nan() {
                        g.row_mut(r).copy_from_slice(passed.row(r));
                    }
                }
                let (dq, _) = layer.cross_attn.backward(ps, ca, &g);
                g.add_assign(&dq);
            }
            g = layer_norm_backward(&c.norms[0].0, &c.norms[0].1, &g);
            let (dq, dkv) = layer.self_attn.backward(ps, &c.sa, &g);
            g.add_assign(&dq);
            g.add_assign(&dkv);
        }
        g
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut p = l.self_attn.params();
                p.extend(l.cross_attn.params());
                p.extend(l.ffn.params());
                p
            })
            .collect()
    }
}

/// Corner points plus scaled coarse velocity, 8 rows per box.
pub fn motion_points(boxes: &[Box3D]) -> Matrix {
    let mut out = Matrix::zeros(boxes.len() * 8, MOTION_POINT_DIM);
    for (i, b) in boxes.iter().enumerate() {
        for (k, c) in b.corners_local().iter().enumerate() {
            let r = out.row_mut(i * 8 + k);
            r[..3].copy_from_slice(c);
            r[3] = b.vx * VELOCITY_INPUT_SCALE;
            r[4] = b.vy * VELOCITY_INPUT_SCALE;
        }
    }
    out
}

/// Per-feature max over consecutive groups of 8 rows. Also returns the
/// winning row of each output entry (first index on ties).
pub fn max_pool8(x: &Matrix) -> (Matrix, Vec<usize>) {
    let n = x.rows() / 8;
    let d = x.cols();
    let mut out = Matrix::zeros(n, d);
    let mut arg = vec![0usize; n * d];
    for i in 0..n {
        for k in 0..d {
            let mut best = i * 8;
            for r in i * 8 + 1..i * 8 + 8 {
                if x[(r, k)] > x[(best, k)] {
                    best = r;
                }
            }
            out[(i, k)] = x[(best, k)];
            arg[i * d + k] = best;
        }
    }
    (out, arg)
}

pub fn max_pool8_backward(rows: usize, arg: &[usize], dy: &Matrix) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(rows, d);
    for i in 0..dy.rows() {
        for k in 0..d {
            dx[(arg[i * d + k], k)] += dy[(i, k)];
        }
    }
    dx
}

/// Shared point MLP followed by max-pooling over each box's 8 points.
#[derive(Clone, Debug)]
pub struct MotionHead {
    pub mlp: Mlp,
}

pub struct MotionCache {
    mlp: MlpCache,
    arg: Vec<usize>,
    rows: usize,
}

impl MotionHead {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(ps, name, &[MOTION_POINT_DIM, d, d, d, d], Activation::Relu, Init::XavierUniform, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, points: &Matrix) -> (Matrix, MotionCache) {
        let (h, mlp) = self.mlp.forward(ps, points);
        let (m, arg) = max_pool8(&h);
        (
            m,
            MotionCache {
                mlp,
                arg,
                rows: points.rows(),
            },
        )
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &MotionCache, dm: &Matrix) -> Matrix {
        let dh = max_pool8_backward(cache.rows, &cache.arg, dm);
        self.mlp.backward(ps, &cache.mlp, &dh)
    }
}

/// Per-agent extractor parameters. Vehicle and infrastructure each own one
/// under disjoint parameter-name prefixes.
#[derive(Clone, Debug)]
pub struct Mdfe {
    pub d: usize,
    pub tau: usize,
    pub gate: f64,
    pub fresh_query: ParamId,
    pub mix: Linear,
    pub semantic: Mlp,
    pub motion: MotionHead,
    pub temporal_m: TemporalBlock,
    pub temporal_s: TemporalBlock,
}

/// Forward products for one frame. Rows are the processed slots: every
/// track slot plus each fresh slot that received a detection.
#[derive(Clone, Debug)]
pub struct MdfeOutput {
    pub slots: Vec<usize>,
    pub ids: Vec<Option<u64>>,
    pub det_index: Vec<Option<usize>>,
    pub coarse: Vec<Box3D>,
    pub ref_points: Matrix,
    pub features: InstanceFeatures,
    /// Unbound fresh slots and their placeholder boxes.
    pub placeholders: Vec<(usize, Box3D)>,
    pub binding: Binding,
}

pub struct MdfeCache {
    fresh_rows: Vec<usize>,
    mix_in: Matrix,
    sem: MlpCache,
    motion: MotionCache,
    tm: Vec<LayerCache>,
    ts: Vec<LayerCache>,
}

impl Mdfe {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, tau: usize, heads: usize, ffn_mult: usize, gate: f64, rng: &mut impl Rng) -> Self {
        let fresh_query = ps.add_init(&format!("{name}.fresh_query"), 1, d, Init::XavierUniform, rng);
        Self {
            d,
            tau,
            gate,
            fresh_query,
            mix: Linear::new(ps, &format!("{name}.mix"), 2 * d, d, Init::XavierUniform, rng),
            semantic: Mlp::new(ps, &format!("{name}.semantic"), &[d, d, d], Activation::Relu, Init::XavierUniform, rng),
            motion: MotionHead::new(ps, &format!("{name}.motion"), d, rng),
            temporal_m: TemporalBlock::new(ps, &format!("{name}.temporal_m"), d, heads, ffn_mult * d, rng),
            temporal_s: TemporalBlock::new(ps, &format!("{name}.temporal_s"), d, heads, ffn_mult * d, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.fresh_query];
        p.extend(self.mix.params());
        p.extend(self.semantic.params());
        p.extend(self.motion.mlp.params());
        p.extend(self.temporal_m.params());
        p.extend(self.temporal_s.params());
        p
    }

    pub fn forward(&self, ps: &ParamStore, dets: &[Detection], queries: &QuerySet, history: &HistoryBuffer) -> (MdfeOutput, MdfeCache) {
        let d = self.d;
        let binding = bind_detections(dets, queries, self.gate);
        let mut slots = Vec::new();
        let mut placeholders = Vec::new();
        for (i, kind) in queries.kinds.iter().enumerate() {
            if matches!(kind, SlotKind::Track(_)) || binding.slot_to_det[i].is_some() {
                slots.push(i);
            } else {
                placeholders.push((i, placeholder_box(queries.ref_point(i))));
            }
        }
        let n = slots.len();
        let mut mix_in = Matrix::zeros(n, 2 * d);
        let mut coarse = Vec::with_capacity(n);
        let mut ref_points = Matrix::zeros(n, 3);
        let mut ids = Vec::with_capacity(n);
        let mut det_index = Vec::with_capacity(n);
        let mut fresh_rows = Vec::new();
        for (r, &slot) in slots.iter().enumerate() {
            mix_in.row_mut(r)[..d].copy_from_slice(queries.features.row(slot));
            let kind = queries.kinds[slot];
            if kind == SlotKind::Fresh {
                fresh_rows.push(r);
            }
            ids.push(kind.track_id());
            let det = binding.slot_to_det[slot];
            det_index.push(det);
            match det {
                Some(c) => {
                    mix_in.row_mut(r)[d..].copy_from_slice(&dets[c].latent);
                    coarse.push(dets[c].bbox);
                    ref_points.row_mut(r).copy_from_slice(&dets[c].bbox.center());
                }
                None => {
                    let p = queries.ref_point(slot);
                    let mut b = queries.prior_boxes[slot].unwrap_or_else(|| placeholder_box(p));
                    b.x = p[0];
                    b.y = p[1];
                    b.z = p[2];
                    b.score = 0.0;
                    coarse.push(b);
                    ref_points.row_mut(r).copy_from_slice(&p);
                }
            }
        }
        let q_hat = self.mix.forward(ps, &mix_in);
        let (s0, sem) = self.semantic.forward(ps, &q_hat);
        let (m0, motion) = self.motion.forward(ps, &motion_points(&coarse));
        let hist = history.gather(&ids, d);
        let keys = KeySets::grouped(n, self.tau, &hist.valid);
        let (m, tm) = self.temporal_m.forward(ps, &m0, Some((&hist.m, &keys)));
        let (s, ts) = self.temporal_s.forward(ps, &s0, Some((&hist.s, &keys)));
        (
            MdfeOutput {
                slots,
                ids,
                det_index,
                coarse,
                ref_points,
                features: InstanceFeatures { m, s },
                placeholders,
                binding,
            },
            MdfeCache {
                fresh_rows,
                mix_in,
                sem,
                motion,
                tm,
                ts,
            },
        )
    }

    /// Accumulates parameter gradients given upstream `dM`, `dS`.
    pub fn backward(&self, ps: &mut ParamStore, cache: &MdfeCache, dm: &Matrix, ds: &Matrix) {
        if dm.rows() == 0 {
            return;
        }
        let dm0 = self.temporal_m.backward(ps, &cache.tm, dm);
        let ds0 = self.temporal_s.backward(ps, &cache.ts, ds);
        self.motion.backward(ps, &cache.motion, &dm0);
        let dq_hat = self.semantic.backward(ps, &cache.sem, &ds0);
        let dmix = self.mix.backward(ps, &cache.mix_in, &dq_hat);
        if !cache.fresh_rows.is_empty() {
            let mut g = Matrix::zeros(1, self.d);
            for &r in &cache.fresh_rows {
                for k in 0..self.d {
                    g[(0, k)] += dmix[(r, k)];
                }
            }
            ps.accumulate_grad(self.fresh_query, &g);
        }
    }

    /// Forward followed by a history push of every identified row.
    pub fn forward_and_update(&self, ps: &ParamStore, dets: &[Detection], queries: &QuerySet, history: &mut HistoryBuffer) -> MdfeOutput {
        let (out, _) = self.forward(ps, dets, queries, history);
        if !out.slots.is_empty() {
            let rows: Vec<(u64, &[f64], &[f64])> = out
                .ids
                .iter()
                .enumerate()
                .filter_map(|(r, id)| id.map(|id| (id, out.features.m.row(r), out.features.s.row(r))))
                .collect();
            history.update(&rows);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CAR;
    use cooptrack_numerics::gradcheck::{check_input_grad, check_param_grads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn det(x: f64, y: f64, d: usize, rng: &mut impl Rng) -> Detection {
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

    fn queries(kinds: Vec<SlotKind>, refs: &[[f64; 3]], d: usize, rng: &mut impl Rng) -> QuerySet {
        QuerySet {
            features: random_matrix(rng, kinds.len(), d),
            ref_points: Matrix::from_rows(refs),
            prior_boxes: vec![None; kinds.len()],
            kinds,
        }
    }

    #[test]
    fn fresh_query_binds_single_detection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dets = vec![det(3.0, 4.0, 4, &mut rng)];
        let q = queries(vec![SlotKind::Fresh], &[[0.0, 0.0, 0.0]], 4, &mut rng);
        assert_eq!(bind_detections(&dets, &q, 4.0).slot_to_det, vec![Some(0)]);
    }

    #[test]
    fn track_on_detection_keeps_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dets = vec![det(30.0, 0.0, 4, &mut rng), det(10.0, 5.0, 4, &mut rng)];
        let q = queries(vec![SlotKind::Track(9), SlotKind::Fresh], &[[10.0, 5.0, 0.8], [0.0; 3]], 4, &mut rng);
        assert_eq!(bind_detections(&dets, &q, 4.0).slot_to_det, vec![Some(1), Some(0)]);
    }

    /// All partial one-to-one maps within the gate; best = most pairs, then
    /// least total distance.
    fn brute_force_binding(refs: &[[f64; 3]], dets: &[Detection], gate: f64) -> Vec<Option<usize>> {
        fn rec(i: usize, refs: &[[f64; 3]], dets: &[Detection], gate: f64, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, best: &mut (usize, f64, Vec<Option<usize>>)) {
            if i == refs.len() {
                let n = cur.iter().flatten().count();
                let cost: f64 = cur.iter().enumerate().filter_map(|(r, c)| c.map(|c| ((refs[r][0] - dets[c].bbox.x).powi(2) + (refs[r][1] - dets[c].bbox.y).powi(2)).sqrt())).sum();
                if n > best.0 || (n == best.0 && cost < best.1 - 1e-12) {
                    *best = (n, cost, cur.clone());
                }
                return;
            }
            cur.push(None);
            rec(i + 1, refs, dets, gate, used, cur, best);
            cur.pop();
            for c in 0..dets.len() {
                let dist = ((refs[i][0] - dets[c].bbox.x).powi(2) + (refs[i][1] - dets[c].bbox.y).powi(2)).sqrt();
                if !used[c] && dist <= gate {
                    used[c] = true;
                    cur.push(Some(c));
                    rec(i + 1, refs, dets, gate, used, cur, best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = (0, f64::INFINITY, vec![None; refs.len()]);
        rec(0, refs, dets, gate, &mut vec![false; dets.len()], &mut Vec::new(), &mut best);
        best.2
    }

    #[test]
    fn track_binding_matches_exhaustive_nearest_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n_det = rng.random_range(1..=3);
            let dets: Vec<Detection> = (0..n_det).map(|_| det(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), 2, &mut rng)).collect();
            let n_q = rng.random_range(1..=3);
            let refs: Vec<[f64; 3]> = (0..n_q).map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), 0.0]).collect();
            let q = queries((0..n_q).map(|i| SlotKind::Track(i as u64)).collect(), &refs, 2, &mut rng);
            let got = bind_detections(&dets, &q, 2.0).slot_to_det;
            assert_eq!(got, brute_force_binding(&refs, &dets, 2.0));
        }
    }

    #[test]
    fn history_is_fifo_and_pads() {
        let mut h = HistoryBuffer::new(4);
        for f in 1..=6 {
            let v = vec![f as f64; 2];
            h.update(&[(7, &v, &v)]);
        }
        let frames: Vec<f64> = h.get(7).unwrap().iter().map(|e| e.0[0]).collect();
        assert_eq!(frames, vec![6.0, 5.0, 4.0, 3.0]);
        let v = vec![1.0; 2];
        h.update(&[(7, &v, &v), (8, &v, &v)]);
        let batch = h.gather(&[Some(8), None, Some(7)], 2);
        assert_eq!(&batch.valid[..4], &[true, false, false, false]);
        assert!(batch.valid[4..8].iter().all(|v| !v));
        assert!(batch.valid[8..].iter().all(|&v| v));
        assert!(batch.m.row(1).iter().all(|&x| x == 0.0));
        h.update(&[(8, &v, &v)]);
        assert_eq!(h.valid_count(7), 0);
        assert_eq!(h.valid_count(8), 2);
    }

    #[test]
    fn history_adds_age_encoding() {
        let mut h = HistoryBuffer::new(2);
        let z = vec![0.0; 4];
        h.update(&[(1, &z, &z)]);
        h.update(&[(1, &z, &z)]);
        let b = h.gather(&[Some(1)], 4);
        assert_eq!(b.m.row(0), sinusoidal_pe(1, 4).unwrap().as_slice());
        assert_eq!(b.s.row(1), sinusoidal_pe(2, 4).unwrap().as_slice());
    }

    #[test]
    fn zero_capacity_history_stays_empty() {
        let mut h = HistoryBuffer::new(0);
        let v = vec![1.0; 2];
        h.update(&[(1, &v, &v)]);
        assert_eq!(h.valid_count(1), 0);
        assert_eq!(h.gather(&[Some(1)], 2).valid.len(), 0);
    }

    #[test]
    fn semantic_head_identity_construction_and_row_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let head = Mlp::new(&mut ps, "sem", &[4, 4, 4], Activation::Relu, Init::XavierUniform, &mut rng);
        *ps.value_mut(head.layers[0].weight) = Matrix::identity(4);
        *ps.value_mut(head.layers[0].bias) = Matrix::filled(1, 4, 100.0);
        *ps.value_mut(head.layers[1].weight) = Matrix::identity(4);
        *ps.value_mut(head.layers[1].bias) = Matrix::filled(1, 4, -100.0);
        let x = random_matrix(&mut rng, 3, 4);
        assert!(head.infer(&ps, &x).max_abs_diff(&x) < 1e-12);
        let twin = Matrix::vstack(&[&x.select_rows(&[0]), &x.select_rows(&[0])]);
        let s = head.infer(&ps, &twin);
        assert_eq!(s.row(0), s.row(1));
    }

    #[test]
    fn motion_head_is_invariant_to_corner_order_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let head = MotionHead::new(&mut ps, "mh", 8, &mut rng);
        let b = det(3.0, 1.0, 2, &mut rng).bbox;
        let pts = motion_points(&[b]);
        let (m, _) = head.forward(&ps, &pts);
        let perm = [3, 7, 0, 5, 1, 6, 2, 4];
        let (mp, _) = head.forward(&ps, &pts.select_rows(&perm));
        assert_eq!(m, mp);
        let mut moved = b;
        moved.x += 40.0;
        moved.y -= 12.0;
        let (mt, _) = head.forward(&ps, &motion_points(&[moved]));
        assert_eq!(m, mt);
        // Replacing point 0 by point 1 only changes features where point 0 won.
        let h = head.mlp.infer(&ps, &pts);
        let (_, arg) = max_pool8(&h);
        let mut dup = pts.clone();
        let r1 = pts.row(1).to_vec();
        dup.row_mut(0).copy_from_slice(&r1);
        let (md, _) = head.forward(&ps, &dup);
        for k in 0..8 {
            if arg[k] != 0 {
                assert_eq!(md[(0, k)], m[(0, k)]);
            }
        }
    }

    #[test]
    fn max_pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 16, 5);
            let r = random_matrix(&mut rng, 2, 5);
            let (_, arg) = max_pool8(&x);
            let dx = max_pool8_backward(16, &arg, &r);
            let (e, _) = check_input_grad(x.data(), dx.data(), &mut |v| max_pool8(&Matrix::from_vec(16, 5, v.to_vec()).unwrap()).0.hadamard(&r).sum());
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn motion_and_semantic_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut ps = ParamStore::new();
            let head = MotionHead::new(&mut ps, "mh", 8, &mut rng);
            let sem = Mlp::new(&mut ps, "sem", &[8, 8, 8], Activation::Relu, Init::XavierUniform, &mut rng);
            let boxes: Vec<Box3D> = (0..3).map(|_| det(0.0, 0.0, 2, &mut rng).bbox).collect();
            let pts = motion_points(&boxes);
            let q = random_matrix(&mut rng, 3, 8);
            let r = random_matrix(&mut rng, 3, 8);
            let (_, c) = head.forward(&ps, &pts);
            head.backward(&mut ps, &c, &r);
            let (_, c) = sem.forward(&ps, &q);
            sem.backward(&mut ps, &c, &r);
            let mut ids = head.mlp.params();
            ids.extend(sem.params());
            let checks = check_param_grads(&mut ps, &ids, 32, &mut rng, &mut |p| {
                head.forward(p, &pts).0.hadamard(&r).sum() + sem.infer(p, &q).hadamard(&r).sum()
            });
            for c in checks {
                assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
            }
        }
    }

    #[test]
    fn masked_history_equals_history_free_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new();
        let block = TemporalBlock::new(&mut ps, "tb", 8, 2, 32, &mut rng);
        let x = random_matrix(&mut rng, 3, 8);
        let hist = random_matrix(&mut rng, 12, 8);
        let keys = KeySets::grouped(3, 4, &[false; 12]);
        let (with, _) = block.forward(&ps, &x, Some((&hist, &keys)));
        let (without, _) = block.forward(&ps, &x, None);
        assert_eq!(with, without);
        // An extra masked slot is inert too.
        let mut valid = vec![false; 12];
        valid[0] = true;
        valid[4] = true;
        let (a, _) = block.forward(&ps, &x, Some((&hist, &KeySets::grouped(3, 4, &valid))));
        let hist5 = Matrix::vstack(&[&hist, &random_matrix(&mut rng, 3, 8)]);
        let mut keys5 = KeySets::grouped(3, 4, &valid);
        keys5.0[0].retain(|_| true);
        let (b, _) = block.forward(&ps, &x, Some((&hist5, &keys5)));
        assert_eq!(a, b);
    }

    #[test]
    fn identical_history_keys_return_their_value() {
        let v = Matrix::from_rows(&[[0.5, -1.0, 2.0, 0.0]]);
        let hist = Matrix::vstack(&[&v, &v, &v, &v]);
        let out = cooptrack_numerics::scaled_dot_attention(&v, &hist, &hist, &[vec![true; 4]]).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-12);
    }

    fn tiny_mdfe(ps: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Mdfe {
        Mdfe::new(ps, name, 8, 2, 2, 2, 4.0, rng)
    }

    fn frame_inputs(rng: &mut impl Rng, d: usize, fresh_query: &[f64]) -> (Vec<Detection>, QuerySet, HistoryBuffer) {
        let dets = vec![det(1.0, 2.0, d, rng), det(10.0, -3.0, d, rng), det(25.0, 6.0, d, rng)];
        let mut q = queries(vec![SlotKind::Track(4), SlotKind::Track(5), SlotKind::Fresh, SlotKind::Fresh], &[[1.2, 2.1, 0.8], [40.0, 0.0, 0.8], [0.0; 3], [5.0, 5.0, 0.0]], d, rng);
        q.features.row_mut(2).copy_from_slice(fresh_query);
        q.features.row_mut(3).copy_from_slice(fresh_query);
        q.prior_boxes[1] = Some(det(40.0, 0.0, d, rng).bbox);
        let mut h = HistoryBuffer::new(2);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        h.update(&[(4, &a, &b)]);
        h.update(&[(4, &b, &a), (5, &a, &a)]);
        (dets, q, h)
    }

    #[test]
    fn full_extractor_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut ps = ParamStore::new();
            let mdfe = tiny_mdfe(&mut ps, &mut rng, "v");
            let fq = ps.value(mdfe.fresh_query).row(0).to_vec();
            let (dets, q, h) = frame_inputs(&mut rng, 8, &fq);
            let (out, cache) = mdfe.forward(&ps, &dets, &q, &h);
            assert_eq!(out.slots, vec![0, 1, 2, 3]);
            let rm = random_matrix(&mut rng, 4, 8);
            let rs = random_matrix(&mut rng, 4, 8);
            mdfe.backward(&mut ps, &cache, &rm, &rs);
            let fq_id = mdfe.fresh_query;
            let checks = check_param_grads(&mut ps, &mdfe.params(), 24, &mut rng, &mut |p| {
                let mut q2 = q.clone();
                let f = p.value(fq_id).row(0).to_vec();
                q2.features.row_mut(2).copy_from_slice(&f);
                q2.features.row_mut(3).copy_from_slice(&f);
                let (o, _) = mdfe.forward(p, &dets, &q2, &h);
                o.features.m.hadamard(&rm).sum() + o.features.s.hadamard(&rs).sum()
            });
            for c in checks {
                assert!(c.rel_error < 1e-3, "seed {seed} {}: {} ({} skipped)", c.name, c.rel_error, c.skipped);
            }
        }
    }

    #[test]
    fn empty_frame_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamStore::new();
        let mdfe = tiny_mdfe(&mut ps, &mut rng, "v");
        let q = QuerySet {
            features: Matrix::zeros(0, 8),
            ref_points: Matrix::zeros(0, 3),
            kinds: vec![],
            prior_boxes: vec![],
        };
        let mut h = HistoryBuffer::new(2);
        let v = vec![0.5; 8];
        h.update(&[(3, &v, &v)]);
        let before = h.clone();
        let out = mdfe.forward_and_update(&ps, &[], &q, &mut h);
        assert!(out.features.is_empty());
        assert_eq!(h, before);
        let fq = ps.value(mdfe.fresh_query).row(0).to_vec();
        let (dets, q, h) = frame_inputs(&mut rng, 8, &fq);
        let a = mdfe.forward(&ps, &dets, &q, &h).0;
        let b = mdfe.forward(&ps, &dets, &q, &h).0;
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn agent_parameter_sets_are_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::new();
        let v = tiny_mdfe(&mut ps, &mut rng, "vehicle");
        let i = tiny_mdfe(&mut ps, &mut rng, "infrastructure");
        let fq = ps.value(v.fresh_query).row(0).to_vec();
        let (dets, q, h) = frame_inputs(&mut rng, 8, &fq);
        let before = v.forward(&ps, &dets, &q, &h).0.features;
        for id in i.params() {
            ps.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.5);
        }
        assert_eq!(v.forward(&ps, &dets, &q, &h).0.features, before);
        let vs: std::collections::BTreeSet<_> = v.params().into_iter().collect();
        assert!(i.params().iter().all(|p| !vs.contains(p)));
    }
}
