//! Masked scaled dot-product attention and a multi-head wrapper.
//!
//! Masks are carried as per-query key lists: query `i` attends exactly to the
//! keys in `keys[i]`. A query with an empty list produces a zero output row,
//! which keeps padded history slots inert.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::matrix::{dot, Matrix};
use crate::nn::Linear;
use crate::param::{Init, ParamId, ParamStore};

/// Per-query lists of visible key indices.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySets(pub Vec<Vec<usize>>);

impl KeySets {
    /// Every query sees every key.
    pub fn full(n_q: usize, n_k: usize) -> Self {
        KeySets(vec![(0..n_k).collect(); n_q])
    }

    /// Query `i` sees keys `i*group .. (i+1)*group` where `valid` is true.
    pub fn grouped(n_q: usize, group: usize, valid: &[bool]) -> Self {
        assert_eq!(valid.len(), n_q * group);
        KeySets(
            (0..n_q)
                .map(|i| (i * group..(i + 1) * group).filter(|&k| valid[k]).collect())
                .collect(),
        )
    }

    pub fn from_mask(mask: &[Vec<bool>]) -> Self {
        KeySets(
            mask.iter()
                .map(|row| row.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k).collect())
                .collect(),
        )
    }

    pub fn n_queries(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    /// Softmax weights, indexed `[head * n_q + query][position in key list]`.
    probs: Vec<Vec<f64>>,
    heads: usize,
}

impl AttentionCache {
    pub fn probs(&self, head: usize, query: usize) -> &[f64] {
        let n_q = self.probs.len() / self.heads;
        &self.probs[head * n_q + query]
    }
}

/// Multi-head attention core over already-projected `q`, `k`, `v`.
/// Feature columns are split evenly into `heads` groups.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix, keys: &KeySets, heads: usize) -> (Matrix, AttentionCache) {
    let d = q.cols();
    assert_eq!(k.cols(), d);
    assert_eq!(keys.n_queries(), q.rows());
    assert_eq!(k.rows(), v.rows());
    assert!(heads > 0 && d % heads == 0, "feature width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let dv = v.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_q = q.rows();
    let mut out = Matrix::zeros(n_q, v.cols());
    let mut probs = Vec::with_capacity(heads * n_q);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let (v0, v1) = (h * dv, (h + 1) * dv);
        for i in 0..n_q {
            let list = &keys.0[i];
            if list.is_empty() {
                probs.push(Vec::new());
                continue;
            }
            let qi = &q.row(i)[c0..c1];
            let mut p: Vec<f64> = list.iter().map(|&j| dot(qi, &k.row(j)[c0..c1]) * scale).collect();
            softmax_in_place(&mut p);
            let o = &mut out.row_mut(i)[v0..v1];
            for (&j, &pj) in list.iter().zip(&p) {
                for (ov, vv) in o.iter_mut().zip(&v.row(j)[v0..v1]) {
                    *ov += pj * vv;
                }
            }
            probs.push(p);
        }
    }
    (out, AttentionCache { probs, heads })
}

/// Backward of [`attend`]; returns `(dq, dk, dv)`.
pub fn attend_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    keys: &KeySets,
    cache: &AttentionCache,
    dout: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let heads = cache.heads;
    let d = q.cols();
    let dh = d / heads;
    let dvw = v.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_q = q.rows();
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    let mut dp = Vec::new();
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let (v0, v1) = (h * dvw, (h + 1) * dvw);
        for i in 0..n_q {
            let list = &keys.0[i];
            if list.is_empty() {
                continue;
            }
            let p = &cache.probs[h * n_q + i];
            let go = &dout.row(i)[v0..v1];
            dp.clear();
            for (&j, &pj) in list.iter().zip(p) {
                dp.push(dot(go, &v.row(j)[v0..v1]));
                for (dvv, g) in dv.row_mut(j)[v0..v1].iter_mut().zip(go) {
                    *dvv += pj * g;
                }
            }
            let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for ((&j, &pj), &dpj) in list.iter().zip(p).zip(&dp) {
                let ds = pj * (dpj - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                {
                    let kj = &k.row(j)[c0..c1];
                    for (dqv, kv) in dq.row_mut(i)[c0..c1].iter_mut().zip(kj) {
                        *dqv += ds * kv;
                    }
                }
                let qi = &q.row(i)[c0..c1];
                for (dkv, qv) in dk.row_mut(j)[c0..c1].iter_mut().zip(qi) {
                    *dkv += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

pub fn softmax_in_place(p: &mut [f64]) {
    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in p.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in p.iter_mut() {
        *v /= z;
    }
}

/// `softmax(QKᵀ/√d + mask_bias)·V` with a boolean visibility mask of shape
/// `rows(Q) × rows(K)`. Fully masked rows yield zero output.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &[Vec<bool>]) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(dim_err("scaled_dot_attention", format!("key width {}", q.cols()), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(dim_err("scaled_dot_attention", format!("{} value rows", k.rows()), v.rows()));
    }
    if mask.len() != q.rows() || mask.iter().any(|r| r.len() != k.rows()) {
        return Err(dim_err(
            "scaled_dot_attention",
            format!("mask {}x{}", q.rows(), k.rows()),
            format!("{} rows", mask.len()),
        ));
    }
    Ok(attend(q, k, v, &KeySets::from_mask(mask), 1).0)
}

/// Multi-head attention with input/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MhaCache {
    xq: Matrix,
    xkv: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    ctx: Matrix,
    attn: AttentionCache,
    keys: KeySets,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(d % heads == 0, "d={d} not divisible by heads={heads}");
        Self {
            wq: Linear::new(ps, &format!("{name}.q"), d, d, Init::XavierUniform, rng),
            wk: Linear::new(ps, &format!("{name}.k"), d, d, Init::XavierUniform, rng),
            wv: Linear::new(ps, &format!("{name}.v"), d, d, Init::XavierUniform, rng),
            wo: Linear::new(ps, &format!("{name}.o"), d, d, Init::XavierUniform, rng),
            heads,
        }
    }

    pub fn forward(&self, ps: &ParamStore, xq: &Matrix, xkv: &Matrix, keys: KeySets) -> (Matrix, MhaCache) {
        let q = self.wq.forward(ps, xq);
        let k = self.wk.forward(ps, xkv);
        let v = self.wv.forward(ps, xkv);
        let (ctx, attn) = attend(&q, &k, &v, &keys, self.heads);
        let mut out = self.wo.forward(ps, &ctx);
        // A query with no keys contributes nothing, bias included.
        for (i, ks) in keys.0.iter().enumerate() {
            if ks.is_empty() {
                out.row_mut(i).fill(0.0);
            }
        }
        (
            out,
            MhaCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                ctx,
                attn,
                keys,
            },
        )
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, ps: &mut ParamStore, cache: &MhaCache, dout: &Matrix) -> (Matrix, Matrix) {
        let mut dout = dout.clone();
        for (i, ks) in cache.keys.0.iter().enumerate() {
            if ks.is_empty() {
                dout.row_mut(i).fill(0.0);
            }
        }
        let dctx = self.wo.backward(ps, &cache.ctx, &dout);
        let (dq, dk, dv) = attend_backward(&cache.q, &cache.k, &cache.v, &cache.keys, &cache.attn, &dctx);
        let dxq = self.wq.backward(ps, &cache.xq, &dq);
        let mut dxkv = self.wk.backward(ps, &cache.xkv, &dk);
        dxkv.add_assign(&self.wv.backward(ps, &cache.xkv, &dv));
        (dxq, dxkv)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_true(r: usize, c: usize) -> Vec<Vec<bool>> {
        vec![vec![true; c]; r]
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let q = Matrix::from_rows(&[[0.3, -1.0]]);
        let k = Matrix::from_rows(&[[2.0, 5.0]]);
        let v = Matrix::from_rows(&[[7.0, -3.0]]);
        let out = scaled_dot_attention(&q, &k, &v, &all_true(1, 1)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Matrix::from_rows(&[[0.3, -1.0]]);
        let k = Matrix::from_rows(&[[2.0, 5.0], [2.0, 5.0]]);
        let v = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]);
        let out = scaled_dot_attention(&q, &k, &v, &all_true(1, 2)).unwrap();
        assert!(out.max_abs_diff(&Matrix::from_rows(&[[2.0, 4.0]])) < 1e-12);
    }

    #[test]
    fn masked_key_equals_single_key_case() {
        let q = Matrix::from_rows(&[[0.3, -1.0]]);
        let k = Matrix::from_rows(&[[2.0, 5.0], [-4.0, 1.0]]);
        let v = Matrix::from_rows(&[[1.0, 2.0], [30.0, 60.0]]);
        let out = scaled_dot_attention(&q, &k, &v, &[vec![true, false]]).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[1.0, 2.0]]));
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let q = Matrix::from_rows(&[[1.0, 1.0], [0.5, 0.2]]);
        let k = Matrix::from_rows(&[[2.0, 5.0]]);
        let v = Matrix::from_rows(&[[1.0, 2.0]]);
        let out = scaled_dot_attention(&q, &k, &v, &[vec![false], vec![true]]).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0]);
        assert_eq!(out.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn mask_shape_checked() {
        let m = Matrix::zeros(2, 2);
        assert!(scaled_dot_attention(&m, &m, &m, &all_true(2, 3)).is_err());
    }
}
