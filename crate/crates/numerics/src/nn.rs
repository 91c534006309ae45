//! Linear layers and MLPs over a [`ParamStore`], with explicit backward passes.
//!
//! Forward passes return the cache their backward pass needs; backward
//! accumulates into the store's gradient slots and returns the input gradient.

use rand::Rng;

use crate::error::{dim_err, NumericsError, Result};
use crate::matrix::Matrix;
use crate::param::{Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's *output*.
    #[inline]
    fn grad_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = x Wᵀ + b` with `W: d_out × d_in`, `b: 1 × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let weight = ps.add_init(&format!("{name}.weight"), d_out, d_in, init, rng);
        let bias = ps.add(&format!("{name}.bias"), Matrix::zeros(1, d_out));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.d_in, "Linear input width");
        let mut y = x.matmul_t(ps.value(self.weight));
        y.add_row_broadcast(ps.value(self.bias));
        y
    }

    pub fn backward(&self, ps: &mut ParamStore, x: &Matrix, dy: &Matrix) -> Matrix {
        let dx = dy.matmul(ps.value(self.weight));
        if x.rows() > 0 {
            let dw = dy.t_matmul(x);
            ps.accumulate_grad(self.weight, &dw);
            let db = dy.sum_rows();
            ps.accumulate_grad(self.bias, &db);
        }
        dx
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input of every layer; `inputs[0]` is the MLP input.
    inputs: Vec<Matrix>,
}

impl Mlp {
    /// `dims = [d_in, h1, ..., d_out]`. Hidden layers use He init; the last
    /// layer uses `last_init`.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        last_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "MLP needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::HeUniform(1.0) };
                Linear::new(ps, &format!("{name}.{i}"), dims[i], dims[i + 1], init, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }

    pub fn forward(&self, ps: &ParamStore, x: &Matrix) -> (Matrix, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(ps, &h);
            if i != last {
                let act = self.activation;
                y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        (h, MlpCache { inputs })
    }

    pub fn infer(&self, ps: &ParamStore, x: &Matrix) -> Matrix {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ps, &h);
            if i != last {
                let act = self.activation;
                h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        h
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &MlpCache, dy: &Matrix) -> Matrix {
        let mut g = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            g = layer.backward(ps, x, &g);
            if i > 0 {
                // x is this layer's input, i.e. the previous layer's activation output.
                let act = self.activation;
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    *gv *= act.grad_from_output(xv);
                }
            }
        }
        g
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Checked `y = x Wᵀ + b` over raw matrices.
pub fn linear_forward(w: &Matrix, b: &[f64], x: &Matrix) -> Result<Matrix> {
    if b.len() != w.rows() {
        return Err(dim_err("linear_forward", format!("bias of length {}", w.rows()), b.len()));
    }
    if x.cols() != w.cols() {
        return Err(dim_err("linear_forward", format!("input width {}", w.cols()), x.cols()));
    }
    let mut y = x.matmul_t(w);
    y.add_row_broadcast(&Matrix::row_vector(b));
    Ok(y)
}

/// Checked MLP evaluation over raw `(W, b)` layers; `activation` is applied
/// between layers, never after the last.
pub fn mlp_forward(layers: &[(Matrix, Vec<f64>)], activation: Activation, x: &Matrix) -> Result<Matrix> {
    if layers.is_empty() {
        return Err(NumericsError::Config("MLP has no layers".into()));
    }
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = linear_forward(w, b, &h)?;
        if i + 1 != layers.len() {
            h = h.map(|v| activation.apply(v));
        }
    }
    Ok(h)
}

const NORM_EPS: f64 = 1e-5;

/// Row-wise standardization without affine parameters:
/// `y = (x - mean) / sqrt(var + eps)`. Returns `y` and each row's
/// `1 / sqrt(var + eps)`.
pub fn layer_norm(x: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let k = 1.0 / (var + NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * k;
        }
        inv.push(k);
    }
    (y, inv)
}

/// Input gradient of [`layer_norm`] from its output and scale factors.
pub fn layer_norm_backward(y: &Matrix, inv: &[f64], dy: &Matrix) -> Matrix {
    let d = y.cols() as f64;
    let mut dx = dy.clone();
    for r in 0..y.rows() {
        let yr = y.row(r);
        let g = dy.row(r);
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gy = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
        let k = inv[r];
        for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
            *v = k * (g[c] - mean_g - yr[c] * mean_gy);
        }
    }
    dx
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_zero_and_arithmetic() {
        let x = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(linear_forward(&Matrix::identity(2), &[0.0, 0.0], &x).unwrap(), x);
        let y = linear_forward(&Matrix::zeros(2, 2), &[1.0, 2.0], &Matrix::from_rows(&[[9.0, 9.0]])).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[1.0, 2.0]]));
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let y = linear_forward(&w, &[0.0, 0.0], &Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[3.0, 7.0]]));
    }

    #[test]
    fn linear_shape_mismatch_is_dimension_error() {
        let err = linear_forward(&Matrix::identity(2), &[0.0, 0.0], &Matrix::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, NumericsError::Dimension { .. }));
    }

    #[test]
    fn mlp_identity_zero_and_empty() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]]);
        let id = vec![(Matrix::identity(3), vec![0.0; 3])];
        assert_eq!(mlp_forward(&id, Activation::Relu, &x).unwrap(), x);
        let zeros = vec![(Matrix::zeros(3, 3), vec![0.0; 3]), (Matrix::zeros(2, 3), vec![0.0; 2])];
        assert_eq!(mlp_forward(&zeros, Activation::Relu, &x).unwrap(), Matrix::zeros(1, 2));
        assert!(matches!(
            mlp_forward(&[], Activation::Relu, &x),
            Err(NumericsError::Config(_))
        ));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let (y, inv) = layer_norm(&Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]]));
        let r = y.row(0);
        assert!(r.iter().sum::<f64>().abs() < 1e-12);
        assert!((r.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.25 / (1.25 + NORM_EPS)).abs() < 1e-12);
        assert!(y.row(1).iter().all(|v| *v == 0.0));
        assert!((inv[1] - 1.0 / NORM_EPS.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
