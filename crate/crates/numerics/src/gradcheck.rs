//! Central finite-difference gradient checking.
//!
//! Entries where the one-sided slopes disagree (the probe straddles a ReLU or
//! max-pool kink) are skipped and counted rather than compared.

use rand::seq::index::sample;
use rand::Rng;

use crate::param::{ParamId, ParamStore};

pub const FD_EPS: f64 = 1e-5;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Denominator floor for tensors whose gradients are essentially zero.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
struct Probe {
    central: f64,
    kink: bool,
}

fn probe(f0: f64, fp: f64, fm: f64, eps: f64) -> Probe {
    let sp = (fp - f0) / eps;
    let sm = (f0 - fm) / eps;
    let scale = sp.abs().max(sm.abs());
    Probe {
        central: (fp - fm) / (2.0 * eps),
        kink: (sp - sm).abs() > 2e-4 * scale + 1e-6,
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares the analytic gradients already accumulated in `ps` against
/// central differences of `f` for up to `samples` random entries per tensor.
pub fn check_param_grads(
    ps: &mut ParamStore,
    ids: &[ParamId],
    samples: usize,
    rng: &mut impl Rng,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> Vec<TensorCheck> {
    let f0 = f(ps);
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = ps.value(id).len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            sample(rng, n, samples).into_vec()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut skipped = 0;
        for idx in picks {
            let orig = ps.value(id).data()[idx];
            ps.value_mut(id).data_mut()[idx] = orig + FD_EPS;
            let fp = f(ps);
            ps.value_mut(id).data_mut()[idx] = orig - FD_EPS;
            let fm = f(ps);
            ps.value_mut(id).data_mut()[idx] = orig;
            let p = probe(f0, fp, fm, FD_EPS);
            if p.kink {
                skipped += 1;
                continue;
            }
            analytic.push(ps.grad(id).data()[idx]);
            numeric.push(p.central);
        }
        out.push(TensorCheck {
            name: ps.name(id).to_string(),
            rel_error: relative_error(&analytic, &numeric, REL_FLOOR),
            checked: analytic.len(),
            skipped,
        });
    }
    out
}

/// Central-difference gradient of `f` at `x` (all entries), with kink
/// flags per entry.
pub fn numeric_grad(x: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> (Vec<f64>, Vec<bool>) {
    let mut xs = x.to_vec();
    let f0 = f(&xs);
    let mut g = Vec::with_capacity(x.len());
    let mut kinks = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + FD_EPS;
        let fp = f(&xs);
        xs[i] = orig - FD_EPS;
        let fm = f(&xs);
        xs[i] = orig;
        let p = probe(f0, fp, fm, FD_EPS);
        g.push(p.central);
        kinks.push(p.kink);
    }
    (g, kinks)
}

/// Relative error between `analytic` and the numeric gradient of `f`,
/// ignoring kink entries. Returns `(error, skipped)`.
pub fn check_input_grad(x: &[f64], analytic: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> (f64, usize) {
    let (num, kinks) = numeric_grad(x, f);
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut skipped = 0;
    for i in 0..x.len() {
        if kinks[i] {
            skipped += 1;
        } else {
            a.push(analytic[i]);
            n.push(num[i]);
        }
    }
    (relative_error(&a, &n, REL_FLOOR), skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_input_gradient() {
        let x = [1.0, -2.0, 0.5];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (e, s) = check_input_grad(&x, &analytic, &mut |v| v.iter().map(|a| a * a).sum());
        assert!(e < 1e-8 && s == 0);
    }

    #[test]
    fn abs_at_zero_is_a_kink() {
        let (_, kinks) = numeric_grad(&[0.0], &mut |v| v[0].abs());
        assert!(kinks[0]);
    }
}
