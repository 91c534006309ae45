use cooptrack_numerics::attention::{attend, attend_backward, softmax_in_place};
use cooptrack_numerics::gradcheck::{check_input_grad, check_param_grads};
use cooptrack_numerics::loss::focal_loss_grad_p;
use cooptrack_numerics::rotation::{axis_angle, det3, mat3_mul, mat3_transpose, orthonormality_error};
use cooptrack_numerics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Exhaustive minimum over all injective row→column maps (rows ≤ cols).
fn brute_force_assignment(cost: &Matrix) -> f64 {
    let (n, m) = cost.shape();
    if n > m {
        return brute_force_assignment(&cost.transpose());
    }
    fn rec(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
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

#[test]
fn hungarian_matches_permutation_enumeration_on_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let c = random_matrix(&mut rng, 5, 5);
        let a = hungarian(&c);
        assert_eq!(a.pairs.len(), 5);
        assert!((a.total_cost - brute_force_assignment(&c)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn hungarian_is_optimal_and_one_to_one(n in 1usize..=6, m in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_matrix(&mut rng, n, m);
        let a = hungarian(&c);
        prop_assert_eq!(a.pairs.len(), n.min(m));
        let mut rows: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(rows.len(), a.pairs.len());
        prop_assert_eq!(cols.len(), a.pairs.len());
        prop_assert!((a.total_cost - brute_force_assignment(&c)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut p = v.clone();
        softmax_in_place(&mut p);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn focal_nonnegative_and_decreasing_for_positive(p in 0.001f64..0.999, alpha in 0.05f64..0.95, gamma in 0.0f64..3.0) {
        prop_assert!(focal_loss(p, true, alpha, gamma) >= 0.0);
        prop_assert!(focal_loss(p, false, alpha, gamma) >= 0.0);
        prop_assert!(focal_loss(p + 0.0005, true, alpha, gamma) <= focal_loss(p, true, alpha, gamma));
        prop_assert!(focal_loss_grad_p(p, true, alpha, gamma) <= 0.0);
    }

    #[test]
    fn rot6d_decode_is_orthonormal(v in prop::array::uniform6(-3.0f64..3.0)) {
        if let Ok(r) = rot6d_decode(&v) {
            prop_assert!(orthonormality_error(&r) < 1e-9);
            prop_assert!((det3(&r) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn rot6d_round_trip_on_random_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let r = axis_angle(&axis, rng.random_range(-3.1..3.1));
        let back = rot6d_decode(&rot6d_encode(&r).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[i][j] - r[i][j]).abs() < 1e-9);
            }
        }
        let rtr = mat3_mul(&mat3_transpose(&back), &back);
        assert!((rtr[0][0] - 1.0).abs() < 1e-9 && (det3(&back) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mlp_parameter_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, "mlp", &[8, 8, 8, 8, 8], Activation::Relu, Init::XavierUniform, &mut rng);
        let x = random_matrix(&mut rng, 5, 8);
        let r = random_matrix(&mut rng, 5, 8);
        let loss = |ps: &ParamStore| mlp.infer(ps, &x).hadamard(&r).sum();
        ps.zero_grad();
        let (_, cache) = mlp.forward(&ps, &x);
        let dx = mlp.backward(&mut ps, &cache, &r);
        for c in check_param_grads(&mut ps, &mlp.params(), 64, &mut rng, &mut |p| loss(p)) {
            assert!(c.rel_error < 1e-4, "seed {seed} {}: {}", c.name, c.rel_error);
        }
        let (e, _) = check_input_grad(x.data(), dx.data(), &mut |v| {
            mlp.infer(&ps, &Matrix::from_vec(5, 8, v.to_vec()).unwrap()).hadamard(&r).sum()
        });
        assert!(e < 1e-4, "seed {seed} input grad {e}");
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (nq, nk, d, heads) = (3, 5, 8, 2);
        let q = random_matrix(&mut rng, nq, d);
        let k = random_matrix(&mut rng, nk, d);
        let v = random_matrix(&mut rng, nk, d);
        let mask: Vec<Vec<bool>> = (0..nq).map(|i| (0..nk).map(|j| i == 0 || (i + j) % 3 != 0).collect()).collect();
        let keys = KeySets::from_mask(&mask);
        let r = random_matrix(&mut rng, nq, d);
        let (_, cache) = attend(&q, &k, &v, &keys, heads);
        let (dq, dk, dv) = attend_backward(&q, &k, &v, &keys, &cache, &r);
        let f = |q: &Matrix, k: &Matrix, v: &Matrix| attend(q, k, v, &keys, heads).0.hadamard(&r).sum();
        let (e, _) = check_input_grad(q.data(), dq.data(), &mut |x| f(&Matrix::from_vec(nq, d, x.to_vec()).unwrap(), &k, &v));
        assert!(e < 1e-4, "dq {e}");
        let (e, _) = check_input_grad(k.data(), dk.data(), &mut |x| f(&q, &Matrix::from_vec(nk, d, x.to_vec()).unwrap(), &v));
        assert!(e < 1e-4, "dk {e}");
        let (e, _) = check_input_grad(v.data(), dv.data(), &mut |x| f(&q, &k, &Matrix::from_vec(nk, d, x.to_vec()).unwrap()));
        assert!(e < 1e-4, "dv {e}");

        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ps, "mha", d, heads, &mut rng);
        let xq = random_matrix(&mut rng, nq, d);
        let xkv = random_matrix(&mut rng, nk, d);
        let (_, c) = mha.forward(&ps, &xq, &xkv, keys.clone());
        mha.backward(&mut ps, &c, &r);
        let checks = check_param_grads(&mut ps, &mha.params(), 32, &mut rng, &mut |p| {
            mha.forward(p, &xq, &xkv, keys.clone()).0.hadamard(&r).sum()
        });
        for c in checks {
            assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
        }
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let x = random_matrix(&mut rng, 4, 6).scale(3.0);
        let r = random_matrix(&mut rng, 4, 6);
        let (y, inv) = layer_norm(&x);
        let dx = layer_norm_backward(&y, &inv, &r);
        let (e, _) = check_input_grad(x.data(), dx.data(), &mut |v| layer_norm(&Matrix::from_vec(4, 6, v.to_vec()).unwrap()).0.hadamard(&r).sum());
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn focal_logit_and_l1_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let z = rng.random_range(-4.0..4.0);
        for &(t, a, g) in &[(true, 0.25, 2.0), (false, 0.25, 2.0), (true, 0.5, 1.0), (false, 0.5, 1.0)] {
            let (_, dz) = focal_loss_logit(z, t, a, g);
            let (e, _) = check_input_grad(&[z], &[dz], &mut |v| focal_loss_logit(v[0], t, a, g).0);
            assert!(e < 1e-4, "focal z={z} t={t}: {e}");
        }
        let pred: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = l1_loss_grad(&pred, &target).unwrap();
        let (e, _) = check_input_grad(&pred, &g, &mut |v| l1_loss(v, &target).unwrap());
        assert!(e < 1e-4, "l1 {e}");
    }
}
