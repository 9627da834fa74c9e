use proptest::prelude::*;
use s2d_core::diagnostics::{decompose_activation, pcdr_activation, pcdr_spectral, verify_bound};
use s2d_core::linalg::{svd, Matrix};
use s2d_core::quant::{calibrate, fake_quant, quant_mse, ste_backward, QuantScheme};
use s2d_core::regularizer::{apply_penalty, refresh_cache, s2d_gradient, CacheEntry, S2DConfig};

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c)
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

/// Tensor-sized inputs; bit-width grids are not nested, so tiny inputs can be non-monotone.
fn tensor() -> impl Strategy<Value = Matrix> {
    (4usize..=16, 32usize..=64).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c)
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn matrix_and_x(max: usize) -> impl Strategy<Value = (Matrix, Vec<f64>)> {
    matrix(max).prop_flat_map(|w| {
        let n = w.cols();
        (Just(w), prop::collection::vec(-1.0f64..1.0, n))
    })
}

fn gram_deviation(q: &Matrix) -> f64 {
    let g = q.t_matmul(q).unwrap();
    g.max_abs_diff(&Matrix::identity(q.cols())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn svd_factors_are_orthonormal_sorted_and_exact(w in matrix(32)) {
        let f = svd(&w).unwrap();
        prop_assert!(gram_deviation(&f.u) <= 1e-10);
        prop_assert!(gram_deviation(&f.v) <= 1e-10);
        prop_assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(f.sigma.iter().all(|&s| s >= 0.0));
        let err = f.reconstruct().sub(&w).unwrap().frobenius();
        prop_assert!(err <= 1e-9 * w.frobenius().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn singular_values_scale_linearly(w in matrix(16), c in 0.1f64..10.0) {
        let (a, b) = (svd(&w).unwrap(), svd(&w.scale(c)).unwrap());
        let tol = 1e-10 * (c * a.sigma_max()).max(1.0);
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            prop_assert!((c * x - y).abs() <= tol);
        }
    }

    #[test]
    fn spectral_norm_bounds_every_unit_direction(w in matrix(12), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f = svd(&w).unwrap();
        for _ in 0..100 {
            let mut x: Vec<f64> = (0..w.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 { continue; }
            x.iter_mut().for_each(|v| *v /= norm);
            prop_assert!(verify_bound(&w, &x).unwrap().holds);
        }
        let v1 = f.right_vector(0);
        let gain = w.matvec(&v1).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((gain - f.sigma_max()).abs() <= 1e-9);
    }

    #[test]
    fn pcdr_is_monotone_and_complete((w, x) in matrix_and_x(10), i in 0usize..10) {
        let f = svd(&w).unwrap();
        let i = i % w.rows();
        let n = f.rank_bound();
        let act: Vec<Option<f64>> = (1..=n).map(|k| pcdr_activation(&f, &x, i, k).unwrap()).collect();
        let spec: Vec<Option<f64>> = (1..=n).map(|k| pcdr_spectral(&f.sigma, k).unwrap()).collect();
        for series in [act, spec] {
            if series.iter().all(Option::is_some) {
                let s: Vec<f64> = series.into_iter().flatten().collect();
                prop_assert!(s.windows(2).all(|p| p[0] <= p[1]));
                prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((s[n - 1] - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn decomposition_sums_to_the_activation((w, x) in matrix_and_x(10), i in 0usize..10) {
        let f = svd(&w).unwrap();
        let i = i % w.rows();
        let d = decompose_activation(&f, &x, i).unwrap();
        let direct = w.matvec(&x).unwrap()[i];
        let sum: f64 = d.terms.iter().sum();
        let scale = d.terms.iter().map(|t| t.abs()).sum::<f64>().max(direct.abs());
        prop_assert!((sum - direct).abs() <= 1e-9 * scale.max(1e-300));
    }

    #[test]
    fn pcdr_ignores_positive_scaling((w, x) in matrix_and_x(8), i in 0usize..8, c in 0.01f64..100.0) {
        let i = i % w.rows();
        let (f, fc) = (svd(&w).unwrap(), svd(&w.scale(c)).unwrap());
        let xc: Vec<f64> = x.iter().map(|v| v * c).collect();
        for k in 1..=f.rank_bound() {
            let base = pcdr_activation(&f, &x, i, k).unwrap();
            for other in [pcdr_activation(&fc, &x, i, k).unwrap(), pcdr_activation(&f, &xc, i, k).unwrap()] {
                match (base, other) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                    (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
                }
            }
        }
    }

    #[test]
    fn penalty_hits_large_components_quadratically(s1 in 1.0f64..100.0, ratio in 1.5f64..50.0) {
        let s2 = s1 / ratio;
        let f = svd(&Matrix::diag(&[s1, s2])).unwrap();
        let g = s2d_gradient(&f, 2.0, 1.0, None).unwrap();
        let got = g.get(0, 0).abs() / g.get(1, 1).abs();
        prop_assert!((got / (s1 / s2).powi(2) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn one_penalty_step_shrinks_sigma_max(w in matrix(10), n in 1.5f64..4.0) {
        let f = svd(&w).unwrap();
        prop_assume!(f.sigma_max() > 1e-6);
        for k in [None, Some(1)] {
            let eta_lambda = 1e-3 * f.sigma_max().powf(1.0 - n);
            let g = s2d_gradient(&f, n, 1.0, k).unwrap();
            let next = w.sub(&g.scale(eta_lambda)).unwrap();
            prop_assert!(svd(&next).unwrap().sigma_max() < f.sigma_max());
        }
    }

    #[test]
    fn unit_power_is_plain_decay(w in matrix(9), lambda in 0.0f64..1.0) {
        let g = s2d_gradient(&svd(&w).unwrap(), 1.0, lambda, None).unwrap();
        prop_assert!(g.max_abs_diff(&w.scale(lambda)).unwrap() <= 1e-10);
    }

    #[test]
    fn cache_entries_match_shapes_and_zero_contract(a in matrix(12), b in matrix(12), tau in 0.3f64..1.0) {
        let cfg = S2DConfig { tau, ..S2DConfig::default() };
        let cache = refresh_cache(&[("a", &a), ("b", &b)], &cfg, 7, None);
        for (e, w) in cache.entries.iter().zip([&a, &b]) {
            prop_assert_eq!(e.g_reg.shape(), w.shape());
            prop_assert_eq!(e.computed_at_step, 7);
            if e.k_hat.is_none() {
                prop_assert!(e.g_reg.data().iter().all(|&v| v == 0.0));
                let out = apply_penalty(w, e, 0.5).unwrap();
                prop_assert!(out.data().iter().zip(w.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn fake_quant_error_is_at_most_half_a_step(w in matrix(12), bits in 2u32..=8, symmetric in any::<bool>()) {
        let s = if symmetric { QuantScheme::weights(bits) } else { QuantScheme::activations(bits) };
        let p = calibrate(&w, &s).unwrap();
        prop_assert!(p.scales.iter().all(|&sc| sc > 0.0));
        let (qmin, qmax) = s.code_range();
        if symmetric {
            prop_assert!(p.zero_points.iter().all(|&z| z == 0));
        } else {
            prop_assert!(p.zero_points.iter().all(|&z| (qmin..=qmax).contains(&z)));
        }
        let q = fake_quant(&w, &p, &s);
        for r in 0..w.rows() {
            let g = if p.scales.len() == 1 { 0 } else { r };
            let (sc, zp) = (p.scales[g], p.zero_points[g]);
            let (lo, hi) = ((qmin - zp) as f64 * sc, (qmax - zp) as f64 * sc);
            for c in 0..w.cols() {
                let v = w.get(r, c);
                if v >= lo && v <= hi {
                    prop_assert!((v - q.get(r, c)).abs() <= sc / 2.0 * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn symmetric_codes_are_sign_symmetric(w in matrix(10), bits in 2u32..=8) {
        let s = QuantScheme::weights(bits);
        let p = calibrate(&w, &s).unwrap();
        let (a, b) = (fake_quant(&w, &p, &s), fake_quant(&w.scale(-1.0), &p, &s));
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn more_bits_never_raise_error(w in tensor(), symmetric in any::<bool>()) {
        let base = if symmetric { QuantScheme::weights(2) } else { QuantScheme::activations(2) };
        let mse: Vec<f64> = (2..=8).map(|b| quant_mse(&w, &base.with_bits(b)).unwrap()).collect();
        prop_assert!(mse.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn ste_passes_exactly_the_clamp_interval(w in matrix(8), bits in 2u32..=8, stretch in 0.5f64..2.0) {
        let s = QuantScheme::activations(bits);
        let p = calibrate(&w, &s).unwrap();
        let probe = w.scale(stretch);
        let up = Matrix::from_fn(w.rows(), w.cols(), |r, c| 1.0 + (r + c) as f64);
        let g = ste_backward(&up, &probe, &p, &s).unwrap();
        let (qmin, qmax) = s.code_range();
        let lo = (qmin - p.zero_points[0]) as f64 * p.scales[0];
        let hi = (qmax - p.zero_points[0]) as f64 * p.scales[0];
        for (i, v) in probe.data().iter().enumerate() {
            let inside = *v >= lo && *v <= hi;
            prop_assert_eq!(g.data()[i] != 0.0, inside);
        }
    }
}

#[test]
fn zero_k_hat_entry_is_identity_on_gradient() {
    let g = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.5, 0.25]]).unwrap();
    let entry = CacheEntry::empty("w", 2, 2);
    assert_eq!(apply_penalty(&g, &entry, 1.0).unwrap(), g);
}
