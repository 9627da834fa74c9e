use s2d_wasm_demo::{audit, collapse, descend};

#[test]
fn audit_of_spiked_diagonal_selects_top_component() {
    let w = [10.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1];
    let s = audit(3, 3, &w, 0.95, 3).unwrap();
    assert_eq!(s.sigma, vec![10.0, 0.1, 0.1]);
    assert_eq!(s.k_hat, Some(1));
    assert!((s.pcdr[2].unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn audit_rejects_bad_shape() {
    assert!(audit(2, 2, &[1.0, 2.0, 3.0], 0.95, 3).is_err());
}

#[test]
fn single_outlier_zeroes_small_values_at_four_bits() {
    let mut v = vec![0.01; 15];
    v.push(100.0);
    let c = collapse(&v, 4).unwrap();
    assert_eq!(c.zeroed, 15);
    assert!(c.dequantized[..15].iter().all(|&d| d == 0.0));
}

#[test]
fn descent_shrinks_the_spike_only() {
    let w = [10.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5];
    let d = descend(3, 3, &w, 2.0, 1.0, 1e-3, 0.5, 20).unwrap();
    assert!(d.k_hat.iter().all(|k| *k == Some(1)));
    let (first, last) = (&d.sigma[0], d.sigma.last().unwrap());
    assert!(last[0] < first[0]);
    assert_eq!(last[1], first[1]);
    assert_eq!(d.sigma.len(), 21);
}
