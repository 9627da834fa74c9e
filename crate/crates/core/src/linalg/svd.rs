//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The columns of the working matrix are rotated pairwise until every pair is
//! orthogonal to within [`CONVERGENCE_TOL`] (cosine of the angle between the
//! columns). The column norms are then the singular values, the normalized
//! columns the left singular vectors, and the accumulated rotations the right
//! singular vectors. Wide inputs are handled through the transpose.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

pub const CONVERGENCE_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;

/// Columns whose norm falls below this fraction of ‖W‖_F are treated as null
/// and get a completed orthonormal left vector.
const NULL_COLUMN_RTOL: f64 = 1e-14;

/// `W = U · diag(sigma) · Vᵀ` with `U: m×N`, `V: n×N`, `N = min(m, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    /// Number of singular triplets, `min(m, n)`.
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    /// `Σ_{r<k} σ_r^power · u_r v_rᵀ`.
    pub fn truncated_reconstruct(&self, k: usize, power: f64) -> Result<Matrix> {
        let big_n = self.rank_bound();
        if k == 0 || k > big_n {
            return Err(Error::OutOfRange {
                what: "rank k",
                value: k,
                lo: 1,
                hi: big_n,
            });
        }
        if !(power >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "reconstruction power must be >= 1, got {power}"
            )));
        }
        let (m, n) = (self.m(), self.n());
        let weights: Vec<f64> = self.sigma[..k].iter().map(|s| s.powf(power)).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let u_row = self.u.row(i);
            let out_row = &mut out[i * n..(i + 1) * n];
            for (r, w) in weights.iter().enumerate() {
                let coeff = u_row[r] * w;
                if coeff == 0.0 {
                    continue;
                }
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o += coeff * self.v.get(j, r);
                }
            }
        }
        Ok(Matrix::from_raw(m, n, out))
    }

    /// Full reconstruction `U Σ Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.truncated_reconstruct(self.rank_bound(), 1.0)
            .expect("full rank is always in range")
    }

    /// Right singular vector `v_r` as a plain vector.
    pub fn right_vector(&self, r: usize) -> Vec<f64> {
        self.v.col(r)
    }

    pub fn left_vector(&self, r: usize) -> Vec<f64> {
        self.u.col(r)
    }
}

/// Thin SVD of `w`.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    svd_labeled(w, "matrix")
}

/// Thin SVD of `w`; `context` names the layer in convergence errors.
pub fn svd_labeled(w: &Matrix, context: &str) -> Result<SvdFactors> {
    if !w.is_finite() {
        let idx = w.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite {
            row: idx / w.cols(),
            col: idx % w.cols(),
        });
    }
    if w.rows() >= w.cols() {
        tall_svd(w, context)
    } else {
        // W = (Wᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let t = tall_svd(&w.transpose(), context)?;
        let mut f = SvdFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut f);
        Ok(f)
    }
}

fn tall_svd(a: &Matrix, context: &str) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    let scale = a.frobenius();

    // column-major working copies so rotations touch contiguous memory
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.col(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    let mut converged = n < 2 || scale == 0.0;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let cosine = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(cosine);
                if cosine <= CONVERGENCE_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            context: format!("{context} ({m}x{n})"),
            sweeps,
            residual,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]).then(i.cmp(&j)));

    let null_cut = NULL_COLUMN_RTOL * scale;
    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &idx in &order {
        let s = sig[idx];
        if s > null_cut && s > 0.0 {
            u_cols.push(Some(cols[idx].iter().map(|x| x / s).collect()));
        } else {
            u_cols.push(None);
        }
        sigma.push(s);
        v_cols.push(vcols[idx].clone());
    }
    let u_cols = complete_orthonormal(u_cols, m);

    let u = Matrix::from_fn(m, n, |r, c| u_cols[c][r]);
    let v = Matrix::from_fn(n, n, |r, c| v_cols[c][r]);
    let mut f = SvdFactors { u, sigma, v };
    fix_signs(&mut f);
    Ok(f)
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, m: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut next_axis = 0;
    cols.into_iter()
        .map(|c| match c {
            Some(v) => v,
            None => loop {
                assert!(next_axis < m, "ran out of axes completing an orthonormal basis");
                let mut e = vec![0.0; m];
                e[next_axis] = 1.0;
                next_axis += 1;
                // two passes of modified Gram-Schmidt
                for _ in 0..2 {
                    for b in &basis {
                        let proj = dot(&e, b);
                        for (x, y) in e.iter_mut().zip(b) {
                            *x -= proj * y;
                        }
                    }
                }
                let norm = dot(&e, &e).sqrt();
                if norm > 0.5 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    basis.push(e.clone());
                    break e;
                }
            },
        })
        .collect()
}

/// Makes the largest-magnitude entry of each `u_r` positive (first index on ties),
/// flipping `v_r` along with it.
fn fix_signs(f: &mut SvdFactors) {
    let (m, n) = (f.u.rows(), f.v.rows());
    for r in 0..f.rank_bound() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..m {
            let x = f.u.get(i, r);
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..m {
                let x = f.u.get(i, r);
                f.u.set(i, r, -x);
            }
            for j in 0..n {
                let x = f.v.get(j, r);
                f.v.set(j, r, -x);
            }
        }
    }
}

/// Largest singular value of `w`.
pub fn spectral_norm(w: &Matrix) -> Result<f64> {
    Ok(svd(w)?.sigma_max())
}

/// Convenience wrapper over [`SvdFactors::truncated_reconstruct`].
pub fn truncated_reconstruct(f: &SvdFactors, k: usize, power: f64) -> Result<Matrix> {
    f.truncated_reconstruct(k, power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// σ of a 2×2 matrix from the characteristic polynomial of WᵀW.
    fn two_by_two_oracle(w: &Matrix) -> [f64; 2] {
        let g = w.t_matmul(w).unwrap();
        let tr = g.get(0, 0) + g.get(1, 1);
        let det = g.get(0, 0) * g.get(1, 1) - g.get(0, 1) * g.get(1, 0);
        let disc = (tr * tr / 4.0 - det).sqrt();
        [(tr / 2.0 + disc).sqrt(), (tr / 2.0 - disc).max(0.0).sqrt()]
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.max_abs_diff(&Matrix::identity(q.cols())).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let f = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 1.0]);
        assert!(f.u.max_abs_diff(&Matrix::identity(2)).unwrap() < 1e-15);
        assert!(f.v.max_abs_diff(&Matrix::identity(2)).unwrap() < 1e-15);
    }

    #[test]
    fn zero_matrix() {
        for (m, n) in [(3, 2), (2, 5), (4, 4)] {
            let f = svd(&Matrix::zeros(m, n)).unwrap();
            assert!(f.sigma.iter().all(|&s| s == 0.0));
            assert!(orthonormality_error(&f.u) < 1e-12);
            assert!(orthonormality_error(&f.v) < 1e-12);
        }
    }

    #[test]
    fn worked_two_by_two() {
        let w = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let oracle = two_by_two_oracle(&w);
        // 3 ± √5 are the eigenvalues of WᵀW
        assert!((oracle[0] - (3.0 + 5f64.sqrt()).sqrt()).abs() < 1e-14);
        let f = svd(&w).unwrap();
        assert!((f.sigma[0] - oracle[0]).abs() < 1e-12);
        assert!((f.sigma[1] - oracle[1]).abs() < 1e-12);
        assert!((f.sigma[0] - 2.2882).abs() < 1e-4);
        assert!((f.sigma[1] - 0.8740).abs() < 1e-4);
    }

    #[test]
    fn wide_and_tall_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (m, n) in [(7, 3), (3, 7), (1, 4), (4, 1), (1, 1)] {
            let w = Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let f = svd(&w).unwrap();
            assert_eq!(f.u.shape(), (m, m.min(n)));
            assert_eq!(f.v.shape(), (n, m.min(n)));
            let err = f.reconstruct().sub(&w).unwrap().frobenius() / w.frobenius();
            assert!(err < 1e-12, "{m}x{n}: {err}");
            assert!(orthonormality_error(&f.u) < 1e-12);
            assert!(orthonormality_error(&f.v) < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_completes_basis() {
        let u = [1.0, 2.0, -1.0, 0.5];
        let v = [0.3, -0.2, 0.9];
        let w = Matrix::from_fn(4, 3, |i, j| 5.0 * u[i] * v[j]);
        let f = svd(&w).unwrap();
        assert!(f.sigma[1] < 1e-12 * f.sigma[0]);
        assert!(orthonormality_error(&f.u) < 1e-12);
        assert!(orthonormality_error(&f.v) < 1e-12);
    }

    #[test]
    fn sign_convention() {
        let w = Matrix::diag(&[-3.0, 1.0]);
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma, vec![3.0, 1.0]);
        for r in 0..2 {
            let col = f.u.col(r);
            let top = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(top > 0.0);
        }
        assert!(f.reconstruct().max_abs_diff(&w).unwrap() < 1e-15);
    }

    #[test]
    fn truncated_reconstruction() {
        let f = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        let g = f.truncated_reconstruct(1, 2.0).unwrap();
        assert_eq!(g, Matrix::diag(&[9.0, 0.0]));
        assert!(f.truncated_reconstruct(0, 1.0).is_err());
        assert!(f.truncated_reconstruct(3, 1.0).is_err());
        assert!(f.truncated_reconstruct(1, 0.5).is_err());
    }

    #[test]
    fn truncated_matches_rank_one_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let f = svd(&w).unwrap();
        let mut oracle = Matrix::zeros(4, 3);
        for r in 0..2 {
            let s = f.sigma[r].powi(2);
            for i in 0..4 {
                for j in 0..3 {
                    let x = oracle.get(i, j) + s * f.u.get(i, r) * f.v.get(j, r);
                    oracle.set(i, j, x);
                }
            }
        }
        let got = f.truncated_reconstruct(2, 2.0).unwrap();
        assert!(got.max_abs_diff(&oracle).unwrap() < 1e-10);
        let full = f.truncated_reconstruct(3, 1.0).unwrap();
        assert!(full.sub(&w).unwrap().frobenius() / w.frobenius() < 1e-9);
    }

    #[test]
    fn spectral_norm_cases() {
        assert_eq!(spectral_norm(&Matrix::diag(&[3.0, 1.0])).unwrap(), 3.0);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Matrix::from_rows(&[vec![c, -s], vec![s, c]]).unwrap();
        assert!((spectral_norm(&rot).unwrap() - 1.0).abs() < 1e-14);
        let w = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!((spectral_norm(&w).unwrap() - two_by_two_oracle(&w)[0]).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut w = Matrix::zeros(2, 2);
        w.data_mut()[3] = f64::INFINITY;
        assert!(matches!(svd(&w), Err(Error::NonFinite { row: 1, col: 1 })));
    }
}
