//! Dense SVD and spectral-norm estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SVD_MAX_SWEEPS: usize = 100;
pub const SVD_TOL: f64 = 1e-12;
pub const SVD_MAX_DIM: usize = 512;

/// Thin singular value decomposition `A = U diag(S) Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `[m, r]`, orthonormal columns.
    pub u: Tensor,
    /// `r` singular values, nonincreasing.
    pub s: Vec<f64>,
    /// `[n, r]`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    /// Column `j` of U.
    pub fn u_col(&self, j: usize) -> Vec<f64> {
        column(&self.u, j)
    }

    pub fn v_col(&self, j: usize) -> Vec<f64> {
        column(&self.v, j)
    }

    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.rows(), self.s.len());
        let n = self.v.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..r).map(|k| self.u.get2(i, k) * self.s[k] * self.v.get2(j, k)).sum();
            }
        }
        Tensor::raw(vec![m, n], out)
    }
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get2(i, j)).collect()
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = a.require_2d("svd")?;
    if m > SVD_MAX_DIM || n > SVD_MAX_DIM {
        return Err(Error::ShapeMismatch(format!("svd limited to {SVD_MAX_DIM}x{SVD_MAX_DIM}, got {m}x{n}")));
    }
    if m < n {
        let t = svd(&a.transpose()?)?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| column(a, j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure(format!("jacobi svd exceeded {SVD_MAX_SWEEPS} sweeps")));
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = norms[order[0]];
    let floor = smax * f64::EPSILON * m as f64;

    let mut s = Vec::with_capacity(n);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if norms[j] > floor && norms[j] > 0.0 {
            s.push(norms[j]);
            ucols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            s.push(0.0);
            ucols.push(Vec::new());
            pending.push(k);
        }
    }
    for k in pending {
        ucols[k] = complete_basis(&ucols, m);
    }
    let mut u = vec![0.0; m * n];
    let mut v = vec![0.0; n * n];
    for (k, &j) in order.iter().enumerate() {
        for i in 0..m {
            u[i * n + k] = ucols[k][i];
        }
        for i in 0..n {
            v[i * n + k] = vcols[j][i];
        }
    }
    Ok(Svd { u: Tensor::raw(vec![m, n], u), s, v: Tensor::raw(vec![n, n], v) })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Unit vector orthogonal to every non-empty vector in `basis`.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for k in 0..m {
        let mut v = vec![0.0; m];
        v[k] = 1.0;
        for _ in 0..2 {
            for b in basis.iter().filter(|b| !b.is_empty()) {
                let d: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= d * bi;
                }
            }
        }
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-6 {
            return v.iter().map(|x| x / nrm).collect();
        }
    }
    unreachable!("fewer than m basis vectors always leave a free direction")
}

/// Largest singular value with its singular vectors, by power iteration.
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Power iteration from a seeded uniform(−1, 1) start. The sign is fixed so the
/// first nonzero component of `u` is positive.
pub fn spectral_norm(w: &Tensor, iters: usize, seed: u64) -> Result<SpectralNorm> {
    let (m, n) = w.require_2d("spectral_norm")?;
    if iters == 0 {
        return Err(Error::InvalidHyperparam("spectral_norm needs iters >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut u = vec![0.0; m];
    let wd = w.data();
    for _ in 0..iters {
        for i in 0..m {
            u[i] = (0..n).map(|j| wd[i * n + j] * v[j]).sum();
        }
        if normalize(&mut u) == 0.0 {
            let mut e = vec![0.0; m];
            e[0] = 1.0;
            return Ok(SpectralNorm { sigma: 0.0, u: e, v });
        }
        for j in 0..n {
            v[j] = (0..m).map(|i| wd[i * n + j] * u[i]).sum();
        }
        normalize(&mut v);
    }
    let mut sigma: f64 = (0..m)
        .map(|i| u[i] * (0..n).map(|j| wd[i * n + j] * v[j]).sum::<f64>())
        .sum();
    if sigma < 0.0 {
        // v came back from Wᵀu so this only happens through rounding
        sigma = -sigma;
        v.iter_mut().for_each(|x| *x = -*x);
    }
    if let Some(first) = u.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SpectralNorm { sigma, u, v })
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orth_err(q: &Tensor) -> f64 {
        let qtq = q.transpose().unwrap().matmul(q).unwrap();
        qtq.max_abs_diff(&Tensor::eye(qtq.rows()))
    }

    #[test]
    fn diagonal() {
        let a = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.s, vec![3.0, 1.0]);
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(svd(&a).unwrap().s, vec![3.0, 1.0]);
    }

    #[test]
    fn rank_one() {
        let u = [1.0, 2.0, -2.0];
        let v = [3.0, 4.0];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let a = Tensor::new(&[3, 2], data).unwrap();
        let s = svd(&a).unwrap();
        assert!((s.s[0] - 15.0).abs() < 1e-12);
        assert!(s.s[1].abs() < 1e-12);
        assert!(orth_err(&s.u) < 1e-8);
        assert!(orth_err(&s.v) < 1e-8);
    }

    #[test]
    fn random_reconstruction_both_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for shape in [[6, 4], [4, 6], [8, 8]] {
            let a = Tensor::uniform(&shape, 1.0, &mut rng);
            let s = svd(&a).unwrap();
            let resid = s.reconstruct().sub(&a).unwrap().norm();
            assert!(resid <= 1e-8 * a.norm(), "{resid}");
            assert!(s.s.windows(2).all(|w| w[0] >= w[1]) && s.s.iter().all(|&x| x >= 0.0));
            assert!(orth_err(&s.u) < 1e-8 && orth_err(&s.v) < 1e-8);
        }
    }

    #[test]
    fn spectral_norm_cases() {
        let a = Tensor::new(&[2, 2], vec![5.0, 0.0, 0.0, 2.0]).unwrap();
        let sn = spectral_norm(&a, 50, 1).unwrap();
        assert!((sn.sigma - 5.0).abs() < 1e-6);
        assert!(sn.u[0] > 0.0);
        assert_eq!(spectral_norm(&Tensor::zeros(&[3, 2]), 10, 1).unwrap().sigma, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::uniform(&[8, 8], 1.0, &mut rng);
        let top = svd(&w).unwrap().s[0];
        let sn = spectral_norm(&w, 200, 3).unwrap();
        assert!((sn.sigma - top).abs() < 1e-5, "{} vs {top}", sn.sigma);
    }
}
