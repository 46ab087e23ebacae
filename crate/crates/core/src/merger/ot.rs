//! Entropic optimal transport and transport-based neuron fusion.

use super::align::{MlpWeights, Permutation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::Checkpoint;

/// Marginal violation above which [`sinkhorn`] reports non-convergence.
pub const SINKHORN_FAIL_TOL: f64 = 1e-4;
const SINKHORN_STOP_TOL: f64 = 1e-12;

/// Entropic transport plan with uniform marginals `1/n` (rows) and `1/m`
/// (columns); the entries sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub plan: Tensor,
    pub iterations: usize,
    /// Largest relative marginal error, `max |n·row_sum − 1|` over rows and
    /// columns.
    pub violation: f64,
}

impl Coupling {
    /// The plan rescaled so rows sum to one (doubly stochastic when square).
    pub fn row_stochastic(&self) -> Tensor {
        self.plan.scale(self.plan.rows() as f64)
    }

    /// Shannon entropy of the plan in nats.
    pub fn entropy(&self) -> f64 {
        -self.plan.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    /// Column of the largest entry in each row.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.plan.argmax_rows()
    }
}

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iterations for `min ⟨P, C⟩ − eps·H(P)` with uniform
/// marginals.
pub fn sinkhorn(cost: &Tensor, eps: f64, iters: usize) -> Result<Coupling> {
    let (n, m) = cost.require_2d("sinkhorn")?;
    if !(eps > 0.0) || iters == 0 {
        return Err(Error::InvalidHyperparam(format!("sinkhorn needs eps > 0 and iters >= 1 (eps={eps}, iters={iters})")));
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let c = |i: usize, j: usize| cost.get2(i, j);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut violation = f64::INFINITY;
    let mut done = 0;
    for it in 0..iters {
        for i in 0..n {
            f[i] = eps * (la - logsumexp((0..m).map(|j| (g[j] - c(i, j)) / eps)));
        }
        for j in 0..m {
            g[j] = eps * (lb - logsumexp((0..n).map(|i| (f[i] - c(i, j)) / eps)));
        }
        violation = (0..n)
            .map(|i| {
                let s: f64 = (0..m).map(|j| ((f[i] + g[j] - c(i, j)) / eps).exp()).sum();
                (s * n as f64 - 1.0).abs()
            })
            .fold(0.0, f64::max);
        done = it + 1;
        if violation < SINKHORN_STOP_TOL {
            break;
        }
    }
    if !(violation <= SINKHORN_FAIL_TOL) {
        return Err(Error::NoConvergence(violation));
    }
    let mut plan = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            plan.push(((f[i] + g[j] - c(i, j)) / eps).exp());
        }
    }
    let plan = Tensor::new(&[n, m], plan)?;
    let col_violation = (0..m)
        .map(|j| ((0..n).map(|i| plan.get2(i, j)).sum::<f64>() * m as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(Coupling { plan, iterations: done, violation: violation.max(col_violation) })
}

#[derive(Clone, Debug)]
pub struct OtFusion {
    pub checkpoint: Checkpoint,
    pub perm: Permutation,
    pub couplings: Vec<Coupling>,
}

/// Aligns `b` to `a` layer by layer (cost: squared distance between incoming
/// weight rows and biases, inputs already aligned; normalised by its mean),
/// turns each coupling into a hard assignment by row arg-max, and averages.
pub fn ot_fuse(a: &Checkpoint, b: &Checkpoint, eps: f64, iters: usize) -> Result<OtFusion> {
    if a.kind != "mlp" {
        return Err(Error::NotSupportedKind(a.kind.clone()));
    }
    a.check_compatible(b)?;
    let wa = MlpWeights::from_checkpoint(a)?;
    let wb = MlpWeights::from_checkpoint(b)?;
    let hidden = wa.hidden();
    let mut perm = Permutation::identity(&hidden);
    let mut couplings = Vec::with_capacity(hidden.len());
    for l in 0..hidden.len() {
        // Aligning layer l only needs the earlier layers' maps.
        let aligned = wb.permuted(&perm)?;
        let (ain, bin) = (&wa.w[l], &aligned.w[l]);
        let n = hidden[l];
        let mut cost = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dw: f64 = ain.row(i).iter().zip(bin.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                let db = wa.b[l].data()[i] - wb.b[l].data()[j];
                cost.push(dw + db * db);
            }
        }
        let mean = cost.iter().sum::<f64>() / cost.len() as f64;
        if mean > 0.0 {
            for v in &mut cost {
                *v /= mean;
            }
        }
        let coupling = sinkhorn(&Tensor::new(&[n, n], cost)?, eps, iters)?;
        let assign = coupling.row_argmax();
        let mut hit = vec![false; n];
        for (i, &j) in assign.iter().enumerate() {
            if std::mem::replace(&mut hit[j], true) {
                return Err(Error::AmbiguousAssignment(format!(
                    "layer {l}: unit {j} of the second model claimed twice (row {i})"
                )));
            }
        }
        perm.layers[l] = assign;
        couplings.push(coupling);
    }
    let aligned = wb.permuted(&perm)?.to_checkpoint(b);
    let checkpoint = super::average::uniform_soup(&[a.clone(), aligned])?;
    Ok(OtFusion { checkpoint, perm, couplings })
}
