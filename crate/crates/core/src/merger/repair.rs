//! Per-unit affine correction of an interpolated mlp so its preactivation
//! statistics match the interpolation of the endpoints' statistics.

use super::align::MlpWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{forward, Checkpoint, ModelSpec, ParamStore};

pub const MIN_CALIBRATION: usize = 16;
/// Below this interpolated std a unit only gets its mean shifted.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Per-unit mean and population std of a layer's preactivations.
pub fn unit_stats(pre: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (pre.rows(), pre.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(pre.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(pre.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s / n as f64).sqrt()).collect())
}

fn preacts(spec: &ModelSpec, ck: &Checkpoint, x: &Tensor, layer: usize) -> Result<Tensor> {
    let params = ParamStore::from_checkpoint(ck)?;
    let hook = format!("layers[{layer}].pre");
    let (_, tr) = forward(spec, &params, x, &[hook.as_str()])?;
    Ok(tr[&hook].clone())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepairReport {
    /// `(layer, unit)` pairs that only received a shift.
    pub degenerate: Vec<(usize, usize)>,
    /// Per hidden layer: target std per unit.
    pub target_std: Vec<Vec<f64>>,
}

/// Corrects `interp = (1 − alpha)·a + alpha·b` hidden layer by hidden layer,
/// aiming each unit at mean `(1 − alpha)·m_a + alpha·m_b` and std
/// `(1 − alpha)·s_a + alpha·s_b` on `calib`.
pub fn repair(
    interp: &Checkpoint,
    a: &Checkpoint,
    b: &Checkpoint,
    alpha: f64,
    spec: &ModelSpec,
    calib: &Tensor,
) -> Result<(Checkpoint, RepairReport)> {
    if !matches!(spec, ModelSpec::Mlp { .. }) {
        return Err(Error::NotSupportedKind(spec.kind().into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidHyperparam(format!("alpha={alpha} must lie in [0, 1]")));
    }
    if calib.shape()[0] < MIN_CALIBRATION {
        return Err(Error::InvalidHyperparam(format!(
            "repair needs at least {MIN_CALIBRATION} calibration samples, got {}",
            calib.shape()[0]
        )));
    }
    for ck in [interp, a, b] {
        crate::zoo::check_digest(spec, ck)?;
    }
    let mut w = MlpWeights::from_checkpoint(interp)?;
    let mut current = interp.clone();
    let mut report = RepairReport::default();
    for l in 0..w.hidden().len() {
        let (ma, sa) = unit_stats(&preacts(spec, a, calib, l)?);
        let (mb, sb) = unit_stats(&preacts(spec, b, calib, l)?);
        let (mi, si) = unit_stats(&preacts(spec, &current, calib, l)?);
        let cols = w.w[l].cols();
        let mut wd = w.w[l].data().to_vec();
        let mut bd = w.b[l].data().to_vec();
        let mut targets = Vec::with_capacity(mi.len());
        for u in 0..mi.len() {
            let m_t = (1.0 - alpha) * ma[u] + alpha * mb[u];
            let s_t = (1.0 - alpha) * sa[u] + alpha * sb[u];
            targets.push(s_t);
            if si[u] < DEGENERATE_STD {
                log::warn!("repair: layer {l} unit {u} has std {:e}; shifting only", si[u]);
                report.degenerate.push((l, u));
                bd[u] += m_t - mi[u];
                continue;
            }
            let scale = s_t / si[u];
            for v in &mut wd[u * cols..(u + 1) * cols] {
                *v *= scale;
            }
            bd[u] = bd[u] * scale + (m_t - mi[u] * scale);
        }
        w.w[l] = Tensor::new(w.w[l].shape(), wd)?;
        w.b[l] = Tensor::new(w.b[l].shape(), bd)?;
        current = w.to_checkpoint(interp);
        report.target_std.push(targets);
    }
    Ok((current, report))
}
