//! Diagonal Fisher information and precision-weighted merging.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{forward_graph, register_params, Checkpoint, Model};

pub const DEFAULT_EPS_FLOOR: f64 = 1e-12;

/// Path → elementwise Fisher estimate, shaped like the checkpoint entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FisherDiag {
    pub entries: BTreeMap<String, Tensor>,
}

/// Mean over `n_samples` of the squared gradient of `log p(y | x)`. Inputs
/// cycle through the rows of `x`. Labels are drawn from the model's own
/// predictive distribution, or taken from `labels` when given.
pub fn fisher_estimate(
    model: &Model,
    x: &Tensor,
    labels: Option<&[usize]>,
    n_samples: usize,
    seed: u64,
) -> Result<FisherDiag> {
    if n_samples == 0 {
        return Err(Error::InvalidHyperparam("fisher needs n_samples >= 1".into()));
    }
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::LabelMismatch(format!("{} labels for {n} inputs", l.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: BTreeMap<String, Vec<f64>> =
        model.params.iter().map(|(p, t)| (p.to_string(), vec![0.0; t.len()])).collect();
    let mut params = model.params.clone();
    for p in model.params.paths().cloned().collect::<Vec<_>>() {
        params.set_trainability(&p, crate::zoo::Trainable::All)?;
    }
    for s in 0..n_samples {
        let row = x.select_rows(&[s % n]);
        let mut g = Graph::new();
        let vars = register_params(&mut g, &params, true);
        let xv = g.constant(row);
        let out = forward_graph(&mut g, &model.spec, &model.plan, &vars, xv, &BTreeSet::new())?;
        let y = match labels {
            Some(l) => l[s % n],
            None => {
                let p = g.value(out.logits).softmax(1.0)?;
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                let mut pick = p.len() - 1;
                for (c, &pc) in p.data().iter().enumerate() {
                    cum += pc;
                    if u < cum {
                        pick = c;
                        break;
                    }
                }
                pick
            }
        };
        let lp = g.log_softmax(out.logits, 1.0)?;
        let picked = g.pick_cols(lp, &[y])?;
        let root = g.sum(picked);
        let grads = g.backward(root)?;
        for (p, v) in &vars {
            if let Some(gr) = grads.get(v) {
                for (a, d) in acc.get_mut(&p.to_string()).expect("registered").iter_mut().zip(gr.data()) {
                    *a += d * d;
                }
            }
        }
    }
    let mut entries = BTreeMap::new();
    for (p, t) in model.params.iter() {
        let data = acc.remove(&p.to_string()).expect("registered").into_iter().map(|v| v / n_samples as f64).collect();
        entries.insert(p.to_string(), Tensor::new(t.shape(), data)?);
    }
    Ok(FisherDiag { entries })
}

/// Per element `Σ λ_i F_i θ_i / Σ λ_i F_i`. Where the weighted Fisher mass
/// is at most `eps_floor` the element falls back to the plain mean.
pub fn fisher_merge(cks: &[Checkpoint], fishers: &[FisherDiag], lambdas: &[f64], eps_floor: f64) -> Result<Checkpoint> {
    super::average::check_all(cks)?;
    if fishers.len() != cks.len() || lambdas.len() != cks.len() {
        return Err(Error::SizeMismatch(format!(
            "{} checkpoints, {} fishers, {} weights",
            cks.len(),
            fishers.len(),
            lambdas.len()
        )));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) || lambdas.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidHyperparam("fisher weights must be >= 0 with a positive sum".into()));
    }
    if !(eps_floor >= 0.0) {
        return Err(Error::InvalidHyperparam(format!("eps_floor={eps_floor}")));
    }
    for (f, c) in fishers.iter().zip(cks) {
        for e in &c.entries {
            let t = f.entries.get(&e.path).ok_or_else(|| Error::ShapeMismatch(format!("fisher lacks `{}`", e.path)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!("fisher `{}` {:?} vs {:?}", e.path, t.shape(), e.shape)));
            }
            if t.data().iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidHyperparam(format!("negative fisher entry in `{}`", e.path)));
            }
        }
    }
    let k = cks.len() as f64;
    Ok(cks[0].map_entries(|i, e| {
        let fs: Vec<&[f64]> = fishers.iter().map(|f| f.entries[&e.path].data()).collect();
        (0..e.data.len())
            .map(|j| {
                let mut num = 0.0;
                let mut den = 0.0;
                for (m, c) in cks.iter().enumerate() {
                    let w = lambdas[m] * fs[m][j];
                    num += w * c.entries[i].data[j] as f64;
                    den += w;
                }
                if den > eps_floor {
                    (num / den) as f32
                } else {
                    (cks.iter().map(|c| c.entries[i].data[j] as f64).sum::<f64>() / k) as f32
                }
            })
            .collect()
    }))
}
