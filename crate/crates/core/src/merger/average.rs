//! Elementwise weight averages: uniform and greedy soups, interpolation.

use crate::error::{Error, Result};
use crate::zoo::Checkpoint;

/// All checkpoints share one spec digest and entry layout.
pub fn check_all(cks: &[Checkpoint]) -> Result<()> {
    let first = cks.first().ok_or(Error::EmptyInput)?;
    for c in &cks[1..] {
        first.check_compatible(c)?;
    }
    Ok(())
}

/// `Σ w_i θ_i / Σ w_i` per element, accumulated in 64-bit.
pub fn weighted_average(cks: &[Checkpoint], weights: &[f64]) -> Result<Checkpoint> {
    check_all(cks)?;
    if weights.len() != cks.len() {
        return Err(Error::SizeMismatch(format!("{} weights for {} checkpoints", weights.len(), cks.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidHyperparam("averaging weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidHyperparam("averaging weights sum to zero".into()));
    }
    Ok(cks[0].map_entries(|i, e| {
        (0..e.data.len())
            .map(|k| {
                let s: f64 = cks.iter().zip(weights).map(|(c, w)| w * c.entries[i].data[k] as f64).sum();
                (s / total) as f32
            })
            .collect()
    }))
}

/// Elementwise mean of all checkpoints.
pub fn uniform_soup(cks: &[Checkpoint]) -> Result<Checkpoint> {
    weighted_average(cks, &vec![1.0; cks.len()])
}

/// `(1 − alpha)·ptm + alpha·finetuned`.
pub fn wise_ft(ptm: &Checkpoint, finetuned: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    ptm.check_compatible(finetuned)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidHyperparam(format!("alpha={alpha} must lie in [0, 1]")));
    }
    Ok(ptm.map_entries(|i, e| {
        e.data
            .iter()
            .zip(&finetuned.entries[i].data)
            .map(|(&p, &f)| ((1.0 - alpha) * p as f64 + alpha * f as f64) as f32)
            .collect()
    }))
}

/// One candidate considered by [`greedy_soup`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoupStep {
    pub candidate: usize,
    /// Accuracy of the soup with the candidate averaged in.
    pub accuracy: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct GreedySoup {
    pub checkpoint: Checkpoint,
    /// Input indices in acceptance order.
    pub ingredients: Vec<usize>,
    /// Individual accuracy of every input.
    pub individual: Vec<f64>,
    pub steps: Vec<SoupStep>,
    pub accuracy: f64,
}

/// Sorts inputs by `score` (descending, ties in input order), starts from
/// the best, and keeps each next model iff the averaged soup scores at least
/// as well as the current one.
pub fn greedy_soup(
    cks: &[Checkpoint],
    mut score: impl FnMut(&Checkpoint) -> Result<f64>,
) -> Result<GreedySoup> {
    check_all(cks)?;
    let individual: Vec<f64> = cks.iter().map(&mut score).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..cks.len()).collect();
    order.sort_by(|&a, &b| individual[b].total_cmp(&individual[a]));
    let mut ingredients = vec![order[0]];
    let mut soup = cks[order[0]].clone();
    let mut best = individual[order[0]];
    let mut steps = Vec::new();
    for &c in &order[1..] {
        let mut trial: Vec<Checkpoint> = ingredients.iter().map(|&i| cks[i].clone()).collect();
        trial.push(cks[c].clone());
        let cand = uniform_soup(&trial)?;
        let acc = score(&cand)?;
        let accepted = acc >= best;
        if accepted {
            ingredients.push(c);
            soup = cand;
            best = acc;
        }
        steps.push(SoupStep { candidate: c, accuracy: acc, accepted });
    }
    Ok(GreedySoup { checkpoint: soup, ingredients, individual, steps, accuracy: best })
}
