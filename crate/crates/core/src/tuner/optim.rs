//! First-order optimizers and learning-rate schedules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::Trainable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Heavy-ball SGD; weight decay is added to the gradient.
    Sgd { momentum: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::AdamW { .. } => "adamw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl Schedule {
    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    /// Learning rate at `step` of `total`.
    pub fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Elements the mask lets the optimizer touch.
fn touched(tr: &Trainable, shape: &[usize], k: usize) -> bool {
    match tr {
        Trainable::Frozen => false,
        Trainable::All => true,
        Trainable::Rows(lo, hi) => {
            let row_len: usize = shape[1..].iter().product();
            let r = k / row_len.max(1);
            (*lo..*hi).contains(&r)
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter optimizer state keyed by an arbitrary ordered name.
#[derive(Clone, Debug)]
pub struct OptimState<K: Ord> {
    opt: Optimizer,
    weight_decay: f64,
    steps: u64,
    slots: BTreeMap<K, Slot>,
}

impl<K: Ord + Clone> OptimState<K> {
    pub fn new(opt: Optimizer, weight_decay: f64) -> Self {
        OptimState { opt, weight_decay, steps: 0, slots: BTreeMap::new() }
    }

    /// Marks the start of a step (advances the bias-correction counter).
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Updated tensor for one parameter. Elements outside the mask keep
    /// their exact bits.
    pub fn update(&mut self, key: &K, w: &Tensor, grad: &Tensor, tr: &Trainable, lr: f64) -> Result<Tensor> {
        w.same_shape(grad, "optimizer update")?;
        let n = w.len();
        let slot = self.slots.entry(key.clone()).or_insert_with(|| Slot { m: vec![0.0; n], v: vec![0.0; n] });
        let mut out = w.data().to_vec();
        let wd = self.weight_decay;
        for k in 0..n {
            if !touched(tr, w.shape(), k) {
                continue;
            }
            let x = out[k];
            match self.opt {
                Optimizer::Sgd { momentum } => {
                    let g = grad.data()[k] + wd * x;
                    slot.m[k] = momentum * slot.m[k] + g;
                    out[k] = x - lr * slot.m[k];
                }
                Optimizer::AdamW { beta1, beta2, eps } => {
                    let g = grad.data()[k];
                    slot.m[k] = beta1 * slot.m[k] + (1.0 - beta1) * g;
                    slot.v[k] = beta2 * slot.v[k] + (1.0 - beta2) * g * g;
                    let mh = slot.m[k] / (1.0 - beta1.powi(self.steps as i32));
                    let vh = slot.v[k] / (1.0 - beta2.powi(self.steps as i32));
                    out[k] = x - lr * (mh / (vh.sqrt() + eps) + wd * x);
                }
            }
        }
        if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("parameter update at element {bad}")));
        }
        Tensor::new(w.shape(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_and_rows_mask() {
        let mut st: OptimState<u8> = OptimState::new(Optimizer::Sgd { momentum: 0.0 }, 0.0);
        st.begin_step();
        let w = Tensor::new(&[3, 2], vec![1.0; 6]).unwrap();
        let g = Tensor::full(&[3, 2], 1.0);
        let out = st.update(&0, &w, &g, &Trainable::Rows(1, 2), 0.5).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 0.5, 0.5, 1.0, 1.0]);
        let frozen = st.update(&1, &w, &g, &Trainable::Frozen, 0.5).unwrap();
        assert_eq!(frozen, w);
    }

    #[test]
    fn momentum_accumulates() {
        let mut st: OptimState<u8> = OptimState::new(Optimizer::Sgd { momentum: 0.9 }, 0.0);
        let mut w = Tensor::scalar(0.0).unwrap();
        let g = Tensor::scalar(1.0).unwrap();
        for _ in 0..2 {
            st.begin_step();
            w = st.update(&0, &w, &g, &Trainable::All, 1.0).unwrap();
        }
        assert!((w.item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut st: OptimState<u8> = OptimState::new(Optimizer::AdamW { beta1: 0.9, beta2: 0.999, eps: 0.0 }, 0.0);
        st.begin_step();
        let w = st.update(&0, &Tensor::scalar(1.0).unwrap(), &Tensor::scalar(-3.0).unwrap(), &Trainable::All, 0.1).unwrap();
        assert!((w.item() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(Schedule::Cosine.lr(1.0, 0, 10), 1.0);
        assert!(Schedule::Cosine.lr(1.0, 10, 10).abs() < 1e-15);
        assert!((Schedule::Cosine.lr(2.0, 5, 10) - 1.0).abs() < 1e-15);
        assert_eq!(Schedule::Constant.lr(0.3, 7, 10), 0.3);
    }
}
