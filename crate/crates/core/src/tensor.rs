//! Dense row-major tensors of `f64`.
//!
//! Tensors are immutable values; every operation returns a fresh tensor.
//! Broadcasting is limited to tensor-vs-scalar. Anything else needs an
//! explicit reshape.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Exp,
    Log,
    Square,
}

/// Second operand of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
    None,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(what.to_string()))
    }
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
        }
        if n != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        check_finite(&values, "tensor_new")?;
        Ok(Tensor { shape: shape.to_vec(), data: values })
    }

    /// Builds a tensor from computed values, surfacing non-finite results as errors.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(&data, op)?;
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values known to be finite and consistent.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform(-bound, bound) entries from the given generator.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "zip")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn require_2d(&self, op: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!("{op} expects 2-D, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Elementwise op. Binary kinds take an equal-shape tensor or a scalar.
    pub fn ew(kind: EwKind, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
        let binary = |f: fn(f64, f64) -> f64| -> Result<Tensor> {
            match b {
                Operand::Tensor(t) => a.zip(t, f),
                Operand::Scalar(s) => Ok(a.map(|v| f(v, s))),
                Operand::None => Err(Error::ShapeMismatch(format!("{kind:?} needs two operands"))),
            }
        };
        let out = match kind {
            EwKind::Add => binary(|x, y| x + y)?,
            EwKind::Sub => binary(|x, y| x - y)?,
            EwKind::Mul => binary(|x, y| x * y)?,
            EwKind::Scale => match b {
                Operand::Scalar(s) => a.map(|v| v * s),
                _ => return Err(Error::ShapeMismatch("scale needs a scalar".into())),
            },
            EwKind::Relu => a.map(|v| v.max(0.0)),
            EwKind::Gelu => a.map(gelu),
            EwKind::Exp => a.map(f64::exp),
            EwKind::Log => a.map(f64::ln),
            EwKind::Square => a.map(|v| v * v),
        };
        check_finite(&out.data, &format!("{kind:?}"))?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::ew(EwKind::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::ew(EwKind::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::ew(EwKind::Mul, self, Operand::Tensor(other))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, n) = other.require_2d("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_op(vec![m, n], out, "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::raw(vec![n, m], out))
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&self, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidHyperparam(format!("temperature {temperature} must be > 0")));
        }
        let c = self.cols();
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| ((v - m) / temperature).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / z));
        }
        Tensor::from_op(self.shape.clone(), out, "softmax")
    }

    /// Log-softmax of `x / temperature` along the last axis.
    pub fn log_softmax(&self, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidHyperparam(format!("temperature {temperature} must be > 0")));
        }
        let c = self.cols();
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let lse = m + row.iter().map(|&v| (v / temperature - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v / temperature - lse));
        }
        Tensor::from_op(self.shape.clone(), out, "log_softmax")
    }

    /// Row-wise layer normalisation of a `[n, d]` tensor with affine `gamma`, `beta`.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (xhat, _) = self.normalize_rows(eps)?;
        let d = self.cols();
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::ShapeMismatch(format!(
                "layernorm affine {:?}/{:?} for width {d}",
                gamma.shape, beta.shape
            )));
        }
        let data = xhat
            .data
            .chunks(d)
            .flat_map(|r| r.iter().zip(&gamma.data).zip(&beta.data).map(|((x, g), b)| g * x + b))
            .collect();
        Tensor::from_op(self.shape.clone(), data, "layernorm")
    }

    /// Returns (normalised rows, 1/std per row).
    pub(crate) fn normalize_rows(&self, eps: f64) -> Result<(Tensor, Vec<f64>)> {
        if !(eps > 0.0) {
            return Err(Error::InvalidHyperparam(format!("layernorm eps {eps} must be > 0")));
        }
        self.require_2d("layernorm")?;
        let d = self.cols();
        let mut out = Vec::with_capacity(self.data.len());
        let mut inv = Vec::with_capacity(self.rows());
        for row in self.data.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        Ok((Tensor::raw(self.shape.clone(), out), inv))
    }

    /// Row-wise argmax, lowest index on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let c = self.cols();
        self.data
            .chunks(c)
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Gathers rows (first axis) into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::raw(shape, data)
    }

    /// Round-trips every value through `f32`.
    pub fn to_f32_precision(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_identity() {
        let t = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(t, Tensor::eye(2));
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(matches!(Tensor::new(&[3], vec![1.0, 2.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(Tensor::new(&[1], vec![f64::NAN]), Err(Error::NonFiniteValue(_))));
        assert!(matches!(Tensor::new(&[1], vec![f64::INFINITY]), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn elementwise_cases() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let r = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(Tensor::ew(EwKind::Relu, &r, Operand::None).unwrap().data(), &[0.0, 2.0]);
        let c = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(a.mul(&c), Err(Error::ShapeMismatch(_))));
        assert!(matches!(
            Tensor::ew(EwKind::Log, &r, Operand::None),
            Err(Error::NonFiniteValue(_))
        ));
        assert_eq!(Tensor::ew(EwKind::Scale, &a, Operand::Scalar(2.0)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_cases() {
        let m = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_cases() {
        let z = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap().softmax(1.0).unwrap();
        assert_eq!(z.data(), &[0.5, 0.5]);
        let big = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap().softmax(1.0).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300_f64.max(1e-15));
        // direct scalar evaluation of exp(x/T)/sum
        let x = [1.0_f64, 2.0, 3.0];
        let e: Vec<f64> = x.iter().map(|v| (v / 2.0).exp()).collect();
        let s: f64 = e.iter().sum();
        let t = Tensor::new(&[1, 3], x.to_vec()).unwrap().softmax(2.0).unwrap();
        for (got, want) in t.data().iter().zip(e.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(t.data().iter().sum::<f64>() - 1.0 < 1e-12);
        assert!(Tensor::eye(2).softmax(0.0).is_err());
    }

    #[test]
    fn layernorm_cases() {
        let eps = 1e-5;
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let c = Tensor::full(&[2, 3], 4.2).layernorm(&one, &zero, eps).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let x = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
        let y = x.layernorm(&Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), eps).unwrap();
        // mean 2, variance 1
        let want = 1.0 / (1.0 + eps).sqrt();
        assert!((y.data()[0] + want).abs() < 1e-6 && (y.data()[1] - want).abs() < 1e-6);

        let beta = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let y = x.layernorm(&Tensor::zeros(&[2]), &beta, eps).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
