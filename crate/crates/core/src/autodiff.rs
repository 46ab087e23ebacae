//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] records every operation applied to its variables. Nodes only
//! reference earlier nodes, so a single reverse sweep over the node list is a
//! valid topological order for [`Graph::backward`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Huber(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivRows(Var, Var),
    DivScalar(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    Slice2d { x: Var, r0: usize, c0: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    PickCols(Var, Vec<usize>),
    Linearized(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of trainable leaves, keyed by their variable.
pub type Gradients = BTreeMap<Var, Tensor>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), |x, y| x / y)?;
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "div")?;
        Ok(self.binary(a, b, v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "add_scalar")?;
        Ok(self.unary(a, v, Op::AddScalar(a)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "scale")?;
        Ok(self.unary(a, v, Op::Scale(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "exp")?;
        Ok(self.unary(a, v, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "log")?;
        Ok(self.unary(a, v, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "square")?;
        Ok(self.unary(a, v, Op::Square(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "sqrt")?;
        Ok(self.unary(a, v, Op::Sqrt(a)))
    }

    /// Elementwise Huber (smooth-L1) function with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let v = self.value(a).map(|x| {
            if x.abs() < delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        });
        self.unary(a, v, Op::Huber(a, delta))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.unary(a, v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    /// `a[n,d] + row[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = row_broadcast(self.value(a), self.value(row), |x, y| x + y, "add_row")?;
        Ok(self.binary(a, row, v, Op::AddRow(a, row)))
    }

    /// `a[n,d] * row[d]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = row_broadcast(self.value(a), self.value(row), |x, y| x * y, "mul_row")?;
        Ok(self.binary(a, row, v, Op::MulRow(a, row)))
    }

    /// `a[n,d] / col[n]`, dividing row `i` by `col[i]`.
    pub fn div_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, d) = self.value(a).require_2d("div_rows")?;
        if self.shape(col) != [n] {
            return Err(Error::ShapeMismatch(format!(
                "div_rows: {:?} by {:?}",
                self.shape(a),
                self.shape(col)
            )));
        }
        let av = self.value(a).data();
        let cv = self.value(col).data();
        let data = (0..n * d).map(|k| av[k] / cv[k / d]).collect();
        let v = Tensor::from_op(vec![n, d], data, "div_rows")?;
        Ok(self.binary(a, col, v, Op::DivRows(a, col)))
    }

    /// Divides every entry of `a` by the scalar variable `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch("div_scalar needs a scalar divisor".into()));
        }
        let d = self.value(s).item();
        let v = self.value(a).map(|x| x / d);
        let v = Tensor::from_op(v.shape().to_vec(), v.into_data(), "div_scalar")?;
        Ok(self.binary(a, s, v, Op::DivScalar(a, s)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::raw(vec![1], vec![self.value(a).sum()]);
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::raw(vec![1], vec![t.sum() / t.len() as f64]);
        self.unary(a, v, Op::Mean(a))
    }

    /// Sums each row of a 2-D tensor: `[n,d] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.value(a).require_2d("sum_rows")?;
        let data = self.value(a).data().chunks(d).map(|r| r.iter().sum()).collect();
        let v = Tensor::raw(vec![n], data);
        Ok(self.unary(a, v, Op::SumRows(a)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).rows();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::ShapeMismatch(format!("gather_rows: bad indices for {n} rows")));
        }
        let v = self.value(a).select_rows(idx);
        Ok(self.unary(a, v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Sub-block `[r0..r1, c0..c1]` of a 2-D tensor.
    pub fn slice2d(&mut self, a: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let (n, d) = self.value(a).require_2d("slice2d")?;
        if rows.end > n || cols.end > d || rows.is_empty() || cols.is_empty() {
            return Err(Error::ShapeMismatch(format!("slice2d {rows:?},{cols:?} of [{n},{d}]")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&src[i * d + cols.start..i * d + cols.end]);
        }
        let v = Tensor::raw(vec![rows.len(), cols.len()], data);
        Ok(self.unary(a, v, Op::Slice2d { x: a, r0: rows.start, c0: cols.start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).require_2d("concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.value(p).require_2d("concat_rows")?;
            if c != d {
                return Err(Error::ShapeMismatch(format!("concat_rows width {c} vs {d}")));
            }
            n += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::raw(vec![n, d], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).require_2d("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).require_2d("concat_cols")?;
            if r != n {
                return Err(Error::ShapeMismatch(format!("concat_cols rows {r} vs {n}")));
            }
            widths.push(c);
        }
        let d: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::raw(vec![n, d], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let v = self.value(a).softmax(temperature)?;
        Ok(self.unary(a, v, Op::Softmax(a, temperature)))
    }

    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let v = self.value(a).log_softmax(temperature)?;
        Ok(self.unary(a, v, Op::LogSoftmax(a, temperature)))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xhat, inv_std) = self.value(x).normalize_rows(eps)?;
        let v = self.value(x).layernorm(self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Picks `a[i, idx[i]]` for every row: `[n,c] -> [n]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.value(a).require_2d("pick_cols")?;
        if idx.len() != n {
            return Err(Error::ShapeMismatch(format!("pick_cols: {} indices for {n} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| self.value(a).data()[i * c + j]).collect();
        let v = Tensor::raw(vec![n], data);
        Ok(self.unary(a, v, Op::PickCols(a, idx.to_vec())))
    }

    /// Scalar node whose gradient with respect to `x` is the fixed tensor `grad`.
    ///
    /// Used for spectral terms where singular vectors are held constant
    /// within a step.
    pub fn linearized(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        self.value(x).same_shape(&grad, "linearized")?;
        let v = Tensor::from_op(vec![1], vec![value], "linearized")?;
        Ok(self.unary(x, v, Op::Linearized(x, grad)))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// trainable leaf reachable from the root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::DetachedRoot);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(delta) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| self.nodes[v.0].value.data();
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(id), Tensor::raw(node.value.shape().to_vec(), g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
                    acc(*b, g.iter().zip(av).zip(bv).map(|((g, a), b)| -g * a / (b * b)).collect());
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
                Op::Relu(a) => {
                    acc(*a, g.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())
                }
                Op::Gelu(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad(x)).collect()),
                Op::Exp(a) => acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
                Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
                Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect()),
                Op::Sqrt(a) => acc(*a, g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect()),
                Op::Huber(a, delta) => acc(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(g, &x)| if x.abs() < *delta { g * x } else { g * delta * x.signum() })
                        .collect(),
                ),
                Op::MatMul(a, b) => {
                    let gt = Tensor::raw(node.value.shape().to_vec(), g);
                    let (at, bt) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        acc(*a, gt.matmul(&bt.transpose()?)?.into_data());
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, at.transpose()?.matmul(&gt)?.into_data());
                    }
                }
                Op::Transpose(a) => {
                    let gt = Tensor::raw(node.value.shape().to_vec(), g);
                    acc(*a, gt.transpose()?.into_data());
                }
                Op::Reshape(a) => acc(*a, g),
                Op::AddRow(a, r) => {
                    let d = self.value(*r).len();
                    let mut gr = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        gr[k % d] += gv;
                    }
                    acc(*r, gr);
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (val(*a), val(*r));
                    let d = rv.len();
                    let mut gr = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        gr[k % d] += gv * av[k];
                    }
                    acc(*r, gr);
                    acc(*a, g.iter().enumerate().map(|(k, gv)| gv * rv[k % d]).collect());
                }
                Op::DivRows(a, c) => {
                    let (av, cv) = (val(*a), val(*c));
                    let d = av.len() / cv.len();
                    let mut gc = vec![0.0; cv.len()];
                    for (k, gv) in g.iter().enumerate() {
                        let i = k / d;
                        gc[i] -= gv * av[k] / (cv[i] * cv[i]);
                    }
                    acc(*c, gc);
                    acc(*a, g.iter().enumerate().map(|(k, gv)| gv / cv[k / d]).collect());
                }
                Op::DivScalar(a, s) => {
                    let sv = val(*s)[0];
                    let av = val(*a);
                    let gs: f64 = g.iter().zip(av).map(|(g, a)| -g * a / (sv * sv)).sum();
                    acc(*s, vec![gs]);
                    acc(*a, g.iter().map(|g| g / sv).collect());
                }
                Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::SumRows(a) => {
                    let d = self.value(*a).cols();
                    acc(*a, g.iter().flat_map(|&gv| std::iter::repeat(gv).take(d)).collect());
                }
                Op::GatherRows(a, idx) => {
                    let at = self.value(*a);
                    let inner = at.len() / at.rows();
                    let mut ga = vec![0.0; at.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..inner {
                            ga[i * inner + c] += g[r * inner + c];
                        }
                    }
                    acc(*a, ga);
                }
                Op::Slice2d { x, r0, c0 } => {
                    let xt = self.value(*x);
                    let d = xt.cols();
                    let (rn, cn) = (node.value.rows(), node.value.cols());
                    let mut gx = vec![0.0; xt.len()];
                    for i in 0..rn {
                        for j in 0..cn {
                            gx[(r0 + i) * d + c0 + j] = g[i * cn + j];
                        }
                    }
                    acc(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        acc(p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let d = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let gp = g.chunks(d).flat_map(|row| row[off..off + pc].iter().copied()).collect();
                        acc(p, gp);
                        off += pc;
                    }
                }
                Op::Softmax(a, t) => {
                    let c = node.value.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        ga.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot) / t));
                    }
                    acc(*a, ga);
                }
                Op::LogSoftmax(a, t) => {
                    let c = node.value.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                        let gs: f64 = gr.iter().sum();
                        ga.extend(gr.iter().zip(yr).map(|(g, ly)| (g - ly.exp() * gs) / t));
                    }
                    acc(*a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let d = xhat.cols();
                    let gam = val(*gamma);
                    let xh = xhat.data();
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    let mut gx = Vec::with_capacity(g.len());
                    for (i, (gr, xr)) in g.chunks(d).zip(xh.chunks(d)).enumerate() {
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                            gb[j] += gr[j];
                            gx.push(inv_std[i] * (dxhat[j] - m1 - xr[j] * m2));
                        }
                    }
                    acc(*gamma, gg);
                    acc(*beta, gb);
                    acc(*x, gx);
                }
                Op::PickCols(a, idx) => {
                    let at = self.value(*a);
                    let c = at.cols();
                    let mut ga = vec![0.0; at.len()];
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * c + j] = g[i];
                    }
                    acc(*a, ga);
                }
                Op::Linearized(a, grad) => acc(*a, grad.data().iter().map(|v| v * g[0]).collect()),
            }
        }
        Ok(out)
    }
}

fn row_broadcast(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64, op: &str) -> Result<Tensor> {
    let d = a.cols();
    if a.ndim() != 2 || row.shape() != [d] {
        return Err(Error::ShapeMismatch(format!("{op}: {:?} with row {:?}", a.shape(), row.shape())));
    }
    let rv = row.data();
    let data = a.data().iter().enumerate().map(|(k, &x)| f(x, rv[k % d])).collect();
    Tensor::from_op(a.shape().to_vec(), data, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x`.
    fn fd_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.data().to_vec();
                let mut m = x.data().to_vec();
                p[i] += h;
                m[i] -= h;
                let fp = f(&Tensor::new(x.shape(), p).unwrap());
                let fm = f(&Tensor::new(x.shape(), m).unwrap());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn sum_and_square_grads() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(w);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr[&w].data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr[&w].data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::NotScalar(_))));
        let c = g.constant(Tensor::zeros(&[2]));
        let s = g.sum(c);
        assert!(matches!(g.backward(s), Err(Error::DetachedRoot)));
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        let s = g.sum(c);
        let ad = g.backward(s).unwrap()[&av].clone();
        let fd = fd_grad(&a, &|x| x.matmul(&b).unwrap().sum());
        assert!(rel_err(ad.data(), &fd) < 1e-4);
    }

    /// Composite expression touching every op; checked against finite differences.
    #[test]
    fn composite_grad_matches_finite_differences() {
        let build = |g: &mut Graph, x: Var, k: Var, row: Var| -> Var {
            let h = g.matmul(x, k).unwrap(); // [4,3]
            let h = g.add_row(h, row).unwrap();
            let a = g.gelu(h);
            let r = g.relu(h);
            let t = g.transpose(a).unwrap(); // [3,4]
            let t = g.transpose(t).unwrap();
            let m = g.mul_row(t, row).unwrap();
            let sm = g.softmax(m, 1.7).unwrap();
            let ls = g.log_softmax(r, 0.6).unwrap();
            let p = g.pick_cols(ls, &[0, 2, 1, 2]).unwrap();
            let sq = g.square(sm).unwrap();
            let e = g.exp(sq).unwrap();
            let lg = g.log(e).unwrap();
            let rs = g.sum_rows(lg).unwrap(); // [4]
            let rs = g.add_scalar(rs, 2.0).unwrap();
            let rt = g.sqrt(rs).unwrap();
            let dv = g.div_rows(sm, rt).unwrap();
            let gr = g.gather_rows(dv, &[3, 0, 0]).unwrap();
            let sl = g.slice2d(t, 1..3, 0..2).unwrap();
            let cc = g.concat_cols(&[sl, sl]).unwrap();
            assert!(g.concat_rows(&[sl, cc]).is_err());
            let gs = g.sum(gr);
            let st = g.concat_rows(&[sl, sl]).unwrap();
            let st = g.transpose(st).unwrap();
            let cc = g.concat_cols(&[cc, st]).unwrap();
            let hb = g.scale(cc, 3.0).unwrap();
            let hb = g.huber(hb, 1.0);
            let mn = g.mean(hb);
            let q = g.div(gr, gr).unwrap();
            let qs = g.sum(q);
            let ds = g.div_scalar(p, gs).unwrap();
            let ps = g.sum(ds);
            let ones = g.constant(Tensor::full(&[3], 1.0));
            let zeros = g.constant(Tensor::zeros(&[3]));
            let ln = g.layernorm(a, ones, zeros, 1e-5).unwrap();
            let ln = g.layernorm(ln, row, row, 1e-5).unwrap();
            let lns = g.sum_rows(ln).unwrap();
            let lns = g.reshape(lns, &[2, 2]).unwrap();
            let l2 = g.square(lns).unwrap();
            let l2 = g.sum(l2);
            let tot = g.add(mn, ps).unwrap();
            let tot = g.sub(tot, qs).unwrap();
            let tot = g.add(tot, l2).unwrap();
            let tot2 = g.add(tot, gs).unwrap();
            g.mul(tot2, tot).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = Tensor::uniform(&[4, 2], 1.0, &mut rng);
            let k = Tensor::uniform(&[2, 3], 1.0, &mut rng);
            let row = Tensor::uniform(&[3], 1.0, &mut rng).map(|v| v + 1.5);
            let eval = |x: &Tensor, k: &Tensor, row: &Tensor| {
                let mut g = Graph::new();
                let (xv, kv, rv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(row.clone()));
                let out = build(&mut g, xv, kv, rv);
                g.value(out).item()
            };
            let mut g = Graph::new();
            let (xv, kv, rv) = (g.param(x.clone()), g.param(k.clone()), g.param(row.clone()));
            let out = build(&mut g, xv, kv, rv);
            let grads = g.backward(out).unwrap();
            let fx = fd_grad(&x, &|t| eval(t, &k, &row));
            let fk = fd_grad(&k, &|t| eval(&x, t, &row));
            let fr = fd_grad(&row, &|t| eval(&x, &k, t));
            assert!(rel_err(grads[&xv].data(), &fx) < 1e-4, "x {}", rel_err(grads[&xv].data(), &fx));
            assert!(rel_err(grads[&kv].data(), &fk) < 1e-4);
            assert!(rel_err(grads[&rv].data(), &fr) < 1e-4);
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let w = g.param(Tensor::uniform(&[3, 3], 1.0, &mut rng));
            let x = g.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng));
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            let s = g.sum(y);
            g.backward(s).unwrap()[&w].clone()
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
