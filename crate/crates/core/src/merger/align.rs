//! Hidden-unit permutations of mlp checkpoints, exact linear assignment, and
//! weight matching.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::Checkpoint;

/// Weights and biases of an mlp checkpoint, layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

impl MlpWeights {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "mlp" {
            return Err(Error::NotSupportedKind(ck.kind.clone()));
        }
        let layers = ck.entries.len() / 2;
        let mut w = Vec::with_capacity(layers);
        let mut b = Vec::with_capacity(layers);
        for l in 0..layers {
            let get = |name: &str| {
                ck.entry(&format!("layers[{l}].{name}"))
                    .map(|e| e.to_tensor())
                    .ok_or_else(|| Error::NotSupportedKind(format!("mlp checkpoint without layers[{l}].{name}")))
            };
            w.push(get("weight")?);
            b.push(get("bias")?);
        }
        if layers * 2 != ck.entries.len() || layers == 0 {
            return Err(Error::NotSupportedKind("mlp checkpoint with extra entries".into()));
        }
        Ok(MlpWeights { w, b })
    }

    /// Writes the weights back into `template`'s layout.
    pub fn to_checkpoint(&self, template: &Checkpoint) -> Checkpoint {
        template.map_entries(|_, e| {
            let (l, leaf) = parse_entry(&e.path);
            let t = if leaf == "weight" { &self.w[l] } else { &self.b[l] };
            t.data().iter().map(|&v| v as f32).collect()
        })
    }

    /// Widths of the hidden layers.
    pub fn hidden(&self) -> Vec<usize> {
        self.w[..self.w.len() - 1].iter().map(Tensor::rows).collect()
    }

    /// Permutes hidden units: unit `i` of the result is unit `perm[l][i]`.
    pub fn permuted(&self, perm: &Permutation) -> Result<Self> {
        let hidden = self.hidden();
        if perm.layers.len() != hidden.len() {
            return Err(Error::SizeMismatch(format!("{} permutation layers for {} hidden layers", perm.layers.len(), hidden.len())));
        }
        for (l, (p, &h)) in perm.layers.iter().zip(&hidden).enumerate() {
            if p.len() != h {
                return Err(Error::SizeMismatch(format!("layer {l}: permutation of {} for width {h}", p.len())));
            }
        }
        let mut out = self.clone();
        for l in 0..self.w.len() {
            let rows = perm.layers.get(l);
            let cols = if l == 0 { None } else { perm.layers.get(l - 1) };
            out.w[l] = permute_matrix(&self.w[l], rows.map(Vec::as_slice), cols.map(Vec::as_slice));
            if let Some(r) = rows {
                out.b[l] = self.b[l].select_rows(r);
            }
        }
        Ok(out)
    }
}

fn parse_entry(path: &str) -> (usize, &str) {
    let open = path.find('[').expect("layers[i]");
    let close = path.find(']').expect("layers[i]");
    (path[open + 1..close].parse().expect("index"), &path[close + 2..])
}

fn permute_matrix(w: &Tensor, rows: Option<&[usize]>, cols: Option<&[usize]>) -> Tensor {
    let (m, n) = (w.rows(), w.cols());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let src = rows.map_or(i, |r| r[i]);
        for j in 0..n {
            out.push(w.get2(src, cols.map_or(j, |c| c[j])));
        }
    }
    Tensor::raw(vec![m, n], out)
}

/// One bijection per hidden layer; unit `i` of the permuted model is unit
/// `layers[l][i]` of the original.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    pub layers: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn new(layers: Vec<Vec<usize>>) -> Result<Self> {
        for (l, p) in layers.iter().enumerate() {
            let mut seen = vec![false; p.len()];
            for &i in p {
                if i >= p.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::SizeMismatch(format!("layer {l} map is not a bijection")));
                }
            }
        }
        Ok(Permutation { layers })
    }

    pub fn identity(widths: &[usize]) -> Self {
        Permutation { layers: widths.iter().map(|&n| (0..n).collect()).collect() }
    }

    pub fn inverse(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (i, &j) in p.iter().enumerate() {
                    inv[j] = i;
                }
                inv
            })
            .collect();
        Permutation { layers }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }

    /// Number of cycles per layer (fixed points count as cycles).
    pub fn cycle_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|p| {
                let mut seen = vec![false; p.len()];
                let mut cycles = 0;
                for s in 0..p.len() {
                    if !seen[s] {
                        cycles += 1;
                        let mut i = s;
                        while !seen[i] {
                            seen[i] = true;
                            i = p[i];
                        }
                    }
                }
                cycles
            })
            .collect()
    }
}

/// Applies a hidden-unit permutation; the network function is unchanged.
pub fn permute_model(ck: &Checkpoint, perm: &Permutation) -> Result<Checkpoint> {
    Permutation::new(perm.layers.clone())?;
    let w = MlpWeights::from_checkpoint(ck)?;
    Ok(w.permuted(perm)?.to_checkpoint(ck))
}

fn assignment_cost(cost: &Tensor, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost.get2(i, j)).sum()
}

/// Exact minimum-cost assignment on a square matrix (shortest augmenting
/// paths with potentials, O(n³)). Returns `row → column`. When the identity
/// attains the optimum it is returned.
pub fn linear_assignment(cost: &Tensor) -> Result<Vec<usize>> {
    let (n, m) = cost.require_2d("linear_assignment")?;
    if n != m {
        return Err(Error::SizeMismatch(format!("assignment needs a square matrix, got {n}x{m}")));
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get2(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let identity: Vec<usize> = (0..n).collect();
    let best = assignment_cost(cost, &assign);
    if assignment_cost(cost, &identity) <= best + 1e-12 * best.abs().max(1.0) {
        return Ok(identity);
    }
    Ok(assign)
}

/// `Σ_l ⟨W_l^A, W_l^B'⟩ + ⟨b_l^A, b_l^B'⟩` with `B'` the permuted model.
pub fn alignment_objective(a: &MlpWeights, b: &MlpWeights) -> f64 {
    let dot = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>();
    a.w.iter().zip(&b.w).map(|(x, y)| dot(x, y)).sum::<f64>() + a.b.iter().zip(&b.b).map(|(x, y)| dot(x, y)).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct WeightMatch {
    pub perm: Permutation,
    /// Objective at the start and after every sweep.
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

/// Coordinate descent over hidden layers: each layer's permutation solves a
/// linear assignment against fixed neighbours and is kept only if the
/// objective strictly improves. Stops after a sweep with no change.
pub fn weight_match(a: &Checkpoint, b: &Checkpoint, max_sweeps: usize) -> Result<WeightMatch> {
    a.check_compatible(b)?;
    let wa = MlpWeights::from_checkpoint(a)?;
    let wb = MlpWeights::from_checkpoint(b)?;
    let hidden = wa.hidden();
    let mut perm = Permutation::identity(&hidden);
    let mut objective = vec![alignment_objective(&wa, &wb)];
    let mut sweeps = 0;
    for _ in 0..max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for l in 0..hidden.len() {
            let n = hidden[l];
            let prev = if l == 0 { None } else { Some(perm.layers[l - 1].as_slice()) };
            let next = perm.layers.get(l + 1).map(Vec::as_slice);
            let bin = permute_matrix(&wb.w[l], None, prev);
            let bout = permute_matrix(&wb.w[l + 1], next, None);
            let (ain, aout) = (&wa.w[l], &wa.w[l + 1]);
            let mut sim = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = wa.b[l].data()[i] * wb.b[l].data()[j];
                    s += ain.row(i).iter().zip(bin.row(j)).map(|(x, y)| x * y).sum::<f64>();
                    s += (0..aout.rows()).map(|k| aout.get2(k, i) * bout.get2(k, j)).sum::<f64>();
                    sim[i * n + j] = s;
                }
            }
            let sim = Tensor::raw(vec![n, n], sim);
            let neg = sim.scale(-1.0);
            let cand = linear_assignment(&neg)?;
            let gain = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| sim.get2(i, j)).sum::<f64>();
            if cand != perm.layers[l] && gain(&cand) > gain(&perm.layers[l]) {
                perm.layers[l] = cand;
                changed = true;
            }
        }
        objective.push(alignment_objective(&wa, &wb.permuted(&perm)?));
        if !changed {
            break;
        }
    }
    Ok(WeightMatch { perm, objective, sweeps })
}
