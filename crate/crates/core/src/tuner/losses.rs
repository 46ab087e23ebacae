//! Loss and regularizer terms built on the autodiff graph.
//!
//! Every function takes graph variables and returns a scalar variable, so
//! terms compose freely with a model's forward pass. Teacher-side inputs are
//! expected to be constants.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, svd};
use crate::tensor::Tensor;

/// Huber threshold used by both relational terms.
pub const RKD_HUBER_DELTA: f64 = 1.0;

/// Added under square roots of squared distances so coincident embeddings
/// keep finite gradients.
const DIST_EPS: f64 = 1e-12;

/// Mean negative log-probability of the true class.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits, 1.0)?;
    let picked = g.pick_cols(lp, labels)?;
    let m = g.mean(picked);
    g.scale(m, -1.0)
}

/// `T² · mean_rows KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kd_kl(g: &mut Graph, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::ShapeMismatch(format!(
            "kd_kl: student {:?} vs teacher {:?}",
            g.shape(student),
            g.shape(teacher)
        )));
    }
    let pt = g.softmax(teacher, temperature)?;
    let lpt = g.log_softmax(teacher, temperature)?;
    let lps = g.log_softmax(student, temperature)?;
    let diff = g.sub(lpt, lps)?;
    let prod = g.mul(pt, diff)?;
    let rows = g.sum_rows(prod)?;
    let m = g.mean(rows);
    g.scale(m, temperature * temperature)
}

/// Per-class feature means `[classes, d]`.
pub fn class_means(features: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let (n, d) = features.require_2d("class_means")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} feature rows", labels.len())));
    }
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c));
    }
    for (c, &cnt) in counts.iter().enumerate() {
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= cnt as f64;
        }
    }
    Tensor::new(&[classes, d], sums)
}

/// Squared euclidean distance of every row of `a` to every row of `b`.
pub fn sq_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.require_2d("sq_distances")?;
    let (m, d2) = b.require_2d("sq_distances")?;
    if d != d2 {
        return Err(Error::WidthMismatch(format!("features have width {d}, means {d2}")));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let x = a.row(i);
        for j in 0..m {
            out.push(x.iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum());
        }
    }
    Tensor::new(&[n, m], out)
}

/// Nearest-class-mean teacher logits `−‖f − μ_c‖² / tau`.
pub fn ncm_teacher_logits(features: &Tensor, means: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidHyperparam(format!("tau={tau} must be > 0")));
    }
    Ok(sq_distances(features, means)?.scale(-1.0 / tau))
}

/// One hint pair: student activation, teacher activation and an optional
/// learnable projector `[d_student, d_teacher]`.
#[derive(Clone, Copy, Debug)]
pub struct HintPair {
    pub student: Var,
    pub teacher: Var,
    pub projector: Option<Var>,
}

/// Mean over pairs of the mean squared error after optional projection.
pub fn fitnet_loss(g: &mut Graph, pairs: &[HintPair]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = match p.projector {
            Some(w) => g.matmul(p.student, w)?,
            None => p.student,
        };
        let (ss, ts) = (g.shape(s).to_vec(), g.shape(p.teacher).to_vec());
        if ss.len() != 2 || ts.len() != 2 || ss[0] != ts[0] {
            return Err(Error::BatchMismatch(format!("fitnet: student {ss:?} vs teacher {ts:?}")));
        }
        if ss[1] != ts[1] {
            return Err(Error::WidthMismatch(format!("fitnet: widths {} vs {} without projector", ss[1], ts[1])));
        }
        let diff = g.sub(s, p.teacher)?;
        let sq = g.square(diff)?;
        terms.push(g.mean(sq));
    }
    mean_of(g, &terms)
}

/// Flow matrix `A1ᵀ·A2 / n`.
pub fn fsp_matrix(g: &mut Graph, early: Var, late: Var) -> Result<Var> {
    let (n1, n2) = (g.shape(early)[0], g.shape(late)[0]);
    if n1 != n2 {
        return Err(Error::BatchMismatch(format!("fsp: {n1} rows vs {n2} rows")));
    }
    let t = g.transpose(early)?;
    let m = g.matmul(t, late)?;
    g.scale(m, 1.0 / n1 as f64)
}

/// Mean over pairs of `‖G_s − G_t‖²_F / (d1·d2)`. Each pair is
/// `((student_early, student_late), (teacher_early, teacher_late))`.
pub fn fsp_loss(g: &mut Graph, pairs: &[((Var, Var), (Var, Var))]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &((sa, sb), (ta, tb)) in pairs {
        if g.shape(sa)[0] != g.shape(ta)[0] {
            return Err(Error::BatchMismatch(format!(
                "fsp: student batch {} vs teacher batch {}",
                g.shape(sa)[0],
                g.shape(ta)[0]
            )));
        }
        let gs = fsp_matrix(g, sa, sb)?;
        let gt = fsp_matrix(g, ta, tb)?;
        if g.shape(gs) != g.shape(gt) {
            return Err(Error::WidthMismatch(format!("fsp: {:?} vs {:?}", g.shape(gs), g.shape(gt))));
        }
        let diff = g.sub(gs, gt)?;
        let sq = g.square(diff)?;
        terms.push(g.mean(sq));
    }
    mean_of(g, &terms)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let s = sum_terms(g, terms.to_vec())?;
    g.scale(s, 1.0 / terms.len() as f64)
}

/// Constant matrix with one row per listed pair: `+1` at `i`, `−1` at `j`.
fn difference_operator(pairs: &[(usize, usize)], n: usize) -> Tensor {
    let mut data = vec![0.0; pairs.len() * n];
    for (r, &(i, j)) in pairs.iter().enumerate() {
        data[r * n + i] += 1.0;
        data[r * n + j] -= 1.0;
    }
    Tensor::raw(vec![pairs.len(), n], data)
}

fn row_norms(g: &mut Graph, diffs: Var) -> Result<Var> {
    let sq = g.square(diffs)?;
    let s = g.sum_rows(sq)?;
    let s = g.add_scalar(s, DIST_EPS)?;
    g.sqrt(s)
}

/// Normalized pairwise distances `ψ(i,j) = ‖e_i − e_j‖ / μ` over `i < j`.
fn rkd_potentials(g: &mut Graph, emb: Var) -> Result<Var> {
    let n = g.shape(emb)[0];
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let op = g.constant(difference_operator(&pairs, n));
    let diffs = g.matmul(op, emb)?;
    let dist = row_norms(g, diffs)?;
    let mu = g.mean(dist);
    if g.value(mu).item() <= DIST_EPS.sqrt() {
        return Err(Error::DegenerateBatch("mean pairwise distance is zero".into()));
    }
    g.div_scalar(dist, mu)
}

/// Cosine at vertex `j` for every ordered triplet of distinct `(i, j, k)`.
fn rkd_angles(g: &mut Graph, emb: Var) -> Result<Var> {
    let n = g.shape(emb)[0];
    let ordered: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let slot = |i: usize, j: usize| i * (n - 1) + if j > i { j - 1 } else { j };
    let op = g.constant(difference_operator(&ordered, n));
    let diffs = g.matmul(op, emb)?;
    let norms = row_norms(g, diffs)?;
    if g.value(norms).data().iter().any(|&d| d <= DIST_EPS.sqrt()) {
        return Err(Error::DegenerateBatch("coincident embeddings leave an angle undefined".into()));
    }
    let units = g.div_rows(diffs, norms)?;
    let ut = g.transpose(units)?;
    let gram = g.matmul(units, ut)?;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i != j && j != k && i != k {
                    rows.push(slot(i, j));
                    cols.push(slot(k, j));
                }
            }
        }
    }
    let picked = g.gather_rows(gram, &rows)?;
    g.pick_cols(picked, &cols)
}

/// Which relation an [`rkd_loss`] compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RkdMode {
    Dist,
    Angle,
}

/// Mean Huber discrepancy between student and teacher relations.
pub fn rkd_loss(g: &mut Graph, student: Var, teacher: Var, mode: RkdMode) -> Result<Var> {
    let (ns, nt) = (g.shape(student)[0], g.shape(teacher)[0]);
    if ns != nt {
        return Err(Error::BatchMismatch(format!("rkd: {ns} student rows vs {nt} teacher rows")));
    }
    let need = if mode == RkdMode::Dist { 2 } else { 3 };
    if ns < need {
        return Err(Error::DegenerateBatch(format!("rkd needs at least {need} samples, got {ns}")));
    }
    let (s, t) = match mode {
        RkdMode::Dist => (rkd_potentials(g, student)?, rkd_potentials(g, teacher)?),
        RkdMode::Angle => (rkd_angles(g, student)?, rkd_angles(g, teacher)?),
    };
    let diff = g.sub(s, t)?;
    let h = g.huber(diff, RKD_HUBER_DELTA);
    Ok(g.mean(h))
}

/// `½ Σ ‖w‖²`.
pub fn l2_penalty(g: &mut Graph, weights: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(weights.len());
    for &w in weights {
        let sq = g.square(w)?;
        terms.push(g.sum(sq));
    }
    half_sum(g, terms)
}

/// `½ Σ ‖w − w₀‖²` against fixed reference tensors.
pub fn l2_sp_penalty(g: &mut Graph, weights: &[(Var, &Tensor)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(weights.len());
    for &(w, w0) in weights {
        if g.shape(w) != w0.shape() {
            return Err(Error::RefMismatch(format!("shape {:?} vs reference {:?}", g.shape(w), w0.shape())));
        }
        let r = g.constant(w0.clone());
        let d = g.sub(w, r)?;
        let sq = g.square(d)?;
        terms.push(g.sum(sq));
    }
    half_sum(g, terms)
}

fn half_sum(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let s = sum_terms(g, terms)?;
    g.scale(s, 0.5)
}

/// `Σ σ_max(W)²` with gradient `2σ·u·vᵀ`, singular vectors held fixed.
pub fn spectral_penalty(g: &mut Graph, weights: &[(String, Var)], iters: usize, seed: u64) -> Result<Var> {
    let mut terms = Vec::with_capacity(weights.len());
    for (name, w) in weights {
        let t = g.value(*w);
        if t.ndim() != 2 {
            return Err(Error::NotAMatrix(name.clone()));
        }
        let sn = spectral_norm(t, iters, seed)?;
        let (m, n) = (t.rows(), t.cols());
        let mut grad = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                grad.push(2.0 * sn.sigma * sn.u[i] * sn.v[j]);
            }
        }
        terms.push(g.linearized(*w, sn.sigma * sn.sigma, Tensor::raw(vec![m, n], grad))?);
    }
    sum_terms(g, terms)
}

/// Sum of the `k` smallest squared singular values of a feature batch.
pub fn bss_penalty(g: &mut Graph, features: Var, k: usize) -> Result<Var> {
    let f = g.value(features);
    let (n, d) = f.require_2d("bss_penalty")?;
    let r = n.min(d);
    if k == 0 || k > r {
        return Err(Error::KOutOfRange { k, max: r });
    }
    let dec = svd(f)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; n * d];
    for c in r - k..r {
        let s = dec.s[c];
        value += s * s;
        let (u, v) = (dec.u_col(c), dec.v_col(c));
        for i in 0..n {
            for j in 0..d {
                grad[i * d + j] += 2.0 * s * u[i] * v[j];
            }
        }
    }
    g.linearized(features, value, Tensor::raw(vec![n, d], grad))
}

fn sum_terms(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1])));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
