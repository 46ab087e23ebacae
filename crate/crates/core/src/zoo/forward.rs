//! Forward passes for both model kinds, routed through any injections of an
//! adaptation plan.

use std::collections::{BTreeMap, BTreeSet};

use super::params::ParamStore;
use super::path::ParamPath;
use super::spec::{Activation, ModelSpec, LN_EPS};
use crate::architect::plan::{AdaptationPlan, Injection, InjectionKind, Side};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hook path → captured activation (2-D, rows = batch or batch·tokens).
pub type ActivationTrace = BTreeMap<String, Tensor>;

/// Parameter path → graph variable.
pub type VarMap = BTreeMap<ParamPath, Var>;

/// Puts every parameter on the graph. Trainable ones become differentiable
/// leaves when `differentiable` is set; everything else is a constant.
pub fn register_params(g: &mut Graph, params: &ParamStore, differentiable: bool) -> VarMap {
    params
        .iter()
        .map(|(p, t)| {
            let v = if differentiable && params.trainable(p).is_trainable() {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            (p.clone(), v)
        })
        .collect()
}

pub struct GraphOutput {
    pub logits: Var,
    pub trace: BTreeMap<String, Var>,
}

struct Ctx<'a> {
    g: &'a mut Graph,
    vars: &'a VarMap,
    sites: BTreeMap<&'a ParamPath, Vec<&'a Injection>>,
    capture: &'a BTreeSet<String>,
    trace: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    fn var(&self, p: &ParamPath) -> Result<Var> {
        self.vars.get(p).copied().ok_or_else(|| Error::PlanMismatch(format!("missing parameter `{p}`")))
    }

    fn leaf(&self, site: &ParamPath, name: &str) -> Result<Var> {
        self.var(&site.child(name, None))
    }

    fn injections(&self, site: &ParamPath) -> Vec<&'a Injection> {
        self.sites.get(site).cloned().unwrap_or_default()
    }

    fn capture(&mut self, name: String, v: Var) {
        if self.capture.contains(&name) {
            self.trace.insert(name, v);
        }
    }

    fn ssf(&mut self, inj: &Injection, x: Var) -> Result<Var> {
        let gamma = self.var(inj.param("gamma"))?;
        let beta = self.var(inj.param("beta"))?;
        let y = self.g.mul_row(x, gamma)?;
        self.g.add_row(y, beta)
    }

    /// `x·Wᵀ + b` for the module at `site`, with lora / ssf injections.
    fn linear(&mut self, site: &ParamPath, x: Var) -> Result<Var> {
        let injs = self.injections(site);
        let mut x = x;
        for inj in &injs {
            if inj.kind == (InjectionKind::Ssf { side: Side::Input }) {
                x = self.ssf(inj, x)?;
            }
        }
        let w = self.leaf(site, "weight")?;
        let b = self.leaf(site, "bias")?;
        let wt = self.g.transpose(w)?;
        let y = self.g.matmul(x, wt)?;
        let mut y = self.g.add_row(y, b)?;
        for inj in &injs {
            if let InjectionKind::Lora { rank, alpha } = inj.kind {
                let a = self.var(inj.param("a"))?;
                let bm = self.var(inj.param("b"))?;
                let at = self.g.transpose(a)?;
                let bt = self.g.transpose(bm)?;
                let t = self.g.matmul(x, at)?;
                let t = self.g.matmul(t, bt)?;
                let t = self.g.scale(t, alpha / rank as f64)?;
                y = self.g.add(y, t)?;
            }
        }
        for inj in &injs {
            if inj.kind == (InjectionKind::Ssf { side: Side::Output }) {
                y = self.ssf(inj, y)?;
            }
        }
        Ok(y)
    }

    fn norm(&mut self, site: &ParamPath, x: Var) -> Result<Var> {
        let gamma = self.leaf(site, "gamma")?;
        let beta = self.leaf(site, "beta")?;
        let mut y = self.g.layernorm(x, gamma, beta, LN_EPS)?;
        for inj in self.injections(site) {
            if let InjectionKind::Ssf { .. } = inj.kind {
                y = self.ssf(inj, y)?;
            }
        }
        Ok(y)
    }

    /// Residual bottleneck adapters attached to `site`: `z + gelu(z·down)·up`.
    fn adapters(&mut self, site: &ParamPath, z: Var) -> Result<Var> {
        let mut z = z;
        for inj in self.injections(site) {
            if let InjectionKind::Adapter { .. } = inj.kind {
                let down = self.var(inj.param("down"))?;
                let up = self.var(inj.param("up"))?;
                let h = self.g.matmul(z, down)?;
                let h = self.g.gelu(h);
                let h = self.g.matmul(h, up)?;
                z = self.g.add(z, h)?;
            }
        }
        Ok(z)
    }

    fn activate(&mut self, act: Activation, x: Var) -> Var {
        match act {
            Activation::Relu => self.g.relu(x),
            Activation::Gelu => self.g.gelu(x),
        }
    }
}

fn layer_path(name: &str, i: usize) -> ParamPath {
    ParamPath(vec![crate::zoo::path::Segment { name: name.to_string(), index: Some(i) }])
}

/// Runs the model on the graph. `x` is `[batch, ...input_shape]`.
pub fn forward_graph(
    g: &mut Graph,
    spec: &ModelSpec,
    plan: &AdaptationPlan,
    vars: &VarMap,
    x: Var,
    capture: &BTreeSet<String>,
) -> Result<GraphOutput> {
    let hooks = spec.hooks();
    if let Some(h) = capture.iter().find(|h| !hooks.contains(h)) {
        return Err(Error::UnknownHook(h.clone()));
    }
    let xs = g.shape(x).to_vec();
    let want = spec.input_shape();
    if xs.len() != want.len() + 1 || xs[1..] != want[..] {
        return Err(Error::ShapeMismatch(format!("input {xs:?}, model expects [batch, {want:?}]")));
    }
    let batch = xs[0];
    let mut cx = Ctx { g, vars, sites: plan.by_site(), capture, trace: BTreeMap::new() };

    let logits = match spec {
        ModelSpec::Mlp { widths, activation } => {
            let n = widths.len() - 1;
            let mut h = x;
            let mut feature = x;
            let mut logits = x;
            for i in 0..n {
                let site = layer_path("layers", i);
                if i + 1 == n {
                    feature = h;
                }
                let z = cx.linear(&site, h)?;
                let z = cx.adapters(&site, z)?;
                cx.capture(format!("layers[{i}].pre"), z);
                if i + 1 < n {
                    h = cx.activate(*activation, z);
                    cx.capture(format!("layers[{i}].out"), h);
                } else {
                    logits = z;
                }
            }
            cx.capture("feature".into(), feature);
            logits
        }
        ModelSpec::MiniVit(v) => {
            let (s, d, heads) = (v.seq_len, v.dim, v.heads);
            let dh = d / heads;
            let t = s + 1;
            let flat = cx.g.reshape(x, &[batch * s, v.in_dim])?;
            let tok = cx.linear(&crate::zoo::path::path("patch_embed"), flat)?;
            let cls = cx.var(&crate::zoo::path::path("cls_token"))?;
            let pos = cx.var(&crate::zoo::path::path("pos_embed"))?;
            let mut seqs = Vec::with_capacity(batch);
            for b in 0..batch {
                let body = cx.g.slice2d(tok, b * s..(b + 1) * s, 0..d)?;
                let seq = cx.g.concat_rows(&[cls, body])?;
                seqs.push(cx.g.add(seq, pos)?);
            }
            let mut h = cx.g.concat_rows(&seqs)?;
            cx.capture("embed".into(), h);

            let scale = 1.0 / (dh as f64).sqrt();
            for blk in 0..v.blocks {
                let bp = layer_path("blocks", blk);
                cx.capture(format!("blocks[{blk}].in"), h);
                let n1 = cx.norm(&bp.child("norm1", None), h)?;
                let qkv = cx.linear(&bp.child("attn", None).child("qkv", None), n1)?;
                let prefixes: Vec<(Var, Var, usize)> = cx
                    .injections(&bp)
                    .iter()
                    .filter_map(|inj| match inj.kind {
                        InjectionKind::Prefix { tokens } => Some((inj, tokens)),
                        _ => None,
                    })
                    .map(|(inj, tokens)| Ok((cx.var(inj.param("key"))?, cx.var(inj.param("value"))?, tokens)))
                    .collect::<Result<_>>()?;
                let want_weights = capture.contains(&format!("blocks[{blk}].attn.weights"));
                let mut weights = Vec::new();
                let mut outs = Vec::with_capacity(batch);
                for b in 0..batch {
                    let rows = b * t..(b + 1) * t;
                    let mut head_outs = Vec::with_capacity(heads);
                    for hd in 0..heads {
                        let c = hd * dh..(hd + 1) * dh;
                        let q = cx.g.slice2d(qkv, rows.clone(), c.clone())?;
                        let mut k = cx.g.slice2d(qkv, rows.clone(), d + c.start..d + c.end)?;
                        let mut val = cx.g.slice2d(qkv, rows.clone(), 2 * d + c.start..2 * d + c.end)?;
                        for &(pk, pv, n) in &prefixes {
                            let pk = cx.g.slice2d(pk, 0..n, c.clone())?;
                            let pv = cx.g.slice2d(pv, 0..n, c.clone())?;
                            k = cx.g.concat_rows(&[pk, k])?;
                            val = cx.g.concat_rows(&[pv, val])?;
                        }
                        let kt = cx.g.transpose(k)?;
                        let sc = cx.g.matmul(q, kt)?;
                        let sc = cx.g.scale(sc, scale)?;
                        let p = cx.g.softmax(sc, 1.0)?;
                        if want_weights {
                            weights.push(p);
                        }
                        head_outs.push(cx.g.matmul(p, val)?);
                    }
                    outs.push(cx.g.concat_cols(&head_outs)?);
                }
                if want_weights {
                    let w = cx.g.concat_rows(&weights)?;
                    cx.capture(format!("blocks[{blk}].attn.weights"), w);
                }
                let o = cx.g.concat_rows(&outs)?;
                let o = cx.linear(&bp.child("attn", None).child("proj", None), o)?;
                h = cx.g.add(h, o)?;
                let n2 = cx.norm(&bp.child("norm2", None), h)?;
                let m = cx.linear(&bp.child("mlp", None).child("fc1", None), n2)?;
                cx.capture(format!("blocks[{blk}].mlp.pre"), m);
                let m = cx.g.gelu(m);
                let m = cx.linear(&bp.child("mlp", None).child("fc2", None), m)?;
                let m = cx.adapters(&bp, m)?;
                h = cx.g.add(h, m)?;
                cx.capture(format!("blocks[{blk}].out"), h);
            }
            let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
            let c = cx.g.gather_rows(h, &cls_rows)?;
            let f = cx.norm(&crate::zoo::path::path("norm"), c)?;
            cx.capture("feature".into(), f);
            cx.linear(&crate::zoo::path::path("head"), f)?
        }
    };
    cx.capture("logits".into(), logits);
    Ok(GraphOutput { logits, trace: cx.trace })
}

/// A model with its (possibly empty) adaptation plan and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub plan: AdaptationPlan,
    pub params: ParamStore,
}

impl Model {
    pub fn plain(spec: ModelSpec, params: ParamStore) -> Model {
        Model { plan: AdaptationPlan::full(&spec), spec, params }
    }

    /// Logits and captured activations, evaluated without gradients.
    pub fn forward(&self, x: &Tensor, capture: &[&str]) -> Result<(Tensor, ActivationTrace)> {
        let mut g = Graph::new();
        let vars = register_params(&mut g, &self.params, false);
        let xv = g.constant(x.clone());
        let cap: BTreeSet<String> = capture.iter().map(|s| s.to_string()).collect();
        let out = forward_graph(&mut g, &self.spec, &self.plan, &vars, xv, &cap)?;
        let trace = out.trace.iter().map(|(k, v)| (k.clone(), g.value(*v).clone())).collect();
        Ok((g.value(out.logits).clone(), trace))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, &[])?.0)
    }

    /// Batched evaluation to keep graphs small.
    pub fn logits_batched(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.rows();
        let mut rows = Vec::with_capacity(n);
        let mut cols = 0;
        for start in (0..n).step_by(batch.max(1)) {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            let l = self.logits(&x.select_rows(&idx))?;
            cols = l.cols();
            rows.extend_from_slice(l.data());
        }
        Tensor::new(&[n, cols], rows)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits_batched(x, 256)?.argmax_rows())
    }
}

/// Plain-model forward: logits and the requested activations.
pub fn forward(
    spec: &ModelSpec,
    params: &ParamStore,
    x: &Tensor,
    capture: &[&str],
) -> Result<(Tensor, ActivationTrace)> {
    let mut g = Graph::new();
    let vars = register_params(&mut g, params, false);
    let xv = g.constant(x.clone());
    let cap: BTreeSet<String> = capture.iter().map(|s| s.to_string()).collect();
    let out = forward_graph(&mut g, spec, &AdaptationPlan::full(spec), &vars, xv, &cap)?;
    let trace = out.trace.iter().map(|(k, v)| (k.clone(), g.value(*v).clone())).collect();
    Ok((g.value(out.logits).clone(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::params::{build_model, Init};
    use crate::zoo::spec::VitSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vit() -> ModelSpec {
        ModelSpec::vit(VitSpec { in_dim: 4, dim: 16, blocks: 2, heads: 2, mlp_dim: 32, classes: 3, seq_len: 5 })
            .unwrap()
    }

    #[test]
    fn zero_mlp_gives_zero_logits() {
        let spec = ModelSpec::mlp(&[4, 8, 3], Activation::Relu).unwrap();
        let mut p = build_model(&spec, Init::Seeded(0)).unwrap();
        let paths: Vec<ParamPath> = p.paths().cloned().collect();
        for path in paths {
            let s = p.get(&path).unwrap().shape().to_vec();
            p.set(&path, Tensor::zeros(&s)).unwrap();
        }
        let x = Tensor::uniform(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (l, _) = forward(&spec, &p, &x, &[]).unwrap();
        assert_eq!(l.shape(), &[5, 3]);
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn capture_is_side_effect_free() {
        for spec in [ModelSpec::mlp(&[4, 8, 6, 3], Activation::Gelu).unwrap(), vit()] {
            let p = build_model(&spec, Init::Seeded(3)).unwrap();
            let mut shape = vec![3];
            shape.extend(spec.input_shape());
            let x = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            let (a, ta) = forward(&spec, &p, &x, &[]).unwrap();
            let hooks = spec.hooks();
            let all: Vec<&str> = hooks.iter().map(String::as_str).collect();
            let (b, tb) = forward(&spec, &p, &x, &all).unwrap();
            assert!(ta.is_empty());
            assert_eq!(tb.len(), hooks.len());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(tb["logits"], b);
        }
    }

    #[test]
    fn unknown_hook_and_bad_input() {
        let spec = vit();
        let p = build_model(&spec, Init::Seeded(3)).unwrap();
        let x = Tensor::zeros(&[2, 5, 4]);
        assert!(matches!(forward(&spec, &p, &x, &["blocks[9].in"]), Err(Error::UnknownHook(_))));
        assert!(matches!(forward(&spec, &p, &Tensor::zeros(&[2, 4, 4]), &[]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn vit_trace_shapes() {
        let spec = vit();
        let p = build_model(&spec, Init::Seeded(3)).unwrap();
        let x = Tensor::uniform(&[2, 5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let (_, tr) = forward(&spec, &p, &x, &["feature", "blocks[0].out", "blocks[1].attn.weights"]).unwrap();
        assert_eq!(tr["feature"].shape(), &[2, 16]);
        assert_eq!(tr["blocks[0].out"].shape(), &[12, 16]);
        // batch · heads · tokens rows over tokens keys
        assert_eq!(tr["blocks[1].attn.weights"].shape(), &[2 * 2 * 6, 6]);
    }
}
