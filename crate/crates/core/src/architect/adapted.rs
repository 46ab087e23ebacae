use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::plan::{AdaptationPlan, InjectionKind, Side};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{Checkpoint, Model, ModelSpec, ParamPath, ParamStore, Trainable};

/// A base model routed through a plan's injections.
pub type AdaptedModel = Model;

fn check_plan(model: &ModelSpec, plan: &AdaptationPlan) -> Result<()> {
    let shapes = model.param_shapes();
    for p in plan.freeze.iter().chain(plan.trainable.keys()) {
        if !shapes.contains_key(p) {
            return Err(Error::PlanMismatch(format!("`{p}` is not a parameter of {model}")));
        }
    }
    if plan.freeze.len() + plan.trainable.len() != shapes.len() {
        return Err(Error::PlanMismatch("plan does not cover every model parameter".into()));
    }
    let width = model.feature_dim();
    for inj in &plan.injections {
        let known = shapes.keys().any(|p| p.starts_with(&inj.site));
        if !known {
            return Err(Error::PlanMismatch(format!("injection site `{}` not in {model}", inj.site)));
        }
        let weight = shapes.get(&inj.site.child("weight", None));
        let gamma = shapes.get(&inj.site.child("gamma", None));
        let expected: Vec<Vec<usize>> = match (&inj.kind, weight, gamma) {
            (InjectionKind::Lora { rank, .. }, Some(w), _) => vec![vec![*rank, w[1]], vec![w[0], *rank]],
            (InjectionKind::Ssf { side: Side::Input }, Some(w), _) => vec![vec![w[1]]; 2],
            (InjectionKind::Ssf { side: Side::Output }, Some(w), _) => vec![vec![w[0]]; 2],
            (InjectionKind::Ssf { .. }, None, Some(g)) => vec![g.clone(); 2],
            (InjectionKind::Adapter { bottleneck }, Some(w), _) => vec![vec![w[0], *bottleneck], vec![*bottleneck, w[0]]],
            (InjectionKind::Adapter { bottleneck }, None, _) => vec![vec![width, *bottleneck], vec![*bottleneck, width]],
            (InjectionKind::Prefix { tokens }, _, _) => vec![vec![*tokens, width]; 2],
            _ => return Err(Error::PlanMismatch(format!("injection site `{}` has no compatible module", inj.site))),
        };
        let got: Vec<Vec<usize>> = inj.params.iter().map(|(_, s)| s.clone()).collect();
        if got != expected {
            return Err(Error::PlanMismatch(format!("injection at `{}` has shapes {got:?}, model needs {expected:?}", inj.site)));
        }
    }
    Ok(())
}

/// Attaches the plan's injections to a base parameter set and applies its
/// freeze mask. New parameters start at the identity: lora `B`, adapter `up`
/// are zero; ssf starts at gamma 1, beta 0.
pub fn apply_plan(model: &ModelSpec, params: &ParamStore, plan: &AdaptationPlan, seed: u64) -> Result<AdaptedModel> {
    check_plan(model, plan)?;
    let shapes = model.param_shapes();
    let mut store = ParamStore::new();
    for (p, shape) in &shapes {
        let t = params.get(p).map_err(|_| Error::PlanMismatch(format!("parameter `{p}` missing")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::PlanMismatch(format!("`{p}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        store.insert(p.clone(), t.clone(), plan.trainability(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for inj in &plan.injections {
        for (p, shape) in &inj.params {
            let t = match (p.leaf(), &inj.kind) {
                ("a", _) | ("down", _) => Tensor::uniform(shape, 1.0 / (shape[shape.len() - 1] as f64).sqrt(), &mut rng),
                ("key", _) | ("value", _) => Tensor::uniform(shape, 1.0 / (shape[1] as f64).sqrt(), &mut rng),
                ("gamma", InjectionKind::Ssf { .. }) => Tensor::full(shape, 1.0),
                _ => Tensor::zeros(shape),
            };
            store.insert(p.clone(), t, Trainable::All);
        }
    }
    Ok(Model { spec: model.clone(), plan: plan.clone(), params: store })
}

/// Rebuilds an adapted model from a checkpoint holding base and injected
/// parameters.
pub fn restore_adapted(model: &ModelSpec, plan: &AdaptationPlan, ck: &Checkpoint) -> Result<AdaptedModel> {
    check_plan(model, plan)?;
    crate::zoo::check_digest(model, ck)?;
    let loaded = ParamStore::from_checkpoint(ck)?;
    let mut expected: Vec<(ParamPath, Vec<usize>)> = model.param_shapes().into_iter().collect();
    for inj in &plan.injections {
        expected.extend(inj.params.iter().cloned());
    }
    if expected.len() != loaded.len() {
        return Err(Error::SpecMismatch(format!(
            "checkpoint has {} entries, adapted model needs {}",
            loaded.len(),
            expected.len()
        )));
    }
    let mut store = ParamStore::new();
    for (p, shape) in expected {
        let t = loaded.get(&p).map_err(|_| Error::SpecMismatch(format!("checkpoint lacks `{p}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::SpecMismatch(format!("`{p}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        store.insert(p.clone(), t.clone(), plan.trainability(&p));
    }
    Ok(Model { spec: model.clone(), plan: plan.clone(), params: store })
}

fn diag_scale_rows(w: &Tensor, s: &Tensor) -> Tensor {
    let c = w.cols();
    let sv = s.data();
    Tensor::raw(w.shape().to_vec(), w.data().iter().enumerate().map(|(k, v)| v * sv[k / c]).collect())
}

fn diag_scale_cols(w: &Tensor, s: &Tensor) -> Tensor {
    let c = w.cols();
    let sv = s.data();
    Tensor::raw(w.shape().to_vec(), w.data().iter().enumerate().map(|(k, v)| v * sv[k % c]).collect())
}

/// Folds lora and ssf injections into the base weights and returns a plain
/// checkpoint of the original architecture.
pub fn merge_reparam(adapted: &AdaptedModel) -> Result<Checkpoint> {
    if let Some(inj) = adapted.plan.injections.iter().find(|i| !i.kind.mergeable()) {
        return Err(Error::NotMergeable(format!("{} at {}", inj.kind.name(), inj.site)));
    }
    let p = &adapted.params;
    let mut base = ParamStore::new();
    for path in adapted.spec.param_shapes().keys() {
        base.insert(path.clone(), p.get(path)?.clone(), Trainable::All);
    }
    for (site, injs) in adapted.plan.by_site() {
        let wpath = site.child("weight", None);
        let bpath = site.child("bias", None);
        if base.contains(&wpath) {
            let mut w = base.get(&wpath)?.clone();
            let mut b = base.get(&bpath)?.clone();
            for inj in &injs {
                if let InjectionKind::Lora { rank, alpha } = inj.kind {
                    let a = p.get(inj.param("a"))?;
                    let bm = p.get(inj.param("b"))?;
                    w = w.add(&bm.matmul(a)?.scale(alpha / rank as f64))?;
                }
            }
            for inj in injs.iter().rev() {
                if inj.kind == (InjectionKind::Ssf { side: Side::Input }) {
                    let g = p.get(inj.param("gamma"))?;
                    let beta = p.get(inj.param("beta"))?;
                    let wb = w.matmul(&beta.reshape(&[beta.len(), 1])?)?;
                    b = b.add(&wb.reshape(&[b.len()])?)?;
                    w = diag_scale_cols(&w, g);
                }
            }
            for inj in &injs {
                if inj.kind == (InjectionKind::Ssf { side: Side::Output }) {
                    let g = p.get(inj.param("gamma"))?;
                    let beta = p.get(inj.param("beta"))?;
                    w = diag_scale_rows(&w, g);
                    b = b.mul(g)?.add(beta)?;
                }
            }
            base.set(&wpath, w)?;
            base.set(&bpath, b)?;
        } else {
            let gpath = site.child("gamma", None);
            let betapath = site.child("beta", None);
            let mut gamma = base.get(&gpath)?.clone();
            let mut beta = base.get(&betapath)?.clone();
            for inj in &injs {
                let g = p.get(inj.param("gamma"))?;
                let sh = p.get(inj.param("beta"))?;
                gamma = gamma.mul(g)?;
                beta = beta.mul(g)?.add(sh)?;
            }
            base.set(&gpath, gamma)?;
            base.set(&betapath, beta)?;
        }
    }
    Ok(base.to_checkpoint(&adapted.spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architect::{compile_plan, parse_config};
    use crate::zoo::{build_model, forward, Activation, Init, VitSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vit() -> ModelSpec {
        ModelSpec::vit(VitSpec { in_dim: 4, dim: 16, blocks: 2, heads: 2, mlp_dim: 32, classes: 3, seq_len: 5 }).unwrap()
    }

    fn adapt(spec: &ModelSpec, src: &str) -> AdaptedModel {
        let base = build_model(spec, Init::Seeded(7)).unwrap().quantized();
        let plan = compile_plan(&parse_config(src).unwrap(), spec).unwrap();
        apply_plan(spec, &base, &plan, 11).unwrap()
    }

    fn input(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
        let mut shape = vec![n];
        shape.extend(spec.input_shape());
        Tensor::uniform(&shape, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Randomises every injected parameter so merge checks are not trivial.
    fn perturb(m: &mut AdaptedModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let new: Vec<ParamPath> = m.plan.new_trainable.iter().cloned().collect();
        for p in new {
            let t = m.params.get(&p).unwrap();
            let noise = Tensor::uniform(t.shape(), 0.5, &mut rng);
            let v = t.add(&noise).unwrap().to_f32_precision();
            m.params.set(&p, v).unwrap();
        }
    }

    #[test]
    fn identity_at_init() {
        let mlp = ModelSpec::mlp(&[6, 12, 8, 4], Activation::Gelu).unwrap();
        for (spec, src) in [
            (vit(), "(LoRA.adapt|r=2):->(blocks[0:2].attn.qkv){inout1}->(head){inout2}"),
            (vit(), "(SSF.adapt):->(blocks[*].mlp.fc1){out}->(blocks[0].norm2){out}->(patch_embed){in}"),
            (vit(), "(Adapter.adapt|dim=4):->(blocks[*]){out}"),
            (mlp.clone(), "(LoRA.adapt):->(layers[*]){inout}"),
            (mlp.clone(), "(SSF.adapt):->(layers[0:2]){out}->(layers[1]){in1}"),
        ] {
            let m = adapt(&spec, src);
            let base = build_model(&spec, Init::Seeded(7)).unwrap().quantized();
            let x = input(&spec, 6, 1);
            let (want, _) = forward(&spec, &base, &x, &[]).unwrap();
            assert_eq!(m.logits(&x).unwrap(), want, "{src}");
        }
    }

    #[test]
    fn merged_matches_adapted() {
        let mlp = ModelSpec::mlp(&[6, 12, 8, 4], Activation::Gelu).unwrap();
        for (spec, src) in [
            (vit(), "(LoRA.adapt|r=2,alpha=8):->(blocks[0:2].attn.qkv){inout1}->(blocks[1].mlp.fc2){inout}"),
            (vit(), "(SSF.adapt):->(blocks[*].mlp.fc1){out}->(norm){out}->(blocks[0].attn.proj){in}->(blocks[0].attn.proj){out3}"),
            (mlp.clone(), "(LoRA.adapt):->(layers[*]){inout}"),
            (mlp.clone(), "(SSF.adapt):->(layers[0:2]){out}->(layers[1]){in1}->(layers[1]){in2}"),
        ] {
            let mut m = adapt(&spec, src);
            perturb(&mut m, 5);
            let merged = merge_reparam(&m).unwrap();
            let plain = build_model(&spec, Init::Checkpoint(&merged)).unwrap();
            let x = input(&spec, 100, 2);
            let (a, _) = forward(&spec, &plain, &x, &[]).unwrap();
            let b = m.logits(&x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6, "{src}: {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn ssf_closed_form_fold() {
        let spec = ModelSpec::mlp(&[2, 2], Activation::Relu).unwrap();
        let mut m = adapt(&spec, "(SSF.adapt):->(layers[0]){out}");
        let b0 = m.params.get(&crate::zoo::path("layers[0].bias")).unwrap().clone();
        let w0 = m.params.get(&crate::zoo::path("layers[0].weight")).unwrap().clone();
        m.params.set(&crate::zoo::path("layers[0].bias"), Tensor::new(&[2], vec![0.25, -0.5]).unwrap()).unwrap();
        let _ = b0;
        m.params.set(&crate::zoo::path("layers[0].ssf[0].gamma"), Tensor::full(&[2], 2.0)).unwrap();
        m.params.set(&crate::zoo::path("layers[0].ssf[0].beta"), Tensor::full(&[2], 1.0)).unwrap();
        let ck = merge_reparam(&m).unwrap();
        let w = ck.entry("layers[0].weight").unwrap().to_tensor();
        let b = ck.entry("layers[0].bias").unwrap().to_tensor();
        assert_eq!(w, w0.scale(2.0).to_f32_precision());
        assert_eq!(b.data(), &[1.5, 0.0]);
    }

    #[test]
    fn non_mergeable_and_prefix_shapes() {
        let m = adapt(&vit(), "(Adapter.adapt):->(blocks[0]){out}");
        assert!(matches!(merge_reparam(&m), Err(Error::NotMergeable(_))));
        let p = adapt(&vit(), "(Prefix.adapt|tokens=2):->(blocks[0:2]){in}");
        assert!(matches!(merge_reparam(&p), Err(Error::NotMergeable(_))));
        let x = input(&vit(), 3, 4);
        let (logits, tr) = p.forward(&x, &["blocks[0].attn.weights", "blocks[1].attn.weights"]).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        // 6 tokens attend over 6 + 2 keys
        assert_eq!(tr["blocks[0].attn.weights"].shape(), &[3 * 2 * 6, 8]);
    }

    #[test]
    fn plan_mismatch_and_restore() {
        let plan = compile_plan(&parse_config("(LoRA.adapt):->(layers[0]){inout}").unwrap(), &ModelSpec::mlp(&[4, 8, 3], Activation::Relu).unwrap()).unwrap();
        let other = ModelSpec::mlp(&[4, 6, 3], Activation::Relu).unwrap();
        let base = build_model(&other, Init::Seeded(0)).unwrap();
        assert!(matches!(apply_plan(&other, &base, &plan, 0), Err(Error::PlanMismatch(_))));

        let m = adapt(&vit(), "(LoRA.adapt):->(blocks[0].attn.qkv){inout}");
        let ck = m.params.to_checkpoint(&m.spec);
        let back = restore_adapted(&m.spec, &m.plan, &ck).unwrap();
        assert_eq!(back.params, m.params.quantized());
    }
}
