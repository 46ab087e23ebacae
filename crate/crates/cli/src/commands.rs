use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Value};

use zj_core::architect::{apply_plan, compile_plan, merge_reparam, parse_config, restore_adapted, AdaptationPlan};
use zj_core::merger::{
    combine, fisher_estimate, fisher_merge, greedy_soup, ot_fuse, permute_model, repair, uniform_soup, weight_match,
    wise_ft, EnsembleMode, Permutation,
};
use zj_core::tuner::{self, accuracy, Dataset, Split};
use zj_core::zoo::{build_model, Checkpoint, Init, Model, ModelSpec};
use zj_core::{Error, Tensor};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::file(path, e.into()))
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::file(&dir, e.into()))?;
    write_file(&dir.join("resolved.cfg"), cfg.resolved().as_bytes())?;
    Ok(dir)
}

fn load_ck(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::file(path, e))
}

fn save_ck(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    write_file(path, &ck.to_bytes())
}

fn plan_for(cfg: &RunConfig, spec: &ModelSpec) -> CliResult<AdaptationPlan> {
    match cfg.get("architect.config") {
        None => Ok(AdaptationPlan::full(spec)),
        Some(text) => {
            let ast = parse_config(text).map_err(|err| CliError::Dsl { caret: err.caret(text), err })?;
            Ok(compile_plan(&ast, spec)?)
        }
    }
}

/// A plain checkpoint of `spec`, or one holding the plan's injected
/// parameters as written by `train` for non-mergeable methods.
fn load_model(spec: &ModelSpec, plan: &AdaptationPlan, path: &Path) -> CliResult<Model> {
    let ck = load_ck(path)?;
    let wrap = |e| CliError::file(path, e);
    if ck.entries.len() == spec.param_shapes().len() {
        let params = build_model(spec, Init::Checkpoint(&ck)).map_err(wrap)?;
        Ok(Model::plain(spec.clone(), params))
    } else {
        restore_adapted(spec, plan, &ck).map_err(wrap)
    }
}

pub fn load_dataset(cfg: &RunConfig) -> zj_core::Result<Dataset> {
    let seed: u64 = if cfg.is_set("data.seed") { cfg.parsed("data.seed")? } else { cfg.seed()? };
    let n: usize = cfg.parsed("data.n")?;
    match cfg.require("data.source")? {
        "blobs" => tuner::blobs(cfg.parsed("data.k")?, cfg.parsed("data.d")?, n, cfg.parsed("data.sigma")?, seed),
        "blobs_shifted" => tuner::blobs_shifted(
            cfg.parsed("data.k")?,
            cfg.parsed("data.d")?,
            n,
            cfg.parsed("data.sigma")?,
            cfg.parsed("data.delta")?,
            seed,
        ),
        "moons" => tuner::moons(n, cfg.parsed("data.noise")?, seed),
        "tokens" => tuner::tokens(cfg.parsed("data.vocab")?, cfg.parsed("data.seq")?, n, seed),
        "idx" => tuner::load_idx(cfg.require("data.images")?, cfg.require("data.labels")?, seed),
        "csv" => tuner::load_csv(cfg.require("data.path")?, cfg.parsed("data.label_col")?, seed),
        other => Err(Error::Config(format!(
            "data.source = {other}: expected blobs, blobs_shifted, moons, tokens, idx or csv"
        ))),
    }
}

pub fn cmd_plan(cfg: &RunConfig) -> CliResult<String> {
    let spec = cfg.model_spec()?;
    let plan = plan_for(cfg, &spec)?;
    prepare_out(cfg)?;
    Ok(plan.table(&spec))
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<String> {
    let spec = cfg.model_spec()?;
    let plan = plan_for(cfg, &spec)?;
    let loss = cfg.loss()?;
    let reg = cfg.reg()?;
    let tc = cfg.train_config()?;
    let pretrained = cfg.pretrained();

    if loss.needs_teacher() && !cfg.is_set("teacher.ckpt") {
        return Err(Error::Config(format!("loss `{loss}` needs a teacher; set teacher.ckpt")).into());
    }
    if reg.needs_reference() && pretrained.is_empty() {
        return Err(Error::Config(format!("regularizer `{reg}` needs pretrained_weights")).into());
    }
    let base = match pretrained.first() {
        Some(p) => {
            let ck = load_ck(p)?;
            build_model(&spec, Init::Checkpoint(&ck)).map_err(|e| CliError::file(p, e))?
        }
        None => build_model(&spec, Init::Seeded(tc.seed))?,
    };
    let teacher = match cfg.get("teacher.ckpt") {
        Some(p) => {
            let tspec = cfg.teacher_spec()?;
            let full = AdaptationPlan::full(&tspec);
            Some(load_model(&tspec, &full, Path::new(p))?)
        }
        None => None,
    };
    let data = load_dataset(cfg)?;
    let adapted = apply_plan(&spec, &base, &plan, tc.seed)?;
    info!("training {} for {} epochs on {} samples", spec, tc.epochs, data.train.len());
    let reference = reg.needs_reference().then(|| base.frozen_copy());
    let out = tuner::train(&adapted, teacher.as_ref(), reference.as_ref(), &data, &loss, &reg, &tc)?;

    let dir = prepare_out(cfg)?;
    let mergeable = plan.injections.iter().all(|i| i.kind.mergeable());
    let final_ck = if !plan.injections.is_empty() && mergeable {
        save_ck(&out.checkpoint, &dir.join("adapted.zjk1"))?;
        merge_reparam(&out.model)?
    } else {
        out.checkpoint.clone()
    };
    save_ck(&final_ck, &dir.join("final.zjk1"))?;
    let history: String = out.history.iter().map(|r| r.to_json(false) + "\n").collect();
    write_file(&dir.join("history.jsonl"), history.as_bytes())?;

    let mut text = String::new();
    if let Some(last) = out.history.last() {
        let _ = write!(text, "epoch {} loss {:.6}", last.epoch, last.loss);
        if let Some(v) = last.val_acc {
            let _ = write!(text, " val_acc {v:.4}");
        }
        text.push('\n');
    }
    let _ = writeln!(text, "wrote {}", dir.join("final.zjk1").display());
    Ok(text)
}

fn perm_summary(p: &Permutation) -> Value {
    json!({ "identity": p.is_identity(), "cycle_counts": p.cycle_counts() })
}

fn exactly_two(cks: &[Checkpoint], method: &str) -> CliResult<(Checkpoint, Checkpoint)> {
    match cks {
        [a, b] => Ok((a.clone(), b.clone())),
        _ => Err(Error::Config(format!("merger.method = {method} takes exactly 2 checkpoints, got {}", cks.len())).into()),
    }
}

fn plain(spec: &ModelSpec, ck: &Checkpoint) -> zj_core::Result<Model> {
    Ok(Model::plain(spec.clone(), build_model(spec, Init::Checkpoint(ck))?))
}

pub fn cmd_merge(cfg: &RunConfig) -> CliResult<String> {
    let paths = cfg.inputs();
    if paths.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let cks = paths.iter().map(|p| load_ck(p)).collect::<CliResult<Vec<_>>>()?;
    let method = cfg.require("merger.method")?.to_string();
    let seed = cfg.seed()?;
    let alpha: f64 = cfg.parsed("merger.alpha")?;
    let split = || -> CliResult<(Tensor, Vec<usize>)> { Ok(load_dataset(cfg)?.split(cfg.split("merger.split")?)) };
    let spec = || -> CliResult<ModelSpec> {
        let s = cfg.model_spec()?;
        for (c, p) in cks.iter().zip(&paths) {
            zj_core::zoo::check_digest(&s, c).map_err(|e| CliError::file(p, e))?;
        }
        Ok(s)
    };
    let mut report = serde_json::Map::new();
    report.insert("recipe".into(), method.clone().into());
    report.insert("inputs".into(), paths.iter().map(|p| p.display().to_string()).collect());

    let merged = match method.as_str() {
        "soup" => uniform_soup(&cks)?,
        "greedy_soup" => {
            let s = spec()?;
            let (x, y) = split()?;
            let g = greedy_soup(&cks, |c| accuracy(&plain(&s, c)?, &x, &y))?;
            report.insert("ingredients".into(), json!(g.ingredients));
            report.insert("individual_accuracy".into(), json!(g.individual));
            report.insert("accuracy".into(), json!(g.accuracy));
            let steps: Vec<Value> = g
                .steps
                .iter()
                .map(|st| json!({ "candidate": st.candidate, "accuracy": st.accuracy, "accepted": st.accepted }))
                .collect();
            report.insert("steps".into(), steps.into());
            g.checkpoint
        }
        "wise_ft" => {
            let (a, b) = exactly_two(&cks, &method)?;
            report.insert("alpha".into(), json!(alpha));
            wise_ft(&a, &b, alpha)?
        }
        "fisher" => {
            let s = spec()?;
            let (x, y) = split()?;
            let n: usize = cfg.parsed("merger.fisher_samples")?;
            let labels = match cfg.require("merger.fisher_labels")? {
                "model" => None,
                "true" => Some(y.as_slice()),
                other => return Err(Error::Config(format!("merger.fisher_labels = {other}: expected model or true")).into()),
            };
            let fishers = cks
                .iter()
                .map(|c| fisher_estimate(&plain(&s, c)?, &x, labels, n, seed))
                .collect::<zj_core::Result<Vec<_>>>()?;
            let lambdas = cfg.lambdas(cks.len())?;
            report.insert("lambdas".into(), json!(lambdas));
            fisher_merge(&cks, &fishers, &lambdas, cfg.parsed("merger.eps_floor")?)?
        }
        "weight_match" => {
            let (a, b) = exactly_two(&cks, &method)?;
            let wm = weight_match(&a, &b, cfg.parsed("merger.sweeps")?)?;
            report.insert("permutation".into(), perm_summary(&wm.perm));
            report.insert("objective".into(), json!(wm.objective));
            report.insert("sweeps".into(), json!(wm.sweeps));
            wise_ft(&a, &permute_model(&b, &wm.perm)?, alpha)?
        }
        "ot_fusion" => {
            let (a, b) = exactly_two(&cks, &method)?;
            let f = ot_fuse(&a, &b, cfg.parsed("merger.eps")?, cfg.parsed("merger.iters")?)?;
            report.insert("permutation".into(), perm_summary(&f.perm));
            let cs: Vec<Value> = f
                .couplings
                .iter()
                .map(|c| json!({ "iterations": c.iterations, "violation": c.violation, "entropy": c.entropy() }))
                .collect();
            report.insert("couplings".into(), cs.into());
            f.checkpoint
        }
        "repair" => {
            let s = spec()?;
            let (a, mut b) = exactly_two(&cks, &method)?;
            match cfg.require("merger.align")? {
                "none" => {}
                "weight_match" => {
                    let wm = weight_match(&a, &b, cfg.parsed("merger.sweeps")?)?;
                    report.insert("permutation".into(), perm_summary(&wm.perm));
                    b = permute_model(&b, &wm.perm)?;
                }
                other => {
                    return Err(Error::Config(format!("merger.align = {other}: expected none or weight_match")).into())
                }
            }
            let (x, _) = split()?;
            let (fixed, r) = repair(&wise_ft(&a, &b, alpha)?, &a, &b, alpha, &s, &x)?;
            report.insert("alpha".into(), json!(alpha));
            report.insert("degenerate_units".into(), json!(r.degenerate));
            fixed
        }
        other => {
            return Err(Error::Config(format!(
                "merger.method = {other}: expected soup, greedy_soup, wise_ft, fisher, weight_match, ot_fusion or repair"
            ))
            .into())
        }
    };

    let dir = prepare_out(cfg)?;
    save_ck(&merged, &dir.join("merged.zjk1"))?;
    let body = serde_json::to_string_pretty(&Value::Object(report)).expect("json") + "\n";
    write_file(&dir.join("merge_report.json"), body.as_bytes())?;
    Ok(format!("{method} of {} checkpoints -> {}\n", cks.len(), dir.join("merged.zjk1").display()))
}

/// Metrics of a (possibly single-member) ensemble on one split.
pub fn evaluate(models: &[Model], x: &Tensor, y: &[usize], mode: EnsembleMode) -> zj_core::Result<Value> {
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    let logits = models.iter().map(|m| m.logits(x)).collect::<zj_core::Result<Vec<_>>>()?;
    let out = combine(&logits, mode)?;
    let probs = match mode {
        EnsembleMode::Logits => out.scores.softmax(1.0)?,
        _ => out.scores.clone(),
    };
    let classes = probs.cols();
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let mut nll = 0.0;
    for (i, (&p, &t)) in out.predictions.iter().zip(y).enumerate() {
        seen[t] += 1;
        hits[t] += usize::from(p == t);
        nll -= probs.get2(i, t).max(f64::MIN_POSITIVE).ln();
    }
    let per_class: Vec<Value> =
        (0..classes).map(|c| if seen[c] == 0 { Value::Null } else { json!(hits[c] as f64 / seen[c] as f64) }).collect();
    Ok(json!({
        "n": y.len(),
        "accuracy": hits.iter().sum::<usize>() as f64 / y.len() as f64,
        "mean_loss": nll / y.len() as f64,
        "per_class_accuracy": per_class,
    }))
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<String> {
    let paths = cfg.inputs();
    if paths.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let spec = cfg.model_spec()?;
    let plan = plan_for(cfg, &spec)?;
    let models = paths.iter().map(|p| load_model(&spec, &plan, p)).collect::<CliResult<Vec<_>>>()?;
    let split: Split = cfg.split("eval.split")?;
    let mode: EnsembleMode = cfg.require("eval.ensemble")?.parse()?;
    let (x, y) = load_dataset(cfg)?.split(split);
    let mut m = evaluate(&models, &x, &y, mode)?;
    let obj = m.as_object_mut().expect("object");
    obj.insert("split".into(), split.to_string().into());
    obj.insert("models".into(), json!(models.len()));
    obj.insert("ensemble".into(), mode.to_string().into());

    let dir = prepare_out(cfg)?;
    write_file(&dir.join("metrics.jsonl"), (m.to_string() + "\n").as_bytes())?;

    let mut t = String::new();
    let _ = writeln!(t, "{:<20} {:>12}", "metric", "value");
    let _ = writeln!(t, "{:<20} {:>12}", "split", split.to_string());
    let _ = writeln!(t, "{:<20} {:>12}", "samples", m["n"]);
    let _ = writeln!(t, "{:<20} {:>12.4}", "accuracy", m["accuracy"].as_f64().unwrap_or(f64::NAN));
    let _ = writeln!(t, "{:<20} {:>12.4}", "mean_loss", m["mean_loss"].as_f64().unwrap_or(f64::NAN));
    for (c, v) in m["per_class_accuracy"].as_array().into_iter().flatten().enumerate() {
        let v = v.as_f64().map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(t, "{:<20} {:>12}", format!("class {c}"), v);
    }
    Ok(t)
}

/// Paths, shapes and norms of each checkpoint.
pub fn cmd_inspect(paths: &[PathBuf]) -> CliResult<String> {
    if paths.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let mut t = String::new();
    for p in paths {
        let ck = load_ck(p)?;
        let total: usize = ck.entries.iter().map(|e| e.data.len()).sum();
        let _ = writeln!(t, "{}: kind {} digest {} entries {} parameters {}", p.display(), ck.kind, ck.digest_hex(), ck.entries.len(), total);
        for e in &ck.entries {
            let norm = e.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let _ = writeln!(t, "  {:<36} {:<14} {:>14.6}", e.path, format!("{:?}", e.shape), norm);
        }
    }
    Ok(t)
}

