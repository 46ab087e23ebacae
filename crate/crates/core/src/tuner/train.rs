//! Minibatch training of an adapted model under a composite objective.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{Dataset, Split};
use super::losses::{self, HintPair, RkdMode};
use super::optim::OptimState;
use super::spec::{LossKind, LossSpec, RegKind, RegSpec, TrainConfig};
use crate::architect::AdaptedModel;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{forward_graph, register_params, ActivationTrace, Checkpoint, Model, ParamPath, ParamStore, Trainable};

/// One epoch of training statistics. Term values are unweighted batch means.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Weighted objective, mean over batches.
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub val_acc: Option<f64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// One JSON object. Wall time is left out unless asked for, so that
    /// repeated runs produce identical bytes.
    pub fn to_json(&self, with_wall: bool) -> String {
        let mut m = serde_json::Map::new();
        m.insert("epoch".into(), self.epoch.into());
        m.insert("loss".into(), self.loss.into());
        for (k, v) in &self.terms {
            m.insert(k.clone(), (*v).into());
        }
        m.insert("val_acc".into(), self.val_acc.map_or(serde_json::Value::Null, Into::into));
        if with_wall {
            m.insert("wall_ms".into(), self.wall_ms.into());
        }
        serde_json::Value::Object(m).to_string()
    }
}

pub struct TrainOutcome {
    pub model: AdaptedModel,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let pred = model.predict(x)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Key {
    Model(ParamPath),
    Aux(String),
}

struct Objective<'a> {
    loss: &'a LossSpec,
    reg: &'a RegSpec,
    teacher: Option<&'a Model>,
    reference: Option<&'a ParamStore>,
    ncm_means: Option<Tensor>,
    student_hooks: BTreeSet<String>,
    teacher_hooks: Vec<String>,
    reg_paths: Vec<ParamPath>,
    sp_paths: Vec<ParamPath>,
    seed: u64,
}

fn term_names(loss: &LossSpec, reg: &RegSpec) -> Vec<String> {
    let mut names = Vec::new();
    let all = loss.terms.iter().map(|t| t.kind.name()).chain(reg.terms.iter().map(|t| t.kind.name()));
    for n in all {
        let mut name = n.to_string();
        let mut i = 1;
        while names.contains(&name) {
            i += 1;
            name = format!("{n}#{i}");
        }
        names.push(name);
    }
    names
}

fn non_finite(term: &str, v: f64) -> Error {
    Error::NonFiniteLoss { term: term.to_string(), detail: format!("value {v}") }
}

/// Turns a numeric failure inside a term into a diagnostic naming it.
fn in_term<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFiniteValue(d) => Error::NonFiniteLoss { term: term.to_string(), detail: d },
        other => other,
    })
}

impl<'a> Objective<'a> {
    fn new(
        model: &AdaptedModel,
        teacher: Option<&'a Model>,
        reference: Option<&'a ParamStore>,
        data: &Dataset,
        loss: &'a LossSpec,
        reg: &'a RegSpec,
        seed: u64,
    ) -> Result<Self> {
        if let Some(t) = loss.terms.iter().find(|t| t.kind.needs_teacher()) {
            if teacher.is_none() {
                return Err(Error::Config(format!("loss term `{}` needs a teacher model", t.kind.name())));
            }
        }
        if reg.needs_reference() && reference.is_none() {
            return Err(Error::Config("l2_sp needs pre-trained reference weights".into()));
        }
        let mut student_hooks = BTreeSet::new();
        let mut teacher_hooks = BTreeSet::new();
        for t in &loss.terms {
            match &t.kind {
                LossKind::Ce | LossKind::KdKl { .. } => {}
                LossKind::KdNcm { hook, .. } => {
                    teacher_hooks.insert(hook.clone());
                }
                LossKind::Fitnet { pairs } => {
                    for (s, th) in pairs {
                        student_hooks.insert(s.clone());
                        teacher_hooks.insert(th.clone());
                    }
                }
                LossKind::Fsp { pairs } => {
                    for (a, b) in pairs {
                        for h in [a, b] {
                            student_hooks.insert(h.clone());
                            teacher_hooks.insert(h.clone());
                        }
                    }
                }
                LossKind::RkdDist { hook } | LossKind::RkdAngle { hook } => {
                    student_hooks.insert(hook.clone());
                    teacher_hooks.insert(hook.clone());
                }
            }
        }
        for t in &reg.terms {
            if let RegKind::Bss { hook, .. } = &t.kind {
                student_hooks.insert(hook.clone());
            }
        }
        let known = model.spec.hooks();
        if let Some(h) = student_hooks.iter().find(|h| !known.contains(h)) {
            return Err(Error::MissingHook(h.clone()));
        }
        if let Some(t) = teacher {
            let tk = t.spec.hooks();
            if let Some(h) = teacher_hooks.iter().find(|h| !tk.contains(h)) {
                return Err(Error::MissingHook(h.clone()));
            }
        }

        let ncm_means = match (loss.terms.iter().find_map(|t| match &t.kind {
            LossKind::KdNcm { hook, .. } => Some(hook.clone()),
            _ => None,
        }), teacher)
        {
            (Some(hook), Some(t)) => {
                let (x, y) = data.split(Split::Train);
                let (_, tr) = t.forward(&x, &[hook.as_str()])?;
                Some(losses::class_means(&tr[&hook], &y, data.classes)?)
            }
            _ => None,
        };

        let head = model.spec.head_module();
        let mut reg_paths: Vec<ParamPath> =
            model.plan.trainable.iter().filter(|(_, t)| t.is_trainable()).map(|(p, _)| p.clone()).collect();
        let sp_paths: Vec<ParamPath> = reg_paths.iter().filter(|p| !p.starts_with(&head)).cloned().collect();
        if reg.include_new {
            reg_paths.extend(model.plan.new_trainable.iter().cloned());
        }
        if let Some(r) = reference.filter(|_| reg.needs_reference()) {
            for p in &sp_paths {
                let w = model.params.get(p)?;
                let w0 = r.get(p).map_err(|_| Error::RefMismatch(format!("reference lacks `{p}`")))?;
                if w.shape() != w0.shape() {
                    return Err(Error::RefMismatch(format!("`{p}`: {:?} vs reference {:?}", w.shape(), w0.shape())));
                }
            }
        }
        Ok(Objective {
            loss,
            reg,
            teacher,
            reference,
            ncm_means,
            student_hooks,
            teacher_hooks: teacher_hooks.into_iter().collect(),
            reg_paths,
            sp_paths,
            seed,
        })
    }

    /// Fitnet projectors for hint pairs whose widths differ.
    fn projectors(&self, model: &AdaptedModel, probe: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        let Some(teacher) = self.teacher else { return Ok(out) };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_f17e);
        for (ti, t) in self.loss.terms.iter().enumerate() {
            let LossKind::Fitnet { pairs } = &t.kind else { continue };
            let hooks: Vec<&str> = pairs.iter().map(|(s, _)| s.as_str()).collect();
            let thooks: Vec<&str> = pairs.iter().map(|(_, t)| t.as_str()).collect();
            let (_, st) = model.forward(probe, &hooks)?;
            let (_, tt) = teacher.forward(probe, &thooks)?;
            for (pi, (s, th)) in pairs.iter().enumerate() {
                let (ds, dt) = (st[s].cols(), tt[th].cols());
                if ds != dt {
                    let bound = 1.0 / (ds as f64).sqrt();
                    out.insert(format!("fitnet[{ti}].proj[{pi}]"), Tensor::uniform(&[ds, dt], bound, &mut rng));
                }
            }
        }
        Ok(out)
    }

    /// Builds the objective for one batch. Returns the weighted total and
    /// each term's unweighted value.
    fn build(
        &self,
        g: &mut Graph,
        model: &AdaptedModel,
        vars: &BTreeMap<ParamPath, Var>,
        aux: &BTreeMap<String, Var>,
        x: &Tensor,
        labels: &[usize],
        names: &[String],
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let xv = g.constant(x.clone());
        let out = in_term("forward", forward_graph(g, &model.spec, &model.plan, vars, xv, &self.student_hooks))?;
        let (t_logits, t_trace): (Option<Tensor>, ActivationTrace) = match self.teacher {
            Some(t) => {
                let hooks: Vec<&str> = self.teacher_hooks.iter().map(String::as_str).collect();
                let (l, tr) = t.forward(x, &hooks)?;
                (Some(l), tr)
            }
            None => (None, ActivationTrace::new()),
        };
        let student_act = |h: &str| out.trace.get(h).copied().ok_or_else(|| Error::MissingHook(h.to_string()));
        let teacher_act = |g: &mut Graph, h: &str| -> Result<Var> {
            let t = t_trace.get(h).ok_or_else(|| Error::MissingHook(h.to_string()))?;
            Ok(g.constant(t.clone()))
        };

        let mut values = Vec::new();
        let mut names_it = names.iter();
        for (ti, term) in self.loss.terms.iter().enumerate() {
            let name = names_it.next().expect("one name per term");
            let v = match &term.kind {
                LossKind::Ce => losses::cross_entropy(g, out.logits, labels),
                LossKind::KdKl { temperature } => {
                    let t = g.constant(t_logits.clone().expect("teacher checked"));
                    losses::kd_kl(g, out.logits, t, *temperature)
                }
                LossKind::KdNcm { temperature, tau, hook } => {
                    let feats = t_trace.get(hook).ok_or_else(|| Error::MissingHook(hook.clone()))?;
                    let means = self.ncm_means.as_ref().expect("fitted with teacher");
                    let t = g.constant(losses::ncm_teacher_logits(feats, means, *tau)?);
                    losses::kd_kl(g, out.logits, t, *temperature)
                }
                LossKind::Fitnet { pairs } => {
                    let mut hp = Vec::new();
                    for (pi, (s, th)) in pairs.iter().enumerate() {
                        hp.push(HintPair {
                            student: student_act(s)?,
                            teacher: teacher_act(g, th)?,
                            projector: aux.get(&format!("fitnet[{ti}].proj[{pi}]")).copied(),
                        });
                    }
                    losses::fitnet_loss(g, &hp)
                }
                LossKind::Fsp { pairs } => {
                    let mut fp = Vec::new();
                    for (a, b) in pairs {
                        fp.push(((student_act(a)?, student_act(b)?), (teacher_act(g, a)?, teacher_act(g, b)?)));
                    }
                    losses::fsp_loss(g, &fp)
                }
                LossKind::RkdDist { hook } => {
                    let t = teacher_act(g, hook)?;
                    losses::rkd_loss(g, student_act(hook)?, t, RkdMode::Dist)
                }
                LossKind::RkdAngle { hook } => {
                    let t = teacher_act(g, hook)?;
                    losses::rkd_loss(g, student_act(hook)?, t, RkdMode::Angle)
                }
            };
            values.push((name.clone(), in_term(name, v)?, term.weight));
        }
        for term in &self.reg.terms {
            let name = names_it.next().expect("one name per term");
            let v = match &term.kind {
                RegKind::L2 => {
                    let ws: Vec<Var> = self.reg_paths.iter().map(|p| vars[p]).collect();
                    losses::l2_penalty(g, &ws)
                }
                RegKind::L2Sp => {
                    let r = self.reference.expect("reference checked");
                    let ws: Vec<(Var, &Tensor)> = self.sp_paths.iter().map(|p| Ok((vars[p], r.get(p)?))).collect::<Result<_>>()?;
                    losses::l2_sp_penalty(g, &ws)
                }
                RegKind::SpecNorm { iters } => {
                    let ws: Vec<(String, Var)> = self
                        .reg_paths
                        .iter()
                        .filter(|p| g.shape(vars[p]).len() == 2)
                        .map(|p| (p.to_string(), vars[p]))
                        .collect();
                    losses::spectral_penalty(g, &ws, *iters, self.seed)
                }
                RegKind::Bss { k, hook } => losses::bss_penalty(g, student_act(hook)?, *k),
            };
            values.push((name.clone(), in_term(name, v)?, term.weight));
        }

        let mut total: Option<Var> = None;
        let mut terms = Vec::with_capacity(values.len());
        for (name, v, w) in values {
            let val = g.value(v).item();
            if !val.is_finite() {
                return Err(non_finite(&name, val));
            }
            let weighted = g.scale(v, w)?;
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
            terms.push((name, v));
        }
        let total = match total {
            Some(t) => t,
            None => g.constant(Tensor::zeros(&[1])),
        };
        Ok((total, terms))
    }
}

/// Index batches of one epoch; a tail shorter than 3 joins the previous batch
/// so relational terms always see enough samples.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() < 3) {
        let tail = out.pop().unwrap_or_default();
        out.last_mut().expect("at least one batch").extend(tail);
    }
    out
}

/// Trains the model's trainable parameters on the train split. The teacher
/// and reference are read-only; parameters outside the plan's trainable set
/// keep their exact bits.
pub fn train(
    model: &AdaptedModel,
    teacher: Option<&Model>,
    reference: Option<&ParamStore>,
    data: &Dataset,
    loss: &LossSpec,
    reg: &RegSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let obj = Objective::new(model, teacher, reference, data, loss, reg, cfg.seed)?;
    let names = term_names(loss, reg);
    let mut model = model.clone();
    let (probe, _) = data.gather(&data.train[..data.train.len().min(2)]);
    let mut aux = obj.projectors(&model, &probe)?;
    let mut opt: OptimState<Key> = OptimState::new(cfg.optimizer, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (val_x, val_y) = data.split(Split::Val);

    let steps_per_epoch = batches(&data.train, cfg.batch_size).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = data.train.clone();
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<String, f64> = names.iter().map(|n| (n.clone(), 0.0)).collect();
        let mut loss_sum = 0.0;
        let bs = batches(&order, cfg.batch_size);
        for idx in &bs {
            let (x, y) = data.gather(idx);
            let mut g = Graph::new();
            let vars = register_params(&mut g, &model.params, true);
            let aux_vars: BTreeMap<String, Var> = aux.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
            let (total, terms) = obj.build(&mut g, &model, &vars, &aux_vars, &x, &y, &names)?;
            let total_val = g.value(total).item();
            if !total_val.is_finite() {
                return Err(non_finite("total", total_val));
            }
            loss_sum += total_val;
            for (name, v) in &terms {
                *sums.get_mut(name).expect("named") += g.value(*v).item();
            }
            let lr = cfg.schedule.lr(cfg.lr, step, total_steps);
            step += 1;
            if !g.requires_grad(total) {
                continue;
            }
            let grads = g.backward(total)?;
            opt.begin_step();
            let trainable: Vec<(ParamPath, Trainable)> = model
                .params
                .iter()
                .map(|(p, _)| (p.clone(), model.params.trainable(p).clone()))
                .filter(|(_, t)| t.is_trainable())
                .collect();
            for (p, tr) in trainable {
                let w = model.params.get(&p)?;
                let zero = Tensor::zeros(w.shape());
                let gw = grads.get(&vars[&p]).unwrap_or(&zero);
                let nw = opt.update(&Key::Model(p.clone()), w, gw, &tr, lr).map_err(|e| {
                    Error::NonFiniteLoss { term: "update".into(), detail: format!("{p}: {e}") }
                })?;
                model.params.set(&p, nw)?;
            }
            for (k, v) in &aux_vars {
                let w = &aux[k];
                let zero = Tensor::zeros(w.shape());
                let gw = grads.get(v).unwrap_or(&zero);
                let nw = opt.update(&Key::Aux(k.clone()), w, gw, &Trainable::All, lr)?;
                aux.insert(k.clone(), nw);
            }
        }
        let nb = bs.len() as f64;
        let val_acc = if val_y.is_empty() { None } else { Some(accuracy(&model, &val_x, &val_y)?) };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / nb,
            terms: sums.into_iter().map(|(k, v)| (k, v / nb)).collect(),
            val_acc,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!("{}", rec.to_json(true));
        history.push(rec);
    }
    let checkpoint = model.params.to_checkpoint(&model.spec);
    model.params = model.params.quantized();
    Ok(TrainOutcome { model, checkpoint, history })
}
