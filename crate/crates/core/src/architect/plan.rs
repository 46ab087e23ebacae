//! Compilation of an [`AdaptSpec`] against a model into an [`AdaptationPlan`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::dsl::{AdaptSpec, Method, Mode};
use crate::error::{Error, Result};
use crate::zoo::path::{ParamPath, Segment};
use crate::zoo::{ModelSpec, Trainable};

pub const DEFAULT_LORA_RANK: usize = 4;
pub const DEFAULT_LORA_ALPHA: f64 = 4.0;
pub const DEFAULT_ADAPTER_DIM: usize = 8;
pub const DEFAULT_PREFIX_TOKENS: usize = 2;
pub const DEFAULT_PARTIAL_K: usize = 1;

/// Which side of a linear map a scale-and-shift acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InjectionKind {
    /// `y += (alpha / r) · B·A·x` with `A[r, in]`, `B[out, r]`.
    Lora { rank: usize, alpha: f64 },
    /// Residual bottleneck `z + gelu(z·down)·up`, `down[d, b]`, `up[b, d]`.
    Adapter { bottleneck: usize },
    /// Learnable key/value rows `[t, d]` prepended inside attention.
    Prefix { tokens: usize },
    /// Per-channel `gamma ⊙ v + beta`.
    Ssf { side: Side },
}

impl InjectionKind {
    pub fn name(&self) -> &'static str {
        match self {
            InjectionKind::Lora { .. } => "lora",
            InjectionKind::Adapter { .. } => "adapter",
            InjectionKind::Prefix { .. } => "prefix",
            InjectionKind::Ssf { .. } => "ssf",
        }
    }

    pub fn mergeable(&self) -> bool {
        matches!(self, InjectionKind::Lora { .. } | InjectionKind::Ssf { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub site: ParamPath,
    pub kind: InjectionKind,
    /// New parameters with their shapes, in creation order.
    pub params: Vec<(ParamPath, Vec<usize>)>,
    pub mode: Mode,
    pub instance: u32,
}

impl Injection {
    /// Path of the new parameter named `role` (`a`, `b`, `down`, `gamma`, ...).
    pub fn param(&self, role: &str) -> &ParamPath {
        self.params
            .iter()
            .map(|(p, _)| p)
            .find(|p| p.leaf() == role)
            .unwrap_or_else(|| panic!("injection at {} has no `{role}` parameter", self.site))
    }

    pub fn new_param_count(&self) -> usize {
        self.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Compiled adaptation: injected modules plus the trainability of every
/// original parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptationPlan {
    pub method: Option<Method>,
    pub injections: Vec<Injection>,
    /// Original parameters kept fixed.
    pub freeze: BTreeSet<ParamPath>,
    /// Original parameters left (fully or row-wise) trainable.
    pub trainable: BTreeMap<ParamPath, Trainable>,
    /// Parameters added by injections; always trainable.
    pub new_trainable: BTreeSet<ParamPath>,
}

impl AdaptationPlan {
    /// Full fine-tuning: no injections, everything trainable.
    pub fn full(model: &ModelSpec) -> Self {
        AdaptationPlan {
            method: None,
            injections: Vec::new(),
            freeze: BTreeSet::new(),
            trainable: model.param_shapes().into_keys().map(|p| (p, Trainable::All)).collect(),
            new_trainable: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.injections.is_empty()
    }

    /// Injections grouped by site, each group in plan order.
    pub fn by_site(&self) -> BTreeMap<&ParamPath, Vec<&Injection>> {
        let mut m: BTreeMap<&ParamPath, Vec<&Injection>> = BTreeMap::new();
        for inj in &self.injections {
            m.entry(&inj.site).or_default().push(inj);
        }
        m
    }

    pub fn trainability(&self, p: &ParamPath) -> Trainable {
        if self.new_trainable.contains(p) {
            return Trainable::All;
        }
        self.trainable.get(p).cloned().unwrap_or(Trainable::Frozen)
    }

    /// Human-readable table: one row per injection, then trainable originals
    /// and the parameter totals.
    pub fn table(&self, model: &ModelSpec) -> String {
        let shapes = model.param_shapes();
        let mut out = String::new();
        let fmt_shape = |s: &[usize]| format!("[{}]", s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","));
        let _ = writeln!(out, "{:<32} {:<8} {:<6} {:<40} {:>10}", "site", "kind", "mode", "new parameters", "trainable");
        for inj in &self.injections {
            let shapes_s: Vec<String> =
                inj.params.iter().map(|(p, s)| format!("{}{}", p.leaf(), fmt_shape(s))).collect();
            let _ = writeln!(
                out,
                "{:<32} {:<8} {:<6} {:<40} {:>10}",
                inj.site.to_string(),
                inj.kind.name(),
                inj.mode.as_str(),
                shapes_s.join(" "),
                inj.new_param_count()
            );
        }
        for (p, tr) in &self.trainable {
            let s = &shapes[p];
            let kind = match tr {
                Trainable::Rows(lo, hi) => format!("rows {lo}..{hi}"),
                _ => "full".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<32} {:<8} {:<6} {:<40} {:>10}",
                p.to_string(),
                "tune",
                "-",
                format!("{} {}", fmt_shape(s), kind),
                tr.count(s)
            );
        }
        let (tr, frozen, total) = self.counts(model);
        let _ = writeln!(out, "injections: {}", self.injections.len());
        let _ = writeln!(out, "trainable parameters: {tr}");
        let _ = writeln!(out, "frozen parameters: {frozen}");
        let _ = writeln!(out, "total parameters: {total}");
        out
    }

    /// (trainable, frozen, total) element counts, new parameters included.
    pub fn counts(&self, model: &ModelSpec) -> (usize, usize, usize) {
        let shapes = model.param_shapes();
        let orig_total: usize = shapes.values().map(|s| s.iter().product::<usize>()).sum();
        let orig_tr: usize = self.trainable.iter().map(|(p, t)| t.count(&shapes[p])).sum();
        let new: usize = self.injections.iter().map(Injection::new_param_count).sum();
        (orig_tr + new, orig_total - orig_tr, orig_total + new)
    }
}

fn hp_usize(spec: &AdaptSpec, key: &str, default: usize, min: usize) -> Result<usize> {
    match spec.hyperparams.get(key) {
        None => Ok(default),
        Some(&v) if v.fract() == 0.0 && v >= min as f64 => Ok(v as usize),
        Some(&v) => Err(Error::InvalidHyperparam(format!("{key}={v} must be an integer >= {min}"))),
    }
}

fn hp_f64(spec: &AdaptSpec, key: &str, default: f64) -> Result<f64> {
    match spec.hyperparams.get(key) {
        None => Ok(default),
        Some(&v) if v > 0.0 => Ok(v),
        Some(&v) => Err(Error::InvalidHyperparam(format!("{key}={v} must be > 0"))),
    }
}

const KNOWN_KEYS: &[(Method, &[&str])] = &[
    (Method::Lora, &["r", "alpha"]),
    (Method::Adapter, &["dim"]),
    (Method::Prefix, &["tokens"]),
    (Method::BitFit, &[]),
    (Method::Ssf, &[]),
    (Method::LinearProbe, &[]),
    (Method::PartialK, &["k"]),
];

fn seg(name: &str, index: Option<usize>) -> Segment {
    Segment { name: name.to_string(), index }
}

/// Module prefixes (paths with a `.weight` child) of the model.
fn linear_modules(shapes: &BTreeMap<ParamPath, Vec<usize>>) -> BTreeSet<ParamPath> {
    shapes
        .iter()
        .filter(|(p, s)| p.leaf() == "weight" && s.len() == 2)
        .filter_map(|(p, _)| p.parent())
        .collect()
}

fn norm_modules(shapes: &BTreeMap<ParamPath, Vec<usize>>) -> BTreeSet<ParamPath> {
    shapes.keys().filter(|p| p.leaf() == "gamma").filter_map(|p| p.parent()).collect()
}

/// Every path a pattern could name: parameters plus their module prefixes.
fn candidates(shapes: &BTreeMap<ParamPath, Vec<usize>>) -> BTreeSet<ParamPath> {
    let mut c = BTreeSet::new();
    for p in shapes.keys() {
        c.extend(p.prefixes());
        c.insert(p.clone());
    }
    c
}

/// Resolves the model stage (`blocks[i]` or `layers[i]`) containing `p`.
fn stage_of(p: &ParamPath) -> Option<ParamPath> {
    let first = &p.segments()[0];
    (matches!(first.name.as_str(), "blocks" | "layers") && first.index.is_some())
        .then(|| ParamPath(vec![first.clone()]))
}

pub fn compile_plan(spec: &AdaptSpec, model: &ModelSpec) -> Result<AdaptationPlan> {
    model.validate()?;
    let allowed = KNOWN_KEYS.iter().find(|(m, _)| *m == spec.method).map(|(_, k)| *k).unwrap_or(&[]);
    if let Some(k) = spec.hyperparams.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::InvalidHyperparam(format!("`{k}` is not a {} hyperparameter", spec.method.name())));
    }
    let shapes = model.param_shapes();
    let all: BTreeSet<ParamPath> = shapes.keys().cloned().collect();
    let head = model.head_module();
    let head_params: BTreeSet<ParamPath> = all.iter().filter(|p| p.starts_with(&head)).cloned().collect();
    let cands = candidates(&shapes);

    let mut plan = AdaptationPlan { method: Some(spec.method), ..Default::default() };
    let mut trainable: BTreeMap<ParamPath, Trainable> =
        head_params.iter().map(|p| (p.clone(), Trainable::All)).collect();

    let hook_free = matches!(spec.method, Method::LinearProbe | Method::PartialK);
    if hook_free && !spec.hooks.is_empty() {
        return Err(Error::IncompatibleSite {
            site: spec.hooks[0].pattern.to_string(),
            reason: format!("{} takes no hooks", spec.method.name()),
        });
    }
    if spec.hooks.is_empty() && !matches!(spec.method, Method::LinearProbe | Method::PartialK | Method::BitFit) {
        return Err(Error::NoMatchingSite(format!("{} requires at least one hook", spec.method.name())));
    }

    match spec.method {
        Method::LinearProbe => {}
        Method::PartialK => {
            let k = hp_usize(spec, "k", DEFAULT_PARTIAL_K, 0)?;
            let stages = model.stages();
            let take = k.min(stages.len());
            for stage in &stages[stages.len() - take..] {
                for prefix in stage {
                    for p in all.iter().filter(|p| p.starts_with(prefix)) {
                        trainable.insert(p.clone(), Trainable::All);
                    }
                }
            }
        }
        Method::BitFit => {
            let d = match model {
                ModelSpec::MiniVit(v) => v.dim,
                ModelSpec::Mlp { .. } => 0,
            };
            let biases: Vec<(ParamPath, Trainable)> = all
                .iter()
                .filter_map(|p| {
                    let s = p.to_string();
                    match model {
                        ModelSpec::MiniVit(_) if s.ends_with(".attn.qkv.bias") => {
                            Some((p.clone(), Trainable::Rows(0, d)))
                        }
                        ModelSpec::MiniVit(_) if s.ends_with(".mlp.fc1.bias") => Some((p.clone(), Trainable::All)),
                        ModelSpec::Mlp { .. } if p.leaf() == "bias" => Some((p.clone(), Trainable::All)),
                        _ => None,
                    }
                })
                .collect();
            let mut selected = Vec::new();
            if spec.hooks.is_empty() {
                selected = biases;
            } else {
                for hook in &spec.hooks {
                    let hit: Vec<_> = biases
                        .iter()
                        .filter(|(p, _)| {
                            cands.iter().any(|c| hook.pattern.matches(c) && p.starts_with(c))
                        })
                        .cloned()
                        .collect();
                    if hit.is_empty() {
                        return Err(Error::NoMatchingSite(hook.pattern.to_string()));
                    }
                    selected.extend(hit);
                }
            }
            for (p, t) in selected {
                trainable.insert(p, t);
            }
        }
        Method::Lora | Method::Ssf | Method::Adapter | Method::Prefix => {
            let linears = linear_modules(&shapes);
            let norms = norm_modules(&shapes);
            for hook in &spec.hooks {
                let matched: Vec<&ParamPath> = cands.iter().filter(|c| hook.pattern.matches(c)).collect();
                let mut sites: BTreeSet<ParamPath> = BTreeSet::new();
                for m in &matched {
                    let site = resolve_site(spec.method, m, &linears, &norms, model)?;
                    sites.insert(site);
                }
                if sites.is_empty() {
                    return Err(Error::NoMatchingSite(hook.pattern.to_string()));
                }
                for site in sites {
                    let inj = build_injection(spec, hook.mode, hook.instance.unwrap_or(0), &site, &shapes, model)?;
                    if plan.injections.iter().any(|i| i.params == inj.params) {
                        // the same instance reached twice through overlapping patterns
                        continue;
                    }
                    plan.injections.push(inj);
                }
            }
        }
    }

    for inj in &plan.injections {
        for (p, _) in &inj.params {
            plan.new_trainable.insert(p.clone());
        }
    }
    plan.freeze = all.iter().filter(|p| !trainable.contains_key(*p)).cloned().collect();
    plan.trainable = trainable;
    debug_assert!(plan.new_trainable.iter().all(|p| !all.contains(p)));
    Ok(plan)
}

fn incompatible(site: &ParamPath, reason: &str) -> Error {
    Error::IncompatibleSite { site: site.to_string(), reason: reason.to_string() }
}

fn resolve_site(
    method: Method,
    matched: &ParamPath,
    linears: &BTreeSet<ParamPath>,
    norms: &BTreeSet<ParamPath>,
    model: &ModelSpec,
) -> Result<ParamPath> {
    match method {
        Method::Lora | Method::Ssf => {
            if linears.contains(matched) || (method == Method::Ssf && norms.contains(matched)) {
                return Ok(matched.clone());
            }
            if matched.leaf() == "weight" {
                if let Some(parent) = matched.parent().filter(|p| linears.contains(p)) {
                    return Ok(parent);
                }
            }
            Err(incompatible(
                matched,
                if method == Method::Lora {
                    "lora attaches to 2-D weight matrices"
                } else {
                    "ssf attaches to linear or norm modules"
                },
            ))
        }
        Method::Adapter => stage_of(matched)
            .ok_or_else(|| incompatible(matched, "adapters attach to blocks[i] (vit) or layers[i] (mlp)")),
        Method::Prefix => match (model, stage_of(matched)) {
            (ModelSpec::MiniVit(_), Some(s)) => Ok(s),
            _ => Err(incompatible(matched, "prefix tokens need a transformer block")),
        },
        _ => unreachable!("hook-free methods never resolve sites"),
    }
}

fn build_injection(
    spec: &AdaptSpec,
    mode: Mode,
    instance: u32,
    site: &ParamPath,
    shapes: &BTreeMap<ParamPath, Vec<usize>>,
    model: &ModelSpec,
) -> Result<Injection> {
    let sub = |name: &str| -> ParamPath {
        let mut segs = site.segments().to_vec();
        segs.push(seg(name, Some(instance as usize)));
        ParamPath(segs)
    };
    let with = |base: &ParamPath, leaf: &str| base.child(leaf, None);
    let (kind, params) = match spec.method {
        Method::Lora => {
            if mode != Mode::InOut {
                return Err(incompatible(site, "lora runs parallel to its site; use {inout}"));
            }
            let rank = hp_usize(spec, "r", DEFAULT_LORA_RANK, 1)?;
            let alpha = hp_f64(spec, "alpha", DEFAULT_LORA_ALPHA)?;
            let w = &shapes[&site.child("weight", None)];
            let base = sub("lora");
            (
                InjectionKind::Lora { rank, alpha },
                vec![(with(&base, "a"), vec![rank, w[1]]), (with(&base, "b"), vec![w[0], rank])],
            )
        }
        Method::Ssf => {
            let is_norm = shapes.contains_key(&site.child("gamma", None));
            let side = match mode {
                Mode::In if is_norm => return Err(incompatible(site, "ssf before a norm cannot be folded")),
                Mode::In => Side::Input,
                Mode::Out | Mode::InOut => Side::Output,
            };
            let width = if is_norm {
                shapes[&site.child("gamma", None)][0]
            } else {
                let w = &shapes[&site.child("weight", None)];
                if side == Side::Input {
                    w[1]
                } else {
                    w[0]
                }
            };
            let base = sub("ssf");
            (
                InjectionKind::Ssf { side },
                vec![(with(&base, "gamma"), vec![width]), (with(&base, "beta"), vec![width])],
            )
        }
        Method::Adapter => {
            let b = hp_usize(spec, "dim", DEFAULT_ADAPTER_DIM, 1)?;
            let width = match model {
                ModelSpec::MiniVit(v) => v.dim,
                ModelSpec::Mlp { .. } => shapes[&site.child("bias", None)][0],
            };
            let base = sub("adapter");
            (
                InjectionKind::Adapter { bottleneck: b },
                vec![(with(&base, "down"), vec![width, b]), (with(&base, "up"), vec![b, width])],
            )
        }
        Method::Prefix => {
            let t = hp_usize(spec, "tokens", DEFAULT_PREFIX_TOKENS, 1)?;
            let d = match model {
                ModelSpec::MiniVit(v) => v.dim,
                ModelSpec::Mlp { .. } => unreachable!("resolve_site rejects mlp prefix sites"),
            };
            let base = sub("prefix");
            (InjectionKind::Prefix { tokens: t }, vec![(with(&base, "key"), vec![t, d]), (with(&base, "value"), vec![t, d])])
        }
        _ => unreachable!(),
    };
    Ok(Injection { site: site.clone(), kind, params, mode, instance })
}
