//! Declarative loss, regularizer and optimizer settings, with the compact
//! text form `name:λ[:key=value,...]` joined by `;`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::optim::{Optimizer, Schedule};
use crate::error::{Error, Result};

pub const DEFAULT_KD_TEMPERATURE: f64 = 4.0;
pub const DEFAULT_NCM_TAU: f64 = 1.0;
pub const DEFAULT_SPECTRAL_ITERS: usize = 20;
pub const FEATURE_HOOK: &str = "feature";

/// Student hook → teacher hook (fitnet) or earlier → later hook (fsp).
pub type HookPair = (String, String);

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    Ce,
    KdKl { temperature: f64 },
    /// KD against nearest-class-mean logits over teacher features at `hook`.
    KdNcm { temperature: f64, tau: f64, hook: String },
    Fitnet { pairs: Vec<HookPair> },
    Fsp { pairs: Vec<HookPair> },
    RkdDist { hook: String },
    RkdAngle { hook: String },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::KdKl { .. } => "kd_kl",
            LossKind::KdNcm { .. } => "kd_ncm",
            LossKind::Fitnet { .. } => "fitnet",
            LossKind::Fsp { .. } => "fsp",
            LossKind::RkdDist { .. } => "rkd_dist",
            LossKind::RkdAngle { .. } => "rkd_angle",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, LossKind::Ce)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegKind {
    L2,
    L2Sp,
    SpecNorm { iters: usize },
    Bss { k: usize, hook: String },
}

impl RegKind {
    pub fn name(&self) -> &'static str {
        match self {
            RegKind::L2 => "l2",
            RegKind::L2Sp => "l2_sp",
            RegKind::SpecNorm { .. } => "spec_norm",
            RegKind::Bss { .. } => "bss",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Term<K> {
    pub kind: K,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossSpec {
    pub terms: Vec<Term<LossKind>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegSpec {
    pub terms: Vec<Term<RegKind>>,
    /// Also regularize parameters added by the adaptation plan.
    pub include_new: bool,
}

impl LossSpec {
    pub fn ce() -> Self {
        LossSpec { terms: vec![Term { kind: LossKind::Ce, weight: 1.0 }] }
    }

    pub fn needs_teacher(&self) -> bool {
        self.terms.iter().any(|t| t.kind.needs_teacher())
    }
}

impl RegSpec {
    pub fn needs_reference(&self) -> bool {
        self.terms.iter().any(|t| t.kind == RegKind::L2Sp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            lr: 0.05,
            weight_decay: 0.0,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr={} must be > 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

struct Params {
    term: String,
    map: BTreeMap<String, String>,
}

impl Params {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .ok()
                .filter(|x| *x > 0.0 && x.is_finite())
                .ok_or_else(|| Error::Config(format!("{}: `{key}={v}` must be a positive number", self.term))),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&x| x >= 1)
                .ok_or_else(|| Error::Config(format!("{}: `{key}={v}` must be an integer >= 1", self.term))),
        }
    }

    fn hook(&mut self) -> String {
        self.take("hook").unwrap_or_else(|| FEATURE_HOOK.to_string())
    }

    fn pairs(&mut self) -> Result<Vec<HookPair>> {
        let raw = self.take("pairs").ok_or_else(|| Error::Config(format!("{} needs pairs=a>b[+c>d...]", self.term)))?;
        raw.split('+')
            .map(|p| match p.split_once('>') {
                Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                _ => Err(Error::Config(format!("{}: bad hook pair `{p}`", self.term))),
            })
            .collect()
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Config(format!("{}: unknown parameter `{k}`", self.term))),
            None => Ok(()),
        }
    }
}

/// Splits `name:λ[:k=v,...]` into its parts.
fn split_term(text: &str) -> Result<(String, f64, Params)> {
    let mut parts = text.splitn(3, ':');
    let name = parts.next().unwrap_or_default().trim().to_string();
    let weight = parts
        .next()
        .ok_or_else(|| Error::Config(format!("term `{text}` needs a weight: name:λ")))?
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|w| *w >= 0.0 && w.is_finite())
        .ok_or_else(|| Error::Config(format!("term `{text}`: weight must be a number >= 0")))?;
    let mut map = BTreeMap::new();
    if let Some(rest) = parts.next().filter(|r| !r.trim().is_empty()) {
        for kv in rest.split(',') {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("term `{name}`: expected key=value, got `{kv}`")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("term `{name}`: duplicate key `{k}`")));
            }
        }
    }
    Ok((name.clone(), weight, Params { term: name, map }))
}

fn terms(text: &str) -> impl Iterator<Item = &str> {
    text.split(';').map(str::trim).filter(|t| !t.is_empty())
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for t in terms(text) {
            let (name, weight, mut p) = split_term(t)?;
            let kind = match name.as_str() {
                "ce" => LossKind::Ce,
                "kd_kl" => LossKind::KdKl { temperature: p.f64("T", DEFAULT_KD_TEMPERATURE)? },
                "kd_ncm" => LossKind::KdNcm {
                    temperature: p.f64("T", DEFAULT_KD_TEMPERATURE)?,
                    tau: p.f64("tau", DEFAULT_NCM_TAU)?,
                    hook: p.hook(),
                },
                "fitnet" => LossKind::Fitnet { pairs: p.pairs()? },
                "fsp" => LossKind::Fsp { pairs: p.pairs()? },
                "rkd_dist" => LossKind::RkdDist { hook: p.hook() },
                "rkd_angle" => LossKind::RkdAngle { hook: p.hook() },
                other => return Err(Error::Config(format!("unknown loss term `{other}`"))),
            };
            p.finish()?;
            out.push(Term { kind, weight });
        }
        Ok(LossSpec { terms: out })
    }
}

impl FromStr for RegSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for t in terms(text) {
            let (name, weight, mut p) = split_term(t)?;
            let kind = match name.as_str() {
                "l2" => RegKind::L2,
                "l2_sp" => RegKind::L2Sp,
                "spec_norm" => RegKind::SpecNorm { iters: p.usize("iters", DEFAULT_SPECTRAL_ITERS)? },
                "bss" => RegKind::Bss { k: p.usize("k", 1)?, hook: p.hook() },
                other => return Err(Error::Config(format!("unknown regularizer `{other}`"))),
            };
            p.finish()?;
            out.push(Term { kind, weight });
        }
        Ok(RegSpec { terms: out, include_new: false })
    }
}

fn pairs_str(p: &[HookPair]) -> String {
    p.iter().map(|(a, b)| format!("{a}>{b}")).collect::<Vec<_>>().join("+")
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| {
                let extra = match &t.kind {
                    LossKind::Ce => String::new(),
                    LossKind::KdKl { temperature } => format!(":T={temperature}"),
                    LossKind::KdNcm { temperature, tau, hook } => format!(":T={temperature},tau={tau},hook={hook}"),
                    LossKind::Fitnet { pairs } | LossKind::Fsp { pairs } => format!(":pairs={}", pairs_str(pairs)),
                    LossKind::RkdDist { hook } | LossKind::RkdAngle { hook } => format!(":hook={hook}"),
                };
                format!("{}:{}{extra}", t.kind.name(), t.weight)
            })
            .collect();
        f.write_str(&parts.join(";"))
    }
}

impl fmt::Display for RegSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| {
                let extra = match &t.kind {
                    RegKind::L2 | RegKind::L2Sp => String::new(),
                    RegKind::SpecNorm { iters } => format!(":iters={iters}"),
                    RegKind::Bss { k, hook } => format!(":k={k},hook={hook}"),
                };
                format!("{}:{}{extra}", t.kind.name(), t.weight)
            })
            .collect();
        f.write_str(&parts.join(";"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_spec_round_trip() {
        let text = "ce:1;kd_kl:0.5:T=2;fitnet:1:pairs=layers[0].out>layers[1].out+feature>feature;rkd_angle:2";
        let spec: LossSpec = text.parse().unwrap();
        assert_eq!(spec.terms.len(), 4);
        assert_eq!(spec.terms[1].kind, LossKind::KdKl { temperature: 2.0 });
        assert_eq!(spec.terms[3].kind, LossKind::RkdAngle { hook: "feature".into() });
        let again: LossSpec = spec.to_string().parse().unwrap();
        assert_eq!(again, spec);
        assert!(spec.needs_teacher());
        assert!(!LossSpec::ce().needs_teacher());
    }

    #[test]
    fn reg_spec_round_trip() {
        let spec: RegSpec = "l2:0.01;l2_sp:0.1;bss:0.001:k=2;spec_norm:1e-3".parse().unwrap();
        assert_eq!(spec.terms[2].kind, RegKind::Bss { k: 2, hook: "feature".into() });
        assert_eq!(spec.to_string().parse::<RegSpec>().unwrap(), spec);
        assert!(spec.needs_reference());
    }

    #[test]
    fn rejects_bad_terms() {
        for bad in ["ce", "ce:-1", "xx:1", "kd_kl:1:T=0", "kd_kl:1:temp=2", "fitnet:1", "fitnet:1:pairs=a", "ce:1:a=1,a=2"] {
            assert!(matches!(bad.parse::<LossSpec>(), Err(Error::Config(_))), "{bad}");
        }
        assert!("bss:1:k=0".parse::<RegSpec>().is_err());
    }
}
