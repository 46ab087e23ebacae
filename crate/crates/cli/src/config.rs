//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment line. Values may be wrapped in
//! double quotes (needed for the architect string, which contains `#`-free but
//! otherwise arbitrary text); inside quotes `\"` and `\\` are the only escapes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use zj_core::tuner::{LossSpec, Optimizer, RegSpec, Schedule, Split, TrainConfig};
use zj_core::zoo::{Activation, ModelSpec, VitSpec};
use zj_core::{Error, Result};

/// Every accepted key with its default, if it has one.
const KEYS: &[(&str, Option<&str>)] = &[
    ("seed", Some("0")),
    ("out_dir", Some("out")),
    ("inputs", None),
    ("pretrained_weights", None),
    ("model.kind", None),
    ("model.widths", None),
    ("model.activation", Some("relu")),
    ("model.in_dim", None),
    ("model.dim", None),
    ("model.blocks", None),
    ("model.heads", None),
    ("model.mlp_dim", None),
    ("model.classes", None),
    ("model.seq_len", None),
    ("teacher.ckpt", None),
    ("teacher.kind", None),
    ("teacher.widths", None),
    ("teacher.activation", None),
    ("teacher.in_dim", None),
    ("teacher.dim", None),
    ("teacher.blocks", None),
    ("teacher.heads", None),
    ("teacher.mlp_dim", None),
    ("teacher.classes", None),
    ("teacher.seq_len", None),
    ("data.source", None),
    ("data.seed", None),
    ("data.k", Some("3")),
    ("data.d", Some("2")),
    ("data.n", Some("300")),
    ("data.sigma", Some("0.1")),
    ("data.delta", Some("1.0")),
    ("data.noise", Some("0.1")),
    ("data.vocab", Some("8")),
    ("data.seq", Some("4")),
    ("data.images", None),
    ("data.labels", None),
    ("data.path", None),
    ("data.label_col", None),
    ("architect.config", None),
    ("tuner.loss", Some("ce:1")),
    ("tuner.reg", Some("")),
    ("tuner.reg_new", Some("false")),
    ("tuner.optimizer", Some("sgd")),
    ("tuner.momentum", Some("0.9")),
    ("tuner.beta1", Some("0.9")),
    ("tuner.beta2", Some("0.999")),
    ("tuner.eps", Some("1e-8")),
    ("tuner.lr", Some("0.05")),
    ("tuner.weight_decay", Some("0")),
    ("tuner.epochs", Some("20")),
    ("tuner.batch_size", Some("32")),
    ("tuner.schedule", Some("constant")),
    ("merger.method", Some("soup")),
    ("merger.alpha", Some("0.5")),
    ("merger.split", Some("val")),
    ("merger.eps", Some("0.05")),
    ("merger.iters", Some("1000")),
    ("merger.sweeps", Some("20")),
    ("merger.align", Some("none")),
    ("merger.fisher_samples", Some("64")),
    ("merger.fisher_labels", Some("model")),
    ("merger.lambdas", None),
    ("merger.eps_floor", Some("1e-12")),
    ("eval.split", Some("test")),
    ("eval.ensemble", Some("prob")),
];

/// Keys whose value is always written quoted.
const QUOTED: &[&str] = &["architect.config", "tuner.loss", "tuner.reg"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn unquote(raw: &str, line: usize) -> Result<String> {
    let Some(inner) = raw.strip_prefix('"') else {
        return Ok(raw.to_string());
    };
    let mut out = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(e @ ('"' | '\\')) => out.push(e),
                _ => return Err(Error::Config(format!("line {line}: bad escape in quoted value"))),
            },
            '"' => {
                if chars.as_str().trim().is_empty() {
                    return Ok(out);
                }
                return Err(Error::Config(format!("line {line}: text after closing quote")));
            }
            c => out.push(c),
        }
    }
    Err(Error::Config(format!("line {line}: unterminated quote")))
}

fn quote(v: &str) -> String {
    format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            let k = k.trim();
            if !known(k) {
                return Err(Error::Config(format!("line {line_no}: unknown key `{k}`")));
            }
            if cfg.values.contains_key(k) {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{k}`")));
            }
            cfg.values.insert(k.to_string(), unquote(v.trim(), line_no)?);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Explicit value, else the key's default.
    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key), "{key}");
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d))
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.trim().parse().map_err(|e| Error::Config(format!("{key} = {raw}: {e}")))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir").unwrap_or("out"))
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        self.list("inputs").into_iter().map(PathBuf::from).collect()
    }

    pub fn pretrained(&self) -> Vec<PathBuf> {
        self.list("pretrained_weights").into_iter().map(PathBuf::from).collect()
    }

    fn spec_with_prefix(&self, prefix: &str) -> Result<ModelSpec> {
        let key = |name: &str| format!("{prefix}.{name}");
        let num = |name: &str| self.parsed::<usize>(&key(name));
        match self.require(&key("kind"))? {
            "mlp" => {
                let widths = self
                    .require(&key("widths"))?
                    .split(',')
                    .map(|w| w.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config(format!("{}: {e}", key("widths"))))?;
                let act = Activation::parse(self.get(&key("activation")).unwrap_or("relu"))?;
                ModelSpec::mlp(&widths, act)
            }
            "mini_vit" => ModelSpec::vit(VitSpec {
                in_dim: num("in_dim")?,
                dim: num("dim")?,
                blocks: num("blocks")?,
                heads: num("heads")?,
                mlp_dim: num("mlp_dim")?,
                classes: num("classes")?,
                seq_len: num("seq_len")?,
            }),
            other => Err(Error::Config(format!("{} = {other}: expected mlp or mini_vit", key("kind")))),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.spec_with_prefix("model")
    }

    /// The teacher's own spec when one is given, else the student's.
    pub fn teacher_spec(&self) -> Result<ModelSpec> {
        if self.is_set("teacher.kind") {
            self.spec_with_prefix("teacher")
        } else {
            self.model_spec()
        }
    }

    pub fn loss(&self) -> Result<LossSpec> {
        self.require("tuner.loss")?.parse()
    }

    pub fn reg(&self) -> Result<RegSpec> {
        let mut r: RegSpec = self.get("tuner.reg").unwrap_or("").parse()?;
        r.include_new = self.parsed("tuner.reg_new")?;
        Ok(r)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.require("tuner.optimizer")? {
            "sgd" => Optimizer::Sgd { momentum: self.parsed("tuner.momentum")? },
            "adamw" => Optimizer::AdamW {
                beta1: self.parsed("tuner.beta1")?,
                beta2: self.parsed("tuner.beta2")?,
                eps: self.parsed("tuner.eps")?,
            },
            other => return Err(Error::Config(format!("tuner.optimizer = {other}: expected sgd or adamw"))),
        };
        let schedule = match self.require("tuner.schedule")? {
            "constant" => Schedule::Constant,
            "cosine" => Schedule::Cosine,
            other => return Err(Error::Config(format!("tuner.schedule = {other}: expected constant or cosine"))),
        };
        let cfg = TrainConfig {
            optimizer,
            lr: self.parsed("tuner.lr")?,
            weight_decay: self.parsed("tuner.weight_decay")?,
            epochs: self.parsed("tuner.epochs")?,
            batch_size: self.parsed("tuner.batch_size")?,
            seed: self.seed()?,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split(&self, key: &str) -> Result<Split> {
        self.require(key)?.parse()
    }

    pub fn lambdas(&self, n: usize) -> Result<Vec<f64>> {
        let raw = self.list("merger.lambdas");
        if raw.is_empty() {
            return Ok(vec![1.0; n]);
        }
        let l = raw
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("merger.lambdas: {e}")))?;
        if l.len() != n {
            return Err(Error::Config(format!("merger.lambdas has {} values for {n} checkpoints", l.len())));
        }
        Ok(l)
    }

    /// Explicit settings plus every default, one per line in key order.
    pub fn resolved(&self) -> String {
        let mut all: BTreeMap<&str, &str> = KEYS.iter().filter_map(|(k, d)| d.map(|d| (*k, d))).collect();
        for (k, v) in &self.values {
            all.insert(k, v);
        }
        let mut out = String::new();
        for (k, v) in all {
            let needs_quotes = QUOTED.contains(&k) || v.contains('"') || v.starts_with(' ') || v.ends_with(' ');
            let v = if needs_quotes { quote(v) } else { v.to_string() };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoted_dsl_round_trips() {
        let text = "architect.config = \"lora:mode=inout,r=4@blocks[*].attn.qkv\"\nseed = 3\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.get("architect.config"), Some("lora:mode=inout,r=4@blocks[*].attn.qkv"));
        assert_eq!(c.seed().unwrap(), 3);
        assert_eq!(RunConfig::parse(&c.resolved()).unwrap().resolved(), c.resolved());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("model.depth = 3"), Err(Error::Config(m)) if m.contains("unknown key")));
        assert!(matches!(RunConfig::parse("seed=1\nseed=2"), Err(Error::Config(m)) if m.contains("duplicate")));
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("architect.config = \"abc").is_err());
    }

    #[test]
    fn defaults_fill_the_resolved_view() {
        let c = RunConfig::parse("# nothing\n\nmodel.kind = mlp\nmodel.widths = 2, 8, 3\n").unwrap();
        let r = c.resolved();
        assert!(r.contains("tuner.lr = 0.05\n"));
        assert!(r.contains("tuner.loss = \"ce:1\"\n"));
        assert_eq!(c.model_spec().unwrap(), ModelSpec::mlp(&[2, 8, 3], Activation::Relu).unwrap());
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.lambdas(2).unwrap(), vec![1.0, 1.0]);
    }
}
