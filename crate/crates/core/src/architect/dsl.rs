//! One-line adaptation configs such as
//! `(LoRA.adapt|r=4):->(blocks[0:12].attn.qkv){inout1}`.
//!
//! ```text
//! config  := decl ':' chain?
//! decl    := '(' NAME '.' NAME ('|' kv (',' kv)*)? ')'      kv := NAME '=' NUMBER
//! chain   := ('->' hook)+
//! hook    := '(' path ')' '{' MODE INT? '}'
//! path    := seg ('.' seg)*       seg := NAME ('[' (INT | INT ':' INT | '*') ']')?
//! MODE    := 'in' | 'out' | 'inout'
//! ```
//!
//! No whitespace is accepted anywhere. Ranges are half-open.

use std::collections::BTreeMap;
use std::fmt;

use crate::zoo::path::{scan_int, scan_name, scan_pattern, PathPattern, ScanError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Lora,
    Adapter,
    Prefix,
    BitFit,
    Ssf,
    LinearProbe,
    PartialK,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Lora,
        Method::Adapter,
        Method::Prefix,
        Method::BitFit,
        Method::Ssf,
        Method::LinearProbe,
        Method::PartialK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "LoRA",
            Method::Adapter => "Adapter",
            Method::Prefix => "Prefix",
            Method::BitFit => "BitFit",
            Method::Ssf => "SSF",
            Method::LinearProbe => "LinearProbe",
            Method::PartialK => "PartialK",
        }
    }

    /// Case-insensitive lookup, accepting a few common aliases.
    pub fn from_name(s: &str) -> Option<Method> {
        let l = s.to_ascii_lowercase();
        Some(match l.as_str() {
            "lora" => Method::Lora,
            "adapter" => Method::Adapter,
            "prefix" | "prompt" | "vpt" => Method::Prefix,
            "bitfit" => Method::BitFit,
            "ssf" => Method::Ssf,
            "linearprobe" | "linear_probe" | "linear" => Method::LinearProbe,
            "partialk" | "partial_k" | "partial" => Method::PartialK,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    In,
    Out,
    InOut,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::In => "in",
            Mode::Out => "out",
            Mode::InOut => "inout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hook {
    pub pattern: PathPattern,
    pub mode: Mode,
    pub instance: Option<u32>,
}

/// Parsed config.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSpec {
    pub method: Method,
    pub action: String,
    pub hyperparams: BTreeMap<String, f64>,
    pub hooks: Vec<Hook>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("parse error at byte {offset}: expected {}, found {found}", expected.join(" | "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<String>,
    pub found: String,
}

impl ParseError {
    /// The input with a caret under the failing byte.
    pub fn caret(&self, input: &str) -> String {
        format!("{input}\n{}^", " ".repeat(self.offset))
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, offset: usize, expected: &[&str]) -> ParseError {
        let found = match self.src.get(offset) {
            None => "end of input".to_string(),
            Some(_) => {
                let rest = String::from_utf8_lossy(&self.src[offset..]);
                format!("`{}`", rest.chars().next().unwrap())
            }
        };
        ParseError { offset, expected: expected.iter().map(|s| s.to_string()).collect(), found }
    }

    fn scan(&self, e: ScanError) -> ParseError {
        self.err(e.offset, &e.expected)
    }

    fn expect(&mut self, tok: &'static str) -> Result<(), ParseError> {
        if self.src[self.pos..].starts_with(tok.as_bytes()) {
            self.pos += tok.len();
            Ok(())
        } else {
            Err(self.err(self.pos, &[tok]))
        }
    }

    fn peek(&self, tok: &str) -> bool {
        self.src[self.pos..].starts_with(tok.as_bytes())
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let start = self.pos;
        let s = self.src;
        let mut p = self.pos;
        if p < s.len() && (s[p] == b'-' || s[p] == b'+') {
            p += 1;
        }
        let digits_start = p;
        while p < s.len() && s[p].is_ascii_digit() {
            p += 1;
        }
        if p == digits_start {
            return Err(self.err(start, &["NUMBER"]));
        }
        if p < s.len() && s[p] == b'.' {
            p += 1;
            let frac = p;
            while p < s.len() && s[p].is_ascii_digit() {
                p += 1;
            }
            if p == frac {
                return Err(self.err(p, &["digit"]));
            }
        }
        if p < s.len() && (s[p] == b'e' || s[p] == b'E') {
            p += 1;
            if p < s.len() && (s[p] == b'-' || s[p] == b'+') {
                p += 1;
            }
            let exp = p;
            while p < s.len() && s[p].is_ascii_digit() {
                p += 1;
            }
            if p == exp {
                return Err(self.err(p, &["digit"]));
            }
        }
        let text = std::str::from_utf8(&s[start..p]).unwrap();
        let v: f64 = text.parse().map_err(|_| self.err(start, &["NUMBER"]))?;
        if !v.is_finite() {
            return Err(self.err(start, &["finite NUMBER"]));
        }
        self.pos = p;
        Ok(v)
    }

    fn decl(&mut self) -> Result<(Method, String, BTreeMap<String, f64>), ParseError> {
        self.expect("(")?;
        let at = self.pos;
        let name = scan_name(self.src, &mut self.pos).map_err(|e| self.err(e.offset, &["method NAME"]))?;
        let method = Method::from_name(&name).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            self.err(at, &names)
        })?;
        self.expect(".")?;
        let action = scan_name(self.src, &mut self.pos).map_err(|e| self.err(e.offset, &["action NAME"]))?;
        let mut hp = BTreeMap::new();
        if self.peek("|") {
            self.pos += 1;
            loop {
                let at = self.pos;
                let key = scan_name(self.src, &mut self.pos).map_err(|e| self.err(e.offset, &["NAME"]))?;
                self.expect("=")?;
                let v = self.number()?;
                if hp.insert(key, v).is_some() {
                    return Err(self.err(at, &["distinct key"]));
                }
                if self.peek(",") {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        if !self.peek(")") {
            let exp: &[&str] = if hp.is_empty() { &["|", ")"] } else { &[",", ")"] };
            return Err(self.err(self.pos, exp));
        }
        self.pos += 1;
        Ok((method, action, hp))
    }

    fn hook(&mut self) -> Result<Hook, ParseError> {
        self.expect("(")?;
        let pattern = scan_pattern(self.src, &mut self.pos).map_err(|e| self.scan(e))?;
        if !self.peek(")") {
            return Err(self.err(self.pos, &[".", "[", ")"]));
        }
        self.pos += 1;
        self.expect("{")?;
        let at = self.pos;
        let mut p = self.pos;
        while p < self.src.len() && self.src[p].is_ascii_lowercase() {
            p += 1;
        }
        let mode = match &self.src[at..p] {
            b"in" => Mode::In,
            b"out" => Mode::Out,
            b"inout" => Mode::InOut,
            _ => return Err(self.err(at, &["in", "out", "inout"])),
        };
        self.pos = p;
        let instance = if self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
            let at = self.pos;
            let v = scan_int(self.src, &mut self.pos).map_err(|e| self.scan(e))?;
            Some(u32::try_from(v).map_err(|_| self.err(at, &["INT < 2^32"]))?)
        } else {
            None
        };
        if !self.peek("}") {
            let exp: &[&str] = if instance.is_some() { &["}"] } else { &["INT", "}"] };
            return Err(self.err(self.pos, exp));
        }
        self.pos += 1;
        Ok(Hook { pattern, mode, instance })
    }
}

pub fn parse_config(text: &str) -> Result<AdaptSpec, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let (method, action, hyperparams) = p.decl()?;
    p.expect(":")?;
    let mut hooks = Vec::new();
    while p.pos < p.src.len() {
        p.expect("->")?;
        hooks.push(p.hook()?);
    }
    Ok(AdaptSpec { method, action, hyperparams, hooks })
}

impl fmt::Display for AdaptSpec {
    /// Canonical form: method's canonical name, keys sorted, shortest numbers.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}.{}", self.method.name(), self.action)?;
        for (i, (k, v)) in self.hyperparams.iter().enumerate() {
            write!(f, "{}{k}={v}", if i == 0 { "|" } else { "," })?;
        }
        f.write_str("):")?;
        for h in &self.hooks {
            write!(f, "->({}){{{}", h.pattern, h.mode.as_str())?;
            if let Some(i) = h.instance {
                write!(f, "{i}")?;
            }
            f.write_str("}")?;
        }
        Ok(())
    }
}
