//! Parameter paths (`blocks[0].attn.qkv.weight`) and patterns over them
//! (`blocks[0:12].attn.qkv`, `layers[*].bias`).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Segment {
    pub name: String,
    pub index: Option<usize>,
}

/// Dotted parameter path. Ordering compares segment by segment (name, then
/// numeric index), so `blocks[2]` sorts before `blocks[10]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamPath(pub Vec<Segment>);

impl ParamPath {
    pub fn segments(&self) -> &[Segment] {
        &self.0
    }

    /// Path with the last segment removed.
    pub fn parent(&self) -> Option<ParamPath> {
        (self.0.len() > 1).then(|| ParamPath(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn leaf(&self) -> &str {
        &self.0.last().expect("paths are nonempty").name
    }

    pub fn child(&self, name: &str, index: Option<usize>) -> ParamPath {
        let mut s = self.0.clone();
        s.push(Segment { name: name.to_string(), index });
        ParamPath(s)
    }

    /// All proper prefixes, shortest first.
    pub fn prefixes(&self) -> impl Iterator<Item = ParamPath> + '_ {
        (1..self.0.len()).map(|k| ParamPath(self.0[..k].to_vec()))
    }

    pub fn starts_with(&self, prefix: &ParamPath) -> bool {
        self.0.len() >= prefix.0.len() && self.0[..prefix.0.len()] == prefix.0[..]
    }
}

impl fmt::Display for ParamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            f.write_str(&s.name)?;
            if let Some(ix) = s.index {
                write!(f, "[{ix}]")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ParamPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let pat: PathPattern = s.parse()?;
        let segs = pat
            .0
            .into_iter()
            .map(|p| match p.sel {
                Selector::None => Ok(Segment { name: p.name, index: None }),
                Selector::Exact(i) => Ok(Segment { name: p.name, index: Some(i) }),
                _ => Err(Error::BadPattern { pattern: s.to_string(), reason: "paths take exact indices only".into() }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamPath(segs))
    }
}

/// Shorthand for building a path from a literal known to be well formed.
pub fn path(s: &str) -> ParamPath {
    s.parse().unwrap_or_else(|e| panic!("invalid literal path `{s}`: {e}"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    /// No brackets.
    None,
    Exact(usize),
    /// Half-open `[lo:hi)`.
    Range(usize, usize),
    Any,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegPattern {
    pub name: String,
    pub sel: Selector,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathPattern(pub Vec<SegPattern>);

impl PathPattern {
    pub fn matches(&self, p: &ParamPath) -> bool {
        self.0.len() == p.0.len()
            && self.0.iter().zip(&p.0).all(|(sp, s)| {
                sp.name == s.name
                    && match (&sp.sel, s.index) {
                        (Selector::None, None) => true,
                        (Selector::Exact(a), Some(b)) => *a == b,
                        (Selector::Range(lo, hi), Some(b)) => *lo <= b && b < *hi,
                        (Selector::Any, Some(_)) => true,
                        _ => false,
                    }
            })
    }

    /// Extends the upper bound of every range by `extra`.
    pub fn widened(&self, extra: usize) -> PathPattern {
        PathPattern(
            self.0
                .iter()
                .map(|s| SegPattern {
                    name: s.name.clone(),
                    sel: match s.sel {
                        Selector::Range(lo, hi) => Selector::Range(lo, hi + extra),
                        ref o => o.clone(),
                    },
                })
                .collect(),
        )
    }
}

impl fmt::Display for PathPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            f.write_str(&s.name)?;
            match s.sel {
                Selector::None => {}
                Selector::Exact(i) => write!(f, "[{i}]")?,
                Selector::Range(lo, hi) => write!(f, "[{lo}:{hi}]")?,
                Selector::Any => f.write_str("[*]")?,
            }
        }
        Ok(())
    }
}

/// Failure while scanning a pattern: byte offset plus the tokens that would
/// have been accepted there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
}

pub(crate) fn is_name_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

pub(crate) fn is_name_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

pub(crate) fn scan_int(src: &[u8], pos: &mut usize) -> Result<usize, ScanError> {
    let start = *pos;
    while *pos < src.len() && src[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(ScanError { offset: start, expected: vec!["INT"] });
    }
    std::str::from_utf8(&src[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| ScanError { offset: start, expected: vec!["INT"] })
}

pub(crate) fn scan_name(src: &[u8], pos: &mut usize) -> Result<String, ScanError> {
    let start = *pos;
    if *pos >= src.len() || !is_name_start(src[*pos]) {
        return Err(ScanError { offset: start, expected: vec!["NAME"] });
    }
    while *pos < src.len() && is_name_char(src[*pos]) {
        *pos += 1;
    }
    Ok(String::from_utf8(src[start..*pos].to_vec()).unwrap())
}

/// Scans `seg ('.' seg)*` starting at `*pos`.
pub(crate) fn scan_pattern(src: &[u8], pos: &mut usize) -> Result<PathPattern, ScanError> {
    let mut segs = Vec::new();
    loop {
        let name = scan_name(src, pos)?;
        let mut sel = Selector::None;
        if src.get(*pos) == Some(&b'[') {
            *pos += 1;
            if src.get(*pos) == Some(&b'*') {
                *pos += 1;
                sel = Selector::Any;
            } else {
                let lo = scan_int(src, pos).map_err(|e| ScanError { expected: vec!["INT", "*"], ..e })?;
                if src.get(*pos) == Some(&b':') {
                    *pos += 1;
                    let at = *pos;
                    let hi = scan_int(src, pos)?;
                    if hi < lo {
                        return Err(ScanError { offset: at, expected: vec!["INT >= range start"] });
                    }
                    sel = Selector::Range(lo, hi);
                } else {
                    sel = Selector::Exact(lo);
                }
            }
            if src.get(*pos) != Some(&b']') {
                return Err(ScanError { offset: *pos, expected: vec!["]"] });
            }
            *pos += 1;
        }
        segs.push(SegPattern { name, sel });
        if src.get(*pos) == Some(&b'.') {
            *pos += 1;
        } else {
            return Ok(PathPattern(segs));
        }
    }
}

impl FromStr for PathPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let src = s.as_bytes();
        let mut pos = 0;
        let bad = |e: ScanError| Error::BadPattern {
            pattern: s.to_string(),
            reason: format!("expected {} at offset {}", e.expected.join(" or "), e.offset),
        };
        let pat = scan_pattern(src, &mut pos).map_err(bad)?;
        if pos != src.len() {
            return Err(bad(ScanError { offset: pos, expected: vec![".", "end of pattern"] }));
        }
        Ok(pat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_roundtrip_and_order() {
        let p = path("blocks[10].attn.qkv.weight");
        assert_eq!(p.to_string(), "blocks[10].attn.qkv.weight");
        assert!(path("blocks[2].x") < path("blocks[10].x"));
        assert!(path("cls_token") < path("head.bias"));
    }

    #[test]
    fn pattern_matching() {
        let pat: PathPattern = "blocks[0:2].attn.qkv".parse().unwrap();
        assert!(pat.matches(&path("blocks[1].attn.qkv")));
        assert!(!pat.matches(&path("blocks[2].attn.qkv")));
        assert!(!pat.matches(&path("blocks[1].attn.qkv.weight")));
        let any: PathPattern = "layers[*].bias".parse().unwrap();
        assert!(any.matches(&path("layers[7].bias")));
        assert!(!any.matches(&path("head.bias")));
        assert_eq!(pat.to_string(), "blocks[0:2].attn.qkv");
    }

    #[test]
    fn pattern_errors() {
        assert!("blocks[".parse::<PathPattern>().is_err());
        assert!("blocks[3:1]".parse::<PathPattern>().is_err());
        assert!("9lives".parse::<PathPattern>().is_err());
        assert!("a..b".parse::<PathPattern>().is_err());
        assert!("a[1:2]".parse::<ParamPath>().is_err());
    }
}
