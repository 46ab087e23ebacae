use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use super::path::{path, ParamPath};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::InvalidSpec(format!("unknown activation `{other}`"))),
        }
    }
}

/// Mini vision-transformer over pre-tokenised input `[batch, seq_len, in_dim]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitSpec {
    pub in_dim: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub classes: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    /// Fully connected stack; `widths[0]` is the input, the last entry the class count.
    Mlp { widths: Vec<usize>, activation: Activation },
    MiniVit(VitSpec),
}

pub const LN_EPS: f64 = 1e-5;

impl ModelSpec {
    pub fn mlp(widths: &[usize], activation: Activation) -> Result<Self> {
        let s = ModelSpec::Mlp { widths: widths.to_vec(), activation };
        s.validate()?;
        Ok(s)
    }

    pub fn vit(v: VitSpec) -> Result<Self> {
        let s = ModelSpec::MiniVit(v);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { widths, .. } => {
                if widths.len() < 2 {
                    return Err(Error::InvalidSpec("mlp needs at least input and output widths".into()));
                }
                if widths.contains(&0) {
                    return Err(Error::InvalidSpec("mlp widths must be positive".into()));
                }
            }
            ModelSpec::MiniVit(v) => {
                let dims = [v.in_dim, v.dim, v.blocks, v.heads, v.mlp_dim, v.classes, v.seq_len];
                if dims.contains(&0) {
                    return Err(Error::InvalidSpec("mini_vit dims must be positive".into()));
                }
                if v.dim % v.heads != 0 {
                    return Err(Error::InvalidSpec(format!("heads {} must divide dim {}", v.heads, v.dim)));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Mlp { .. } => "mlp",
            ModelSpec::MiniVit(_) => "mini_vit",
        }
    }

    /// Canonical text form; the checkpoint digest is its SHA-256.
    pub fn canonical(&self) -> String {
        match self {
            ModelSpec::Mlp { widths, activation } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                format!("mlp;widths={};act={}", w.join(","), activation.name())
            }
            ModelSpec::MiniVit(v) => format!(
                "mini_vit;in={};dim={};blocks={};heads={};mlp={};classes={};seq={}",
                v.in_dim, v.dim, v.blocks, v.heads, v.mlp_dim, v.classes, v.seq_len
            ),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { widths, .. } => *widths.last().unwrap(),
            ModelSpec::MiniVit(v) => v.classes,
        }
    }

    /// Per-sample input shape (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { widths, .. } => vec![widths[0]],
            ModelSpec::MiniVit(v) => vec![v.seq_len, v.in_dim],
        }
    }

    /// Number of linear layers (mlp) or transformer blocks (vit).
    pub fn depth(&self) -> usize {
        match self {
            ModelSpec::Mlp { widths, .. } => widths.len() - 1,
            ModelSpec::MiniVit(v) => v.blocks,
        }
    }

    /// Width of the classification feature fed to the head.
    pub fn feature_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp { widths, .. } => widths[widths.len() - 2],
            ModelSpec::MiniVit(v) => v.dim,
        }
    }

    /// Every parameter path with its shape, in path order.
    pub fn param_shapes(&self) -> BTreeMap<ParamPath, Vec<usize>> {
        let mut out = BTreeMap::new();
        match self {
            ModelSpec::Mlp { widths, .. } => {
                for (i, w) in widths.windows(2).enumerate() {
                    out.insert(path(&format!("layers[{i}].weight")), vec![w[1], w[0]]);
                    out.insert(path(&format!("layers[{i}].bias")), vec![w[1]]);
                }
            }
            ModelSpec::MiniVit(v) => {
                let d = v.dim;
                out.insert(path("patch_embed.weight"), vec![d, v.in_dim]);
                out.insert(path("patch_embed.bias"), vec![d]);
                out.insert(path("cls_token"), vec![1, d]);
                out.insert(path("pos_embed"), vec![v.seq_len + 1, d]);
                for b in 0..v.blocks {
                    let p = |s: &str| path(&format!("blocks[{b}].{s}"));
                    for n in ["norm1", "norm2"] {
                        out.insert(p(&format!("{n}.gamma")), vec![d]);
                        out.insert(p(&format!("{n}.beta")), vec![d]);
                    }
                    out.insert(p("attn.qkv.weight"), vec![3 * d, d]);
                    out.insert(p("attn.qkv.bias"), vec![3 * d]);
                    out.insert(p("attn.proj.weight"), vec![d, d]);
                    out.insert(p("attn.proj.bias"), vec![d]);
                    out.insert(p("mlp.fc1.weight"), vec![v.mlp_dim, d]);
                    out.insert(p("mlp.fc1.bias"), vec![v.mlp_dim]);
                    out.insert(p("mlp.fc2.weight"), vec![d, v.mlp_dim]);
                    out.insert(p("mlp.fc2.bias"), vec![d]);
                }
                out.insert(path("norm.gamma"), vec![d]);
                out.insert(path("norm.beta"), vec![d]);
                out.insert(path("head.weight"), vec![v.classes, d]);
                out.insert(path("head.bias"), vec![v.classes]);
            }
        }
        out
    }

    /// Module prefix of the classification head.
    pub fn head_module(&self) -> ParamPath {
        match self {
            ModelSpec::Mlp { widths, .. } => path(&format!("layers[{}]", widths.len() - 2)),
            ModelSpec::MiniVit(_) => path("head"),
        }
    }

    /// Module prefixes from the input side to the head. Partial-k counts from
    /// the end of this list.
    pub fn stages(&self) -> Vec<Vec<ParamPath>> {
        match self {
            ModelSpec::Mlp { widths, .. } => {
                (0..widths.len() - 1).map(|i| vec![path(&format!("layers[{i}]"))]).collect()
            }
            ModelSpec::MiniVit(v) => {
                let mut s = vec![vec![path("patch_embed"), path("cls_token"), path("pos_embed")]];
                s.extend((0..v.blocks).map(|b| vec![path(&format!("blocks[{b}]"))]));
                s.last_mut().unwrap().extend([path("norm"), path("head")]);
                s
            }
        }
    }

    /// Hook paths accepted by `forward`'s capture set.
    pub fn hooks(&self) -> Vec<String> {
        let mut h = Vec::new();
        match self {
            ModelSpec::Mlp { widths, .. } => {
                let n = widths.len() - 1;
                for i in 0..n {
                    h.push(format!("layers[{i}].pre"));
                    if i + 1 < n {
                        h.push(format!("layers[{i}].out"));
                    }
                }
            }
            ModelSpec::MiniVit(v) => {
                h.push("embed".into());
                for b in 0..v.blocks {
                    for s in ["in", "out", "mlp.pre", "attn.weights"] {
                        h.push(format!("blocks[{b}].{s}"));
                    }
                }
            }
        }
        h.push("feature".into());
        h.push("logits".into());
        h
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_vit() -> VitSpec {
        VitSpec { in_dim: 4, dim: 16, blocks: 2, heads: 2, mlp_dim: 32, classes: 3, seq_len: 5 }
    }

    #[test]
    fn mlp_paths_follow_grammar() {
        let s = ModelSpec::mlp(&[4, 8, 3], Activation::Relu).unwrap();
        let shapes = s.param_shapes();
        let got: Vec<(String, Vec<usize>)> = shapes.iter().map(|(p, s)| (p.to_string(), s.clone())).collect();
        assert_eq!(
            got,
            vec![
                ("layers[0].bias".to_string(), vec![8]),
                ("layers[0].weight".to_string(), vec![8, 4]),
                ("layers[1].bias".to_string(), vec![3]),
                ("layers[1].weight".to_string(), vec![3, 8]),
            ]
        );
    }

    #[test]
    fn vit_fused_qkv_shape() {
        let s = ModelSpec::vit(small_vit()).unwrap();
        assert_eq!(s.param_shapes()[&path("blocks[0].attn.qkv.weight")], vec![48, 16]);
        assert_eq!(s.param_shapes()[&path("pos_embed")], vec![6, 16]);
    }

    #[test]
    fn invalid_specs() {
        assert!(ModelSpec::mlp(&[4], Activation::Relu).is_err());
        assert!(ModelSpec::vit(VitSpec { heads: 3, ..small_vit() }).is_err());
        assert!(ModelSpec::vit(VitSpec { blocks: 0, ..small_vit() }).is_err());
    }

    #[test]
    fn digest_depends_on_spec() {
        let a = ModelSpec::mlp(&[4, 8, 3], Activation::Relu).unwrap();
        let b = ModelSpec::mlp(&[4, 8, 3], Activation::Gelu).unwrap();
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
