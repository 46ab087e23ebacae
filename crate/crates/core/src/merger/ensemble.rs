//! Prediction-space fusion: logit, probability and vote ensembles, and the
//! nearest-class-mean classifier.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tuner::losses::{class_means, sq_distances};
use crate::zoo::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    Logits,
    Prob,
    Vote,
}

impl EnsembleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleMode::Logits => "logits",
            EnsembleMode::Prob => "prob",
            EnsembleMode::Vote => "vote",
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(EnsembleMode::Logits),
            "prob" => Ok(EnsembleMode::Prob),
            "vote" => Ok(EnsembleMode::Vote),
            _ => Err(Error::Config(format!("unknown ensemble mode `{s}` (logits, prob, vote)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    /// Mean logits, mean probabilities, or vote fractions, `[n, classes]`.
    pub scores: Tensor,
    pub predictions: Vec<usize>,
}

/// Combines per-model outputs; ties go to the lowest class id.
pub fn ensemble(models: &[&Model], x: &Tensor, mode: EnsembleMode) -> Result<EnsembleOutput> {
    let outs: Vec<Tensor> = models.iter().map(|m| m.logits_batched(x, 256)).collect::<Result<_>>()?;
    combine(&outs, mode)
}

/// [`ensemble`] over precomputed logits.
pub fn combine(logits: &[Tensor], mode: EnsembleMode) -> Result<EnsembleOutput> {
    let first = logits.first().ok_or(Error::EmptyInput)?;
    let (n, c) = first.require_2d("ensemble")?;
    for l in logits {
        if l.cols() != c {
            return Err(Error::ClassCountMismatch(format!("{} vs {c} classes", l.cols())));
        }
        if l.rows() != n {
            return Err(Error::ShapeMismatch(format!("{} vs {n} rows", l.rows())));
        }
    }
    let k = logits.len() as f64;
    let scores = match mode {
        EnsembleMode::Logits => mean(logits)?,
        EnsembleMode::Prob => mean(&logits.iter().map(|l| l.softmax(1.0)).collect::<Result<Vec<_>>>()?)?,
        EnsembleMode::Vote => {
            let mut votes = vec![0.0; n * c];
            for l in logits {
                for (i, p) in l.argmax_rows().into_iter().enumerate() {
                    votes[i * c + p] += 1.0 / k;
                }
            }
            Tensor::new(&[n, c], votes)?
        }
    };
    let predictions = scores.argmax_rows();
    Ok(EnsembleOutput { scores, predictions })
}

fn mean(ts: &[Tensor]) -> Result<Tensor> {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / ts.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Config(format!("unknown metric `{s}` (euclidean, cosine)"))),
        }
    }
}

/// Nearest-class-mean classifier over fixed features.
#[derive(Clone, Debug, PartialEq)]
pub struct Ncm {
    pub means: Tensor,
    pub metric: Metric,
}

fn unit_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::raw(t.shape().to_vec(), data)
}

impl Ncm {
    pub fn fit(features: &Tensor, labels: &[usize], classes: usize, metric: Metric) -> Result<Self> {
        Ok(Ncm { means: class_means(features, labels, classes)?, metric })
    }

    /// Per-class scores (higher is closer).
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        match self.metric {
            Metric::Euclidean => Ok(sq_distances(features, &self.means)?.scale(-1.0)),
            Metric::Cosine => {
                let f = unit_rows(features);
                let m = unit_rows(&self.means);
                f.matmul(&m.transpose()?)
            }
        }
    }

    /// Closest mean per row; ties go to the lowest class id.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(self.scores(features)?.argmax_rows())
    }
}
