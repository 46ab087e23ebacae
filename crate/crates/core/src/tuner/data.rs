//! Labelled datasets: synthetic generators, IDX and CSV loaders, and
//! deterministic train/val/test splits.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test, all)"))),
        }
    }
}

/// Features `[N, ...]`, class ids, and disjoint index splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Validates labels and draws a 70/15/15 split (floor for train and val,
    /// remainder to test) from a shuffle seeded by `seed`.
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        let n = features.shape()[0];
        if labels.len() != n {
            return Err(Error::LabelMismatch(format!("{n} samples but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n * 70 / 100;
        let n_val = n * 15 / 100;
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok(Dataset { features, labels, classes, train: order, val, test })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
            Split::All => (0..self.len()).collect(),
        }
    }

    /// Features and labels of the given sample indices.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.features.select_rows(idx);
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn split(&self, split: Split) -> (Tensor, Vec<usize>) {
        self.gather(&self.indices(split))
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidHyperparam(format!("{name} must be >= 1")));
    }
    Ok(())
}

/// Blob centre of class `c` out of `k`: evenly spaced on a radius-3 circle in
/// the first two dimensions (on a line when `d == 1`).
fn blob_center(c: usize, k: usize, d: usize) -> Vec<f64> {
    let mut center = vec![0.0; d];
    if d == 1 {
        center[0] = 3.0 * c as f64;
    } else {
        let a = std::f64::consts::TAU * c as f64 / k as f64;
        center[0] = 3.0 * a.cos();
        center[1] = 3.0 * a.sin();
    }
    center
}

/// `n` points in `k` isotropic gaussian blobs of width `sigma` in `d`
/// dimensions; sample `i` has class `i mod k`.
pub fn blobs(k: usize, d: usize, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    blobs_shifted(k, d, n, sigma, 0.0, seed)
}

/// [`blobs`] with every coordinate offset by `delta`.
pub fn blobs_shifted(k: usize, d: usize, n: usize, sigma: f64, delta: f64, seed: u64) -> Result<Dataset> {
    check_positive("k", k)?;
    check_positive("d", d)?;
    check_positive("n", n)?;
    if !(sigma >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidHyperparam(format!("sigma={sigma}, delta={delta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|c| blob_center(c, k, d)).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for &m in &centers[c] {
            data.push(m + delta + sigma * gaussian(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(&[n, d], data)?, labels, k, seed)
}

/// Two interleaved half circles with gaussian noise; half the points each.
pub fn moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_positive("n", n)?;
    if !(noise >= 0.0) {
        return Err(Error::InvalidHyperparam(format!("noise={noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outer = n / 2 + n % 2;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y, c) = if i < n_outer {
            let t = std::f64::consts::PI * i as f64 / (n_outer.max(2) - 1) as f64;
            (t.cos(), t.sin(), 0)
        } else {
            let m = n - n_outer;
            let t = std::f64::consts::PI * (i - n_outer) as f64 / (m.max(2) - 1) as f64;
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        data.push(x + noise * gaussian(&mut rng));
        data.push(y + noise * gaussian(&mut rng));
        labels.push(c);
    }
    Dataset::new(Tensor::new(&[n, 2], data)?, labels, 2, seed)
}

/// Token sequences `[n, seq, vocab]` of one-hot symbols. The label is the
/// symbol at position 0; every other position holds a symbol drawn
/// uniformly, so a position-blind pooling of the sequence cannot tell the
/// labelled token from the distractors.
pub fn tokens(vocab: usize, seq: usize, n: usize, seed: u64) -> Result<Dataset> {
    check_positive("vocab", vocab)?;
    check_positive("n", n)?;
    if seq < 2 {
        return Err(Error::InvalidHyperparam(format!("seq={seq} must be >= 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * seq * vocab];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % vocab;
        labels.push(y);
        for p in 0..seq {
            let sym = if p == 0 { y } else { rng.gen_range(0..vocab) };
            data[(i * seq + p) * vocab + sym] = 1.0;
        }
    }
    Dataset::new(Tensor::new(&[n, seq, vocab], data)?, labels, vocab, seed)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn read_idx_header(r: &mut impl Read, expected: u32) -> Result<Vec<usize>> {
    let magic = read_u32(r)?;
    if magic != expected {
        return Err(Error::BadMagic { found: magic, expected });
    }
    let dims = (expected & 0xff) as usize;
    (0..dims).map(|_| Ok(read_u32(r)? as usize)).collect()
}

/// Reads an IDX image file (`u8`, 3 dims) and label file (`u8`, 1 dim).
/// Pixels are scaled to `[0, 1]` and flattened to `[N, rows·cols]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let mut ri = BufReader::new(File::open(images)?);
    let mut rl = BufReader::new(File::open(labels)?);
    let dims = read_idx_header(&mut ri, IDX_IMAGES_MAGIC)?;
    let ldims = read_idx_header(&mut rl, IDX_LABELS_MAGIC)?;
    let (n, width) = (dims[0], dims[1] * dims[2]);
    if ldims[0] != n {
        return Err(Error::LabelMismatch(format!("{n} images but {} labels", ldims[0])));
    }
    if n == 0 || width == 0 {
        return Err(Error::LabelMismatch("empty idx file".into()));
    }
    let mut pix = vec![0u8; n * width];
    ri.read_exact(&mut pix)?;
    let mut lab = vec![0u8; n];
    rl.read_exact(&mut lab)?;
    let labels: Vec<usize> = lab.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let data = pix.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::new(&[n, width], data)?, labels, classes, seed)
}

/// Reads numeric CSV with the label in column `label_col`. A first record
/// whose feature cells are all non-numeric is taken as a header. Reported
/// rows are 1-based file lines, columns 0-based.
pub fn load_csv(path: impl AsRef<Path>, label_col: usize, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_error)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let row = line + 1;
        if label_col >= rec.len() {
            return Err(Error::MalformedCsv { row, col: label_col, reason: format!("only {} columns", rec.len()) });
        }
        let cells: Vec<&str> = rec.iter().map(str::trim).collect();
        if line == 0 && cells.iter().enumerate().all(|(c, v)| c == label_col || v.parse::<f64>().is_err()) {
            continue;
        }
        width.get_or_insert(cells.len() - 1);
        for (c, v) in cells.iter().enumerate() {
            if c == label_col {
                let y = v.parse::<usize>().map_err(|_| Error::MalformedCsv {
                    row,
                    col: c,
                    reason: format!("label `{v}` is not a class id"),
                })?;
                labels.push(y);
            } else {
                let x = v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::MalformedCsv {
                    row,
                    col: c,
                    reason: format!("`{v}` is not a finite number"),
                })?;
                features.push(x);
            }
        }
    }
    let Some(width) = width else {
        return Err(Error::MalformedCsv { row: 1, col: 0, reason: "no data rows".into() });
    };
    if width == 0 {
        return Err(Error::MalformedCsv { row: 1, col: 0, reason: "no feature columns".into() });
    }
    let n = labels.len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(&[n, width], features)?, labels, classes, seed)
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { len, expected_len, .. } => Error::MalformedCsv {
            row,
            col: len as usize,
            reason: format!("expected {expected_len} fields, found {len}"),
        },
        other => Error::MalformedCsv { row, col: 0, reason: format!("{other:?}") },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_split_arithmetic() {
        let d = blobs(3, 2, 300, 0.1, 7).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (210, 45, 45));
        assert!(d.labels.iter().all(|&y| y < 3));
        let mut all: Vec<usize> = d.train.iter().chain(&d.val).chain(&d.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert_eq!(d, blobs(3, 2, 300, 0.1, 7).unwrap());
    }

    #[test]
    fn blobs_sit_on_their_centres() {
        let d = blobs(4, 3, 400, 0.0, 1).unwrap();
        for i in 0..400 {
            assert_eq!(d.features.row(i), blob_center(d.labels[i], 4, 3).as_slice());
        }
        let s = blobs_shifted(4, 3, 400, 0.0, 2.0, 1).unwrap();
        assert!((s.features.data()[0] - d.features.data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn moons_and_tokens_shapes() {
        let m = moons(101, 0.1, 3).unwrap();
        assert_eq!(m.features.shape(), &[101, 2]);
        assert_eq!(m.labels.iter().filter(|&&y| y == 0).count(), 51);
        let t = tokens(3, 5, 30, 2).unwrap();
        assert_eq!(t.features.shape(), &[30, 5, 3]);
        for i in 0..30 {
            assert_eq!(t.features.data()[i * 15 + t.labels[i]], 1.0);
            assert_eq!(t.features.data()[i * 15..(i + 1) * 15].iter().sum::<f64>(), 5.0);
        }
    }

    fn write_idx(dir: &Path, name: &str, magic: u32, dims: &[u32], body: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        for d in dims {
            f.write_all(&d.to_be_bytes()).unwrap();
        }
        f.write_all(body).unwrap();
        p
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_idx(dir.path(), "img", IDX_IMAGES_MAGIC, &[4, 2, 2], &[0, 255, 51, 0].repeat(4));
        let lab = write_idx(dir.path(), "lab", IDX_LABELS_MAGIC, &[4], &[0, 1, 2, 1]);
        let d = load_idx(&img, &lab, 0).unwrap();
        assert_eq!(d.features.shape(), &[4, 4]);
        assert_eq!(d.features.row(0), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!(d.classes, 3);

        let short = write_idx(dir.path(), "lab3", IDX_LABELS_MAGIC, &[3], &[0, 1, 2]);
        assert!(matches!(load_idx(&img, &short, 0), Err(Error::LabelMismatch(_))));
        assert!(matches!(load_idx(&lab, &img, 0), Err(Error::BadMagic { found: 0x801, expected: 0x803 })));
    }

    #[test]
    fn csv_headers_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "x,y,label\n0.5,1,0\n-2,3e-1,1\n").unwrap();
        let d = load_csv(&p, 2, 0).unwrap();
        assert_eq!(d.features.shape(), &[2, 2]);
        assert_eq!(d.labels, vec![0, 1]);

        std::fs::write(&p, "1,0.5,1\n0,2,2\n").unwrap();
        let d = load_csv(&p, 0, 0).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.features.row(1), &[2.0, 2.0]);

        std::fs::write(&p, "x,y,label\n0.5,1,0\n-2,abc,1\n").unwrap();
        match load_csv(&p, 2, 0) {
            Err(Error::MalformedCsv { row: 3, col: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "0.5,1,0\n-2,1\n").unwrap();
        assert!(matches!(load_csv(&p, 2, 0), Err(Error::MalformedCsv { row: 2, .. })));
    }
}
