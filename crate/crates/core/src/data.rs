//! Labeled datasets: seeded synthetic generators (two moons, Gaussian blobs)
//! and a reader for the IDX binary format used by MNIST-style files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Features `x` (N×d, row per sample) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    x: Tensor<S>,
    y: Vec<usize>,
    num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(x: Tensor<S>, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset features must be N×d, got shape {:?}",
                x.shape()
            )));
        }
        if x.rows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Rows `indices` as a feature batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        (
            self.x.select_rows(indices),
            indices.iter().map(|&i| self.y[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (x, y) = self.batch(indices);
        Self {
            x,
            y,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle into (train, held-out) with `round(len·eval_fraction)`
    /// held-out samples.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::InvalidArgument(format!(
                "eval fraction must lie in [0, 1), got {eval_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, &[0x5917]));
        let n_eval = (self.len() as f64 * eval_fraction).round() as usize;
        let (eval, train) = idx.split_at(n_eval);
        Ok((self.subset(train), self.subset(eval)))
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            x: Tensor::new(
                self.x.shape().to_vec(),
                self.x.data().iter().map(|v| T::of(v.as_f64())).collect(),
            )
            .expect("same shape"),
            y: self.y.clone(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Moons,
    Blobs,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Moons => "moons",
            SyntheticKind::Blobs => "blobs",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "moons" => Ok(SyntheticKind::Moons),
            "blobs" => Ok(SyntheticKind::Blobs),
            other => Err(Error::InvalidArgument(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub dim: usize,
    pub noise: f64,
    /// Number of blobs; moons always has two classes.
    pub classes: usize,
    pub seed: u64,
}

pub fn make_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<S>> {
    match spec.kind {
        SyntheticKind::Moons => make_moons(spec.n, spec.dim, spec.noise, spec.seed),
        SyntheticKind::Blobs => make_blobs(spec.n, spec.dim, spec.classes, spec.noise, spec.seed),
    }
}

fn check_sizes(n: usize, d: usize) -> Result<()> {
    if n < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic datasets need n >= 2 and d >= 2, got n={n}, d={d}"
        )));
    }
    Ok(())
}

/// Scales every column into [0, 1]; constant columns map to 0.
fn min_max_scale(rows: &mut [Vec<f64>]) {
    let d = rows[0].len();
    for j in 0..d {
        let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r[j]), hi.max(r[j]))
        });
        let span = hi - lo;
        for r in rows.iter_mut() {
            r[j] = if span > 0.0 { (r[j] - lo) / span } else { 0.0 };
        }
    }
}

fn finish<S: Scalar>(mut rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Dataset<S>> {
    min_max_scale(&mut rows);
    // Interleave classes so prefixes and splits stay balanced.
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x0bde]));
    let d = rows[0].len();
    let data: Vec<S> = order.iter().flat_map(|&i| rows[i].iter().map(|&v| S::of(v))).collect();
    let y = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(Tensor::matrix(order.len(), d, data)?, y, classes)
}

/// Two interleaving half circles with Gaussian noise of std `noise`, scaled
/// to [0,1] and zero-padded to `d` features. Class 0 is the upper moon.
pub fn make_moons<S: Scalar>(n: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset<S>> {
    check_sizes(n, d)?;
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut rng = rng_for(seed, &[0x300d5]);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let lin = |i: usize, m: usize| {
        if m > 1 {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        } else {
            0.0
        }
    };
    for i in 0..n_outer {
        let t = lin(i, n_outer);
        rows.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = lin(i, n_inner);
        rows.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    for r in rows.iter_mut() {
        for v in r.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise * z;
        }
    }
    for r in rows.iter_mut() {
        r.resize(d, 0.0);
    }
    finish(rows, labels, 2, seed)
}

/// `classes` isotropic Gaussian blobs in `d` dimensions. Centers are drawn
/// uniformly from [-10, 10]^d and points get per-coordinate noise of std
/// `noise`; features are then scaled to [0,1].
pub fn make_blobs<S: Scalar>(n: usize, d: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset<S>> {
    check_sizes(n, d)?;
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "blobs need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = rng_for(seed, &[0xb10b5]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        rows.push(
            centers[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + noise * z
                })
                .collect(),
        );
        labels.push(c);
    }
    finish(rows, labels, classes, seed)
}

/// Structured IDX parse failure; `offset` is the byte position where reading
/// stopped.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdxError {
    #[error("{file}: bad magic at byte {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: String,
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("{file}: truncated at byte {offset} while reading {what} ({needed} bytes needed)")]
    Truncated {
        file: String,
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("{file}: {trailing} unexpected trailing bytes at byte {offset}")]
    Trailing {
        file: String,
        offset: usize,
        trailing: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    file: &'a str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], IdxError> {
        if self.buf.len() - self.pos < n {
            return Err(IdxError::Truncated {
                file: self.file.to_string(),
                offset: self.pos,
                needed: n,
                what,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn be_u32(&mut self, what: &'static str) -> std::result::Result<u32, IdxError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn header(&mut self, expected: u32, ndims: usize) -> std::result::Result<Vec<usize>, IdxError> {
        let found = self.be_u32("magic")?;
        if found != expected {
            return Err(IdxError::BadMagic {
                file: self.file.to_string(),
                offset: 0,
                expected,
                found,
            });
        }
        (0..ndims)
            .map(|_| self.be_u32("dimension size").map(|v| v as usize))
            .collect()
    }

    fn finish(&self) -> std::result::Result<(), IdxError> {
        if self.pos != self.buf.len() {
            return Err(IdxError::Trailing {
                file: self.file.to_string(),
                offset: self.pos,
                trailing: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Raw u8 images from an IDX3 buffer: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(buf: &[u8], file: &str) -> std::result::Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let mut r = IdxReader { file, buf, pos: 0 };
    let dims = r.header(IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = r.take(n * rows * cols, "pixel data")?.to_vec();
    r.finish()?;
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(buf: &[u8], file: &str) -> std::result::Result<Vec<u8>, IdxError> {
    let mut r = IdxReader { file, buf, pos: 0 };
    let n = r.header(IDX_LABELS_MAGIC, 1)?[0];
    let labels = r.take(n, "labels")?.to_vec();
    r.finish()?;
    Ok(labels)
}

/// Pairs an IDX image file with its label file, scales pixels by 1/255 and
/// keeps at most `limit` samples. The class count is `max(label) + 1`.
pub fn load_idx_dataset<S: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset<S>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&std::fs::read(ip)?, &ip.display().to_string())?;
    let labels = parse_idx_labels(&std::fs::read(lp)?, &lp.display().to_string())?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let keep = limit.map_or(n, |l| l.min(n));
    if keep == 0 || rows * cols == 0 {
        return Err(Error::InvalidArgument("IDX dataset is empty".into()));
    }
    let d = rows * cols;
    let x: Vec<S> = pixels[..keep * d].iter().map(|&p| S::of(p as f64 / 255.0)).collect();
    let y: Vec<usize> = labels[..keep].iter().map(|&l| l as usize).collect();
    let classes = y.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(Tensor::matrix(keep, d, x)?, y, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, r, c] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * r * c).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn moons_are_scaled_padded_and_balanced() {
        let ds: Dataset<f64> = make_moons(101, 5, 0.05, 3).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (101, 5, 2));
        assert!(ds.features().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.features().iter_rows().all(|r| r[2..].iter().all(|&v| v == 0.0)));
        assert_eq!(ds.labels().iter().filter(|&&l| l == 0).count(), 50);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a: Dataset<f64> = make_blobs(40, 4, 3, 1.0, 11).unwrap();
        let b: Dataset<f64> = make_blobs(40, 4, 3, 1.0, 11).unwrap();
        let c: Dataset<f64> = make_blobs(40, 4, 3, 1.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes() {
        let ds: Dataset<f64> = make_moons(50, 2, 0.1, 0).unwrap();
        let (tr, ev) = ds.split(0.2, 1).unwrap();
        assert_eq!((tr.len(), ev.len()), (40, 10));
    }

    #[test]
    fn idx_images_accepted() {
        let (n, r, c, px) = parse_idx_images(&idx_images(2, 28, 28), "img").unwrap();
        assert_eq!((n, r, c, px.len()), (2, 28, 28, 2 * 784));
    }

    #[test]
    fn idx_bad_magic_names_both_values() {
        let mut b = idx_images(1, 2, 2);
        b[3] = 0x01;
        let err = parse_idx_images(&b, "img").unwrap_err();
        assert_eq!(
            err,
            IdxError::BadMagic {
                file: "img".into(),
                offset: 0,
                expected: 0x803,
                found: 0x801
            }
        );
        assert!(err.to_string().contains("0x00000803") && err.to_string().contains("0x00000801"));
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let b = idx_images(2, 2, 2);
        match parse_idx_images(&b[..20], "img") {
            Err(IdxError::Truncated { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_idx_images(&b[..6], "img"),
            Err(IdxError::Truncated { offset: 4, .. })
        ));
    }
}
