//! Synthetic datasets, IDX files and train-split standardization.

use std::path::Path;

use samlab::{Rng, Tensor};

use crate::config::{DataKind, DatasetSpec};
use crate::error::{Error, Result};

/// Labelled samples as a `[n, dim]` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.shape()[0] != y.len() {
            return Err(Error::Data(format!(
                "{} labels for features of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if let Some(&c) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Data(format!("label {c} out of range for {classes} classes")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.dim();
        let mut rows = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            rows.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Ok((Tensor::new(vec![indices.len(), d], rows)?, y))
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let idx: Vec<usize> = range.collect();
        let (x, y) = self.gather(&idx)?;
        Self::new(x, y, self.classes)
    }
}

/// Per-feature affine map fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Features with zero spread keep unit scale.
    pub fn fit(x: &Tensor) -> Self {
        let [n, d] = [x.shape()[0], x.shape()[1]];
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s))
            .collect();
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m))
            .collect();
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

pub fn blobs(classes: usize, dim: usize, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 1 || n < classes {
        return Err(Error::Config("blobs need classes >= 2, dim >= 1 and n >= classes".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config("blobs noise must be finite and >= 0".into()));
    }
    let mut rng = Rng::new(seed);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
    let order = rng.permutation(n);
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in order {
        let c = i % classes;
        x.extend(centers[c].iter().map(|m| m + noise * rng.normal()));
        y.push(c);
    }
    Dataset::new(Tensor::new(vec![n, dim], x)?, y, classes)
}

pub fn spirals(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config("spirals need n >= 2".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config("spirals noise must be finite and >= 0".into()));
    }
    let mut rng = Rng::new(seed);
    let order = rng.permutation(n);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in order {
        let c = i % 2;
        let t = rng.uniform().sqrt();
        let angle = 3.0 * std::f64::consts::PI * t + c as f64 * std::f64::consts::PI;
        x.push(t * angle.cos() + noise * rng.normal());
        x.push(t * angle.sin() + noise * rng.normal());
        y.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], x)?, y, 2)
}

/// Parsed IDX header and payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an unsigned-byte IDX file: two zero bytes, type code 0x08, the
/// number of dimensions, then each dimension as a big-endian u32.
pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let bad = |offset: usize, what: String| Err(Error::Data(format!("IDX offset {offset}: {what}")));
    if bytes.len() < 4 {
        return bad(bytes.len(), "file ends inside the 4-byte magic number".into());
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return bad(0, format!("magic must start with two zero bytes, found {:#04x} {:#04x}", bytes[0], bytes[1]));
    }
    if bytes[2] != 0x08 {
        return bad(2, format!("unsupported element type {:#04x}, only unsigned bytes (0x08)", bytes[2]));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return bad(3, "zero dimensions".into());
    }
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        let at = 4 + 4 * k;
        let Some(raw) = bytes.get(at..at + 4) else {
            return bad(at, format!("file ends inside dimension {k}"));
        };
        dims.push(u32::from_be_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * ndims;
    let expected = dims.iter().product::<usize>();
    let found = bytes.len() - start;
    if found != expected {
        return bad(start, format!("expected {expected} data bytes for dims {dims:?}, found {found}"));
    }
    Ok(Idx {
        dims,
        data: bytes[start..].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images flattened to one row each, pixel values as read.
pub fn load_idx(images: &Path, labels: &Path, take_n: Option<usize>) -> Result<Dataset> {
    let img = parse_idx(&read(images)?)?;
    let lab = parse_idx(&read(labels)?)?;
    if img.dims.len() < 2 {
        return Err(Error::Data(format!("{}: images need at least 2 dimensions", images.display())));
    }
    if lab.dims.len() != 1 {
        return Err(Error::Data(format!("{}: labels must be 1-dimensional", labels.display())));
    }
    let count = img.dims[0];
    if lab.dims[0] != count {
        return Err(Error::Data(format!("{count} images but {} labels", lab.dims[0])));
    }
    let n = match take_n {
        Some(t) if t > count => return Err(Error::Data(format!("take_n = {t} exceeds the {count} samples in the files"))),
        Some(t) => t,
        None => count,
    };
    let d: usize = img.dims[1..].iter().product();
    let x = img.data[..n * d].iter().map(|&b| f64::from(b)).collect();
    let y: Vec<usize> = lab.data[..n].iter().map(|&b| b as usize).collect();
    let classes = y.iter().max().map_or(1, |&m| m + 1).max(2);
    Dataset::new(Tensor::new(vec![n, d], x)?, y, classes)
}

/// Generate or read the data, split it in order, and standardize both splits
/// with training statistics.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Split> {
    let all = match &spec.kind {
        DataKind::Blobs {
            classes,
            dim,
            n,
            noise,
            seed,
        } => blobs(*classes, *dim, *n, *noise, *seed)?,
        DataKind::Spirals { n, noise, seed } => spirals(*n, *noise, *seed)?,
        DataKind::IdxFiles {
            images_path,
            labels_path,
            take_n,
        } => load_idx(images_path, labels_path, *take_n)?,
    };
    let n = all.len();
    let n_train = (spec.split * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!("split {} leaves an empty side of {n} samples", spec.split)));
    }
    let train = all.slice(0..n_train)?;
    let test = all.slice(n_train..n)?;
    let standardizer = Standardizer::fit(&train.x);
    Ok(Split {
        train: Dataset::new(standardizer.apply(&train.x)?, train.y, all.classes)?,
        test: Dataset::new(standardizer.apply(&test.x)?, test.y, all.classes)?,
        standardizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DataKind) -> DatasetSpec {
        DatasetSpec { kind, split: 0.8 }
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = blobs(2, 2, 400, 0.5, 7).unwrap();
        let b = blobs(2, 2, 400, 0.5, 7).unwrap();
        let bits = |d: &Dataset| d.x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.y, b.y);
        assert_ne!(bits(&a), bits(&blobs(2, 2, 400, 0.5, 8).unwrap()));
    }

    #[test]
    fn spiral_split_sizes() {
        let s = load_dataset(&spec(DataKind::Spirals {
            n: 500,
            noise: 0.1,
            seed: 0,
        }))
        .unwrap();
        assert_eq!((s.train.len(), s.test.len()), (400, 100));
    }

    #[test]
    fn train_split_is_standardized() {
        let s = load_dataset(&spec(DataKind::Blobs {
            classes: 3,
            dim: 4,
            n: 300,
            noise: 1.0,
            seed: 1,
        }))
        .unwrap();
        let n = s.train.len() as f64;
        for k in 0..4 {
            let col: Vec<f64> = s.train.x.data().iter().skip(k).step_by(4).copied().collect();
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn idx_header_errors_name_the_offset() {
        let err = |b: &[u8]| parse_idx(b).unwrap_err().to_string();
        assert!(err(&[0, 1, 8, 1]).contains("offset 0"));
        assert!(err(&[0, 0, 9, 1]).contains("offset 2"));
        assert!(err(&[0, 0, 8, 2, 0, 0, 0, 1]).contains("offset 8"));
        assert!(err(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]).contains("offset 8"));
        let ok = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 5, 6]).unwrap();
        assert_eq!((ok.dims, ok.data), (vec![2], vec![5, 6]));
    }
}
