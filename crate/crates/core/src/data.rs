//! Datasets: IDX (MNIST) loading and writing, synthetic two-Gaussian and
//! two-point problems, and the evaluation split protocol.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::netcore::Matrix;
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled examples with inputs in `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    /// `(height, width, channels)` when the inputs are images.
    image_shape: Option<(usize, usize, usize)>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {y} ≥ {num_classes} classes")));
        }
        if inputs.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("inputs must lie in [0,1]".into()));
        }
        Ok(Self { inputs, labels, num_classes, image_shape: None })
    }

    pub fn with_image_shape(mut self, h: usize, w: usize, c: usize) -> Result<Self> {
        if h * w * c != self.dim() {
            return Err(Error::Shape(format!("{h}x{w}x{c} image does not match dim {}", self.dim())));
        }
        self.image_shape = Some((h, w, c));
        Ok(self)
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.x(i)).collect();
        Self {
            inputs: Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, self.dim())),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    /// The first `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        self.subset(&(start.min(self.len())..end.min(self.len())).collect::<Vec<_>>())
    }
}

/// Disjoint evaluation splits of a test set: the first `rte` examples are
/// attacked, the next ones measure clean test error, and the last `holdout`
/// examples are reserved for threshold selection.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplits {
    pub eval_rte: Dataset,
    pub eval_te: Dataset,
    pub holdout: Dataset,
}

pub fn split_for_evaluation(test: &Dataset, rte: usize, holdout: usize) -> Result<EvalSplits> {
    let n = test.len();
    if rte + holdout > n || rte == 0 || holdout == 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n} test examples into {rte} attacked + {holdout} held out"
        )));
    }
    Ok(EvalSplits {
        eval_rte: test.range(0, rte),
        eval_te: test.range(rte, n - holdout),
        holdout: test.range(n - holdout, n),
    })
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx { path: path.display().to_string(), reason: reason.into() }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, "truncated header"))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0,1]` by `/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip)?;
    let labels = fs::read(lp)?;

    let magic = read_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(ip, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(&images, 4, ip)? as usize;
    let rows = read_u32(&images, 8, ip)? as usize;
    let cols = read_u32(&images, 12, ip)? as usize;
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != n * dim {
        return Err(idx_err(ip, format!("expected {} pixel bytes, found {}", n * dim, pixels.len())));
    }

    let magic = read_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(lp, format!("bad label magic {magic:#010x}")));
    }
    let m = read_u32(&labels, 4, lp)? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != m {
        return Err(idx_err(lp, format!("expected {m} label bytes, found {}", label_bytes.len())));
    }
    if m != n {
        return Err(idx_err(lp, format!("{n} images but {m} labels")));
    }

    let data: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let k = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, k.max(10))?.with_image_shape(rows, cols, 1)
}

/// Writes an IDX image file from raw bytes (`n × rows × cols`).
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend((n as u32).to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Standard deviation of each coordinate in [`make_two_gaussians`].
pub const TWO_GAUSSIANS_SIGMA: f64 = 0.05;

/// Two isotropic Gaussian classes in `[0,1]^2` whose means sit
/// `separation · σ` apart along the first axis (σ = 0.05), clipped to the
/// box. Labels alternate 0, 1, 0, ….
pub fn make_two_gaussians(n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    make_two_gaussians_with(n, separation, TWO_GAUSSIANS_SIGMA, 2, seed)
}

pub fn make_two_gaussians_with(n: usize, separation: f64, sigma: f64, dim: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || dim == 0 {
        return Err(Error::InvalidConfig("two_gaussians needs n ≥ 2 and dim ≥ 1".into()));
    }
    let mut rng = stream(seed, Purpose::Data, 0, 0);
    let gap = separation * sigma;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let centre0 = if y == 0 { 0.5 - gap / 2.0 } else { 0.5 + gap / 2.0 };
        let row: Vec<f64> = (0..dim)
            .map(|j| {
                let c = if j == 0 { centre0 } else { 0.5 };
                let z: f64 = StandardNormal.sample(&mut rng);
                (c + sigma * z).clamp(0.0, 1.0)
            })
            .collect();
        rows.push(row);
        labels.push(y);
    }
    Dataset::new(Matrix::from_rows(&rows)?, labels, 2)
}

/// The two-atom problem: `x = 0` with label 1 (the second class) and
/// `x = ε` with label 0, in proportions `p0 : 1 − p0`, realised as
/// `round(p0·n)` and `n − round(p0·n)` copies.
pub fn make_two_point(p0: f64, epsilon: f64, n: usize) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&epsilon) || n < 2 {
        return Err(Error::InvalidConfig(format!("invalid two-point problem p0={p0} ε={epsilon} n={n}")));
    }
    let n0 = (p0 * n as f64).round() as usize;
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        if i < n0 {
            data.push(0.0);
            labels.push(1);
        } else {
            data.push(epsilon);
            labels.push(0);
        }
    }
    Dataset::new(Matrix::from_vec(n, 1, data)?, labels, 2)
}

/// Random permutation of `0..n` from a seeded stream.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

/// Float formatting used by every CSV emitter: 17 significant digits,
/// `.` decimal separator.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}
