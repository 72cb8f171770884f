//! Datasets: synthetic toy generators, delimited-text regression tables, and
//! MNIST IDX files.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Stream};

/// Seed used by the shipped toy recipes.
pub const CANONICAL_TOY_SEED: u64 = 20_151_207;

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
/// Pixel divisor used for MNIST inputs.
pub const MNIST_PIXEL_SCALE: f64 = 126.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Per-column affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population mean and std per column; zero-variance columns keep std 1.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows() as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut Matrix) {
        for i in 0..x.rows() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn invert(&self, x: &mut Matrix) {
        for i in 0..x.rows() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
    }
}

/// Inputs with either class labels or real targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Targets,
    /// Feature standardization applied to `inputs`, if any.
    pub input_stats: Option<Standardization>,
    /// `(mean, std)` applied to real targets, if any.
    pub target_stats: Option<(f64, f64)>,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::pre("dataset must have at least one row"));
        }
        if targets.len() != inputs.rows() {
            return Err(Error::shape("targets", inputs.rows(), targets.len()));
        }
        if !inputs.is_finite() {
            return Err(Error::pre("dataset inputs contain non-finite values"));
        }
        match &targets {
            Targets::Classes { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        classes: *classes,
                    });
                }
            }
            Targets::Real(v) => {
                if v.iter().any(|t| !t.is_finite()) {
                    return Err(Error::pre("dataset targets contain non-finite values"));
                }
            }
        }
        Ok(Self {
            inputs,
            targets,
            input_stats: None,
            target_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { classes, .. } => Some(classes),
            Targets::Real(_) => None,
        }
    }

    /// Rows `idx` (duplicates allowed), carrying the standardization records.
    pub fn gather(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select(idx),
            input_stats: self.input_stats.clone(),
            target_stats: self.target_stats,
        }
    }
}

/// Two Gaussian blobs, 10 points each: class 0 around `(-2,-2)`, class 1
/// around `(2,2)`, identity covariance.
pub fn gen_toy2d(seed: u64) -> Dataset {
    let mut r = rng::stream(seed, Stream::Data, 2);
    let mut rows = Vec::with_capacity(20);
    let mut labels = Vec::with_capacity(20);
    for (class, centre) in [(0usize, -2.0), (1, 2.0)] {
        for _ in 0..10 {
            let a: f64 = r.sample(StandardNormal);
            let b: f64 = r.sample(StandardNormal);
            rows.push([centre + a, centre + b]);
            labels.push(class);
        }
    }
    Dataset::new(
        Matrix::from_rows(&rows).expect("fixed width"),
        Targets::Classes { labels, classes: 2 },
    )
    .expect("finite toy data")
}

/// `y = x^3 + eps`, `x ~ U[-4, 4]`, `eps ~ N(0, 9)`, 20 points.
pub fn gen_toy1d(seed: u64) -> Dataset {
    gen_toy1d_with_noise(seed, 3.0)
}

/// [`gen_toy1d`] with the noise standard deviation exposed (0 gives `y = x^3`).
pub fn gen_toy1d_with_noise(seed: u64, noise_sd: f64) -> Dataset {
    let mut r = rng::stream(seed, Stream::Data, 1);
    let mut xs = Vec::with_capacity(20);
    let mut ys = Vec::with_capacity(20);
    for _ in 0..20 {
        let x: f64 = r.random_range(-4.0..=4.0);
        let e: f64 = r.sample(StandardNormal);
        xs.push(x);
        ys.push(x * x * x + noise_sd * e);
    }
    Dataset::new(Matrix::from_vec(20, 1, xs).unwrap(), Targets::Real(ys)).expect("finite toy data")
}

/// Which column of a table holds the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
    Last,
}

impl FromStr for ColumnRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::pre("empty column reference"));
        }
        if s == "last" {
            return Ok(ColumnRef::Last);
        }
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
}

/// Raw table parsed from comma-separated text.
#[derive(Clone, Debug)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(',').map(|f| f.trim().trim_matches('"')).collect()
}

/// Parses comma-separated numeric text. A first row with any non-numeric
/// field is taken as a header.
pub fn parse_csv(text: &str) -> Result<Table> {
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if header.is_none() && rows.is_empty() && fields.iter().any(|f| f.parse::<f64>().is_err()) {
            width = Some(fields.len());
            header = Some(fields.iter().map(|s| s.to_string()).collect());
            continue;
        }
        let w = *width.get_or_insert(fields.len());
        if fields.len() != w {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {w} fields, found {}", fields.len()),
            });
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("non-numeric field {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: lineno,
                msg: "non-finite value".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no data rows".into(),
        });
    }
    Ok(Table { header, rows })
}

fn resolve_column(table: &Table, col: &ColumnRef) -> Result<usize> {
    let width = table.rows[0].len();
    let idx = match col {
        ColumnRef::Index(i) => *i,
        ColumnRef::Last => width - 1,
        ColumnRef::Name(n) => table
            .header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == n))
            .ok_or_else(|| Error::pre(format!("no column named {n:?}")))?,
    };
    if idx >= width {
        return Err(Error::pre(format!("target column {idx} out of range for width {width}")));
    }
    Ok(idx)
}

/// Shuffles rows with `split.seed`, takes the first `train_n` as training data
/// and the next `test_n` as test data, and standardizes inputs (and, when
/// asked, targets) with training-split statistics.
pub fn load_csv_regression(
    path: impl AsRef<Path>,
    target: &ColumnRef,
    split: SplitSpec,
    standardize_targets: bool,
) -> Result<(Dataset, Dataset)> {
    let text = fs::read_to_string(path)?;
    split_regression_table(&parse_csv(&text)?, target, split, standardize_targets)
}

pub fn split_regression_table(
    table: &Table,
    target: &ColumnRef,
    split: SplitSpec,
    standardize_targets: bool,
) -> Result<(Dataset, Dataset)> {
    let n = table.rows.len();
    if split.train_n == 0 || split.test_n == 0 || split.train_n + split.test_n > n {
        return Err(Error::pre(format!(
            "split {}+{} does not fit {n} rows",
            split.train_n, split.test_n
        )));
    }
    let tcol = resolve_column(table, target)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(split.seed, Stream::Data, 0));

    let build = |idx: &[usize]| -> (Matrix, Vec<f64>) {
        let d = table.rows[0].len() - 1;
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            for (j, v) in table.rows[i].iter().enumerate() {
                if j == tcol {
                    y.push(*v);
                } else {
                    x.push(*v);
                }
            }
        }
        (Matrix::from_vec(idx.len(), d, x).unwrap(), y)
    };
    let (mut xtr, mut ytr) = build(&order[..split.train_n]);
    let (mut xte, mut yte) = build(&order[split.train_n..split.train_n + split.test_n]);

    let stats = Standardization::fit(&xtr);
    stats.apply(&mut xtr);
    stats.apply(&mut xte);

    let tstats = if standardize_targets {
        let ym = Matrix::from_vec(ytr.len(), 1, ytr.clone()).unwrap();
        let s = Standardization::fit(&ym);
        let (m, sd) = (s.mean[0], s.std[0]);
        ytr.iter_mut().for_each(|v| *v = (*v - m) / sd);
        yte.iter_mut().for_each(|v| *v = (*v - m) / sd);
        Some((m, sd))
    } else {
        None
    };

    let mut train = Dataset::new(xtr, Targets::Real(ytr))?;
    let mut test = Dataset::new(xte, Targets::Real(yte))?;
    for d in [&mut train, &mut test] {
        d.input_stats = Some(stats.clone());
        d.target_stats = tstats;
    }
    Ok((train, test))
}

/// Decoded IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "images: truncated payload ({} of {need} bytes)",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != MNIST_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "labels: truncated payload ({} of {count} bytes)",
            payload.len()
        )));
    }
    Ok(payload[..count].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MnistSplit {
    pub train_n: usize,
    pub valid_n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct MnistData {
    pub train: Dataset,
    pub valid: Dataset,
}

/// Loads an IDX image/label pair, keeps the first `subset` examples when
/// given, shuffles with `split.seed`, and returns the first `train_n` rows as
/// training data and the last `valid_n` as held-out data. Pixels are divided
/// by [`MNIST_PIXEL_SCALE`].
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    subset: Option<usize>,
    split: MnistSplit,
) -> Result<MnistData> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    mnist_from_idx(&images, &labels, subset, split)
}

pub fn mnist_from_idx(
    images: &IdxImages,
    labels: &[u8],
    subset: Option<usize>,
    split: MnistSplit,
) -> Result<MnistData> {
    if images.count != labels.len() {
        return Err(Error::Format(format!(
            "count mismatch: {} images, {} labels",
            images.count,
            labels.len()
        )));
    }
    let n = subset.map_or(images.count, |s| s.min(images.count));
    if split.train_n == 0 || split.valid_n == 0 || split.train_n + split.valid_n > n {
        return Err(Error::pre(format!(
            "split {}+{} does not fit {n} examples",
            split.train_n, split.valid_n
        )));
    }
    let dim = images.rows * images.cols;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(split.seed, Stream::Data, 3));
    let classes = 10usize.max(labels[..n].iter().map(|&l| l as usize + 1).max().unwrap_or(0));
    let build = |idx: &[usize]| -> Result<Dataset> {
        let mut x = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            x.extend(
                images.pixels[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|&p| p as f64 / MNIST_PIXEL_SCALE),
            );
        }
        Dataset::new(
            Matrix::from_vec(idx.len(), dim, x)?,
            Targets::Classes {
                labels: idx.iter().map(|&i| labels[i] as usize).collect(),
                classes,
            },
        )
    };
    Ok(MnistData {
        train: build(&order[..split.train_n])?,
        valid: build(&order[n - split.valid_n..])?,
    })
}
