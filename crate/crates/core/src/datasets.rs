//! Synthetic task generators and loaders for tabular CSV and IDX image files.
//!
//! Generators are pure functions of their configuration and seed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symlinalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LabelEncoding {
    /// 1 when the product over the support is positive, else 0.
    #[default]
    ZeroOne,
    /// The sign of the product.
    PlusMinusOne,
}

/// Task-specific provenance, written as a JSON sidecar next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "camelCase")]
pub enum TaskMeta {
    #[serde(rename_all = "camelCase")]
    SparseParity {
        d: usize,
        k: usize,
        support: Vec<usize>,
        encoding: LabelEncoding,
        split: String,
    },
    #[serde(rename_all = "camelCase")]
    ModularAddition {
        modulus: usize,
        train_fraction: f64,
        pairs: Vec<(usize, usize)>,
        split: String,
    },
    #[serde(rename_all = "camelCase")]
    Separation { mixture_weight: f64, signal_scale: f64, weight_decay: f64 },
    #[serde(rename_all = "camelCase")]
    DeepLinear { teacher: Vec<Vec<f64>> },
    #[serde(rename_all = "camelCase")]
    Teacher { hidden: usize, input_dim: usize, outputs: usize },
    #[serde(rename_all = "camelCase")]
    Csv {
        path: String,
        label_column: String,
        classes: Vec<String>,
        normalization: Normalization,
    },
    #[serde(rename_all = "camelCase")]
    Idx { images: String, labels: String, limit: Option<usize> },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `n×d` inputs, one sample per row.
    pub x: DMatrix<f64>,
    /// `n×c` targets.
    pub y: DMatrix<f64>,
    /// Sample weights summing to one; `None` means uniform `1/n`.
    pub weights: Option<DVector<f64>>,
    pub meta: TaskMeta,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.ncols()
    }

    /// Writes `<stem>.x.csv`, `<stem>.y.csv` and the `<stem>.meta.json` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        symlinalg::write_matrix_csv(dir.join(format!("{stem}.x.csv")), &self.x)?;
        symlinalg::write_matrix_csv(dir.join(format!("{stem}.y.csv")), &self.y)?;
        if let Some(w) = &self.weights {
            symlinalg::write_matrix_csv(dir.join(format!("{stem}.weights.csv")), &DMatrix::from_column_slice(w.len(), 1, w.as_slice()))?;
        }
        self.write_meta_sidecar(dir.join(format!("{stem}.meta.json")))
    }

    pub fn write_meta_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let sidecar = serde_json::json!({
            "n": self.len(),
            "d": self.input_dim(),
            "c": self.output_dim(),
            "seed": self.seed,
            "weighted": self.weights.is_some(),
            "meta": self.meta,
        });
        std::fs::write(path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if self.x.nrows() != self.y.nrows() {
            return Err(Error::ShapeError("inputs and targets disagree on n".into()));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("dataset contains non-finite entries".into()));
        }
        Ok(())
    }

    /// Random disjoint split into `(train, test)` with `round(n·train_fraction)` training rows.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidConfig("train fraction must lie in (0,1)".into()));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((self.len() as f64) * train_fraction).round() as usize;
        let take = |rows: &[usize]| Dataset {
            x: select_rows(&self.x, rows),
            y: select_rows(&self.y, rows),
            weights: None,
            meta: self.meta.clone(),
            seed: Some(seed),
        };
        Ok((take(&idx[..n_train]), take(&idx[n_train..])))
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SparseParityConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    #[serde(default = "default_parity_test")]
    pub n_test: usize,
    #[serde(default)]
    pub encoding: LabelEncoding,
    #[serde(default)]
    pub seed: u64,
}

fn default_parity_test() -> usize {
    1000
}

impl SparseParityConfig {
    pub fn new(n: usize, d: usize, k: usize, seed: u64) -> Self {
        SparseParityConfig {
            n,
            d,
            k,
            n_test: default_parity_test(),
            encoding: LabelEncoding::ZeroOne,
            seed,
        }
    }
}

/// Label of a sign vector under a parity on `support`.
pub fn parity_label(x: &[f64], support: &[usize], encoding: LabelEncoding) -> f64 {
    let positive = support.iter().filter(|&&s| x[s] < 0.0).count() % 2 == 0;
    match (encoding, positive) {
        (LabelEncoding::ZeroOne, true) => 1.0,
        (LabelEncoding::ZeroOne, false) => 0.0,
        (LabelEncoding::PlusMinusOne, true) => 1.0,
        (LabelEncoding::PlusMinusOne, false) => -1.0,
    }
}

/// Inputs uniform on `{±1/√d}^d`, label from the sign of the product over `k`
/// hidden support coordinates. Returns `(train, test)`.
pub fn gen_sparse_parity(config: &SparseParityConfig) -> Result<(Dataset, Dataset)> {
    let SparseParityConfig { n, d, k, n_test, encoding, seed } = *config;
    if k == 0 || k > d {
        return Err(Error::InvalidConfig(format!("need 1 <= k <= d, got k={k}, d={d}")));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support: Vec<usize> = index::sample(&mut rng, d, k).into_vec();
    support.sort_unstable();
    let scale = 1.0 / (d as f64).sqrt();
    let mut draw = |count: usize, split: &str| {
        let x = DMatrix::from_fn(count, d, |_, _| if rng.random::<bool>() { scale } else { -scale });
        // from_fn fills column-major, so build labels afterwards from rows.
        let y = DMatrix::from_fn(count, 1, |i, _| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            parity_label(&row, &support, encoding)
        });
        Dataset {
            x,
            y,
            weights: None,
            meta: TaskMeta::SparseParity {
                d,
                k,
                support: support.clone(),
                encoding,
                split: split.into(),
            },
            seed: Some(seed),
        }
    };
    let train = draw(n, "train");
    let test = draw(n_test, "test");
    Ok((train, test))
}

/// All `p²` pairs `(a, b)` encoded as concatenated one-hots with one-hot target
/// `(a + b) mod p`, randomly split into `(train, test)`.
pub fn gen_modular_addition(modulus: usize, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if modulus < 2 {
        return Err(Error::InvalidConfig("modulus must be at least 2".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig("train fraction must lie in (0,1)".into()));
    }
    let p = modulus;
    let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((p * p) as f64 * train_fraction).floor() as usize;
    let build = |pairs: &[(usize, usize)], split: &str| {
        let mut x = DMatrix::zeros(pairs.len(), 2 * p);
        let mut y = DMatrix::zeros(pairs.len(), p);
        for (i, &(a, b)) in pairs.iter().enumerate() {
            x[(i, a)] = 1.0;
            x[(i, p + b)] = 1.0;
            y[(i, (a + b) % p)] = 1.0;
        }
        Dataset {
            x,
            y,
            weights: None,
            meta: TaskMeta::ModularAddition {
                modulus: p,
                train_fraction,
                pairs: pairs.to_vec(),
                split: split.into(),
            },
            seed: Some(seed),
        }
    };
    Ok((build(&pairs[..n_train], "train"), build(&pairs[n_train..], "test")))
}

/// Mixture weight `p`, signal scale `τ` and weight decay `λ` for the two-layer separation task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SeparationConfig {
    pub mixture_weight: f64,
    pub signal_scale: f64,
    pub weight_decay: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            mixture_weight: 1e-5,
            signal_scale: 0.02,
            weight_decay: 1e-5,
        }
    }
}

impl SeparationConfig {
    /// `τ = ε³`, `p = ε⁸`, `λ = ε³²·p`.
    pub fn asymptotic(eps: f64) -> Self {
        let p = eps.powi(8);
        SeparationConfig {
            mixture_weight: p,
            signal_scale: eps.powi(3),
            weight_decay: eps.powi(32) * p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mixtureWeight", self.mixture_weight),
            ("signalScale", self.signal_scale),
            ("weightDecay", self.weight_decay),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }

    /// `f*(x) = τ x₁x₂ + x₃x₄`.
    pub fn target(&self, x: &[f64]) -> f64 {
        self.signal_scale * x[0] * x[1] + x[2] * x[3]
    }
}

/// The atom that carries weight `1 − p`.
pub const SEPARATION_ATOM: [f64; 4] = [1.0, 1.0, 0.0, 0.0];

/// The 81 points of `{0,1,2}⁴` with weight `p/81` each, followed by the atom
/// `(1,1,0,0)` with weight `1 − p`.
pub fn gen_separation(config: &SeparationConfig) -> Result<Dataset> {
    config.validate()?;
    let mut x = DMatrix::zeros(82, 4);
    let mut w = DVector::zeros(82);
    for idx in 0..81usize {
        let mut rem = idx;
        for col in 0..4 {
            x[(idx, col)] = (rem % 3) as f64;
            rem /= 3;
        }
        w[idx] = config.mixture_weight / 81.0;
    }
    for col in 0..4 {
        x[(81, col)] = SEPARATION_ATOM[col];
    }
    w[81] = 1.0 - config.mixture_weight;
    let y = DMatrix::from_fn(82, 1, |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        config.target(&row)
    });
    Ok(Dataset {
        x,
        y,
        weights: Some(w),
        meta: TaskMeta::Separation {
            mixture_weight: config.mixture_weight,
            signal_scale: config.signal_scale,
            weight_decay: config.weight_decay,
        },
        seed: None,
    })
}

/// Gaussian inputs with exact linear labels `Y = X W*ᵀ`; also returns the `c×d` teacher.
pub fn gen_deep_linear(n: usize, d: usize, c: usize, seed: u64) -> Result<(Dataset, DMatrix<f64>)> {
    if n == 0 || d == 0 || c == 0 {
        return Err(Error::InvalidConfig("n, d and c must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = DMatrix::from_fn(c, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = &x * teacher.transpose();
    let data = Dataset {
        x,
        y,
        weights: None,
        meta: TaskMeta::DeepLinear {
            teacher: symlinalg::rows_of(&teacher),
        },
        seed: Some(seed),
    };
    Ok((data, teacher))
}

/// Gaussian inputs labelled by a random one-hidden-layer ReLU teacher
/// `y = A·relu(Bx)/√hidden` with standard normal `A`, `B/√d`.
pub fn gen_teacher_regression(n: usize, d: usize, c: usize, hidden: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || c == 0 || hidden == 0 {
        return Err(Error::InvalidConfig("sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(hidden, d, |_, _| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
    let a = DMatrix::from_fn(c, hidden, |_, _| rng.sample::<f64, _>(StandardNormal) / (hidden as f64).sqrt());
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = (&x * b.transpose()).map(|v| v.max(0.0));
    let y = h * a.transpose();
    Ok(Dataset {
        x,
        y,
        weights: None,
        meta: TaskMeta::Teacher {
            hidden,
            input_dim: d,
            outputs: c,
        },
        seed: Some(seed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Normalization {
    #[default]
    None,
    /// Per-column `(v − mean)/std`; constant columns map to zero.
    Zscore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LabelColumn {
    Name(String),
    Index(usize),
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TargetKind {
    /// Labels one-hot encoded over the sorted set of distinct values.
    #[default]
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CsvOptions {
    pub label_column: LabelColumn,
    pub normalization: Normalization,
    pub target: TargetKind,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            label_column: LabelColumn::Last,
            normalization: Normalization::None,
            target: TargetKind::Classification,
        }
    }
}

const VARIANCE_FLOOR: f64 = 1e-12;

/// Reads a rectangular numeric CSV with a header row.
pub fn load_csv_tabular(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::ParseError(format!("{}: header: {e}", path.display())))?
        .clone();
    let ncols = headers.len();
    let label_idx = match &options.label_column {
        LabelColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::ParseError(format!("no column named {name:?}")))?,
        LabelColumn::Index(i) if *i < ncols => *i,
        LabelColumn::Index(i) => return Err(Error::ParseError(format!("label column {i} out of range"))),
        LabelColumn::Last => ncols.checked_sub(1).ok_or_else(|| Error::ParseError("empty header".into()))?,
    };
    if ncols < 2 {
        return Err(Error::ParseError("need at least one feature column and a label column".into()));
    }

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 2;
        let record = record.map_err(|e| Error::ParseError(format!("{}: line {line}: {e}", path.display())))?;
        if record.len() != ncols {
            return Err(Error::ParseError(format!(
                "{}: line {line}: expected {ncols} fields, found {}",
                path.display(),
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(ncols - 1);
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::ParseError(format!("{}: line {line}, column {}: non-numeric cell {cell:?}", path.display(), col + 1))
            })?;
            row.push(v);
        }
        features.push(row);
    }
    let n = features.len();
    if n == 0 {
        return Err(Error::ParseError(format!("{}: no data rows", path.display())));
    }
    let d = ncols - 1;
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    if options.normalization == Normalization::Zscore {
        zscore_columns(&mut x);
    }

    let (y, classes) = match options.target {
        TargetKind::Regression => {
            let vals = raw_labels
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    s.parse::<f64>()
                        .map_err(|_| Error::ParseError(format!("line {}: non-numeric label {s:?}", i + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            (DMatrix::from_column_slice(n, 1, &vals), Vec::new())
        }
        TargetKind::Classification => {
            let classes = sorted_classes(&raw_labels);
            let lookup: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
            let mut y = DMatrix::zeros(n, classes.len());
            for (i, label) in raw_labels.iter().enumerate() {
                y[(i, lookup[label.as_str()])] = 1.0;
            }
            (y, classes)
        }
    };
    let data = Dataset {
        x,
        y,
        weights: None,
        meta: TaskMeta::Csv {
            path: path.display().to_string(),
            label_column: headers[label_idx].to_string(),
            classes,
            normalization: options.normalization,
        },
        seed: None,
    };
    data.check()?;
    Ok(data)
}

/// Distinct labels, numerically sorted when every label parses as a number.
fn sorted_classes(labels: &[String]) -> Vec<String> {
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();
    if classes.iter().all(|c| c.parse::<f64>().is_ok()) {
        classes.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    classes
}

pub fn zscore_columns(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var <= VARIANCE_FLOOR {
            col.fill(0.0);
        } else {
            let sd = var.sqrt();
            col.apply(|v| *v = (*v - mean) / sd);
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::FormatError(format!("{what}: truncated header")))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Loads an IDX image/label pair: pixels scaled to `[0,1]`, one-hot labels,
/// keeping the first `limit` examples.
pub fn load_idx_images(images: impl AsRef<Path>, labels: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img = read_all(images)?;
    let lab = read_all(labels)?;
    let magic = read_u32_be(&img, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::FormatError(format!("images: bad magic {magic:#010x}")));
    }
    let magic = read_u32_be(&lab, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::FormatError(format!("labels: bad magic {magic:#010x}")));
    }
    let count = read_u32_be(&img, 4, "images")? as usize;
    let rows = read_u32_be(&img, 8, "images")? as usize;
    let cols = read_u32_be(&img, 12, "images")? as usize;
    let label_count = read_u32_be(&lab, 4, "labels")? as usize;
    if label_count != count {
        return Err(Error::FormatError(format!("{count} images but {label_count} labels")));
    }
    let pixels = rows * cols;
    if img.len() < 16 + count * pixels {
        return Err(Error::FormatError("images: truncated pixel data".into()));
    }
    if lab.len() < 8 + count {
        return Err(Error::FormatError("labels: truncated label data".into()));
    }
    let all_labels = &lab[8..8 + count];
    let classes = all_labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let n = limit.map_or(count, |l| l.min(count));
    let x = DMatrix::from_fn(n, pixels, |i, j| img[16 + i * pixels + j] as f64 / 255.0);
    let mut y = DMatrix::zeros(n, classes);
    for i in 0..n {
        y[(i, all_labels[i] as usize)] = 1.0;
    }
    Ok(Dataset {
        x,
        y,
        weights: None,
        meta: TaskMeta::Idx {
            images: images.display().to_string(),
            labels: labels.display().to_string(),
            limit,
        },
        seed: None,
    })
}

/// Writes images (each `rows·cols` bytes) in IDX format.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for v in [images.len(), rows, cols] {
        f.write_all(&(v as u32).to_be_bytes())?;
    }
    for image in images {
        if image.len() != rows * cols {
            return Err(Error::ShapeError("image size does not match rows*cols".into()));
        }
        f.write_all(image)?;
    }
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}
