//! Datasets, loaders and the translation shifts.
//!
//! IDX files may be gzip-compressed; byte offsets in errors then refer to
//! the decompressed stream.

use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Once;

use flate2::read::GzDecoder;
use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ricci::MAX_OFFSET;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Samples as rows of a feature matrix, with optional image geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    image_dims: Option<(usize, usize)>,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        image_dims: Option<(usize, usize)>,
        split: Split,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Argument("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Argument(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if let Some((h, w)) = image_dims {
            if h * w != features.ncols() {
                return Err(Error::Shape(format!(
                    "image {h}x{w} does not match {} features",
                    features.ncols()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            image_dims,
            split,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.image_dims
    }
    pub fn split(&self) -> Split {
        self.split
    }

    /// Rows at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// Scalar mean and standard deviation over every feature value.
    pub fn feature_stats(&self) -> (f64, f64) {
        let n = self.features.len() as f64;
        let mean = self.features.sum() / n;
        let var = self.features.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// `(x − mean) / std`; a zero std leaves values centred but unscaled.
    pub fn standardize(&mut self, mean: f64, std: f64) {
        let inv = if std > 0.0 { 1.0 / std } else { 1.0 };
        self.features.mapv_inplace(|v| (v - mean) * inv);
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.features = self.features.slice(s![..n, ..]).to_owned();
            self.labels.truncate(n);
        }
    }
}

/// Standardizes both splits with statistics from the training split.
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) {
    let (mean, std) = train.feature_stats();
    train.standardize(mean, std);
    test.standardize(mean, std);
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxHeader {
    dims: Vec<usize>,
    data_offset: usize,
}

fn parse_idx_header(bytes: &[u8], path: &Path, expected_magic: u32) -> Result<IdxHeader> {
    let fail = |offset: usize, detail: String| Error::FormatAtByte {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    let word = |offset: usize, what: &str| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| fail(offset.min(bytes.len()), format!("truncated while reading {what}")))
    };
    let magic = word(0, "magic")?;
    if magic != expected_magic {
        return Err(fail(
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| word(4 + 4 * d, &format!("dimension {d}")).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let data_offset = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    if bytes.len() < data_offset + need {
        return Err(fail(
            bytes.len(),
            format!(
                "truncated payload: {need} bytes expected after offset {data_offset}"
            ),
        ));
    }
    if bytes.len() > data_offset + need {
        return Err(fail(data_offset + need, "trailing bytes after payload".into()));
    }
    Ok(IdxHeader { dims, data_offset })
}

/// Raw `(count, rows, cols, pixels)` from an IDX image file.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let h = parse_idx_header(&bytes, path, 0x0000_0803)?;
    let (n, r, c) = (h.dims[0], h.dims[1], h.dims[2]);
    Ok((n, r, c, bytes[h.data_offset..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let h = parse_idx_header(&bytes, path, 0x0000_0801)?;
    Ok(bytes[h.data_offset..].to_vec())
}

/// Loads an image/label IDX pair, pixels scaled to `[0, 1]`.
/// Standardization is left to [`standardize_pair`].
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(Error::Shape(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            raw_labels.len()
        )));
    }
    let features = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .expect("sized by header");
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(features, labels, num_classes, Some((rows, cols)), split)
}

/// Writes an IDX image file (uncompressed).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for d in [n, rows, cols] {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend_from_slice(pixels);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads `x0,x1,…,label` rows.
pub fn load_csv(path: &Path, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let bad = |line: u64, detail: String| Error::FormatAtLine {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() < 2 || headers.get(headers.len() - 1).map(str::trim) != Some("label") {
        return Err(bad(1, "header must be x0,...,label".into()));
    }
    let width = headers.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(bad(
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for field in record.iter().take(width - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(line, format!("'{field}' is not a number")))?;
            values.push(v);
        }
        let label = record[width - 1].trim();
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| bad(line, format!("'{label}' is not a class index")))?,
        );
    }
    if labels.is_empty() {
        return Err(bad(2, "no data rows".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), width - 1), values).expect("sized");
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes, None, split)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::FormatAtLine {
            path: path.to_path_buf(),
            line: line.unwrap_or(0),
            detail: format!("{other:?}"),
        },
    }
}

/// Writes a dataset as CSV with full round-trip precision.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..dataset.num_features()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (row, label) in dataset.features.outer_iter().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

static FLAT_WARNING: Once = Once::new();

/// Shifts every image in the batch by `dx` columns and `dy` rows, filling
/// vacated pixels with zero. Flat features are returned unchanged.
pub fn translate(
    batch: &Array2<f64>,
    image_dims: Option<(usize, usize)>,
    dx: i32,
    dy: i32,
) -> Result<Array2<f64>> {
    if dx.abs() > MAX_OFFSET || dy.abs() > MAX_OFFSET {
        return Err(Error::Argument(format!(
            "translation ({dx}, {dy}) exceeds {MAX_OFFSET} pixels"
        )));
    }
    let Some((h, w)) = image_dims else {
        if dx != 0 || dy != 0 {
            FLAT_WARNING.call_once(|| {
                log::warn!("translation requested on flat features; using the identity")
            });
        }
        return Ok(batch.clone());
    };
    if h * w != batch.ncols() {
        return Err(Error::Shape(format!(
            "image {h}x{w} does not match {} features",
            batch.ncols()
        )));
    }
    if dx == 0 && dy == 0 {
        return Ok(batch.clone());
    }
    let mut out = Array2::zeros(batch.raw_dim());
    let (dx, dy) = (dx as isize, dy as isize);
    let (h, w) = (h as isize, w as isize);
    for (src, mut dst) in batch.outer_iter().zip(out.outer_iter_mut()) {
        for r in 0..h {
            let sr = r - dy;
            if !(0..h).contains(&sr) {
                continue;
            }
            for c in 0..w {
                let sc = c - dx;
                if (0..w).contains(&sc) {
                    dst[(r * w + c) as usize] = src[(sr * w + sc) as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Two Gaussian blobs in 2-D centred at `(−2, −2)` and `(2, 2)`.
pub fn synthetic_blobs(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.6).expect("valid");
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let c = if label == 0 { -2.0 } else { 2.0 };
        x[[i, 0]] = c + noise.sample(&mut rng);
        x[[i, 1]] = c + noise.sample(&mut rng);
        y.push(label);
    }
    Dataset::new(x, y, 2, None, split)
}

/// Four Gaussian clusters on the corners of a square, labelled by XOR of
/// the coordinate signs.
pub fn synthetic_xor(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.4).expect("valid");
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let corner = i % 4;
        let (sx, sy) = (corner & 1, corner >> 1);
        let cx = if sx == 1 { 1.5 } else { -1.5 };
        let cy = if sy == 1 { 1.5 } else { -1.5 };
        x[[i, 0]] = cx + noise.sample(&mut rng);
        x[[i, 1]] = cy + noise.sample(&mut rng);
        y.push(sx ^ sy);
    }
    Dataset::new(x, y, 2, None, split)
}
