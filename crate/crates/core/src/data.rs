//! Datasets: ingestion of MNIST / CIFAR-10, synthetic blobs, balanced
//! sampling, splits, and the `RKDS` container for distilled datasets.
//!
//! Pixel values stay in raw `[0, 1]` units. Attack radii are expressed in the
//! same units, so no standardization is applied anywhere.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const LABEL_SUM_TOL: f64 = 1e-9;

/// Paired examples (`n × d`) and labels (`n × k`) with a valid pixel box.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Array2<f64>,
    labels: Array2<f64>,
    bounds: (f64, f64),
    labels_free: bool,
    name: String,
}

impl Dataset {
    /// Builds a dataset, checking every invariant.
    ///
    /// `labels_free` selects the label regime: `false` requires every label
    /// row to sum to one, `true` admits arbitrary reals (learned labels).
    pub fn new(
        examples: Array2<f64>,
        labels: Array2<f64>,
        bounds: (f64, f64),
        labels_free: bool,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = examples.dim();
        let (ln, k) = labels.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidDataset(format!("empty dataset ({n} x {d})")));
        }
        if ln != n {
            return Err(Error::InvalidDataset(format!(
                "{n} examples but {ln} label rows"
            )));
        }
        if k < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {k}"
            )));
        }
        let (lo, hi) = bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidDataset(format!("bad bounds ({lo}, {hi})")));
        }
        if let Some(v) = examples.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::InvalidDataset(format!(
                "example value {v} outside [{lo}, {hi}]"
            )));
        }
        if labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("labels"));
        }
        if !labels_free {
            for (i, row) in labels.rows().into_iter().enumerate() {
                let s = row.sum();
                if (s - 1.0).abs() > LABEL_SUM_TOL {
                    return Err(Error::InvalidDataset(format!(
                        "label row {i} sums to {s}; set labels_free for learned labels"
                    )));
                }
            }
        }
        Ok(Self {
            examples,
            labels,
            bounds,
            labels_free,
            name: name.into(),
        })
    }

    /// One-hot labels from class indices.
    pub fn from_class_indices(
        examples: Array2<f64>,
        classes: &[usize],
        class_count: usize,
        bounds: (f64, f64),
        name: impl Into<String>,
    ) -> Result<Self> {
        Self::new(
            examples,
            one_hot(classes, class_count)?,
            bounds,
            false,
            name,
        )
    }

    pub fn examples(&self) -> &Array2<f64> {
        &self.examples
    }

    pub fn labels(&self) -> &Array2<f64> {
        &self.labels
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn labels_free(&self) -> bool {
        self.labels_free
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.examples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.labels.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>) {
        (self.examples, self.labels)
    }

    /// Argmax class of every label row (first maximum on ties).
    pub fn class_indices(&self) -> Vec<usize> {
        argmax_rows(self.labels.view())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count()];
        for c in self.class_indices() {
            hist[c] += 1;
        }
        hist
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidDataset("empty selection".into()));
        }
        Ok(Self {
            examples: self.examples.select(Axis(0), indices),
            labels: self.labels.select(Axis(0), indices),
            bounds: self.bounds,
            labels_free: self.labels_free,
            name: name.into(),
        })
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Index of the largest entry of each row; ties resolve to the lowest index.
pub fn argmax_rows(m: ArrayView2<'_, f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn one_hot(classes: &[usize], class_count: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((classes.len(), class_count));
    for (i, &c) in classes.iter().enumerate() {
        if c >= class_count {
            return Err(Error::InvalidDataset(format!(
                "class {c} out of range for {class_count} classes"
            )));
        }
        out[[i, c]] = 1.0;
    }
    Ok(out)
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "truncated IDX header",
            ))
        })
}

fn truncated(what: &str, need: usize, have: usize) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated {what}: need {need} bytes, have {have}"),
    ))
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Parses an IDX image/label file pair (optionally gzipped).
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_maybe_gz(images_path.as_ref())?;
    let labels = read_maybe_gz(labels_path.as_ref())?;
    parse_mnist(&images, &labels)
}

pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "image magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "label magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::format(format!(
            "image header declares {n} items, label header {n_labels}"
        )));
    }
    let d = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n * d {
        return Err(truncated("image payload", n * d, pixels.len()));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n {
        return Err(truncated("label payload", n, label_bytes.len()));
    }
    let examples = Array2::from_shape_fn((n, d), |(i, j)| f64::from(pixels[i * d + j]) / 255.0);
    let classes: Vec<usize> = label_bytes[..n].iter().map(|&b| b as usize).collect();
    Dataset::from_class_indices(examples, &classes, 10, (0.0, 1.0), "mnist")
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parses CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes per record).
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut payloads = Vec::with_capacity(batch_paths.len());
    for path in batch_paths {
        payloads.push(read_maybe_gz(path.as_ref())?);
    }
    parse_cifar10(&payloads.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

pub fn parse_cifar10(batches: &[&[u8]]) -> Result<Dataset> {
    let mut classes = Vec::new();
    let mut pixels: Vec<f64> = Vec::new();
    for (b, bytes) in batches.iter().enumerate() {
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(format!(
                "batch {b}: length {} is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            classes.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&p| f64::from(p) / 255.0));
        }
    }
    if classes.is_empty() {
        return Err(Error::format("no CIFAR-10 records"));
    }
    let examples = Array2::from_shape_vec((classes.len(), CIFAR_PIXELS), pixels)
        .map_err(|e| Error::format(e.to_string()))?;
    Dataset::from_class_indices(examples, &classes, 10, (0.0, 1.0), "cifar10")
}

/// Standard deviation of the isotropic noise in [`synth_gaussians`].
pub const SYNTH_NOISE_STD: f64 = 0.05;

/// `k` Gaussian blobs in `[0,1]^d`.
///
/// Class `c` is centred at `0.5 ± a·e_{c mod d}` (sign flips for `c ≥ d`) with
/// `a = separation / √2`, so distinct means on distinct axes are exactly
/// `separation` apart. Samples are clipped to the box.
pub fn synth_gaussians(
    n_per_class: usize,
    k: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || d < 2 {
        return Err(Error::config(format!(
            "synth_gaussians needs k >= 2 and d >= 2 (got k={k}, d={d})"
        )));
    }
    if k > 2 * d {
        return Err(Error::config(format!(
            "at most 2d = {} classes fit on the axes",
            2 * d
        )));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be positive"));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let noise = Normal::new(0.0, SYNTH_NOISE_STD).expect("valid std");
    let mut rng = seed::rng(seed::stream_seed(seed, "synth_gaussians"));
    let n = n_per_class * k;
    let mut examples = Array2::zeros((n, d));
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        // interleave classes so prefixes stay balanced
        let c = i % k;
        classes.push(c);
        let axis = c % d;
        let sign = if c < d { 1.0 } else { -1.0 };
        for j in 0..d {
            let mean = if j == axis { 0.5 + sign * offset } else { 0.5 };
            examples[[i, j]] = (mean + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Dataset::from_class_indices(examples, &classes, k, (0.0, 1.0), "synth_gaussians")
}

/// Exactly `per_class` examples of each class, shuffled by `seed`.
pub fn sample_balanced(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = seed::rng(seed::stream_seed(seed, "sample_balanced"));
    let mut by_class = vec![Vec::new(); ds.class_count()];
    for (i, c) in ds.class_indices().into_iter().enumerate() {
        by_class[c].push(i);
    }
    let mut chosen = Vec::with_capacity(per_class * ds.class_count());
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::Capacity {
                class,
                available: members.len(),
                requested: per_class,
            });
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.shuffle(&mut rng);
    ds.select(&chosen, format!("{}-balanced{per_class}", ds.name()))
}

/// Deterministic train/validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Fraction of the non-validation remainder kept for training.
    pub train_fraction: f64,
    pub validation_count: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Shuffles with `seed`, takes the first `validation_count` rows as
    /// validation and the leading `train_fraction` of the rest as training.
    pub fn split(&self, ds: &Dataset) -> Result<(Dataset, Dataset)> {
        let n = ds.len();
        if self.validation_count == 0 || self.validation_count >= n {
            return Err(Error::config(format!(
                "validation_count {} must lie in 1..{n}",
                self.validation_count
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1]"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::stream_seed(self.seed, "split")));
        let (val, rest) = order.split_at(self.validation_count);
        let keep = ((rest.len() as f64) * self.train_fraction).floor().max(1.0) as usize;
        Ok((
            ds.select(&rest[..keep], format!("{}-train", ds.name()))?,
            ds.select(val, format!("{}-val", ds.name()))?,
        ))
    }
}

const RKDS_MAGIC: &[u8; 4] = b"RKDS";
const RKDS_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RkdsHeader {
    n: usize,
    d: usize,
    k: usize,
    lo: f64,
    hi: f64,
    labels_free: bool,
    name: String,
}

/// Writes `magic | version | u32-LE header length | JSON header | f64-LE examples | f64-LE labels`.
pub fn encode_distilled(ds: &Dataset) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&RkdsHeader {
        n: ds.len(),
        d: ds.dim(),
        k: ds.class_count(),
        lo: ds.bounds.0,
        hi: ds.bounds.1,
        labels_free: ds.labels_free,
        name: ds.name.clone(),
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::format("header too large"))?;
    let mut out = Vec::with_capacity(9 + header.len() + 8 * (ds.examples.len() + ds.labels.len()));
    out.extend_from_slice(RKDS_MAGIC);
    out.push(RKDS_VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in ds.examples.iter().chain(ds.labels.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_distilled(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 9 || &bytes[..4] != RKDS_MAGIC {
        return Err(Error::format("missing RKDS magic"));
    }
    if bytes[4] != RKDS_VERSION {
        return Err(Error::UnsupportedVersion {
            found: bytes[4],
            expected: RKDS_VERSION,
        });
    }
    let header_len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let body = &bytes[9..];
    if body.len() < header_len {
        return Err(Error::format("truncated RKDS header"));
    }
    let header: RkdsHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format(format!("bad RKDS header: {e}")))?;
    let payload = &body[header_len..];
    let floats = header.n * header.d + header.n * header.k;
    if payload.len() != 8 * floats {
        return Err(Error::format(format!(
            "RKDS payload has {} bytes, header implies {}",
            payload.len(),
            8 * floats
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let examples: Vec<f64> = values.by_ref().take(header.n * header.d).collect();
    let labels: Vec<f64> = values.collect();
    let shape_err = |e: ndarray::ShapeError| Error::format(e.to_string());
    Dataset::new(
        Array2::from_shape_vec((header.n, header.d), examples).map_err(shape_err)?,
        Array2::from_shape_vec((header.n, header.k), labels).map_err(shape_err)?,
        (header.lo, header.hi),
        header.labels_free,
        header.name,
    )
}

pub fn save_distilled(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_distilled(ds)?;
    File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_distilled(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_distilled(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_header_bytes_and_scaling() {
        let images = idx_images(2, 2, 2, &[0, 255, 51, 0, 255, 255, 255, 255]);
        assert_eq!(&images[..4], &[0x00, 0x00, 0x08, 0x03]);
        let ds = parse_mnist(&images, &idx_labels(&[7, 0])).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.class_count()), (2, 4, 10));
        assert_eq!(ds.examples()[[0, 1]], 1.0);
        assert_eq!(ds.examples()[[0, 0]], 0.0);
        assert_eq!(ds.examples()[[0, 2]], 0.2);
        assert_eq!(ds.labels()[[0, 7]], 1.0);
        assert_eq!(ds.labels().row(0).sum(), 1.0);
        assert_eq!(ds.bounds(), (0.0, 1.0));
    }

    #[test]
    fn idx_full_size_header_dimensions() {
        let header = idx_images(60000, 28, 28, &[]);
        assert_eq!(be_u32(&header, 4).unwrap(), 60000);
        // payload absent: the loader must report truncation, not panic
        let err = parse_mnist(&header, &idx_labels(&[0; 4])).unwrap_err();
        assert!(matches!(err, Error::Format(_) | Error::Io(_)));
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x04;
        assert!(matches!(
            parse_mnist(&bad, &idx_labels(&[1])),
            Err(Error::Format(_))
        ));
        let good = idx_images(1, 1, 1, &[0]);
        assert!(matches!(
            parse_mnist(&good, &idx_labels(&[1, 2])),
            Err(Error::Format(_))
        ));
        let short = idx_images(2, 1, 1, &[0]);
        let mut labels = idx_labels(&[1, 2]);
        assert!(matches!(parse_mnist(&short, &labels), Err(Error::Io(_))));
        labels.truncate(9);
        assert!(matches!(
            parse_mnist(&idx_images(2, 1, 1, &[0, 0]), &labels),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn cifar_records() {
        let mut record = vec![0u8; CIFAR_RECORD];
        record[0] = 3;
        record[5] = 255;
        let ds = parse_cifar10(&[&record]).unwrap();
        assert_eq!((ds.len(), ds.dim()), (1, 3072));
        assert_eq!(ds.labels()[[0, 3]], 1.0);
        assert_eq!(ds.examples()[[0, 0]], 0.0);
        assert_eq!(ds.examples()[[0, 4]], 1.0);

        let batch: Vec<u8> = record
            .iter()
            .copied()
            .cycle()
            .take(CIFAR_RECORD * 4)
            .collect();
        let ds = parse_cifar10(&[&batch, &batch, &record]).unwrap();
        assert_eq!(ds.len(), 9);

        assert!(matches!(
            parse_cifar10(&[&record[..100]]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn synth_small_case() {
        let ds = synth_gaussians(1, 2, 2, 0.5, 0).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels().row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(ds.labels().row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(synth_gaussians(1, 2, 2, 0.5, 0).unwrap(), ds);
        assert!(synth_gaussians(1, 1, 2, 0.5, 0).is_err());
    }

    #[test]
    fn synth_zero_separation_shares_means() {
        let ds = synth_gaussians(400, 2, 3, 0.0, 4).unwrap();
        let classes = ds.class_indices();
        for j in 0..3 {
            let mean = |c: usize| {
                let vals: Vec<f64> = (0..ds.len())
                    .filter(|&i| classes[i] == c)
                    .map(|i| ds.examples()[[i, j]])
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            assert!((mean(0) - mean(1)).abs() < 0.02);
        }
    }

    #[test]
    fn balanced_sampling() {
        let ds = synth_gaussians(5, 10, 8, 0.5, 1).unwrap();
        let one = sample_balanced(&ds, 1, 3).unwrap();
        assert_eq!(one.len(), 10);
        assert_eq!(one.class_histogram(), vec![1; 10]);
        assert_eq!(sample_balanced(&ds, 1, 3).unwrap(), one);
        match sample_balanced(&ds, 6, 3) {
            Err(Error::Capacity {
                available: 5,
                requested: 6,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = synth_gaussians(10, 2, 2, 0.5, 1).unwrap();
        let spec = SplitSpec {
            train_fraction: 1.0,
            validation_count: 5,
            seed: 9,
        };
        let (a, b) = spec.split(&ds).unwrap();
        assert_eq!((a.len(), b.len()), (15, 5));
        assert_eq!(spec.split(&ds).unwrap().0, a);
        let bad = SplitSpec {
            validation_count: 20,
            ..spec
        };
        assert!(bad.split(&ds).is_err());
    }

    #[test]
    fn label_regimes() {
        let x = array![[0.1, 0.2]];
        assert!(Dataset::new(x.clone(), array![[0.5, 0.4]], (0.0, 1.0), false, "t").is_err());
        assert!(Dataset::new(x.clone(), array![[2.5, -0.4]], (0.0, 1.0), true, "t").is_ok());
        assert!(Dataset::new(
            array![[1.5, 0.0]],
            array![[1.0, 0.0]],
            (0.0, 1.0),
            false,
            "t"
        )
        .is_err());
    }

    #[test]
    fn rkds_header_layout_and_errors() {
        let ds = synth_gaussians(1, 2, 2, 0.5, 0).unwrap();
        let bytes = encode_distilled(&ds).unwrap();
        assert_eq!(&bytes[..4], b"RKDS");
        assert_eq!(bytes[4], 1);
        assert_eq!(decode_distilled(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_distilled(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_distilled(&v2),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        let mut short = bytes;
        short.pop();
        assert!(matches!(decode_distilled(&short), Err(Error::Format(_))));
    }
}
