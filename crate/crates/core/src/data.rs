//! IDX ingestion, stratified subsetting and synthetic tied-pixel fixtures.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::precision::Real;
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "NSAD_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic at byte 0: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: expected {expected} bytes, got {actual} (data ends at byte offset {actual})")]
    Truncated { expected: usize, actual: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at byte offset {offset} exceeds class range 0..{classes}")]
    LabelRange { label: u8, offset: usize, classes: usize },
    #[error("cannot draw {wanted} examples: class {class} has only {available}")]
    ClassTooSmall { wanted: usize, class: usize, available: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Pixel scaling applied when materializing tensors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Normalization {
    /// `byte / 255`; preserves exact pixel ties.
    #[default]
    Unit,
    /// `(byte / 255 − mean) / std`.
    Standardize { mean: f64, std: f64 },
}

/// Single-channel image dataset stored as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub split: String,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, classes: usize, pixels: Vec<u8>, labels: Vec<u8>, split: &str) -> Result<Self, DataError> {
        if pixels.len() != labels.len() * rows * cols {
            return Err(DataError::CountMismatch {
                images: pixels.len() / (rows * cols).max(1),
                labels: labels.len(),
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(DataError::LabelRange {
                label: l,
                offset: 8 + i,
                classes,
            });
        }
        Ok(Dataset {
            rows,
            cols,
            classes,
            pixels,
            labels,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.rows * self.cols;
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Images `indices` as an `[n,1,rows,cols]` tensor plus their labels.
    pub fn batch<T: Real>(&self, indices: &[usize], norm: Normalization) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.rows * self.cols);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| scale_pixel::<T>(b, norm)));
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (
            Tensor::new(vec![indices.len(), 1, self.rows, self.cols], data).expect("consistent batch shape"),
            labels,
        )
    }

    /// Consecutive mini-batches of `size` covering `0..len` (last one may be short).
    pub fn batches(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.rows * self.cols);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            rows: self.rows,
            cols: self.cols,
            classes: self.classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split.clone(),
        }
    }

    /// Seeded label-stratified subset of `n` examples: class counts differ
    /// by at most one, and the result is shuffled.
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Result<Dataset, DataError> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let mut r = rng::stream(seed, "subset", 0);
        let mut class_order: Vec<usize> = (0..self.classes).collect();
        class_order.shuffle(&mut r);
        let (base, extra) = (n / self.classes, n % self.classes);
        let mut chosen = Vec::with_capacity(n);
        for (rank, &c) in class_order.iter().enumerate() {
            let want = base + usize::from(rank < extra);
            let pool = &mut by_class[c];
            if pool.len() < want {
                return Err(DataError::ClassTooSmall {
                    wanted: want,
                    class: c,
                    available: pool.len(),
                });
            }
            pool.shuffle(&mut r);
            chosen.extend_from_slice(&pool[..want]);
        }
        chosen.shuffle(&mut r);
        Ok(self.select(&chosen))
    }
}

fn scale_pixel<T: Real>(b: u8, norm: Normalization) -> T {
    match norm {
        Normalization::Unit => T::from_f64(b as f64 / 255.0),
        Normalization::Standardize { mean, std } => T::from_f64((b as f64 / 255.0 - mean) / std),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: offset + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX3 image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IMAGES_MAGIC, ds.len() as u32, ds.rows as u32, ds.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&ds.pixels);
    out
}

pub fn encode_idx_labels(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&ds.labels);
    out
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an image/label IDX pair (plain or gzip-compressed).
pub fn load_idx(images: &Path, labels: &Path, split: &str) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Dataset::new(rows, cols, 10, pixels, labels, split)
}

/// Writes an uncompressed IDX pair.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    for (path, bytes) in [(images, encode_idx_images(ds)), (labels, encode_idx_labels(ds))] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Data directory: explicit flag, then `NSAD_DATA_DIR`, then `data/mnist`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn find(dir: &Path, name: &str) -> PathBuf {
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(name)
    }
}

/// Loads the MNIST split from `dir` using the standard file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let stem = split.stem();
    load_idx(
        &find(dir, &format!("{stem}-images-idx3-ubyte")),
        &find(dir, &format!("{stem}-labels-idx1-ubyte")),
        stem,
    )
}

// ------------------------------------------------------------ synthetic

/// Side of the synthetic images.
pub const SYNTH_SIDE: usize = 28;
/// Kernel side and pooling window assumed by the tie guarantee.
pub const SYNTH_KERNEL: usize = 5;
pub const SYNTH_POOL: usize = 2;

/// Pooling windows of the first conv layer's output on synthetic images.
pub fn synth_windows() -> usize {
    let c = (SYNTH_SIDE - SYNTH_KERNEL + 1) / SYNTH_POOL;
    c * c
}

/// Images built from a ramp `4i + j` (strictly increasing along both axes,
/// so a ones-kernel convolution has no ties) with flat patches stamped
/// under `⌈tie_fraction · windows⌉` randomly chosen pooling windows. A
/// fraction of 1 yields constant images.
pub fn synth_tied(count: usize, tie_fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&tie_fraction) {
        return Err(DataError::Invalid(format!("tie_fraction {tie_fraction} not in [0,1]")));
    }
    let side = SYNTH_SIDE;
    let grid = (side - SYNTH_KERNEL + 1) / SYNTH_POOL;
    let windows = grid * grid;
    let tied = (tie_fraction * windows as f64).ceil() as usize;
    let patch = SYNTH_POOL + SYNTH_KERNEL - 1;
    let mut pixels = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    for k in 0..count {
        let mut img: Vec<u8> = (0..side * side).map(|p| (4 * (p / side) + p % side) as u8).collect();
        if tied == windows {
            img.iter_mut().for_each(|v| *v = 200);
        } else {
            let mut r = rng::stream(seed, "synth-tied", k as u64);
            let mut order: Vec<usize> = (0..windows).collect();
            order.shuffle(&mut r);
            for &w in &order[..tied] {
                let (wi, wj) = (w / grid * SYNTH_POOL, w % grid * SYNTH_POOL);
                for i in wi..wi + patch {
                    img[i * side + wj..i * side + wj + patch].fill(200);
                }
            }
        }
        pixels.extend_from_slice(&img);
        labels.push((k % 10) as u8);
    }
    Dataset::new(side, side, 10, pixels, labels, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Dataset {
        let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 256) as u8).collect();
        Dataset::new(28, 28, 10, pixels, vec![3, 1, 4, 1], "fixture").unwrap()
    }

    #[test]
    fn round_trip_bytes() {
        let ds = fixture();
        let img = encode_idx_images(&ds);
        let lab = encode_idx_labels(&ds);
        let (n, r, c, px) = parse_idx_images(&img).unwrap();
        assert_eq!((n, r, c), (4, 28, 28));
        assert_eq!(px, ds.pixels);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![3, 1, 4, 1]);
        let (t, labels) = ds.batch::<f32>(&[0, 1, 2, 3], Normalization::Unit);
        assert_eq!(t.shape(), &[4, 1, 28, 28]);
        assert_eq!(labels, vec![3, 1, 4, 1]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let ds = fixture();
        let img = encode_idx_images(&ds);
        let err = parse_idx_images(&img[..100]).unwrap_err();
        assert!(matches!(err, DataError::Truncated { expected, actual: 100 } if expected == 16 + 4 * 784));
        assert!(err.to_string().contains("expected 3152 bytes, got 100"));
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(DataError::BadMagic { found: 0x801, .. })));
    }

    #[test]
    fn full_intensity_pixel_is_one() {
        let ds = Dataset::new(1, 1, 10, vec![255], vec![0], "x").unwrap();
        assert_eq!(ds.batch::<f32>(&[0], Normalization::Unit).0.item(), 1.0f32);
    }

    #[test]
    fn stratified_subset_balances_classes() {
        let labels: Vec<u8> = (0..500).map(|i| (i * 7 % 10) as u8).collect();
        let ds = Dataset::new(1, 1, 10, vec![0; 500], labels, "x").unwrap();
        let s = ds.stratified_subset(123, 9).unwrap();
        let counts = s.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 123);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(s, ds.stratified_subset(123, 9).unwrap());
    }
}
