//! Datasets: the per-client [`LocalDataset`], CSV and IDX loaders, and
//! seeded synthetic generators.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Example, ModelSpec, ParamVector};
use crate::seed;

/// A client's examples. After deletions, each remaining example remembers
/// its position in the original pre-deletion dataset; the contents of
/// deleted examples are not retained.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDataset {
    examples: Vec<Example>,
    origin: Vec<usize>,
    original_len: usize,
}

impl LocalDataset {
    pub fn new(examples: Vec<Example>) -> Self {
        let n = examples.len();
        Self {
            examples,
            origin: (0..n).collect(),
            original_len: n,
        }
    }

    pub(crate) fn from_parts(examples: Vec<Example>, origin: Vec<usize>, original_len: usize) -> Self {
        debug_assert_eq!(examples.len(), origin.len());
        Self {
            examples,
            origin,
            original_len,
        }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Mutable access, for fault-injection style tests on remaining data.
    pub fn examples_mut(&mut self) -> &mut [Example] {
        &mut self.examples
    }

    /// Original index of each remaining example.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn deleted_count(&self) -> usize {
        self.original_len - self.examples.len()
    }
}

/// SHA-256 over the bit patterns of all features and labels, in order.
pub fn dataset_hash(data: &[Example]) -> String {
    let mut h = Sha256::new();
    h.update((data.len() as u64).to_le_bytes());
    for ex in data {
        h.update((ex.x.len() as u64).to_le_bytes());
        for v in &ex.x {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(ex.y.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Column mapping for CSV files. Without a header row, columns are named by
/// their zero-based position (`"0"`, `"1"`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Feature columns in order; all non-label columns when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    pub label: String,
}

fn default_true() -> bool {
    true
}

/// Reads a CSV file. Labels must be integers when `integer_labels` is set.
pub fn load_csv(path: &Path, schema: &CsvSchema, integer_labels: bool) -> Result<Vec<Example>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let names: Vec<String> = if schema.has_header {
        reader
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect()
    } else {
        // peek at the first record for the column count
        let width = reader
            .records()
            .next()
            .transpose()
            .map_err(|e| csv_error(path, e))?
            .map_or(0, |r| r.len());
        reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        (0..width).map(|i| i.to_string()).collect()
    };
    let find = |col: &str| {
        names
            .iter()
            .position(|n| n == col)
            .ok_or_else(|| Error::Schema(format!("column `{col}` not found in {}", path.display())))
    };
    let label_col = find(&schema.label)?;
    let feature_cols = match &schema.features {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?,
        None => (0..names.len()).filter(|&i| i != label_col).collect(),
    };

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column {} is not a number: `{raw}`", names[i]),
            })
        };
        let x = feature_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?;
        let y = if integer_labels {
            let raw = record.get(label_col).unwrap_or("").trim();
            raw.parse::<u64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("label `{raw}` is not a class index"),
            })? as f64
        } else {
            parse(label_col)?
        };
        out.push(Example { x, y });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes examples with a header of `schema`'s column names (features
/// default to `x0, x1, ...`). Values use shortest round-trip formatting.
pub fn write_csv(path: &Path, data: &[Example], schema: &CsvSchema) -> Result<()> {
    let width = data.first().map_or(0, |e| e.x.len());
    let features = schema
        .features
        .clone()
        .unwrap_or_else(|| (0..width).map(|i| format!("x{i}")).collect());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if schema.has_header {
        let mut header = features.clone();
        header.push(schema.label.clone());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
    }
    for ex in data {
        let mut row: Vec<String> = ex.x.iter().map(|v| v.to_string()).collect();
        row.push(ex.y.to_string());
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw IDX image file contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<BigEndian>()
        .map_err(|_| Error::Idx(format!("truncated header while reading {what}")))
}

fn read_exact_body(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Idx(format!(
            "truncated {what}: expected {len} bytes, found {}",
            buf.len()
        )));
    }
    Ok(buf)
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!(
            "{}: bad image magic {magic:#010x}",
            path.display()
        )));
    }
    let n = read_u32(&mut r, "image count")? as usize;
    let rows = read_u32(&mut r, "row count")? as usize;
    let cols = read_u32(&mut r, "column count")? as usize;
    let pixels = read_exact_body(&mut r, n * rows * cols, "image data")?;
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!(
            "{}: bad label magic {magic:#010x}",
            path.display()
        )));
    }
    let n = read_u32(&mut r, "label count")? as usize;
    read_exact_body(&mut r, n, "label data")
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(images.count() as u32)?;
    w.write_u32::<BigEndian>(images.rows as u32)?;
    w.write_u32::<BigEndian>(images.cols as u32)?;
    w.write_all(&images.pixels)?;
    w.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Example>> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count() != labels.len() {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            images.count(),
            labels.len()
        )));
    }
    let size = images.rows * images.cols;
    Ok(images
        .pixels
        .chunks_exact(size.max(1))
        .zip(&labels)
        .map(|(px, &y)| Example {
            x: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            y: f64::from(y),
        })
        .collect())
}

/// Ground-truth parameters drawn `N(0, scale^2)` for every coordinate.
pub fn random_true_params(spec: &ModelSpec, scale: f64, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed, &[0x7e0e]);
    ParamVector::new(
        (0..spec.param_count())
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// Standard-normal features with labels sampled from the classifier's own
/// predictive distribution at `true_params`.
pub fn synth_logistic(
    spec: &ModelSpec,
    true_params: &ParamVector,
    n: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    if !spec.kind.is_classifier() {
        return Err(Error::Unsupported("synthetic classification data"));
    }
    let mut rng = seed::rng(seed, &[0x5e17]);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..spec.input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let probs = spec.predict(true_params, &x)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    y = k;
                    break;
                }
            }
            Ok(Example { x, y: y as f64 })
        })
        .collect()
}

/// Standard-normal features with `y = f(x) + noise_std * N(0, 1)`.
pub fn synth_regression(
    spec: &ModelSpec,
    true_params: &ParamVector,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut rng = seed::rng(seed, &[0x5e18]);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..spec.input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let y = spec.predict(true_params, &x)?[0] + noise_std * noise;
            Ok(Example { x, y })
        })
        .collect()
}
