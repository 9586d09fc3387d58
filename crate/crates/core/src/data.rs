//! MNIST IDX ingestion, dataset slicing, and the on-disk checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! b"SPATROB1" | manifest length (u32 LE) | manifest (UTF-8 JSON) | weights (f32 LE)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{LayerSpec, Network, Real};
use crate::rng;
use crate::warp::black_canvas_pad;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPATROB1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    split: String,
}

impl Dataset {
    /// Checks that lengths agree, every label is below `num_classes`, every pixel lies in
    /// `[0, 1]`, and all images share one shape.
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= 10) {
            return Err(Error::invalid(format!("label {y} out of range [0, 10)")));
        }
        if let Some(first) = images.first() {
            for im in &images {
                if !im.same_shape(first) {
                    return Err(Error::invalid("all images in a dataset must share one shape"));
                }
                if im.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("pixel values must lie in [0, 1]"));
                }
            }
        }
        Ok(Dataset {
            images,
            labels,
            split: split.into(),
        })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<(&ImageTensor, usize)> {
        Some((self.images.get(i)?, self.labels[i]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageTensor, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> [usize; 10] {
        let mut c = [0; 10];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Zero-pads every image by `pad` pixels on each side.
    pub fn black_canvas(&self, pad: usize) -> Result<Dataset> {
        let images = self
            .images
            .iter()
            .map(|im| black_canvas_pad(im, pad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            split: self.split.clone(),
        })
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {i} out of range for {} examples", self.len())));
        }
        Ok(Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split.clone(),
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image file into `1 × rows × cols` tensors scaled to `[0, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let size = rows * cols;
    // absurd headers saturate, so they report as truncated instead of overflowing
    let need = n.saturating_mul(rows).saturating_mul(cols).saturating_add(16);
    check_len(&bytes, need, path)?;
    Ok(bytes[16..16 + n * size]
        .chunks_exact(size.max(1))
        .take(n)
        .map(|px| {
            let data = px.iter().map(|&b| b as f64 / 255.0).collect();
            ImageTensor::new(1, rows, cols, data).expect("byte pixels are finite")
        })
        .collect())
}

/// Parses an IDX label file.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    check_len(&bytes, 8 + n, path)?;
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads a paired IDX images/labels dataset; gzip input is detected automatically.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = load_idx_images(&images_path)?;
    let labels = load_idx_labels(&labels_path)?;
    let split = images_path
        .as_ref()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, split)
}

/// Writes an uncompressed IDX image file. Pixels are rounded from `[0, 1]` to bytes.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[ImageTensor]) -> Result<()> {
    let (rows, cols) = images.first().map(|im| (im.height(), im.width())).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        if im.channels() != 1 || im.height() != rows || im.width() != cols {
            return Err(Error::invalid("IDX images must be single-channel and share one shape"));
        }
        out.extend(im.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    write_atomic(path.as_ref(), &out)
}

/// Writes an uncompressed IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        out.push(u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit a byte")))?);
    }
    write_atomic(path.as_ref(), &out)
}

/// Deterministic subsample of `n` examples without replacement, returned in original order.
///
/// Each class receives its share of `n` rounded by largest remainder, which keeps class
/// proportions within one example of the source's.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let total = dataset.len();
    if n > total {
        return Err(Error::invalid(format!("subset of {n} requested from {total} examples")));
    }
    let counts = dataset.class_counts();
    let mut quota = [0usize; 10];
    let mut rema: Vec<(usize, usize)> = Vec::with_capacity(10);
    for k in 0..10 {
        let exact = counts[k] * n;
        quota[k] = exact / total.max(1);
        rema.push((exact % total.max(1), k));
    }
    let short = n - quota.iter().sum::<usize>();
    // largest remainder first, lower class on ties
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in rema.iter().take(short) {
        quota[k] += 1;
    }

    let mut r = rng::seeded(seed);
    let mut chosen = Vec::with_capacity(n);
    for (k, &q) in quota.iter().enumerate() {
        let mut idx: Vec<usize> = (0..total).filter(|&i| dataset.labels[i] == k).collect();
        idx.shuffle(&mut r);
        chosen.extend_from_slice(&idx[..q]);
    }
    chosen.sort_unstable();
    dataset.select(&chosen)
}

/// How a checkpoint's weights were produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub policy: String,
    pub init_seed: u64,
    pub order_seed: u64,
    pub augment_seed: u64,
    pub epochs: usize,
    /// Side length the network was trained at.
    #[serde(default)]
    pub input_size: usize,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    in_channels: usize,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    weight_order: String,
    weight_count: usize,
    provenance: Provenance,
}

const WEIGHT_ORDER: &str = "per conv layer in order: weight[out][in][ky][kx] then bias[out]";

/// Serializes a network (as 32-bit floats) with its provenance.
pub fn checkpoint_bytes<T: Real>(net: &Network<T>, provenance: &Provenance) -> Result<Vec<u8>> {
    let flat = net.flat_params();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        in_channels: net.in_channels(),
        num_classes: net.num_classes(),
        layers: net.specs(),
        weight_order: WEIGHT_ORDER.to_string(),
        weight_count: flat.len(),
        provenance: provenance.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for w in flat {
        out.extend_from_slice(&(w.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses checkpoint bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Network<f32>, Provenance)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpointMagic);
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| Error::Manifest(format!("manifest length {mlen} exceeds file size")))?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| Error::Manifest(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Manifest("missing version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            found: version.min(u32::MAX as u64) as u32,
            supported: CHECKPOINT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))?;
    let blob = &bytes[12 + mlen..];
    if blob.len() % 4 != 0 || blob.len() / 4 != m.weight_count {
        return Err(Error::WeightCount {
            expected: m.weight_count,
            found: blob.len() / 4,
        });
    }
    let flat: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let net = Network::from_specs(m.in_channels, m.num_classes, &m.layers, &flat)?;
    Ok((net, m.provenance))
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint<T: Real>(net: &Network<T>, provenance: &Provenance, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(net, provenance)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network<f32>, Provenance)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    tmp.set_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
