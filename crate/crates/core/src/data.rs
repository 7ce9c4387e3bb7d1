//! Datasets: a synthetic blob-image generator, IDX and CIFAR-10 binary
//! parsers, and crop/flip augmentation with replayable records.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable consulted for the dataset directory.
pub const DATA_DIR_ENV: &str = "ATAS_DATA_DIR";

pub const CIFAR_RECORD: usize = 3073;

/// Labelled image collection, `N × C × H × W` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: String,
    fingerprint: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Shape(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        let fingerprint = fingerprint(&images, &labels);
        Ok(Self {
            images,
            labels,
            classes,
            split: split.to_string(),
            fingerprint,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    /// SHA-256 over shape, pixels and labels.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example `[C, H, W]` shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn batch(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(ids),
            ids.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Keeps the first `n` examples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let ids: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&ids);
        Self::new(images, labels, self.classes, &self.split)
    }
}

fn fingerprint(images: &Tensor, labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for &d in images.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in images.data() {
        h.update(v.to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub side: usize,
    /// 0 reproduces each class prototype exactly; larger values add blob
    /// jitter, amplitude variation and pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            channels: 1,
            side: 28,
            noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    /// Spread along and across the blob's major axis, in pixels.
    major: f64,
    minor: f64,
    angle: f64,
    channel: usize,
}

const BLOBS_PER_CLASS: usize = 4;
/// Blob peak before clamping; values above 1 saturate into a flat core,
/// which gives near-binary, stroke-like images.
const BLOB_GAIN: f64 = 1.8;

fn render_blob(img: &mut [f64], side: usize, b: &Blob, amp: f64) {
    let plane = &mut img[b.channel * side * side..(b.channel + 1) * side * side];
    let (s, c) = b.angle.sin_cos();
    let (ia, ib) = (0.5 / (b.major * b.major), 0.5 / (b.minor * b.minor));
    for i in 0..side {
        let dy = i as f64 - b.cy;
        for j in 0..side {
            let dx = j as f64 - b.cx;
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            let g = BLOB_GAIN * amp * (-(u * u * ia + v * v * ib)).exp();
            let p = &mut plane[i * side + j];
            *p = p.max(g);
        }
    }
}

/// Class-conditional images built from saturated anisotropic Gaussian
/// blobs, deterministic in `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.channels == 0 || spec.side < 4 {
        return Err(Error::InvalidArgument(format!("invalid synthetic spec {spec:?}")));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let side = spec.side as f64;
    let unit = side / 28.0;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..BLOBS_PER_CLASS)
                .map(|_| Blob {
                    cy: layout_rng.random_range(0.25 * side..0.75 * side),
                    cx: layout_rng.random_range(0.25 * side..0.75 * side),
                    major: unit * layout_rng.random_range(2.5..5.0),
                    minor: unit * layout_rng.random_range(0.9..1.4),
                    angle: layout_rng.random_range(0.0..std::f64::consts::PI),
                    channel: layout_rng.random_range(0..spec.channels),
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let per_image = spec.channels * spec.side * spec.side;
    let n = spec.classes * spec.per_class;
    let mut data = vec![0.0; n * per_image];
    let mut labels = Vec::with_capacity(n);
    let noise = spec.noise;
    // Interleave classes so any prefix is roughly balanced.
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class);
        let img = &mut data[i * per_image..(i + 1) * per_image];
        let (sy, sx) = (
            1.5 * unit * noise * normal.sample(&mut rng),
            1.5 * unit * noise * normal.sample(&mut rng),
        );
        for blob in &prototypes[class] {
            let jitter = Blob {
                cy: blob.cy + sy + unit * noise * normal.sample(&mut rng),
                cx: blob.cx + sx + unit * noise * normal.sample(&mut rng),
                angle: blob.angle + 0.3 * noise * normal.sample(&mut rng),
                ..*blob
            };
            let amp = 1.0 - 0.3 * noise.min(1.0) * rng.random::<f64>();
            render_blob(img, spec.side, &jitter, amp);
        }
        if noise > 0.0 {
            for v in img.iter_mut() {
                *v += 0.05 * noise * normal.sample(&mut rng);
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let images = Tensor::new(vec![n, spec.channels, spec.side, spec.side], data)?;
    Dataset::new(images, labels, spec.classes, "synthetic")
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an unsigned-byte IDX file. Arrays of rank ≥ 2 (images) are
/// scaled to `[0, 1]`; rank-1 arrays (labels) keep their raw values.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(Error::Format(format!("bad IDX magic {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    if ndim == 0 {
        return Err(Error::Format("IDX file with zero dimensions".into()));
    }
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    if bytes.len() < header + count {
        return Err(Error::Truncated {
            expected: header + count,
            actual: bytes.len(),
        });
    }
    if bytes.len() > header + count {
        return Err(Error::Format(format!(
            "{} trailing bytes after IDX payload",
            bytes.len() - header - count
        )));
    }
    let payload = &bytes[header..header + count];
    let scale = if ndim >= 2 { 1.0 / 255.0 } else { 1.0 };
    Tensor::new(dims, payload.iter().map(|&b| b as f64 * scale).collect())
}

/// Writes `[N, H, W]` images in `[0, 1]` as an IDX u8 file (magic 0x00000803).
pub fn write_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    if images.ndim() != 3 {
        return Err(Error::Shape(format!("IDX images must be N×H×W, got {:?}", images.shape())));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for &d in images.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Writes labels as an IDX u8 vector (magic 0x00000801).
pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u8")))?;
        out.push(b);
    }
    Ok(out)
}

/// Combines an IDX image file and label file into a single-channel dataset.
pub fn load_idx_pair(image_bytes: &[u8], label_bytes: &[u8], classes: usize, split: &str) -> Result<Dataset> {
    let images = parse_idx(image_bytes)?;
    let labels = parse_idx(label_bytes)?;
    if images.ndim() != 3 || labels.ndim() != 1 {
        return Err(Error::Format("expected N×H×W images and N labels".into()));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    let images = images.reshape(&[n, 1, h, w])?;
    let labels = labels.data().iter().map(|&v| v as usize).collect();
    Dataset::new(images, labels, classes, split)
}

/// Loads `{split}-images-idx3-ubyte` and `{split}-labels-idx1-ubyte` from
/// `dir`.
pub fn load_mnist_dir(dir: &std::path::Path, split: &str) -> Result<Dataset> {
    let read = |name: String| {
        let path = dir.join(&name);
        std::fs::read(&path).map_err(|e| Error::io(path, e))
    };
    let images = read(format!("{split}-images-idx3-ubyte"))?;
    let labels = read(format!("{split}-labels-idx1-ubyte"))?;
    load_idx_pair(&images, &labels, 10, split)
}

/// Parses CIFAR-10 binary batches: 3073-byte records of one label byte then
/// 1024 red, 1024 green and 1024 blue pixel bytes.
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("record {i}: label byte {label} > 9")));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    if n == 0 {
        return Ok(Dataset {
            images: Tensor::new(vec![0, 3, 32, 32], vec![])?,
            labels,
            classes: 10,
            split: "cifar10".into(),
            fingerprint: fingerprint(&Tensor::new(vec![0, 3, 32, 32], vec![])?, &[]),
        });
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, "cifar10")
}

/// Exact description of one example's augmentation: crop at `(dy, dx)` from
/// the image zero-padded by `pad`, then an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugRecord {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
    pub pad: usize,
}

impl AugRecord {
    pub fn identity() -> Self {
        Self {
            flip: false,
            dy: 0,
            dx: 0,
            pad: 0,
        }
    }

    /// Record whose crop shifts by `(sy, sx)` pixels with no flip.
    pub fn shift(sy: isize, sx: isize, pad: usize) -> Result<Self> {
        let off = |s: isize| {
            let v = pad as isize + s;
            if v < 0 || v > 2 * pad as isize {
                Err(Error::InvalidArgument(format!("shift {s} exceeds pad {pad}")))
            } else {
                Ok(v as usize)
            }
        };
        Ok(Self {
            flip: false,
            dy: off(sy)?,
            dx: off(sx)?,
            pad,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dy > 2 * self.pad || self.dx > 2 * self.pad {
            return Err(Error::InvalidArgument(format!(
                "crop offsets ({}, {}) outside [0, {}]",
                self.dy,
                self.dx,
                2 * self.pad
            )));
        }
        Ok(())
    }
}

/// Applies `rec` to one `[C, H, W]` image; revealed regions are zero.
pub fn apply_aug(image: &[f64], shape: &[usize], rec: &AugRecord) -> Result<Vec<f64>> {
    rec.validate()?;
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; c * h * w];
    let pad = rec.pad as isize;
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize + rec.dy as isize - pad;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let sj = j as isize + rec.dx as isize - pad;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                let dst_j = if rec.flip { w - 1 - j } else { j };
                out[(ch * h + i) * w + dst_j] = image[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    Ok(out)
}

/// Random horizontal flip (p = 0.5 when `flip` is enabled) and random crop
/// after zero-padding by `pad`.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, pad: usize, flip: bool, rng: &mut R) -> Result<(Tensor, Vec<AugRecord>)> {
    let shape = &batch.shape()[1..];
    let mut out = batch.clone();
    let mut records = Vec::with_capacity(batch.shape()[0]);
    for i in 0..batch.shape()[0] {
        let rec = AugRecord {
            flip: flip && rng.random::<bool>(),
            dy: rng.random_range(0..=2 * pad),
            dx: rng.random_range(0..=2 * pad),
            pad,
        };
        let img = apply_aug(batch.row(i), shape, &rec)?;
        out.row_mut(i).copy_from_slice(&img);
        records.push(rec);
    }
    Ok((out, records))
}

/// Replays recorded augmentations on a batch.
pub fn replay_augment(batch: &Tensor, records: &[AugRecord]) -> Result<Tensor> {
    if records.len() != batch.shape()[0] {
        return Err(Error::Shape("one record per example required".into()));
    }
    let shape = batch.shape()[1..].to_vec();
    let mut out = batch.clone();
    for (i, rec) in records.iter().enumerate() {
        let img = apply_aug(batch.row(i), &shape, rec)?;
        out.row_mut(i).copy_from_slice(&img);
    }
    Ok(out)
}
