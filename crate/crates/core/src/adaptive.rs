//! Per-example adaptive state: the EMA of squared input-gradient norms, the
//! resulting step size, stored perturbations (optionally at reduced
//! resolution), augmentation-aligned transforms and periodic resets.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attacks::uniform_symmetric;
use crate::data::{apply_aug, AugRecord};
use crate::error::{Error, Result};
use crate::models::ByteReader;
use crate::tensor::Tensor;

const SNAPSHOT_MAGIC: &[u8; 8] = b"ATASSTAT";
const SNAPSHOT_VERSION: u8 = 1;

/// How often stored perturbations are re-drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetPeriod {
    Every(usize),
    Never,
}

/// Resolution at which perturbations are kept between epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageSide {
    Full,
    Side(usize),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrWord {
    Num(usize),
    Word(String),
}

impl Serialize for ResetPeriod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Every(p) => s.serialize_u64(*p as u64),
            Self::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for ResetPeriod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrWord::deserialize(d)? {
            NumOrWord::Num(0) => Err(serde::de::Error::custom("reset period must be at least 1")),
            NumOrWord::Num(p) => Ok(Self::Every(p)),
            NumOrWord::Word(w) if w == "never" => Ok(Self::Never),
            NumOrWord::Word(w) => Err(serde::de::Error::custom(format!(
                "reset period must be a positive integer or \"never\", got {w:?}"
            ))),
        }
    }
}

impl Serialize for StorageSide {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Full => s.serialize_str("full"),
            Self::Side(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for StorageSide {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrWord::deserialize(d)? {
            NumOrWord::Num(0) => Err(serde::de::Error::custom("storage side must be at least 1")),
            NumOrWord::Num(n) => Ok(Self::Side(n)),
            NumOrWord::Word(w) if w == "full" => Ok(Self::Full),
            NumOrWord::Word(w) => Err(serde::de::Error::custom(format!(
                "storage side must be a positive integer or \"full\", got {w:?}"
            ))),
        }
    }
}

impl fmt::Display for ResetPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Every(p) => write!(f, "{p}"),
            Self::Never => f.write_str("never"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    pub beta: f64,
    pub gamma: f64,
    pub c: f64,
    pub reset_period: ResetPeriod,
    pub storage_side: StorageSide,
    /// The EMA tracks `(‖∇ℓᵢ‖ / norm_batch)²`, the squared norm of one
    /// example's share of a mean loss over a batch of this size. `1` uses
    /// the raw per-example norm.
    pub norm_batch: usize,
}

impl Default for AdaptiveConfig {
    /// β = 0.5, c = 0.01 and γ/c = 16/255 for inputs in `[0, 1]`.
    fn default() -> Self {
        Self {
            beta: 0.5,
            gamma: 0.01 * 16.0 / 255.0,
            c: 0.01,
            reset_period: ResetPeriod::Every(10),
            storage_side: StorageSide::Full,
            norm_batch: 128,
        }
    }
}

impl AdaptiveConfig {
    /// Largest attainable step size, reached at `v = 0`.
    pub fn max_step(&self) -> f64 {
        self.gamma / self.c
    }

    /// Value fed to the EMA for a per-example gradient norm.
    pub fn ema_input(&self, grad_norm: f64) -> f64 {
        (grad_norm / self.norm_batch as f64).powi(2)
    }

    /// Sets `γ` so that the maximum step equals `max_step`, keeping `c`.
    pub fn with_max_step(mut self, max_step: f64) -> Self {
        self.gamma = max_step * self.c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Config(format!("c must be positive, got {}", self.c)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.norm_batch == 0 {
            return Err(Error::Config("norm_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// `β·v_prev + (1 − β)·g²`.
pub fn ema_update(v_prev: f64, grad_norm_sq: f64, beta: f64) -> Result<f64> {
    if !(v_prev >= 0.0) || !(grad_norm_sq >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ema inputs must be non-negative (v = {v_prev}, g² = {grad_norm_sq})"
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    if beta == 1.0 {
        return Ok(v_prev);
    }
    Ok(beta * v_prev + (1.0 - beta) * grad_norm_sq)
}

/// `γ / (c + √v)`.
pub fn step_size(v: f64, gamma: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("c must be positive, got {c}")));
    }
    if !(v >= 0.0) {
        return Err(Error::InvalidArgument(format!("v must be non-negative, got {v}")));
    }
    Ok(gamma / (c + v.sqrt()))
}

/// Corner-aligned sample position and weight of output index `i`.
fn corner_coord(i: usize, from: usize, to: usize) -> (usize, usize, f64) {
    if to == 1 || from == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (from - 1) as f64 / (to - 1) as f64;
    let lo = (pos.floor() as usize).min(from - 1);
    let hi = (lo + 1).min(from - 1);
    (lo, hi, pos - lo as f64)
}

/// Interpolates one axis up (or keeps its size), written as `a + t(b − a)` so
/// constant fields come through bit-exact.
fn upsample_axis(src: &[f64], outer: usize, n: usize, inner: usize, to: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * to * inner];
    for o in 0..outer {
        for i in 0..to {
            let (lo, hi, t) = corner_coord(i, n, to);
            for k in 0..inner {
                let a = src[(o * n + lo) * inner + k];
                let b = src[(o * n + hi) * inner + k];
                out[(o * to + i) * inner + k] = if t == 0.0 { a } else { a + t * (b - a) };
            }
        }
    }
    out
}

/// Dense `to × from` corner-aligned interpolation matrix.
fn interp_matrix(from: usize, to: usize) -> Vec<f64> {
    let mut m = vec![0.0; to * from];
    for i in 0..to {
        let (lo, hi, t) = corner_coord(i, from, to);
        m[i * from + lo] += 1.0 - t;
        m[i * from + hi] += t;
    }
    m
}

/// Solves `a · x = b` for square `a` (n × n) by Gaussian elimination with
/// partial pivoting; `b` holds `cols` right-hand sides, row-major.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, cols: usize) -> Vec<f64> {
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
            .expect("non-empty pivot range");
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            for j in 0..cols {
                b.swap(k * cols + j, p * cols + j);
            }
        }
        let d = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / d;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
            for j in 0..cols {
                b[i * cols + j] -= f * b[k * cols + j];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..cols {
            let mut s = b[k * cols + j];
            for i in k + 1..n {
                s -= a[k * n + i] * b[i * cols + j];
            }
            b[k * cols + j] = s / a[k * n + k];
        }
    }
    b
}

/// Least-squares inverse of corner-aligned upsampling along one axis: the
/// `to`-sample field whose interpolation back to `n` samples is closest to
/// `src`. Returns the `to × n` restriction matrix `(UᵀU)⁻¹Uᵀ`.
fn restriction_matrix(n: usize, to: usize) -> Vec<f64> {
    let u = interp_matrix(to, n); // n × to
    let mut utu = vec![0.0; to * to];
    for r in 0..n {
        for i in 0..to {
            for j in 0..to {
                utu[i * to + j] += u[r * to + i] * u[r * to + j];
            }
        }
    }
    let mut ut = vec![0.0; to * n];
    for r in 0..n {
        for i in 0..to {
            ut[i * n + r] = u[r * to + i];
        }
    }
    solve(utu, ut, to, n)
}

fn downsample_axis(src: &[f64], outer: usize, n: usize, inner: usize, to: usize) -> Vec<f64> {
    let p = restriction_matrix(n, to);
    let mut out = vec![0.0; outer * to * inner];
    for o in 0..outer {
        for i in 0..to {
            for r in 0..n {
                let w = p[i * n + r];
                if w == 0.0 {
                    continue;
                }
                for k in 0..inner {
                    out[(o * to + i) * inner + k] += w * src[(o * n + r) * inner + k];
                }
            }
        }
    }
    out
}

fn resize_axis(src: &[f64], outer: usize, n: usize, inner: usize, to: usize) -> Vec<f64> {
    if to >= n {
        upsample_axis(src, outer, n, inner, to)
    } else {
        downsample_axis(src, outer, n, inner, to)
    }
}

/// Per-channel corner-aligned bilinear resize of a `C × H × W` field.
///
/// Enlarging an axis interpolates. Shrinking an axis returns the coarse field
/// whose interpolation back to the original size is the least-squares fit,
/// so `up ∘ down` is a projection: affine fields survive the round trip and
/// a second round trip changes nothing.
pub fn resize_bilinear(delta: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if delta.ndim() != 3 {
        return Err(Error::Shape(format!("expected C×H×W, got {:?}", delta.shape())));
    }
    let (c, h, w) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
    let (th, tw) = target;
    if th == 0 || tw == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {:?} to {th}×{tw}",
            delta.shape()
        )));
    }
    let rows = resize_axis(delta.data(), c, h, w, th);
    let cols = resize_axis(&rows, c * th, w, 1, tw);
    Tensor::new(vec![c, th, tw], cols)
}

/// Applies the image augmentation `aug` to a perturbation field.
pub fn transform_perturbation(delta: &Tensor, aug: &AugRecord) -> Result<Tensor> {
    let out = apply_aug(delta.data(), delta.shape(), aug)?;
    Tensor::new(delta.shape().to_vec(), out)
}

/// Maps a perturbation from the augmented frame back to the original image
/// frame. Pixels the crop pushed out of view come back as zero.
pub fn inverse_transform_perturbation(delta: &Tensor, aug: &AugRecord) -> Result<Tensor> {
    aug.validate()?;
    let flipped = if aug.flip {
        let flip = AugRecord {
            flip: true,
            ..AugRecord::identity()
        };
        apply_aug(delta.data(), delta.shape(), &flip)?
    } else {
        delta.data().to_vec()
    };
    let back = AugRecord {
        flip: false,
        dy: 2 * aug.pad - aug.dy,
        dx: 2 * aug.pad - aug.dx,
        pad: aug.pad,
    };
    Tensor::new(delta.shape().to_vec(), apply_aug(&flipped, delta.shape(), &back)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleState {
    pub v: f64,
    /// Stored at full or reduced resolution depending on the config.
    pub delta: Tensor,
    pub last_reset_epoch: usize,
}

/// Adaptive state for every example, indexed by immutable example id.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTable {
    cfg: AdaptiveConfig,
    example_shape: Vec<usize>,
    entries: Vec<Option<PerExampleState>>,
}

impl StateTable {
    /// Empty table for `n` examples of shape `C × H × W`.
    pub fn new(cfg: AdaptiveConfig, n: usize, example_shape: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if example_shape.len() != 3 {
            return Err(Error::Shape(format!(
                "example shape must be C×H×W, got {example_shape:?}"
            )));
        }
        Ok(Self {
            cfg,
            example_shape: example_shape.to_vec(),
            entries: vec![None; n],
        })
    }

    /// Fills every entry with `v = 0` and `δ ~ Uniform[−ε, ε]`, drawing ids in
    /// ascending order.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, epsilon: f64, rng: &mut R) -> Result<()> {
        for id in 0..self.entries.len() {
            let delta = self.uniform_delta(epsilon, rng);
            self.entries[id] = Some(PerExampleState {
                v: 0.0,
                delta: self.encode(&delta)?,
                last_reset_epoch: 0,
            });
        }
        Ok(())
    }

    pub fn config(&self) -> &AdaptiveConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn get(&self, id: usize) -> Result<&PerExampleState> {
        self.entries.get(id).and_then(Option::as_ref).ok_or(Error::MissingState(id))
    }

    fn get_mut(&mut self, id: usize) -> Result<&mut PerExampleState> {
        self.entries.get_mut(id).and_then(Option::as_mut).ok_or(Error::MissingState(id))
    }

    fn uniform_delta<R: Rng + ?Sized>(&self, epsilon: f64, rng: &mut R) -> Tensor {
        let mut delta = Tensor::zeros(&self.example_shape);
        for v in delta.data_mut() {
            *v = uniform_symmetric(epsilon, rng);
        }
        delta
    }

    fn encode(&self, delta: &Tensor) -> Result<Tensor> {
        if delta.shape() != self.example_shape.as_slice() {
            return Err(Error::Shape(format!(
                "perturbation shape {:?} differs from example shape {:?}",
                delta.shape(),
                self.example_shape
            )));
        }
        match self.cfg.storage_side {
            StorageSide::Full => Ok(delta.clone()),
            StorageSide::Side(s) => resize_bilinear(delta, (s, s)),
        }
    }

    /// Stores a perturbation given at full input resolution.
    pub fn store(&mut self, id: usize, delta: &Tensor) -> Result<()> {
        let stored = self.encode(delta)?;
        self.get_mut(id)?.delta = stored;
        Ok(())
    }

    /// Returns the stored perturbation at full resolution, re-projected onto
    /// `[−ε, ε]` after any upsampling.
    pub fn load(&self, id: usize, epsilon: f64) -> Result<Tensor> {
        let st = self.get(id)?;
        let (h, w) = (self.example_shape[1], self.example_shape[2]);
        let mut full = match self.cfg.storage_side {
            StorageSide::Full => st.delta.clone(),
            StorageSide::Side(_) => resize_bilinear(&st.delta, (h, w))?,
        };
        for v in full.data_mut() {
            *v = v.clamp(-epsilon, epsilon);
        }
        Ok(full)
    }

    /// EMA update of `v` with a squared gradient norm; returns the new `v`.
    pub fn update_v(&mut self, id: usize, grad_norm_sq: f64) -> Result<f64> {
        if !grad_norm_sq.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm for example {id}")));
        }
        let beta = self.cfg.beta;
        let st = self.get_mut(id)?;
        st.v = ema_update(st.v, grad_norm_sq, beta)?;
        Ok(st.v)
    }

    /// Current step size `γ / (c + √v)` of example `id`.
    pub fn step_size(&self, id: usize) -> Result<f64> {
        step_size(self.get(id)?.v, self.cfg.gamma, self.cfg.c)
    }

    /// Re-draws `δ ~ Uniform[−ε, ε]` when the reset period has elapsed since
    /// the last reset. `v` is kept.
    pub fn maybe_reset<R: Rng + ?Sized>(&mut self, id: usize, epoch: usize, epsilon: f64, rng: &mut R) -> Result<bool> {
        let period = match self.cfg.reset_period {
            ResetPeriod::Never => return Ok(false),
            ResetPeriod::Every(p) => p,
        };
        let last = self.get(id)?.last_reset_epoch;
        if epoch < last + period {
            return Ok(false);
        }
        let delta = self.uniform_delta(epsilon, rng);
        let stored = self.encode(&delta)?;
        let st = self.get_mut(id)?;
        st.delta = stored;
        st.last_reset_epoch = epoch;
        Ok(true)
    }

    /// Mean `v` over initialized entries.
    pub fn mean_v(&self) -> f64 {
        let vs: Vec<f64> = self.entries.iter().flatten().map(|s| s.v).collect();
        if vs.is_empty() {
            0.0
        } else {
            vs.iter().sum::<f64>() / vs.len() as f64
        }
    }

    /// Snapshot: `ATASSTAT`, version byte, record count (u64), then per
    /// initialized entry: id u64, v f64, last reset epoch u64, rank u32,
    /// dims u64 each, payload f64; all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.push(SNAPSHOT_VERSION);
        let live: Vec<(usize, &PerExampleState)> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|s| (i, s)))
            .collect();
        out.extend_from_slice(&(live.len() as u64).to_le_bytes());
        for (id, st) in live {
            out.extend_from_slice(&(id as u64).to_le_bytes());
            out.extend_from_slice(&st.v.to_le_bytes());
            out.extend_from_slice(&(st.last_reset_epoch as u64).to_le_bytes());
            out.extend_from_slice(&(st.delta.ndim() as u32).to_le_bytes());
            for &d in st.delta.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in st.delta.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Restores entries from a snapshot into a table built with the same
    /// config and shape.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Format("not an ATASSTAT snapshot".into()));
        }
        let version = r.take(1)?[0];
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let count = r.u64()? as usize;
        let mut entries = vec![None; self.entries.len()];
        for _ in 0..count {
            let id = r.u64()? as usize;
            let v = r.f64()?;
            let last_reset_epoch = r.u64()? as usize;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if id >= entries.len() {
                return Err(Error::Format(format!("snapshot id {id} outside table of {}", entries.len())));
            }
            if !(v >= 0.0) {
                return Err(Error::Format(format!("snapshot v = {v} for id {id}")));
            }
            entries[id] = Some(PerExampleState {
                v,
                delta: Tensor::new(shape, data)?,
                last_reset_epoch,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        self.entries = entries;
        Ok(())
    }
}
