//! Desk-scale differentiable classifiers (MLP and small CNN).

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATASCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected ReLU layers of the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// One `conv(k×k) → ReLU → 2×2 max-pool` stage per entry of `channels`,
    /// then fully connected ReLU layers of the `hidden` widths and a linear
    /// classifier.
    Cnn {
        channels: Vec<usize>,
        #[serde(default)]
        hidden: Vec<usize>,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
}

fn default_kernel() -> usize {
    3
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Per-example input shape: `[C, H, W]` or `[d]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize, seed: u64) -> Self {
        Self {
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: input_shape.to_vec(),
            classes,
            seed,
        }
    }

    /// `conv(C→16) → pool → conv(16→32) → pool → fc`, valid 3×3 convolutions.
    pub fn small_cnn(input_shape: &[usize], classes: usize, seed: u64) -> Self {
        Self::cnn(input_shape, &[16, 32], classes, seed)
    }

    pub fn cnn(input_shape: &[usize], channels: &[usize], classes: usize, seed: u64) -> Self {
        Self {
            arch: Architecture::Cnn {
                channels: channels.to_vec(),
                hidden: Vec::new(),
                kernel: 3,
                stride: 1,
                pad: 0,
            },
            input_shape: input_shape.to_vec(),
            classes,
            seed,
        }
    }

    /// Replaces the fully connected hidden widths.
    pub fn with_hidden(mut self, widths: &[usize]) -> Self {
        match &mut self.arch {
            Architecture::Mlp { hidden } | Architecture::Cnn { hidden, .. } => *hidden = widths.to_vec(),
        }
        self
    }

    /// Named parameter shapes in construction order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shapes = Vec::new();
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::InvalidArgument("layer widths must be positive".into()));
                }
                let mut fan_in: usize = self.input_shape.iter().product();
                for (i, &w) in hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
                    shapes.push((format!("fc{i}.weight"), vec![fan_in, w]));
                    shapes.push((format!("fc{i}.bias"), vec![w]));
                    fan_in = w;
                }
            }
            Architecture::Cnn {
                channels,
                hidden,
                kernel,
                stride,
                pad,
            } => {
                if self.input_shape.len() != 3 {
                    return Err(Error::Shape(format!(
                        "cnn needs [C, H, W] input, got {:?}",
                        self.input_shape
                    )));
                }
                if channels.contains(&0) || hidden.contains(&0) || *kernel == 0 {
                    return Err(Error::InvalidArgument("channel counts and widths must be positive".into()));
                }
                let (mut c, mut h, mut w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                for (i, &o) in channels.iter().enumerate() {
                    let conv = |s: usize| (s + 2 * pad).checked_sub(*kernel).map(|v| v / stride + 1);
                    let (Some(ch), Some(cw)) = (conv(h), conv(w)) else {
                        return Err(Error::Shape(format!("stage {i}: kernel exceeds {h}×{w}")));
                    };
                    if ch < 2 || cw < 2 {
                        return Err(Error::Shape(format!("stage {i}: {ch}×{cw} too small to pool")));
                    }
                    shapes.push((format!("conv{i}.weight"), vec![o, c, *kernel, *kernel]));
                    shapes.push((format!("conv{i}.bias"), vec![o]));
                    c = o;
                    h = ch / 2;
                    w = cw / 2;
                }
                let mut fan_in = c * h * w;
                for (i, &width) in hidden.iter().enumerate() {
                    shapes.push((format!("fc{i}.weight"), vec![fan_in, width]));
                    shapes.push((format!("fc{i}.bias"), vec![width]));
                    fan_in = width;
                }
                shapes.push(("fc.weight".into(), vec![fan_in, self.classes]));
                shapes.push(("fc.bias".into(), vec![self.classes]));
            }
        }
        Ok(shapes)
    }
}

/// Named parameter tensors with an update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    version: u64,
}

impl Parameters {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// `θ ← θ − lr · g`, bumping the version counter.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            p.axpy(-lr, g)?;
        }
        self.version += 1;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing ATASCKPT magic".into()));
        }
        let version_byte = r.take(1)?[0];
        if version_byte != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version_byte}")));
        }
        let version = r.u64()?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            names,
            tensors,
            version,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Anything the attacks can differentiate with respect to its input.
pub trait Classifier {
    /// Mean loss over the batch and its gradient with respect to `x`.
    fn input_gradient(&self, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)>;

    /// Per-example losses, in batch order.
    fn example_losses(&self, x: &Tensor, y: &[usize]) -> Result<Vec<f64>>;
}

/// Result of [`Model::loss_and_grads`].
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    /// One gradient per parameter, in parameter order.
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
}

struct BuiltGraph {
    graph: Graph,
    input: NodeId,
    target: NodeId,
    logits: NodeId,
    params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Parameters,
}

impl Model {
    /// Builds the model with He-uniform weights (fan-in) and zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let shapes = config.parameter_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(shapes.len());
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            params: Parameters {
                names,
                tensors,
                version: 0,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Replaces the parameters, checking names and shapes.
    pub fn set_params(&mut self, params: Parameters) -> Result<()> {
        if params.names != self.params.names
            || params
                .tensors
                .iter()
                .zip(&self.params.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("checkpoint does not match model layout".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        self.params.sgd_step(grads, lr)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.params.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        self.set_params(Parameters::from_bytes(&bytes)?)
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        if x.ndim() != self.config.input_shape.len() + 1 || x.shape()[1..] != self.config.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input shape {:?}",
                x.shape(),
                self.config.input_shape
            )));
        }
        Ok(x.shape()[0])
    }

    fn build_graph(&self, batch: usize) -> Result<BuiltGraph> {
        let mut g = Graph::new();
        let mut in_shape = vec![batch];
        in_shape.extend_from_slice(&self.config.input_shape);
        let input = g.input(&in_shape)?;
        let target = g.input(&[batch, self.config.classes])?;
        let mut params = Vec::with_capacity(self.params.tensors.len());
        for t in &self.params.tensors {
            params.push(g.param(t.shape())?);
        }
        let mut h = input;
        match &self.config.arch {
            Architecture::Mlp { .. } => {
                if in_shape.len() > 2 {
                    h = g.flatten(h)?;
                }
                let layers = params.len() / 2;
                for l in 0..layers {
                    h = g.matmul(h, params[2 * l])?;
                    h = g.add_bias(h, params[2 * l + 1])?;
                    if l + 1 < layers {
                        h = g.relu(h)?;
                    }
                }
            }
            Architecture::Cnn {
                channels,
                hidden,
                stride,
                pad,
                ..
            } => {
                let stages = channels.len();
                for s in 0..stages {
                    h = g.conv2d(h, params[2 * s], *stride, *pad)?;
                    h = g.add_bias(h, params[2 * s + 1])?;
                    h = g.relu(h)?;
                    h = g.maxpool2(h)?;
                }
                h = g.flatten(h)?;
                for l in stages..stages + hidden.len() {
                    h = g.matmul(h, params[2 * l])?;
                    h = g.add_bias(h, params[2 * l + 1])?;
                    h = g.relu(h)?;
                }
                let last = stages + hidden.len();
                h = g.matmul(h, params[2 * last])?;
                h = g.add_bias(h, params[2 * last + 1])?;
            }
        }
        let logits = h;
        let loss = g.softmax_xent(logits, target)?;
        g.set_loss(loss)?;
        Ok(BuiltGraph {
            graph: g,
            input,
            target,
            logits,
            params,
        })
    }

    fn bindings(&self, built: &BuiltGraph, x: &Tensor, y: Option<&[usize]>) -> Result<Bindings> {
        let batch = x.shape()[0];
        let k = self.config.classes;
        let mut onehot = vec![0.0; batch * k];
        if let Some(y) = y {
            if y.len() != batch {
                return Err(Error::Shape(format!("{} labels for batch of {batch}", y.len())));
            }
            for (i, &label) in y.iter().enumerate() {
                if label >= k {
                    return Err(Error::LabelOutOfRange { label, classes: k });
                }
                onehot[i * k + label] = 1.0;
            }
        }
        let mut b = Bindings::with_capacity(built.params.len() + 2);
        b.insert(built.input, x.clone());
        b.insert(built.target, Tensor::new(vec![batch, k], onehot)?);
        for (id, t) in built.params.iter().zip(&self.params.tensors) {
            b.insert(*id, t.clone());
        }
        Ok(b)
    }

    /// Mean cross-entropy over the batch, its parameter gradients, and
    /// optionally the input gradient.
    pub fn loss_and_grads(&self, x: &Tensor, y: &[usize], need_input_grad: bool) -> Result<LossGrads> {
        let batch = self.check_batch(x)?;
        let built = self.build_graph(batch)?;
        let bindings = self.bindings(&built, x, Some(y))?;
        let values = autodiff::forward(&built.graph, &bindings)?;
        let loss = values.loss(&built.graph).expect("loss node set");
        let mut wrt = built.params.clone();
        if need_input_grad {
            wrt.push(built.input);
        }
        let mut grads = autodiff::backward_wrt(&built.graph, &values, &wrt)?;
        let params = built
            .params
            .iter()
            .map(|&id| grads.take(id).expect("requested gradient"))
            .collect();
        let input = need_input_grad.then(|| grads.take(built.input).expect("requested gradient"));
        Ok(LossGrads { loss, params, input })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_batch(x)?;
        let built = self.build_graph(batch)?;
        let bindings = self.bindings(&built, x, None)?;
        let values = autodiff::forward(&built.graph, &bindings)?;
        Ok(values.get(built.logits).clone())
    }

    /// Argmax of the logits, ties going to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
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

/// Per-row cross-entropy of `logits` against integer labels.
pub fn cross_entropy_rows(logits: &Tensor, y: &[usize]) -> Vec<f64> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(y)
        .map(|(row, &label)| autodiff::log_sum_exp(row) - row[label])
        .collect()
}

impl Classifier for Model {
    fn input_gradient(&self, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
        let batch = self.check_batch(x)?;
        let built = self.build_graph(batch)?;
        let bindings = self.bindings(&built, x, Some(y))?;
        let values = autodiff::forward(&built.graph, &bindings)?;
        let loss = values.loss(&built.graph).expect("loss node set");
        let mut grads = autodiff::backward_wrt(&built.graph, &values, &[built.input])?;
        Ok((loss, grads.take(built.input).expect("requested gradient")))
    }

    fn example_losses(&self, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
        for &label in y {
            if label >= self.config.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.config.classes,
                });
            }
        }
        let logits = self.logits(x)?;
        Ok(cross_entropy_rows(&logits, y))
    }
}
