//! Adversarial training loops (PGD-AT, FGSM-RS, ATTA, ATAS) and robust
//! evaluation.
//!
//! All loops share one iteration engine so that their random number
//! consumption is aligned: shuffling and augmentation draw from one stream,
//! random starts and perturbation resets from another, and evaluation from a
//! per-epoch stream. With `epsilon = 0` every method therefore reproduces the
//! same clean-training trajectory, and ATAS with `beta = 1` reproduces ATTA
//! with `alpha = gamma / c`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{inverse_transform_perturbation, transform_perturbation, AdaptiveConfig, StateTable};
use crate::attacks::{project_box_in_place, sgn, uniform_symmetric, within_budget, AttackSpec};
use crate::data::{augment, AugRecord, Dataset};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, cross_entropy_rows, Classifier, Model};
use crate::tensor::Tensor;

/// RNG streams derived from the run seed: data order and augmentation,
/// attack starts and resets, state initialization, and per-epoch
/// evaluation (offset by the epoch).
pub const STREAM_DATA: u64 = 0;
pub const STREAM_ATTACK: u64 = 1;
pub const STREAM_STATE: u64 = 2;
pub const STREAM_EVAL: u64 = 1 << 32;

/// ChaCha8 seeded with `seed` on the given stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PgdAt,
    FgsmRs,
    Atta,
    Atas,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PgdAt => "pgd_at",
            Self::FgsmRs => "fgsm_rs",
            Self::Atta => "atta",
            Self::Atas => "atas",
        }
    }

    pub fn uses_state(&self) -> bool {
        matches!(self, Self::Atta | Self::Atas)
    }
}

/// Where the ATAS inner step starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPoint {
    /// The stored perturbation from the previous epoch.
    Previous,
    /// A fresh uniform random start, as in FGSM-RS.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of `epochs` at which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub epsilon: f64,
    /// Fixed step size. Defaults: `epsilon / 4` for PGD-AT, `1.25 · epsilon`
    /// for FGSM-RS, `epsilon / 2` for ATTA. Ignored by ATAS.
    pub alpha: Option<f64>,
    pub pgd_steps: usize,
    pub adaptive: AdaptiveConfig,
    pub atas_init: InitPoint,
    pub augment: bool,
    pub pad: usize,
    pub flip: bool,
    /// Number of leading training examples used for per-epoch metrics;
    /// 0 means all.
    pub eval_size: usize,
    pub eval_batch: usize,
    pub eval_pgd50: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Atas,
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            lr_milestones: vec![0.8, 0.93],
            lr_decay: 0.1,
            epsilon: 8.0 / 255.0,
            alpha: None,
            pgd_steps: 10,
            adaptive: AdaptiveConfig::default(),
            atas_init: InitPoint::Previous,
            augment: false,
            pad: 2,
            flip: false,
            eval_size: 1000,
            eval_batch: 250,
            eval_pgd50: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The fixed step size in effect for non-adaptive methods.
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.method {
            Method::PgdAt => self.epsilon / 4.0,
            Method::FgsmRs => 1.25 * self.epsilon,
            Method::Atta => self.epsilon / 2.0,
            Method::Atas => self.adaptive.max_step(),
        })
    }

    /// Learning rate for `epoch` under the piecewise-constant schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.eval_batch == 0 {
            return bad("eval_batch", "must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0) || !self.lr_decay.is_finite() {
            return bad("lr_decay", format!("must be positive, got {}", self.lr_decay));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_milestones", "fractions must lie in [0, 1]".into());
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon", format!("must be non-negative, got {}", self.epsilon));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0) || !a.is_finite() {
                return bad("alpha", format!("must be non-negative, got {a}"));
            }
        }
        if self.pgd_steps == 0 {
            return bad("pgd_steps", "must be at least 1".into());
        }
        self.adaptive.validate().map_err(|e| Error::Config(format!("adaptive.{e}")))
    }
}

/// Per-epoch metrics; one row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd10_acc: f64,
    pub pgd50_acc: Option<f64>,
    pub train_robust_loss: f64,
    pub mean_step_size: f64,
    pub mean_grad_norm: f64,
    pub wall_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,clean_acc,fgsm_acc,pgd10_acc,pgd50_acc,train_robust_loss,mean_step_size,mean_grad_norm,wall_s";

impl MetricsRecord {
    /// One CSV line without the trailing newline. Wall time is written only
    /// when `with_wall` is set so that reruns produce identical files.
    pub fn csv_row(&self, with_wall: bool) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.clean_acc,
            self.fgsm_acc,
            self.pgd10_acc,
            opt(self.pgd50_acc),
            self.train_robust_loss,
            self.mean_step_size,
            self.mean_grad_norm,
            opt(with_wall.then_some(self.wall_s)),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<MetricsRecord>,
    /// Per epoch, per example id: `‖∇ₓℓ‖₂` at the inner step's starting
    /// point (NaN when the example was not visited that epoch).
    pub grad_norms: Vec<Vec<f64>>,
    /// Per epoch, per example id: the step size used (NaN when unvisited).
    pub step_sizes: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl TrainHistory {
    pub fn to_csv(&self, with_wall: bool) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row(with_wall));
            s.push('\n');
        }
        s
    }

    /// `epoch,wall_s` rows.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_s\n");
        for r in &self.records {
            s.push_str(&format!("{},{}\n", r.epoch, r.wall_s));
        }
        s
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Accuracy and mean cross-entropy under an attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Attacks every example with `attack` (or none, for clean accuracy) and
/// reports accuracy and mean loss at the attacked points.
pub fn evaluate_attack<R: Rng + ?Sized>(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    attack: Option<&AttackSpec>,
    batch: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    let n = labels.len();
    if n == 0 {
        return Ok(EvalResult {
            accuracy: 0.0,
            mean_loss: 0.0,
        });
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(batch.max(1)) {
        let x = images.gather_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let adv = match attack {
            Some(spec) => crate::attacks::pgd(model, &x, &y, spec, rng)?,
            None => x,
        };
        let logits = model.logits(&adv)?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
        loss += cross_entropy_rows(&logits, &y).iter().sum::<f64>();
    }
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
    })
}

/// Fraction of examples classified correctly after `attack`.
pub fn evaluate_robust<R: Rng + ?Sized>(
    model: &Model,
    data: &Dataset,
    attack: &AttackSpec,
    rng: &mut R,
) -> Result<f64> {
    Ok(evaluate_attack(model, data.images(), data.labels(), Some(attack), 256, rng)?.accuracy)
}

/// Fresh state table for ATTA/ATAS: `v = 0` and uniform perturbations.
pub fn init_state(cfg: &TrainConfig, data: &Dataset) -> Result<StateTable> {
    let mut table = StateTable::new(cfg.adaptive, data.len(), data.example_shape())?;
    let mut rng = stream_rng(cfg.seed, STREAM_STATE);
    table.init_uniform(cfg.epsilon, &mut rng)?;
    Ok(table)
}

pub fn train_pgd_at(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    expect_method(cfg, Method::PgdAt)?;
    train(model, data, cfg, None)
}

pub fn train_fgsm_rs(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    expect_method(cfg, Method::FgsmRs)?;
    train(model, data, cfg, None)
}

pub fn train_atta(model: &mut Model, data: &Dataset, cfg: &TrainConfig, state: &mut StateTable) -> Result<TrainHistory> {
    expect_method(cfg, Method::Atta)?;
    train(model, data, cfg, Some(state))
}

pub fn train_atas(model: &mut Model, data: &Dataset, cfg: &TrainConfig, state: &mut StateTable) -> Result<TrainHistory> {
    expect_method(cfg, Method::Atas)?;
    train(model, data, cfg, Some(state))
}

fn expect_method(cfg: &TrainConfig, m: Method) -> Result<()> {
    if cfg.method != m {
        return Err(Error::Config(format!(
            "method is {} but {} was requested",
            cfg.method.name(),
            m.name()
        )));
    }
    Ok(())
}

/// Runs `cfg.method` over the whole dataset for `cfg.epochs` epochs.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, state: Option<&mut StateTable>) -> Result<TrainHistory> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let iterations = cfg.epochs * data.len().div_ceil(cfg.batch_size.max(1));
    train_ids(model, data, cfg, state, &ids, iterations)
}

/// Runs `cfg.method` on the examples `ids` for exactly `iterations`
/// parameter updates. An epoch is `⌈n / batch⌉` iterations for the full
/// dataset size `n`; the subset is reshuffled and cycled whenever it runs
/// out, so subsets of any size consume the same number of iterations.
/// Metrics are computed on the leading `eval_size` examples of the full
/// dataset at the end of every epoch. Without a state table, ATTA and ATAS
/// build one with [`init_state`].
pub fn train_ids(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    state: Option<&mut StateTable>,
    ids: &[usize],
    iterations: usize,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("training subset is empty".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
        return Err(Error::InvalidArgument(format!("example id {bad} out of range")));
    }
    let mut owned;
    let state = if cfg.method.uses_state() {
        match state {
            Some(s) => Some(s),
            None => {
                owned = init_state(cfg, data)?;
                Some(&mut owned)
            }
        }
    } else {
        None
    };
    let mut engine = Engine {
        model,
        data,
        cfg,
        state,
        data_rng: stream_rng(cfg.seed, STREAM_DATA),
        attack_rng: stream_rng(cfg.seed, STREAM_ATTACK),
    };
    engine.run(ids, iterations)
}

struct Engine<'a> {
    model: &'a mut Model,
    data: &'a Dataset,
    cfg: &'a TrainConfig,
    state: Option<&'a mut StateTable>,
    data_rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
}

struct EpochLog {
    grad_norms: Vec<f64>,
    step_sizes: Vec<f64>,
}

impl Engine<'_> {
    fn run(&mut self, ids: &[usize], iterations: usize) -> Result<TrainHistory> {
        let per_epoch = self.data.len().div_ceil(self.cfg.batch_size);
        let mut history = TrainHistory::default();
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut epoch = 0;
        let mut done = 0;
        while done < iterations {
            let started = Instant::now();
            let lr = self.cfg.lr_at(epoch);
            let mut log = EpochLog {
                grad_norms: vec![f64::NAN; self.data.len()],
                step_sizes: vec![f64::NAN; self.data.len()],
            };
            let end = (done + per_epoch).min(iterations);
            while done < end {
                if cursor == order.len() {
                    order = ids.to_vec();
                    order.shuffle(&mut self.data_rng);
                    cursor = 0;
                }
                let stop = (cursor + self.cfg.batch_size).min(order.len());
                let batch: Vec<usize> = order[cursor..stop].to_vec();
                cursor = stop;
                self.step(&batch, epoch, lr, &mut log)
                    .map_err(|e| diverged(epoch, e))?;
                done += 1;
            }
            let record = self.evaluate(epoch, &log, started)?;
            history.records.push(record);
            history.grad_norms.push(log.grad_norms);
            history.step_sizes.push(log.step_sizes);
            epoch += 1;
        }
        history.iterations = done;
        Ok(history)
    }

    fn step(&mut self, ids: &[usize], epoch: usize, lr: f64, log: &mut EpochLog) -> Result<()> {
        let cfg = self.cfg;
        let eps = cfg.epsilon;
        let (clean, y) = self.data.batch(ids);
        let (x, records) = if cfg.augment {
            augment(&clean, cfg.pad, cfg.flip, &mut self.data_rng)?
        } else {
            (clean, vec![AugRecord::identity(); ids.len()])
        };
        let b = ids.len();
        let row = x.row_len();
        let shape = self.data.example_shape().to_vec();

        let from_state = match cfg.method {
            Method::Atta => true,
            Method::Atas => cfg.atas_init == InitPoint::Previous,
            _ => false,
        };
        let mut adv = x.clone();
        if from_state {
            let state = self.state.as_deref_mut().expect("stateful method has a table");
            for (i, (&id, rec)) in ids.iter().zip(&records).enumerate() {
                state.maybe_reset(id, epoch, eps, &mut self.attack_rng)?;
                let delta = transform_perturbation(&state.load(id, eps)?.reshape(&shape)?, rec)?;
                for (a, d) in adv.row_mut(i).iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
        } else {
            for a in adv.data_mut() {
                *a += uniform_symmetric(eps, &mut self.attack_rng);
            }
        }
        project_box_in_place(adv.data_mut(), x.data(), eps, 0.0, 1.0);

        let steps = if cfg.method == Method::PgdAt { cfg.pgd_steps } else { 1 };
        let mut alphas = vec![cfg.effective_alpha(); b];
        for s in 0..steps {
            let (_, grad) = self.model.input_gradient(&adv, &y)?;
            if s == 0 {
                for (i, &id) in ids.iter().enumerate() {
                    let norm = b as f64 * l2(grad.row(i));
                    log.grad_norms[id] = norm;
                    if cfg.method == Method::Atas {
                        let state = self.state.as_deref_mut().expect("stateful method has a table");
                        state.update_v(id, cfg.adaptive.ema_input(norm))?;
                        alphas[i] = state.step_size(id)?;
                    }
                    log.step_sizes[id] = alphas[i];
                }
            }
            for (i, &alpha) in alphas.iter().enumerate() {
                let a = &mut adv.data_mut()[i * row..(i + 1) * row];
                for (v, &g) in a.iter_mut().zip(grad.row(i)) {
                    *v += alpha * sgn(g);
                }
            }
            project_box_in_place(adv.data_mut(), x.data(), eps, 0.0, 1.0);
        }
        if !within_budget(&adv, &x, eps, 0.0, 1.0) {
            return Err(Error::InvalidArgument("training example left the budget".into()));
        }

        if cfg.method.uses_state() {
            let state = self.state.as_deref_mut().expect("stateful method has a table");
            for (i, (&id, rec)) in ids.iter().zip(&records).enumerate() {
                let delta: Vec<f64> = adv.row(i).iter().zip(x.row(i)).map(|(a, c)| a - c).collect();
                let delta = Tensor::new(shape.clone(), delta)?;
                state.store(id, &inverse_transform_perturbation(&delta, rec)?)?;
            }
        }

        let grads = self.model.loss_and_grads(&adv, &y, false)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", grads.loss)));
        }
        self.model.sgd_step(&grads.params, lr)
    }

    fn evaluate(&self, epoch: usize, log: &EpochLog, started: Instant) -> Result<MetricsRecord> {
        let cfg = self.cfg;
        let n = if cfg.eval_size == 0 {
            self.data.len()
        } else {
            cfg.eval_size.min(self.data.len())
        };
        let ids: Vec<usize> = (0..n).collect();
        let (x, y) = self.data.batch(&ids);
        let mut rng = stream_rng(cfg.seed, STREAM_EVAL + epoch as u64);
        let model = &*self.model;
        let clean = evaluate_attack(model, &x, &y, None, cfg.eval_batch, &mut rng)?;
        let fgsm = evaluate_attack(model, &x, &y, Some(&AttackSpec::fgsm(cfg.epsilon)), cfg.eval_batch, &mut rng)?;
        let pgd10 = evaluate_attack(model, &x, &y, Some(&AttackSpec::pgd_eval(cfg.epsilon, 10)), cfg.eval_batch, &mut rng)?;
        let pgd50 = if cfg.eval_pgd50 {
            Some(evaluate_attack(model, &x, &y, Some(&AttackSpec::pgd_eval(cfg.epsilon, 50)), cfg.eval_batch, &mut rng)?.accuracy)
        } else {
            None
        };
        let wall_s = started.elapsed().as_secs_f64();
        Ok(MetricsRecord {
            epoch,
            clean_acc: clean.accuracy,
            fgsm_acc: fgsm.accuracy,
            pgd10_acc: pgd10.accuracy,
            pgd50_acc: pgd50,
            train_robust_loss: pgd10.mean_loss,
            mean_step_size: nan_mean(&log.step_sizes),
            mean_grad_norm: nan_mean(&log.grad_norms),
            wall_s,
        })
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(reason) => Error::Diverged { epoch, reason },
        other => other,
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn nan_mean(v: &[f64]) -> f64 {
    let (s, k) = v
        .iter()
        .filter(|x| !x.is_nan())
        .fold((0.0, 0usize), |(s, k), &x| (s + x, k + 1));
    if k == 0 {
        0.0
    } else {
        s / k as f64
    }
}
