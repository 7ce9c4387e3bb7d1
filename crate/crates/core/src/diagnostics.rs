//! Instrumentation for catastrophic overfitting: per-example gradient-norm
//! profiles and ranks, decile subsets, class balance, loss-surface probes,
//! an overfitting-onset detector, and subset-restricted training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Classifier, Model};
use crate::tensor::Tensor;
use crate::trainers::{train_ids, MetricsRecord, TrainConfig, TrainHistory};

/// Time-averaged input-gradient norm of every example and its rank.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormProfile {
    pub gn: Vec<f64>,
    /// Fraction of examples ranked strictly below, ties broken by id.
    pub rank: Vec<f64>,
    pub epochs: usize,
}

impl GradNormProfile {
    /// `id,gn,rank,label` rows.
    pub fn to_csv(&self, labels: &[usize]) -> String {
        let mut s = String::from("id,gn,rank,label\n");
        for (id, (g, r)) in self.gn.iter().zip(&self.rank).enumerate() {
            let label = labels.get(id).map(|l| l.to_string()).unwrap_or_default();
            s.push_str(&format!("{id},{g},{r},{label}\n"));
        }
        s
    }

    /// Position of each id in the ascending `(gn, id)` order.
    fn positions(&self) -> Vec<usize> {
        let n = self.gn.len();
        self.rank.iter().map(|r| (r * n as f64).round() as usize).collect()
    }
}

/// Averages per-epoch norms (`norms[epoch][id]`) and ranks the examples.
pub fn grad_norm_profile(norms: &[Vec<f64>]) -> Result<GradNormProfile> {
    let Some(first) = norms.first() else {
        return Err(Error::InvalidArgument("no epochs logged".into()));
    };
    let n = first.len();
    let mut gn = vec![0.0; n];
    for (e, epoch) in norms.iter().enumerate() {
        if epoch.len() != n {
            return Err(Error::Shape(format!("epoch {e} logs {} examples, expected {n}", epoch.len())));
        }
        for (id, (acc, &v)) in gn.iter_mut().zip(epoch).enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("epoch {e} has no norm for example {id}")));
            }
            *acc += v;
        }
    }
    for g in &mut gn {
        *g /= norms.len() as f64;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| gn[a].total_cmp(&gn[b]).then(a.cmp(&b)));
    let mut rank = vec![0.0; n];
    for (pos, &id) in order.iter().enumerate() {
        rank[id] = pos as f64 / n as f64;
    }
    Ok(GradNormProfile {
        gn,
        rank,
        epochs: norms.len(),
    })
}

/// Deciles `lower..=upper` of the rank distribution, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub lower: usize,
    pub upper: usize,
}

impl SubsetSpec {
    pub fn new(lower: usize, upper: usize) -> Result<Self> {
        if !(1..=10).contains(&lower) || !(lower..=10).contains(&upper) {
            return Err(Error::InvalidArgument(format!(
                "decile bounds must satisfy 1 <= lower <= upper <= 10, got {lower}..{upper}"
            )));
        }
        Ok(Self { lower, upper })
    }
}

/// Ids whose rank lies in `[(lower − 1)/10, upper/10)`, ascending.
pub fn decile_subset(profile: &GradNormProfile, spec: SubsetSpec) -> Result<Vec<usize>> {
    let spec = SubsetSpec::new(spec.lower, spec.upper)?;
    let n = profile.gn.len();
    Ok(profile
        .positions()
        .into_iter()
        .enumerate()
        .filter(|&(_, pos)| 10 * pos >= (spec.lower - 1) * n && 10 * pos < spec.upper * n)
        .map(|(id, _)| id)
        .collect())
}

/// Fraction of `ids` in each class.
pub fn class_balance(ids: &[usize], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("class balance of an empty set".into()));
    }
    let mut counts = vec![0usize; classes];
    for &id in ids {
        let label = *labels
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("example id {id} out of range")))?;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        counts[label] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / ids.len() as f64).collect())
}

/// Example-averaged loss on a 2-D slice of the perturbation ball.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSurface {
    /// Grid coordinates along both axes, `linspace(−1, 1, grid_n)`.
    pub coords: Vec<f64>,
    /// `loss[i * grid_n + j]` at `(a, b) = (coords[i], coords[j])`.
    pub loss: Vec<f64>,
}

impl LossSurface {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.coords.len() + j]
    }

    /// `a,b,mean_loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,mean_loss\n");
        let n = self.coords.len();
        for i in 0..n {
            for j in 0..n {
                s.push_str(&format!("{},{},{}\n", self.coords[i], self.coords[j], self.at(i, j)));
            }
        }
        s
    }
}

pub const DEFAULT_GRID_N: usize = 21;

/// Probes `x + (a·v1 + b·v2)/2` with `v1 = ε·sgn(∇ₓℓ)` and `v2` a
/// Rademacher direction scaled by ε, so the grid corners sit on the budget
/// boundary. Points are clamped to `[0, 1]`.
pub fn loss_surface<C: Classifier + ?Sized, R: Rng + ?Sized>(
    model: &C,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    grid_n: usize,
    rng: &mut R,
) -> Result<LossSurface> {
    if grid_n < 2 {
        return Err(Error::InvalidArgument(format!("grid_n must be at least 2, got {grid_n}")));
    }
    let (_, grad) = model.input_gradient(x, y)?;
    let v1 = grad.map(|g| epsilon * crate::attacks::sgn(g));
    let mut v2 = Tensor::zeros(x.shape());
    for v in v2.data_mut() {
        *v = if rng.random::<bool>() { epsilon } else { -epsilon };
    }
    let coords: Vec<f64> = (0..grid_n)
        .map(|i| -1.0 + 2.0 * i as f64 / (grid_n - 1) as f64)
        .collect();
    let mut loss = Vec::with_capacity(grid_n * grid_n);
    for &a in &coords {
        for &b in &coords {
            let mut p = x.clone();
            for ((pv, &d1), &d2) in p.data_mut().iter_mut().zip(v1.data()).zip(v2.data()) {
                *pv = (*pv + 0.5 * (a * d1 + b * d2)).clamp(0.0, 1.0);
            }
            let losses = model.example_losses(&p, y)?;
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            if !mean.is_finite() {
                return Err(Error::NonFinite(format!("loss at ({a}, {b})")));
            }
            loss.push(mean);
        }
    }
    Ok(LossSurface { coords, loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoDetector {
    pub window: usize,
    pub drop_thresh: f64,
    pub fgsm_floor: f64,
}

impl Default for CoDetector {
    fn default() -> Self {
        Self {
            window: 5,
            drop_thresh: 0.05,
            fgsm_floor: 0.5,
        }
    }
}

/// Onset of catastrophic overfitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoEvent {
    pub epoch: usize,
    /// Highest PGD accuracy within the trailing window.
    pub pgd_before: f64,
    pub pgd_after: f64,
    pub fgsm_at_onset: f64,
}

impl CoDetector {
    /// First epoch whose PGD accuracy is below `drop_thresh` after exceeding
    /// `drop_thresh + 0.2` within the preceding `window` epochs, while FGSM
    /// accuracy stays at or above `fgsm_floor`.
    pub fn detect(&self, records: &[MetricsRecord]) -> Result<Option<CoEvent>> {
        let epochs: Vec<usize> = records.iter().map(|r| r.epoch).collect();
        let pgd: Vec<f64> = records.iter().map(|r| r.pgd10_acc).collect();
        let fgsm: Vec<f64> = records.iter().map(|r| r.fgsm_acc).collect();
        self.detect_series(&epochs, &pgd, &fgsm)
    }

    pub fn detect_series(&self, epochs: &[usize], pgd: &[f64], fgsm: &[f64]) -> Result<Option<CoEvent>> {
        if pgd.len() < 2 || pgd.len() != fgsm.len() || pgd.len() != epochs.len() {
            return Err(Error::InvalidArgument(format!(
                "need at least two aligned epochs (got {} pgd, {} fgsm)",
                pgd.len(),
                fgsm.len()
            )));
        }
        for t in 1..pgd.len() {
            if pgd[t] >= self.drop_thresh || fgsm[t] < self.fgsm_floor {
                continue;
            }
            let start = t.saturating_sub(self.window);
            let before = pgd[start..t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if before > self.drop_thresh + 0.2 {
                return Ok(Some(CoEvent {
                    epoch: epochs[t],
                    pgd_before: before,
                    pgd_after: pgd[t],
                    fgsm_at_onset: fgsm[t],
                }));
            }
        }
        Ok(None)
    }
}

/// [`CoDetector::detect`] with explicit thresholds.
pub fn detect_co(records: &[MetricsRecord], window: usize, drop_thresh: f64, fgsm_floor: f64) -> Result<Option<CoEvent>> {
    CoDetector {
        window,
        drop_thresh,
        fgsm_floor,
    }
    .detect(records)
}

/// Trains on `subset` only for exactly `iterations` updates, evaluating on
/// the leading examples of the whole training set each epoch.
pub fn train_on_subset(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    subset: &[usize],
    iterations: usize,
) -> Result<TrainHistory> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("training subset is empty".into()));
    }
    train_ids(model, data, cfg, None, subset, iterations)
}
