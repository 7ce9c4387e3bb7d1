//! L∞ inner-maximization primitives: signed steps, box projection, FGSM,
//! uniform random starts and multi-step PGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Budget slack allowed by [`within_budget`].
pub const BUDGET_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub lo: f64,
    pub hi: f64,
}

impl AttackSpec {
    /// Single step of size `epsilon` from the clean point, on `[0, 1]` inputs.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            lo: 0.0,
            hi: 1.0,
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, random_start: bool) -> Self {
        Self {
            epsilon,
            alpha,
            steps,
            random_start,
            lo: 0.0,
            hi: 1.0,
        }
    }

    /// Evaluation PGD: `alpha = epsilon / 4`, one random restart.
    pub fn pgd_eval(epsilon: f64, steps: usize) -> Self {
        Self::pgd(epsilon, epsilon / 4.0, steps, true)
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon and alpha must be non-negative (got {}, {})",
                self.epsilon, self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        if !(self.lo < self.hi) {
            return Err(Error::InvalidArgument(format!("domain [{}, {}] is empty", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Sign with `sgn(0) = 0`.
#[inline]
pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + alpha · sgn(grad)`.
pub fn sign_step(x: &Tensor, grad: &Tensor, alpha: f64) -> Result<Tensor> {
    x.zip_map(grad, |xi, gi| xi + alpha * sgn(gi))
}

/// Clamps `x_adv` into `[x_ref − ε, x_ref + ε] ∩ [lo, hi]` elementwise.
pub fn project_box(x_adv: &Tensor, x_ref: &Tensor, epsilon: f64, lo: f64, hi: f64) -> Result<Tensor> {
    x_adv.zip_map(x_ref, |a, r| a.max(r - epsilon).max(lo).min(r + epsilon).min(hi))
}

/// In-place variant of [`project_box`] for hot loops.
pub fn project_box_in_place(x_adv: &mut [f64], x_ref: &[f64], epsilon: f64, lo: f64, hi: f64) {
    for (a, &r) in x_adv.iter_mut().zip(x_ref) {
        *a = a.max(r - epsilon).max(lo).min(r + epsilon).min(hi);
    }
}

/// True when `o` is inside the ε-box around `x` (with [`BUDGET_TOL`] slack)
/// and inside the domain.
pub fn within_budget(o: &Tensor, x: &Tensor, epsilon: f64, lo: f64, hi: f64) -> bool {
    o.shape() == x.shape()
        && o
            .data()
            .iter()
            .zip(x.data())
            .all(|(&a, &r)| (a - r).abs() <= epsilon + BUDGET_TOL && a >= lo && a <= hi)
}

/// FGSM: one signed step of size ε from the clean point, projected.
pub fn fgsm<C: Classifier + ?Sized>(model: &C, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    let (_, grad) = model.input_gradient(x, y)?;
    let stepped = sign_step(x, &grad, spec.epsilon)?;
    project_box(&stepped, x, spec.epsilon, spec.lo, spec.hi)
}

/// `x + u`, `u ~ Uniform[−ε, ε]` i.i.d. per coordinate, clamped to `[lo, hi]`.
pub fn random_start<R: Rng + ?Sized>(x: &Tensor, epsilon: f64, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        let u = uniform_symmetric(epsilon, rng);
        *v = (*v + u).max(lo).min(hi);
    }
    out
}

/// One draw from `Uniform[−ε, ε]`; always consumes exactly one `u64`.
#[inline]
pub fn uniform_symmetric<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    epsilon * (2.0 * u - 1.0)
}

/// PGD: `spec.steps` signed steps of size `spec.alpha`, each followed by
/// projection, from a random start when `spec.random_start` is set.
pub fn pgd<C: Classifier + ?Sized, R: Rng + ?Sized>(
    model: &C,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate()?;
    let mut adv = if spec.random_start {
        random_start(x, spec.epsilon, spec.lo, spec.hi, rng)
    } else {
        x.clone()
    };
    for _ in 0..spec.steps {
        let (_, grad) = model.input_gradient(&adv, y)?;
        for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a += spec.alpha * sgn(g);
        }
        project_box_in_place(adv.data_mut(), x.data(), spec.epsilon, spec.lo, spec.hi);
    }
    Ok(adv)
}
