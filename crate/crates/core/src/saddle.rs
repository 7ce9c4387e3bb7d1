//! Convex-concave saddle problems with exact oracles, the stochastic block
//! coordinate solvers SGDBCA and ASGDBCA, regret and duality-gap
//! measurement, and the gradient-norm ratio.
//!
//! The objective is `φ(θ, x) = (1/n) Σᵢ ℓᵢ(θ, xᵢ)` with `θ` in an L2 ball of
//! radius `D` around the origin and each `xᵢ` in the L∞ box of radius `ε`
//! around its center `xᵢ,₀`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::adaptive::ema_update;
use crate::attacks::sgn;
use crate::error::{Error, Result};

/// Floor on the ASGDBCA preconditioner divisor.
pub const PRECONDITIONER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `ℓᵢ = θᵀAᵢxᵢ` with `Aᵢ` stored row-major as `p × d`, instance-major.
    Bilinear { a: Vec<f64> },
    /// `ℓᵢ = θᵀ(wᵢ ⊙ xᵢ) − (λ/2)‖xᵢ − xᵢ,₀‖² + (μ/2)‖θ‖²` with `p = d`.
    Quadratic { w: Vec<f64>, lambda: f64, mu: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleProblem {
    pub coupling: Coupling,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    /// Box centers, `n × d`.
    pub x0: Vec<f64>,
    pub epsilon: f64,
    pub radius: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl SaddleProblem {
    pub fn bilinear(a: Vec<f64>, x0: Vec<f64>, n: usize, d: usize, p: usize, epsilon: f64, radius: f64) -> Result<Self> {
        let prob = Self {
            coupling: Coupling::Bilinear { a },
            n,
            d,
            p,
            x0,
            epsilon,
            radius,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn quadratic(w: Vec<f64>, lambda: f64, mu: f64, x0: Vec<f64>, n: usize, d: usize, epsilon: f64, radius: f64) -> Result<Self> {
        let prob = Self {
            coupling: Coupling::Quadratic { w, lambda, mu },
            n,
            d,
            p: d,
            x0,
            epsilon,
            radius,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.p == 0 {
            return Err(Error::InvalidArgument("n, d and p must be positive".into()));
        }
        if self.x0.len() != self.n * self.d {
            return Err(Error::Shape(format!("x0 has {} entries, expected {}", self.x0.len(), self.n * self.d)));
        }
        if !(self.epsilon >= 0.0) || !(self.radius > 0.0) {
            return Err(Error::InvalidArgument("need epsilon >= 0 and radius > 0".into()));
        }
        match &self.coupling {
            Coupling::Bilinear { a } => {
                if a.len() != self.n * self.p * self.d {
                    return Err(Error::Shape(format!("A has {} entries, expected {}", a.len(), self.n * self.p * self.d)));
                }
            }
            Coupling::Quadratic { w, lambda, mu } => {
                if self.p != self.d || w.len() != self.n * self.d {
                    return Err(Error::Shape("quadratic coupling needs p = d and n × d weights".into()));
                }
                if !(*lambda > 0.0) || !(*mu >= 0.0) {
                    return Err(Error::InvalidArgument("need lambda > 0 and mu >= 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self.coupling {
            Coupling::Bilinear { .. } => "bilinear",
            Coupling::Quadratic { .. } => "quadratic",
        }
    }

    fn a(&self, i: usize) -> &[f64] {
        match &self.coupling {
            Coupling::Bilinear { a } => &a[i * self.p * self.d..(i + 1) * self.p * self.d],
            Coupling::Quadratic { .. } => unreachable!("bilinear accessor"),
        }
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.x0[i * self.d..(i + 1) * self.d]
    }

    /// `Aᵢᵀθ` for the bilinear coupling.
    fn at_theta(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let a = self.a(i);
        out.fill(0.0);
        for (r, &t) in theta.iter().enumerate() {
            let row = &a[r * self.d..(r + 1) * self.d];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v * t;
            }
        }
    }

    /// `Aᵢxᵢ` for the bilinear coupling.
    fn a_x(&self, i: usize, xi: &[f64], out: &mut [f64]) {
        let a = self.a(i);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(&a[r * self.d..(r + 1) * self.d], xi);
        }
    }

    pub fn loss_i(&self, i: usize, theta: &[f64], xi: &[f64]) -> f64 {
        match &self.coupling {
            Coupling::Bilinear { .. } => {
                let mut ax = vec![0.0; self.p];
                self.a_x(i, xi, &mut ax);
                dot(theta, &ax)
            }
            Coupling::Quadratic { w, lambda, mu } => {
                let wi = &w[i * self.d..(i + 1) * self.d];
                let c = self.center(i);
                let mut s = 0.0;
                let mut dist = 0.0;
                for j in 0..self.d {
                    s += theta[j] * wi[j] * xi[j];
                    dist += (xi[j] - c[j]).powi(2);
                }
                s - 0.5 * lambda * dist + 0.5 * mu * dot(theta, theta)
            }
        }
    }

    /// `∇_{xᵢ} ℓᵢ(θ, xᵢ)`.
    pub fn grad_x_i(&self, i: usize, theta: &[f64], xi: &[f64], out: &mut [f64]) {
        match &self.coupling {
            Coupling::Bilinear { .. } => self.at_theta(i, theta, out),
            Coupling::Quadratic { w, lambda, .. } => {
                let wi = &w[i * self.d..(i + 1) * self.d];
                let c = self.center(i);
                for j in 0..self.d {
                    out[j] = wi[j] * theta[j] - lambda * (xi[j] - c[j]);
                }
            }
        }
    }

    /// `∇_θ ℓᵢ(θ, xᵢ)`.
    pub fn grad_theta_i(&self, i: usize, theta: &[f64], xi: &[f64], out: &mut [f64]) {
        match &self.coupling {
            Coupling::Bilinear { .. } => self.a_x(i, xi, out),
            Coupling::Quadratic { w, mu, .. } => {
                let wi = &w[i * self.d..(i + 1) * self.d];
                for j in 0..self.d {
                    out[j] = wi[j] * xi[j] + mu * theta[j];
                }
            }
        }
    }

    /// `φ(θ, x)`.
    pub fn phi(&self, theta: &[f64], x: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| self.loss_i(i, theta, &x[i * self.d..(i + 1) * self.d]))
            .sum::<f64>()
            / self.n as f64
    }

    pub fn project_theta(&self, theta: &mut [f64]) {
        let r = norm(theta);
        if r > self.radius {
            let s = self.radius / r;
            for t in theta.iter_mut() {
                *t *= s;
            }
        }
    }

    pub fn project_x_block(&self, i: usize, xi: &mut [f64]) {
        for (v, &c) in xi.iter_mut().zip(self.center(i)) {
            *v = v.clamp(c - self.epsilon, c + self.epsilon);
        }
    }

    /// Exact `argmax_x φ(θ, x)` and its value.
    pub fn inner_max(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let mut x = self.x0.clone();
        let mut g = vec![0.0; self.d];
        for i in 0..self.n {
            let xi = &mut x[i * self.d..(i + 1) * self.d];
            match &self.coupling {
                Coupling::Bilinear { .. } => {
                    self.at_theta(i, theta, &mut g);
                    for (v, &gj) in xi.iter_mut().zip(&g) {
                        *v += self.epsilon * sgn(gj);
                    }
                }
                Coupling::Quadratic { w, lambda, .. } => {
                    let wi = &w[i * self.d..(i + 1) * self.d];
                    for j in 0..self.d {
                        xi[j] += wi[j] * theta[j] / lambda;
                    }
                    self.project_x_block(i, xi);
                }
            }
        }
        let value = self.phi(theta, &x);
        (x, value)
    }

    /// `max_x φ(θ, x)`.
    pub fn max_value(&self, theta: &[f64]) -> f64 {
        match &self.coupling {
            Coupling::Bilinear { .. } => {
                let mut g = vec![0.0; self.d];
                let mut total = 0.0;
                for i in 0..self.n {
                    self.at_theta(i, theta, &mut g);
                    total += dot(&g, self.center(i)) + self.epsilon * g.iter().map(|v| v.abs()).sum::<f64>();
                }
                total / self.n as f64
            }
            Coupling::Quadratic { .. } => self.inner_max(theta).1,
        }
    }

    /// Exact `argmin_θ φ(θ, x)` over the ball and its value.
    pub fn inner_min(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut m = vec![0.0; self.p];
        let mut tmp = vec![0.0; self.p];
        let zero = vec![0.0; self.p];
        for i in 0..self.n {
            let xi = &x[i * self.d..(i + 1) * self.d];
            match &self.coupling {
                Coupling::Bilinear { .. } => self.a_x(i, xi, &mut tmp),
                Coupling::Quadratic { .. } => self.grad_theta_i(i, &zero, xi, &mut tmp),
            }
            for (a, b) in m.iter_mut().zip(&tmp) {
                *a += b / self.n as f64;
            }
        }
        let mn = norm(&m);
        let theta = match &self.coupling {
            Coupling::Quadratic { mu, .. } if *mu > 0.0 => {
                let mut t: Vec<f64> = m.iter().map(|v| -v / mu).collect();
                self.project_theta(&mut t);
                t
            }
            _ if mn > 0.0 => m.iter().map(|v| -self.radius * v / mn).collect(),
            _ => zero,
        };
        let value = match &self.coupling {
            Coupling::Bilinear { .. } => -self.radius * mn,
            Coupling::Quadratic { .. } => self.phi(&theta, x),
        };
        (theta, value)
    }

    pub fn min_value(&self, x: &[f64]) -> f64 {
        self.inner_min(x).1
    }

    /// Assumption constants from closed forms: exact `G_{xᵢ}` for the
    /// bilinear coupling, analytic upper bounds otherwise.
    pub fn constants(&self) -> Constants {
        let d_theta = self.radius;
        let d_x = 2.0 * self.epsilon;
        let reach: Vec<f64> = (0..self.n)
            .map(|i| {
                let c = self.center(i);
                norm(&c.iter().map(|v| v.abs() + self.epsilon).collect::<Vec<_>>())
            })
            .collect();
        let (g_x_i, g_theta_i, l_x, l_theta, exact) = match &self.coupling {
            Coupling::Bilinear { .. } => {
                let s: Vec<f64> = (0..self.n).map(|i| spectral_norm(self.a(i), self.p, self.d)).collect();
                let gx = s.iter().map(|v| v * self.radius).collect();
                let gt = s.iter().zip(&reach).map(|(a, b)| a * b).collect();
                (gx, gt, 0.0, 0.0, true)
            }
            Coupling::Quadratic { w, lambda, mu } => {
                let mut gx = Vec::with_capacity(self.n);
                let mut gt = Vec::with_capacity(self.n);
                for i in 0..self.n {
                    let wi = &w[i * self.d..(i + 1) * self.d];
                    let wmax = wi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    gx.push(wmax * self.radius + lambda * self.epsilon * (self.d as f64).sqrt());
                    let c = self.center(i);
                    let wx: Vec<f64> = (0..self.d).map(|j| wi[j] * (c[j].abs() + self.epsilon)).collect();
                    gt.push(norm(&wx) + mu * self.radius);
                }
                (gx, gt, *lambda, *mu, false)
            }
        };
        Constants::assemble(d_theta, d_x, g_x_i, &g_theta_i, l_x, l_theta, exact)
    }
}

/// Largest singular value of a row-major `rows × cols` matrix.
fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    // Power iteration on AAᵀ.
    let mut gram = vec![0.0; rows * rows];
    for r in 0..rows {
        for s in 0..rows {
            gram[r * rows + s] = dot(&a[r * cols..(r + 1) * cols], &a[s * cols..(s + 1) * cols]);
        }
    }
    sym_max_eig(&gram, rows).max(0.0).sqrt()
}

fn sym_max_eig(m: &[f64], n: usize) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..n).map(|r| dot(&m[r * n..(r + 1) * n], &v)).collect();
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        let next = dot(&v, &w) / dot(&v, &v);
        v = w.iter().map(|x| x / wn).collect();
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Problem constants: radii, gradient bounds and smoothness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub d_theta: f64,
    pub d_x: f64,
    /// Root mean square over instances of the θ-gradient bound.
    pub g_theta: f64,
    pub g_x_i: Vec<f64>,
    /// `√(Σᵢ G_{xᵢ}²)`.
    pub g_x: f64,
    pub l_x: f64,
    pub l_theta: f64,
    /// True when `g_x_i` is exact; false for bounds or sampled estimates.
    pub exact: bool,
}

impl Constants {
    fn assemble(d_theta: f64, d_x: f64, g_x_i: Vec<f64>, g_theta_i: &[f64], l_x: f64, l_theta: f64, exact: bool) -> Self {
        let n = g_theta_i.len().max(1) as f64;
        Self {
            d_theta,
            d_x,
            g_theta: (g_theta_i.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            g_x: g_x_i.iter().map(|v| v * v).sum::<f64>().sqrt(),
            g_x_i,
            l_x,
            l_theta,
            exact,
        }
    }
}

/// Closed-form constants for the bilinear coupling; sampled sups (lower
/// bounds, flagged `exact = false`) otherwise.
pub fn estimate_constants<R: Rng + ?Sized>(problem: &SaddleProblem, samples: usize, rng: &mut R) -> Result<Constants> {
    match problem.coupling {
        Coupling::Bilinear { .. } => Ok(problem.constants()),
        Coupling::Quadratic { .. } => monte_carlo_constants(problem, samples, rng),
    }
}

/// Sampled sups of the gradient norms over random feasible points.
pub fn monte_carlo_constants<R: Rng + ?Sized>(problem: &SaddleProblem, samples: usize, rng: &mut R) -> Result<Constants> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let (n, d, p) = (problem.n, problem.d, problem.p);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut g_x_i = vec![0.0f64; n];
    let mut g_theta_i = vec![0.0f64; n];
    let mut gx = vec![0.0; d];
    let mut gt = vec![0.0; p];
    for _ in 0..samples {
        let mut theta: Vec<f64> = (0..p).map(|_| normal.sample(rng)).collect();
        let r = norm(&theta).max(f64::MIN_POSITIVE);
        let scale = problem.radius * rng.random::<f64>().powf(1.0 / p as f64) / r;
        theta.iter_mut().for_each(|t| *t *= scale);
        for i in 0..n {
            let xi: Vec<f64> = problem
                .center(i)
                .iter()
                .map(|&c| c + problem.epsilon * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            problem.grad_x_i(i, &theta, &xi, &mut gx);
            problem.grad_theta_i(i, &theta, &xi, &mut gt);
            g_x_i[i] = g_x_i[i].max(norm(&gx));
            g_theta_i[i] = g_theta_i[i].max(norm(&gt));
        }
    }
    let (l_x, l_theta) = match problem.coupling {
        Coupling::Bilinear { .. } => (0.0, 0.0),
        Coupling::Quadratic { lambda, mu, .. } => (lambda, mu),
    };
    Ok(Constants::assemble(problem.radius, 2.0 * problem.epsilon, g_x_i, &g_theta_i, l_x, l_theta, false))
}

/// `(1 − β)^{−1/4} · √(mean(G²) / mean(G)²)`.
pub fn gradient_norm_ratio(g: &[f64], beta: f64) -> Result<f64> {
    if g.is_empty() {
        return Err(Error::InvalidArgument("empty gradient-bound list".into()));
    }
    if g.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("gradient bounds must be positive".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1), got {beta}")));
    }
    let n = g.len() as f64;
    let mean_sq = g.iter().map(|v| v * v).sum::<f64>() / n;
    let mean = g.iter().sum::<f64>() / n;
    Ok((1.0 - beta).powf(-0.25) * (mean_sq / (mean * mean)).sqrt())
}

/// Distribution of the per-instance scales `sᵢ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tail {
    /// `sᵢ ~ Pareto(scale 1, shape)`.
    Pareto { shape: f64 },
    /// `sᵢ = 1`.
    Equal,
}

/// Shape of the unscaled coupling matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    /// Orthonormal factor of a Gaussian matrix, so `‖Aᵢ‖₂ = sᵢ` exactly.
    Orthogonal,
    /// i.i.d. standard normal entries.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilinearSpec {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub epsilon: f64,
    pub radius: f64,
    /// Standard deviation of the box centers.
    pub center_scale: f64,
    pub tail: Tail,
    pub factor: Factor,
    pub seed: u64,
}

impl Default for BilinearSpec {
    fn default() -> Self {
        Self {
            n: 50,
            d: 10,
            p: 10,
            epsilon: 0.05,
            radius: 1.0,
            center_scale: 1.0,
            tail: Tail::Pareto { shape: 1.5 },
            factor: Factor::Orthogonal,
            seed: 0,
        }
    }
}

fn draw_scale<R: Rng + ?Sized>(tail: Tail, rng: &mut R) -> Result<f64> {
    match tail {
        Tail::Equal => Ok(1.0),
        Tail::Pareto { shape } => Pareto::new(1.0, shape)
            .map(|dist| dist.sample(rng))
            .map_err(|e| Error::InvalidArgument(format!("pareto shape {shape}: {e}"))),
    }
}

/// Orthonormalizes the columns (if `rows >= cols`) or rows of a row-major
/// matrix in place by modified Gram-Schmidt.
fn orthonormalize(m: &mut [f64], rows: usize, cols: usize) {
    let (count, len, stride, step) = if rows >= cols { (cols, rows, 1, cols) } else { (rows, cols, cols, 1) };
    // Vector k occupies m[k * stride + j * step] for j in 0..len.
    let idx = |k: usize, j: usize| k * stride + j * step;
    for k in 0..count {
        for prev in 0..k {
            let proj: f64 = (0..len).map(|j| m[idx(k, j)] * m[idx(prev, j)]).sum();
            for j in 0..len {
                m[idx(k, j)] -= proj * m[idx(prev, j)];
            }
        }
        let nk: f64 = (0..len).map(|j| m[idx(k, j)].powi(2)).sum::<f64>().sqrt();
        for j in 0..len {
            m[idx(k, j)] /= nk;
        }
    }
}

/// `Aᵢ = sᵢ · Qᵢ` with `Qᵢ` orthogonal or Gaussian and `sᵢ` from `tail`;
/// centers `xᵢ,₀ ~ N(0, center_scale²)`.
pub fn bilinear_family(spec: &BilinearSpec) -> Result<SaddleProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (n, d, p) = (spec.n, spec.d, spec.p);
    let mut a = Vec::with_capacity(n * p * d);
    let mut scales = Vec::with_capacity(n);
    for _ in 0..n {
        let s = draw_scale(spec.tail, &mut rng)?;
        let mut q: Vec<f64> = (0..p * d).map(|_| normal.sample(&mut rng)).collect();
        if spec.factor == Factor::Orthogonal {
            orthonormalize(&mut q, p, d);
        }
        a.extend(q.iter().map(|v| s * v));
        scales.push(s);
    }
    let x0 = (0..n * d).map(|_| spec.center_scale * normal.sample(&mut rng)).collect();
    SaddleProblem::bilinear(a, x0, n, d, p, spec.epsilon, spec.radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticSpec {
    pub n: usize,
    pub d: usize,
    pub epsilon: f64,
    pub radius: f64,
    pub lambda: f64,
    pub mu: f64,
    pub center_scale: f64,
    pub tail: Tail,
    pub seed: u64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self {
            n: 50,
            d: 10,
            epsilon: 0.05,
            radius: 1.0,
            lambda: 1.0,
            mu: 0.1,
            center_scale: 1.0,
            tail: Tail::Pareto { shape: 1.5 },
            seed: 0,
        }
    }
}

/// `wᵢ = sᵢ · N(0, I)` with `sᵢ` from `tail`; centers `N(0, center_scale²)`.
pub fn quadratic_family(spec: &QuadraticSpec) -> Result<SaddleProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (n, d) = (spec.n, spec.d);
    let mut w = Vec::with_capacity(n * d);
    for _ in 0..n {
        let s = draw_scale(spec.tail, &mut rng)?;
        w.extend((0..d).map(|_| s * normal.sample(&mut rng)));
    }
    let x0 = (0..n * d).map(|_| spec.center_scale * normal.sample(&mut rng)).collect();
    SaddleProblem::quadratic(w, spec.lambda, spec.mu, x0, n, d, spec.epsilon, spec.radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgdbca,
    Asgdbca,
}

/// Which x iterate the min term of a regret summand uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `x^{t+1}`, the iterate produced in the same step as `θ^t` is used.
    #[default]
    Next,
    /// `x^t`, the iterate before the step.
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaddleRunConfig {
    pub t: usize,
    /// Defaults to the prescribed `D_θ / (G_θ √T)`.
    pub eta_theta: Option<f64>,
    /// Defaults to `√(nd)·D_x / (G_x √T)` (SGDBCA) or
    /// `√d·D_x·(1 − β)^{1/4} / √T` (ASGDBCA).
    pub eta_x: Option<f64>,
    pub beta: f64,
    pub seed: u64,
    /// Initial θ; defaults to the origin.
    pub theta0: Option<Vec<f64>>,
}

impl Default for SaddleRunConfig {
    fn default() -> Self {
        Self {
            t: 1000,
            eta_theta: None,
            eta_x: None,
            beta: 0.5,
            seed: 0,
            theta0: None,
        }
    }
}

/// Prescribed `(η_θ, η_x)` for a run of length `t`.
pub fn prescribed_steps(problem: &SaddleProblem, consts: &Constants, alg: Algorithm, t: usize, beta: f64) -> (f64, f64) {
    let rt = (t as f64).sqrt();
    let eta_theta = consts.d_theta / (consts.g_theta * rt);
    let d = problem.d as f64;
    let eta_x = match alg {
        Algorithm::Sgdbca => (problem.n as f64 * d).sqrt() * consts.d_x / (consts.g_x * rt),
        Algorithm::Asgdbca => d.sqrt() * consts.d_x * (1.0 - beta).powf(0.25) / rt,
    };
    (eta_theta, eta_x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleTrajectory {
    pub algorithm: Algorithm,
    pub eta_theta: f64,
    pub eta_x: f64,
    /// `θ⁰ … θᵀ`, each of length `p`.
    pub thetas: Vec<f64>,
    /// Instance picked at each step.
    pub picks: Vec<usize>,
    /// The picked block after its update, `T × d`.
    pub x_new: Vec<f64>,
    /// `v` and `v̂` of the picked instance after each step (zero for SGDBCA).
    pub v: Vec<f64>,
    pub vhat: Vec<f64>,
    pub x_init: Vec<f64>,
    p: usize,
    d: usize,
}

impl SaddleTrajectory {
    pub fn len(&self) -> usize {
        self.picks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picks.is_empty()
    }

    pub fn theta(&self, t: usize) -> &[f64] {
        &self.thetas[t * self.p..(t + 1) * self.p]
    }

    pub fn x_after(&self, t: usize) -> &[f64] {
        &self.x_new[t * self.d..(t + 1) * self.d]
    }

    /// Full x iterate after the first `steps` steps.
    pub fn x_at(&self, steps: usize) -> Vec<f64> {
        let mut x = self.x_init.clone();
        for t in 0..steps {
            let k = self.picks[t];
            x[k * self.d..(k + 1) * self.d].copy_from_slice(self.x_after(t));
        }
        x
    }

    /// `θ̄ = (1/T) Σ_{t<T} θ^t` and `x̄ = (1/T) Σ_{t<T} x^{t+1}`.
    pub fn averages(&self, steps: usize) -> (Vec<f64>, Vec<f64>) {
        let mut tbar = vec![0.0; self.p];
        let mut xbar = vec![0.0; self.x_init.len()];
        let mut x = self.x_init.clone();
        for t in 0..steps {
            for (a, b) in tbar.iter_mut().zip(self.theta(t)) {
                *a += b;
            }
            let k = self.picks[t];
            x[k * self.d..(k + 1) * self.d].copy_from_slice(self.x_after(t));
            for (a, b) in xbar.iter_mut().zip(&x) {
                *a += b;
            }
        }
        let inv = 1.0 / steps.max(1) as f64;
        tbar.iter_mut().for_each(|v| *v *= inv);
        xbar.iter_mut().for_each(|v| *v *= inv);
        (tbar, xbar)
    }
}

pub fn sgdbca_run(problem: &SaddleProblem, cfg: &SaddleRunConfig) -> Result<SaddleTrajectory> {
    run(problem, cfg, Algorithm::Sgdbca)
}

pub fn asgdbca_run(problem: &SaddleProblem, cfg: &SaddleRunConfig) -> Result<SaddleTrajectory> {
    run(problem, cfg, Algorithm::Asgdbca)
}

/// Runs `alg` for `cfg.t` steps. Each step picks `k` uniformly, ascends
/// block `k` by its gradient (scaled by `1/max(√v̂ₖ, 1e-12)` for ASGDBCA)
/// and projects it, then descends θ along `∇_θ ℓₖ(θ, x_k^{t+1})` and projects
/// onto the ball.
pub fn run(problem: &SaddleProblem, cfg: &SaddleRunConfig, alg: Algorithm) -> Result<SaddleTrajectory> {
    problem.validate()?;
    if cfg.t == 0 {
        return Err(Error::InvalidArgument("t must be at least 1".into()));
    }
    if alg == Algorithm::Asgdbca && !(0.0..1.0).contains(&cfg.beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1), got {}", cfg.beta)));
    }
    let (n, d, p) = (problem.n, problem.d, problem.p);
    let consts = problem.constants();
    let (pt, px) = prescribed_steps(problem, &consts, alg, cfg.t, cfg.beta);
    let eta_theta = cfg.eta_theta.unwrap_or(pt);
    let eta_x = cfg.eta_x.unwrap_or(px);
    let mut theta = match &cfg.theta0 {
        Some(t) if t.len() == p => t.clone(),
        Some(t) => return Err(Error::Shape(format!("theta0 has {} entries, expected {p}", t.len()))),
        None => vec![0.0; p],
    };
    problem.project_theta(&mut theta);
    let mut x = problem.x0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut v, mut vhat) = (vec![0.0f64; n], vec![0.0f64; n]);
    let mut traj = SaddleTrajectory {
        algorithm: alg,
        eta_theta,
        eta_x,
        thetas: Vec::with_capacity((cfg.t + 1) * p),
        picks: Vec::with_capacity(cfg.t),
        x_new: Vec::with_capacity(cfg.t * d),
        v: Vec::with_capacity(cfg.t),
        vhat: Vec::with_capacity(cfg.t),
        x_init: x.clone(),
        p,
        d,
    };
    traj.thetas.extend_from_slice(&theta);
    let mut gx = vec![0.0; d];
    let mut gt = vec![0.0; p];
    for _ in 0..cfg.t {
        let k = rng.random_range(0..n);
        let xk = &mut x[k * d..(k + 1) * d];
        problem.grad_x_i(k, &theta, xk, &mut gx);
        let step = match alg {
            Algorithm::Sgdbca => eta_x,
            Algorithm::Asgdbca => {
                v[k] = ema_update(v[k], dot(&gx, &gx), cfg.beta)?;
                vhat[k] = vhat[k].max(v[k]);
                eta_x / vhat[k].sqrt().max(PRECONDITIONER_FLOOR)
            }
        };
        for (xv, g) in xk.iter_mut().zip(&gx) {
            *xv += step * g;
        }
        problem.project_x_block(k, xk);
        problem.grad_theta_i(k, &theta, xk, &mut gt);
        for (t, g) in theta.iter_mut().zip(&gt) {
            *t -= eta_theta * g;
        }
        problem.project_theta(&mut theta);
        if !theta.iter().chain(xk.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{alg:?} iterate")));
        }
        traj.picks.push(k);
        traj.x_new.extend_from_slice(xk);
        traj.v.push(v[k]);
        traj.vhat.push(vhat[k]);
        traj.thetas.extend_from_slice(&theta);
    }
    Ok(traj)
}

/// Prefix sums `R(1), …, R(T)` of
/// `max_x φ(θ^t, x) − min_θ φ(θ, x')` with `x' = x^{t+1}` or `x^t`.
pub fn regret(traj: &SaddleTrajectory, problem: &SaddleProblem, pairing: Pairing) -> Vec<f64> {
    let d = problem.d;
    let mut x = traj.x_init.clone();
    let mut total = 0.0;
    let mut out = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let max_term = problem.max_value(traj.theta(t));
        let k = traj.picks[t];
        let min_term = match pairing {
            Pairing::Current => {
                let m = problem.min_value(&x);
                x[k * d..(k + 1) * d].copy_from_slice(traj.x_after(t));
                m
            }
            Pairing::Next => {
                x[k * d..(k + 1) * d].copy_from_slice(traj.x_after(t));
                problem.min_value(&x)
            }
        };
        total += max_term - min_term;
        out.push(total);
    }
    out
}

/// Certified saddle value: `lower ≤ min_θ max_x φ ≤ upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
}

impl Reference {
    /// The certified lower end, so gaps measured against it never
    /// understate.
    pub fn value(&self) -> f64 {
        self.lower
    }
}

pub const REFERENCE_TOL: f64 = 1e-10;

/// Solves for the saddle value until `upper − lower < tol`.
///
/// Bilinear: accelerated projected gradient with restarts on
/// `min_x ½‖(1/n) Σ Aᵢxᵢ‖²` over the box; `−D‖g(x)‖` bounds the value
/// from below and `max_x φ(θ(x), ·)` at the induced `θ(x)` (or at the
/// origin) from above. Quadratic: the same scheme on the smooth convex
/// `θ ↦ max_x φ(θ, x)` over the ball, with the dual bound at the induced
/// inner maximizer.
pub fn reference_solve(problem: &SaddleProblem, tol: f64, max_iter: usize) -> Result<Reference> {
    match problem.coupling {
        Coupling::Bilinear { .. } => reference_bilinear(problem, tol, max_iter),
        Coupling::Quadratic { .. } => reference_quadratic(problem, tol, max_iter),
    }
}

fn reference_bilinear(problem: &SaddleProblem, tol: f64, max_iter: usize) -> Result<Reference> {
    let (n, d, p) = (problem.n, problem.d, problem.p);
    let nf = n as f64;
    // Lipschitz constant of the gradient: λ_max((1/n²) Σ AᵢAᵢᵀ).
    let mut gram = vec![0.0; p * p];
    for i in 0..n {
        let a = problem.a(i);
        for r in 0..p {
            for s in 0..p {
                gram[r * p + s] += dot(&a[r * d..(r + 1) * d], &a[s * d..(s + 1) * d]) / (nf * nf);
            }
        }
    }
    let lip = sym_max_eig(&gram, p) * (1.0 + 1e-9);
    let g_of = |x: &[f64]| {
        let mut g = vec![0.0; p];
        let mut tmp = vec![0.0; p];
        for i in 0..n {
            problem.a_x(i, &x[i * d..(i + 1) * d], &mut tmp);
            for (a, b) in g.iter_mut().zip(&tmp) {
                *a += b / nf;
            }
        }
        g
    };
    let zero = vec![0.0; p];
    let f_zero = problem.max_value(&zero);
    let certify = |x: &[f64]| {
        let g = g_of(x);
        let gn = norm(&g);
        let lower = -problem.radius * gn;
        let mut upper = f_zero;
        if gn > 0.0 {
            let theta: Vec<f64> = g.iter().map(|v| -problem.radius * v / gn).collect();
            upper = upper.min(problem.max_value(&theta));
        }
        (lower, upper)
    };
    let mut x = problem.x0.clone();
    let mut y = x.clone();
    let mut tk = 1.0f64;
    let mut grad = vec![0.0; n * d];
    let mut at = vec![0.0; d];
    for it in 0..max_iter {
        if it % 25 == 0 {
            let (lower, upper) = certify(&x);
            if upper - lower < tol {
                return Ok(Reference { lower, upper, iterations: it });
            }
        }
        let g = g_of(&y);
        for i in 0..n {
            problem.at_theta(i, &g, &mut at);
            for j in 0..d {
                grad[i * d + j] = at[j] / nf;
            }
        }
        let mut next = y.clone();
        for (v, gv) in next.iter_mut().zip(&grad) {
            *v -= gv / lip;
        }
        for i in 0..n {
            problem.project_x_block(i, &mut next[i * d..(i + 1) * d]);
        }
        let restart = (0..n * d).map(|j| (y[j] - next[j]) * (next[j] - x[j])).sum::<f64>() > 0.0;
        let t_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) };
        let mom = if restart { 0.0 } else { (tk - 1.0) / t_next };
        for j in 0..n * d {
            y[j] = next[j] + mom * (next[j] - x[j]);
        }
        x = next;
        tk = t_next;
    }
    let (lower, upper) = certify(&x);
    if upper - lower < tol {
        return Ok(Reference { lower, upper, iterations: max_iter });
    }
    Err(Error::NotConverged(upper - lower))
}

fn reference_quadratic(problem: &SaddleProblem, tol: f64, max_iter: usize) -> Result<Reference> {
    let Coupling::Quadratic { w, lambda, mu } = &problem.coupling else {
        unreachable!("quadratic reference");
    };
    let (n, d) = (problem.n, problem.d);
    let wmax2 = (0..n)
        .map(|i| w[i * d..(i + 1) * d].iter().fold(0.0f64, |m, v| m.max(v * v)))
        .sum::<f64>()
        / n as f64;
    let lip = wmax2 / lambda + mu;
    let grad_f = |theta: &[f64]| {
        let (xs, _) = problem.inner_max(theta);
        let mut g = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        for i in 0..n {
            problem.grad_theta_i(i, theta, &xs[i * d..(i + 1) * d], &mut tmp);
            for (a, b) in g.iter_mut().zip(&tmp) {
                *a += b / n as f64;
            }
        }
        g
    };
    let certify = |theta: &[f64]| {
        let (xs, upper) = problem.inner_max(theta);
        (problem.min_value(&xs), upper)
    };
    let mut theta = vec![0.0; d];
    let mut y = theta.clone();
    let mut tk = 1.0f64;
    for it in 0..max_iter {
        if it % 25 == 0 {
            let (lower, upper) = certify(&theta);
            if upper - lower < tol {
                return Ok(Reference { lower, upper, iterations: it });
            }
        }
        let g = grad_f(&y);
        let mut next: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b / lip).collect();
        problem.project_theta(&mut next);
        let restart = (0..d).map(|j| (y[j] - next[j]) * (next[j] - theta[j])).sum::<f64>() > 0.0;
        let t_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) };
        let mom = if restart { 0.0 } else { (tk - 1.0) / t_next };
        for j in 0..d {
            y[j] = next[j] + mom * (next[j] - theta[j]);
        }
        theta = next;
        tk = t_next;
    }
    let (lower, upper) = certify(&theta);
    if upper - lower < tol {
        return Ok(Reference { lower, upper, iterations: max_iter });
    }
    Err(Error::NotConverged(upper - lower))
}

/// `max_x φ(θ̄, x) − v*` against a certified reference value.
pub fn duality_gap(problem: &SaddleProblem, theta_bar: &[f64], reference: &Reference) -> f64 {
    problem.max_value(theta_bar) - reference.value()
}

/// `max_x φ(θ̄, x) − min_θ φ(θ, x̄)`, which needs no reference.
pub fn primal_dual_gap(problem: &SaddleProblem, theta_bar: &[f64], x_bar: &[f64]) -> f64 {
    problem.max_value(theta_bar) - problem.min_value(x_bar)
}

/// Log-spaced checkpoints `1, 2, 5, 10, 20, 50, …` up to `t`, always ending
/// at `t`.
pub fn checkpoints(t: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut base = 1;
    'outer: loop {
        for m in [1, 2, 5] {
            let c = m * base;
            if c >= t {
                break 'outer;
            }
            out.push(c);
        }
        base *= 10;
    }
    out.push(t);
    out
}

/// One row of `regret.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub t: usize,
    pub regret_prefix: f64,
    pub gap: f64,
    pub mean_v: f64,
}

/// Regret, gap against `reference`, and mean preconditioner at each
/// checkpoint.
pub fn regret_rows(
    traj: &SaddleTrajectory,
    problem: &SaddleProblem,
    reference: &Reference,
    pairing: Pairing,
    at: &[usize],
) -> Vec<RegretRow> {
    let r = regret(traj, problem, pairing);
    let mut v = vec![0.0; problem.n];
    let mut rows = Vec::with_capacity(at.len());
    let mut done = 0;
    for &t in at.iter().filter(|&&t| t >= 1 && t <= traj.len()) {
        while done < t {
            v[traj.picks[done]] = traj.v[done];
            done += 1;
        }
        let (tbar, _) = traj.averages(t);
        rows.push(RegretRow {
            t,
            regret_prefix: r[t - 1],
            gap: duality_gap(problem, &tbar, reference),
            mean_v: v.iter().sum::<f64>() / problem.n as f64,
        });
    }
    rows
}

pub fn regret_csv(rows: &[RegretRow]) -> String {
    let mut s = String::from("t,regret_prefix,gap,mean_v\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.t, r.regret_prefix, r.gap, r.mean_v));
    }
    s
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleSummary {
    pub kind: String,
    pub algorithm: Algorithm,
    pub t: usize,
    pub beta: f64,
    pub eta_theta: f64,
    pub eta_x: f64,
    pub constants: Constants,
    pub ratio: f64,
    pub final_regret: f64,
    pub final_gap: f64,
    pub reference: Reference,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, x0: f64, eps: f64) -> SaddleProblem {
        SaddleProblem::bilinear(vec![a], vec![x0], 1, 1, 1, eps, 1.0).unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert!((gradient_norm_ratio(&[2.0, 2.0, 2.0], 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((gradient_norm_ratio(&[1.0, 3.0], 0.0).unwrap() - 1.25f64.sqrt()).abs() < 1e-15);
        let r = gradient_norm_ratio(&[1.0, 3.0], 0.5).unwrap();
        assert!((r - 1.25f64.sqrt() * 0.5f64.powf(-0.25)).abs() < 1e-12);
        assert!((r - 1.3295).abs() < 1e-4);
        assert!(gradient_norm_ratio(&[], 0.5).is_err());
        assert!(gradient_norm_ratio(&[1.0, 0.0], 0.5).is_err());
        assert!(gradient_norm_ratio(&[1.0], 1.0).is_err());
    }

    #[test]
    fn scalar_oracles() {
        let prob = scalar(1.0, 0.0, 0.1);
        let (x, v) = prob.inner_max(&[2.0]);
        assert_eq!(x, vec![0.1]);
        assert!((v - 0.2).abs() < 1e-15);
        let (x, v) = prob.inner_max(&[0.0]);
        assert_eq!((x, v), (vec![0.0], 0.0));
        let (t, v) = prob.inner_min(&[0.0]);
        assert_eq!((t, v), (vec![0.0], 0.0));
        let (t, v) = prob.inner_min(&[0.05]);
        assert_eq!(t, vec![-1.0]);
        assert!((v + 0.05).abs() < 1e-15);
    }

    #[test]
    fn scalar_constants() {
        let prob = scalar(2.0, 0.0, 0.3);
        let c = prob.constants();
        assert_eq!(c.g_x_i, vec![2.0]);
        assert!((c.d_x - 0.6).abs() < 1e-15);
        assert!(c.exact);
    }

    #[test]
    fn scalar_first_step() {
        let prob = scalar(1.0, 0.0, 1.0);
        let cfg = SaddleRunConfig {
            t: 1,
            eta_theta: Some(0.2),
            eta_x: Some(0.5),
            theta0: Some(vec![1.0]),
            ..SaddleRunConfig::default()
        };
        let tr = sgdbca_run(&prob, &cfg).unwrap();
        assert_eq!(tr.x_after(0), &[0.5]);
        assert!((tr.theta(1)[0] - (1.0 - 0.2 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_grid() {
        assert_eq!(checkpoints(100), vec![1, 2, 5, 10, 20, 50, 100]);
        assert_eq!(checkpoints(1), vec![1]);
        assert_eq!(checkpoints(30), vec![1, 2, 5, 10, 20, 30]);
    }

    #[test]
    fn orthogonal_factor_has_unit_spectral_norm() {
        let prob = bilinear_family(&BilinearSpec {
            n: 3,
            tail: Tail::Equal,
            ..BilinearSpec::default()
        })
        .unwrap();
        for g in prob.constants().g_x_i {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }
}
