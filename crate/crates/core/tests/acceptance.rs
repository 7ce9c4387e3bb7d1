//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails.
//!
//! Criteria 6 and 7 train on the 10,000-digit MNIST subset found in
//! `$ATAS_DATA_DIR` or `<workspace>/data/mnist` (see
//! `scripts/mnist_subset.py`).

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use atas_core::adaptive::{resize_bilinear, AdaptiveConfig, ResetPeriod, StateTable, StorageSide};
use atas_core::attacks::{fgsm, pgd, within_budget, AttackSpec};
use atas_core::autodiff::{grad_check, Bindings, Graph, NodeId};
use atas_core::data::{load_mnist_dir, synth_generate, Dataset, SynthSpec, DATA_DIR_ENV};
use atas_core::diagnostics::CoDetector;
use atas_core::experiment::{default_model, parse_config, run};
use atas_core::models::{Classifier, Model, ModelConfig};
use atas_core::saddle::{
    bilinear_family, duality_gap, gradient_norm_ratio, reference_solve, regret, run as saddle_run, Algorithm,
    BilinearSpec, Pairing, SaddleRunConfig, Tail, REFERENCE_TOL,
};
use atas_core::trainers::{init_state, train, Method, TrainConfig, TrainHistory};
use atas_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least 0.01 away from zero, so no kink lies within a
/// finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand_tensor(shape, rng).map(|v| if v.abs() < 0.01 { v.signum() * 0.01 + v } else { v })
}

/// Distinct values spaced 0.01 apart in random order, so every pooling
/// window has a unique maximum with a clear margin.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Reduces `out` to a scalar with random weights.
fn weighted_loss(g: &mut Graph, out: NodeId, rng: &mut ChaCha8Rng) -> Result<()> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_tensor(&shape, rng))?;
    let m = g.mul(out, w)?;
    let s = g.sum(m)?;
    g.set_loss(s)
}

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let leaf = |g: &mut Graph, b: &mut Bindings, t: Tensor, param: bool| -> Result<NodeId> {
        let id = if param { g.param(t.shape())? } else { g.input(t.shape())? };
        b.insert(id, t);
        Ok(id)
    };
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.random_range(lo..=hi);
    let out = match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            let x = leaf(&mut g, &mut b, rand_tensor(&[m, k], rng), false)?;
            let w = leaf(&mut g, &mut b, rand_tensor(&[k, n], rng), true)?;
            g.matmul(x, w)?
        }
        "add" | "mul" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let x = leaf(&mut g, &mut b, rand_tensor(&shape, rng), false)?;
            let y = leaf(&mut g, &mut b, rand_tensor(&shape, rng), true)?;
            if op == "add" {
                g.add(x, y)?
            } else {
                g.mul(x, y)?
            }
        }
        "add_bias" => {
            let (n, f) = (dim(rng, 1, 4), dim(rng, 1, 5));
            let x = leaf(&mut g, &mut b, rand_tensor(&[n, f], rng), false)?;
            let bias = leaf(&mut g, &mut b, rand_tensor(&[f], rng), true)?;
            g.add_bias(x, bias)?
        }
        "scale" => {
            let x = leaf(&mut g, &mut b, rand_tensor(&[dim(rng, 1, 4), dim(rng, 1, 4)], rng), false)?;
            let f = rng.random_range(-2.0..2.0);
            g.scale(x, f)?
        }
        "sum" => {
            let x = leaf(&mut g, &mut b, rand_tensor(&[dim(rng, 1, 4), dim(rng, 1, 4)], rng), false)?;
            g.sum(x)?
        }
        "relu" => {
            let x = leaf(&mut g, &mut b, away_from_zero(&[dim(rng, 1, 4), dim(rng, 1, 6)], rng), false)?;
            g.relu(x)?
        }
        "conv2d" => {
            let (n, c, o, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
            let side = dim(rng, k.max(2), 6);
            let x = leaf(&mut g, &mut b, rand_tensor(&[n, c, side, side], rng), false)?;
            let w = leaf(&mut g, &mut b, rand_tensor(&[o, c, k, k], rng), true)?;
            g.conv2d(x, w, stride, pad)?
        }
        "maxpool2" => {
            let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 7), dim(rng, 2, 7)];
            let x = leaf(&mut g, &mut b, distinct(&shape, rng), false)?;
            g.maxpool2(x)?
        }
        "flatten" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
            let x = leaf(&mut g, &mut b, rand_tensor(&shape, rng), false)?;
            g.flatten(x)?
        }
        "softmax_xent" => {
            let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let z = leaf(&mut g, &mut b, rand_tensor(&[n, k], rng).map(|v| 3.0 * v), false)?;
            let mut t = Tensor::zeros(&[n, k]);
            for i in 0..n {
                t.row_mut(i)[rng.random_range(0..k)] = 1.0;
            }
            let target = g.constant(t)?;
            let loss = g.softmax_xent(z, target)?;
            g.set_loss(loss)?;
            return grad_check(&g, &b, 1e-5);
        }
        other => unreachable!("{other}"),
    };
    weighted_loss(&mut g, out, rng)?;
    grad_check(&g, &b, 1e-5)
}

fn criterion_1() -> Outcome {
    let ops = [
        "matmul", "add", "add_bias", "mul", "scale", "sum", "relu", "conv2d", "maxpool2", "flatten", "softmax_xent",
    ];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for op in ops {
        let mut w: f64 = 0.0;
        for _ in 0..100 {
            match op_case(op, &mut rng) {
                Ok(e) => w = w.max(e),
                Err(e) => return Outcome::new(false, format!("{op}: {e}")),
            }
        }
        worst.push((op, w));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = max < 1e-4 && secs < 30.0;
    let detail = worst.iter().map(|(o, w)| format!("{o} {w:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(pass, format!("max rel err {max:.2e} in {secs:.1}s [{detail}]"))
}

// ---------------------------------------------------------------------------
// 2. Attack oracle equivalence

/// `ℓ(x) = mean_b wᵀx_b`, whose box maximizer is `x + ε·sgn(w)`.
struct Linear {
    w: Vec<f64>,
}

impl Classifier for Linear {
    fn input_gradient(&self, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
        let b = x.shape()[0];
        let mut g = Tensor::zeros(x.shape());
        for i in 0..b {
            for (gi, &wi) in g.row_mut(i).iter_mut().zip(&self.w) {
                *gi = wi / b as f64;
            }
        }
        Ok((self.example_losses(x, y)?.iter().sum::<f64>() / b as f64, g))
    }

    fn example_losses(&self, x: &Tensor, _y: &[usize]) -> Result<Vec<f64>> {
        Ok((0..x.shape()[0])
            .map(|i| x.row(i).iter().zip(&self.w).map(|(a, b)| a * b).sum())
            .collect())
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checks = 0;
    for m in 0..50 {
        let d = rng.random_range(2..20);
        let b = rng.random_range(1..4);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = Linear { w: w.clone() };
        let x = Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = vec![0; b];
        let eps = rng.random_range(0.01..0.3);
        let expect: Vec<f64> = (0..b * d)
            .map(|j| (x.data()[j] + eps * w[j % d].signum()).clamp(0.0, 1.0))
            .collect();
        let f = fgsm(&model, &x, &y, &AttackSpec::fgsm(eps)).unwrap();
        let p1 = pgd(&model, &x, &y, &AttackSpec::pgd(eps, eps, 1, false), &mut rng).unwrap();
        if f != p1 || f.data() != expect.as_slice() || !within_budget(&f, &x, eps, 0.0, 1.0) {
            return Outcome::new(false, format!("model {m}: FGSM differs from PGD-1 or the box maximizer"));
        }
        for k in [1usize, 2, 3, 7, 10] {
            let alpha = eps / k as f64 * rng.random_range(1.0..3.0);
            let p = pgd(&model, &x, &y, &AttackSpec::pgd(eps, alpha, k, false), &mut rng).unwrap();
            if p.data() != expect.as_slice() || !within_budget(&p, &x, eps, 0.0, 1.0) {
                return Outcome::new(false, format!("model {m}: PGD-{k} misses the box maximizer"));
            }
            let r = pgd(&model, &x, &y, &AttackSpec::pgd(eps, alpha, k, true), &mut rng).unwrap();
            if !within_budget(&r, &x, eps, 0.0, 1.0) {
                return Outcome::new(false, format!("model {m}: random-start PGD leaves the budget"));
            }
            checks += 2;
        }
    }
    Outcome::new(true, format!("50 models, {checks} PGD outputs exact and feasible"))
}

// ---------------------------------------------------------------------------
// 3-5. Saddle solvers

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let t_max = 10_000;
    let mut worst_slack = f64::INFINITY;
    for seed in 0..20u64 {
        let problem = bilinear_family(&BilinearSpec {
            seed,
            ..BilinearSpec::default()
        })
        .unwrap();
        let reference = match reference_solve(&problem, REFERENCE_TOL, 1_000_000) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        for alg in [Algorithm::Sgdbca, Algorithm::Asgdbca] {
            let cfg = SaddleRunConfig {
                t: t_max,
                seed: 100 + seed,
                ..SaddleRunConfig::default()
            };
            let traj = saddle_run(&problem, &cfg, alg).unwrap();
            let r = regret(&traj, &problem, Pairing::Next);
            for t in [100, 1_000, 10_000] {
                let (theta_bar, _) = traj.averages(t);
                let gap = duality_gap(&problem, &theta_bar, &reference);
                let slack = r[t - 1] / t as f64 + 1e-8 - gap;
                worst_slack = worst_slack.min(slack);
                if slack < 0.0 {
                    return Outcome::new(
                        false,
                        format!("seed {seed} {alg:?} T={t}: gap {gap:.3e} > R/T {:.3e}", r[t - 1] / t as f64),
                    );
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(secs < 60.0, format!("min slack {worst_slack:.3e}, {secs:.1}s"))
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let ts = [1_000usize, 3_162, 10_000, 31_623, 100_000];
    let seeds = 5u64;
    let mut slopes = Vec::new();
    for alg in [Algorithm::Sgdbca, Algorithm::Asgdbca] {
        let mut logs = Vec::new();
        for &t in &ts {
            let mut total = 0.0;
            for seed in 0..seeds {
                let problem = bilinear_family(&BilinearSpec {
                    seed,
                    ..BilinearSpec::default()
                })
                .unwrap();
                let cfg = SaddleRunConfig {
                    t,
                    seed: 1_000 + seed,
                    ..SaddleRunConfig::default()
                };
                let traj = saddle_run(&problem, &cfg, alg).unwrap();
                total += regret(&traj, &problem, Pairing::Next)[t - 1];
            }
            logs.push((total / seeds as f64).ln());
        }
        let xs: Vec<f64> = ts.iter().map(|&t| (t as f64).ln()).collect();
        slopes.push((alg, slope(&xs, &logs)));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = slopes.iter().all(|s| s.1 <= 0.6) && secs < 300.0;
    Outcome::new(
        pass,
        format!(
            "log-log slopes SGDBCA {:.3}, ASGDBCA {:.3} ({seeds} seeds), {secs:.1}s",
            slopes[0].1, slopes[1].1
        ),
    )
}

fn mean_final_regret(tail: Tail, seeds: &[u64], t: usize) -> (f64, f64) {
    let (mut sgd, mut asgd) = (0.0, 0.0);
    for &seed in seeds {
        let problem = bilinear_family(&BilinearSpec {
            seed,
            tail,
            ..BilinearSpec::default()
        })
        .unwrap();
        let cfg = SaddleRunConfig {
            t,
            seed: 1_000 + seed,
            ..SaddleRunConfig::default()
        };
        for (alg, acc) in [(Algorithm::Sgdbca, &mut sgd), (Algorithm::Asgdbca, &mut asgd)] {
            let traj = saddle_run(&problem, &cfg, alg).unwrap();
            *acc += regret(&traj, &problem, Pairing::Next)[t - 1] / seeds.len() as f64;
        }
    }
    (sgd, asgd)
}

fn criterion_5() -> Outcome {
    let beta = 0.5;
    let pareto = Tail::Pareto { shape: 1.5 };
    // The first 20 problem seeds whose gradient-norm ratio reaches 1.5.
    let mut seeds = Vec::new();
    let mut seed = 0u64;
    while seeds.len() < 20 {
        let problem = bilinear_family(&BilinearSpec {
            seed,
            tail: pareto,
            ..BilinearSpec::default()
        })
        .unwrap();
        if gradient_norm_ratio(&problem.constants().g_x_i, beta).unwrap() >= 1.5 {
            seeds.push(seed);
        }
        seed += 1;
    }
    let (sgd, asgd) = mean_final_regret(pareto, &seeds, 10_000);
    let tail_gain = 1.0 - asgd / sgd;
    let equal: Vec<u64> = (0..20).collect();
    let (esgd, easgd) = mean_final_regret(Tail::Equal, &equal, 10_000);
    let equal_gap = (easgd - esgd).abs() / esgd.max(easgd);
    let pass = tail_gain >= 0.10 && equal_gap <= 0.15;
    Outcome::new(
        pass,
        format!(
            "long tail: ASGDBCA {:.1}% below SGDBCA (R {asgd:.1} vs {sgd:.1}); equal norms: {:.1}% apart",
            100.0 * tail_gain,
            100.0 * equal_gap
        ),
    )
}

// ---------------------------------------------------------------------------
// 6 and 7. Desk MNIST runs

const DESK_EPS: f64 = 0.3;
const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DESK_BUDGET_S: f64 = 30.0 * 60.0;

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .map(|p| if p.join("mnist").is_dir() { p.join("mnist") } else { p })
        .or_else(|| Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")))
        .filter(|p| p.join("train-images-idx3-ubyte").exists())
}

fn mnist() -> std::result::Result<Dataset, String> {
    let dir = data_dir().ok_or("MNIST not found; run scripts/mnist_subset.py data/mnist or set ATAS_DATA_DIR")?;
    let data = load_mnist_dir(&dir, "train").map_err(|e| e.to_string())?;
    data.take(10_000.min(data.len())).map_err(|e| e.to_string())
}

fn desk_cfg(method: Method, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        method,
        epochs: 15,
        lr: 0.05,
        epsilon: DESK_EPS,
        eval_size: 500,
        seed,
        ..TrainConfig::default()
    };
    cfg.adaptive = cfg.adaptive.with_max_step(16.0 / 255.0 * (DESK_EPS / (8.0 / 255.0)));
    if method == Method::FgsmRs {
        cfg.alpha = Some(1.75 * DESK_EPS);
    }
    cfg
}

thread_local! {
    static DESK_RUNS: std::cell::RefCell<HashMap<(&'static str, u64), (TrainHistory, f64)>> =
        std::cell::RefCell::new(HashMap::new());
}

/// Trains the desk CNN once per (method, seed); returns the history and its
/// wall time.
fn desk_run(data: &Dataset, method: Method, seed: u64) -> std::result::Result<(TrainHistory, f64), String> {
    if let Some(hit) = DESK_RUNS.with(|c| c.borrow().get(&(method.name(), seed)).cloned()) {
        return Ok(hit);
    }
    let start = Instant::now();
    let cfg = desk_cfg(method, seed);
    let mut model = Model::build(default_model(data.example_shape(), data.classes(), seed)).map_err(|e| e.to_string())?;
    let mut state = method.uses_state().then(|| init_state(&cfg, data)).transpose().map_err(|e| e.to_string())?;
    let h = train(&mut model, data, &cfg, state.as_mut()).map_err(|e| e.to_string())?;
    let out = (h, start.elapsed().as_secs_f64());
    DESK_RUNS.with(|c| c.borrow_mut().insert((method.name(), seed), out.clone()));
    Ok(out)
}

fn criterion_6() -> Outcome {
    let data = match mnist() {
        Ok(d) => d,
        Err(e) => return Outcome::new(false, e),
    };
    let det = CoDetector::default();
    let mut wall = 0.0;
    let (mut co_fgsm, mut co_atas, mut atas_wins) = (0, 0, 0);
    let (mut pgd_fgsm, mut pgd_atas) = (Vec::new(), Vec::new());
    for seed in DESK_SEEDS {
        let runs = desk_run(&data, Method::FgsmRs, seed).and_then(|f| Ok((f, desk_run(&data, Method::Atas, seed)?)));
        let ((hf, wf), (ha, wa)) = match runs {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        wall += wf + wa;
        co_fgsm += usize::from(det.detect(&hf.records).ok().flatten().is_some());
        co_atas += usize::from(det.detect(&ha.records).ok().flatten().is_some());
        let (pf, pa) = (hf.last().unwrap().pgd10_acc, ha.last().unwrap().pgd10_acc);
        atas_wins += usize::from(pa > pf);
        pgd_fgsm.push(pf);
        pgd_atas.push(pa);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let pass = co_fgsm >= 3 && co_atas == 0 && mean(&pgd_atas) > mean(&pgd_fgsm) && wall < DESK_BUDGET_S;
    Outcome::new(
        pass,
        format!(
            "CO detected in {co_fgsm}/5 FGSM-RS (α=1.75ε) and {co_atas}/5 ATAS runs; final PGD-10 train acc ATAS {:.3} vs FGSM-RS {:.3} (ATAS higher in {atas_wins}/5 seeds); {:.0}s of {:.0}s budget",
            mean(&pgd_atas),
            mean(&pgd_fgsm),
            wall,
            DESK_BUDGET_S
        ),
    )
}

/// Mean PGD-10 training loss over the last three epochs.
fn smoothed_final_loss(h: &TrainHistory) -> f64 {
    let tail = &h.records[h.records.len().saturating_sub(3)..];
    tail.iter().map(|r| r.train_robust_loss).sum::<f64>() / tail.len() as f64
}

fn criterion_7() -> Outcome {
    let data = match mnist() {
        Ok(d) => d,
        Err(e) => return Outcome::new(false, e),
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in DESK_SEEDS {
        let runs = desk_run(&data, Method::Atas, seed).and_then(|a| Ok((a, desk_run(&data, Method::Atta, seed)?)));
        let ((ha, _), (ht, _)) = match runs {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        if ha.iterations != ht.iterations {
            return Outcome::new(false, format!("unequal budgets: {} vs {}", ha.iterations, ht.iterations));
        }
        let (la, lt) = (smoothed_final_loss(&ha), smoothed_final_loss(&ht));
        wins += usize::from(la <= lt);
        rows.push(format!("{la:.3}/{lt:.3}"));
    }
    Outcome::new(
        wins >= 3,
        format!("ATAS ≤ ATTA smoothed PGD-10 loss in {wins}/5 seeds (ATAS/ATTA: {})", rows.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 8. Degenerate equivalences

fn tiny_data() -> Dataset {
    synth_generate(&SynthSpec {
        classes: 4,
        per_class: 24,
        channels: 1,
        side: 10,
        noise: 0.4,
        seed: 8,
    })
    .unwrap()
}

fn tiny_model(seed: u64) -> Model {
    Model::build(ModelConfig::cnn(&[1, 10, 10], &[4], 4, seed).with_hidden(&[16])).unwrap()
}

fn tiny_cfg(method: Method, eps: f64) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 3,
        batch_size: 16,
        epsilon: eps,
        eval_size: 0,
        pgd_steps: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run_tiny(cfg: &TrainConfig, data: &Dataset) -> (Model, TrainHistory) {
    let mut model = tiny_model(3);
    let mut state = cfg.method.uses_state().then(|| init_state(cfg, data).unwrap());
    let h = train(&mut model, data, cfg, state.as_mut()).unwrap();
    (model, h)
}

fn criterion_8() -> Outcome {
    let data = tiny_data();
    let eps = 0.2;
    let mut atas = tiny_cfg(Method::Atas, eps);
    atas.adaptive = AdaptiveConfig {
        beta: 1.0,
        ..AdaptiveConfig::default()
    }
    .with_max_step(0.15);
    let mut atta = tiny_cfg(Method::Atta, eps);
    atta.adaptive = atas.adaptive;
    atta.alpha = Some(atas.adaptive.max_step());
    let (ma, ha) = run_tiny(&atas, &data);
    let (mb, hb) = run_tiny(&atta, &data);
    let same_ckpt = ma.params().to_bytes() == mb.params().to_bytes();
    let acc = |h: &TrainHistory| -> Vec<(u64, u64, u64)> {
        h.records
            .iter()
            .map(|r| (r.clean_acc.to_bits(), r.pgd10_acc.to_bits(), r.train_robust_loss.to_bits()))
            .collect()
    };
    let same_metrics = acc(&ha) == acc(&hb);

    let mut clean = Vec::new();
    for method in [Method::PgdAt, Method::FgsmRs, Method::Atta, Method::Atas] {
        let (m, h) = run_tiny(&tiny_cfg(method, 0.0), &data);
        clean.push((m.params().to_bytes(), acc(&h)));
    }
    let clean_same = clean.windows(2).all(|w| w[0] == w[1]);
    Outcome::new(
        same_ckpt && same_metrics && clean_same,
        format!(
            "ATAS(β=1) vs ATTA(α=γ/c): checkpoint {}, metrics {}; ε=0 across four trainers: {}",
            if same_ckpt { "identical" } else { "differs" },
            if same_metrics { "identical" } else { "differ" },
            if clean_same { "identical" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Perturbation storage

fn field(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                data.push(f(k, i, j));
            }
        }
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_affine: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;
    for (c, h, w) in [(1usize, 28usize, 28usize), (3, 32, 32), (1, 10, 7)] {
        for s in [4usize, 8, 16] {
            let round = |t: &Tensor| resize_bilinear(&resize_bilinear(t, (s, s)).unwrap(), (h, w)).unwrap();
            let k = rng.random_range(-0.3..0.3);
            let (a, b, d) = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.1..0.1));
            let constant = field(c, h, w, |_, _, _| k);
            let affine = field(c, h, w, |ch, i, j| d + ch as f64 * 0.01 + a * i as f64 + b * j as f64);
            worst_affine = worst_affine.max(max_diff(&round(&constant), &constant));
            worst_affine = worst_affine.max(max_diff(&round(&affine), &affine));
            let noise = field(c, h, w, |_, _, _| rng.random_range(-0.3..0.3));
            let once = round(&noise);
            worst_idem = worst_idem.max(max_diff(&round(&once), &once));
        }
    }
    let eps = 0.1;
    let shape = [1usize, 28, 28];
    let mut budget_ok = true;
    for side in [StorageSide::Full, StorageSide::Side(8)] {
        let cfg = AdaptiveConfig {
            storage_side: side,
            reset_period: ResetPeriod::Never,
            ..AdaptiveConfig::default()
        };
        let mut table = StateTable::new(cfg, 20, &shape).unwrap();
        table.init_uniform(eps, &mut rng).unwrap();
        for id in 0..20 {
            let delta = field(1, 28, 28, |_, i, j| if (i + j) % 2 == 0 { eps } else { -eps });
            table.store(id, &delta).unwrap();
            let loaded = table.load(id, eps).unwrap();
            budget_ok &= loaded.norm_linf() <= eps + 1e-12;
        }
    }
    let pass = worst_affine <= 1e-10 && worst_idem <= 1e-10 && budget_ok;
    Outcome::new(
        pass,
        format!(
            "affine round-trip {worst_affine:.1e}, second round-trip {worst_idem:.1e}, budget {}",
            if budget_ok { "held" } else { "violated" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Reproducibility

fn criterion_10() -> Outcome {
    let tmp = std::env::temp_dir().join(format!("atas-accept-{}", std::process::id()));
    let configs = [
        (
            "train",
            "kind = \"train\"\nseed = 11\n[dataset.synthetic]\nclasses = 4\nper_class = 30\nside = 12\nnoise = 0.5\n\
             [train]\nmethod = \"atas\"\nepochs = 3\nbatch_size = 32\nepsilon = 0.2\neval_size = 0\n",
        ),
        (
            "fgsm",
            "kind = \"train\"\nseed = 12\n[dataset.synthetic]\nclasses = 4\nper_class = 30\nside = 12\nnoise = 0.5\n\
             [train]\nmethod = \"fgsm_rs\"\nepochs = 3\nbatch_size = 32\nepsilon = 0.2\neval_size = 0\naugment = true\nflip = true\n",
        ),
        ("saddle", "kind = \"saddle\"\nseed = 13\n[saddle.run]\nt = 2000\n"),
    ];
    let mut identical = true;
    let mut names = Vec::new();
    for (name, text) in configs {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let mut cfg = parse_config(text).unwrap();
            cfg.out = tmp.join(format!("{name}-{rep}"));
            let dir = match run(&cfg, Some(text), None) {
                Ok(d) => d,
                Err(e) => return Outcome::new(false, format!("{name}: {e}")),
            };
            outputs.push(std::fs::read(dir.join("metrics.csv")).unwrap());
        }
        identical &= outputs[0] == outputs[1];
        names.push(name);
    }
    let _ = std::fs::remove_dir_all(&tmp);
    Outcome::new(identical, format!("metrics.csv byte-identical across reruns for {}", names.join(", ")))
}

// ---------------------------------------------------------------------------

fn main() {
    type Criterion = fn() -> Outcome;
    let criteria: Vec<(usize, &str, Criterion)> = vec![
        (1, "gradient correctness", criterion_1),
        (2, "attack oracle equivalence", criterion_2),
        (3, "duality gap bounded by average regret", criterion_3),
        (4, "sublinear regret", criterion_4),
        (5, "long-tail advantage", criterion_5),
        (6, "catastrophic-overfitting analogue", criterion_6),
        (7, "convergence ordering", criterion_7),
        (8, "degenerate equivalences", criterion_8),
        (9, "perturbation storage", criterion_9),
        (10, "reproducibility", criterion_10),
    ];
    let filter: Vec<usize> = std::env::var("ATAS_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut results: HashMap<usize, bool> = HashMap::new();
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        println!(
            "{} criterion {id} ({name}): {} [{:.1}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        results.insert(id, outcome.pass);
    }
    let failed = results.values().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
