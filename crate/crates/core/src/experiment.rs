//! Experiment configuration, orchestration and run comparison.
//!
//! A run is described by a TOML file with optional `[dataset]`, `[model]`,
//! `[train]`, `[diagnostics]`, `[eval]` and `[saddle]` sections. Unknown
//! keys are rejected. Every run writes into its own directory: the config
//! as given, the resolved config, a code-version string, `metrics.csv` and
//! the artifacts of its kind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::{load_mnist_dir, parse_cifar_bin, synth_generate, Dataset, SynthSpec, DATA_DIR_ENV};
use crate::diagnostics::{
    class_balance, decile_subset, grad_norm_profile, loss_surface, train_on_subset, CoDetector, SubsetSpec,
    DEFAULT_GRID_N,
};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::saddle::{
    bilinear_family, checkpoints, gradient_norm_ratio, quadratic_family, reference_solve, regret_csv, regret_rows,
    run as saddle_run, Algorithm, BilinearSpec, Pairing, QuadraticSpec, SaddleProblem, SaddleRunConfig, SaddleSummary,
};
use crate::trainers::{
    evaluate_attack, init_state, stream_rng, train, TrainConfig, TrainHistory, STREAM_EVAL,
};

/// Identifies the code that produced a run.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    #[default]
    Train,
    Eval,
    Saddle,
    Diagnose,
    ProbeSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    /// `{split}-images-idx3-ubyte` and `{split}-labels-idx1-ubyte`.
    Mnist,
    /// `data_batch_{1..5}.bin` for the train split, `test_batch.bin` otherwise.
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: Source,
    /// Directory holding the files; falls back to the run's data directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub split: String,
    /// Keep only the first `limit` examples; 0 keeps all.
    pub limit: usize,
    pub synthetic: SynthSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            dir: None,
            split: "train".into(),
            limit: 0,
            synthetic: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Write per-example gradient norms and ranks (`gn.csv`).
    pub grad_norm_profile: bool,
    /// Run the CO detector on the metrics (`co.json`).
    pub co_detect: bool,
    pub co: CoDetector,
    /// Decile range `[lower, upper]` of the gradient-norm ranking to retrain on.
    pub subset_lower: usize,
    pub subset_upper: usize,
    /// Iterations of subset retraining; 0 skips it.
    pub subset_iterations: usize,
    pub surface_grid: usize,
    /// Leading examples probed by the loss surface.
    pub surface_examples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            grad_norm_profile: true,
            co_detect: true,
            co: CoDetector::default(),
            subset_lower: 1,
            subset_upper: 10,
            subset_iterations: 0,
            surface_grid: DEFAULT_GRID_N,
            surface_examples: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Model checkpoint to evaluate or probe.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub pgd50: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Bilinear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaddleConfig {
    pub family: Family,
    pub bilinear: BilinearSpec,
    pub quadratic: QuadraticSpec,
    pub algorithm: Algorithm,
    pub run: SaddleRunConfig,
    pub pairing: Pairing,
    pub reference_tol: f64,
    pub reference_max_iter: usize,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        Self {
            family: Family::Bilinear,
            bilinear: BilinearSpec::default(),
            quadratic: QuadraticSpec::default(),
            algorithm: Algorithm::Asgdbca,
            run: SaddleRunConfig::default(),
            pairing: Pairing::Next,
            reference_tol: crate::saddle::REFERENCE_TOL,
            reference_max_iter: 1_000_000,
        }
    }
}

impl SaddleConfig {
    pub fn problem(&self) -> Result<SaddleProblem> {
        match self.family {
            Family::Bilinear => bilinear_family(&self.bilinear),
            Family::Quadratic => quadratic_family(&self.quadratic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: Kind,
    /// Overrides the model, training and saddle-run seeds.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    /// Defaults to a two-stage CNN with one hidden layer sized for the data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub diagnostics: DiagnosticsConfig,
    pub eval: EvalConfig,
    pub saddle: SaddleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: Kind::Train,
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: None,
            train: TrainConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            eval: EvalConfig::default(),
            saddle: SaddleConfig::default(),
        }
    }
}

/// The desk CNN: two conv stages of 8 and 16 channels and a 100-unit hidden
/// layer.
pub fn default_model(example_shape: &[usize], classes: usize, seed: u64) -> ModelConfig {
    ModelConfig::cnn(example_shape, &[8, 16], classes, seed).with_hidden(&[100])
}

impl ExperimentConfig {
    /// Copies the top-level seed into every seeded component.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.train.seed = cfg.seed;
        cfg.saddle.run.seed = cfg.seed;
        if let Some(m) = cfg.model.as_mut() {
            m.seed = cfg.seed;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &str, e: Error| match e {
            Error::Config(msg) | Error::InvalidArgument(msg) => Error::Config(format!("{section}.{msg}")),
            other => other,
        };
        self.train.validate().map_err(|e| ctx("train", e))?;
        self.train.adaptive.validate().map_err(|e| ctx("train.adaptive", e))?;
        let d = &self.diagnostics;
        SubsetSpec::new(d.subset_lower, d.subset_upper).map_err(|e| ctx("diagnostics", e))?;
        if d.surface_grid < 2 {
            return Err(Error::Config("diagnostics.surface_grid: must be at least 2".into()));
        }
        if d.surface_examples == 0 {
            return Err(Error::Config("diagnostics.surface_examples: must be at least 1".into()));
        }
        let s = &self.saddle;
        if s.run.t == 0 {
            return Err(Error::Config("saddle.run.t: must be at least 1".into()));
        }
        if s.algorithm == Algorithm::Asgdbca && !(0.0..1.0).contains(&s.run.beta) {
            return Err(Error::Config(format!("saddle.run.beta: must lie in [0, 1), got {}", s.run.beta)));
        }
        if !(s.reference_tol > 0.0) {
            return Err(Error::Config("saddle.reference_tol: must be positive".into()));
        }
        if matches!(self.kind, Kind::Eval) && self.eval.checkpoint.is_none() {
            return Err(Error::Config("eval.checkpoint: required for kind = \"eval\"".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }
}

/// Parses and validates a config, filling defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads the configured dataset. `data_dir` is used when the config does
/// not name a directory, then `$ATAS_DATA_DIR`.
pub fn load_dataset(cfg: &DatasetConfig, data_dir: Option<&Path>) -> Result<Dataset> {
    let dir = || -> Result<PathBuf> {
        cfg.dir
            .clone()
            .or_else(|| data_dir.map(Path::to_path_buf))
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("dataset.dir: not set and no data directory or ${DATA_DIR_ENV} given")))
    };
    let data = match cfg.source {
        Source::Synthetic => synth_generate(&cfg.synthetic)?,
        Source::Mnist => load_mnist_dir(&dir()?, &cfg.split)?,
        Source::Cifar => {
            let dir = dir()?;
            let names: Vec<String> = if cfg.split == "train" {
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
            } else {
                vec![format!("{}_batch.bin", cfg.split)]
            };
            let mut bytes = Vec::new();
            for name in names {
                let path = dir.join(name);
                if path.exists() || bytes.is_empty() {
                    bytes.extend(fs::read(&path).map_err(|e| Error::io(&path, e))?);
                }
            }
            let mut data = parse_cifar_bin(&bytes)?;
            if cfg.split != "train" {
                data = Dataset::new(data.images().clone(), data.labels().to_vec(), 10, &cfg.split)?;
            }
            data
        }
    };
    if cfg.limit > 0 {
        data.take(cfg.limit)
    } else {
        Ok(data)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(format!("json: {e}")))
}

/// Runs an experiment, writing into `cfg.out`. `source_text` is copied
/// verbatim as `config.toml` when given. On failure a `failure.json` record
/// is written before the error is returned.
pub fn run(cfg: &ExperimentConfig, source_text: Option<&str>, data_dir: Option<&Path>) -> Result<PathBuf> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let text = match source_text {
        Some(t) => t.to_string(),
        None => cfg.to_toml()?,
    };
    write(&out.join("config.toml"), text)?;
    write(&out.join("resolved.toml"), cfg.to_toml()?)?;
    write(&out.join("version.txt"), format!("{CODE_VERSION}\n"))?;
    let result = match cfg.kind {
        Kind::Train => run_train(&cfg, &out, data_dir).map(|_| ()),
        Kind::Eval => run_eval(&cfg, &out, data_dir),
        Kind::Saddle => run_saddle(&cfg, &out),
        Kind::Diagnose => run_diagnose(&cfg, &out, data_dir),
        Kind::ProbeSurface => run_probe(&cfg, &out, data_dir),
    };
    if let Err(e) = &result {
        let record = serde_json::json!({ "kind": cfg.kind, "error": e.to_string() });
        let _ = write(&out.join("failure.json"), record.to_string());
    }
    result.map(|_| out)
}

fn build_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let mc = cfg
        .model
        .clone()
        .unwrap_or_else(|| default_model(data.example_shape(), data.classes(), cfg.seed));
    Model::build(mc)
}

fn run_train(cfg: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<(Model, Dataset, TrainHistory)> {
    let data = load_dataset(&cfg.dataset, data_dir)?;
    let mut model = build_model(cfg, &data)?;
    let mut state = if cfg.train.method.uses_state() {
        Some(init_state(&cfg.train, &data)?)
    } else {
        None
    };
    let history = train(&mut model, &data, &cfg.train, state.as_mut())?;
    write(&out.join("metrics.csv"), history.to_csv(false))?;
    write(&out.join("timing.csv"), history.timing_csv())?;
    model.save_checkpoint(&out.join("model.ckpt"))?;
    if let Some(state) = &state {
        write(&out.join("state.bin"), state.to_bytes())?;
    }
    if cfg.diagnostics.co_detect && history.records.len() >= 2 {
        let event = cfg.diagnostics.co.detect(&history.records)?;
        write(&out.join("co.json"), to_json(&serde_json::json!({ "event": event }))?)?;
    }
    if cfg.diagnostics.grad_norm_profile {
        let profile = grad_norm_profile(&history.grad_norms)?;
        write(&out.join("gn.csv"), profile.to_csv(data.labels()))?;
    }
    Ok((model, data, history))
}

fn load_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let mut model = build_model(cfg, data)?;
    let path = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval.checkpoint: required".into()))?;
    model.load_checkpoint(path)?;
    Ok(model)
}

fn run_eval(cfg: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<()> {
    let data = load_dataset(&cfg.dataset, data_dir)?;
    let model = load_model(cfg, &data)?;
    let eps = cfg.train.epsilon;
    let mut attacks = vec![
        ("clean", None),
        ("fgsm", Some(AttackSpec::fgsm(eps))),
        ("pgd10", Some(AttackSpec::pgd_eval(eps, 10))),
    ];
    if cfg.eval.pgd50 || cfg.train.eval_pgd50 {
        attacks.push(("pgd50", Some(AttackSpec::pgd_eval(eps, 50))));
    }
    let mut csv = String::from("attack,accuracy,mean_loss\n");
    let mut rng = stream_rng(cfg.seed, STREAM_EVAL);
    for (name, attack) in attacks {
        let r = evaluate_attack(&model, data.images(), data.labels(), attack.as_ref(), cfg.train.eval_batch, &mut rng)?;
        csv.push_str(&format!("{name},{},{}\n", r.accuracy, r.mean_loss));
    }
    write(&out.join("eval.csv"), csv)
}

fn run_saddle(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let s = &cfg.saddle;
    let problem = s.problem()?;
    let traj = saddle_run(&problem, &s.run, s.algorithm)?;
    let reference = reference_solve(&problem, s.reference_tol, s.reference_max_iter)?;
    let rows = regret_rows(&traj, &problem, &reference, s.pairing, &checkpoints(s.run.t));
    write(&out.join("regret.csv"), regret_csv(&rows))?;
    let consts = problem.constants();
    let last = rows.last().expect("checkpoints end at t");
    let summary = SaddleSummary {
        kind: problem.kind().into(),
        algorithm: s.algorithm,
        t: s.run.t,
        beta: s.run.beta,
        eta_theta: traj.eta_theta,
        eta_x: traj.eta_x,
        ratio: gradient_norm_ratio(&consts.g_x_i, s.run.beta).unwrap_or(f64::NAN),
        constants: consts,
        final_regret: last.regret_prefix,
        final_gap: last.gap,
        reference,
    };
    write(&out.join("summary.json"), to_json(&summary)?)?;
    write(&out.join("metrics.csv"), regret_csv(&rows))
}

fn run_diagnose(cfg: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<()> {
    let (_, data, history) = run_train(cfg, out, data_dir)?;
    let profile = grad_norm_profile(&history.grad_norms)?;
    if !cfg.diagnostics.grad_norm_profile {
        write(&out.join("gn.csv"), profile.to_csv(data.labels()))?;
    }
    let d = &cfg.diagnostics;
    if d.subset_iterations > 0 {
        let spec = SubsetSpec::new(d.subset_lower, d.subset_upper)?;
        let ids = decile_subset(&profile, spec)?;
        let balance = class_balance(&ids, data.labels(), data.classes())?;
        let mut csv = String::from("class,fraction\n");
        for (c, f) in balance.iter().enumerate() {
            csv.push_str(&format!("{c},{f}\n"));
        }
        write(&out.join("class_balance.csv"), csv)?;
        let mut model = build_model(cfg, &data)?;
        let sub = train_on_subset(&mut model, &data, &cfg.train, &ids, d.subset_iterations)?;
        write(&out.join("subset_metrics.csv"), sub.to_csv(false))?;
    }
    Ok(())
}

fn run_probe(cfg: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<()> {
    let (model, data) = if cfg.eval.checkpoint.is_some() {
        let data = load_dataset(&cfg.dataset, data_dir)?;
        (load_model(cfg, &data)?, data)
    } else {
        let (m, d, _) = run_train(cfg, out, data_dir)?;
        (m, d)
    };
    let n = cfg.diagnostics.surface_examples.min(data.len());
    let ids: Vec<usize> = (0..n).collect();
    let (x, y) = data.batch(&ids);
    let mut rng = stream_rng(cfg.seed, STREAM_EVAL - 1);
    let surface = loss_surface(&model, &x, &y, cfg.train.epsilon, cfg.diagnostics.surface_grid, &mut rng)?;
    write(&out.join("surface.csv"), surface.to_csv())
}

/// Which direction of a metric counts as better.
fn lower_is_better(metric: &str) -> bool {
    metric.contains("loss") || metric == "gap" || metric.contains("regret")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub epoch: usize,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Run A is better by more than the tolerance.
    Win,
    Lose,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub metric: String,
    pub rows: Vec<CompareRow>,
    /// `a − b` at the last compared row.
    pub final_delta: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    /// Set when the runs had different lengths and only the common prefix
    /// was compared.
    pub truncated: bool,
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("epoch,a,b,delta ({})\n", self.metric);
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.a, r.b, r.delta));
        }
        s.push_str(&format!(
            "final delta {} (tolerance {}): {:?}{}\n",
            self.final_delta,
            self.tolerance,
            self.verdict,
            if self.truncated { " [truncated to common epochs]" } else { "" }
        ));
        s
    }
}

/// Reads one numeric column of a metrics CSV as `(row key, value)` pairs.
/// Empty cells become NaN.
pub fn read_metric(path: &Path, metric: &str) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?
        .split(',')
        .collect();
    let col = header
        .iter()
        .position(|h| *h == metric)
        .ok_or_else(|| Error::Format(format!("{}: no column named {metric:?}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let parse = |c: usize| -> Result<f64> {
            match cells.get(c).copied() {
                Some("") => Ok(f64::NAN),
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Format(format!("{}: row {}: bad number {v:?}", path.display(), i + 1))),
                None => Err(Error::Format(format!("{}: row {} is short", path.display(), i + 1))),
            }
        };
        let key = parse(0)? as usize;
        out.push((key, parse(col)?));
    }
    Ok(out)
}

/// Compares one metric of two runs' `metrics.csv`. Different lengths are
/// an error unless `allow_truncate`, in which case the common prefix is
/// compared.
pub fn compare(dir_a: &Path, dir_b: &Path, metric: &str, tolerance: f64, allow_truncate: bool) -> Result<CompareReport> {
    let a = read_metric(&dir_a.join("metrics.csv"), metric)?;
    let b = read_metric(&dir_b.join("metrics.csv"), metric)?;
    if a.len() != b.len() && !allow_truncate {
        return Err(Error::InvalidArgument(format!(
            "runs have {} and {} rows; rerun with truncation to compare the first {}",
            a.len(),
            b.len(),
            a.len().min(b.len())
        )));
    }
    let rows: Vec<CompareRow> = a
        .iter()
        .zip(&b)
        .map(|(&(epoch, va), &(_, vb))| CompareRow {
            epoch,
            a: va,
            b: vb,
            delta: va - vb,
        })
        .collect();
    let final_delta = rows.last().map_or(0.0, |r| r.delta);
    let signed = if lower_is_better(metric) { -final_delta } else { final_delta };
    let verdict = if signed > tolerance {
        Verdict::Win
    } else if signed < -tolerance {
        Verdict::Lose
    } else {
        Verdict::Tie
    };
    Ok(CompareReport {
        metric: metric.into(),
        rows,
        final_delta,
        tolerance,
        verdict,
        truncated: a.len() != b.len(),
    })
}
