//! Experiment specs and the drivers behind the `atx` subcommands: repeated
//! trainings, beta grid search, training-size sweeps, run comparison and
//! synthetic data generation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, render_synthetic, split_by_patient, Dataset, SplitAssignment, SplitName, SplitSizes, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{CiMethod, MetricReport, RepetitionSummary};
use crate::model::{build_densenet_scaled, AdapterSpec, ArchConfig, FreezePolicy, Model};
use crate::train::{
    evaluate, read_epoch_log, select_best, train, RunRecord, SelectionMetric, TrainConfig, TrainData, TrainMode, EPOCH_LOG_FILE,
    SUMMARY_FILE,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Union of the optimal values reported for the two teachers plus the grid
/// endpoints.
pub const DEFAULT_BETA_GRID: [f64; 8] = [1.0, 20.0, 30.0, 50.0, 60.0, 100.0, 1000.0, 2000.0];

fn default_split() -> SplitSizes {
    SplitSizes::Fractions { train: 0.6, validation: 0.2, test: 0.2 }
}

fn default_betas() -> Vec<f64> {
    DEFAULT_BETA_GRID.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest file, relative to the spec file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Generate the data in memory instead of reading a manifest.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub synthetic_seed: u64,
    #[serde(default = "default_split")]
    pub split: SplitSizes,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    /// Training-set sizes, counted in patients.
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub ci_method: CiMethod,
    /// Caps size-sweep training at roughly this many optimiser steps, so
    /// large subsets run fewer epochs than `train.max_epochs`.
    #[serde(default)]
    pub step_budget: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { betas: default_betas(), sizes: Vec::new(), ci_method: CiMethod::default(), step_budget: None }
    }
}

/// Everything one experiment needs, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub dataset: DatasetSection,
    pub student: ArchConfig,
    /// Teacher checkpoint for attention transfer, relative to the spec file.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec and resolves its relative paths against the file's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = spec.dataset.manifest.as_mut() {
            resolve(m);
        }
        if let Some(t) = spec.teacher_checkpoint.as_mut() {
            resolve(t);
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.dataset.manifest, &self.dataset.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("dataset needs exactly one of `manifest` or `synthetic`".into()))
            }
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        self.student.validate()?;
        if let TrainMode::AttentionTransfer = self.train.mode {
            self.train.validate()?;
        } else {
            // beta may be present to serve sweeps that add an AT arm
            TrainConfig { beta: None, ..self.train.clone() }.validate()?;
        }
        Ok(())
    }
}

/// Loaded dataset with its patient split.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitAssignment,
}

pub fn prepare_data(spec: &ExperimentSpec, workers: usize) -> Result<Prepared> {
    let d = &spec.dataset;
    let dataset = match (&d.manifest, &d.synthetic) {
        (Some(path), _) => Dataset::load(load_manifest(path)?, workers)?,
        (None, Some(s)) => {
            let (m, images) = render_synthetic(s, d.synthetic_seed)?;
            Dataset::from_parts(m, images)?
        }
        (None, None) => return Err(Error::Config("dataset has no source".into())),
    };
    let split = split_by_patient(&dataset.manifest, d.split, d.split_seed)?;
    log::info!(
        "dataset: {} records; split {} / {} / {} patients",
        dataset.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(Prepared { dataset, split })
}

/// Loads a checkpoint as a frozen, evaluation-mode teacher.
pub fn load_teacher(path: &Path) -> Result<Model> {
    let (mut t, meta) = Model::from_checkpoint(path)?;
    t.freeze_layers(FreezePolicy::Frozen)?;
    t.set_training(false);
    log::info!("teacher {} (epoch {}, {} parameters)", path.display(), meta.epoch, t.param_count());
    Ok(t)
}

/// Builds a student whose weights are drawn from `seed`, with an adapter
/// when its attention tap differs from the teacher's.
pub fn build_student(arch: &ArchConfig, teacher: Option<&Model>, input_size: usize, seed: u64) -> Result<Model> {
    let mut s: Model = build_densenet_scaled(arch, seed)?;
    if let Some(t) = teacher {
        let (c, h, w) = t.attention_shape(input_size, input_size)?;
        if s.attention_shape(input_size, input_size)? != (c, h, w) && s.attach_adapter(AdapterSpec { channels: c, height: h, width: w }, (input_size, input_size), seed)? {
            log::info!("student adapter maps its tap onto the teacher's {c}x{h}x{w}");
        }
    }
    Ok(s)
}

/// Standard deviation of the final quarter of a curve (at least two points).
pub fn late_fluctuation(values: &[f64]) -> f64 {
    let k = values.len().div_ceil(4).max(2);
    if values.len() < 2 {
        return f64::NAN;
    }
    let tail = &values[values.len() - k.min(values.len())..];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    (tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Outcome of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub mode: TrainMode,
    pub beta: Option<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test: Option<MetricReport>,
    pub test_metric: f64,
    pub fluctuation: f64,
    #[serde(skip)]
    pub record: Option<RunRecord>,
}

/// Settings shared by every run of an experiment.
pub struct RunContext<'a> {
    pub spec: &'a ExperimentSpec,
    pub data: &'a Prepared,
    pub teacher: Option<&'a Model>,
    pub workers: usize,
}

impl RunContext<'_> {
    /// Trains one student and scores its best epoch on the test split.
    pub fn run(&self, mode: TrainMode, beta: Option<f64>, seed: u64, train_records: &[usize], out: Option<&Path>) -> Result<RunOutcome> {
        self.run_with(TrainConfig { mode, beta, seed, ..self.spec.train.clone() }, train_records, out)
    }

    pub fn run_with(&self, cfg: TrainConfig, train_records: &[usize], out: Option<&Path>) -> Result<RunOutcome> {
        let (mode, beta, seed) = (cfg.mode, cfg.beta, cfg.seed);
        let teacher = match mode {
            TrainMode::AttentionTransfer => Some(self.teacher.ok_or_else(|| Error::Config("attention transfer needs a teacher".into()))?),
            TrainMode::TransferLearning => None,
        };
        let mut student = build_student(&self.spec.student, teacher, cfg.augment.size, seed)?;
        let data = TrainData {
            dataset: &self.data.dataset,
            train: train_records,
            validation: self.data.split.records(SplitName::Validation),
        };
        let outcome = train(&cfg, &mut student, teacher, data, out, self.workers)?;
        let metrics = outcome.record.metrics();
        let (best_epoch, best_val) = select_best(&metrics)?;
        let test_idx = self.data.split.records(SplitName::Test);
        let test = if test_idx.is_empty() {
            None
        } else {
            Some(evaluate(&outcome.best_model, &self.data.dataset, test_idx, &cfg.augment, cfg.eval_batch_size, self.workers)?)
        };
        let test_metric = test.as_ref().map_or(f64::NAN, |r| cfg.selection_metric.of(r));
        let run = RunOutcome {
            seed,
            mode,
            beta,
            best_epoch,
            best_val,
            test,
            test_metric,
            fluctuation: late_fluctuation(&metrics),
            record: Some(outcome.record),
        };
        if let Some(dir) = out {
            write_json(&dir.join("outcome.json"), &run)?;
        }
        Ok(run)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_summary(s: &RepetitionSummary) -> String {
    if s.half_width.is_finite() {
        format!("{:.4} ± {:.4}", s.mean, s.half_width)
    } else {
        format!("{:.4}", s.mean)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: TrainMode,
    pub beta: Option<f64>,
    pub runs: Vec<RunOutcome>,
    pub validation: RepetitionSummary,
    pub test: Option<RepetitionSummary>,
}

/// `repetitions` seeded trainings on the full training split, written to
/// `out/rep<k>/`.
pub fn cmd_train(ctx: &RunContext<'_>, out: &Path) -> Result<TrainSummary> {
    let cfg = &ctx.spec.train;
    let train_idx = ctx.data.split.records(SplitName::Train);
    let mut runs = Vec::new();
    for rep in 0..cfg.repetitions {
        let seed = cfg.seed + rep as u64;
        log::info!("repetition {rep} (seed {seed})");
        runs.push(ctx.run(cfg.mode, cfg.beta, seed, train_idx, Some(&out.join(format!("rep{rep}"))))?);
    }
    let method = ctx.spec.sweep.ci_method;
    let validation = RepetitionSummary::from_values(runs.iter().map(|r| r.best_val).collect(), method)?;
    let tests: Vec<f64> = runs.iter().map(|r| r.test_metric).filter(|v| v.is_finite()).collect();
    let test = if tests.is_empty() { None } else { Some(RepetitionSummary::from_values(tests, method)?) };
    let summary = TrainSummary { mode: cfg.mode, beta: cfg.beta, runs, validation, test };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    let mut md = String::from("| run | seed | best epoch | validation | test | fluctuation |\n|---|---|---|---|---|---|\n");
    for (i, r) in summary.runs.iter().enumerate() {
        let _ = writeln!(md, "| rep{i} | {} | {} | {:.4} | {:.4} | {:.4} |", r.seed, r.best_epoch, r.best_val, r.test_metric, r.fluctuation);
    }
    let _ = writeln!(md, "\nvalidation: {} ({})", fmt_summary(&summary.validation), summary.validation.method);
    if let Some(t) = &summary.test {
        let _ = writeln!(md, "test: {}", fmt_summary(t));
    }
    write_text(&out.join("summary.md"), &md)?;
    write_text(&out.join("spec.toml"), &ctx.spec.to_toml()?)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaSearch {
    pub best_beta: f64,
    /// `(beta, best validation metric)` in ascending beta order.
    pub table: Vec<(f64, f64)>,
}

/// Picks the beta with the highest metric; ties go to the smaller beta.
pub fn pick_beta(table: &[(f64, f64)]) -> Result<f64> {
    let mut sorted = table.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (b, m) in sorted {
        if m.is_finite() && best.is_none_or(|(_, bm)| m > bm) {
            best = Some((b, m));
        }
    }
    best.map(|(b, _)| b).ok_or_else(|| Error::Metric("no beta produced a finite validation metric".into()))
}

fn check_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Config("beta grid is empty".into()));
    }
    if let Some(b) = grid.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        return Err(Error::Config(format!("beta grid value {b} is not positive")));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// One attention-transfer training per beta, scored on validation.
pub fn cmd_beta_search(ctx: &RunContext<'_>, out: &Path) -> Result<BetaSearch> {
    let grid = check_grid(&ctx.spec.sweep.betas)?;
    if ctx.teacher.is_none() {
        return Err(Error::Config("beta search needs a teacher".into()));
    }
    let train_idx = ctx.data.split.records(SplitName::Train);
    let mut table = Vec::new();
    for &beta in &grid {
        log::info!("beta {beta}");
        let r = ctx.run(TrainMode::AttentionTransfer, Some(beta), ctx.spec.train.seed, train_idx, Some(&out.join(format!("beta_{beta}"))))?;
        table.push((beta, r.best_val));
    }
    let best_beta = pick_beta(&table)?;
    let mut csv = String::from("beta,metric\n");
    for (b, m) in &table {
        let _ = writeln!(csv, "{b},{m}");
    }
    write_text(&out.join("beta_search.csv"), &csv)?;
    let result = BetaSearch { best_beta, table };
    write_json(&out.join("beta_search.json"), &result)?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub metric: f64,
    pub ci: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizeSweep {
    pub transfer_learning: Vec<SizeRow>,
    pub attention_transfer: Option<Vec<SizeRow>>,
}

/// Epochs for a training set of `records`, given an optional step budget.
pub fn epochs_for(cfg: &TrainConfig, step_budget: Option<usize>, records: usize) -> usize {
    let Some(budget) = step_budget else { return cfg.max_epochs };
    // a trailing batch of one sample is skipped by the trainer
    let steps = records / cfg.batch_size + usize::from(records % cfg.batch_size >= 2);
    budget.div_ceil(steps.max(1)).clamp(1, cfg.max_epochs)
}

pub fn size_sweep_csv(rows: &[SizeRow]) -> String {
    let mut s = String::from("size,metric,ci\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.size, r.metric, r.ci);
    }
    s
}

/// Trains on nested patient subsets of the training split and scores each
/// on the test split. Runs the attention-transfer arm when a teacher and a
/// beta are available.
pub fn cmd_size_sweep(ctx: &RunContext<'_>, out: &Path) -> Result<SizeSweep> {
    let sizes = &ctx.spec.sweep.sizes;
    if sizes.is_empty() {
        return Err(Error::Config("size sweep needs at least one size".into()));
    }
    let available = ctx.data.split.train.len();
    if let Some(&big) = sizes.iter().find(|&&n| n == 0 || n > available) {
        return Err(Error::Config(format!("training size {big} patients exceeds the {available} available")));
    }
    if ctx.data.split.test_records.is_empty() {
        return Err(Error::Config("size sweep needs a test split".into()));
    }
    let mut arms = vec![(TrainMode::TransferLearning, None, "tl")];
    if ctx.teacher.is_some() {
        let beta = ctx.spec.train.beta.ok_or_else(|| Error::Config("attention-transfer arm needs train.beta".into()))?;
        arms.push((TrainMode::AttentionTransfer, Some(beta), "at"));
    }
    let reps = ctx.spec.train.repetitions;
    let mut result = SizeSweep { transfer_learning: Vec::new(), attention_transfer: None };
    for (mode, beta, tag) in arms {
        let mut rows = Vec::new();
        for &n in sizes {
            let subset = ctx.data.split.train_subset(&ctx.data.dataset.manifest, n)?;
            let mut values = Vec::new();
            for rep in 0..reps {
                let seed = ctx.spec.train.seed + rep as u64;
                log::info!("{tag} size {n} repetition {rep}");
                let dir = out.join(tag).join(format!("size{n}")).join(format!("rep{rep}"));
                let cfg = TrainConfig {
                    mode,
                    beta,
                    seed,
                    max_epochs: epochs_for(&ctx.spec.train, ctx.spec.sweep.step_budget, subset.len()),
                    ..ctx.spec.train.clone()
                };
                values.push(ctx.run_with(cfg, &subset, Some(&dir))?.test_metric);
            }
            let s = RepetitionSummary::from_values(values.clone(), ctx.spec.sweep.ci_method)?;
            rows.push(SizeRow { size: n, metric: s.mean, ci: s.half_width, values });
        }
        write_text(&out.join(format!("size_sweep_{tag}.csv")), &size_sweep_csv(&rows))?;
        match mode {
            TrainMode::TransferLearning => result.transfer_learning = rows,
            TrainMode::AttentionTransfer => result.attention_transfer = Some(rows),
        }
    }
    write_json(&out.join("size_sweep.json"), &result)?;
    Ok(result)
}

/// Validation curves of one run directory (one curve per repetition).
#[derive(Clone, Debug)]
pub struct RunCurves {
    pub name: String,
    pub selection_metric: Option<SelectionMetric>,
    pub curves: Vec<Vec<f64>>,
}

fn epoch_logs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let direct = dir.join(EPOCH_LOG_FILE);
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    let mut reps: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let k = name.strip_prefix("rep")?.parse::<usize>().ok()?;
            let log = e.path().join(EPOCH_LOG_FILE);
            log.is_file().then_some((k, log))
        })
        .collect();
    reps.sort();
    if reps.is_empty() {
        return Err(Error::Config(format!("{} holds no {EPOCH_LOG_FILE}", dir.display())));
    }
    Ok(reps.into_iter().map(|(_, p)| p).collect())
}

fn selection_metric_of(log: &Path) -> Result<Option<SelectionMetric>> {
    let summary = log.with_file_name(SUMMARY_FILE);
    if !summary.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&summary).map_err(|e| Error::io(&summary, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(v.get("selection_metric").and_then(|m| serde_json::from_value(m.clone()).ok()))
}

pub fn read_run(dir: &Path) -> Result<RunCurves> {
    let mut curves = Vec::new();
    let mut metric = None;
    for log in epoch_logs_in(dir)? {
        curves.push(read_epoch_log(&log)?.iter().map(|e| e.val_metric).collect());
        if let Some(m) = selection_metric_of(&log)? {
            if metric.is_some_and(|prev| prev != m) {
                return Err(Error::Config(format!("{} mixes selection metrics", dir.display())));
            }
            metric = Some(m);
        }
    }
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(RunCurves { name, selection_metric: metric, curves })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub best: RepetitionSummary,
    pub fluctuation: f64,
    pub final_mean: f64,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub names: Vec<String>,
    /// Mean validation curve per run, aligned by epoch.
    pub curves: Vec<Vec<f64>>,
    pub rows: Vec<CompareRow>,
}

fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|e| {
            let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(e).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

pub fn compare_runs(dirs: &[PathBuf], method: CiMethod) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let runs = dirs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    let metrics: Vec<SelectionMetric> = runs.iter().filter_map(|r| r.selection_metric).collect();
    if metrics.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config(format!("runs use different selection metrics: {metrics:?}")));
    }
    let mut names: Vec<String> = Vec::new();
    for r in &runs {
        let mut name = r.name.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{}_{k}", r.name);
            k += 1;
        }
        names.push(name);
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (name, r) in names.iter().zip(&runs) {
        let bests = r.curves.iter().map(|c| select_best(c).map(|(_, v)| v)).collect::<Result<Vec<_>>>()?;
        let fl: Vec<f64> = r.curves.iter().map(|c| late_fluctuation(c)).collect();
        let mean = mean_curve(&r.curves);
        rows.push(CompareRow {
            name: name.clone(),
            best: RepetitionSummary::from_values(bests, method)?,
            fluctuation: fl.iter().sum::<f64>() / fl.len() as f64,
            final_mean: mean.last().copied().unwrap_or(f64::NAN),
        });
        curves.push(mean);
    }
    Ok(Comparison { names, curves, rows })
}

impl Comparison {
    pub fn curves_csv(&self) -> String {
        let mut s = format!("epoch,{}\n", self.names.join(","));
        let len = self.curves.iter().map(Vec::len).max().unwrap_or(0);
        for e in 0..len {
            let cells: Vec<String> = self.curves.iter().map(|c| c.get(e).map_or(String::new(), |v| v.to_string())).collect();
            let _ = writeln!(s, "{e},{}", cells.join(","));
        }
        s
    }

    pub fn summary_markdown(&self) -> String {
        let mut s = String::from("| run | best validation (mean ± 95% CI) | late fluctuation | final |\n|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {:.4} | {:.4} |", r.name, fmt_summary(&r.best), r.fluctuation, r.final_mean);
        }
        s.push_str("\nLate fluctuation: standard deviation of the validation metric over the final 25% of epochs, averaged over repetitions.\n");
        s
    }

    /// Line plot of the mean validation curves.
    pub fn svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 48.0);
        let len = self.curves.iter().map(Vec::len).max().unwrap_or(1).max(2);
        let vals: Vec<f64> = self.curves.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
        let x = |e: usize| pad + (w - 2.0 * pad) * e as f64 / (len - 1) as f64;
        let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
        let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
        let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - pad, w - pad, h - pad);
        let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>", h - pad);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>", w / 2.0, h - 12.0);
        let _ = writeln!(s, "<text x=\"8\" y=\"{}\">{hi:.3}</text><text x=\"8\" y=\"{}\">{lo:.3}</text>", pad, h - pad);
        for (i, (name, c)) in self.names.iter().zip(&self.curves).enumerate() {
            let color = colors[i % colors.len()];
            let pts: Vec<String> =
                c.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(e, &v)| format!("{:.1},{:.1}", x(e), y(v))).collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>", w - pad - 120.0, pad + 16.0 * i as f64);
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_text(&out.join("compare.csv"), &self.curves_csv())?;
        write_text(&out.join("compare.md"), &self.summary_markdown())?;
        write_text(&out.join("compare.svg"), &self.svg())?;
        write_json(&out.join("compare.json"), &self.rows)
    }
}

/// Parses the aligned curve table written by [`Comparison::write`].
pub fn read_curves_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("epoch") {
        return Err(perr(1, "first column must be epoch".into()));
    }
    let names: Vec<String> = cols.map(str::to_string).collect();
    let mut curves = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() + 1 {
            return Err(perr(i + 2, format!("expected {} fields", names.len() + 1)));
        }
        for (c, cell) in cells[1..].iter().enumerate() {
            if !cell.is_empty() {
                curves[c].push(cell.parse().map_err(|_| perr(i + 2, format!("{cell:?} is not a number")))?);
            }
        }
    }
    Ok((names, curves))
}

/// Writes a synthetic dataset described by the spec to `out`.
pub fn cmd_gen_data(spec: &ExperimentSpec, out: &Path) -> Result<crate::data::GeneratedDataset> {
    let s = spec.dataset.synthetic.as_ref().ok_or_else(|| Error::Config("gen-data needs a [dataset.synthetic] section".into()))?;
    crate::data::generate_synthetic(s, spec.dataset.synthetic_seed, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    pub(crate) fn tiny_spec() -> ExperimentSpec {
        let text = r#"
schema_version = 1

[dataset]
split_seed = 3
split = { fractions = { train = 0.5, validation = 0.25, test = 0.25 } }

[dataset.synthetic]
n_patients = 16
image_size = 16

[student]
init_channels = 4
growth_rate = 2
block_layers = [1]
head = "sigmoid_multilabel"
num_classes = 2

[train]
max_epochs = 2
batch_size = 4
base_lr = 0.001
repetitions = 2

[train.augment]
size = 16

[sweep]
sizes = [2, 4]
"#;
        ExperimentSpec::from_toml(text).unwrap()
    }

    #[test]
    fn spec_parsing_is_strict() {
        let spec = tiny_spec();
        assert_eq!(spec.sweep.betas, DEFAULT_BETA_GRID.to_vec());
        assert_eq!(spec.student.head, HeadKind::SigmoidMultilabel);
        let text = spec.to_toml().unwrap();
        assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec);
        assert!(ExperimentSpec::from_toml(&format!("{text}\n[extra]\nx = 1\n")).is_err());
        assert!(ExperimentSpec::from_toml(&text.replace("schema_version = 1", "schema_version = 9")).is_err());
    }

    #[test]
    fn beta_tie_break_and_grid() {
        assert_eq!(pick_beta(&[(50.0, 0.8), (20.0, 0.8), (100.0, 0.7)]).unwrap(), 20.0);
        assert_eq!(pick_beta(&[(7.0, 0.1)]).unwrap(), 7.0);
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[1.0, -2.0]).is_err());
        for b in [1.0, 20.0, 30.0, 50.0, 60.0, 100.0, 1000.0, 2000.0] {
            assert!(DEFAULT_BETA_GRID.contains(&b));
        }
    }

    #[test]
    fn step_budget_scales_epochs() {
        let cfg = TrainConfig { max_epochs: 30, batch_size: 32, ..TrainConfig::default() };
        assert_eq!(epochs_for(&cfg, None, 1600), 30);
        assert_eq!(epochs_for(&cfg, Some(400), 1600), 8);
        assert_eq!(epochs_for(&cfg, Some(400), 100), 30);
        assert_eq!(epochs_for(&cfg, Some(400), 97), 30);
        assert_eq!(epochs_for(&cfg, Some(1), 1600), 1);
    }

    #[test]
    fn fluctuation_statistic() {
        assert_eq!(late_fluctuation(&[0.1, 0.2, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]), 0.0);
        let f = late_fluctuation(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4, 0.6]);
        assert!((f - (0.02f64).sqrt()).abs() < 1e-12);
        assert!(late_fluctuation(&[0.5]).is_nan());
    }

    #[test]
    fn train_then_compare_round_trip() {
        let spec = tiny_spec();
        let data = prepare_data(&spec, 1).unwrap();
        let ctx = RunContext { spec: &spec, data: &data, teacher: None, workers: 1 };
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let summary = cmd_train(&ctx, &a).unwrap();
        assert_eq!(summary.runs.len(), 2);
        for rep in 0..2 {
            let log = read_epoch_log(&a.join(format!("rep{rep}")).join(EPOCH_LOG_FILE)).unwrap();
            assert_eq!(log.len(), 2);
        }
        // comparing a run with itself gives identical columns
        let cmp = compare_runs(&[a.clone(), a.clone()], CiMethod::Normal).unwrap();
        assert_eq!(cmp.curves[0], cmp.curves[1]);
        assert_eq!(cmp.rows[0].best.mean, cmp.rows[1].best.mean);
        let out = dir.path().join("cmp");
        cmp.write(&out).unwrap();
        let (names, curves) = read_curves_csv(&out.join("compare.csv")).unwrap();
        assert_eq!(names, cmp.names);
        assert_eq!(curves, cmp.curves);
        assert!(std::fs::read_to_string(out.join("compare.svg")).unwrap().contains("<polyline"));
    }

    #[test]
    fn size_sweep_rejects_oversized_subsets() {
        let mut spec = tiny_spec();
        spec.sweep.sizes = vec![1000];
        let data = prepare_data(&spec, 1).unwrap();
        let ctx = RunContext { spec: &spec, data: &data, teacher: None, workers: 1 };
        let err = cmd_size_sweep(&ctx, tempfile::tempdir().unwrap().path()).unwrap_err();
        assert!(err.to_string().contains("exceeds"));
    }

    #[test]
    fn beta_search_needs_teacher() {
        let spec = tiny_spec();
        let data = prepare_data(&spec, 1).unwrap();
        let ctx = RunContext { spec: &spec, data: &data, teacher: None, workers: 1 };
        assert!(cmd_beta_search(&ctx, tempfile::tempdir().unwrap().path()).is_err());
    }
}
