//! Adam optimisation loop for transfer-learning and attention-transfer runs,
//! with per-epoch validation, checkpoint retention and best-epoch selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_entropy_var, total_loss_var, LossBreakdown, Targets, TapSource, DEFAULT_NORM_EPS};
use crate::data::{AugmentConfig, Dataset, Mode};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, mean_multilabel_auc, weighted_f1, MetricReport};
use crate::model::{CheckpointMeta, FreezePolicy, HeadKind, Model};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TransferLearning,
    AttentionTransfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    MeanMultilabelAuc,
    WeightedF1,
}

impl SelectionMetric {
    pub fn of(self, report: &MetricReport) -> f64 {
        match self {
            SelectionMetric::MeanMultilabelAuc => report.mean_auc,
            SelectionMetric::WeightedF1 => report.weighted_f1,
        }
        .unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Attention-loss weight is `1 / beta`; required in attention-transfer mode.
    pub beta: Option<f64>,
    pub base_lr: f64,
    pub lr_halving_period_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub selection_metric: SelectionMetric,
    pub repetitions: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    /// Evaluation batch size; memory only, results do not depend on it.
    pub eval_batch_size: usize,
    /// Write `best.ckpt` and `last.ckpt` when an output directory is given.
    pub checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::TransferLearning,
            beta: None,
            base_lr: 5e-5,
            lr_halving_period_epochs: 16,
            max_epochs: 128,
            batch_size: 32,
            seed: 0,
            freeze_policy: FreezePolicy::AllTrainable,
            selection_metric: SelectionMetric::MeanMultilabelAuc,
            repetitions: 3,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            eval_batch_size: 64,
            checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match (self.mode, self.beta) {
            (TrainMode::AttentionTransfer, None) => return fail("attention transfer needs beta".into()),
            (TrainMode::AttentionTransfer, Some(b)) if !(b > 0.0 && b.is_finite()) => {
                return fail(format!("beta must be positive and finite, got {b}"))
            }
            (TrainMode::TransferLearning, Some(_)) => return fail("beta is only meaningful in attention transfer mode".into()),
            _ => {}
        }
        if self.max_epochs == 0 || self.batch_size < 2 || self.repetitions == 0 || self.lr_halving_period_epochs == 0 || self.eval_batch_size == 0 {
            return fail("epochs, repetitions, halving period and eval batch size must be positive; batch size at least 2".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("Adam coefficients out of range".into());
        }
        self.augment.validate()
    }

    /// Stable 64-bit FNV-1a hash of the serialised configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        let h = text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        format!("{h:016x}")
    }
}

/// `base_lr * 0.5^floor(epoch / period)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, period: usize) -> f64 {
    let halvings = epoch / period.max(1);
    base_lr * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// Adam moment buffers, one per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Element>(model: &Model<T>) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// Bias-corrected Adam update of one buffer. `step` is the 1-based count
/// including this update.
pub fn adam_update<T: Element>(param: &mut [T], grad: &[T], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        param[i] = T::from_f64(param[i].as_f64() - update);
    }
}

/// One Adam step over every trainable parameter of `model`. A trainable
/// parameter without a gradient is treated as having a zero gradient;
/// frozen parameters are left untouched.
pub fn adam_step<T: Element>(model: &mut Model<T>, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != model.params().len() {
        return Err(Error::invalid("optimizer state does not match the model"));
    }
    for i in 0..model.params().len() {
        if !model.is_trainable(i) {
            continue;
        }
        let p = &model.params()[i];
        if let Some(g) = p.value.grad() {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                let group = &model.groups()[p.group].name;
                return Err(Error::NonFinite(format!("gradient {bad} in parameter {} (group {group})", p.name)));
            }
        }
    }
    state.step += 1;
    let step = state.step;
    for i in 0..model.params().len() {
        if !model.is_trainable(i) {
            continue;
        }
        let p = &mut model.params_mut()[i];
        let grad = p.value.take_grad().unwrap_or_else(|| vec![T::zero(); p.value.numel()]);
        adam_update(p.value.data_mut(), &grad, &mut state.m[i], &mut state.v[i], step, lr, cfg);
    }
    Ok(())
}

/// Class probabilities and targets of an evaluation pass.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub probs: Vec<f64>,
    pub targets: Targets,
    pub num_classes: usize,
}

/// Evaluation-mode predictions on `indices` without augmentation.
pub fn predict<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    augment: &AugmentConfig,
    batch_size: usize,
    workers: usize,
) -> Result<Predictions> {
    let mut eval = model.clone();
    eval.set_training(false);
    let mut probs = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk, Mode::Eval, augment, 0, 0, workers)?;
        let x: crate::tensor::Tensor<T> = x.cast();
        probs.extend(eval.predict_proba(&x)?);
    }
    Ok(Predictions { probs, targets: data.manifest.targets(indices)?, num_classes: model.config().num_classes })
}

/// Per-class AUC (one-vs-rest for multiclass), mean AUC and, for
/// multiclass, weighted F1. An undefined AUC is reported as missing rather
/// than failing the run.
pub fn metric_report(pred: &Predictions) -> Result<MetricReport> {
    let k = pred.num_classes;
    let (labels, f1) = match &pred.targets {
        Targets::Multilabel { labels, .. } => (labels.iter().map(|&v| v == 1).collect::<Vec<_>>(), None),
        Targets::Multiclass { classes, .. } => {
            let onehot = classes.iter().flat_map(|&c| (0..k).map(move |j| j == c)).collect();
            (onehot, Some(weighted_f1(&argmax_rows(&pred.probs, k), classes, k)?))
        }
    };
    let n = labels.len() / k.max(1);
    let (per_class_auc, mean_auc) = match mean_multilabel_auc(&pred.probs, &labels, k) {
        Ok(r) => (r.per_class, Some(r.mean)),
        Err(Error::Metric(m)) => {
            log::warn!("AUC unavailable: {m}");
            (vec![None; k], None)
        }
        Err(e) => return Err(e),
    };
    Ok(MetricReport { n_samples: n, per_class_auc, mean_auc, weighted_f1: f1 })
}

pub fn evaluate<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    augment: &AugmentConfig,
    batch_size: usize,
    workers: usize,
) -> Result<MetricReport> {
    metric_report(&predict(model, data, indices, augment, batch_size, workers)?)
}

/// Loss components of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub at: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Step means over the epoch.
    pub ce: f64,
    pub at: f64,
    pub total: f64,
    /// Validation value of the selection metric (NaN when undefined).
    pub val_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPaths {
    pub best: Option<PathBuf>,
    pub last: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub mode: TrainMode,
    pub beta: Option<f64>,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub epochs: Vec<EpochLog>,
    #[serde(skip)]
    pub steps: Vec<StepLog>,
    pub reports: Vec<MetricReport>,
    pub best_epoch: Option<usize>,
    pub checkpoints: CheckpointPaths,
    /// Largest `|total - (ce + at / beta)|` over all steps.
    pub max_identity_error: f64,
    pub wall_clock_secs: f64,
    pub aborted: Option<String>,
}

pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const STEP_LOG_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EPOCH_LOG_HEADER: &str = "epoch,lr,ce,at,total,val_metric";

impl RunRecord {
    pub fn epoch_log_csv(&self) -> String {
        let mut s = format!("{EPOCH_LOG_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{},{}", e.epoch, e.lr, e.ce, e.at, e.total, e.val_metric);
        }
        s
    }

    pub fn step_log_csv(&self) -> String {
        let mut s = String::from("epoch,step,ce,at,total\n");
        for e in &self.steps {
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.step, e.ce, e.at, e.total);
        }
        s
    }

    /// Writes the epoch log, the step log and the JSON summary.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put(EPOCH_LOG_FILE, &self.epoch_log_csv())?;
        put(STEP_LOG_FILE, &self.step_log_csv())?;
        put(SUMMARY_FILE, &serde_json::to_string_pretty(self)?)
    }

    pub fn metrics(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_metric).collect()
    }
}

/// Parses an epoch log written by [`RunRecord::write`]. Epochs must run
/// contiguously from 0.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == EPOCH_LOG_HEADER => {}
        _ => return Err(perr(1, format!("expected header {EPOCH_LOG_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(perr(lineno, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| perr(lineno, format!("{s:?} is not a number")));
        let epoch = f[0].trim().parse::<usize>().map_err(|_| perr(lineno, format!("bad epoch {:?}", f[0])))?;
        if epoch != out.len() {
            return Err(perr(lineno, format!("missing epoch {}: found epoch {epoch}", out.len())));
        }
        out.push(EpochLog { epoch, lr: num(f[1])?, ce: num(f[2])?, at: num(f[3])?, total: num(f[4])?, val_metric: num(f[5])? });
    }
    Ok(out)
}

/// Epoch with the largest finite value; ties go to the earliest epoch.
pub fn select_best(metrics: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (e, &m) in metrics.iter().enumerate() {
        if m.is_finite() && best.is_none_or(|(_, b)| m > b) {
            best = Some((e, m));
        }
    }
    best.ok_or_else(|| Error::Metric("no epoch has a finite validation metric".into()))
}

/// Best epoch of a run under `criterion`, taken from its stored reports.
pub fn select_best_by(run: &RunRecord, criterion: SelectionMetric) -> Result<(usize, f64)> {
    let values: Vec<f64> = if run.reports.len() == run.epochs.len() {
        run.reports.iter().map(|r| criterion.of(r)).collect()
    } else if criterion == run.selection_metric {
        run.metrics()
    } else {
        return Err(Error::Metric("run has no per-epoch reports for another criterion".into()));
    };
    select_best(&values)
}

/// Training and validation record indices.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub train: &'a [usize],
    pub validation: &'a [usize],
}

pub struct TrainOutcome<T: Element> {
    pub record: RunRecord,
    /// Weights of the best validation epoch (the last epoch if none is finite).
    pub best_model: Model<T>,
}

fn check_teacher<T: Element>(cfg: &TrainConfig, student: &Model<T>, teacher: Option<&Model<T>>) -> Result<()> {
    match (cfg.mode, teacher) {
        (TrainMode::TransferLearning, Some(_)) => Err(Error::Config("transfer learning takes no teacher".into())),
        (TrainMode::AttentionTransfer, None) => Err(Error::Config("attention transfer needs a teacher".into())),
        (TrainMode::TransferLearning, None) => Ok(()),
        (TrainMode::AttentionTransfer, Some(t)) => {
            if t.freeze_policy() != FreezePolicy::Frozen || t.is_training() {
                return Err(Error::Config("teacher must be frozen and in evaluation mode".into()));
            }
            let s = cfg.augment.size;
            let (ts, ss) = (t.attention_shape(s, s)?, student.attention_shape(s, s)?);
            if ts != ss {
                return Err(Error::Shape {
                    op: "train",
                    msg: format!(
                        "student tap {ss:?} and teacher tap {ts:?} differ at {s}x{s} input; attach an adapter to the student"
                    ),
                });
            }
            if t.config().num_classes == 0 {
                return Err(Error::Config("teacher has no head".into()));
            }
            Ok(())
        }
    }
}

/// Trains `student` with Adam. In attention-transfer mode the frozen
/// teacher's primary tap supervises the student's through the attention
/// loss weighted by `1 / beta`.
pub fn train<T: Element>(
    cfg: &TrainConfig,
    student: &mut Model<T>,
    teacher: Option<&Model<T>>,
    data: TrainData<'_>,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    cfg.validate()?;
    check_teacher(cfg, student, teacher)?;
    if data.train.len() < 2 {
        return Err(Error::Config(format!("{} training records; at least 2 are needed", data.train.len())));
    }
    if data.validation.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let expected_head = match data.dataset.manifest.task {
        crate::attention::Task::MultilabelBinary => HeadKind::SigmoidMultilabel,
        crate::attention::Task::Multiclass => HeadKind::SoftmaxMulticlass,
    };
    if student.config().head != expected_head || student.config().num_classes != data.dataset.manifest.num_classes() {
        return Err(Error::Config(format!(
            "student head {:?} x {} does not fit a {:?} dataset with {} classes",
            student.config().head,
            student.config().num_classes,
            data.dataset.manifest.task,
            data.dataset.manifest.num_classes()
        )));
    }
    student.freeze_layers(cfg.freeze_policy)?;
    student.set_training(true);

    let mut record = RunRecord {
        config_hash: cfg.hash(),
        mode: cfg.mode,
        beta: cfg.beta,
        seed: cfg.seed,
        selection_metric: cfg.selection_metric,
        epochs: Vec::new(),
        steps: Vec::new(),
        reports: Vec::new(),
        best_epoch: None,
        checkpoints: CheckpointPaths::default(),
        max_identity_error: 0.0,
        wall_clock_secs: 0.0,
        aborted: None,
    };
    let mut adam = AdamState::new(student);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(0x5eed);
    let mut order = data.train.to_vec();
    let mut best: Option<(f64, Model<T>)> = None;
    let ckpt_dir = out_dir.filter(|_| cfg.checkpoints);

    let result = (|| -> Result<()> {
        for epoch in 0..cfg.max_epochs {
            let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_halving_period_epochs);
            order.shuffle(&mut order_rng);
            let mut sums = (0.0, 0.0, 0.0);
            let mut steps = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                if batch.len() < 2 {
                    // batch norm needs two samples
                    continue;
                }
                let (x, targets) = data.dataset.batch(batch, Mode::Train, &cfg.augment, cfg.seed, epoch, workers)?;
                let x = x.cast::<T>();
                let mut pass = student.forward(&x)?;
                let (loss, parts) = match (cfg.mode, teacher) {
                    (TrainMode::AttentionTransfer, Some(t)) => {
                        let tap = t.forward_eval(&x)?.attention_tap(TapSource::Teacher)?;
                        let beta = cfg.beta.expect("validated");
                        total_loss_var(&mut pass.graph, pass.logits, &targets, pass.attention, &tap, beta, DEFAULT_NORM_EPS)?
                    }
                    _ => {
                        let ce = cross_entropy_var(&mut pass.graph, pass.logits, &targets)?;
                        let v = pass.graph.value(ce).item()?.as_f64();
                        (ce, LossBreakdown::ce_only(v))
                    }
                };
                if !parts.total.is_finite() {
                    return Err(Error::TrainingAborted { epoch, msg: format!("non-finite loss {} at step {steps}", parts.total) });
                }
                record.max_identity_error = record.max_identity_error.max(parts.identity_error());
                record.steps.push(StepLog { epoch, step: steps, ce: parts.ce, at: parts.at, total: parts.total });
                pass.graph.backward(loss).map_err(|e| Error::TrainingAborted { epoch, msg: e.to_string() })?;
                student.collect_grads(&mut pass);
                adam_step(student, &mut adam, lr, &cfg.adam).map_err(|e| Error::TrainingAborted { epoch, msg: e.to_string() })?;
                sums = (sums.0 + parts.ce, sums.1 + parts.at, sums.2 + parts.total);
                steps += 1;
            }
            if steps == 0 {
                return Err(Error::Config("no training batch of at least 2 samples".into()));
            }
            let n = steps as f64;
            let report = evaluate(student, data.dataset, data.validation, &cfg.augment, cfg.eval_batch_size, workers)?;
            let val_metric = cfg.selection_metric.of(&report);
            record.epochs.push(EpochLog { epoch, lr, ce: sums.0 / n, at: sums.1 / n, total: sums.2 / n, val_metric });
            record.reports.push(report);
            log::info!(
                "epoch {epoch}: lr {lr:.3e} ce {:.5} at {:.5} total {:.5} val {val_metric:.4}",
                sums.0 / n,
                sums.1 / n,
                sums.2 / n
            );

            let meta = || CheckpointMeta { epoch, metrics: [("val_metric".to_string(), val_metric)].into() };
            let improved = val_metric.is_finite() && best.as_ref().is_none_or(|(b, _)| val_metric > *b);
            if improved {
                best = Some((val_metric, student.clone()));
                record.best_epoch = Some(epoch);
                if let Some(dir) = ckpt_dir {
                    let p = dir.join("best.ckpt");
                    student.save_checkpoint(&p, &meta())?;
                    record.checkpoints.best = Some(p);
                }
            }
            if let Some(dir) = ckpt_dir {
                let p = dir.join("last.ckpt");
                student.save_checkpoint(&p, &meta())?;
                record.checkpoints.last = Some(p);
            }
        }
        Ok(())
    })();

    record.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Err(e) = &result {
        record.aborted = Some(e.to_string());
    }
    if let Some(dir) = out_dir {
        record.write(dir)?;
    }
    result?;
    let best_model = best.map_or_else(|| student.clone(), |(_, m)| m);
    Ok(TrainOutcome { record, best_model })
}
