//! DenseNet-style networks with named tap points for attention extraction.

mod checkpoint;
mod config;
mod densenet;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTap, TapSource};
use crate::error::{Error, Result};
use crate::tensor::{softmax_row, stable_sigmoid, BatchStats, Element, Graph, Tensor, Var};

pub use checkpoint::{CheckpointMeta, CHECKPOINT_VERSION};
pub use config::{AdapterSpec, ArchConfig, HeadKind, AUTO_TAP};
pub use densenet::{build_dense_block, build_densenet40, build_densenet_scaled, DenseBlockSegment};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameter count of DenseNet-40 reported for the reference implementation.
pub const REFERENCE_DENSENET40_PARAMS: usize = 1_364_142;

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub group: usize,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum FreezePolicy {
    AllTrainable,
    /// Train only the last `k` layer groups (the adapter, when present, stays
    /// trainable).
    UnfreezeLastK(usize),
    Frozen,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvUnit {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormUnit {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DenseLayerUnit {
    pub norm1: NormUnit,
    pub conv1: ConvUnit,
    pub norm2: NormUnit,
    pub conv2: ConvUnit,
}

#[derive(Clone, Debug)]
pub(crate) enum Unit {
    /// conv -> norm -> relu
    StemConv { conv: ConvUnit, norm: NormUnit },
    MaxPool { kernel: usize, stride: usize, padding: usize },
    DenseBlock { layers: Vec<DenseLayerUnit> },
    /// norm -> relu -> 1x1 conv -> 2x2 average pool
    Transition { norm: NormUnit, conv: ConvUnit },
    /// norm -> relu, not part of the spatial trace
    FinalNorm { norm: NormUnit },
    AdaptivePool { size: usize },
    /// 1x1 conv (tapped here) -> relu
    Projection { conv: ConvUnit },
    GlobalPool,
    Head { weight: usize, bias: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct Adapter {
    pub pool: Option<(usize, usize)>,
    pub conv: Option<ConvUnit>,
}

/// Named activation available for attention extraction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapPoint {
    pub name: String,
    pub channels: usize,
}

/// Result of one forward pass.
pub struct ForwardPass<T: Element> {
    pub graph: Graph<T>,
    /// Pre-activation head outputs `[N, classes]`.
    pub logits: Var,
    /// Registered taps, before any adapter.
    pub taps: BTreeMap<String, Var>,
    /// Primary tap after the adapter; this is what the attention loss sees.
    pub attention: Var,
    /// `(parameter index, graph leaf)` for every parameter.
    pub params: Vec<(usize, Var)>,
    /// Output shape of each traced stage.
    pub trace: Vec<(String, Vec<usize>)>,
}

impl<T: Element> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits)
    }

    /// Snapshot of the primary (post-adapter) tap.
    pub fn attention_tap(&self, source: TapSource) -> Result<AttentionTap<T>> {
        AttentionTap::new(self.graph.value(self.attention).clone(), source)
    }

    pub fn tap(&self, name: &str, source: TapSource) -> Result<AttentionTap<T>> {
        let v = self.taps.get(name).ok_or_else(|| Error::invalid(format!("tap {name:?} is not registered")))?;
        AttentionTap::new(self.graph.value(*v).clone(), source)
    }

    /// Output spatial size of each traced stage.
    pub fn spatial_trace(&self) -> Vec<usize> {
        self.trace.iter().map(|(_, s)| s[2]).collect()
    }
}

/// Batch-norm statistics collected during a training pass, keyed by norm index.
type NormStats<T> = Vec<(usize, BatchStats<T>)>;

/// A DenseNet-style classifier.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    pub(crate) config: ArchConfig,
    pub(crate) params: Vec<Param<T>>,
    pub(crate) stats: Vec<RunningStats<T>>,
    pub(crate) groups: Vec<ParamGroup>,
    pub(crate) units: Vec<(String, Unit)>,
    pub(crate) adapter: Option<Adapter>,
    pub(crate) tap_points: Vec<TapPoint>,
    pub(crate) primary_tap: String,
    pub(crate) registered_taps: Vec<String>,
    pub(crate) training: bool,
    pub(crate) freeze: FreezePolicy,
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn tap_points(&self) -> &[TapPoint] {
        &self.tap_points
    }

    pub fn primary_tap(&self) -> &str {
        &self.primary_tap
    }

    pub fn registered_taps(&self) -> &[String] {
        &self.registered_taps
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.iter().filter(|p| self.is_param_trainable(p)).map(|p| p.value.numel()).sum()
    }

    fn is_param_trainable(&self, p: &Param<T>) -> bool {
        self.groups[p.group].trainable
    }

    pub fn is_trainable(&self, param_index: usize) -> bool {
        self.is_param_trainable(&self.params[param_index])
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    /// Registers an extra tap point to be returned by every forward pass.
    pub fn register_tap(&mut self, name: &str) -> Result<()> {
        if !self.tap_points.iter().any(|t| t.name == name) {
            return Err(Error::invalid(format!(
                "no tap point named {name:?}; available: {}",
                self.tap_points.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        if self.registered_taps.iter().any(|t| t == name) {
            return Err(Error::invalid(format!("tap {name:?} already registered")));
        }
        self.registered_taps.push(name.to_string());
        Ok(())
    }

    /// Channels of the primary tap before the adapter.
    pub fn tap_channels(&self) -> usize {
        self.tap_points.iter().find(|t| t.name == self.primary_tap).map_or(0, |t| t.channels)
    }

    /// Applies a freeze policy. Frozen parameters never receive gradients.
    pub fn freeze_layers(&mut self, policy: FreezePolicy) -> Result<()> {
        let backbone: Vec<usize> = (0..self.groups.len()).filter(|&i| self.groups[i].name != "adapter").collect();
        match policy {
            FreezePolicy::AllTrainable => self.groups.iter_mut().for_each(|g| g.trainable = true),
            FreezePolicy::Frozen => self.groups.iter_mut().for_each(|g| g.trainable = false),
            FreezePolicy::UnfreezeLastK(k) => {
                if k == 0 {
                    return Err(Error::Config("unfreeze_last_k(0) leaves nothing to train; use the frozen policy".into()));
                }
                if k > backbone.len() {
                    return Err(Error::Config(format!("cannot unfreeze {k} of {} layer groups", backbone.len())));
                }
                let cut = backbone.len() - k;
                for (rank, &gi) in backbone.iter().enumerate() {
                    self.groups[gi].trainable = rank >= cut;
                }
                for g in self.groups.iter_mut().filter(|g| g.name == "adapter") {
                    g.trainable = true;
                }
            }
        }
        self.freeze = policy;
        Ok(())
    }

    /// Forward pass. In training mode batch statistics are used and the
    /// running estimates are updated.
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<ForwardPass<T>> {
        let (pass, stats) = self.run(batch, self.training)?;
        if self.training {
            let m = T::from_f64(BN_MOMENTUM);
            for (idx, s) in stats {
                let rs = &mut self.stats[idx];
                for (r, b) in rs.mean.iter_mut().zip(&s.mean) {
                    *r = (T::one() - m) * *r + m * *b;
                }
                for (r, b) in rs.var.iter_mut().zip(&s.var) {
                    *r = (T::one() - m) * *r + m * *b;
                }
            }
        }
        Ok(pass)
    }

    /// Read-only evaluation-mode forward pass, usable from several threads.
    pub fn forward_eval(&self, batch: &Tensor<T>) -> Result<ForwardPass<T>> {
        if self.training {
            return Err(Error::invalid("forward_eval needs the model in evaluation mode"));
        }
        self.run(batch, false).map(|(p, _)| p)
    }

    /// Class probabilities (sigmoid or softmax of the logits), row-major.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Vec<f64>> {
        let pass = self.forward_eval(batch)?;
        let logits = pass.logits();
        let k = self.config.num_classes;
        let mut out: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        match self.config.head {
            HeadKind::SigmoidMultilabel => out.iter_mut().for_each(|v| *v = stable_sigmoid(*v)),
            HeadKind::SoftmaxMulticlass => out.chunks_mut(k).for_each(softmax_row),
        }
        Ok(out)
    }

    fn run(&self, batch: &Tensor<T>, training: bool) -> Result<(ForwardPass<T>, NormStats<T>)> {
        if self.freeze == FreezePolicy::Frozen && training {
            return Err(Error::invalid(
                "frozen model must run in evaluation mode so batch norm uses running statistics",
            ));
        }
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, H, W] input, got {s:?}", self.config.in_channels),
            ));
        }
        let mut g = Graph::new();
        let params: Vec<(usize, Var)> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let trainable = self.is_param_trainable(p);
                (i, g.leaf(p.value.clone().with_requires_grad(trainable)))
            })
            .collect();
        let pv = |i: usize| params[i].1;
        let mut fwd = Forward { g, pv: &pv, running: &self.stats, training, stats: Vec::new() };

        let mut x = fwd.g.constant(batch.clone().with_requires_grad(false));
        let mut taps: BTreeMap<String, Var> = BTreeMap::new();
        let mut trace = Vec::new();
        let mut logits = None;
        let record_tap = |name: &str, v: Var, taps: &mut BTreeMap<String, Var>| {
            if self.registered_taps.iter().any(|t| t == name) {
                taps.insert(name.to_string(), v);
            }
        };

        for (name, unit) in &self.units {
            match unit {
                Unit::StemConv { conv, norm } => {
                    let y = fwd.conv(x, conv)?;
                    let y = fwd.norm(y, norm)?;
                    x = fwd.g.relu(y)?;
                }
                Unit::MaxPool { kernel, stride, padding } => x = fwd.g.max_pool2d(x, *kernel, *stride, *padding)?,
                Unit::DenseBlock { layers } => {
                    let (out, new_features) = fwd.dense_block(x, layers)?;
                    for (li, y) in new_features.into_iter().enumerate() {
                        record_tap(&format!("{name}.layer{li}"), y, &mut taps);
                    }
                    x = out;
                }
                Unit::Transition { norm, conv } => {
                    let y = fwd.norm(x, norm)?;
                    let y = fwd.g.relu(y)?;
                    let y = fwd.conv(y, conv)?;
                    x = fwd.g.avg_pool2d(y, 2, 2, 0)?;
                }
                Unit::FinalNorm { norm } => {
                    let y = fwd.norm(x, norm)?;
                    x = fwd.g.relu(y)?;
                }
                Unit::AdaptivePool { size } => x = fwd.g.adaptive_avg_pool2d(x, *size, *size)?,
                Unit::Projection { conv } => {
                    let y = fwd.conv(x, conv)?;
                    record_tap(name, y, &mut taps);
                    x = fwd.g.relu(y)?;
                }
                Unit::GlobalPool => x = fwd.g.adaptive_avg_pool2d(x, 1, 1)?,
                Unit::Head { weight, bias } => {
                    let flat = fwd.g.flatten(x)?;
                    logits = Some(fwd.g.linear(flat, pv(*weight), Some(pv(*bias)))?);
                    continue;
                }
            }
            record_tap(name, x, &mut taps);
            if !matches!(unit, Unit::FinalNorm { .. }) {
                trace.push((name.clone(), fwd.g.shape(x).to_vec()));
            }
        }
        let logits = logits.ok_or_else(|| Error::Config("model has no head".into()))?;
        let raw = *taps
            .get(&self.primary_tap)
            .ok_or_else(|| Error::Config(format!("primary tap {:?} was not produced", self.primary_tap)))?;
        let mut attention = raw;
        if let Some(adapter) = &self.adapter {
            if let Some((h, w)) = adapter.pool {
                attention = fwd.g.adaptive_avg_pool2d(attention, h, w)?;
            }
            if let Some(conv) = &adapter.conv {
                attention = fwd.conv(attention, conv)?;
            }
        }
        let Forward { g, stats, .. } = fwd;
        Ok((ForwardPass { graph: g, logits, taps, attention, params, trace }, stats))
    }

    /// Copies gradients from a finished backward pass into the parameters.
    pub fn collect_grads(&mut self, pass: &mut ForwardPass<T>) {
        for &(i, v) in &pass.params {
            match pass.graph.take_grad(v) {
                Some(g) if self.groups[self.params[i].group].trainable => {
                    self.params[i].value.set_grad(g).expect("gradient shape matches parameter");
                }
                _ => self.params[i].value.zero_grad(),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Shape `(C, H, W)` of the primary tap, after the adapter, for an
    /// input of the given spatial size.
    pub fn attention_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let probe = Tensor::zeros(&[1, self.config.in_channels, height, width])?;
        let pass = self.run(&probe, false)?.0;
        let s = pass.graph.shape(pass.attention);
        Ok((s[1], s[2], s[3]))
    }

    /// Same shape before the adapter.
    pub fn raw_tap_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let probe = Tensor::zeros(&[1, self.config.in_channels, height, width])?;
        let pass = self.run(&probe, false)?.0;
        let s = pass.graph.shape(pass.taps[&self.primary_tap]);
        Ok((s[1], s[2], s[3]))
    }

    /// Adds a trainable adapter (adaptive pool and/or 1x1 conv) so the
    /// primary tap matches `target`. Returns whether an adapter was needed.
    pub fn attach_adapter(&mut self, target: AdapterSpec, input_hw: (usize, usize), seed: u64) -> Result<bool> {
        if self.adapter.is_some() {
            return Err(Error::invalid("model already has an adapter"));
        }
        let (c, h, w) = self.raw_tap_shape(input_hw.0, input_hw.1)?;
        if (c, h, w) == (target.channels, target.height, target.width) {
            return Ok(false);
        }
        if target.height > h || target.width > w {
            return Err(Error::shape(
                "attach_adapter",
                format!(
                    "student tap {h}x{w} is smaller than teacher tap {}x{}; adapter can only pool down",
                    target.height, target.width
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
        densenet::add_adapter(self, target, &mut rng)?;
        self.config.adapter = Some(target);
        Ok(true)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Converts the model to another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: p.value.cast() })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    mean: s.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            groups: self.groups.clone(),
            units: self.units.clone(),
            adapter: self.adapter.clone(),
            tap_points: self.tap_points.clone(),
            primary_tap: self.primary_tap.clone(),
            registered_taps: self.registered_taps.clone(),
            training: self.training,
            freeze: self.freeze,
        }
    }
}

pub(crate) struct Forward<'a, T: Element, F: Fn(usize) -> Var> {
    g: Graph<T>,
    pv: &'a F,
    running: &'a [RunningStats<T>],
    training: bool,
    stats: NormStats<T>,
}

impl<T: Element, F: Fn(usize) -> Var> Forward<'_, T, F> {
    fn conv(&mut self, x: Var, c: &ConvUnit) -> Result<Var> {
        let b = c.bias.map(|b| (self.pv)(b));
        self.g.conv2d(x, (self.pv)(c.weight), b, c.stride, c.padding)
    }

    /// Returns the block output and each layer's new feature maps.
    fn dense_block(&mut self, x: Var, layers: &[DenseLayerUnit]) -> Result<(Var, Vec<Var>)> {
        let mut features = vec![x];
        for layer in layers {
            let input = if features.len() == 1 { features[0] } else { self.g.concat(&features)? };
            let y = self.norm(input, &layer.norm1)?;
            let y = self.g.relu(y)?;
            let y = self.conv(y, &layer.conv1)?;
            let y = self.norm(y, &layer.norm2)?;
            let y = self.g.relu(y)?;
            let y = self.conv(y, &layer.conv2)?;
            features.push(y);
        }
        let out = self.g.concat(&features)?;
        Ok((out, features.split_off(1)))
    }

    fn norm(&mut self, x: Var, n: &NormUnit) -> Result<Var> {
        let (gamma, beta) = ((self.pv)(n.gamma), (self.pv)(n.beta));
        if self.training {
            let (y, s) = self.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            self.stats.push((n.stats, s));
            Ok(y)
        } else {
            let rs = &self.running[n.stats];
            self.g.batch_norm_eval(x, gamma, beta, &rs.mean, &rs.var, BN_EPS)
        }
    }
}
