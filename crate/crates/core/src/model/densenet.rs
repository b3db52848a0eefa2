use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    AdapterSpec, Adapter, ArchConfig, ConvUnit, DenseLayerUnit, FreezePolicy, Forward, HeadKind, Model, NormUnit, Param,
    ParamGroup, RunningStats, TapPoint, Unit, AUTO_TAP, REFERENCE_DENSENET40_PARAMS,
};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Accumulates parameters, running statistics and groups while a network is
/// laid out.
struct Builder<T: Element> {
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
    groups: Vec<ParamGroup>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn new(rng: ChaCha8Rng) -> Self {
        Self { params: Vec::new(), stats: Vec::new(), groups: Vec::new(), rng }
    }

    fn group(&mut self, name: &str) -> usize {
        self.groups.push(ParamGroup { name: name.to_string(), trainable: true });
        self.groups.len() - 1
    }

    fn push(&mut self, name: String, group: usize, value: Tensor<T>) -> usize {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    /// Kaiming fan-in normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        group: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<ConvUnit> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::randn(&[cout, cin, k, k], std, &mut self.rng)?;
        let weight = self.push(format!("{name}.weight"), group, w);
        let bias = if bias { Some(self.push(format!("{name}.bias"), group, Tensor::zeros(&[cout])?)) } else { None };
        Ok(ConvUnit { weight, bias, stride, padding })
    }

    fn norm(&mut self, name: &str, group: usize, c: usize) -> Result<NormUnit> {
        let gamma = self.push(format!("{name}.weight"), group, Tensor::ones(&[c])?);
        let beta = self.push(format!("{name}.bias"), group, Tensor::zeros(&[c])?);
        self.stats.push(RunningStats { name: name.to_string(), mean: vec![T::zero(); c], var: vec![T::one(); c] });
        Ok(NormUnit { gamma, beta, stats: self.stats.len() - 1 })
    }

    fn dense_layer(&mut self, prefix: &str, group: usize, cin: usize, growth: usize, bottleneck: usize) -> Result<DenseLayerUnit> {
        let mid = bottleneck * growth;
        Ok(DenseLayerUnit {
            norm1: self.norm(&format!("{prefix}.norm1"), group, cin)?,
            conv1: self.conv(&format!("{prefix}.conv1"), group, cin, mid, 1, 1, 0, false)?,
            norm2: self.norm(&format!("{prefix}.norm2"), group, mid)?,
            conv2: self.conv(&format!("{prefix}.conv2"), group, mid, growth, 3, 1, 1, false)?,
        })
    }

    /// Lays out `n_layers` dense layers, one parameter group per layer.
    fn dense_block(&mut self, name: &str, cin: usize, n_layers: usize, growth: usize, bottleneck: usize) -> Result<Vec<DenseLayerUnit>> {
        (0..n_layers)
            .map(|l| {
                let prefix = format!("{name}.layer{l}");
                let g = self.group(&prefix);
                self.dense_layer(&prefix, g, cin + l * growth, growth, bottleneck)
            })
            .collect()
    }
}

/// A standalone dense block with its own parameters, run in evaluation mode.
#[derive(Clone, Debug)]
pub struct DenseBlockSegment<T: Element = f32> {
    in_channels: usize,
    out_channels: usize,
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
    layers: Vec<DenseLayerUnit>,
}

impl<T: Element> DenseBlockSegment<T> {
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.shape()[1] != self.in_channels {
            return Err(Error::shape(
                "dense_block",
                format!("expected [N, {}, H, W] input, got {:?}", self.in_channels, x.shape()),
            ));
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let pv = |i: usize| vars[i];
        let mut fwd = Forward { g, pv: &pv, running: &self.stats, training: false, stats: Vec::new() };
        let input = fwd.g.constant(x.clone());
        let (out, _) = fwd.dense_block(input, &self.layers)?;
        Ok(fwd.g.value(out).clone())
    }
}

/// Builds one dense block: each layer is norm, relu, 1x1 bottleneck conv
/// (4 x growth channels), norm, relu, 3x3 conv (growth channels), and its
/// output is concatenated onto every earlier feature map.
pub fn build_dense_block<T: Element>(in_channels: usize, n_layers: usize, growth_rate: usize, seed: u64) -> Result<DenseBlockSegment<T>> {
    if in_channels == 0 || n_layers == 0 || growth_rate == 0 {
        return Err(Error::invalid(format!(
            "dense block sizes must be positive: in={in_channels}, layers={n_layers}, growth={growth_rate}"
        )));
    }
    let mut b = Builder::<T>::new(ChaCha8Rng::seed_from_u64(seed));
    let layers = b.dense_block("block", in_channels, n_layers, growth_rate, 4)?;
    Ok(DenseBlockSegment {
        in_channels,
        out_channels: ArchConfig::block_out_channels(in_channels, n_layers, growth_rate),
        params: b.params,
        stats: b.stats,
        layers,
    })
}

/// DenseNet-121 truncated after its second dense block, with an 8x8 pooled
/// pair of 1x1 projections feeding the head.
pub fn build_densenet40<T: Element>(num_classes: usize, head: HeadKind, seed: u64) -> Result<Model<T>> {
    let model = build_densenet_scaled(&ArchConfig::densenet40(num_classes, head), seed)?;
    let n = model.trainable_param_count();
    if n != REFERENCE_DENSENET40_PARAMS {
        log::warn!(
            "DenseNet-40 has {n} trainable parameters; the reference count is {REFERENCE_DENSENET40_PARAMS} ({:+})",
            n as i64 - REFERENCE_DENSENET40_PARAMS as i64
        );
    } else {
        log::info!("DenseNet-40 has {n} trainable parameters");
    }
    Ok(model)
}

/// Builds any network described by `config`. Weights are drawn from a
/// generator seeded with `seed`.
pub fn build_densenet_scaled<T: Element>(config: &ArchConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut b = Builder::<T>::new(ChaCha8Rng::seed_from_u64(seed));
    let mut units = Vec::new();
    let mut taps = Vec::new();
    let mut tap = |name: &str, channels: usize| taps.push(TapPoint { name: name.to_string(), channels });

    let g = b.group("conv0");
    let conv = b.conv("conv0", g, config.in_channels, config.init_channels, 7, 2, 3, false)?;
    let norm = b.norm("norm0", g, config.init_channels)?;
    units.push(("conv0".to_string(), Unit::StemConv { conv, norm }));
    tap("conv0", config.init_channels);
    units.push(("pool0".to_string(), Unit::MaxPool { kernel: 3, stride: 2, padding: 1 }));
    tap("pool0", config.init_channels);

    let mut ch = config.init_channels;
    let n_blocks = config.block_layers.len();
    for (bi, &n) in config.block_layers.iter().enumerate() {
        let name = format!("block{}", bi + 1);
        let layers = b.dense_block(&name, ch, n, config.growth_rate, config.bottleneck_factor)?;
        for l in 0..n {
            tap(&format!("{name}.layer{l}"), config.growth_rate);
        }
        ch = ArchConfig::block_out_channels(ch, n, config.growth_rate);
        units.push((name.clone(), Unit::DenseBlock { layers }));
        tap(&name, ch);
        if bi + 1 < n_blocks {
            let name = format!("transition{}", bi + 1);
            let g = b.group(&name);
            let out = config.transition_out_channels(ch);
            let norm = b.norm(&format!("{name}.norm"), g, ch)?;
            let conv = b.conv(&format!("{name}.conv"), g, ch, out, 1, 1, 0, false)?;
            units.push((name.clone(), Unit::Transition { norm, conv }));
            tap(&name, out);
            ch = out;
        }
    }

    let g = b.group("final_norm");
    let norm = b.norm("final_norm", g, ch)?;
    units.push(("final_norm".to_string(), Unit::FinalNorm { norm }));
    tap("final_norm", ch);

    if let Some(size) = config.projection_pool {
        units.push(("pool_proj".to_string(), Unit::AdaptivePool { size }));
        tap("pool_proj", ch);
    }
    for (pi, &width) in config.projection_widths.iter().enumerate() {
        let name = format!("proj{}", pi + 1);
        let g = b.group(&name);
        let conv = b.conv(&name, g, ch, width, 1, 1, 0, true)?;
        units.push((name.clone(), Unit::Projection { conv }));
        tap(&name, width);
        ch = width;
    }
    units.push(("global_pool".to_string(), Unit::GlobalPool));
    tap("global_pool", ch);

    let g = b.group("head");
    let k = config.num_classes;
    let std = (1.0 / ch as f64).sqrt();
    let w = Tensor::randn(&[k, ch], std, &mut b.rng)?;
    let weight = b.push("head.weight".into(), g, w);
    let bias = b.push("head.bias".into(), g, Tensor::zeros(&[k])?);
    units.push(("head".to_string(), Unit::Head { weight, bias }));

    let primary = resolve_tap(config, &taps)?;
    let Builder { params, stats, groups, mut rng } = b;
    let mut model = Model {
        config: config.clone(),
        params,
        stats,
        groups,
        units,
        adapter: None,
        tap_points: taps,
        primary_tap: primary.clone(),
        registered_taps: vec![primary],
        training: true,
        freeze: FreezePolicy::AllTrainable,
    };
    if let Some(spec) = config.adapter {
        add_adapter(&mut model, spec, &mut rng)?;
    }
    Ok(model)
}

fn resolve_tap(config: &ArchConfig, taps: &[TapPoint]) -> Result<String> {
    if config.tap != AUTO_TAP {
        return if taps.iter().any(|t| t.name == config.tap) {
            Ok(config.tap.clone())
        } else {
            Err(Error::Config(format!(
                "tap {:?} names no layer; available: {}",
                config.tap,
                taps.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ")
            )))
        };
    }
    if !config.projection_widths.is_empty() {
        return Ok(format!("proj{}", config.projection_widths.len()));
    }
    let last = config.block_layers.len();
    let n = config.block_layers[last - 1];
    Ok(format!("block{last}.layer{}", n.saturating_sub(2)))
}

/// Appends an adaptive pool to the target size and, when the channel counts
/// differ, a 1x1 projection. The adapter forms its own trainable group.
pub(super) fn add_adapter<T: Element>(model: &mut Model<T>, target: AdapterSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    let cin = model.tap_channels();
    let conv = if cin != target.channels {
        let group = model.groups.len();
        model.groups.push(ParamGroup { name: "adapter".into(), trainable: true });
        let mut b = Builder::<T>::new(rng.clone());
        let mut unit = b.conv("adapter", group, cin, target.channels, 1, 1, 0, true)?;
        let offset = model.params.len();
        unit.weight += offset;
        unit.bias = unit.bias.map(|i| i + offset);
        model.params.extend(b.params);
        *rng = b.rng;
        Some(unit)
    } else {
        None
    };
    model.adapter = Some(Adapter { pool: Some((target.height, target.width)), conv });
    Ok(())
}
