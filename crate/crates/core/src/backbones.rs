//! Two-level Unet backbones built from named blocks.
//!
//! * `M1`: two 3x3 convolutions, each followed by ReLU.
//! * `M2`: three 3x3 convolutions with dilations 1, 2, 4 (ReLU after each);
//!   the block output is the channel concatenation of its input and the
//!   last convolution's output.
//! * `M3`: two 3x3 convolutions with ReLU and a final 1x1 convolution to
//!   class logits.
//!
//! The multi-view Unet wires them as
//!
//! ```text
//! x ─ M1.1 ─ pool ─ M1.2 ─ pool ─ M1.3 ─ up ─┐
//!      │             └──── M2.2 ─────────── cat ─ M1.4 ─ up ─┐
//!      └──────────────── M2.1 ─────────────────────────────  cat ─ M1.5 ─ M3 ─ softmax
//! ```
//!
//! The standard Unet is identical except that the skips are the encoder
//! features themselves (no `M2` blocks).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    adapter_backward, compose, init_adapter, merge, AdapterConfig, AdapterGrads, AdapterState,
    Composition, ConvWeight,
};
use crate::error::{Error, Result};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    MultiView,
    Standard,
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multiview" | "multi-view" => Ok(Architecture::MultiView),
            "unet" | "standard" => Ok(Architecture::Standard),
            _ => Err(Error::Config(format!(
                "unknown model `{s}` (expected multiview or unet)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::MultiView => "multiview",
            Architecture::Standard => "unet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    M1,
    M2,
    M3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockRole {
    Encoder,
    Bottleneck,
    Skip,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    pub role: BlockRole,
    pub layers: Vec<LayerSpec>,
    pub trainable: bool,
}

/// Architecture description; everything needed to rebuild a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Architecture,
    pub level_count: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    pub class_count: usize,
    pub blocks: Vec<BlockSpec>,
}

fn m1(name: &str, role: BlockRole, c_in: usize, c: usize) -> BlockSpec {
    BlockSpec {
        name: name.into(),
        kind: BlockKind::M1,
        role,
        layers: vec![
            LayerSpec { c_in, c_out: c, kernel: 3, dilation: 1 },
            LayerSpec { c_in: c, c_out: c, kernel: 3, dilation: 1 },
        ],
        trainable: true,
    }
}

fn m2(name: &str, c: usize) -> BlockSpec {
    BlockSpec {
        name: name.into(),
        kind: BlockKind::M2,
        role: BlockRole::Skip,
        layers: [1, 2, 4]
            .iter()
            .map(|&d| LayerSpec { c_in: c, c_out: c, kernel: 3, dilation: d })
            .collect(),
        trainable: true,
    }
}

fn m3(c: usize, classes: usize) -> BlockSpec {
    BlockSpec {
        name: "M3".into(),
        kind: BlockKind::M3,
        role: BlockRole::Decoder,
        layers: vec![
            LayerSpec { c_in: c, c_out: c, kernel: 3, dilation: 1 },
            LayerSpec { c_in: c, c_out: c, kernel: 3, dilation: 1 },
            LayerSpec { c_in: c, c_out: classes, kernel: 1, dilation: 1 },
        ],
        trainable: true,
    }
}

impl NetworkSpec {
    /// Two-level spec with one input channel and two classes.
    pub fn new(arch: Architecture, base_channels: usize) -> Self {
        Self::with_channels(arch, base_channels, 1, 2)
    }

    pub fn with_channels(
        arch: Architecture,
        base_channels: usize,
        input_channels: usize,
        class_count: usize,
    ) -> Self {
        let c = base_channels;
        let multiview = arch == Architecture::MultiView;
        // Skip channel counts seen by the decoder.
        let (s1, s2) = if multiview { (2 * c, 4 * c) } else { (c, 2 * c) };
        let mut blocks = vec![
            m1("M1.1", BlockRole::Encoder, input_channels, c),
            m1("M1.2", BlockRole::Encoder, c, 2 * c),
            m1("M1.3", BlockRole::Bottleneck, 2 * c, 4 * c),
        ];
        if multiview {
            blocks.push(m2("M2.1", c));
            blocks.push(m2("M2.2", 2 * c));
        }
        blocks.push(m1("M1.4", BlockRole::Decoder, 4 * c + s2, 2 * c));
        blocks.push(m1("M1.5", BlockRole::Decoder, 2 * c + s1, c));
        blocks.push(m3(c, class_count));
        Self {
            arch,
            level_count: 2,
            base_channels,
            input_channels,
            class_count,
            blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_count != 2 {
            return Err(Error::Config(format!(
                "only 2-level networks are supported, got {}",
                self.level_count
            )));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.class_count != 2 {
            return Err(Error::Config(format!(
                "segmentation head must have 2 classes, got {}",
                self.class_count
            )));
        }
        let canonical = Self::with_channels(
            self.arch,
            self.base_channels,
            self.input_channels,
            self.class_count,
        );
        let strip = |b: &BlockSpec| (b.name.clone(), b.kind, b.role, b.layers.clone());
        if canonical.blocks.iter().map(strip).ne(self.blocks.iter().map(strip)) {
            return Err(Error::Config(
                "block list does not match the architecture".into(),
            ));
        }
        Ok(())
    }

    /// True when two specs describe weight-compatible networks.
    pub fn same_architecture(&self, other: &NetworkSpec) -> bool {
        self.arch == other.arch
            && self.level_count == other.level_count
            && self.base_channels == other.base_channels
            && self.input_channels == other.input_channels
            && self.class_count == other.class_count
    }
}

/// One convolution with an optional adapter slot.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub base: ConvWeight,
    pub dilation: usize,
    pub adapter: Option<AdapterState>,
    /// Whether the base kernel and bias receive updates.
    pub base_trainable: bool,
    grad_weight: Option<Array4<f64>>,
    grad_bias: Option<Array1<f64>>,
    adapter_grads: Option<AdapterGrads>,
}

/// What a conv layer keeps from its forward pass.
#[derive(Debug)]
pub struct ConvCache {
    input: Array4<f64>,
    composition: Option<Composition>,
}

/// A trainable tensor together with its accumulated gradient.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, base: ConvWeight, dilation: usize) -> Self {
        Self {
            name: name.into(),
            base,
            dilation,
            adapter: None,
            base_trainable: true,
            grad_weight: None,
            grad_bias: None,
            adapter_grads: None,
        }
    }

    /// He-uniform kernel, zero bias.
    pub fn random(name: impl Into<String>, spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (spec.c_in * spec.kernel * spec.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = Array4::from_shape_simple_fn(
            (spec.c_out, spec.c_in, spec.kernel, spec.kernel),
            || rng.random_range(-bound..bound),
        );
        let base = ConvWeight::new(data, Some(Array1::zeros(spec.c_out))).expect("valid dims");
        Self::new(name, base, spec.dilation)
    }

    pub fn is_trainable(&self) -> bool {
        self.base_trainable || self.adapter.is_some()
    }

    /// Kernel actually applied by the convolution.
    pub fn effective_weight(&self) -> Result<Array4<f64>> {
        Ok(match &self.adapter {
            Some(a) => compose(&self.base, a)?.weight,
            None => self.base.data.clone(),
        })
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, ConvCache)> {
        let composition = match &self.adapter {
            Some(a) => Some(compose(&self.base, a)?),
            None => None,
        };
        let weight = composition
            .as_ref()
            .map_or(&self.base.data, |c| &c.weight);
        let y = ops::conv2d(x.view(), weight.view(), self.base.bias.as_ref(), self.dilation)?;
        Ok((
            y,
            ConvCache {
                input: x.clone(),
                composition,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        grad_out: &Array4<f64>,
        need_input: bool,
    ) -> Result<Option<Array4<f64>>> {
        let weight = cache
            .composition
            .as_ref()
            .map_or(&self.base.data, |c| &c.weight);
        let grads = ops::conv2d_backward(
            cache.input.view(),
            weight.view(),
            grad_out.view(),
            self.dilation,
            need_input,
            self.is_trainable(),
        )?;
        if let (Some(gw), Some(gb)) = (&grads.weight, &grads.bias) {
            if self.base_trainable {
                match &mut self.grad_weight {
                    Some(acc) => *acc += gw,
                    None => self.grad_weight = Some(gw.clone()),
                }
                if self.base.bias.is_some() {
                    match &mut self.grad_bias {
                        Some(acc) => *acc += gb,
                        None => self.grad_bias = Some(gb.clone()),
                    }
                }
            }
            if let (Some(adapter), Some(comp)) = (&self.adapter, &cache.composition) {
                let ag = adapter_backward(adapter, comp, gw.view())?;
                match &mut self.adapter_grads {
                    Some(acc) => acc.accumulate(&ag),
                    None => self.adapter_grads = Some(ag),
                }
            }
        }
        Ok(grads.input)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight = None;
        self.grad_bias = None;
        self.adapter_grads = None;
    }

    /// Trainable tensors with their gradients. Tensors that have not
    /// received a gradient since the last [`ConvLayer::zero_grad`] are
    /// skipped.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let ConvLayer {
            name,
            base,
            adapter,
            base_trainable,
            grad_weight,
            grad_bias,
            adapter_grads,
            ..
        } = self;
        let mut out = Vec::new();
        if *base_trainable {
            if let Some(g) = grad_weight.as_ref() {
                out.push(ParamSlot {
                    name: format!("{name}.weight"),
                    value: base.data.as_slice_mut().expect("contiguous"),
                    grad: g.as_slice().expect("contiguous"),
                });
            }
            if let (Some(b), Some(g)) = (base.bias.as_mut(), grad_bias.as_ref()) {
                out.push(ParamSlot {
                    name: format!("{name}.bias"),
                    value: b.as_slice_mut().expect("contiguous"),
                    grad: g.as_slice().expect("contiguous"),
                });
            }
        }
        if let (Some(a), Some(g)) = (adapter.as_mut(), adapter_grads.as_ref()) {
            for ((tname, value), grad) in a.tensors_mut().into_iter().zip(g.slices()) {
                out.push(ParamSlot {
                    name: format!("{name}.{tname}"),
                    value,
                    grad,
                });
            }
        }
        out
    }

    /// Number of scalars that would be updated by training.
    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        if self.base_trainable {
            n += self.base.data.len() + self.base.bias.as_ref().map_or(0, |b| b.len());
        }
        n + self.adapter.as_ref().map_or(0, |a| a.num_params())
    }
}

/// A named group of convolutions.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub role: BlockRole,
    pub layers: Vec<ConvLayer>,
    trainable: bool,
}

#[derive(Debug)]
pub struct BlockCache {
    convs: Vec<ConvCache>,
    /// Post-activation outputs of every ReLU'd layer.
    activations: Vec<Array4<f64>>,
    input_channels: usize,
}

impl Block {
    fn from_spec(spec: &BlockSpec, rng: &mut ChaCha8Rng) -> Self {
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| ConvLayer::random(format!("{}.conv{i}", spec.name), l, rng))
            .collect();
        let mut b = Self {
            name: spec.name.clone(),
            kind: spec.kind,
            role: spec.role,
            layers,
            trainable: true,
        };
        b.set_trainable(spec.trainable);
        b
    }

    fn has_relu(&self, layer: usize) -> bool {
        !(self.kind == BlockKind::M3 && layer + 1 == self.layers.len())
    }

    /// Whether the base weights of this block are updated by training.
    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
        for l in &mut self.layers {
            l.base_trainable = on && l.adapter.is_none();
        }
    }

    /// True when any parameter inside the block (base or adapter) trains.
    pub fn requires_grad(&self) -> bool {
        self.layers.iter().any(ConvLayer::is_trainable)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, BlockCache)> {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&h)?;
            convs.push(cache);
            h = if self.has_relu(i) {
                let a = ops::relu(&y);
                activations.push(a.clone());
                a
            } else {
                y
            };
        }
        if self.kind == BlockKind::M2 {
            h = ops::concat_channels(x, &h)?;
        }
        Ok((
            h,
            BlockCache {
                convs,
                activations,
                input_channels: x.dim().1,
            },
        ))
    }

    /// Back-propagates through the block, accumulating parameter gradients.
    /// Returns the input gradient when `need_input` is set.
    pub fn backward(
        &mut self,
        cache: &BlockCache,
        grad_out: &Array4<f64>,
        need_input: bool,
    ) -> Result<Option<Array4<f64>>> {
        let (direct, mut g) = if self.kind == BlockKind::M2 {
            let (d, g) = ops::split_channels(grad_out, cache.input_channels);
            (Some(d), g)
        } else {
            (None, grad_out.clone())
        };
        // A layer needs its input gradient if anything before it trains.
        let mut earlier_trainable: Vec<bool> = Vec::with_capacity(self.layers.len());
        let mut acc = need_input;
        for l in &self.layers {
            earlier_trainable.push(acc);
            acc |= l.is_trainable();
        }
        for i in (0..self.layers.len()).rev() {
            if self.has_relu(i) {
                g = ops::relu_backward(&cache.activations[i], &g);
            }
            match self.layers[i].backward(&cache.convs[i], &g, earlier_trainable[i])? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        if !need_input {
            return Ok(None);
        }
        if let Some(d) = direct {
            g += &d;
        }
        Ok(Some(g))
    }
}

/// Per-pixel class probabilities for one image, (classes, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(pub ndarray::Array3<f64>);

impl ProbabilityMap {
    pub fn foreground(&self) -> ndarray::ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), crate::losses::FOREGROUND)
    }

    /// Largest-probability class per pixel; ties go to background.
    pub fn predict(&self) -> ndarray::Array2<u8> {
        let (c, h, w) = self.0.dim();
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0usize;
            for k in 1..c {
                if self.0[[k, y, x]] > self.0[[best, y, x]] {
                    best = k;
                }
            }
            (best == crate::losses::FOREGROUND) as u8
        })
    }

    /// Largest deviation of the per-pixel class sums from 1.
    pub fn normalization_error(&self) -> f64 {
        self.0
            .sum_axis(Axis(0))
            .iter()
            .fold(0.0f64, |m, s| m.max((s - 1.0).abs()))
    }
}

/// Intermediates of a training forward pass.
#[derive(Debug)]
pub struct Tape {
    probs: Array4<f64>,
    caches: BTreeMap<&'static str, BlockCache>,
    pool1: Array4<u8>,
    pool2: Array4<u8>,
    up1_channels: usize,
    up2_channels: usize,
}

impl Tape {
    pub fn probabilities(&self) -> &Array4<f64> {
        &self.probs
    }
}

/// Fine-tuning module selections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeStrategy {
    None,
    Shallow,
    Deep,
    Encoding,
    Decoding,
    All,
}

impl FreezeStrategy {
    pub const ALL: [FreezeStrategy; 6] = [
        FreezeStrategy::None,
        FreezeStrategy::Shallow,
        FreezeStrategy::Deep,
        FreezeStrategy::Encoding,
        FreezeStrategy::Decoding,
        FreezeStrategy::All,
    ];

    /// Blocks left trainable by this strategy.
    pub fn modules(self) -> &'static [&'static str] {
        match self {
            FreezeStrategy::None => &[],
            FreezeStrategy::Shallow => &["M1.1", "M3"],
            FreezeStrategy::Deep => &["M1.3", "M1.4"],
            FreezeStrategy::Encoding => &["M1.1", "M1.2", "M1.3"],
            FreezeStrategy::Decoding => &["M1.4", "M1.5", "M3"],
            FreezeStrategy::All => &["M1.1", "M1.2", "M1.3", "M1.4", "M1.5", "M2.1", "M2.2", "M3"],
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            FreezeStrategy::None => "none",
            FreezeStrategy::Shallow => "shallow",
            FreezeStrategy::Deep => "deep",
            FreezeStrategy::Encoding => "encoding",
            FreezeStrategy::Decoding => "decoding",
            FreezeStrategy::All => "all",
        }
    }
}

impl fmt::Display for FreezeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for FreezeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        FreezeStrategy::ALL
            .into_iter()
            .find(|f| f.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown fine-tuning strategy `{s}`")))
    }
}

/// Block names a strategy leaves trainable in this network.
pub fn select_trainable(net: &Network, strategy: FreezeStrategy) -> BTreeSet<String> {
    strategy
        .modules()
        .iter()
        .filter(|m| net.block(m).is_some())
        .map(|m| m.to_string())
        .collect()
}

/// Per-layer trainable-parameter audit line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAudit {
    pub layer: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub trainable: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    base_channels: usize,
    input_channels: usize,
    class_count: usize,
    blocks: Vec<Block>,
}

/// Direct upstream blocks of every block.
fn direct_inputs(name: &str, arch: Architecture) -> &'static [&'static str] {
    let mv = arch == Architecture::MultiView;
    match name {
        "M1.2" => &["M1.1"],
        "M1.3" => &["M1.2"],
        "M2.1" => &["M1.1"],
        "M2.2" => &["M1.2"],
        "M1.4" if mv => &["M1.3", "M2.2"],
        "M1.4" => &["M1.3", "M1.2"],
        "M1.5" if mv => &["M1.4", "M2.1"],
        "M1.5" => &["M1.4", "M1.1"],
        "M3" => &["M1.5"],
        _ => &[],
    }
}

fn add_opt(acc: &mut Option<Array4<f64>>, g: Array4<f64>) {
    match acc {
        Some(a) => *a += &g,
        None => *acc = Some(g),
    }
}

impl Network {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = spec
            .blocks
            .iter()
            .map(|b| Block::from_spec(b, &mut rng))
            .collect();
        Ok(Self {
            arch: spec.arch,
            base_channels: spec.base_channels,
            input_channels: spec.input_channels,
            class_count: spec.class_count,
            blocks,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn spec(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::with_channels(
            self.arch,
            self.base_channels,
            self.input_channels,
            self.class_count,
        );
        for b in &mut spec.blocks {
            b.trainable = self.block(&b.name).is_some_and(Block::trainable);
        }
        spec
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.blocks.iter().flat_map(|b| b.layers.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.blocks.iter_mut().flat_map(|b| b.layers.iter_mut())
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayer> {
        self.layers().find(|l| l.name == name)
    }

    /// Makes exactly the named blocks trainable and freezes the rest.
    pub fn set_trainable(&mut self, names: &BTreeSet<String>) -> Result<()> {
        for n in names {
            if self.block(n).is_none() {
                return Err(Error::Config(format!("no block named `{n}`")));
            }
        }
        for b in &mut self.blocks {
            b.set_trainable(names.contains(&b.name));
        }
        Ok(())
    }

    pub fn apply_strategy(&mut self, strategy: FreezeStrategy) -> Result<BTreeSet<String>> {
        let sel = select_trainable(self, strategy);
        self.set_trainable(&sel)?;
        Ok(sel)
    }

    pub fn freeze_all(&mut self) {
        for b in &mut self.blocks {
            b.set_trainable(false);
        }
    }

    /// Wraps every convolution in a fresh adapter and freezes all base
    /// weights. Layer `k` (in block order) is seeded with `seed + k`.
    pub fn attach_adapters(&mut self, config: &AdapterConfig, seed: u64) -> Result<()> {
        config.validate()?;
        self.freeze_all();
        for (k, layer) in self.layers_mut().enumerate() {
            let mut st = init_adapter(&layer.base, config, seed.wrapping_add(k as u64))?;
            st.base_ref = layer.name.clone();
            layer.adapter = Some(st);
            layer.base_trainable = false;
            layer.zero_grad();
        }
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.layers().any(|l| l.adapter.is_some())
    }

    pub fn detach_adapters(&mut self) {
        for l in self.layers_mut() {
            l.adapter = None;
            l.zero_grad();
        }
    }

    /// Replaces every adapted kernel by its merged equivalent.
    pub fn merge_adapters(&mut self) -> Result<()> {
        for l in self.layers_mut() {
            if let Some(a) = l.adapter.take() {
                l.base = merge(&l.base, &a)?;
                l.zero_grad();
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        self.layers_mut().flat_map(ConvLayer::params_mut).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers().map(ConvLayer::trainable_count).sum()
    }

    pub fn base_param_count(&self) -> usize {
        self.layers()
            .map(|l| l.base.data.len() + l.base.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    pub fn audit(&self) -> Vec<LayerAudit> {
        self.layers()
            .map(|l| {
                let (c_out, c_in, kh, kw) = l.base.dims();
                LayerAudit {
                    layer: l.name.clone(),
                    c_in,
                    c_out,
                    kernel: (kh, kw),
                    trainable: l.trainable_count(),
                }
            })
            .collect()
    }

    /// Every tensor (base and adapter) by qualified name.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.push((
                format!("{}.weight", l.name),
                l.base.data.shape().to_vec(),
                l.base.data.iter().copied().collect(),
            ));
            if let Some(b) = &l.base.bias {
                out.push((format!("{}.bias", l.name), vec![b.len()], b.to_vec()));
            }
            if let Some(a) = &l.adapter {
                for (t, shape, v) in a.tensors() {
                    out.push((format!("{}.{t}", l.name), shape, v.to_vec()));
                }
            }
        }
        out
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.input_channels {
            return Err(Error::Shape(format!(
                "expected {} input channel(s), got {c}",
                self.input_channels
            )));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "spatial dims must be positive multiples of 4, got {h}x{w}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn idx(&self, name: &str) -> usize {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .unwrap_or_else(|| panic!("missing block {name}"))
    }

    /// Per-pixel class probabilities, (N, classes, H, W).
    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn predict_image(&self, image: ndarray::ArrayView2<f64>) -> Result<ProbabilityMap> {
        let x = image.to_owned().insert_axis(Axis(0)).insert_axis(Axis(0));
        let p = self.forward(&x)?;
        Ok(ProbabilityMap(p.index_axis(Axis(0), 0).to_owned()))
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Tape)> {
        self.check_input(x)?;
        let mv = self.arch == Architecture::MultiView;
        let mut caches = BTreeMap::new();
        let mut run = |name: &'static str, input: &Array4<f64>| -> Result<Array4<f64>> {
            let (y, c) = self.blocks[self.idx(name)].forward(input)?;
            caches.insert(name, c);
            Ok(y)
        };
        let e1 = run("M1.1", x)?;
        let (p1, pool1) = ops::maxpool2(&e1)?;
        let e2 = run("M1.2", &p1)?;
        let (p2, pool2) = ops::maxpool2(&e2)?;
        let bottom = run("M1.3", &p2)?;
        let (s1, s2) = if mv {
            (run("M2.1", &e1)?, run("M2.2", &e2)?)
        } else {
            (e1, e2)
        };
        let up2_channels = bottom.dim().1;
        let d2 = run("M1.4", &ops::concat_channels(&ops::upsample2(&bottom), &s2)?)?;
        let up1_channels = d2.dim().1;
        let d1 = run("M1.5", &ops::concat_channels(&ops::upsample2(&d2), &s1)?)?;
        let logits = run("M3", &d1)?;
        let probs = ops::softmax_channels(&logits);
        Ok((
            probs.clone(),
            Tape {
                probs,
                caches,
                pool1,
                pool2,
                up1_channels,
                up2_channels,
            },
        ))
    }

    /// Whether anything upstream of `name` has trainable parameters.
    fn upstream_trainable(&self, name: &str) -> bool {
        let mut stack: Vec<&str> = direct_inputs(name, self.arch).to_vec();
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            if self.block(n).is_some_and(Block::requires_grad) {
                return true;
            }
            stack.extend_from_slice(direct_inputs(n, self.arch));
        }
        false
    }

    fn block_backward(
        &mut self,
        name: &'static str,
        tape: &Tape,
        grad: &Array4<f64>,
    ) -> Result<Option<Array4<f64>>> {
        let need_input = self.upstream_trainable(name);
        let i = self.idx(name);
        if !need_input && !self.blocks[i].requires_grad() {
            return Ok(None);
        }
        self.blocks[i].backward(&tape.caches[name], grad, need_input)
    }

    /// Accumulates gradients of a scalar loss given `dL/dprobs`.
    pub fn backward(&mut self, tape: &Tape, grad_probs: &Array4<f64>) -> Result<()> {
        if grad_probs.dim() != tape.probs.dim() {
            return Err(Error::Shape(format!(
                "probability gradient {:?} vs output {:?}",
                grad_probs.dim(),
                tape.probs.dim()
            )));
        }
        let mv = self.arch == Architecture::MultiView;
        let dlogits = ops::softmax_backward(&tape.probs, grad_probs);
        let mut g_e1 = None;
        let mut g_e2 = None;
        if let Some(dd1) = self.block_backward("M3", tape, &dlogits)? {
            if let Some(dcat1) = self.block_backward("M1.5", tape, &dd1)? {
                let (du1, ds1) = ops::split_channels(&dcat1, tape.up1_channels);
                if mv {
                    if let Some(g) = self.block_backward("M2.1", tape, &ds1)? {
                        add_opt(&mut g_e1, g);
                    }
                } else {
                    add_opt(&mut g_e1, ds1);
                }
                let dd2 = ops::upsample2_backward(&du1);
                if let Some(dcat2) = self.block_backward("M1.4", tape, &dd2)? {
                    let (du2, ds2) = ops::split_channels(&dcat2, tape.up2_channels);
                    if mv {
                        if let Some(g) = self.block_backward("M2.2", tape, &ds2)? {
                            add_opt(&mut g_e2, g);
                        }
                    } else {
                        add_opt(&mut g_e2, ds2);
                    }
                    let db = ops::upsample2_backward(&du2);
                    if let Some(dp2) = self.block_backward("M1.3", tape, &db)? {
                        add_opt(&mut g_e2, ops::maxpool2_backward(&tape.pool2, &dp2));
                    }
                }
            }
        }
        if let Some(ge2) = g_e2 {
            if let Some(dp1) = self.block_backward("M1.2", tape, &ge2)? {
                add_opt(&mut g_e1, ops::maxpool2_backward(&tape.pool1, &dp1));
            }
        }
        if let Some(ge1) = g_e1 {
            self.block_backward("M1.1", tape, &ge1)?;
        }
        Ok(())
    }
}

/// Builds the two-level multi-view Unet.
pub fn build_multiview_unet(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    if spec.arch != Architecture::MultiView {
        return Err(Error::Config("spec is not a multi-view network".into()));
    }
    Network::build(spec, seed)
}

/// Builds the two-level standard Unet.
pub fn build_standard_unet(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    if spec.arch != Architecture::Standard {
        return Err(Error::Config("spec is not a standard Unet".into()));
    }
    Network::build(spec, seed)
}
