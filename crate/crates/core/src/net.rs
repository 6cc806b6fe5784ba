//! Spiking layer types, network builders and the forward pass.
//!
//! Networks are flat lists of [`LayerSpec`]s. Each spiking layer computes an
//! input current, hands it to [`propagate_groups`] window by window, and
//! emits spikes. The classifier head averages the last spike map over space
//! and reads logits from a non-spiking integrator.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::SpikeTrace;
use crate::error::{dim_err, Error, Result};
use crate::fusion::FusionConfig;
use crate::grad::{SurrogateSpec, Tape, Var};
use crate::lif::{LifParams, Threshold};
use crate::tensor::Tensor;
use crate::window::{
    propagate_groups, Dynamics, MembraneStore, SpikingLayer, WindowConfig, WindowLayout, WindowMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    SpikingConv,
    /// Token-mixing linear layer over spatial positions, shared by channels.
    SpikingFc,
    SpikingRecurrent,
    PatchMergeDownsample,
    ClassifierHead,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::SpikingConv => "spiking_conv",
            LayerKind::SpikingFc => "spiking_fc",
            LayerKind::SpikingRecurrent => "spiking_recurrent",
            LayerKind::PatchMergeDownsample => "patch_merge_downsample",
            LayerKind::ClassifierHead => "classifier_head",
        }
    }

    pub fn is_spiking(&self) -> bool {
        !matches!(self, LayerKind::ClassifierHead)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
    Rnn,
    BiRnn,
}

impl CellKind {
    /// Gate weight sets per step.
    pub fn gates(&self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
            CellKind::Rnn => 1,
            CellKind::BiRnn => 2,
        }
    }

    fn gate_names(&self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &["i", "f", "g", "o"],
            CellKind::Gru => &["z", "r", "n"],
            CellKind::Rnn => &["h"],
            CellKind::BiRnn => &["fwd", "bwd"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    Conv {
        k_w: usize,
        k_h: usize,
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
        stride: usize,
        padding: usize,
    },
    /// `repeats` independent `f_in → f_out` products (one per channel for
    /// token mixing).
    Features {
        f_in: usize,
        f_out: usize,
        repeats: usize,
    },
    /// Channel-mixing recurrent cell applied at `tokens` positions.
    Recurrent {
        cell: CellKind,
        c_in: usize,
        c_out: usize,
        tokens: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Adds the layer input to its current (identity shortcut).
    #[serde(default)]
    pub residual: bool,
    /// Inserted mixing layer that does not count toward the window schedule.
    #[serde(default)]
    pub auxiliary: bool,
    pub geometry: Geometry,
    pub window: WindowConfig,
    pub fusion: FusionConfig,
}

impl LayerSpec {
    pub fn check_geometry(&self) -> Result<()> {
        let ok = matches!(
            (self.kind, &self.geometry),
            (
                LayerKind::SpikingConv | LayerKind::PatchMergeDownsample,
                Geometry::Conv { .. }
            ) | (
                LayerKind::SpikingFc | LayerKind::ClassifierHead,
                Geometry::Features { .. }
            ) | (LayerKind::SpikingRecurrent, Geometry::Recurrent { .. })
        );
        if !ok {
            return Err(Error::Spec(format!(
                "layer {} of kind {} has mismatched geometry",
                self.name,
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub num_classes: usize,
    /// Learn one firing threshold per spiking layer.
    #[serde(default)]
    pub trainable_threshold: bool,
    pub input: InputShape,
    pub lif: LifParams,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn spiking_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind.is_spiking())
    }

    /// Output `[c, h, w]` of every layer (`[classes, 1, 1]` for the head),
    /// checked against the declared geometry.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = [self.input.channels, self.input.height, self.input.width];
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            l.check_geometry()?;
            cur = layer_output(l, cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Checks shapes and the structural rules of the window schedule.
    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        self.surrogate.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Spec("at least two classes are needed".into()));
        }
        self.shapes()?;
        let Some(head) = self.layers.last() else {
            return Err(Error::Spec("network has no layers".into()));
        };
        if head.kind != LayerKind::ClassifierHead {
            return Err(Error::Spec("last layer must be the classifier head".into()));
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| !l.kind.is_spiking())
        {
            return Err(Error::Spec("classifier head must be the last layer".into()));
        }
        let spiking: Vec<&LayerSpec> = self.spiking_layers().collect();
        if let Some(last) = spiking.last() {
            if last.window.mode == WindowMode::Dilated {
                return Err(Error::Spec(
                    "last block must use non-dilated windows".into(),
                ));
            }
        }
        for pair in spiking.windows(2) {
            if pair[0].window.mode == WindowMode::Dilated
                && !matches!(
                    pair[1].kind,
                    LayerKind::SpikingFc | LayerKind::SpikingRecurrent
                )
            {
                return Err(Error::Spec(format!(
                    "dilated layer {} is not followed by a mixing layer",
                    pair[0].name
                )));
            }
        }
        for l in &self.layers {
            l.fusion.validate()?;
        }
        Ok(())
    }

    /// Window modes of the scheduled (non-auxiliary) spiking layers that
    /// take part in the alternation, in order.
    pub fn schedule(&self) -> Vec<WindowMode> {
        self.spiking_layers()
            .filter(|l| !l.auxiliary && l.kind != LayerKind::PatchMergeDownsample)
            .map(|l| l.window.mode)
            .collect()
    }
}

fn layer_output(l: &LayerSpec, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
    let mismatch = |what: &str| {
        Err(Error::Dimension(format!(
            "layer {}: {what} does not match input {c}x{h}x{w}",
            l.name
        )))
    };
    let out = match l.geometry {
        Geometry::Conv {
            k_w,
            k_h,
            c_in,
            c_out,
            h_out,
            w_out,
            stride,
            padding,
        } => {
            if c_in != c {
                return mismatch("c_in");
            }
            if stride == 0 || h + 2 * padding < k_h || w + 2 * padding < k_w {
                return mismatch("kernel");
            }
            let ho = (h + 2 * padding - k_h) / stride + 1;
            let wo = (w + 2 * padding - k_w) / stride + 1;
            if (ho, wo) != (h_out, w_out) {
                return mismatch("h_out/w_out");
            }
            [c_out, ho, wo]
        }
        Geometry::Features {
            f_in,
            f_out,
            repeats,
        } => {
            if l.kind == LayerKind::ClassifierHead {
                if f_in != c || repeats != 1 {
                    return mismatch("f_in");
                }
                [f_out, 1, 1]
            } else {
                if f_in != h * w || f_out != h * w || repeats != c {
                    return mismatch("token widths");
                }
                [c, h, w]
            }
        }
        Geometry::Recurrent {
            c_in,
            c_out,
            tokens,
            ..
        } => {
            if c_in != c || tokens != h * w {
                return mismatch("c_in/tokens");
            }
            [c_out, h, w]
        }
    };
    if l.kind.is_spiking() {
        l.window.validate_for(out[1], out[2])?;
    }
    if l.residual && out != [c, h, w] {
        return mismatch("residual shortcut");
    }
    Ok(out)
}

/// Options of the convolutional builder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnnOptions {
    pub scale: usize,
    pub num_classes: usize,
    pub input: InputShape,
    /// Repeats of the third stage block (3 in the full pattern).
    pub stage3_repeats: usize,
    /// Groups used by non-dilated windows.
    pub groups: usize,
    pub fusion: FusionConfig,
    /// When false every layer uses non-dilated windows.
    pub dilated: bool,
    /// One conv and mixer block per stage instead of the full pattern.
    pub compact: bool,
}

impl CnnOptions {
    pub fn new(scale: usize, num_classes: usize) -> Self {
        Self {
            scale,
            num_classes,
            input: InputShape {
                channels: 1,
                height: 16,
                width: 16,
            },
            stage3_repeats: 3,
            groups: 4,
            fusion: FusionConfig::default(),
            dilated: true,
            compact: false,
        }
    }
}

/// Options of the recurrent-cell builder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnnOptions {
    pub cnn: CnnOptions,
    pub cell: CellKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Entry {
    Conv { c: usize, k: usize },
    Fc,
    Mlp,
    Merge,
}

impl Entry {
    fn mixes(&self) -> bool {
        matches!(self, Entry::Fc | Entry::Mlp)
    }
}

fn base_channels(scale: usize) -> Result<usize> {
    if scale == 0 || 48 / scale == 0 {
        return Err(Error::Config(format!(
            "scale {scale} leaves fewer than one channel"
        )));
    }
    Ok(48 / scale)
}

/// `c, X, c, PM, 2c, X, 2c, PM, (4c, X)×r, 8c, X, 8c` where `X` is the
/// mixing entry.
fn pattern(base: usize, k_rest: usize, mix: Entry, repeats: usize) -> Vec<Entry> {
    let conv = |c, k| Entry::Conv { c, k };
    let mut e = vec![conv(base, 3), mix, conv(base, k_rest), Entry::Merge];
    e.extend([
        conv(2 * base, k_rest),
        mix,
        conv(2 * base, k_rest),
        Entry::Merge,
    ]);
    for _ in 0..repeats {
        e.extend([conv(4 * base, k_rest), mix]);
    }
    e.extend([conv(8 * base, k_rest), mix, conv(8 * base, k_rest)]);
    e
}

/// `c, X, PM, 2c, X, PM, 4c, X, 8c, X`: four blocks.
fn compact_pattern(base: usize, k_rest: usize, mix: Entry) -> Vec<Entry> {
    let conv = |c, k| Entry::Conv { c, k };
    vec![
        conv(base, 3),
        mix,
        Entry::Merge,
        conv(2 * base, k_rest),
        mix,
        Entry::Merge,
        conv(4 * base, k_rest),
        mix,
        conv(8 * base, k_rest),
        mix,
    ]
}

fn entries(opts: &CnnOptions, k_rest: usize, mix: Entry) -> Result<Vec<Entry>> {
    let base = base_channels(opts.scale)?;
    Ok(if opts.compact {
        compact_pattern(base, k_rest, mix)
    } else {
        pattern(base, k_rest, mix, opts.stage3_repeats)
    })
}

fn assemble(
    name: &str,
    entries: &[Entry],
    opts: &CnnOptions,
    cell: CellKind,
) -> Result<NetworkSpec> {
    if opts.num_classes < 2 {
        return Err(Error::Config("at least two classes are needed".into()));
    }
    let units = entries
        .iter()
        .filter(|e| !matches!(e, Entry::Merge))
        .count();
    let mut layers = Vec::new();
    let [mut c, mut h, mut w] = [opts.input.channels, opts.input.height, opts.input.width];
    let mut unit = 0;
    let nd = WindowConfig::non_dilated(opts.groups);
    for (i, entry) in entries.iter().enumerate() {
        let idx = layers.len();
        let mut push = |kind, geometry, window, residual, auxiliary, tag: &str| {
            layers.push(LayerSpec {
                name: format!("l{idx:02}_{tag}"),
                kind,
                residual,
                auxiliary,
                geometry,
                window,
                fusion: opts.fusion,
            });
        };
        let dilated =
            opts.dilated && unit % 2 == 0 && unit + 1 < units && !matches!(entry, Entry::Merge);
        let window = if dilated { WindowConfig::dilated() } else { nd };
        match *entry {
            Entry::Conv { c: c_out, k } => {
                let geometry = Geometry::Conv {
                    k_w: k,
                    k_h: k,
                    c_in: c,
                    c_out,
                    h_out: h,
                    w_out: w,
                    stride: 1,
                    padding: k / 2,
                };
                push(
                    LayerKind::SpikingConv,
                    geometry,
                    window,
                    c == c_out,
                    false,
                    "conv",
                );
                c = c_out;
            }
            Entry::Fc => {
                let geometry = Geometry::Features {
                    f_in: h * w,
                    f_out: h * w,
                    repeats: c,
                };
                push(LayerKind::SpikingFc, geometry, window, true, false, "fc");
            }
            Entry::Mlp => {
                let geometry = Geometry::Recurrent {
                    cell,
                    c_in: c,
                    c_out: c,
                    tokens: h * w,
                };
                push(
                    LayerKind::SpikingRecurrent,
                    geometry,
                    window,
                    true,
                    false,
                    "cell",
                );
            }
            Entry::Merge => {
                let geometry = Geometry::Conv {
                    k_w: 2,
                    k_h: 2,
                    c_in: c,
                    c_out: 2 * c,
                    h_out: h / 2,
                    w_out: w / 2,
                    stride: 2,
                    padding: 0,
                };
                push(
                    LayerKind::PatchMergeDownsample,
                    geometry,
                    WindowConfig::non_dilated(1),
                    false,
                    false,
                    "merge",
                );
                c *= 2;
                h /= 2;
                w /= 2;
            }
        }
        if !matches!(entry, Entry::Merge) {
            unit += 1;
        }
        let next_mixes = entries.get(i + 1).is_some_and(Entry::mixes);
        if dilated && !next_mixes {
            let idx = layers.len();
            layers.push(LayerSpec {
                name: format!("l{idx:02}_mix"),
                kind: LayerKind::SpikingFc,
                residual: true,
                auxiliary: true,
                geometry: Geometry::Features {
                    f_in: h * w,
                    f_out: h * w,
                    repeats: c,
                },
                window: nd,
                fusion: opts.fusion,
            });
        }
    }
    let idx = layers.len();
    layers.push(LayerSpec {
        name: format!("l{idx:02}_head"),
        kind: LayerKind::ClassifierHead,
        residual: false,
        auxiliary: false,
        geometry: Geometry::Features {
            f_in: c,
            f_out: opts.num_classes,
            repeats: 1,
        },
        window: WindowConfig::non_dilated(1),
        fusion: opts.fusion,
    });
    let spec = NetworkSpec {
        name: name.into(),
        num_classes: opts.num_classes,
        trainable_threshold: false,
        input: opts.input,
        lif: LifParams::default(),
        surrogate: SurrogateSpec::default(),
        layers,
    };
    spec.validate().map_err(|e| match e {
        Error::Dimension(m) | Error::Spec(m) => Error::Config(m),
        other => other,
    })?;
    Ok(spec)
}

pub fn build_cnn(opts: &CnnOptions) -> Result<NetworkSpec> {
    let entries = entries(opts, 3, Entry::Fc)?;
    assemble("mini_cnn", &entries, opts, CellKind::default())
}

/// Convolutional network with channel ladder `48/scale · {1, 2, 4, 8}` on a
/// 1×16×16 input.
pub fn build_mini_cnn(scale: usize, num_classes: usize) -> Result<NetworkSpec> {
    build_cnn(&CnnOptions::new(scale, num_classes))
}

pub fn build_rnn(opts: &RnnOptions) -> Result<NetworkSpec> {
    let entries = entries(&opts.cnn, 1, Entry::Mlp)?;
    assemble("mini_rnn", &entries, &opts.cnn, opts.cell)
}

/// Recurrent-cell network: a 3×3 patch embedding followed by 1×1 spiking
/// projections and residual recurrent mixing blocks.
pub fn build_mini_rnn(scale: usize, num_classes: usize, cell: CellKind) -> Result<NetworkSpec> {
    build_rnn(&RnnOptions {
        cnn: CnnOptions::new(scale, num_classes),
        cell,
    })
}

/// Trainable tensors keyed by `"<layer>.<name>"`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    pub tensors: BTreeMap<String, Tensor>,
}

/// `(name, shape, fan_in, residual)`; `fan_in` is 0 for biases and
/// `usize::MAX` for thresholds.
fn param_shapes(net: &NetworkSpec) -> Vec<(String, Vec<usize>, usize, bool)> {
    let mut all = Vec::new();
    for l in &net.layers {
        let mut out = Vec::new();
        let n = &l.name;
        match l.geometry {
            Geometry::Conv {
                k_w,
                k_h,
                c_in,
                c_out,
                ..
            } => {
                out.push((
                    format!("{n}.weight"),
                    vec![c_out, c_in, k_h, k_w],
                    c_in * k_h * k_w,
                ));
                out.push((format!("{n}.bias"), vec![c_out], 0));
            }
            Geometry::Features { f_in, f_out, .. } => {
                out.push((format!("{n}.weight"), vec![f_in, f_out], f_in));
                out.push((format!("{n}.bias"), vec![f_out], 0));
            }
            Geometry::Recurrent {
                cell, c_in, c_out, ..
            } => {
                for g in cell.gate_names() {
                    out.push((format!("{n}.weight_x_{g}"), vec![c_out, c_in, 1, 1], c_in));
                    out.push((format!("{n}.weight_h_{g}"), vec![c_out, c_out, 1, 1], c_out));
                    out.push((format!("{n}.bias_{g}"), vec![c_out], 0));
                }
            }
        }
        if net.trainable_threshold && l.kind.is_spiking() {
            out.push((format!("{n}.delta"), vec![1], usize::MAX));
        }
        all.extend(out.into_iter().map(|(n, s, f)| (n, s, f, l.residual)));
    }
    all
}

impl ParameterSet {
    /// Fan-in scaled uniform weights `U(-g/√fan_in, g/√fan_in)`, zero
    /// biases, thresholds at the configured δ.
    pub fn init(net: &NetworkSpec, seed: u64, gain: f64) -> Result<Self> {
        Self::init_scaled(net, seed, gain, gain)
    }

    /// As [`ParameterSet::init`], with `residual_gain` used for the weights
    /// of shortcut layers instead of `gain`.
    pub fn init_scaled(
        net: &NetworkSpec,
        seed: u64,
        gain: f64,
        residual_gain: f64,
    ) -> Result<Self> {
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in, residual) in param_shapes(net) {
            let t = match fan_in {
                0 => Tensor::zeros(&shape),
                usize::MAX => Tensor::full(&shape, net.lif.delta),
                f => {
                    let g = if residual { residual_gain } else { gain };
                    let bound = g / (f as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..=bound))
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// All-zero parameters (thresholds still at δ).
    pub fn zeros(net: &NetworkSpec) -> Result<Self> {
        net.validate()?;
        let tensors = param_shapes(net)
            .into_iter()
            .map(|(name, shape, fan_in, _)| {
                let t = if fan_in == usize::MAX {
                    Tensor::full(&shape, net.lif.delta)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// True for weight tensors (the ones weight decay applies to).
    pub fn is_weight(name: &str) -> bool {
        name.rsplit('.')
            .next()
            .is_some_and(|s| s.starts_with("weight"))
    }

    /// Checks names, shapes and finiteness against `net`.
    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        let expected = param_shapes(net);
        if expected.len() != self.tensors.len() {
            return Err(Error::Spec(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _, _) in expected {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Spec(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::State(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Records every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Spike map of every spiking layer.
    pub spikes: Vec<Var>,
    pub trace: SpikeTrace,
}

struct LayerOp<'a> {
    spec: &'a LayerSpec,
    params: &'a BTreeMap<String, Var>,
    out: [usize; 3],
}

impl LayerOp<'_> {
    fn p(&self, key: &str) -> Result<Var> {
        let name = format!("{}.{key}", self.spec.name);
        self.params
            .get(&name)
            .copied()
            .ok_or_else(|| Error::Spec(format!("missing parameter {name}")))
    }

    fn full_current(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cur = match self.spec.geometry {
            Geometry::Conv {
                stride, padding, ..
            } => {
                let y = tape.conv2d(x, self.p("weight")?, stride, padding)?;
                tape.add_channel_bias(y, self.p("bias")?)?
            }
            Geometry::Features { f_in, .. } => {
                let (b, c, h, w) = tape.value(x).dims4()?;
                let flat = tape.reshape(x, &[b * c, f_in])?;
                let y = tape.matmul(flat, self.p("weight")?)?;
                let y = tape.add_row_bias(y, self.p("bias")?)?;
                tape.reshape(y, &[b, c, h, w])?
            }
            Geometry::Recurrent { .. } => unreachable!("recurrent currents are per window"),
        };
        if self.spec.residual {
            tape.add(cur, x)
        } else {
            Ok(cur)
        }
    }

    fn gate(&self, tape: &mut Tape, x: Var, h: Var, g: &str) -> Result<Var> {
        let a = tape.conv2d(x, self.p(&format!("weight_x_{g}"))?, 1, 0)?;
        let b = tape.conv2d(h, self.p(&format!("weight_h_{g}"))?, 1, 0)?;
        let s = tape.add(a, b)?;
        tape.add_channel_bias(s, self.p(&format!("bias_{g}"))?)
    }

    fn recurrent_currents(&self, tape: &mut Tape, cell: CellKind, xs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = xs.first() else {
            return Ok(Vec::new());
        };
        let (b, _, wh, ww) = tape.value(first).dims4()?;
        let zeros = tape.constant(Tensor::zeros(&[b, self.out[0], wh, ww]));
        let mut hs = Vec::with_capacity(xs.len());
        match cell {
            CellKind::Lstm => {
                let (mut h, mut c) = (zeros, zeros);
                for &x in xs {
                    let i = self.gate(tape, x, h, "i")?;
                    let i = tape.sigmoid(i);
                    let f = self.gate(tape, x, h, "f")?;
                    let f = tape.sigmoid(f);
                    let g = self.gate(tape, x, h, "g")?;
                    let g = tape.tanh(g);
                    let o = self.gate(tape, x, h, "o")?;
                    let o = tape.sigmoid(o);
                    let fc = tape.mul(f, c)?;
                    let ig = tape.mul(i, g)?;
                    c = tape.add(fc, ig)?;
                    let tc = tape.tanh(c);
                    h = tape.mul(o, tc)?;
                    hs.push(h);
                }
            }
            CellKind::Gru => {
                let ones = tape.constant(Tensor::full(&[b, self.out[0], wh, ww], 1.0));
                let mut h = zeros;
                for &x in xs {
                    let z = self.gate(tape, x, h, "z")?;
                    let z = tape.sigmoid(z);
                    let r = self.gate(tape, x, h, "r")?;
                    let r = tape.sigmoid(r);
                    let rh = tape.mul(r, h)?;
                    let n = self.gate(tape, x, rh, "n")?;
                    let n = tape.tanh(n);
                    let keep = tape.sub(ones, z)?;
                    let a = tape.mul(keep, n)?;
                    let zh = tape.mul(z, h)?;
                    h = tape.add(a, zh)?;
                    hs.push(h);
                }
            }
            CellKind::Rnn => {
                let mut h = zeros;
                for &x in xs {
                    let a = self.gate(tape, x, h, "h")?;
                    h = tape.tanh(a);
                    hs.push(h);
                }
            }
            CellKind::BiRnn => {
                let mut h = zeros;
                for &x in xs {
                    let a = self.gate(tape, x, h, "fwd")?;
                    h = tape.tanh(a);
                    hs.push(h);
                }
                let mut h = zeros;
                for (k, &x) in xs.iter().enumerate().rev() {
                    let a = self.gate(tape, x, h, "bwd")?;
                    h = tape.tanh(a);
                    hs[k] = tape.add(hs[k], h)?;
                }
            }
        }
        Ok(hs)
    }
}

impl SpikingLayer for LayerOp<'_> {
    fn output_dims(&self, _input_shape: &[usize]) -> Result<(usize, usize, usize)> {
        Ok((self.out[0], self.out[1], self.out[2]))
    }

    fn currents(&self, tape: &mut Tape, x: Var, layout: &WindowLayout) -> Result<Vec<Var>> {
        match self.spec.geometry {
            Geometry::Recurrent { cell, .. } => {
                let xs = layout.split(tape, x)?;
                let hs = self.recurrent_currents(tape, cell, &xs)?;
                if self.spec.residual {
                    hs.into_iter()
                        .zip(xs)
                        .map(|(h, x)| tape.add(h, x))
                        .collect()
                } else {
                    Ok(hs)
                }
            }
            _ => {
                let full = self.full_current(tape, x)?;
                layout.split(tape, full)
            }
        }
    }
}

/// Runs `net` on `x` (shape `[b, c, h, w]`), recording every operation on
/// `tape`. `dropout_mask`, when given, multiplies the pooled features fed
/// to the classifier head.
pub fn forward_on_tape(
    tape: &mut Tape,
    net: &NetworkSpec,
    params: &BTreeMap<String, Var>,
    x: Var,
    store: &mut MembraneStore,
    dropout_mask: Option<&Tensor>,
) -> Result<ForwardPass> {
    let shapes = net.shapes()?;
    let (b, c, h, w) = tape.value(x).dims4()?;
    let inp = net.input;
    if (c, h, w) != (inp.channels, inp.height, inp.width) {
        return dim_err(format!(
            "input is {c}x{h}x{w}, network expects {}x{}x{}",
            inp.channels, inp.height, inp.width
        ));
    }
    let mut trace = SpikeTrace::new(1);
    trace.images = b;
    let mut spikes = Vec::new();
    let mut cur = x;
    for (spiking_index, (layer, out)) in net.layers.iter().zip(&shapes).enumerate() {
        let op = LayerOp {
            spec: layer,
            params,
            out: *out,
        };
        if layer.kind == LayerKind::ClassifierHead {
            let mut pooled = tape.mean_spatial(cur)?;
            if let Some(mask) = dropout_mask {
                if tape.shape(pooled) != mask.shape() {
                    return dim_err(format!(
                        "dropout mask {:?} does not match features {:?}",
                        mask.shape(),
                        tape.shape(pooled)
                    ));
                }
                let m = tape.constant(mask.clone());
                pooled = tape.mul(pooled, m)?;
            }
            let y = tape.matmul(pooled, op.p("weight")?)?;
            let logits = tape.add_row_bias(y, op.p("bias")?)?;
            trace.record(&layer.name, (b * out[0]) as u64, 0);
            return Ok(ForwardPass {
                logits,
                spikes,
                trace,
            });
        }
        let threshold = if net.trainable_threshold {
            Threshold::Learned(op.p("delta")?)
        } else {
            Threshold::Fixed(net.lif.delta)
        };
        let dynamics = Dynamics {
            lif: net.lif,
            surrogate: net.surrogate,
            threshold,
        };
        let s = propagate_groups(
            tape,
            &op,
            cur,
            store,
            spiking_index,
            &layer.window,
            &layer.fusion,
            &dynamics,
        )?;
        let v = tape.value(s);
        let events = v.data().iter().filter(|&&o| o != 0.0).count() as u64;
        trace.record(&layer.name, v.len() as u64, events);
        spikes.push(s);
        cur = s;
    }
    Err(Error::Spec("network has no classifier head".into()))
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    pub trace: SpikeTrace,
}

/// Inference forward pass on plain tensors.
pub fn forward(
    net: &NetworkSpec,
    params: &ParameterSet,
    batch: &Tensor,
    store: &mut MembraneStore,
) -> Result<Forward> {
    params.validate(net)?;
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = params
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
        .collect();
    let x = tape.constant(batch.clone());
    let pass = forward_on_tape(&mut tape, net, &vars, x, store, None)?;
    // Store handles refer to this tape, which is dropped here.
    store.reset();
    Ok(Forward {
        logits: tape.value(pass.logits).clone(),
        trace: pass.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_ladder() {
        let net = build_mini_cnn(1, 10).unwrap();
        let convs: Vec<usize> = net
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::SpikingConv)
            .map(|l| match l.geometry {
                Geometry::Conv { c_out, .. } => c_out,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(convs, vec![48, 48, 96, 96, 192, 192, 192, 384, 384]);
        let small = build_mini_cnn(8, 2).unwrap();
        let widths: Vec<usize> = small
            .layers
            .iter()
            .filter_map(|l| match l.geometry {
                Geometry::Conv { c_out, .. } if l.kind == LayerKind::SpikingConv => Some(c_out),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![6, 6, 12, 12, 24, 24, 24, 48, 48]);
    }

    #[test]
    fn compact_has_four_blocks() {
        let mut o = CnnOptions::new(8, 2);
        o.compact = true;
        let net = build_cnn(&o).unwrap();
        let kinds: Vec<&str> = net.layers.iter().map(|l| l.kind.as_str()).collect();
        assert_eq!(
            net.layers
                .iter()
                .filter(|l| l.kind == LayerKind::SpikingConv)
                .count(),
            4
        );
        assert_eq!(
            net.layers
                .iter()
                .filter(|l| l.kind == LayerKind::SpikingFc)
                .count(),
            4
        );
        assert_eq!(kinds.last(), Some(&LayerKind::ClassifierHead.as_str()));
        assert_eq!(net.shapes().unwrap().last().unwrap()[0], 2);
        let last = &net.layers[net.layers.len() - 2];
        assert_eq!(last.window.mode, WindowMode::NonDilated);
    }

    #[test]
    fn scale_too_large() {
        assert!(matches!(build_mini_cnn(49, 2), Err(Error::Config(_))));
        assert!(matches!(build_mini_cnn(0, 2), Err(Error::Config(_))));
    }

    #[test]
    fn builder_is_deterministic() {
        assert_eq!(build_mini_cnn(8, 2).unwrap(), build_mini_cnn(8, 2).unwrap());
    }

    #[test]
    fn schedule_alternates_and_ends_non_dilated() {
        let net = build_mini_cnn(8, 2).unwrap();
        let s = net.schedule();
        let n = s.len();
        for (i, m) in s.iter().enumerate() {
            let expect = if i % 2 == 0 && i + 1 < n {
                WindowMode::Dilated
            } else {
                WindowMode::NonDilated
            };
            assert_eq!(*m, expect, "unit {i}");
        }
    }

    #[test]
    fn rnn_cells_only_change_recurrence() {
        let a = build_mini_rnn(8, 2, CellKind::Lstm).unwrap();
        let b = build_mini_rnn(8, 2, CellKind::Rnn).unwrap();
        assert_eq!(a.shapes().unwrap(), b.shapes().unwrap());
        for (x, y) in a.layers.iter().zip(&b.layers) {
            if x.kind != LayerKind::SpikingRecurrent {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn toml_round_trip() {
        let net = build_mini_rnn(8, 3, CellKind::Gru).unwrap();
        let text = net.to_toml().unwrap();
        assert_eq!(NetworkSpec::from_toml(&text).unwrap(), net);
    }

    #[test]
    fn weight_names() {
        assert!(ParameterSet::is_weight("l00_conv.weight"));
        assert!(ParameterSet::is_weight("l03_cell.weight_x_i"));
        assert!(!ParameterSet::is_weight("l00_conv.bias"));
        assert!(!ParameterSet::is_weight("l03_cell.delta"));
    }
}
