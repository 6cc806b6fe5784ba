//! Surrogate-gradient training and evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::SpikeTrace;
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::net::{forward_on_tape, NetworkSpec, ParameterSet};
use crate::tensor::Tensor;
use crate::window::MembraneStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub grad_clip_norm: f64,
    pub batch: usize,
    pub seed: u64,
    /// Scale of the fan-in uniform initialisation. Layers without a
    /// shortcut need more than 1 to keep spikes alive through depth.
    pub init_gain: f64,
    /// Initialisation scale for layers with a shortcut.
    pub residual_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.05,
            warmup_lr: 0.001,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 2e-5,
            dropout_p: 0.1,
            grad_clip_norm: 20.0,
            batch: 16,
            seed: 0,
            init_gain: 1.5,
            residual_gain: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr", self.lr),
            ("warmup_lr", self.warmup_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
            ("init_gain", self.init_gain),
            ("residual_gain", self.residual_gain),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate of `epoch` (0-based): linear warmup from `warmup_lr`,
    /// then cosine decay to zero. Warmup is skipped when `lr <= warmup_lr`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let warm = if self.lr > self.warmup_lr {
            self.warmup_epochs
        } else {
            0
        };
        if epoch < warm {
            return self.warmup_lr + (self.lr - self.warmup_lr) * epoch as f64 / warm as f64;
        }
        let span = self.epochs.saturating_sub(warm).max(1) as f64;
        let t = (epoch - warm) as f64 / span;
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }
}

/// SGD with momentum (`v ← μv + g`, `w ← w - lr·v`) and decoupled weight
/// decay on weight tensors only (`w ← w - lr·wd·w`).
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, w) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            w.expect_same_shape(g)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            *v = v.zip_map(g, |v, g| self.momentum * v + g)?;
            let decay = if ParameterSet::is_weight(name) {
                lr * self.weight_decay
            } else {
                0.0
            };
            *w = w.zip_map(v, |w, v| w - lr * v - decay * w)?;
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub mean_spike_rate: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,loss,top1,mean_spike_rate";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.6}\n",
            r.epoch, r.loss, r.top1, r.mean_spike_rate
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub history: Vec<EpochRecord>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn check_dataset(net: &NetworkSpec, ds: &Dataset) -> Result<()> {
    let i = net.input;
    if (ds.channels, ds.height, ds.width) != (i.channels, i.height, i.width) {
        return Err(Error::Dimension(format!(
            "dataset images are {}x{}x{}, network expects {}x{}x{}",
            ds.channels, ds.height, ds.width, i.channels, i.height, i.width
        )));
    }
    if ds.num_classes > net.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network {}",
            ds.num_classes, net.num_classes
        )));
    }
    Ok(())
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
pub fn train(net: &NetworkSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = ParameterSet::init_scaled(net, cfg.seed, cfg.init_gain, cfg.residual_gain)?;
    train_from(net, params, dataset, cfg)
}

/// Trains starting from `params`.
pub fn train_from(
    net: &NetworkSpec,
    mut params: ParameterSet,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    params.validate(net)?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_dataset(net, dataset)?;
    // Separate stream from initialisation so both depend on the seed alone.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut trace = SpikeTrace::new(1);
        for chunk in order.chunks(cfg.batch) {
            let (x, labels) = dataset.batch(chunk)?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let xv = tape.constant(x);
            let mask = if cfg.dropout_p > 0.0 {
                let features = net.layers.last().map_or(0, |l| match l.geometry {
                    crate::net::Geometry::Features { f_in, .. } => f_in,
                    _ => 0,
                });
                let keep = 1.0 / (1.0 - cfg.dropout_p);
                Some(Tensor::from_fn(&[chunk.len(), features], |_| {
                    if rng.gen::<f64>() < cfg.dropout_p {
                        0.0
                    } else {
                        keep
                    }
                }))
            } else {
                None
            };
            let mut store = MembraneStore::new();
            let pass = forward_on_tape(&mut tape, net, &vars, xv, &mut store, mask.as_ref())?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss became {lv}"),
                });
            }
            loss_sum += lv * chunk.len() as f64;
            correct += count_correct(tape.value(pass.logits), &labels);
            trace.merge(&pass.trace)?;
            let grads = tape.backward(loss);
            let mut g: BTreeMap<String, Tensor> = vars
                .iter()
                .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, tape.shape(v))))
                .collect();
            let norm = clip_global_norm(&mut g, cfg.grad_clip_norm);
            if !norm.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "gradient norm is not finite".into(),
                });
            }
            sgd.step(&mut params, &g, lr)?;
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            top1: correct as f64 / dataset.len() as f64,
            mean_spike_rate: trace.mean_rate(),
        });
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub loss: f64,
    pub spikes_per_image: f64,
    pub per_layer_rates: Vec<(String, f64)>,
    pub trace: SpikeTrace,
}

/// Accuracy, loss and spike statistics of `params` on `dataset`.
pub fn evaluate(
    net: &NetworkSpec,
    params: &ParameterSet,
    dataset: &Dataset,
    batch: usize,
) -> Result<Metrics> {
    params.validate(net)?;
    check_dataset(net, dataset)?;
    let batch = batch.max(1);
    let mut trace = SpikeTrace::new(1);
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, labels) = dataset.batch(chunk)?;
        let mut tape = Tape::new();
        let vars: BTreeMap<_, _> = params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let xv = tape.constant(x);
        let mut store = MembraneStore::new();
        let pass = forward_on_tape(&mut tape, net, &vars, xv, &mut store, None)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
        correct += count_correct(tape.value(pass.logits), &labels);
        trace.merge(&pass.trace)?;
    }
    let n = dataset.len().max(1) as f64;
    Ok(Metrics {
        top1: correct as f64 / n,
        loss: loss_sum / n,
        spikes_per_image: trace.spikes_per_image(),
        per_layer_rates: trace.rates(),
        trace,
    })
}
