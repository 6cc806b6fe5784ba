//! Iterative leaky integrate-and-fire neurons.
//!
//! Discrete update with soft reset:
//!
//! ```text
//! v[n] = α·v[n-1] + I[n] - δ·o[n-1]
//! o[n] = 1 if v[n] > δ else 0
//! ```
//!
//! The fused variant replaces `v[n-1]` with the projection of two membrane
//! directions (previous group, previous layer), see [`crate::fusion`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::grad::{SurrogateSpec, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Subtract δ after a spike.
    #[default]
    Soft,
    /// Zero the carried membrane after a spike (ablation only).
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    /// Synaptic decay rate of the continuous model. Informational only.
    pub tau_syn: f64,
    /// Membrane decay rate of the continuous model. Informational only.
    pub tau_mem: f64,
    /// Discrete leak applied to the carried membrane.
    pub alpha: f64,
    /// Firing threshold δ.
    pub delta: f64,
    #[serde(default)]
    pub reset: ResetMode,
    /// Treat the reset term as a constant in the backward pass.
    #[serde(default = "default_true")]
    pub detach_reset: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_syn: 0.0,
            tau_mem: 0.0,
            alpha: 1.0,
            delta: 0.5,
            reset: ResetMode::Soft,
            detach_reset: true,
        }
    }
}

impl LifParams {
    pub fn with_alpha_delta(alpha: f64, delta: f64) -> Self {
        Self {
            alpha,
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.tau_syn < 0.0 || self.tau_mem < 0.0 {
            return Err(Error::Config("decay rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Membrane potential and last spike output of a neuron population.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub v: Tensor,
    pub o_prev: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            v: Tensor::zeros(shape),
            o_prev: Tensor::zeros(shape),
        }
    }
}

/// Firing threshold as recorded on a tape: fixed, or a trainable scalar node.
#[derive(Debug, Clone, Copy)]
pub enum Threshold {
    Fixed(f64),
    Learned(Var),
}

impl Threshold {
    pub fn value(&self, tape: &Tape) -> f64 {
        match *self {
            Threshold::Fixed(d) => d,
            Threshold::Learned(v) => tape.value(v).data()[0],
        }
    }
}

/// Records `v' = α·carried + I - δ·o_prev` and its spikes on `tape`.
///
/// `carried` is the previous membrane (plain LIF) or the fused projection
/// (multi-direction LIF). Returns `(v', spikes)`.
pub fn record_update(
    tape: &mut Tape,
    carried: Var,
    input: Var,
    o_prev: Var,
    params: &LifParams,
    threshold: Threshold,
    surrogate: SurrogateSpec,
) -> Result<(Var, Var)> {
    let shape = tape.shape(input).to_vec();
    for (name, v) in [("membrane", carried), ("previous spikes", o_prev)] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "{name} shape {:?} differs from input current {shape:?}",
                tape.shape(v)
            )));
        }
    }
    let o_prev = if params.detach_reset {
        tape.detach(o_prev)
    } else {
        o_prev
    };
    let leaked = tape.scale(carried, params.alpha);
    let v = match params.reset {
        ResetMode::Soft => {
            let driven = tape.add(leaked, input)?;
            let reset = match threshold {
                Threshold::Fixed(d) => tape.scale(o_prev, d),
                Threshold::Learned(t) => tape.scale_by(o_prev, t)?,
            };
            tape.sub(driven, reset)?
        }
        ResetMode::Hard => {
            let keep = tape.value(o_prev).map(|o| 1.0 - o);
            let keep = tape.constant(keep);
            let kept = tape.mul(leaked, keep)?;
            tape.add(kept, input)?
        }
    };
    if !tape.value(v).is_finite() {
        return Err(Error::State("membrane potential became non-finite".into()));
    }
    let spikes = match threshold {
        Threshold::Fixed(d) => tape.spike(v, d, surrogate)?,
        Threshold::Learned(t) => tape.spike_with_threshold(v, t, surrogate)?,
    };
    Ok((v, spikes))
}

/// One discrete LIF step.
pub fn lif_step(
    state: &LifState,
    input_current: &Tensor,
    params: &LifParams,
    surrogate: &SurrogateSpec,
) -> Result<(LifState, Tensor)> {
    params.validate()?;
    let mut tape = Tape::new();
    let v = tape.constant(state.v.clone());
    let o = tape.constant(state.o_prev.clone());
    let i = tape.constant(input_current.clone());
    let (v2, s) = record_update(
        &mut tape,
        v,
        i,
        o,
        params,
        Threshold::Fixed(params.delta),
        *surrogate,
    )?;
    let spikes = tape.value(s).clone();
    Ok((
        LifState {
            v: tape.value(v2).clone(),
            o_prev: spikes.clone(),
        },
        spikes,
    ))
}

/// One LIF step driven by the fusion of the group and layer membranes.
pub fn fused_lif_step(
    m_group: &Tensor,
    m_layer: &Tensor,
    input_current: &Tensor,
    o_prev: &Tensor,
    params: &LifParams,
    fusion: &FusionConfig,
) -> Result<(LifState, Tensor)> {
    params.validate()?;
    fusion.validate()?;
    let mut tape = Tape::new();
    let mg = tape.constant(m_group.clone());
    let ml = tape.constant(m_layer.clone());
    let i = tape.constant(input_current.clone());
    let o = tape.constant(o_prev.clone());
    let fused = fusion.fuse(&mut tape, mg, ml)?;
    let (v2, s) = record_update(
        &mut tape,
        fused,
        i,
        o,
        params,
        Threshold::Fixed(params.delta),
        SurrogateSpec::default(),
    )?;
    let spikes = tape.value(s).clone();
    Ok((
        LifState {
            v: tape.value(v2).clone(),
            o_prev: spikes.clone(),
        },
        spikes,
    ))
}
