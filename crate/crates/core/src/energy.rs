//! Spike rates, operation counts and energy estimates.
//!
//! Costs follow 45 nm figures: an accumulate is 0.9 pJ and a
//! multiply-accumulate 4.6 pJ. A spiking layer performs `rate × OP_ANN`
//! accumulates. The first layer (real-valued input) and the classifier head
//! keep their multiplications and are charged as full MACs, i.e. one add
//! plus one mult each.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Geometry, LayerKind, LayerSpec, NetworkSpec};

pub const E_ADD_PJ: f64 = 0.9;
pub const E_MAC_PJ: f64 = 4.6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub name: String,
    /// Neurons observed, summed over every image seen.
    pub neurons: u64,
    /// Non-zero outputs, summed over every image and time step.
    pub spikes: u64,
}

/// Per-layer spike counts gathered during forward passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTrace {
    pub time_steps: usize,
    pub images: usize,
    pub layers: Vec<LayerTrace>,
}

impl SpikeTrace {
    pub fn new(time_steps: usize) -> Self {
        Self {
            time_steps,
            images: 0,
            layers: Vec::new(),
        }
    }

    pub fn record(&mut self, name: &str, neurons: u64, spikes: u64) {
        self.layers.push(LayerTrace {
            name: name.into(),
            neurons,
            spikes,
        });
    }

    /// Adds the counts of `other`, which must cover the same layers.
    pub fn merge(&mut self, other: &SpikeTrace) -> Result<()> {
        if self.layers.is_empty() && self.images == 0 {
            *self = other.clone();
            return Ok(());
        }
        if self.time_steps != other.time_steps || self.layers.len() != other.layers.len() {
            return Err(Error::State("merging traces of different networks".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.name != b.name {
                return Err(Error::State(format!(
                    "trace layer {} vs {}",
                    a.name, b.name
                )));
            }
            a.neurons += b.neurons;
            a.spikes += b.spikes;
        }
        self.images += other.images;
        Ok(())
    }

    pub fn total_spikes(&self) -> u64 {
        self.layers.iter().map(|l| l.spikes).sum()
    }

    pub fn spikes_per_image(&self) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            self.total_spikes() as f64 / self.images as f64
        }
    }

    /// Rate of every layer with at least one neuron.
    pub fn rates(&self) -> Vec<(String, f64)> {
        (0..self.layers.len())
            .filter_map(|i| {
                spike_rate(self, i)
                    .ok()
                    .map(|r| (self.layers[i].name.clone(), r))
            })
            .collect()
    }

    /// Mean of the per-layer rates over layers that produced a rate.
    pub fn mean_rate(&self) -> f64 {
        let r = self.rates();
        if r.is_empty() {
            0.0
        } else {
            r.iter().map(|(_, v)| v).sum::<f64>() / r.len() as f64
        }
    }
}

/// `spikes · T / N` of layer `layer`. May exceed 1.
pub fn spike_rate(trace: &SpikeTrace, layer: usize) -> Result<f64> {
    let l = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::State(format!("trace has no layer {layer}")))?;
    if l.neurons == 0 {
        return Err(Error::Division(format!("layer {} has no neurons", l.name)));
    }
    Ok(l.spikes as f64 * trace.time_steps as f64 / l.neurons as f64)
}

/// Operations of the equivalent non-spiking layer.
pub fn op_count_ann(layer: &LayerSpec) -> Result<u64> {
    layer.check_geometry()?;
    let n = match layer.geometry {
        Geometry::Conv {
            k_w,
            k_h,
            c_in,
            c_out,
            h_out,
            w_out,
            ..
        } => k_w * k_h * c_in * h_out * w_out * c_out,
        Geometry::Features {
            f_in,
            f_out,
            repeats,
        } => f_in * f_out * repeats,
        Geometry::Recurrent {
            cell,
            c_in,
            c_out,
            tokens,
        } => (c_in + c_out) * c_out * cell.gates() * tokens,
    };
    Ok(n as u64)
}

/// `round(rate × op_ann)`.
pub fn scale_ops(op_ann: u64, rate: f64) -> Result<u64> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::Config(format!(
            "spike rate must be non-negative, got {rate}"
        )));
    }
    Ok((rate * op_ann as f64).round() as u64)
}

pub fn op_count_snn(layer: &LayerSpec, rate: f64) -> Result<u64> {
    scale_ops(op_count_ann(layer)?, rate)
}

/// Energy in picojoules.
pub fn energy_pj(adds: f64, mults: f64) -> f64 {
    adds * E_ADD_PJ + mults * E_MAC_PJ
}

/// Energy in joules.
pub fn energy(adds: f64, mults: f64) -> f64 {
    energy_pj(adds, mults) * 1e-12
}

/// The `n` leading significant digits of `value`, rounded.
pub fn leading_digits(value: f64, n: u32) -> u64 {
    if value <= 0.0 || !value.is_finite() || n == 0 {
        return 0;
    }
    let exp = value.log10().floor() as i32 - n as i32 + 1;
    let d = (value / 10f64.powi(exp)).round() as u64;
    // Rounding 9.99.. up gains a digit.
    if d >= 10u64.pow(n) {
        d / 10
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountsEnergy {
    pub adds: f64,
    pub mults: f64,
    pub energy_pj: f64,
    pub energy_joules: f64,
}

/// Energy of raw add/mult counts.
pub fn energy_from_counts(adds: f64, mults: f64) -> Result<CountsEnergy> {
    if !(adds >= 0.0 && mults >= 0.0 && adds.is_finite() && mults.is_finite()) {
        return Err(Error::Config(
            "operation counts must be finite and non-negative".into(),
        ));
    }
    Ok(CountsEnergy {
        adds,
        mults,
        energy_pj: energy_pj(adds, mults),
        energy_joules: energy(adds, mults),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub scnn: u64,
    pub lsnn: u64,
    pub ratio: f64,
}

/// Per-position cost of a convolutional window (`scnn`) against an LSTM
/// window (`lsnn`) for input width `d_x` and hidden width `d_h`.
pub fn window_complexity(d_x: u64, d_h: u64, k_w: u64, k_h: u64) -> Result<Complexity> {
    if d_x == 0 || d_h == 0 || k_w == 0 || k_h == 0 {
        return Err(Error::Config(
            "complexity dimensions must be positive".into(),
        ));
    }
    let scnn = d_x * k_h * k_w * d_h * 2;
    let lsnn = d_x * d_h * 8 + d_h * (d_h * 8 + 20);
    Ok(Complexity {
        scnn,
        lsnn,
        ratio: scnn as f64 / lsnn as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub kind: LayerKind,
    pub neurons: u64,
    pub spikes: u64,
    pub rate: f64,
    pub op_ann: u64,
    pub op_snn: u64,
    pub adds: u64,
    pub mults: u64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub time_steps: usize,
    pub rows: Vec<ReportRow>,
    pub total_adds: u64,
    pub total_mults: u64,
    pub energy_pj: f64,
}

impl EnergyReport {
    pub fn energy_joules(&self) -> f64 {
        self.energy_pj * 1e-12
    }

    pub fn mean_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.rows.iter().map(|r| r.rate).sum::<f64>() / self.rows.len() as f64
        }
    }

    pub const CSV_HEADER: &'static str =
        "layer,kind,N,spikes,rate,op_ann,op_snn,adds,mults,energy_pJ";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{},{},{},{:.3}",
                r.layer,
                r.kind.as_str(),
                r.neurons,
                r.spikes,
                r.rate,
                r.op_ann,
                r.op_snn,
                r.adds,
                r.mults,
                r.energy_pj
            );
        }
        let (n, s, ann, snn) = self.rows.iter().fold((0, 0, 0, 0), |a, r| {
            (
                a.0 + r.neurons,
                a.1 + r.spikes,
                a.2 + r.op_ann,
                a.3 + r.op_snn,
            )
        });
        let _ = writeln!(
            out,
            "total,,{n},{s},{:.6},{ann},{snn},{},{},{:.3}",
            self.mean_rate(),
            self.total_adds,
            self.total_mults,
            self.energy_pj
        );
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<22} {:>10} {:>10} {:>8} {:>12} {:>12} {:>12} {:>12} {:>14}",
            "layer",
            "kind",
            "N",
            "spikes",
            "rate",
            "op_ann",
            "op_snn",
            "adds",
            "mults",
            "energy_pJ"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:<22} {:>10} {:>10} {:>8.4} {:>12} {:>12} {:>12} {:>12} {:>14.3}",
                r.layer,
                r.kind.as_str(),
                r.neurons,
                r.spikes,
                r.rate,
                r.op_ann,
                r.op_snn,
                r.adds,
                r.mults,
                r.energy_pj
            );
        }
        let _ = writeln!(
            out,
            "total adds {}  mults {}  energy {:.3} pJ ({:.6e} J)",
            self.total_adds,
            self.total_mults,
            self.energy_pj,
            self.energy_joules()
        );
        out
    }
}

/// Per-layer cost table for `net` from the spike counts in `trace`.
pub fn emit_report(trace: &SpikeTrace, net: &NetworkSpec) -> Result<EnergyReport> {
    if trace.layers.len() != net.layers.len() {
        return Err(Error::State(format!(
            "trace covers {} layers, network has {}",
            trace.layers.len(),
            net.layers.len()
        )));
    }
    if trace.time_steps == 0 {
        return Err(Error::State("trace has zero time steps".into()));
    }
    let t = trace.time_steps as u64;
    let mut rows = Vec::with_capacity(net.layers.len());
    for (i, (layer, lt)) in net.layers.iter().zip(&trace.layers).enumerate() {
        if layer.name != lt.name {
            return Err(Error::State(format!(
                "trace layer {} does not match network layer {}",
                lt.name, layer.name
            )));
        }
        let rate = spike_rate(trace, i)?;
        let op_ann = op_count_ann(layer)?;
        let op_snn = scale_ops(op_ann, rate)?;
        let multiplies = i == 0 || layer.kind == LayerKind::ClassifierHead;
        let (adds, mults) = if multiplies {
            (op_ann * t, op_ann * t)
        } else {
            (op_snn, 0)
        };
        rows.push(ReportRow {
            layer: layer.name.clone(),
            kind: layer.kind,
            neurons: lt.neurons,
            spikes: lt.spikes,
            rate,
            op_ann,
            op_snn,
            adds,
            mults,
            energy_pj: energy_pj(adds as f64, mults as f64),
        });
    }
    let total_adds = rows.iter().map(|r| r.adds).sum();
    let total_mults = rows.iter().map(|r| r.mults).sum();
    Ok(EnergyReport {
        time_steps: trace.time_steps,
        energy_pj: energy_pj(total_adds as f64, total_mults as f64),
        total_adds,
        total_mults,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(spikes: u64, t: usize, n: u64) -> SpikeTrace {
        let mut tr = SpikeTrace::new(t);
        tr.record("a", n, spikes);
        tr
    }

    #[test]
    fn rates() {
        assert!((spike_rate(&trace(540, 1, 1000), 0).unwrap() - 0.54).abs() < 1e-15);
        assert_eq!(spike_rate(&trace(0, 1, 1000), 0).unwrap(), 0.0);
        assert_eq!(spike_rate(&trace(300, 2, 200), 0).unwrap(), 3.0);
        assert!(matches!(
            spike_rate(&trace(1, 1, 0), 0),
            Err(Error::Division(_))
        ));
    }

    #[test]
    fn snn_ops() {
        assert_eq!(scale_ops(1_327_104, 0.0).unwrap(), 0);
        assert_eq!(scale_ops(1_327_104, 1.0).unwrap(), 1_327_104);
        assert_eq!(scale_ops(1_327_104, 0.54).unwrap(), 716_636);
        assert!(scale_ops(10, -0.1).is_err());
    }

    #[test]
    fn digits() {
        assert_eq!(leading_digits(0.012567, 3), 126);
        assert_eq!(leading_digits(95.526, 2), 96);
        assert_eq!(leading_digits(9.996, 3), 100);
        assert_eq!(leading_digits(0.0, 3), 0);
    }

    #[test]
    fn zero_energy() {
        assert_eq!(energy(0.0, 0.0), 0.0);
        assert!(energy_from_counts(-1.0, 0.0).is_err());
    }

    #[test]
    fn complexity_examples() {
        let c = window_complexity(48, 48, 3, 3).unwrap();
        assert_eq!((c.scnn, c.lsnn), (41_472, 37_824));
        assert!((c.ratio - 1.096).abs() < 1e-3);
        // 4·1·1·4·2 and 4·4·8 + 4·(4·8 + 20).
        let c = window_complexity(4, 4, 1, 1).unwrap();
        assert_eq!((c.scnn, c.lsnn), (32, 336));
        assert!(c.lsnn > c.scnn);
        assert!(window_complexity(0, 4, 1, 1).is_err());
    }

    #[test]
    fn merge_accumulates() {
        let mut a = trace(3, 1, 10);
        a.images = 1;
        let mut b = trace(4, 1, 10);
        b.images = 1;
        a.merge(&b).unwrap();
        assert_eq!(a.layers[0].spikes, 7);
        assert_eq!(a.layers[0].neurons, 20);
        assert_eq!(a.images, 2);
        let mut c = SpikeTrace::new(1);
        c.record("other", 1, 1);
        assert!(a.merge(&c).is_err());
    }
}
