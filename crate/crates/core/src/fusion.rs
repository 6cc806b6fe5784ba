//! Multi-direction membrane fusion.
//!
//! The projection `Ω(m1, m2) = 2 sin(θπ/2 · m1) cos(θπ/2 · m2)` merges the
//! membrane carried from the previous group (`m1`) with the membrane of the
//! previous layer at the same location (`m2`). It is bounded by 2 in
//! magnitude and odd in `m1`.
//!
//! The over-activation analysis compares the area under Ω over
//! `[th, 2th]²` with the area under the linear plane `m1 + m2`, which is
//! `3 th³`. The surface area has the closed form
//!
//! ```text
//! S(θ) = 16 sin(3θπ·th/2) sin²(θπ·th/4) / (θ²π²)
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::tensor::Tensor;

/// How the two membrane directions are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// `2 sin(θπ/2 · m1) cos(θπ/2 · m2)`.
    #[default]
    Omega,
    /// `m1 + m2`.
    LinearSum,
    /// `max(0, m1 + m2)`.
    Relu,
    /// `sigmoid(m1 + m2)`.
    Sigmoid,
    /// `tanh(m1 + m2)`.
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Radian factor θ.
    pub theta: f64,
    /// LIF threshold used by the area analysis.
    pub th: f64,
    /// When false, only the group carry is used: `m1`.
    pub enabled: bool,
    #[serde(default)]
    pub kind: FusionKind,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            th: 0.5,
            enabled: true,
            kind: FusionKind::Omega,
        }
    }
}

impl FusionConfig {
    pub fn with_theta(theta: f64) -> Self {
        Self {
            theta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!(
                "fusion theta must be positive, got {}",
                self.theta
            )));
        }
        if !(self.th > 0.0 && self.th.is_finite()) {
            return Err(Error::Config(format!(
                "fusion th must be positive, got {}",
                self.th
            )));
        }
        Ok(())
    }

    /// Records the configured fusion of `m_group` and `m_layer` on `tape`.
    pub fn fuse(&self, tape: &mut Tape, m_group: Var, m_layer: Var) -> Result<Var> {
        if !self.enabled {
            tape.value(m_group).expect_same_shape(tape.value(m_layer))?;
            return Ok(m_group);
        }
        match self.kind {
            FusionKind::Omega => tape.omega(m_group, m_layer, self.theta),
            FusionKind::LinearSum => tape.add(m_group, m_layer),
            FusionKind::Relu => {
                let s = tape.add(m_group, m_layer)?;
                Ok(tape.relu(s))
            }
            FusionKind::Sigmoid => {
                let s = tape.add(m_group, m_layer)?;
                Ok(tape.sigmoid(s))
            }
            FusionKind::Tanh => {
                let s = tape.add(m_group, m_layer)?;
                Ok(tape.tanh(s))
            }
        }
    }
}

#[inline]
pub fn omega_scalar(m1: f64, m2: f64, theta: f64) -> f64 {
    let a = theta * PI / 2.0;
    2.0 * (a * m1).sin() * (a * m2).cos()
}

pub(crate) fn omega_tensor(m1: &Tensor, m2: &Tensor, theta: f64) -> Result<Tensor> {
    m1.zip_map(m2, |x, y| omega_scalar(x, y, theta))
}

/// Elementwise Ω projection of two equally shaped membrane maps.
pub fn omega(m1: &Tensor, m2: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    omega_tensor(m1, m2, cfg.theta)
}

/// Closed-form area of Ω over `[th, 2th]²`.
pub fn surface_area(cfg: &FusionConfig) -> Result<f64> {
    let (theta, th) = (cfg.theta, cfg.th);
    if theta == 0.0 {
        return Err(Error::Singularity(
            "surface area is undefined at theta = 0".into(),
        ));
    }
    let s = (3.0 * theta * PI * th / 2.0).sin();
    let q = (theta * PI * th / 4.0).sin();
    Ok(16.0 * s * q * q / (theta * theta * PI * PI))
}

/// Area difference between the Ω surface and the linear-sum plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaReport {
    pub theta: f64,
    pub s_surface: f64,
    pub s_plane: f64,
    pub nabla_d: f64,
}

pub fn area_difference(cfg: &FusionConfig) -> Result<AreaReport> {
    let s_surface = surface_area(cfg)?;
    let s_plane = 3.0 * cfg.th.powi(3);
    Ok(AreaReport {
        theta: cfg.theta,
        s_surface,
        s_plane,
        nabla_d: s_surface - s_plane,
    })
}

pub fn sweep_theta(thetas: &[f64], th: f64) -> Result<Vec<AreaReport>> {
    thetas
        .iter()
        .map(|&theta| {
            if theta.is_nan() || theta <= 0.0 {
                return Err(Error::Config(format!(
                    "theta must be positive, got {theta}"
                )));
            }
            area_difference(&FusionConfig {
                theta,
                th,
                ..FusionConfig::default()
            })
        })
        .collect()
}

pub const AREA_CSV_HEADER: &str = "theta,s_surface,s_plane,nabla_d";

/// CSV with header `theta,s_surface,s_plane,nabla_d`.
pub fn area_reports_csv(reports: &[AreaReport]) -> String {
    let mut out = String::from(AREA_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.theta, r.s_surface, r.s_plane, r.nabla_d
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_zero_first_argument() {
        for y in [-3.0, 0.0, 0.7, 12.5] {
            assert_eq!(omega_scalar(0.0, y, 0.5), 0.0);
        }
    }

    #[test]
    fn omega_reference_points() {
        assert!((omega_scalar(1.0, 0.0, 0.5) - 2f64.sqrt()).abs() < 1e-12);
        assert!(omega_scalar(2.0, 2.0, 0.5).abs() < 1e-12);
    }

    #[test]
    fn omega_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(omega(&a, &b, &FusionConfig::default()).is_err());
    }

    #[test]
    fn theta_zero_is_singular() {
        let cfg = FusionConfig::with_theta(0.0);
        assert!(matches!(surface_area(&cfg), Err(Error::Singularity(_))));
        assert!(area_difference(&cfg).is_err());
    }

    #[test]
    fn plane_area_is_three_th_cubed() {
        let r = area_difference(&FusionConfig::default()).unwrap();
        assert_eq!(r.s_plane, 0.375);
        assert_eq!(r.nabla_d, r.s_surface - r.s_plane);
    }

    #[test]
    fn sweep_edge_cases() {
        assert!(sweep_theta(&[], 0.5).unwrap().is_empty());
        let one = sweep_theta(&[0.5], 0.5).unwrap();
        assert_eq!(one[0], area_difference(&FusionConfig::default()).unwrap());
        let pair = sweep_theta(&[0.5, 0.5], 0.5).unwrap();
        assert_eq!(pair[0], pair[1]);
        assert!(sweep_theta(&[0.3, -0.1], 0.5).is_err());
    }

    #[test]
    fn csv_has_header_only_when_empty() {
        assert_eq!(area_reports_csv(&[]), "theta,s_surface,s_plane,nabla_d\n");
    }

    #[test]
    fn disabled_fusion_passes_group_carry() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 0.3));
        let b = tape.constant(Tensor::full(&[2], 5.0));
        let cfg = FusionConfig {
            enabled: false,
            ..FusionConfig::default()
        };
        let f = cfg.fuse(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(f).data(), &[0.3, 0.3]);
    }
}
