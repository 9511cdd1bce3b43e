//! Drift and input-coupling matrices of the linearized three-mode cavity.

use nalgebra::{Matrix3, Matrix6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CavityConfig, OperatingPoint, MODE_COUNT, PUMP, SIGNAL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FreeCavity,
    OpoAboveThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftMatrix {
    pub matrix: Matrix6<f64>,
    pub regime: Regime,
}

impl DriftMatrix {
    /// Amplitude sub-block (rows/columns p0, p1, p2).
    pub fn amplitude_block(&self) -> Matrix3<f64> {
        self.sub_block(0)
    }

    /// Phase sub-block (rows/columns q0, q1, q2).
    pub fn phase_block(&self) -> Matrix3<f64> {
        self.sub_block(1)
    }

    fn sub_block(&self, offset: usize) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.matrix[(2 * i + offset, 2 * j + offset)])
    }

    /// Largest eigenvalue modulus, used to bound integration steps.
    pub fn spectral_radius(&self) -> f64 {
        let ev = self.matrix.complex_eigenvalues();
        ev.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Diagonal input couplings through the output coupler (`m_gamma`) and the
/// spurious-loss channel (`m_mu`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingMatrices {
    pub m_gamma: Matrix6<f64>,
    pub m_mu: Matrix6<f64>,
}

pub fn coupling_matrices(config: &CavityConfig) -> CouplingMatrices {
    let mut m_gamma = Matrix6::zeros();
    let mut m_mu = Matrix6::zeros();
    for j in 0..MODE_COUNT {
        let m = &config.modes[j];
        let g = (2.0 * m.gamma).sqrt();
        let u = (2.0 * m.mu).sqrt();
        for k in [2 * j, 2 * j + 1] {
            m_gamma[(k, k)] = g;
            m_mu[(k, k)] = u;
        }
    }
    CouplingMatrices { m_gamma, m_mu }
}

/// Empty cavity: `-(m_gamma^2 + m_mu^2) / 2`.
pub fn free_cavity_drift(config: &CavityConfig) -> DriftMatrix {
    let c = coupling_matrices(config);
    let matrix = -(c.m_gamma * c.m_gamma + c.m_mu * c.m_mu) * 0.5;
    DriftMatrix {
        matrix,
        regime: Regime::FreeCavity,
    }
}

/// Non-degenerate oscillator above threshold at exact resonance.
///
/// Amplitude and phase quadratures decouple. The two phase rows of signal and
/// idler are identical, so `q1 - q2` is an undamped direction and the matrix
/// is singular; spectra must be evaluated at nonzero frequency.
pub fn opo_drift(config: &CavityConfig, op: &OperatingPoint) -> Result<DriftMatrix> {
    if !config.has_balanced_losses() {
        let (s, i) = (&config.modes[1], &config.modes[2]);
        return Err(Error::UnbalancedLosses {
            gamma1: s.gamma,
            gamma2: i.gamma,
            mu1: s.mu,
            mu2: i.mu,
        });
    }
    if !(op.beta >= 0.0 && op.beta.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "beta",
            reason: format!("must be nonnegative, got {}", op.beta),
        });
    }
    let a = config.modes[PUMP].total_loss();
    let g = config.modes[SIGNAL].total_loss();
    let gb = g * op.beta;

    #[rustfmt::skip]
    let matrix = Matrix6::new(
        -a,  0.0, -gb, 0.0, -gb, 0.0,
        0.0, -a,  0.0, -gb, 0.0, -gb,
        gb,  0.0, -g,  0.0,  g,  0.0,
        0.0, gb,  0.0, -g,  0.0, -g,
        gb,  0.0,  g,  0.0, -g,  0.0,
        0.0, gb,  0.0, -g,  0.0, -g,
    );
    Ok(DriftMatrix {
        matrix,
        regime: Regime::OpoAboveThreshold,
    })
}
