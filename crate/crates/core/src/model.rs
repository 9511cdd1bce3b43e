//! Domain types shared by every other module.
//!
//! Quadratures are always ordered `[p0, q0, p1, q1, p2, q2]` where mode 0 is
//! the pump, 1 the signal and 2 the idler. Covariances are normalized so the
//! coherent state (and vacuum) is the identity matrix.
//!
//! Rates are per cavity round trip and frequencies are the dimensionless
//! `omega = 2 pi f / FSR`, so no round-trip time appears in the spectral
//! formulas.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix6, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PUMP: usize = 0;
pub const SIGNAL: usize = 1;
pub const IDLER: usize = 2;
pub const MODE_COUNT: usize = 3;
pub const QUADRATURE_COUNT: usize = 6;

/// Row/column of the amplitude quadrature of `mode`.
#[inline]
pub const fn p_index(mode: usize) -> usize {
    2 * mode
}

/// Row/column of the phase quadrature of `mode`.
#[inline]
pub const fn q_index(mode: usize) -> usize {
    2 * mode + 1
}

pub const QUADRATURE_LABELS: [&str; QUADRATURE_COUNT] = ["p0", "q0", "p1", "q1", "p2", "q2"];

/// Optical and loss constants of one cavity mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    pub index: usize,
    /// Vacuum wavelength, meters.
    pub wavelength: f64,
    /// Half the output-coupler transmission per round trip (`T = 2 gamma`).
    pub gamma: f64,
    /// Half the spurious loss per round trip.
    pub mu: f64,
    pub refractive_index: f64,
    pub detection_efficiency: f64,
}

impl ModeParams {
    /// Total half-loss per round trip, `gamma + mu`.
    pub fn total_loss(&self) -> f64 {
        self.gamma + self.mu
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavityConfig {
    pub modes: [ModeParams; MODE_COUNT],
    /// Hz.
    pub free_spectral_range: f64,
    /// Crystal length, meters.
    pub crystal_length: f64,
    /// Rayleigh length inside the crystal, meters.
    pub rayleigh_length: f64,
    /// Waist of each mode at the cavity focus, meters.
    pub waists: [f64; MODE_COUNT],
}

impl CavityConfig {
    /// Round-trip time in seconds.
    pub fn round_trip_time(&self) -> f64 {
        1.0 / self.free_spectral_range
    }

    pub fn mode(&self, j: usize) -> &ModeParams {
        &self.modes[j]
    }

    /// Signal and idler share the same coupler and spurious losses.
    pub fn has_balanced_losses(&self) -> bool {
        let (s, i) = (&self.modes[SIGNAL], &self.modes[IDLER]);
        close(s.gamma, i.gamma) && close(s.mu, i.mu)
    }

    pub fn detection_efficiencies(&self) -> [f64; MODE_COUNT] {
        [0, 1, 2].map(|j| self.modes[j].detection_efficiency)
    }

    /// Waist that reproduces the configured Rayleigh length for mode `j`,
    /// `w = sqrt(z0 * lambda / (n * pi))`.
    pub fn waist_from_rayleigh(&self, j: usize) -> f64 {
        let m = &self.modes[j];
        (self.rayleigh_length * m.wavelength / (m.refractive_index * PI)).sqrt()
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// A broken configuration rule, naming the field it concerns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every invariant of [`CavityConfig`]. An empty list means the
/// configuration is usable.
pub fn validate_config(config: &CavityConfig) -> Vec<Violation> {
    let mut out = Vec::new();

    for (j, m) in config.modes.iter().enumerate() {
        let field = |name: &str| format!("mode{j}.{name}");
        if m.index != j {
            out.push(Violation::new(field("index"), format!("index must be {j}")));
        }
        if !(m.wavelength > 0.0 && m.wavelength.is_finite()) {
            out.push(Violation::new(field("wavelength_m"), "wavelength must be positive"));
        }
        if !(m.gamma > 0.0) {
            out.push(Violation::new(field("gamma"), "gamma must be positive"));
        } else if !(m.gamma < 1.0) {
            out.push(Violation::new(field("gamma"), "gamma must be below 1"));
        }
        if !(m.mu >= 0.0) {
            out.push(Violation::new(field("mu"), "mu must be nonnegative"));
        } else if !(m.mu < 1.0) {
            out.push(Violation::new(field("mu"), "mu must be below 1"));
        }
        if m.gamma > 0.0 && m.mu >= 0.0 && !(m.gamma + m.mu < 1.0) {
            out.push(Violation::new(
                field("mu"),
                "gamma + mu must be below 1 (small-loss regime)",
            ));
        }
        if !(m.refractive_index > 0.0 && m.refractive_index.is_finite()) {
            out.push(Violation::new(
                field("refractive_index"),
                "refractive index must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&m.detection_efficiency) {
            out.push(Violation::new(
                field("detection_efficiency"),
                "detection efficiency must lie in [0, 1]",
            ));
        }
        if !(config.waists[j] > 0.0 && config.waists[j].is_finite()) {
            out.push(Violation::new(field("waist_m"), "waist must be positive"));
        }
    }

    let pump = config.modes[PUMP].wavelength;
    for j in [SIGNAL, IDLER] {
        let half = config.modes[j].wavelength / 2.0;
        if pump > 0.0 && half > 0.0 && (pump - half).abs() > 0.01 * pump {
            out.push(Violation::new(
                format!("mode{j}.wavelength_m"),
                "energy conservation: pump wavelength must be half the down-converted wavelength within 1%",
            ));
        }
    }

    if !(config.free_spectral_range > 0.0 && config.free_spectral_range.is_finite()) {
        out.push(Violation::new("cavity.fsr_hz", "free spectral range must be positive"));
    }
    if !(config.crystal_length > 0.0) {
        out.push(Violation::new("cavity.crystal_length_m", "crystal length must be positive"));
    }
    if !(config.rayleigh_length > 0.0) {
        out.push(Violation::new(
            "cavity.rayleigh_length_m",
            "Rayleigh length must be positive",
        ));
    }
    out
}

/// Returns the configuration back if it is valid.
pub fn checked(config: CavityConfig) -> Result<CavityConfig> {
    let v = validate_config(&config);
    if v.is_empty() {
        Ok(config)
    } else {
        Err(Error::InvalidConfig(v))
    }
}

/// Converts an analysis frequency in Hz to `omega = 2 pi f / FSR`.
pub fn normalize_frequency(f_hz: f64, config: &CavityConfig) -> Result<f64> {
    if !(f_hz >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "frequency",
            reason: format!("must be nonnegative, got {f_hz}"),
        });
    }
    Ok(2.0 * PI * f_hz / config.free_spectral_range)
}

/// Steady state of the oscillator above threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub pump_ratio: f64,
    /// Input pump power at threshold, watts.
    pub threshold_power: f64,
    /// Signal (= idler) amplitude over pump amplitude.
    pub beta: f64,
    /// Intracavity circulating power per mode, watts.
    pub intracavity_powers: [f64; MODE_COUNT],
}

/// Operating point for pump ratio `sigma = P_in / P_th`.
///
/// The intracavity pump is clamped at its threshold buildup
/// `2 gamma0 / gamma0'^2 * P_th`; signal and idler carry `beta^2` times the
/// pump photon flux.
pub fn operating_point(
    config: &CavityConfig,
    pump_ratio: f64,
    threshold_power: f64,
) -> Result<OperatingPoint> {
    if !(pump_ratio >= 1.0) {
        return Err(Error::BelowThreshold(pump_ratio));
    }
    if !(threshold_power > 0.0 && threshold_power.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "threshold_power",
            reason: format!("must be positive, got {threshold_power}"),
        });
    }
    let pump = &config.modes[PUMP];
    let signal = &config.modes[SIGNAL];
    let beta = (pump.gamma / signal.gamma).sqrt() * (pump_ratio.sqrt() - 1.0).sqrt();
    let gp0 = pump.total_loss();
    let p0 = 2.0 * pump.gamma / (gp0 * gp0) * threshold_power;
    let p1 = beta * beta * p0 * (pump.wavelength / signal.wavelength);
    Ok(OperatingPoint {
        pump_ratio,
        threshold_power,
        beta,
        intracavity_powers: [p0, p1, p1],
    })
}

/// Real symmetric positive-semidefinite 6x6 quadrature covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureCovariance(Matrix6<f64>);

impl QuadratureCovariance {
    pub fn new(matrix: Matrix6<f64>) -> Result<Self> {
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotSymmetric {
                what: "quadrature covariance",
                asymmetry: asym,
            });
        }
        let sym = symmetrize(&matrix);
        let min = min_eigenvalue(&sym);
        let max = SymmetricEigen::new(sym).eigenvalues.max();
        if min < -1e-10 * max.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveSemidefinite {
                what: "quadrature covariance",
                min_eigenvalue: min,
            });
        }
        Ok(Self(sym))
    }

    pub fn identity() -> Self {
        Self(Matrix6::identity())
    }

    pub fn zeros() -> Self {
        Self(Matrix6::zeros())
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix6<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Variance of the linear combination `c . X`.
    pub fn variance_of(&self, c: &[f64; QUADRATURE_COUNT]) -> f64 {
        let v = nalgebra::Vector6::from_row_slice(c);
        (v.transpose() * self.0 * v)[(0, 0)]
    }

    /// The 21 independent entries in row-major upper-triangle order.
    pub fn upper_triangle(&self) -> [f64; 21] {
        upper_triangle(&self.0)
    }
}

/// Row-major upper triangle of a 6x6 matrix.
pub fn upper_triangle(m: &Matrix6<f64>) -> [f64; 21] {
    let mut out = [0.0; 21];
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

/// Column names `V_p0p0, V_p0q0, ..., V_q2q2` matching [`upper_triangle`].
pub fn upper_triangle_labels() -> Vec<String> {
    let mut out = Vec::with_capacity(21);
    for i in 0..6 {
        for j in i..6 {
            out.push(format!("V_{}{}", QUADRATURE_LABELS[i], QUADRATURE_LABELS[j]));
        }
    }
    out
}

pub fn symmetrize(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(m: &Matrix6<f64>) -> f64 {
    SymmetricEigen::new(*m).eigenvalues.min()
}
