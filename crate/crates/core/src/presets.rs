//! Parameter sets of the characterized KTP triply resonant cavity.
//!
//! Losses follow from the mirror reflectivities (70% pump input coupler, 96%
//! infrared output coupler) and the measured finesses 16 / 135 / 115. Signal
//! and idler spurious losses are averaged so the balanced-loss drift model
//! applies. The crystal-focus geometry of the oscillator cavity is not
//! characterized; the 8.13 mm Rayleigh length of the concentric test cavity
//! is used and the waists follow from it.

use std::f64::consts::PI;

use crate::model::{CavityConfig, ModeParams};
use crate::phonon::NoiseCouplings;

pub const REFERENCE_THRESHOLD_W: f64 = 0.070;
pub const REFERENCE_ANALYSIS_FREQUENCY_HZ: f64 = 21e6;
pub const REFERENCE_FSR_HZ: f64 = 5.1e9;

/// Linear fit of the pump self-coupling against crystal temperature.
pub const TEMPERATURE_SLOPE_PER_W_K: f64 = 5.92e-3;
pub const TEMPERATURE_SLOPE_SIGMA: f64 = 0.46e-3;
pub const TEMPERATURE_INTERCEPT_PER_W: f64 = -1.38;
pub const TEMPERATURE_INTERCEPT_SIGMA: f64 = 0.13;

/// Coupling ratios relative to the pump self-coupling used to transfer the
/// measured noise structure to other cavities.
pub const SIGNAL_SELF_RATIO: f64 = 0.25;
pub const PUMP_CROSS_RATIO: f64 = 0.27;
pub const SIGNAL_IDLER_RATIO: f64 = 0.16;

fn finesse_half_loss(finesse: f64) -> f64 {
    // total round-trip loss 2*pi/F split as 2*(gamma + mu)
    PI / finesse
}

pub fn reference_cavity() -> CavityConfig {
    let gamma0 = 0.15;
    let gamma = 0.02;
    let mu0 = finesse_half_loss(16.0) - gamma0;
    let mu = 0.5 * ((finesse_half_loss(135.0) - gamma) + (finesse_half_loss(115.0) - gamma));
    let rayleigh = 8.13e-3;
    let mut config = CavityConfig {
        modes: [
            ModeParams {
                index: 0,
                wavelength: 532e-9,
                gamma: gamma0,
                mu: mu0,
                refractive_index: 1.788,
                detection_efficiency: 0.65,
            },
            ModeParams {
                index: 1,
                wavelength: 1064e-9,
                gamma,
                mu,
                refractive_index: 1.830,
                detection_efficiency: 0.87,
            },
            ModeParams {
                index: 2,
                wavelength: 1064e-9,
                gamma,
                mu,
                refractive_index: 1.740,
                detection_efficiency: 0.87,
            },
        ],
        free_spectral_range: REFERENCE_FSR_HZ,
        crystal_length: 12e-3,
        rayleigh_length: rayleigh,
        waists: [0.0; 3],
    };
    config.waists = [0, 1, 2].map(|j| config.waist_from_rayleigh(j));
    config
}

/// Nearly concentric test cavity used for the crystal-position study
/// (12% input coupler, 3.3% internal loss, 27.8 um waist).
pub fn geometry_study_cavity() -> CavityConfig {
    let mut config = reference_cavity();
    config.modes[0].gamma = 0.060;
    config.modes[0].mu = 0.0165;
    config.rayleigh_length = 8.13e-3;
    config.waists = [0, 1, 2].map(|j| config.waist_from_rayleigh(j));
    config
}

/// Measured couplings in 1/W.
pub fn measured_couplings() -> NoiseCouplings {
    NoiseCouplings::from_entries(0.53, 0.15, 0.14, 0.14, 0.15, 0.087)
        .expect("measured couplings are symmetric with nonnegative diagonal")
}

/// Full coupling matrix tied to a single pump self-coupling `eta00`.
pub fn scaled_couplings(eta00: f64) -> NoiseCouplings {
    let s = eta00 * SIGNAL_SELF_RATIO;
    let c = eta00 * PUMP_CROSS_RATIO;
    let x = eta00 * SIGNAL_IDLER_RATIO;
    NoiseCouplings::from_entries(eta00, s, s, c, c, x)
        .expect("scaled couplings are symmetric with nonnegative diagonal")
}
