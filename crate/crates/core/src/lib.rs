//! Quantum noise model of a triply resonant optical parametric oscillator
//! with phonon-induced phase noise in the nonlinear crystal.
//!
//! Quadratures are ordered `[p0, q0, p1, q1, p2, q2]` (pump, signal, idler)
//! and normalized so that vacuum has identity covariance. Frequencies are in
//! units of the free spectral range, times in cavity round trips.

pub mod config;
pub mod drift;
pub mod error;
pub mod fit;
pub mod io;
pub mod model;
pub mod oracle;
pub mod phonon;
pub mod presets;
pub mod quadrature;
pub mod roots;
pub mod spectra;

pub use config::{parse_config, RunConfig};
pub use drift::{CouplingMatrices, DriftMatrix, Regime};
pub use error::{Error, Result};
pub use fit::{FitResult, PowerReference, PowerVarianceRecord};
pub use model::{CavityConfig, ModeParams, OperatingPoint, QuadratureCovariance, Violation};
pub use oracle::{PsdEstimate, SimulationPlan};
pub use phonon::{CrystalModel, NoiseCouplings};
pub use spectra::{AxisSpec, SpectrumResult, SweepAxis};
