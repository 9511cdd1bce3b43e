//! Phonon-driven phase noise: the noise covariance fed into the Langevin
//! equation, and the microscopic model of the coupling constants.
//!
//! Refractive-index fluctuations only rotate the phase of each carrier, so
//! the noise covariance is nonzero only in the phase-phase block, with
//! `<dQ_j dQ_k> = eta_jk sqrt(P_j P_k)`. The spectrum is taken flat across
//! the analysis band.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{q_index, CavityConfig, QuadratureCovariance, MODE_COUNT, PUMP};
use crate::quadrature::gauss_legendre;

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const HBAR: f64 = PLANCK / (2.0 * PI);
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Symmetric 3x3 matrix of noise couplings `eta_jk`, in 1/W.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCouplings {
    eta: Matrix3<f64>,
}

impl NoiseCouplings {
    /// Rejects asymmetric matrices and negative self-couplings. Positive
    /// semidefiniteness is checked where the matrix is used as a covariance.
    pub fn new(eta: Matrix3<f64>) -> Result<Self> {
        let scale = eta.amax().max(f64::MIN_POSITIVE);
        let asym = (eta - eta.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotSymmetric {
                what: "noise couplings",
                asymmetry: asym,
            });
        }
        for j in 0..MODE_COUNT {
            if !(eta[(j, j)] >= 0.0) {
                return Err(Error::InvalidParameter {
                    name: "eta",
                    reason: format!("diagonal entry eta{j}{j} = {} is negative", eta[(j, j)]),
                });
            }
        }
        Ok(Self {
            eta: (eta + eta.transpose()) * 0.5,
        })
    }

    pub fn from_entries(e00: f64, e11: f64, e22: f64, e01: f64, e02: f64, e12: f64) -> Result<Self> {
        #[rustfmt::skip]
        let m = Matrix3::new(
            e00, e01, e02,
            e01, e11, e12,
            e02, e12, e22,
        );
        Self::new(m)
    }

    pub fn zeros() -> Self {
        Self {
            eta: Matrix3::zeros(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.eta
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.eta[(j, k)]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            eta: self.eta * factor,
        }
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.eta).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        [ev[0], ev[1], ev[2]]
    }

    pub fn determinant(&self) -> f64 {
        self.eta.determinant()
    }

    /// Smallest eigenvalue if it breaks positive semidefiniteness.
    pub fn psd_violation(&self) -> Option<f64> {
        let ev = self.eigenvalues();
        let tol = 1e-12 * ev[2].abs().max(f64::MIN_POSITIVE);
        (ev[0] < -tol).then_some(ev[0])
    }

    /// Every cross coupling is bounded by the geometric mean of the two
    /// self-couplings.
    pub fn satisfies_cauchy_schwarz(&self) -> bool {
        (0..3).all(|j| {
            (0..3).all(|k| {
                self.eta[(j, k)].abs() <= (self.eta[(j, j)] * self.eta[(k, k)]).sqrt() * (1.0 + 1e-12)
            })
        })
    }
}

/// Phonon noise covariance for intracavity powers `powers` (watts).
pub fn build_vq(eta: &NoiseCouplings, powers: &[f64; MODE_COUNT]) -> Result<QuadratureCovariance> {
    if let Some(min_eigenvalue) = eta.psd_violation() {
        return Err(Error::NotPositiveSemidefinite {
            what: "noise coupling matrix eta",
            min_eigenvalue,
        });
    }
    if let Some(p) = powers.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidParameter {
            name: "powers",
            reason: format!("intracavity power must be nonnegative, got {p}"),
        });
    }
    let mut v = Matrix6::zeros();
    for j in 0..MODE_COUNT {
        for k in 0..MODE_COUNT {
            v[(q_index(j), q_index(k))] = eta.get(j, k) * (powers[j] * powers[k]).sqrt();
        }
    }
    QuadratureCovariance::new(v)
}

/// Photoelastic and acoustic description of the nonlinear crystal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalModel {
    /// Per mode, the photoelastic components `p_jj,(lm)` in the order
    /// `xx, yy, zz, yz, xz, xy`.
    pub photoelastic_vectors: [[f64; 6]; MODE_COUNT],
    /// RMS strain per component at the analysis frequency.
    pub strain_rms: [f64; 6],
    /// Acoustic coherence length, meters.
    pub coherence_length: f64,
    /// kg/m^3.
    pub density: f64,
    /// m/s.
    pub sound_speed: f64,
    /// Kelvin.
    pub temperature: f64,
    /// Crystal center relative to the cavity focus, meters.
    pub position: f64,
}

impl CrystalModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.coherence_length > 0.0) {
            return bad("coherence_length", "must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be positive");
        }
        if self.strain_rms.iter().any(|s| !s.is_finite()) {
            return bad("strain_rms", "components must be finite");
        }
        Ok(())
    }

    /// Mean square strain carried by acoustic energy density `energy_density`
    /// (J/m^3), from `E/V = rho v^2 S^2 / 2`.
    pub fn mean_square_strain(&self, energy_density: f64) -> f64 {
        2.0 * energy_density / (self.density * self.sound_speed * self.sound_speed)
    }
}

/// `c_jk = sum_lm p_jj,(lm) p_kk,(lm) S_lm^2`.
pub fn photoelastic_coupling(crystal: &CrystalModel, j: usize, k: usize) -> f64 {
    let (a, b) = (&crystal.photoelastic_vectors[j], &crystal.photoelastic_vectors[k]);
    (0..6)
        .map(|l| a[l] * b[l] * crystal.strain_rms[l] * crystal.strain_rms[l])
        .sum()
}

/// Squared Gaussian beam radius of mode `j` at distance `z` from the focus.
pub fn beam_radius_sq(config: &CavityConfig, j: usize, z: f64) -> f64 {
    let w0 = config.waists[j];
    let r = z / config.rayleigh_length;
    w0 * w0 * (1.0 + r * r)
}

/// Effective waist `w_jk` defined by
/// `l / (pi w_jk^2) = integral over the crystal of (2/pi) / (w_j^2(z) + w_k^2(z)) dz`.
pub fn effective_waist(config: &CavityConfig, j: usize, k: usize, crystal_center_z: f64) -> f64 {
    let l = config.crystal_length;
    let integral = gauss_legendre(
        |z| 2.0 / PI / (beam_radius_sq(config, j, z) + beam_radius_sq(config, k, z)),
        crystal_center_z - 0.5 * l,
        crystal_center_z + 0.5 * l,
        64,
    );
    (l / (PI * integral)).sqrt()
}

/// `l lambda / (pi w_00^2)` for a crystal centered at `z`, using the pump
/// refractive index and the configured Rayleigh length.
pub fn waist_position_profile(config: &CavityConfig, z: f64) -> f64 {
    let n = config.modes[PUMP].refractive_index;
    let l = config.crystal_length;
    let z0 = config.rayleigh_length;
    n * (((2.0 * z + l) / (2.0 * z0)).atan() - ((2.0 * z - l) / (2.0 * z0)).atan())
}

/// Mean thermal energy of acoustic modes with angular frequencies
/// `mode_frequencies` (rad/s), including zero-point energy.
pub fn thermal_phonon_energy(temperature: f64, mode_frequencies: &[f64]) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter {
            name: "temperature",
            reason: format!("must be positive, got {temperature}"),
        });
    }
    Ok(mode_frequencies
        .iter()
        .map(|&w| {
            let e = HBAR * w;
            let x = e / (BOLTZMANN * temperature);
            e * (1.0 / x.exp_m1() + 0.5)
        })
        .sum())
}

/// Coupling `eta_jk` (1/W) from crystal and cavity properties.
pub fn eta_microscopic(config: &CavityConfig, crystal: &CrystalModel, j: usize, k: usize) -> f64 {
    let (mj, mk) = (&config.modes[j], &config.modes[k]);
    let c_jk = photoelastic_coupling(crystal, j, k);
    let w = effective_waist(config, j, k, crystal.position);
    let index_factor = mj.refractive_index.powi(3) * mk.refractive_index.powi(3) / (4.0 * PLANCK * SPEED_OF_LIGHT);
    let geometry = config.crystal_length * (mj.wavelength * mk.wavelength).sqrt() / (PI * w * w);
    mj.wavenumber() * mk.wavenumber() * index_factor * crystal.coherence_length.powi(3) * c_jk * geometry
}

/// Full coupling matrix from the microscopic model.
pub fn couplings_microscopic(config: &CavityConfig, crystal: &CrystalModel) -> Result<NoiseCouplings> {
    crystal.validate()?;
    NoiseCouplings::new(Matrix3::from_fn(|j, k| eta_microscopic(config, crystal, j, k)))
}

/// Linear temperature law for the pump self-coupling, floored at zero.
pub fn temperature_law(temperature: f64, slope: f64, intercept: f64) -> f64 {
    (slope * temperature + intercept).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{geometry_study_cavity, measured_couplings, reference_cavity};
    use approx::assert_relative_eq;

    fn crystal(vectors: [[f64; 6]; 3], strain: [f64; 6]) -> CrystalModel {
        CrystalModel {
            photoelastic_vectors: vectors,
            strain_rms: strain,
            coherence_length: 1e-6,
            density: 2945.0,
            sound_speed: 5000.0,
            temperature: 300.0,
            position: 0.0,
        }
    }

    #[test]
    fn vq_entries() {
        let eta = NoiseCouplings::from_entries(0.53, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let v = build_vq(&eta, &[0.1, 0.0, 0.0]).unwrap();
        assert_relative_eq!(v.get(1, 1), 0.053, epsilon = 1e-15);

        let eta = NoiseCouplings::from_entries(0.0, 0.15, 0.14, 0.0, 0.0, 0.087).unwrap();
        let v = build_vq(&eta, &[0.0, 0.05, 0.05]).unwrap();
        assert_relative_eq!(v.get(3, 5), 0.00435, epsilon = 1e-15);

        let v = build_vq(&measured_couplings(), &[0.0; 3]).unwrap();
        assert_eq!(*v.matrix(), Matrix6::zeros());
    }

    #[test]
    fn vq_is_phase_only() {
        let v = build_vq(&measured_couplings(), &[0.5, 0.3, 0.3]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i % 2 == 0 || j % 2 == 0 {
                    assert_eq!(v.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn measured_matrix_is_psd() {
        let eta = measured_couplings();
        // cofactor expansion, independent of the eigen-solver
        let m = eta.matrix();
        let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
            - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
            + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
        assert_relative_eq!(det, 4.65e-3, epsilon = 5e-6);
        assert_relative_eq!(eta.determinant(), det, epsilon = 1e-15);
        let ev = eta.eigenvalues();
        assert!(ev.iter().all(|&e| e > 0.0));
        assert_relative_eq!(ev.iter().product::<f64>(), det, epsilon = 1e-14);
        assert!(eta.psd_violation().is_none());
        assert!(eta.satisfies_cauchy_schwarz());
    }

    #[test]
    fn non_psd_eta_rejected_with_eigenvalue() {
        let eta = NoiseCouplings::from_entries(0.1, 0.1, 0.1, 0.5, 0.0, 0.0).unwrap();
        let err = build_vq(&eta, &[0.1; 3]).unwrap_err();
        match err {
            Error::NotPositiveSemidefinite { min_eigenvalue, .. } => {
                assert_relative_eq!(min_eigenvalue, -0.4, epsilon = 1e-12)
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn photoelastic_examples() {
        let s = [1.0; 6];
        let a = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let c = crystal([a, b, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]], s);
        assert_eq!(photoelastic_coupling(&c, 0, 1), 1.0);
        assert_eq!(photoelastic_coupling(&c, 0, 0), 1.0);
        assert_eq!(photoelastic_coupling(&c, 1, 1), 2.0);
        assert_relative_eq!(
            photoelastic_coupling(&c, 0, 1) / (2.0f64).sqrt(),
            0.7071,
            epsilon = 1e-4
        );
        // orthogonal
        assert_eq!(photoelastic_coupling(&c, 0, 2), 0.0);
        // collinear
        let v = [0.2, -0.1, 0.3, 0.05, 0.0, 0.7];
        let c = crystal([v, v, v], [0.3, 1.2, 0.7, 0.1, 2.0, 0.4]);
        let cjj = photoelastic_coupling(&c, 0, 0);
        assert_relative_eq!(photoelastic_coupling(&c, 0, 1), cjj, epsilon = 1e-15);
    }

    #[test]
    fn effective_waist_limits() {
        let mut c = reference_cavity();
        c.rayleigh_length = 1e12;
        c.waists = [30e-6; 3];
        assert_relative_eq!(effective_waist(&c, 0, 1, 0.0), 30e-6, epsilon = 1e-15);

        let mut c = reference_cavity();
        c.crystal_length = 1e-7;
        assert_relative_eq!(effective_waist(&c, 1, 1, 0.0), c.waists[1], max_relative = 1e-9);
    }

    #[test]
    fn profile_at_focus() {
        let c = geometry_study_cavity();
        let v = waist_position_profile(&c, 0.0);
        assert_relative_eq!(v, 2.0 * 1.788 * (6.0f64 / 8.13).atan(), epsilon = 1e-14);
        assert!((v - 2.2731).abs() < 1e-3);
        assert!(waist_position_profile(&c, 1e6) < 1e-7);
        assert!(waist_position_profile(&c, -1e6) < 1e-7);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let c = geometry_study_cavity();
        for i in 0..50 {
            let z = -0.03 + 0.06 * i as f64 / 49.0;
            let w = effective_waist(&c, 0, 0, z);
            let numeric = c.crystal_length * c.modes[0].wavelength / (PI * w * w);
            let closed = waist_position_profile(&c, z);
            assert_relative_eq!(numeric, closed, max_relative = 1e-6);
        }
    }

    #[test]
    fn thermal_energy_limits() {
        let w = [1e9, 3e9];
        let zero_point: f64 = w.iter().map(|x| HBAR * x / 2.0).sum();
        let e = thermal_phonon_energy(1e-3, &w).unwrap();
        assert_relative_eq!(e, zero_point, max_relative = 1e-12);

        // classical limit: hbar w / kT < 0.02
        let t = 300.0;
        let w = 0.019 * BOLTZMANN * t / HBAR;
        let e = thermal_phonon_energy(t, &[w]).unwrap();
        assert!((e / (BOLTZMANN * t) - 1.0).abs() < 0.01);

        assert!(thermal_phonon_energy(0.0, &[1e9]).is_err());
    }

    #[test]
    fn thermal_energy_monotone_and_convex() {
        let w = [2e12, 5e12, 1.1e13];
        let ts: Vec<f64> = (1..200).map(|i| i as f64 * 2.0).collect();
        let es: Vec<f64> = ts.iter().map(|&t| thermal_phonon_energy(t, &w).unwrap()).collect();
        for i in 1..es.len() {
            assert!(es[i] > es[i - 1]);
        }
        for i in 1..es.len() - 1 {
            assert!(es[i + 1] - 2.0 * es[i] + es[i - 1] >= -1e-12 * es[i]);
        }
    }

    #[test]
    fn eta_zero_without_photoelastic_coupling() {
        let c = reference_cavity();
        let k = crystal([[0.0; 6]; 3], [1e-6; 6]);
        assert_eq!(eta_microscopic(&c, &k, 0, 1), 0.0);
    }

    #[test]
    fn eta_cubic_in_coherence_length() {
        let c = reference_cavity();
        let v = [0.1, 0.2, 0.3, 0.0, 0.0, 0.05];
        let mut k = crystal([v, v, v], [1e-6; 6]);
        let a = eta_microscopic(&c, &k, 0, 1);
        k.coherence_length *= 2.0;
        let b = eta_microscopic(&c, &k, 0, 1);
        assert_relative_eq!(b / a, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn eta_scales_with_inverse_wavelength_squared() {
        let mut c = reference_cavity();
        for m in c.modes.iter_mut() {
            m.refractive_index = 1.8;
        }
        c.modes[1].wavelength = 2.0 * c.modes[0].wavelength;
        c.waists = [0, 1, 2].map(|j| c.waist_from_rayleigh(j));
        let v = [0.1, 0.2, 0.3, 0.0, 0.0, 0.05];
        let k = crystal([v, v, v], [1e-6; 6]);
        let ratio = eta_microscopic(&c, &k, 0, 0) / eta_microscopic(&c, &k, 1, 1);
        assert_relative_eq!(ratio, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn temperature_law_values() {
        assert_relative_eq!(temperature_law(383.0, 5.92e-3, -1.38), 0.887, epsilon = 1e-3);
        let t0 = 1.38 / 5.92e-3;
        assert_relative_eq!(t0, 233.1, epsilon = 0.05);
        assert_eq!(temperature_law(t0 - 1e-9, 5.92e-3, -1.38), 0.0);
        assert_eq!(temperature_law(100.0, 5.92e-3, -1.38), 0.0);
        assert_eq!(temperature_law(100.0, 0.0, 0.4), temperature_law(400.0, 0.0, 0.4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn psd_eta() -> impl Strategy<Value = NoiseCouplings> {
            proptest::array::uniform9(-1.0f64..1.0).prop_map(|a| {
                let b = Matrix3::from_row_slice(&a);
                NoiseCouplings::new(b * b.transpose()).unwrap()
            })
        }

        proptest! {
            #[test]
            fn vq_psd_for_psd_eta(eta in psd_eta(), p in proptest::array::uniform3(0.0f64..2.0)) {
                let v = build_vq(&eta, &p);
                prop_assert!(v.is_ok());
            }

            #[test]
            fn microscopic_eta_obeys_cauchy_schwarz(
                a in proptest::array::uniform6(-1.0f64..1.0),
                b in proptest::array::uniform6(-1.0f64..1.0),
                c in proptest::array::uniform6(-1.0f64..1.0),
                s in proptest::array::uniform6(0.0f64..1e-5),
                z in -0.02f64..0.02,
            ) {
                let cfg = reference_cavity();
                let mut k = crystal([a, b, c], s);
                k.position = z;
                for j in 0..3 {
                    for l in 0..3 {
                        let cjl = photoelastic_coupling(&k, j, l);
                        let bound = (photoelastic_coupling(&k, j, j) * photoelastic_coupling(&k, l, l)).sqrt();
                        prop_assert!(cjl.abs() <= bound * (1.0 + 1e-12) + 1e-300);
                        let e = eta_microscopic(&cfg, &k, j, l).abs();
                        let ej = eta_microscopic(&cfg, &k, j, j);
                        let el = eta_microscopic(&cfg, &k, l, l);
                        prop_assert!(e <= (ej * el).sqrt() * (1.0 + 1e-9) + 1e-300);
                    }
                }
            }

            #[test]
            fn profile_is_symmetric(z in -0.1f64..0.1) {
                let c = geometry_study_cavity();
                let a = waist_position_profile(&c, z);
                let b = waist_position_profile(&c, -z);
                prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-300));
                prop_assert!(a <= waist_position_profile(&c, 0.0) + 1e-15);
            }

            #[test]
            fn thin_crystal_profile_limit(z in -0.03f64..0.03) {
                let mut c = geometry_study_cavity();
                c.crystal_length = 1e-7;
                let n = c.modes[0].refractive_index;
                let z0 = c.rayleigh_length;
                let expect = n * c.crystal_length / z0 / (1.0 + (z / z0).powi(2));
                let got = waist_position_profile(&c, z);
                prop_assert!((got - expect).abs() <= 1e-6 * expect);
            }
        }
    }
}
