//! Parameter recovery from measurement-style data.
//!
//! All fits are linear least squares in the parameters. When every point has
//! an uncertainty the fit is weighted and parameter errors are absolute;
//! otherwise errors are scaled by the residual variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{q_index, CavityConfig, QuadratureCovariance, QUADRATURE_COUNT};
use crate::phonon::waist_position_profile;
use crate::presets::scaled_couplings;
use crate::roots::brent;
use crate::spectra::opo_spectrum;

/// Fitted parameter with its 1-sigma uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameters: Vec<FitParameter>,
    /// Weighted residual sum of squares (chi-square when weighted).
    pub rss: f64,
    pub dof: usize,
    /// `observed - fitted`, unweighted, in input order.
    pub residuals: Vec<f64>,
    /// Model-consistency problems found in the data.
    pub warnings: Vec<String>,
    /// Systematic effects not folded into the uncertainties.
    pub annotations: Vec<String>,
}

impl FitResult {
    pub fn parameter(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Value of the first parameter, the quantity of interest of every fitter.
    pub fn value(&self) -> f64 {
        self.parameters[0].value
    }

    pub fn stderr(&self) -> f64 {
        self.parameters[0].stderr
    }
}

/// Weighted linear least squares `y ~ X beta`, each column of `design`
/// being one regressor.
pub fn linear_least_squares(
    design: &[(&str, Vec<f64>)],
    y: &[f64],
    sigma: Option<&[f64]>,
) -> Result<FitResult> {
    let n = y.len();
    let k = design.len();
    if n < k + 1 {
        return Err(Error::InsufficientData {
            required: k + 1,
            found: n,
        });
    }
    if let Some(s) = sigma {
        if s.len() != n || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                reason: "uncertainties must be positive and finite, one per point".into(),
            });
        }
    }
    let w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|v| 1.0 / v).collect(),
        None => vec![1.0; n],
    };
    let x = DMatrix::from_fn(n, k, |i, j| design[j].1[i] * w[i]);
    let yw = DVector::from_fn(n, |i, _| y[i] * w[i]);
    let normal = x.transpose() * &x;
    let chol = normal.clone().cholesky().ok_or(Error::InvalidParameter {
        name: "design",
        reason: "regressors are degenerate".into(),
    })?;
    let beta = chol.solve(&(x.transpose() * &yw));
    let cov = chol.inverse();
    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..k).map(|j| design[j].1[i] * beta[j]).sum::<f64>())
        .collect();
    let rss: f64 = residuals.iter().zip(&w).map(|(r, wi)| (r * wi).powi(2)).sum();
    let dof = n - k;
    let scale = if sigma.is_some() { 1.0 } else { rss / dof as f64 };
    Ok(FitResult {
        parameters: design
            .iter()
            .enumerate()
            .map(|(j, (name, _))| FitParameter {
                name: name.to_string(),
                value: beta[j],
                stderr: (cov[(j, j)] * scale).max(0.0).sqrt(),
            })
            .collect(),
        rss,
        dof,
        residuals,
        warnings: Vec::new(),
        annotations: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerReference {
    Intracavity,
    ReflectedOutput,
    TransmittedOutput,
}

impl PowerReference {
    pub fn name(&self) -> &'static str {
        match self {
            PowerReference::Intracavity => "intracavity",
            PowerReference::ReflectedOutput => "reflected_output",
            PowerReference::TransmittedOutput => "transmitted_output",
        }
    }
}

impl std::str::FromStr for PowerReference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "intracavity" => Ok(Self::Intracavity),
            "reflected_output" => Ok(Self::ReflectedOutput),
            "transmitted_output" => Ok(Self::TransmittedOutput),
            other => Err(Error::InvalidParameter {
                name: "power_ref",
                reason: format!("`{other}` is not intracavity, reflected_output or transmitted_output"),
            }),
        }
    }
}

/// Intracavity power of mode `j` from a power measured at `reference`.
///
/// A transmitted beam carries `2 gamma_j P`. A resonant beam reflected off
/// the coupler carries `P (2 gamma_j - gamma'_j)^2 / (2 gamma_j)`, which
/// vanishes at impedance matching.
pub fn intracavity_power(config: &CavityConfig, j: usize, power: f64, reference: PowerReference) -> Result<f64> {
    let m = &config.modes[j];
    match reference {
        PowerReference::Intracavity => Ok(power),
        PowerReference::TransmittedOutput => Ok(power / (2.0 * m.gamma)),
        PowerReference::ReflectedOutput => {
            let d = 2.0 * m.gamma - m.total_loss();
            if d.abs() <= 1e-12 * m.total_loss() {
                return Err(Error::InvalidParameter {
                    name: "power_ref",
                    reason: format!("mode {j} is impedance matched; reflected power carries no intracavity information"),
                });
            }
            Ok(power * 2.0 * m.gamma / (d * d))
        }
    }
}

/// Output phase variance gain of a free cavity: `var_q - 1 = G eta_jj P_j`.
pub fn free_cavity_gain(config: &CavityConfig, j: usize, omega: f64) -> f64 {
    let m = &config.modes[j];
    2.0 * m.gamma / (omega * omega + m.total_loss().powi(2))
}

/// Output phase covariance gain between modes `j` and `k`:
/// `cov_q = G_jk eta_jk sqrt(P_j P_k)`.
pub fn free_cavity_cross_gain(config: &CavityConfig, j: usize, k: usize, omega: f64) -> f64 {
    let (a, b) = (&config.modes[j], &config.modes[k]);
    let (ga, gb) = (a.total_loss(), b.total_loss());
    let w2 = omega * omega;
    (4.0 * a.gamma * b.gamma).sqrt() * (ga * gb + w2) / ((w2 + ga * ga) * (w2 + gb * gb))
}

/// One point of a variance-versus-power scan of a single beam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerVarianceRecord {
    pub power: f64,
    pub power_reference: PowerReference,
    pub variance_p: f64,
    pub variance_q: f64,
    /// Uncertainty of either variance.
    pub sigma_var: Option<f64>,
}

/// Phase covariance of two beams at a pair of powers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossRecord {
    pub power_j: f64,
    pub power_k: f64,
    pub power_reference: PowerReference,
    pub covariance_q: f64,
    pub sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaFitOptions {
    /// Normalized analysis frequency of the measurement.
    pub omega: f64,
    /// Diagnostic only: fit an intercept instead of forcing zero excess noise
    /// at zero power.
    pub free_intercept: bool,
}

const POSITION_SYSTEMATIC: &str =
    "crystal-position dependence adds a ~20% systematic uncertainty not included in stderr";

fn common_sigma<I: Iterator<Item = Option<f64>>>(it: I) -> Option<Vec<f64>> {
    it.collect()
}

fn require_points(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::InsufficientData { required: 3, found: n });
    }
    Ok(())
}

fn check_reference<I: Iterator<Item = PowerReference>>(mut it: I) -> Result<()> {
    if let Some(first) = it.next() {
        if let Some(other) = it.find(|r| *r != first) {
            return Err(Error::MixedPowerReference {
                first: first.name().into(),
                second: other.name().into(),
            });
        }
    }
    Ok(())
}

fn proportional_fit(name: &str, x: Vec<f64>, y: &[f64], sigma: Option<&[f64]>, free_intercept: bool) -> Result<FitResult> {
    let n = x.len();
    let mut design = vec![(name, x)];
    if free_intercept {
        design.push(("intercept", vec![1.0; n]));
    }
    let mut fit = linear_least_squares(&design, y, sigma)?;
    if fit.value() < 0.0 {
        fit.warnings.push(format!(
            "negative fitted slope {:.4e}: noise below the free-cavity prediction",
            fit.value()
        ));
    }
    Ok(fit)
}

/// Self-coupling `eta_jj` from a phase-variance scan of mode `j`.
pub fn fit_eta_diagonal(
    records: &[PowerVarianceRecord],
    config: &CavityConfig,
    j: usize,
    options: &EtaFitOptions,
) -> Result<FitResult> {
    require_points(records.len())?;
    check_reference(records.iter().map(|r| r.power_reference))?;
    for r in records {
        if !(r.power >= 0.0) || !(r.variance_p > 0.0) || !(r.variance_q > 0.0) {
            return Err(Error::InvalidParameter {
                name: "record",
                reason: format!("power must be >= 0 and variances > 0, got {r:?}"),
            });
        }
    }
    let gain = free_cavity_gain(config, j, options.omega);
    let x = records
        .iter()
        .map(|r| Ok(gain * intracavity_power(config, j, r.power, r.power_reference)?))
        .collect::<Result<Vec<f64>>>()?;
    let y: Vec<f64> = records.iter().map(|r| r.variance_q - 1.0).collect();
    let sigma = common_sigma(records.iter().map(|r| r.sigma_var));
    let name = format!("eta_{j}{j}");
    let mut fit = proportional_fit(&name, x, &y, sigma.as_deref(), options.free_intercept)?;
    if let Some(w) = amplitude_sql_warning(records) {
        fit.warnings.push(w);
    }
    fit.annotations.push(POSITION_SYSTEMATIC.into());
    Ok(fit)
}

/// Amplitude variances should sit at the standard quantum level.
fn amplitude_sql_warning(records: &[PowerVarianceRecord]) -> Option<String> {
    if let Some(sigma) = common_sigma(records.iter().map(|r| r.sigma_var)) {
        let off = records
            .iter()
            .zip(&sigma)
            .filter(|(r, s)| (r.variance_p - 1.0).abs() > 3.0 * **s)
            .count();
        (off > 0).then(|| format!("{off} amplitude variance(s) deviate from the standard quantum level by more than 3 sigma"))
    } else {
        let n = records.len() as f64;
        let mean = records.iter().map(|r| r.variance_p).sum::<f64>() / n;
        let var = records.iter().map(|r| (r.variance_p - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        ((mean - 1.0).abs() > 3.0 * se).then(|| {
            format!("mean amplitude variance {mean:.4} deviates from the standard quantum level by more than 3 standard errors")
        })
    }
}

/// Cross coupling `eta_jk` from phase covariances against `sqrt(P_j P_k)`.
pub fn fit_eta_cross(
    records: &[CrossRecord],
    config: &CavityConfig,
    j: usize,
    k: usize,
    options: &EtaFitOptions,
) -> Result<FitResult> {
    require_points(records.len())?;
    check_reference(records.iter().map(|r| r.power_reference))?;
    if j == k {
        return Err(Error::InvalidParameter {
            name: "modes",
            reason: "cross fit needs two distinct modes".into(),
        });
    }
    let gain = free_cavity_cross_gain(config, j, k, options.omega);
    let x = records
        .iter()
        .map(|r| {
            if !(r.power_j >= 0.0 && r.power_k >= 0.0) {
                return Err(Error::InvalidParameter {
                    name: "record",
                    reason: format!("powers must be >= 0, got {r:?}"),
                });
            }
            let pj = intracavity_power(config, j, r.power_j, r.power_reference)?;
            let pk = intracavity_power(config, k, r.power_k, r.power_reference)?;
            Ok(gain * (pj * pk).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let y: Vec<f64> = records.iter().map(|r| r.covariance_q).collect();
    let sigma = common_sigma(records.iter().map(|r| r.sigma));
    let (a, b) = (j.min(k), j.max(k));
    let mut fit = proportional_fit(&format!("eta_{a}{b}"), x, &y, sigma.as_deref(), options.free_intercept)?;
    fit.annotations.push(POSITION_SYSTEMATIC.into());
    Ok(fit)
}

/// Single overall factor `c` in `eta_00(z) = c * profile(z)`.
pub fn fit_waist_profile(data: &[(f64, f64, Option<f64>)], config: &CavityConfig) -> Result<FitResult> {
    require_points(data.len())?;
    let x: Vec<f64> = data.iter().map(|d| waist_position_profile(config, d.0)).collect();
    let y: Vec<f64> = data.iter().map(|d| d.1).collect();
    let sigma = common_sigma(data.iter().map(|d| d.2));
    linear_least_squares(&[("factor", x)], &y, sigma.as_deref())
}

/// Straight line `eta_00 = slope * T + intercept`, with the temperature at
/// which it extrapolates to zero appended as a derived parameter.
pub fn fit_temperature(data: &[(f64, f64, Option<f64>)]) -> Result<FitResult> {
    require_points(data.len())?;
    let t: Vec<f64> = data.iter().map(|d| d.0).collect();
    let y: Vec<f64> = data.iter().map(|d| d.1).collect();
    let sigma = common_sigma(data.iter().map(|d| d.2));
    // center at the (weighted) mean so slope and level come out uncorrelated
    let weights: Vec<f64> = match &sigma {
        Some(s) => s.iter().map(|s| 1.0 / (s * s)).collect(),
        None => vec![1.0; t.len()],
    };
    let t_mean = t.iter().zip(&weights).map(|(t, w)| t * w).sum::<f64>() / weights.iter().sum::<f64>();
    let centered: Vec<f64> = t.iter().map(|v| v - t_mean).collect();
    let mut fit = linear_least_squares(
        &[("slope", centered), ("intercept", vec![1.0; t.len()])],
        &y,
        sigma.as_deref(),
    )?;
    let slope = fit.parameters[0].clone();
    let level = fit.parameters[1].clone();
    let intercept = level.value - slope.value * t_mean;
    let intercept_se = (level.stderr.powi(2) + (t_mean * slope.stderr).powi(2)).sqrt();
    fit.parameters[1] = FitParameter {
        name: "intercept".into(),
        value: intercept,
        stderr: intercept_se,
    };
    // T0 = t_mean - level / slope
    let t0 = t_mean - level.value / slope.value;
    let t0_se = ((level.stderr / slope.value).powi(2) + (level.value * slope.stderr / slope.value.powi(2)).powi(2)).sqrt();
    fit.parameters.push(FitParameter {
        name: "zero_crossing".into(),
        value: t0,
        stderr: t0_se,
    });
    Ok(fit)
}

/// Scalar function of the output covariance compared with a measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// Entry `(i, j)` of the covariance.
    Entry(usize, usize),
    /// Variance of a linear combination of quadratures.
    Combination([f64; QUADRATURE_COUNT]),
}

impl Observable {
    pub fn phase_variance(mode: usize) -> Self {
        Observable::Entry(q_index(mode), q_index(mode))
    }

    pub fn evaluate(&self, v: &QuadratureCovariance) -> f64 {
        match self {
            Observable::Entry(i, j) => v.get(*i, *j),
            Observable::Combination(c) => v.variance_of(c),
        }
    }
}

/// Another experiment's cavity and one observed noise value.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseProblem {
    pub config: CavityConfig,
    pub threshold_power: f64,
    pub pump_ratio: f64,
    pub omega: f64,
    pub observable: Observable,
    pub observed: f64,
    /// Evaluate after the configured detection efficiencies.
    pub detected: bool,
    /// Search interval for `eta_00` in 1/W.
    pub bracket: (f64, f64),
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub eta00: f64,
    pub bracket: (f64, f64),
    pub tolerance: f64,
    pub iterations: usize,
    /// `model(eta00) - observed` at the returned value.
    pub residual: f64,
}

impl InverseProblem {
    /// Model value of the observable with every coupling tied to `eta00`.
    pub fn model(&self, eta00: f64) -> Result<f64> {
        let s = opo_spectrum(
            &self.config,
            self.threshold_power,
            &scaled_couplings(eta00),
            self.pump_ratio,
            self.omega,
        )?;
        let s = if self.detected {
            s.with_detection(&self.config.detection_efficiencies())?
        } else {
            s
        };
        Ok(self.observable.evaluate(s.reported()))
    }
}

/// Solves `model(eta00) = observed` inside the bracket.
pub fn infer_eta00(problem: &InverseProblem) -> Result<Inference> {
    let (lo, hi) = problem.bracket;
    if !(lo >= 0.0 && hi > lo && problem.tolerance > 0.0) {
        return Err(Error::InvalidParameter {
            name: "bracket",
            reason: format!("need 0 <= lo < hi and positive tolerance, got [{lo}, {hi}], {}", problem.tolerance),
        });
    }
    // Surface model failures (invalid cavity, singular transfer) before the
    // search, which cannot propagate them.
    problem.model(lo)?;
    problem.model(hi)?;
    let root = brent(
        |x| problem.model(x).map(|v| v - problem.observed).unwrap_or(f64::NAN),
        lo,
        hi,
        problem.tolerance,
        200,
    )?;
    Ok(Inference {
        eta00: root.x,
        bracket: problem.bracket,
        tolerance: problem.tolerance,
        iterations: root.iterations,
        residual: root.f_x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{reference_cavity, REFERENCE_THRESHOLD_W};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const OMEGA: f64 = 0.025_871_939_500_151_24;

    fn opts() -> EtaFitOptions {
        EtaFitOptions {
            omega: OMEGA,
            free_intercept: false,
        }
    }

    fn diag_records(eta: f64, j: usize, reference: PowerReference, noise: f64, seed: u64) -> Vec<PowerVarianceRecord> {
        let c = reference_cavity();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        (1..=8)
            .map(|i| {
                let p = 0.02 * i as f64;
                let pin = intracavity_power(&c, j, p, reference).unwrap();
                let vq = 1.0 + free_cavity_gain(&c, j, OMEGA) * eta * pin;
                let s = noise * vq;
                PowerVarianceRecord {
                    power: p,
                    power_reference: reference,
                    variance_p: 1.0 + if noise > 0.0 { noise * unit.sample(&mut rng) } else { 0.0 },
                    variance_q: vq + if noise > 0.0 { s * unit.sample(&mut rng) } else { 0.0 },
                    sigma_var: (noise > 0.0).then_some(s),
                }
            })
            .collect()
    }

    #[test]
    fn gains_match_free_cavity_spectrum() {
        use crate::drift::free_cavity_drift;
        use crate::phonon::{build_vq, NoiseCouplings};
        use crate::spectra::output_covariance;
        let c = reference_cavity();
        let eta = NoiseCouplings::from_entries(0.5, 0.2, 0.2, 0.1, 0.1, 0.05).unwrap();
        let p = [0.3, 0.1, 0.05];
        let vq = build_vq(&eta, &p).unwrap();
        let s = output_covariance(&c, &free_cavity_drift(&c), &vq, OMEGA).unwrap();
        for j in 0..3 {
            assert_relative_eq!(
                s.v_total.get(q_index(j), q_index(j)) - 1.0,
                free_cavity_gain(&c, j, OMEGA) * eta.get(j, j) * p[j],
                max_relative = 1e-12
            );
            for k in j + 1..3 {
                assert_relative_eq!(
                    s.v_total.get(q_index(j), q_index(k)),
                    free_cavity_cross_gain(&c, j, k, OMEGA) * eta.get(j, k) * (p[j] * p[k]).sqrt(),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn power_conversions() {
        let c = reference_cavity();
        assert_eq!(intracavity_power(&c, 0, 0.1, PowerReference::Intracavity).unwrap(), 0.1);
        assert_relative_eq!(
            intracavity_power(&c, 1, 0.04, PowerReference::TransmittedOutput).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // reflected buildup: P_r = P_in ((g - mu)/g')^2, P = P_in 2 g / g'^2
        let m = &c.modes[0];
        let pin = 0.05;
        let pr = pin * ((m.gamma - m.mu) / m.total_loss()).powi(2);
        let p = pin * 2.0 * m.gamma / m.total_loss().powi(2);
        assert_relative_eq!(intracavity_power(&c, 0, pr, PowerReference::ReflectedOutput).unwrap(), p, max_relative = 1e-12);

        let mut matched = c.clone();
        matched.modes[0].mu = matched.modes[0].gamma;
        assert!(intracavity_power(&matched, 0, 0.1, PowerReference::ReflectedOutput).is_err());
    }

    #[test]
    fn diagonal_round_trip_noise_free() {
        let c = reference_cavity();
        let r = diag_records(0.53, 0, PowerReference::ReflectedOutput, 0.0, 0);
        let fit = fit_eta_diagonal(&r, &c, 0, &opts()).unwrap();
        assert_relative_eq!(fit.value(), 0.53, max_relative = 1e-9);
        assert!(fit.warnings.is_empty());
        assert_eq!(fit.dof, 7);
        assert_eq!(fit.residuals.len(), 8);

        let r = diag_records(0.15, 1, PowerReference::TransmittedOutput, 0.0, 0);
        let fit = fit_eta_diagonal(&r, &c, 1, &opts()).unwrap();
        assert_relative_eq!(fit.value(), 0.15, max_relative = 1e-9);
    }

    #[test]
    fn diagonal_round_trip_noisy() {
        let c = reference_cavity();
        let r = diag_records(0.53, 0, PowerReference::Intracavity, 0.01, 7);
        let fit = fit_eta_diagonal(&r, &c, 0, &opts()).unwrap();
        assert!((fit.value() - 0.53).abs() < 0.02 * 0.53);
        assert!((fit.value() - 0.53).abs() < 3.0 * fit.stderr());
    }

    #[test]
    fn shot_noise_data_gives_zero_slope() {
        let c = reference_cavity();
        let mut r = diag_records(0.53, 0, PowerReference::Intracavity, 0.0, 0);
        for x in r.iter_mut() {
            x.variance_q = 1.0;
        }
        let fit = fit_eta_diagonal(&r, &c, 0, &opts()).unwrap();
        assert_eq!(fit.value(), 0.0);
    }

    #[test]
    fn mixed_references_rejected() {
        let c = reference_cavity();
        let mut r = diag_records(0.53, 0, PowerReference::Intracavity, 0.0, 0);
        r[3].power_reference = PowerReference::ReflectedOutput;
        assert!(matches!(
            fit_eta_diagonal(&r, &c, 0, &opts()),
            Err(Error::MixedPowerReference { .. })
        ));
        assert!(matches!(
            fit_eta_diagonal(&r[..2], &c, 0, &opts()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn negative_slope_and_sql_violation_flagged() {
        let c = reference_cavity();
        let mut r = diag_records(0.53, 0, PowerReference::Intracavity, 0.01, 3);
        for x in r.iter_mut() {
            x.variance_q = 2.0 - x.variance_q;
        }
        let fit = fit_eta_diagonal(&r, &c, 0, &opts()).unwrap();
        assert!(fit.value() < 0.0);
        assert!(fit.warnings.iter().any(|w| w.contains("negative")));

        let mut r = diag_records(0.53, 0, PowerReference::Intracavity, 0.01, 3);
        r[2].variance_p = 1.2;
        let fit = fit_eta_diagonal(&r, &c, 0, &opts()).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("standard quantum level")));

        let mut r = diag_records(0.53, 0, PowerReference::Intracavity, 0.0, 0);
        for (i, x) in r.iter_mut().enumerate() {
            x.variance_p = 1.3 + 0.01 * i as f64;
        }
        let fit = fit_eta_diagonal(&r, &c, 0, &opts()).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("standard quantum level")));
    }

    #[test]
    fn free_intercept_diagnostic() {
        let c = reference_cavity();
        let mut r = diag_records(0.53, 0, PowerReference::Intracavity, 0.0, 0);
        for x in r.iter_mut() {
            x.variance_q += 0.05;
        }
        let fit = fit_eta_diagonal(&r, &c, 0, &EtaFitOptions { free_intercept: true, ..opts() }).unwrap();
        assert_relative_eq!(fit.value(), 0.53, max_relative = 1e-9);
        assert_relative_eq!(fit.parameter("intercept").unwrap().value, 0.05, max_relative = 1e-9);
    }

    fn cross_records(eta: f64, j: usize, k: usize) -> Vec<CrossRecord> {
        let c = reference_cavity();
        (1..=6)
            .map(|i| {
                let (pj, pk) = (0.05 * i as f64, 0.03 * i as f64 + 0.01);
                CrossRecord {
                    power_j: pj,
                    power_k: pk,
                    power_reference: PowerReference::Intracavity,
                    covariance_q: free_cavity_cross_gain(&c, j, k, OMEGA) * eta * (pj * pk).sqrt(),
                    sigma: None,
                }
            })
            .collect()
    }

    #[test]
    fn cross_round_trip() {
        let c = reference_cavity();
        let fit = fit_eta_cross(&cross_records(0.087, 1, 2), &c, 1, 2, &opts()).unwrap();
        assert_relative_eq!(fit.value(), 0.087, max_relative = 1e-9);
        assert_eq!(fit.parameters[0].name, "eta_12");

        let mut zero = cross_records(0.087, 1, 2);
        zero.iter_mut().for_each(|r| r.covariance_q = 0.0);
        assert_eq!(fit_eta_cross(&zero, &c, 1, 2, &opts()).unwrap().value(), 0.0);
    }

    #[test]
    fn cross_fit_respects_cauchy_schwarz() {
        let c = reference_cavity();
        let (e00, e11, e01) = (0.53, 0.15, 0.14);
        assert!(e01 <= f64::sqrt(e00 * e11));
        let d0 = fit_eta_diagonal(&diag_records(e00, 0, PowerReference::Intracavity, 0.0, 0), &c, 0, &opts()).unwrap();
        let d1 = fit_eta_diagonal(&diag_records(e11, 1, PowerReference::Intracavity, 0.0, 0), &c, 1, &opts()).unwrap();
        let x = fit_eta_cross(&cross_records(e01, 0, 1), &c, 0, 1, &opts()).unwrap();
        assert!(x.value() <= (d0.value() * d1.value()).sqrt());
    }

    #[test]
    fn waist_factor() {
        let c = reference_cavity();
        let zs: Vec<f64> = (0..21).map(|i| -0.02 + 0.002 * i as f64).collect();
        let data: Vec<_> = zs.iter().map(|&z| (z, 0.2 * waist_position_profile(&c, z), None)).collect();
        let fit = fit_waist_profile(&data, &c).unwrap();
        assert_relative_eq!(fit.value(), 0.2, max_relative = 1e-12);

        // symmetric data, symmetric residuals
        let data: Vec<_> = zs
            .iter()
            .map(|&z| (z, 0.2 * waist_position_profile(&c, z) * (1.0 + 0.5 * z * z), None))
            .collect();
        let fit = fit_waist_profile(&data, &c).unwrap();
        for i in 0..21 {
            assert_relative_eq!(fit.residuals[i], fit.residuals[20 - i], max_relative = 1e-9);
        }

        let v = 0.6;
        let fit = fit_waist_profile(&[(0.0, v, None); 3], &c).unwrap();
        assert_relative_eq!(fit.value(), v / 2.2731, max_relative = 1e-3);
    }

    #[test]
    fn waist_factor_with_noise() {
        let c = reference_cavity();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 0.01).unwrap();
        let data: Vec<_> = (0..25)
            .map(|i| {
                let z = -0.03 + 0.0025 * i as f64;
                let v = 0.2 * waist_position_profile(&c, z);
                (z, v * (1.0 + n.sample(&mut rng)), Some(0.01 * v))
            })
            .collect();
        let fit = fit_waist_profile(&data, &c).unwrap();
        assert!((fit.value() - 0.2).abs() < 0.01 * 0.2);
    }

    #[test]
    fn temperature_line() {
        let data: Vec<_> = (0..8)
            .map(|i| {
                let t = 257.0 + 18.0 * i as f64;
                (t, 5.92e-3 * t - 1.38, None)
            })
            .collect();
        let fit = fit_temperature(&data).unwrap();
        assert_relative_eq!(fit.parameter("slope").unwrap().value, 5.92e-3, max_relative = 1e-9);
        assert_relative_eq!(fit.parameter("intercept").unwrap().value, -1.38, max_relative = 1e-9);
        assert_relative_eq!(fit.parameter("zero_crossing").unwrap().value, 233.108, epsilon = 1e-3);

        let flat: Vec<_> = (0..5).map(|i| (250.0 + 10.0 * i as f64, 0.7, None)).collect();
        assert!(fit_temperature(&flat).unwrap().parameter("slope").unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn weighted_intercept_error_matches_uncentered_fit() {
        let data: Vec<_> = (0..10)
            .map(|i| {
                let t = 257.0 + 14.0 * i as f64;
                let y = 5.92e-3 * t - 1.38 + 0.01 * ((i * 7 % 5) as f64 - 2.0);
                (t, y, Some(0.05 * (5.92e-3 * t - 1.38)))
            })
            .collect();
        let fit = fit_temperature(&data).unwrap();
        let t: Vec<f64> = data.iter().map(|d| d.0).collect();
        let y: Vec<f64> = data.iter().map(|d| d.1).collect();
        let s: Vec<f64> = data.iter().map(|d| d.2.unwrap()).collect();
        let direct = linear_least_squares(&[("slope", t), ("intercept", vec![1.0; 10])], &y, Some(&s)).unwrap();
        for k in 0..2 {
            assert_relative_eq!(fit.parameters[k].value, direct.parameters[k].value, max_relative = 1e-9);
            assert_relative_eq!(fit.parameters[k].stderr, direct.parameters[k].stderr, max_relative = 1e-9);
        }
    }

    #[test]
    fn uncertainty_shrinks_as_inverse_sqrt_n() {
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 0.05).unwrap();
            let mut gen = |count: usize| -> Vec<(f64, f64, Option<f64>)> {
                (0..count)
                    .map(|i| {
                        let t = 257.0 + 126.0 * (i % 8) as f64 / 7.0;
                        (t, 5.92e-3 * t - 1.38 + n.sample(&mut rng), None)
                    })
                    .collect()
            };
            let a = fit_temperature(&gen(16)).unwrap();
            let b = fit_temperature(&gen(64)).unwrap();
            ratios.push(b.parameters[0].stderr / a.parameters[0].stderr);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
    }

    fn inverse(eta00: f64, observable: Observable) -> InverseProblem {
        let c = reference_cavity();
        let mut p = InverseProblem {
            config: c,
            threshold_power: REFERENCE_THRESHOLD_W,
            pump_ratio: 1.5,
            omega: OMEGA,
            observable,
            observed: 0.0,
            detected: true,
            bracket: (0.0, 2.0),
            tolerance: 1e-6,
        };
        p.observed = p.model(eta00).unwrap();
        p
    }

    #[test]
    fn infer_round_trip() {
        for eta in [0.24, 0.64, 1.16] {
            let r = infer_eta00(&inverse(eta, Observable::phase_variance(0))).unwrap();
            assert!((r.eta00 - eta).abs() < 1e-3, "{eta}: {r:?}");
        }
        let r = infer_eta00(&inverse(0.0, Observable::phase_variance(0))).unwrap();
        assert_eq!(r.eta00, 0.0);
    }

    #[test]
    fn infer_reports_no_solution() {
        let mut p = inverse(0.64, Observable::phase_variance(0));
        p.observed = p.model(5.0).unwrap();
        assert!(matches!(infer_eta00(&p), Err(Error::NoSignChange { .. })));
    }

    #[test]
    fn phase_observable_increasing_in_eta00() {
        let p = inverse(0.64, Observable::phase_variance(0));
        let mut last = f64::NEG_INFINITY;
        for i in 0..=40 {
            let v = p.model(0.05 * i as f64).unwrap();
            assert!(v > last);
            last = v;
        }
    }
}
