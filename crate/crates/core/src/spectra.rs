//! Analytic output covariance at a sideband frequency, and diagnostics
//! derived from it.
//!
//! With `T = [i omega I - M_A]^-1` the reflected output is
//! `X_out = M_gamma T (M_gamma X1 + M_mu X2 + Q) - X1`, which splits the
//! spectral covariance into
//!
//! ```text
//! V_pure  = M_g T M_g^2 T^H M_g - M_g (T + T^H) M_g
//! V_loss  = M_g T M_mu^2 T^H M_g
//! V_phase = M_g T V_Q T^H M_g
//! V       = I + V_pure + V_loss + V_phase
//! ```
//!
//! Reported components are the real part of the Hermitian spectral matrices.

use nalgebra::{Complex, Matrix6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{coupling_matrices, opo_drift, DriftMatrix};
use crate::error::{Error, Result};
use crate::model::{
    normalize_frequency, operating_point, p_index, q_index, symmetrize, upper_triangle, CavityConfig,
    QuadratureCovariance, MODE_COUNT, QUADRATURE_COUNT,
};
use crate::phonon::{build_vq, temperature_law, waist_position_profile, NoiseCouplings};

pub type ComplexMatrix6 = Matrix6<Complex<f64>>;

const MAX_CONDITION: f64 = 1e12;

fn complexify(m: &Matrix6<f64>) -> ComplexMatrix6 {
    m.map(|x| Complex::new(x, 0.0))
}

/// Real part of the Hermitian part.
fn hermitian_real(m: &ComplexMatrix6) -> Matrix6<f64> {
    symmetrize(&m.map(|z| z.re))
}

/// `[i omega I - M_A]^-1`, rejected when the system is singular or its
/// condition number exceeds 1e12.
pub fn intracavity_transfer(drift: &DriftMatrix, omega: f64) -> Result<ComplexMatrix6> {
    let a = ComplexMatrix6::identity() * Complex::new(0.0, omega) - complexify(&drift.matrix);
    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularTransfer { omega, condition });
    }
    let t = a
        .try_inverse()
        .ok_or(Error::SingularTransfer { omega, condition })?;
    let residual = (a * t - ComplexMatrix6::identity()).norm();
    if residual > 1e-10 {
        return Err(Error::SingularTransfer { omega, condition });
    }
    Ok(t)
}

/// Output covariance with its additive components.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumResult {
    pub omega: f64,
    pub v_total: QuadratureCovariance,
    pub v_pure: Matrix6<f64>,
    pub v_loss: Matrix6<f64>,
    pub v_phase: Matrix6<f64>,
    /// Complex (not symmetrized) squeezing term, kept for the purity test.
    pub pure_spectral: ComplexMatrix6,
    pub detected: Option<QuadratureCovariance>,
}

impl SpectrumResult {
    /// `Det[I + V_pure]` of the complex spectral matrix; equals 1 for a pure
    /// output state.
    pub fn purity_determinant(&self) -> f64 {
        (ComplexMatrix6::identity() + self.pure_spectral).determinant().re
    }

    /// Largest entry of `V - I - V_pure - V_loss - V_phase`.
    pub fn component_residual(&self) -> f64 {
        (self.v_total.matrix() - Matrix6::identity() - self.v_pure - self.v_loss - self.v_phase).amax()
    }

    pub fn with_detection(mut self, efficiencies: &[f64; MODE_COUNT]) -> Result<Self> {
        self.detected = Some(apply_detection(&self.v_total, efficiencies)?);
        Ok(self)
    }

    /// Detected covariance when present, otherwise the cavity output.
    pub fn reported(&self) -> &QuadratureCovariance {
        self.detected.as_ref().unwrap_or(&self.v_total)
    }
}

/// Output covariance for vacuum/coherent inputs and phonon noise `v_q`.
pub fn output_covariance(
    config: &CavityConfig,
    drift: &DriftMatrix,
    v_q: &QuadratureCovariance,
    omega: f64,
) -> Result<SpectrumResult> {
    let t = intracavity_transfer(drift, omega)?;
    let th = t.adjoint();
    let c = coupling_matrices(config);
    let mg = complexify(&c.m_gamma);
    let mm = complexify(&c.m_mu);
    let vq = complexify(v_q.matrix());

    let left = mg * t;
    let right = th * mg;
    let pure = left * mg * mg * right - mg * (t + th) * mg;
    let loss = left * mm * mm * right;
    let phase = left * vq * right;

    let v_pure = hermitian_real(&pure);
    let v_loss = hermitian_real(&loss);
    let v_phase = hermitian_real(&phase);
    let total = Matrix6::identity() + v_pure + v_loss + v_phase;
    Ok(SpectrumResult {
        omega,
        v_total: QuadratureCovariance::new(total)?,
        v_pure,
        v_loss,
        v_phase,
        pure_spectral: pure,
        detected: None,
    })
}

/// Beam-splitter loss before detection: each mode keeps a fraction
/// `efficiencies[j]` of its field and picks up vacuum for the rest.
pub fn apply_detection(
    v: &QuadratureCovariance,
    efficiencies: &[f64; MODE_COUNT],
) -> Result<QuadratureCovariance> {
    if let Some(e) = efficiencies.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::InvalidParameter {
            name: "detection_efficiency",
            reason: format!("must lie in [0, 1], got {e}"),
        });
    }
    let amp = Matrix6::from_diagonal(&nalgebra::Vector6::from_fn(|i, _| efficiencies[i / 2].sqrt()));
    let vac = Matrix6::from_diagonal(&nalgebra::Vector6::from_fn(|i, _| 1.0 - efficiencies[i / 2]));
    QuadratureCovariance::new(symmetrize(&(amp * v.matrix() * amp + vac)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuanResult {
    pub value: f64,
    pub entangled: bool,
}

/// Signal-idler inseparability sum
/// `Var[(p1 - p2)/sqrt2] + Var[(q1 + q2)/sqrt2]`, entangled below 2.
pub fn duan_criterion(v: &QuadratureCovariance) -> DuanResult {
    let (p1, p2, q1, q2) = (p_index(1), p_index(2), q_index(1), q_index(2));
    let amplitude = (v.get(p1, p1) + v.get(p2, p2) - 2.0 * v.get(p1, p2)) / 2.0;
    let phase = (v.get(q1, q1) + v.get(q2, q2) + 2.0 * v.get(q1, q2)) / 2.0;
    let value = amplitude + phase;
    DuanResult {
        value,
        entangled: value < 2.0,
    }
}

/// Coefficients `(h, g)` over modes of one amplitude/phase combination.
type Combination = ([f64; MODE_COUNT], [f64; MODE_COUNT]);

fn vlf_combinations() -> [Combination; 3] {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let b = 1.0 / 3f64.sqrt();
    [
        ([0.0, a, -a], [-b, b, b]),
        ([a, a, 0.0], [b, -b, -b]),
        ([a, 0.0, a], [b, -b, -b]),
    ]
}

/// Separability bound of `Var[h.p] + Var[g.q]` for the bipartition that
/// isolates `mode`, with vacuum variance 1.
fn bipartition_bound((h, g): &Combination, mode: usize) -> f64 {
    let single = (h[mode] * g[mode]).abs();
    let rest: f64 = (0..MODE_COUNT).filter(|&k| k != mode).map(|k| h[k] * g[k]).sum();
    2.0 * (single + rest.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlfResult {
    /// Combination values, equal to 2 for vacuum.
    pub values: [f64; 3],
    /// Vacuum reference level the values are compared against.
    pub boundary: f64,
    pub below_boundary: [bool; 3],
    /// Separability bound of each combination, over the bipartitions it
    /// tests.
    pub separability_bounds: [f64; 3],
    /// Every bipartition is excluded by at least one combination.
    pub genuine_tripartite: bool,
}

/// Three van Loock-Furusawa style combinations with unit gains:
///
/// 1. `Var[(p1 - p2)/sqrt2] + Var[(q1 + q2 - q0)/sqrt3]`
/// 2. `Var[(p0 + p1)/sqrt2] + Var[(q0 - q1 - q2)/sqrt3]`
/// 3. `Var[(p0 + p2)/sqrt2] + Var[(q0 - q1 - q2)/sqrt3]`
pub fn vlf_tripartite(v: &QuadratureCovariance) -> VlfResult {
    let combos = vlf_combinations();
    let mut values = [0.0; 3];
    let mut bounds = [0.0; 3];
    let mut excluded = [false; MODE_COUNT];
    for (c, combo) in combos.iter().enumerate() {
        let (h, g) = combo;
        let mut u = [0.0; QUADRATURE_COUNT];
        let mut w = [0.0; QUADRATURE_COUNT];
        for k in 0..MODE_COUNT {
            u[p_index(k)] = h[k];
            w[q_index(k)] = g[k];
        }
        values[c] = v.variance_of(&u) + v.variance_of(&w);
        let mut min_bound = f64::INFINITY;
        for (mode, ex) in excluded.iter_mut().enumerate() {
            let b = bipartition_bound(combo, mode);
            if b > 0.0 {
                min_bound = min_bound.min(b);
                if values[c] < b {
                    *ex = true;
                }
            }
        }
        bounds[c] = min_bound;
    }
    VlfResult {
        values,
        boundary: 2.0,
        below_boundary: values.map(|x| x < 2.0),
        separability_bounds: bounds,
        genuine_tripartite: excluded.iter().all(|&e| e),
    }
}

/// Oscillator spectrum at `(sigma, omega)` with couplings `eta`.
pub fn opo_spectrum(
    config: &CavityConfig,
    threshold_power: f64,
    eta: &NoiseCouplings,
    pump_ratio: f64,
    omega: f64,
) -> Result<SpectrumResult> {
    let op = operating_point(config, pump_ratio, threshold_power)?;
    let drift = opo_drift(config, &op)?;
    let vq = build_vq(eta, &op.intracavity_powers)?;
    output_covariance(config, &drift, &vq, omega)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PumpRatio,
    Frequency,
    Temperature,
    CrystalZ,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::PumpRatio => "pump_ratio",
            SweepAxis::Frequency => "frequency",
            SweepAxis::Temperature => "temperature",
            SweepAxis::CrystalZ => "crystal_z",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pump_ratio" => Ok(Self::PumpRatio),
            "frequency" => Ok(Self::Frequency),
            "temperature" => Ok(Self::Temperature),
            "crystal_z" => Ok(Self::CrystalZ),
            other => Err(Error::InvalidParameter {
                name: "axis",
                reason: format!(
                    "unknown axis `{other}` (expected pump_ratio, frequency, temperature or crystal_z)"
                ),
            }),
        }
    }
}

/// `name:start:stop:count` grid description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub axis: SweepAxis,
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.start],
            n => (0..n)
                .map(|i| self.start + (self.stop - self.start) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

impl std::str::FromStr for AxisSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = |reason: String| Error::InvalidParameter { name: "axis", reason };
        if parts.len() != 4 {
            return Err(bad(format!("expected name:start:stop:count, got `{s}`")));
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad(format!("`{t}` is not a number")));
        Ok(Self {
            axis: parts[0].parse()?,
            start: num(parts[1])?,
            stop: num(parts[2])?,
            count: parts[3]
                .parse()
                .map_err(|_| bad(format!("`{}` is not a point count", parts[3])))?,
        })
    }
}

/// Parameters held fixed while one axis is swept.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepContext {
    pub config: CavityConfig,
    pub threshold_power: f64,
    /// Couplings at the reference temperature and crystal position.
    pub couplings: NoiseCouplings,
    pub pump_ratio: f64,
    pub frequency_hz: f64,
    /// `(slope, intercept)` of the pump self-coupling against temperature,
    /// required for temperature sweeps.
    pub temperature_law: Option<(f64, f64)>,
    pub apply_detection: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumSummary {
    pub entries: [f64; 21],
    pub duan: DuanResult,
    pub vlf: VlfResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub omega: f64,
    pub outcome: std::result::Result<SpectrumSummary, String>,
}

fn sweep_point(ctx: &SweepContext, axis: SweepAxis, x: f64) -> (f64, Result<SpectrumSummary>) {
    let mut sigma = ctx.pump_ratio;
    let mut f_hz = ctx.frequency_hz;
    let mut eta = ctx.couplings;
    let omega = match axis {
        SweepAxis::Frequency => {
            f_hz = x;
            normalize_frequency(f_hz, &ctx.config)
        }
        _ => normalize_frequency(f_hz, &ctx.config),
    };
    let omega = match omega {
        Ok(w) => w,
        Err(e) => return (f64::NAN, Err(e)),
    };
    let prepared: Result<()> = (|| {
        match axis {
            SweepAxis::PumpRatio => sigma = x,
            SweepAxis::Frequency => {}
            SweepAxis::Temperature => {
                let (slope, intercept) = ctx.temperature_law.ok_or(Error::InvalidParameter {
                    name: "temperature_law",
                    reason: "temperature sweep needs slope and intercept".into(),
                })?;
                let base = ctx.couplings.get(0, 0);
                if !(base > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "eta",
                        reason: "temperature sweep needs a positive pump self-coupling".into(),
                    });
                }
                eta = ctx.couplings.scaled(temperature_law(x, slope, intercept) / base);
            }
            SweepAxis::CrystalZ => {
                let factor = waist_position_profile(&ctx.config, x) / waist_position_profile(&ctx.config, 0.0);
                eta = ctx.couplings.scaled(factor);
            }
        }
        Ok(())
    })();
    if let Err(e) = prepared {
        return (omega, Err(e));
    }
    let result = opo_spectrum(&ctx.config, ctx.threshold_power, &eta, sigma, omega).and_then(|s| {
        if ctx.apply_detection {
            s.with_detection(&ctx.config.detection_efficiencies())
        } else {
            Ok(s)
        }
    });
    (
        omega,
        result.map(|s| {
            let v = s.reported();
            SpectrumSummary {
                entries: upper_triangle(v.matrix()),
                duan: duan_criterion(v),
                vlf: vlf_tripartite(v),
            }
        }),
    )
}

/// Evaluates the model along one axis. Points run in parallel; rows come back
/// in grid order, and a failing point is recorded in its row.
pub fn sweep(ctx: &SweepContext, spec: &AxisSpec) -> Vec<SweepRow> {
    spec.values()
        .into_par_iter()
        .map(|x| {
            let (omega, r) = sweep_point(ctx, spec.axis, x);
            SweepRow {
                axis_value: x,
                omega,
                outcome: r.map_err(|e| e.to_string()),
            }
        })
        .collect()
}
