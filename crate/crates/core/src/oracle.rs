//! Monte-Carlo check of the analytic spectra.
//!
//! The linearized Langevin equation `dX = M_A X dt + dW` is integrated with
//! Euler-Maruyama, where `dW = M_gamma dW1 + M_mu dW2 + L dWq` and
//! `L L^T = V_Q`. The system is linear with additive noise, so the scheme is
//! exact in distribution up to the `O(dt)` error of the drift step and no
//! higher-order integrator is needed.
//!
//! The reflected output is reconstructed per step as
//! `Y_n = M_gamma (X_n + X_{n+1}) / 2 - dW1_n / dt` from the recorded vacuum
//! input stream. Spectra are estimated with Welch averaging: Hann-tapered
//! segments with 50% overlap and the segment mean removed. Standard errors come
//! from the scatter of up to 128 contiguous batch means over the ordered
//! segment list.

use nalgebra::{Complex, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{coupling_matrices, free_cavity_drift, opo_drift, CouplingMatrices, DriftMatrix};
use crate::error::{Error, Result};
use crate::model::{
    operating_point, p_index, CavityConfig, OperatingPoint, QuadratureCovariance, MODE_COUNT, QUADRATURE_COUNT,
};
use crate::phonon::{build_vq, NoiseCouplings, PLANCK, SPEED_OF_LIGHT};
use crate::spectra::{output_covariance, SpectrumResult};

pub type Vec6 = [f64; QUADRATURE_COUNT];

const DIVERGENCE_NORM: f64 = 1e6;
const MIN_SEGMENTS: usize = 16;
const SE_BATCHES: usize = 128;
/// Minimum run length, in periods of the lowest target frequency.
const MIN_PERIODS: f64 = 50.0;
/// Minimum segment length, in units of `1/omega`.
const MIN_SEGMENT_SPAN: f64 = 20.0;

/// Drift, input couplings and phonon covariance of one simulated system.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSystem {
    pub config: CavityConfig,
    pub drift: DriftMatrix,
    pub couplings: CouplingMatrices,
    pub v_q: QuadratureCovariance,
    /// When false every noise increment is zero.
    pub noise_enabled: bool,
}

impl OracleSystem {
    pub fn free_cavity(config: &CavityConfig) -> Self {
        Self {
            config: config.clone(),
            drift: free_cavity_drift(config),
            couplings: coupling_matrices(config),
            v_q: QuadratureCovariance::zeros(),
            noise_enabled: true,
        }
    }

    pub fn opo(config: &CavityConfig, threshold_power: f64, eta: &NoiseCouplings, pump_ratio: f64) -> Result<Self> {
        let op = operating_point(config, pump_ratio, threshold_power)?;
        Ok(Self {
            config: config.clone(),
            drift: opo_drift(config, &op)?,
            couplings: coupling_matrices(config),
            v_q: build_vq(eta, &op.intracavity_powers)?,
            noise_enabled: true,
        })
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_enabled = false;
        self
    }

    /// Analytic counterpart of the simulated output spectrum.
    pub fn analytic(&self, omega: f64) -> Result<SpectrumResult> {
        output_covariance(&self.config, &self.drift, &self.v_q, omega)
    }

    /// Largest admissible Euler step, `0.1 / max(|eigenvalue|, total loss)`.
    pub fn max_time_step(&self) -> f64 {
        let loss = self.config.modes.iter().map(|m| m.total_loss()).fold(0.0, f64::max);
        0.1 / self.drift.spectral_radius().max(loss)
    }

    /// Slowest nonzero relaxation rate of the drift.
    pub fn slowest_decay(&self) -> f64 {
        let scale = self.drift.spectral_radius().max(f64::MIN_POSITIVE);
        self.drift
            .matrix
            .complex_eigenvalues()
            .iter()
            .map(|z| -z.re)
            .filter(|&r| r > 1e-9 * scale)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationPlan {
    /// Step in round-trip units.
    pub time_step: f64,
    /// Steps per trajectory, burn-in included.
    pub n_steps: usize,
    pub n_trajectories: usize,
    pub master_seed: u64,
    /// Leading steps excluded from every estimate.
    pub burn_in: usize,
}

impl SimulationPlan {
    /// Checks the stability bound and, when a target frequency is given,
    /// that each trajectory spans at least 50 of its periods.
    pub fn validate(&self, system: &OracleSystem, omega_min: Option<f64>) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidParameter { name: "plan", reason });
        let bound = system.max_time_step();
        if !(self.time_step > 0.0 && self.time_step <= bound * (1.0 + 1e-12)) {
            return bad(format!("time_step {} outside (0, {bound}]", self.time_step));
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be positive".into());
        }
        if self.burn_in >= self.n_steps {
            return bad(format!("burn_in {} must be below n_steps {}", self.burn_in, self.n_steps));
        }
        if let Some(w) = omega_min {
            let span = self.n_steps as f64 * self.time_step;
            let needed = MIN_PERIODS * 2.0 * std::f64::consts::PI / w;
            if span < needed {
                return bad(format!("trajectory spans {span} round trips, need {needed} for omega {w}"));
            }
        }
        Ok(())
    }

    /// Plan and spectral settings for about `target_segments` segments of
    /// `cycles` periods of `omega` each.
    ///
    /// The step is the largest value not above `min(max_time_step, dt_cap)`
    /// that fits an even whole number of steps in one segment.
    pub fn design(
        system: &OracleSystem,
        omega: f64,
        cycles: f64,
        target_segments: usize,
        n_trajectories: usize,
        master_seed: u64,
        dt_cap: f64,
    ) -> Result<(SimulationPlan, SpectralSettings)> {
        if !(omega > 0.0 && cycles > 0.0) || n_trajectories == 0 {
            return Err(Error::InvalidParameter {
                name: "plan",
                reason: "omega, cycles and n_trajectories must be positive".into(),
            });
        }
        let dt0 = system.max_time_step().min(dt_cap);
        let span = cycles * 2.0 * std::f64::consts::PI / omega;
        let mut segment_steps = (span / dt0).ceil() as usize;
        segment_steps += segment_steps % 2;
        let time_step = span / segment_steps as f64;
        let hop = segment_steps / 2;
        let per_traj = target_segments.div_ceil(n_trajectories).max(1);
        let decay = system.slowest_decay();
        let burn_in = if decay.is_finite() {
            (20.0 / decay / time_step).ceil() as usize
        } else {
            0
        };
        let min_steps = (MIN_PERIODS * 2.0 * std::f64::consts::PI / omega / time_step).ceil() as usize;
        let plan = SimulationPlan {
            time_step,
            n_steps: (burn_in + (per_traj + 1) * hop).max(min_steps),
            n_trajectories,
            master_seed,
            burn_in,
        };
        Ok((
            plan,
            SpectralSettings {
                omegas: vec![omega],
                segment_steps,
            },
        ))
    }

    /// Generator of trajectory `index`; independent of thread scheduling.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Factor `L` (as columns) with `L L^T = m`, by Cholesky with diagonal
/// pivoting. Columns stop once the remaining diagonal is negligible, so a
/// rank-deficient PSD matrix yields fewer than six columns.
pub fn pivoted_cholesky(m: &Matrix6<f64>) -> Result<Vec<Vec6>> {
    let scale = m.diagonal().amax();
    if scale == 0.0 {
        return Ok(Vec::new());
    }
    let tol = 1e-12 * scale;
    let mut a = *m;
    let mut cols = Vec::new();
    let mut used = [false; QUADRATURE_COUNT];
    for _ in 0..QUADRATURE_COUNT {
        let (piv, d) = (0..QUADRATURE_COUNT)
            .filter(|&i| !used[i])
            .map(|i| (i, a[(i, i)]))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if d <= tol {
            let neg = (0..QUADRATURE_COUNT).filter(|&i| !used[i]).map(|i| a[(i, i)]).fold(0.0, f64::min);
            if neg < -1e-9 * scale {
                return Err(Error::NotPositiveSemidefinite {
                    what: "V_Q",
                    min_eigenvalue: neg,
                });
            }
            break;
        }
        used[piv] = true;
        let s = d.sqrt();
        let mut col = [0.0; QUADRATURE_COUNT];
        for i in 0..QUADRATURE_COUNT {
            col[i] = if used[i] && i != piv { 0.0 } else { a[(i, piv)] / s };
        }
        for i in 0..QUADRATURE_COUNT {
            for j in 0..QUADRATURE_COUNT {
                a[(i, j)] -= col[i] * col[j];
            }
        }
        cols.push(col);
    }
    let mut rebuilt = Matrix6::zeros();
    for c in &cols {
        for i in 0..QUADRATURE_COUNT {
            for j in 0..QUADRATURE_COUNT {
                rebuilt[(i, j)] += c[i] * c[j];
            }
        }
    }
    let err = (rebuilt - m).amax();
    if err > 1e-9 * scale {
        return Err(Error::NotPositiveSemidefinite {
            what: "V_Q",
            min_eigenvalue: -err,
        });
    }
    Ok(cols)
}

/// One Euler increment and the vacuum input it contains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseIncrement {
    /// `(M_gamma xi1 + M_mu xi2 + L xi_q) sqrt(dt)`.
    pub increment: Vec6,
    /// `xi1 sqrt(dt)`, the vacuum entering through the coupler.
    pub vacuum: Vec6,
}

/// Pre-factored noise channels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSource {
    gamma: Vec6,
    mu: Vec6,
    phonon: Vec<Vec6>,
}

impl NoiseSource {
    pub fn new(couplings: &CouplingMatrices, v_q: &QuadratureCovariance) -> Result<Self> {
        Ok(Self {
            gamma: std::array::from_fn(|i| couplings.m_gamma[(i, i)]),
            mu: std::array::from_fn(|i| couplings.m_mu[(i, i)]),
            phonon: pivoted_cholesky(v_q.matrix())?,
        })
    }

    /// Number of standard normals drawn per step.
    pub fn draws_per_step(&self) -> usize {
        2 * QUADRATURE_COUNT + self.phonon.len()
    }

    pub fn draw<R: Rng>(&self, dt: f64, rng: &mut R) -> NoiseIncrement {
        let sdt = dt.sqrt();
        let mut increment = [0.0; QUADRATURE_COUNT];
        let mut vacuum = [0.0; QUADRATURE_COUNT];
        for i in 0..QUADRATURE_COUNT {
            let x: f64 = rng.sample(StandardNormal);
            vacuum[i] = x * sdt;
            increment[i] = self.gamma[i] * vacuum[i];
        }
        for i in 0..QUADRATURE_COUNT {
            let x: f64 = rng.sample(StandardNormal);
            increment[i] += self.mu[i] * x * sdt;
        }
        for col in &self.phonon {
            let x: f64 = rng.sample(StandardNormal);
            for i in 0..QUADRATURE_COUNT {
                increment[i] += col[i] * x * sdt;
            }
        }
        NoiseIncrement { increment, vacuum }
    }
}

/// Single increment; factors `v_q` on every call, so loops should hold a
/// [`NoiseSource`] instead.
pub fn generate_noise_increments<R: Rng>(
    couplings: &CouplingMatrices,
    v_q: &QuadratureCovariance,
    time_step: f64,
    rng: &mut R,
) -> Result<NoiseIncrement> {
    Ok(NoiseSource::new(couplings, v_q)?.draw(time_step, rng))
}

#[inline]
fn euler_step(a: &Matrix6<f64>, x: &Vec6, dt: f64, dw: &Vec6) -> Vec6 {
    let mut next = [0.0; QUADRATURE_COUNT];
    for i in 0..QUADRATURE_COUNT {
        let mut s = 0.0;
        for j in 0..QUADRATURE_COUNT {
            s += a[(i, j)] * x[j];
        }
        next[i] = x[i] + dt * s + dw[i];
    }
    next
}

#[inline]
fn output_sample(m_gamma: &Vec6, x: &Vec6, next: &Vec6, vacuum: &Vec6, dt: f64) -> Vec6 {
    std::array::from_fn(|i| m_gamma[i] * 0.5 * (x[i] + next[i]) - vacuum[i] / dt)
}

fn norm_sq(x: &Vec6) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Runs one trajectory, handing `(step, X_n, X_{n+1}, vacuum_n)` to `visit`.
fn run_trajectory<F: FnMut(usize, &Vec6, &Vec6, &Vec6)>(
    system: &OracleSystem,
    noise: &NoiseSource,
    plan: &SimulationPlan,
    index: usize,
    initial: &Vec6,
    mut visit: F,
) -> Result<()> {
    let mut rng = plan.rng(index);
    let dt = plan.time_step;
    let a = system.drift.matrix;
    let limit = DIVERGENCE_NORM * DIVERGENCE_NORM;
    let quiet = NoiseIncrement {
        increment: [0.0; QUADRATURE_COUNT],
        vacuum: [0.0; QUADRATURE_COUNT],
    };
    let mut x = *initial;
    for step in 0..plan.n_steps {
        let inc = if system.noise_enabled { noise.draw(dt, &mut rng) } else { quiet };
        let next = euler_step(&a, &x, dt, &inc.increment);
        let n2 = norm_sq(&next);
        if !(n2 <= limit) {
            return Err(Error::Divergence {
                trajectory: index,
                step: step + 1,
                norm: n2.sqrt(),
            });
        }
        visit(step, &x, &next, &inc.vacuum);
        x = next;
    }
    Ok(())
}

/// Stored sample paths with their vacuum input streams.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub plan: SimulationPlan,
    pub m_gamma: Vec6,
    /// `states[t]` has `n_steps + 1` entries starting at the initial state.
    pub states: Vec<Vec<Vec6>>,
    /// `vacuum[t][n]` is the coupler input over step `n`.
    pub vacuum: Vec<Vec<Vec6>>,
}

impl TrajectorySet {
    /// Reflected output samples of trajectory `t` after burn-in.
    pub fn outputs(&self, t: usize) -> impl Iterator<Item = Vec6> + '_ {
        let dt = self.plan.time_step;
        let s = &self.states[t];
        let v = &self.vacuum[t];
        (self.plan.burn_in..self.plan.n_steps).map(move |n| output_sample(&self.m_gamma, &s[n], &s[n + 1], &v[n], dt))
    }
}

/// Integrates `plan.n_trajectories` paths from `initial`, keeping every state.
pub fn integrate(system: &OracleSystem, plan: &SimulationPlan, initial: &Vec6) -> Result<TrajectorySet> {
    plan.validate(system, None)?;
    let noise = NoiseSource::new(&system.couplings, &system.v_q)?;
    let runs: Vec<(Vec<Vec6>, Vec<Vec6>)> = (0..plan.n_trajectories)
        .into_par_iter()
        .map(|t| {
            let mut states = Vec::with_capacity(plan.n_steps + 1);
            let mut vac = Vec::with_capacity(plan.n_steps);
            states.push(*initial);
            run_trajectory(system, &noise, plan, t, initial, |_, _, next, v| {
                states.push(*next);
                vac.push(*v);
            })?;
            Ok((states, vac))
        })
        .collect::<Result<_>>()?;
    let (states, vacuum) = runs.into_iter().unzip();
    Ok(TrajectorySet {
        plan: *plan,
        m_gamma: std::array::from_fn(|i| system.couplings.m_gamma[(i, i)]),
        states,
        vacuum,
    })
}

/// Target frequencies and segment length for Welch averaging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSettings {
    pub omegas: Vec<f64>,
    /// Samples per segment; consecutive segments overlap by half.
    pub segment_steps: usize,
}

impl SpectralSettings {
    fn validate(&self, plan: &SimulationPlan) -> Result<f64> {
        let bad = |reason: String| Err(Error::InvalidParameter { name: "spectral", reason });
        if self.omegas.is_empty() || self.omegas.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("target frequencies must be positive".into());
        }
        if self.segment_steps < 4 || self.segment_steps % 2 != 0 {
            return bad(format!("segment_steps {} must be even and at least 4", self.segment_steps));
        }
        let w_min = self.omegas.iter().copied().fold(f64::INFINITY, f64::min);
        let span = self.segment_steps as f64 * plan.time_step;
        if span * w_min < MIN_SEGMENT_SPAN {
            return bad(format!("segment spans {span} round trips, need at least {MIN_SEGMENT_SPAN}/omega"));
        }
        Ok(w_min)
    }
}

fn hann(len: usize) -> Vec<f64> {
    // periodic form, so 50% overlapped windows sum to a constant
    (0..len)
        .map(|n| {
            let s = (std::f64::consts::PI * n as f64 / len as f64).sin();
            s * s
        })
        .collect()
}

/// Variance inflation of 50%-overlapped Welch averaging relative to the
/// same number of independent segments.
fn overlap_inflation(w: &[f64]) -> f64 {
    let hop = w.len() / 2;
    let num: f64 = (0..w.len() - hop).map(|n| w[n] * w[n + hop]).sum();
    let den: f64 = w.iter().map(|x| x * x).sum();
    let rho = num / den;
    1.0 + 2.0 * rho * rho
}

struct Kernel {
    coeff: Vec<Complex<f64>>,
    coeff_sum: Complex<f64>,
    norm: f64,
}

#[derive(Clone, Copy)]
struct Slot {
    active: bool,
    count: usize,
    acc: [Complex<f64>; QUADRATURE_COUNT],
    sum: Vec6,
}

const EMPTY_SLOT: Slot = Slot {
    active: false,
    count: 0,
    acc: [Complex { re: 0.0, im: 0.0 }; QUADRATURE_COUNT],
    sum: [0.0; QUADRATURE_COUNT],
};

type Periodogram = [f64; 21];

/// Streaming Welch accumulator for one trajectory.
struct Welch<'k> {
    kernels: &'k [Kernel],
    len: usize,
    hop: usize,
    samples: usize,
    slots: Vec<[Slot; 2]>,
    out: Vec<Vec<Periodogram>>,
}

impl<'k> Welch<'k> {
    fn new(kernels: &'k [Kernel], len: usize) -> Self {
        Self {
            kernels,
            len,
            hop: len / 2,
            samples: 0,
            slots: vec![[EMPTY_SLOT; 2]; kernels.len()],
            out: vec![Vec::new(); kernels.len()],
        }
    }

    fn push(&mut self, y: &Vec6) {
        let m = self.samples;
        self.samples += 1;
        let start = m % self.hop == 0;
        let parity = (m / self.hop) % 2;
        for (k, kernel) in self.kernels.iter().enumerate() {
            if start {
                self.slots[k][parity] = Slot {
                    active: true,
                    ..EMPTY_SLOT
                };
            }
            for slot in self.slots[k].iter_mut() {
                if !slot.active {
                    continue;
                }
                let c = kernel.coeff[slot.count];
                for i in 0..QUADRATURE_COUNT {
                    slot.acc[i] += c * y[i];
                    slot.sum[i] += y[i];
                }
                slot.count += 1;
                if slot.count == self.len {
                    slot.active = false;
                    let inv = 1.0 / self.len as f64;
                    let f: [Complex<f64>; QUADRATURE_COUNT] =
                        std::array::from_fn(|i| slot.acc[i] - kernel.coeff_sum * (slot.sum[i] * inv));
                    let mut p = [0.0; 21];
                    let mut idx = 0;
                    for i in 0..QUADRATURE_COUNT {
                        for j in i..QUADRATURE_COUNT {
                            p[idx] = kernel.norm * (f[i] * f[j].conj()).re;
                            idx += 1;
                        }
                    }
                    self.out[k].push(p);
                }
            }
        }
    }
}

fn kernels(settings: &SpectralSettings, dt: f64) -> (Vec<Kernel>, f64) {
    let w = hann(settings.segment_steps);
    let w2: f64 = w.iter().map(|x| x * x).sum();
    let ks = settings
        .omegas
        .iter()
        .map(|&omega| {
            let coeff: Vec<Complex<f64>> = w
                .iter()
                .enumerate()
                .map(|(n, &wn)| Complex::from_polar(wn, -omega * n as f64 * dt))
                .collect();
            let coeff_sum = coeff.iter().sum();
            Kernel {
                coeff,
                coeff_sum,
                norm: dt / w2,
            }
        })
        .collect();
    (ks, overlap_inflation(&w))
}

/// Welch estimate of the output spectral covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub omegas: Vec<f64>,
    pub covariance: Vec<Matrix6<f64>>,
    pub stderr: Vec<Matrix6<f64>>,
    /// Segments averaged per frequency.
    pub n_segments: usize,
    /// `n_segments` discounted for the correlation of overlapping segments.
    pub effective_segments: f64,
    pub segment_steps: usize,
    pub time_step: f64,
}

/// Per-entry comparison of an estimate with a reference matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub z_scores: [f64; 21],
    pub relative_error: [f64; 21],
    pub pass: [bool; 21],
}

impl Comparison {
    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.z_scores.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

impl PsdEstimate {
    /// Entry `i, j` agrees when `|estimate - reference|` is within
    /// `max(z_max * stderr, rel_floor * |reference|)`.
    pub fn compare(&self, index: usize, reference: &Matrix6<f64>, z_max: f64, rel_floor: f64) -> Comparison {
        let est = &self.covariance[index];
        let se = &self.stderr[index];
        let mut c = Comparison {
            z_scores: [0.0; 21],
            relative_error: [0.0; 21],
            pass: [false; 21],
        };
        let mut k = 0;
        for i in 0..QUADRATURE_COUNT {
            for j in i..QUADRATURE_COUNT {
                let diff = est[(i, j)] - reference[(i, j)];
                c.z_scores[k] = diff / se[(i, j)];
                c.relative_error[k] = diff / reference[(i, j)].abs();
                c.pass[k] = diff.abs() <= (z_max * se[(i, j)]).max(rel_floor * reference[(i, j)].abs());
                k += 1;
            }
        }
        c
    }
}

fn mean_and_stderr<T: AsRef<[f64]>>(rows: &[T], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let batches = SE_BATCHES.min(n);
    let mut means = vec![vec![0.0; width]; batches];
    for (b, m) in means.iter_mut().enumerate() {
        let (lo, hi) = (b * n / batches, (b + 1) * n / batches);
        for r in &rows[lo..hi] {
            for (acc, v) in m.iter_mut().zip(r.as_ref()) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|x| *x /= (hi - lo) as f64);
    }
    let mut total = vec![0.0; width];
    for r in rows {
        for (acc, v) in total.iter_mut().zip(r.as_ref()) {
            *acc += v;
        }
    }
    total.iter_mut().for_each(|x| *x /= n as f64);
    let grand: Vec<f64> = (0..width).map(|e| means.iter().map(|m| m[e]).sum::<f64>() / batches as f64).collect();
    let se = (0..width)
        .map(|e| {
            let ss: f64 = means.iter().map(|m| (m[e] - grand[e]).powi(2)).sum();
            (ss / (batches as f64 - 1.0) / batches as f64).sqrt()
        })
        .collect();
    (total, se)
}

fn assemble(per_traj: Vec<Vec<Vec<Periodogram>>>, settings: &SpectralSettings, inflation: f64, dt: f64) -> Result<PsdEstimate> {
    let mut covariance = Vec::new();
    let mut stderr = Vec::new();
    let mut n_segments = 0;
    for k in 0..settings.omegas.len() {
        let rows: Vec<Periodogram> = per_traj.iter().flat_map(|t| t[k].iter().copied()).collect();
        n_segments = rows.len();
        if n_segments < MIN_SEGMENTS {
            return Err(Error::InsufficientSegments {
                found: n_segments,
                required: MIN_SEGMENTS,
            });
        }
        let (mean, se) = mean_and_stderr(&rows, 21);
        let mut m = Matrix6::zeros();
        let mut s = Matrix6::zeros();
        let mut idx = 0;
        for i in 0..QUADRATURE_COUNT {
            for j in i..QUADRATURE_COUNT {
                m[(i, j)] = mean[idx];
                m[(j, i)] = mean[idx];
                s[(i, j)] = se[idx];
                s[(j, i)] = se[idx];
                idx += 1;
            }
        }
        covariance.push(m);
        stderr.push(s);
    }
    Ok(PsdEstimate {
        omegas: settings.omegas.clone(),
        covariance,
        stderr,
        n_segments,
        effective_segments: n_segments as f64 / inflation,
        segment_steps: settings.segment_steps,
        time_step: dt,
    })
}

/// Welch estimate from stored trajectories.
pub fn estimate_psd(trajectories: &TrajectorySet, settings: &SpectralSettings) -> Result<PsdEstimate> {
    let plan = &trajectories.plan;
    settings.validate(plan)?;
    let (ks, inflation) = kernels(settings, plan.time_step);
    let per_traj = (0..trajectories.states.len())
        .map(|t| {
            let mut welch = Welch::new(&ks, settings.segment_steps);
            trajectories.outputs(t).for_each(|y| welch.push(&y));
            welch.out
        })
        .collect();
    assemble(per_traj, settings, inflation, plan.time_step)
}

/// Integrates and estimates in one pass without storing trajectories.
/// Produces the same bits as [`integrate`] followed by [`estimate_psd`].
pub fn simulate_psd(system: &OracleSystem, plan: &SimulationPlan, settings: &SpectralSettings) -> Result<PsdEstimate> {
    let w_min = settings.validate(plan)?;
    plan.validate(system, Some(w_min))?;
    let noise = NoiseSource::new(&system.couplings, &system.v_q)?;
    let (ks, inflation) = kernels(settings, plan.time_step);
    let m_gamma: Vec6 = std::array::from_fn(|i| system.couplings.m_gamma[(i, i)]);
    let dt = plan.time_step;
    let per_traj = (0..plan.n_trajectories)
        .into_par_iter()
        .map(|t| {
            let mut welch = Welch::new(&ks, settings.segment_steps);
            run_trajectory(system, &noise, plan, t, &[0.0; QUADRATURE_COUNT], |n, x, next, vac| {
                if n >= plan.burn_in {
                    welch.push(&output_sample(&m_gamma, x, next, vac, dt));
                }
            })?;
            Ok(welch.out)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(per_traj, settings, inflation, dt)
}

/// Photon-flux bookkeeping between pump depletion and signal/idler output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManleyRoweReport {
    /// Pump photons converted per second.
    pub pump_converted_flux: f64,
    /// Signal and idler photons leaving the cavity per second.
    pub generated_flux: [f64; 2],
    pub generated_stderr: [f64; 2],
    /// Relative excess `generated / converted - 1` expected from the
    /// operating-point relations, `gamma0 gamma' / (gamma gamma0') - 1`.
    pub expected_excess: f64,
    pub observed_excess: [f64; 2],
    /// Signal and idler fluxes agree within three standard errors.
    pub balanced: bool,
    /// Each observed excess matches the expected one within three standard
    /// errors.
    pub consistent: bool,
}

impl ManleyRoweReport {
    pub fn flagged(&self) -> bool {
        !(self.balanced && self.consistent)
    }
}

/// Mean amplitude fluctuation of each mode after burn-in, with batch-mean
/// standard errors.
pub fn amplitude_means(trajectories: &TrajectorySet) -> ([f64; MODE_COUNT], [f64; MODE_COUNT]) {
    let burn = trajectories.plan.burn_in;
    let rows: Vec<[f64; MODE_COUNT]> = trajectories
        .states
        .iter()
        .flat_map(|s| s[burn + 1..].iter().map(|x| std::array::from_fn(|j| x[p_index(j)])))
        .collect();
    if rows.len() < 2 {
        return ([0.0; MODE_COUNT], [0.0; MODE_COUNT]);
    }
    let (m, se) = mean_and_stderr(&rows, MODE_COUNT);
    (std::array::from_fn(|j| m[j]), std::array::from_fn(|j| se[j]))
}

/// Checks that signal and idler leave the cavity at the rate pump photons are
/// converted. Mean amplitude shifts observed in the trajectories correct the
/// steady-state powers to first order.
pub fn manley_rowe_check(trajectories: &TrajectorySet, config: &CavityConfig, op: &OperatingPoint) -> ManleyRoweReport {
    let (mean, se) = amplitude_means(trajectories);
    let photon = |j: usize| PLANCK * SPEED_OF_LIGHT / config.modes[j].wavelength;
    let tau = config.round_trip_time();
    let pump = &config.modes[0];
    let converted = 4.0 * pump.gamma / pump.total_loss() * op.threshold_power * (op.pump_ratio.sqrt() - 1.0) / photon(0);

    let mut flux = [0.0; 2];
    let mut flux_se = [0.0; 2];
    for (slot, j) in [1usize, 2].into_iter().enumerate() {
        let p = op.intracavity_powers[j];
        if p > 0.0 {
            let base = 2.0 * config.modes[j].total_loss() * p / photon(j);
            let alpha = (p * tau / photon(j)).sqrt();
            flux[slot] = base * (1.0 + mean[j] / alpha);
            flux_se[slot] = base * se[j] / alpha;
        }
    }
    let s = &config.modes[1];
    let expected = pump.gamma * s.total_loss() / (s.gamma * pump.total_loss()) - 1.0;
    let slack = 1e-9 * converted.max(flux[0]).max(flux[1]);
    let observed = flux.map(|f| if converted > 0.0 { f / converted - 1.0 } else { f64::NAN });
    let consistent = (0..2).all(|k| {
        if converted > 0.0 {
            (flux[k] - (1.0 + expected) * converted).abs() <= 3.0 * flux_se[k] + slack
        } else {
            flux[k] == 0.0
        }
    });
    let balanced = (flux[0] - flux[1]).abs() <= 3.0 * flux_se[0].hypot(flux_se[1]) + slack;
    ManleyRoweReport {
        pump_converted_flux: converted,
        generated_flux: flux,
        generated_stderr: flux_se,
        expected_excess: expected,
        observed_excess: observed,
        balanced,
        consistent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{measured_couplings, reference_cavity, REFERENCE_THRESHOLD_W};
    use approx::assert_relative_eq;

    fn lossless(mut c: CavityConfig) -> CavityConfig {
        for m in c.modes.iter_mut() {
            m.mu = 0.0;
        }
        c
    }

    fn small_plan(n_steps: usize, n_traj: usize, seed: u64) -> SimulationPlan {
        SimulationPlan {
            time_step: 0.2,
            n_steps,
            n_trajectories: n_traj,
            master_seed: seed,
            burn_in: 0,
        }
    }

    #[test]
    fn pivoted_cholesky_reconstructs_rank_deficient() {
        let vq = build_vq(&measured_couplings(), &[0.3, 0.1, 0.1]).unwrap();
        let l = pivoted_cholesky(vq.matrix()).unwrap();
        assert_eq!(l.len(), 3);
        let mut m = Matrix6::zeros();
        for c in &l {
            for i in 0..6 {
                for j in 0..6 {
                    m[(i, j)] += c[i] * c[j];
                }
            }
        }
        assert!((m - vq.matrix()).amax() < 1e-15);
        assert!(pivoted_cholesky(&Matrix6::zeros()).unwrap().is_empty());

        let mut bad = Matrix6::identity();
        bad[(0, 1)] = 2.0;
        bad[(1, 0)] = 2.0;
        assert!(matches!(pivoted_cholesky(&bad), Err(Error::NotPositiveSemidefinite { .. })));
    }

    #[test]
    fn lossless_noiseless_phonons_use_coupler_only() {
        let c = lossless(reference_cavity());
        let cm = coupling_matrices(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let inc = generate_noise_increments(&cm, &QuadratureCovariance::zeros(), 0.3, &mut rng).unwrap();
            for i in 0..6 {
                assert_eq!(inc.increment[i], cm.m_gamma[(i, i)] * inc.vacuum[i]);
            }
        }
    }

    #[test]
    fn increments_are_deterministic() {
        let c = reference_cavity();
        let cm = coupling_matrices(&c);
        let vq = build_vq(&measured_couplings(), &[0.3, 0.1, 0.1]).unwrap();
        let src = NoiseSource::new(&cm, &vq).unwrap();
        let (mut a, mut b) = (ChaCha8Rng::seed_from_u64(11), ChaCha8Rng::seed_from_u64(11));
        for _ in 0..1000 {
            assert_eq!(src.draw(0.3, &mut a), src.draw(0.3, &mut b));
        }
    }

    #[test]
    fn increment_covariance_matches_channels() {
        let c = reference_cavity();
        let cm = coupling_matrices(&c);
        let vq = build_vq(&measured_couplings(), &[0.5, 0.2, 0.2]).unwrap();
        let src = NoiseSource::new(&cm, &vq).unwrap();
        let dt = 0.3;
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut sum = Matrix6::<f64>::zeros();
        let mut sum_sq = Matrix6::<f64>::zeros();
        for _ in 0..n {
            let d = src.draw(dt, &mut rng).increment;
            for i in 0..6 {
                for j in 0..6 {
                    let v = d[i] * d[j] / dt;
                    sum[(i, j)] += v;
                    sum_sq[(i, j)] += v * v;
                }
            }
        }
        let target = cm.m_gamma * cm.m_gamma + cm.m_mu * cm.m_mu + vq.matrix();
        for i in 0..6 {
            for j in 0..6 {
                let mean = sum[(i, j)] / n as f64;
                let var = sum_sq[(i, j)] / n as f64 - mean * mean;
                let se = (var / n as f64).sqrt();
                assert!((mean - target[(i, j)]).abs() <= 5.0 * se, "{i}{j}: {mean} vs {}", target[(i, j)]);
            }
        }
    }

    #[test]
    fn noiseless_free_cavity_decays() {
        let c = reference_cavity();
        let sys = OracleSystem::free_cavity(&c).without_noise();
        let dt = 0.05;
        let plan = SimulationPlan {
            time_step: dt,
            n_steps: 4000,
            n_trajectories: 1,
            master_seed: 0,
            burn_in: 0,
        };
        let mut x0 = [0.0; 6];
        x0[2] = 1.0;
        let set = integrate(&sys, &plan, &x0).unwrap();
        let rate = c.modes[1].total_loss();
        for n in [100, 1000, 4000] {
            let t = n as f64 * dt;
            let exact = (-rate * t).exp();
            assert!((set.states[0][n][2] - exact).abs() < rate * rate * dt * t, "step {n}");
            assert_eq!(set.states[0][n][0], 0.0);
        }
    }

    #[test]
    fn phase_difference_mode_is_frozen() {
        let c = reference_cavity();
        let sys = OracleSystem::opo(&c, REFERENCE_THRESHOLD_W, &NoiseCouplings::zeros(), 1.5)
            .unwrap()
            .without_noise();
        let x0 = [0.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let set = integrate(&sys, &small_plan(20_000, 1, 0), &x0).unwrap();
        for x in &set.states[0] {
            assert_eq!(x, &x0);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = reference_cavity();
        c.modes[1].gamma = 0.02;
        let mut sys = OracleSystem::free_cavity(&c).without_noise();
        sys.drift.matrix = -sys.drift.matrix;
        let mut plan = small_plan(1_000_000, 1, 0);
        plan.time_step = 0.01;
        let err = run_trajectory(&sys, &NoiseSource::new(&sys.couplings, &sys.v_q).unwrap(), &plan, 0, &[1.0; 6], |_, _, _, _| {})
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { trajectory: 0, .. }));
    }

    #[test]
    fn plan_validation() {
        let c = reference_cavity();
        let sys = OracleSystem::opo(&c, REFERENCE_THRESHOLD_W, &measured_couplings(), 1.5).unwrap();
        let bound = sys.max_time_step();
        assert_relative_eq!(bound, 0.1 / c.modes[0].total_loss(), epsilon = 1e-12);
        let mut plan = small_plan(100_000, 1, 0);
        assert!(plan.validate(&sys, Some(0.0259)).is_ok());
        plan.time_step = bound * 1.01;
        assert!(plan.validate(&sys, None).is_err());
        plan.time_step = 0.2;
        plan.n_steps = 1000;
        assert!(plan.validate(&sys, Some(0.0259)).is_err());
    }

    #[test]
    fn trajectories_reproducible_and_streams_independent() {
        let c = reference_cavity();
        let sys = OracleSystem::opo(&c, REFERENCE_THRESHOLD_W, &measured_couplings(), 1.3).unwrap();
        let plan = small_plan(2000, 3, 99);
        let a = integrate(&sys, &plan, &[0.0; 6]).unwrap();
        let b = integrate(&sys, &plan, &[0.0; 6]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states[0], a.states[1]);
    }

    #[test]
    fn too_few_segments_rejected() {
        let c = reference_cavity();
        let sys = OracleSystem::free_cavity(&c);
        let plan = small_plan(2000, 1, 1);
        let set = integrate(&sys, &plan, &[0.0; 6]).unwrap();
        let s = SpectralSettings {
            omegas: vec![0.5],
            segment_steps: 400,
        };
        assert!(matches!(estimate_psd(&set, &s), Err(Error::InsufficientSegments { found: 9, .. })));
    }

    #[test]
    fn lossless_free_cavity_output_is_vacuum() {
        let c = lossless(reference_cavity());
        let sys = OracleSystem::free_cavity(&c);
        let (plan, settings) = SimulationPlan::design(&sys, 0.05, 4.0, 4000, 4, 5, 0.3).unwrap();
        let est = simulate_psd(&sys, &plan, &settings).unwrap();
        assert!(est.n_segments >= 4000);
        let cmp = est.compare(0, &Matrix6::identity(), 3.0, 0.0);
        assert!(cmp.all_pass(), "{:?}", cmp.z_scores);
    }

    #[test]
    fn stored_and_streamed_estimates_agree_bitwise() {
        let c = reference_cavity();
        let sys = OracleSystem::opo(&c, REFERENCE_THRESHOLD_W, &measured_couplings(), 1.5).unwrap();
        let (plan, settings) = SimulationPlan::design(&sys, 0.0259, 4.0, 40, 2, 8, 0.3).unwrap();
        let streamed = simulate_psd(&sys, &plan, &settings).unwrap();
        let set = integrate(&sys, &plan, &[0.0; 6]).unwrap();
        let stored = estimate_psd(&set, &settings).unwrap();
        assert_eq!(streamed, stored);
        assert_eq!(streamed, simulate_psd(&sys, &plan, &settings).unwrap());
    }

    #[test]
    fn opo_without_phonons_matches_analytic() {
        let c = reference_cavity();
        let sys = OracleSystem::opo(&c, REFERENCE_THRESHOLD_W, &NoiseCouplings::zeros(), 1.5).unwrap();
        let omega = 0.0259;
        let (plan, settings) = SimulationPlan::design(&sys, omega, 8.0, 6000, 4, 17, 0.3).unwrap();
        let est = simulate_psd(&sys, &plan, &settings).unwrap();
        let analytic = sys.analytic(omega).unwrap();
        let cmp = est.compare(0, analytic.v_total.matrix(), 3.0, 0.0);
        assert!(cmp.all_pass(), "{:?}", cmp.z_scores);
    }

    #[test]
    fn stderr_scales_with_trajectory_count() {
        let c = reference_cavity();
        let sys = OracleSystem::free_cavity(&c);
        let (plan, settings) = SimulationPlan::design(&sys, 0.1, 4.0, 2000, 8, 21, 0.3).unwrap();
        let a = simulate_psd(&sys, &plan, &settings).unwrap();
        let doubled = SimulationPlan {
            n_trajectories: 16,
            ..plan
        };
        let b = simulate_psd(&sys, &doubled, &settings).unwrap();
        assert_eq!(b.n_segments, 2 * a.n_segments);
        let mut ratios = Vec::new();
        for i in 0..6 {
            ratios.push(b.stderr[0][(i, i)] / a.stderr[0][(i, i)]);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2, "{ratios:?}");
    }

    #[test]
    fn halving_time_step_within_one_standard_error() {
        // Both step sizes are driven by the same Brownian path: each coarse
        // increment is the sum of two fine ones.
        let c = reference_cavity();
        let sys = OracleSystem::opo(&c, REFERENCE_THRESHOLD_W, &measured_couplings(), 1.5).unwrap();
        let omega = 0.0259;
        let (plan, coarse_settings) = SimulationPlan::design(&sys, omega, 8.0, 1500, 2, 31, 0.3).unwrap();
        let fine_settings = SpectralSettings {
            segment_steps: coarse_settings.segment_steps * 2,
            ..coarse_settings.clone()
        };
        let dt = plan.time_step;
        let (kc, inflation) = kernels(&coarse_settings, dt);
        let (kf, _) = kernels(&fine_settings, dt / 2.0);
        let noise = NoiseSource::new(&sys.couplings, &sys.v_q).unwrap();
        let mg: Vec6 = std::array::from_fn(|i| sys.couplings.m_gamma[(i, i)]);
        let a = sys.drift.matrix;
        let mut coarse_out = Vec::new();
        let mut fine_out = Vec::new();
        for t in 0..plan.n_trajectories {
            let mut rng = plan.rng(t);
            let mut wc = Welch::new(&kc, coarse_settings.segment_steps);
            let mut wf = Welch::new(&kf, fine_settings.segment_steps);
            let (mut xc, mut xf) = ([0.0; 6], [0.0; 6]);
            for n in 0..plan.n_steps {
                let i1 = noise.draw(dt / 2.0, &mut rng);
                let i2 = noise.draw(dt / 2.0, &mut rng);
                let f1 = euler_step(&a, &xf, dt / 2.0, &i1.increment);
                let f2 = euler_step(&a, &f1, dt / 2.0, &i2.increment);
                let inc: Vec6 = std::array::from_fn(|i| i1.increment[i] + i2.increment[i]);
                let vac: Vec6 = std::array::from_fn(|i| i1.vacuum[i] + i2.vacuum[i]);
                let next = euler_step(&a, &xc, dt, &inc);
                if n >= plan.burn_in {
                    wf.push(&output_sample(&mg, &xf, &f1, &i1.vacuum, dt / 2.0));
                    wf.push(&output_sample(&mg, &f1, &f2, &i2.vacuum, dt / 2.0));
                    wc.push(&output_sample(&mg, &xc, &next, &vac, dt));
                }
                xc = next;
                xf = f2;
            }
            coarse_out.push(wc.out);
            fine_out.push(wf.out);
        }
        let coarse = assemble(coarse_out, &coarse_settings, inflation, dt).unwrap();
        let fine = assemble(fine_out, &fine_settings, inflation, dt / 2.0).unwrap();
        for i in 0..6 {
            for j in i..6 {
                let d = (coarse.covariance[0][(i, j)] - fine.covariance[0][(i, j)]).abs();
                let se = coarse.stderr[0][(i, j)];
                assert!(d < se, "{i}{j}: {d} vs {se}");
            }
        }
    }

    fn mr_set(sigma: f64) -> (TrajectorySet, OperatingPoint) {
        let c = reference_cavity();
        let sys = OracleSystem::opo(&c, REFERENCE_THRESHOLD_W, &measured_couplings(), sigma).unwrap();
        let op = operating_point(&c, sigma, REFERENCE_THRESHOLD_W).unwrap();
        let plan = SimulationPlan {
            time_step: 0.3,
            n_steps: 20_000,
            n_trajectories: 2,
            master_seed: 4,
            burn_in: 2000,
        };
        (integrate(&sys, &plan, &[0.0; 6]).unwrap(), op)
    }

    #[test]
    fn manley_rowe_at_threshold_is_empty() {
        let (set, op) = mr_set(1.0);
        let r = manley_rowe_check(&set, &reference_cavity(), &op);
        assert_eq!(r.pump_converted_flux, 0.0);
        assert_eq!(r.generated_flux, [0.0, 0.0]);
        assert!(!r.flagged());
    }

    #[test]
    fn manley_rowe_balanced_and_detects_misscaling() {
        let c = reference_cavity();
        let (set, op) = mr_set(1.7);
        let r = manley_rowe_check(&set, &c, &op);
        assert!(r.balanced && r.consistent, "{r:?}");
        assert!(r.expected_excess.abs() > 0.01 && r.expected_excess.abs() < 0.05);
        assert_relative_eq!(r.observed_excess[0], r.expected_excess, epsilon = 1e-4);

        let mut wrong = op;
        wrong.intracavity_powers[1] *= 2.0;
        wrong.intracavity_powers[2] *= 2.0;
        assert!(manley_rowe_check(&set, &c, &wrong).flagged());
        let mut lopsided = op;
        lopsided.intracavity_powers[2] *= 2.0;
        let r = manley_rowe_check(&set, &c, &lopsided);
        assert!(!r.balanced);
    }
}
