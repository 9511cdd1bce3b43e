//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. Every key must be known and
//! may appear once. Cavity keys are required except
//! `mode<j>.detection_efficiency`, which defaults to 1. The `opo.`, `phonon.`,
//! `oracle.`, `temperature.` and `crystal.` groups are optional.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{checked, CavityConfig, ModeParams, MODE_COUNT};
use crate::phonon::{CrystalModel, NoiseCouplings};

/// Operating conditions for spectra and sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpoSettings {
    pub threshold_power: f64,
    pub pump_ratio: Option<f64>,
    pub frequency_hz: Option<f64>,
    /// Report covariances after detection losses.
    pub detected: bool,
}

/// Monte-Carlo run parameters. The step actually used is the largest value
/// not above `max_time_step` that fits whole segments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub max_time_step: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    pub segments: usize,
    pub cycles_per_segment: f64,
    /// Relative agreement accepted regardless of the z-score.
    pub relative_tolerance: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            max_time_step: 0.3,
            n_trajectories: 8,
            seed: 1,
            segments: 4096,
            cycles_per_segment: 12.0,
            relative_tolerance: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub cavity: CavityConfig,
    pub opo: Option<OpoSettings>,
    pub couplings: Option<NoiseCouplings>,
    pub oracle: OracleSettings,
    /// `(slope, intercept)` of the pump self-coupling in 1/(W K) and 1/W.
    pub temperature_law: Option<(f64, f64)>,
    pub crystal: Option<CrystalModel>,
    /// Every key with the value in effect, defaults included.
    pub resolved: BTreeMap<String, String>,
}

const ETA_KEYS: [&str; 6] = ["eta00", "eta11", "eta22", "eta01", "eta02", "eta12"];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
    used: BTreeMap<String, String>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::ConfigSyntax {
                    line: i + 1,
                    message: "empty key or value".into(),
                });
            }
            if map.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(Error::ConfigSyntax {
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self {
            map,
            used: BTreeMap::new(),
        })
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).map(|(_, v)| v.clone())?;
        self.used.insert(key.to_string(), v.clone());
        Some(v)
    }

    fn parse_as<T: std::str::FromStr>(&mut self, key: &str, expected: &'static str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::BadValue {
                key: key.into(),
                value: v,
                expected,
            }),
        }
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        self.opt_f64(key)?.ok_or_else(|| Error::MissingKey(key.into()))
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        let v: Option<f64> = self.parse_as(key, "a number")?;
        match v {
            Some(x) if !x.is_finite() => Err(Error::BadValue {
                key: key.into(),
                value: x.to_string(),
                expected: "a finite number",
            }),
            other => Ok(other),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.parse_as(key, "a nonnegative integer")
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.parse_as(key, "a 64-bit unsigned integer")
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.parse_as(key, "true or false")
    }

    fn six(&mut self, key: &str) -> Result<[f64; 6]> {
        let v = self.raw(key).ok_or_else(|| Error::MissingKey(key.into()))?;
        let bad = || Error::BadValue {
            key: key.into(),
            value: v.clone(),
            expected: "six comma-separated numbers",
        };
        let parts: Vec<f64> = v
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        parts.try_into().map_err(|_| bad())
    }

    fn finish(self) -> Result<BTreeMap<String, String>> {
        if let Some((k, _)) = self.map.iter().find(|(k, _)| !self.used.contains_key(*k)) {
            return Err(Error::UnknownKey(k.clone()));
        }
        Ok(self.used)
    }
}

fn parse_couplings(e: &mut Entries) -> Result<Option<NoiseCouplings>> {
    if !e.has_prefix("phonon.") {
        return Ok(None);
    }
    let mut v = [0.0; 6];
    for (slot, name) in v.iter_mut().zip(ETA_KEYS) {
        *slot = e.f64(&format!("phonon.{name}"))?;
    }
    Ok(Some(NoiseCouplings::from_entries(v[0], v[1], v[2], v[3], v[4], v[5])?))
}

fn parse_cavity(e: &mut Entries) -> Result<CavityConfig> {
    let mut modes = Vec::with_capacity(MODE_COUNT);
    let mut waists = [0.0; MODE_COUNT];
    for (j, waist) in waists.iter_mut().enumerate() {
        let k = |name: &str| format!("mode{j}.{name}");
        let detection_key = k("detection_efficiency");
        let detection_efficiency = e.opt_f64(&detection_key)?.unwrap_or(1.0);
        e.used.insert(detection_key, detection_efficiency.to_string());
        modes.push(ModeParams {
            index: j,
            wavelength: e.f64(&k("wavelength_m"))?,
            gamma: e.f64(&k("gamma"))?,
            mu: e.f64(&k("mu"))?,
            refractive_index: e.f64(&k("refractive_index"))?,
            detection_efficiency,
        });
        *waist = e.f64(&k("waist_m"))?;
    }
    let modes: [ModeParams; MODE_COUNT] = modes.try_into().expect("three modes");
    checked(CavityConfig {
        modes,
        free_spectral_range: e.f64("cavity.fsr_hz")?,
        crystal_length: e.f64("cavity.crystal_length_m")?,
        rayleigh_length: e.f64("cavity.rayleigh_length_m")?,
        waists,
    })
}

fn parse_crystal(e: &mut Entries) -> Result<Option<CrystalModel>> {
    if !e.has_prefix("crystal.") {
        return Ok(None);
    }
    let crystal = CrystalModel {
        photoelastic_vectors: [e.six("crystal.p0")?, e.six("crystal.p1")?, e.six("crystal.p2")?],
        strain_rms: e.six("crystal.strain_rms")?,
        coherence_length: e.f64("crystal.lc_m")?,
        density: e.f64("crystal.density_kg_m3")?,
        sound_speed: e.f64("crystal.sound_speed_m_s")?,
        temperature: e.f64("crystal.temperature_k")?,
        position: e.opt_f64("crystal.position_m")?.unwrap_or(0.0),
    };
    crystal.validate()?;
    Ok(Some(crystal))
}

/// Parses and validates a complete configuration file.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut e = Entries::parse(text)?;
    let cavity = parse_cavity(&mut e)?;

    let opo = if e.has_prefix("opo.") {
        Some(OpoSettings {
            threshold_power: e.f64("opo.threshold_power_w")?,
            pump_ratio: e.opt_f64("opo.pump_ratio")?,
            frequency_hz: e.opt_f64("opo.frequency_hz")?,
            detected: e.bool("opo.detected")?.unwrap_or(false),
        })
    } else {
        None
    };
    let couplings = parse_couplings(&mut e)?;

    let d = OracleSettings::default();
    let oracle = OracleSettings {
        max_time_step: e.opt_f64("oracle.dt")?.unwrap_or(d.max_time_step),
        n_trajectories: e.usize("oracle.n_traj")?.unwrap_or(d.n_trajectories),
        seed: e.u64("oracle.seed")?.unwrap_or(d.seed),
        segments: e.usize("oracle.segments")?.unwrap_or(d.segments),
        cycles_per_segment: e.opt_f64("oracle.cycles")?.unwrap_or(d.cycles_per_segment),
        relative_tolerance: e.opt_f64("oracle.rel_tol")?.unwrap_or(d.relative_tolerance),
    };

    let temperature_law = if e.has("temperature.slope_per_w_k") || e.has("temperature.intercept_per_w") {
        Some((e.f64("temperature.slope_per_w_k")?, e.f64("temperature.intercept_per_w")?))
    } else {
        None
    };
    let crystal = parse_crystal(&mut e)?;
    let resolved = e.finish()?;
    Ok(RunConfig {
        cavity,
        opo,
        couplings,
        oracle,
        temperature_law,
        crystal,
        resolved,
    })
}

/// Parses a file holding only the six `phonon.eta..` keys.
pub fn parse_couplings_file(text: &str) -> Result<NoiseCouplings> {
    let mut e = Entries::parse(text)?;
    let eta = parse_couplings(&mut e)?.ok_or_else(|| Error::MissingKey("phonon.eta00".into()))?;
    e.finish()?;
    Ok(eta)
}

/// Configuration text for a cavity, in the format [`parse_config`] reads.
pub fn render_cavity(config: &CavityConfig) -> String {
    let mut s = String::new();
    for (j, m) in config.modes.iter().enumerate() {
        s += &format!("mode{j}.wavelength_m = {:e}\n", m.wavelength);
        s += &format!("mode{j}.gamma = {}\n", m.gamma);
        s += &format!("mode{j}.mu = {}\n", m.mu);
        s += &format!("mode{j}.refractive_index = {}\n", m.refractive_index);
        s += &format!("mode{j}.detection_efficiency = {}\n", m.detection_efficiency);
        s += &format!("mode{j}.waist_m = {:e}\n", config.waists[j]);
    }
    s += &format!("cavity.fsr_hz = {:e}\n", config.free_spectral_range);
    s += &format!("cavity.crystal_length_m = {}\n", config.crystal_length);
    s += &format!("cavity.rayleigh_length_m = {}\n", config.rayleigh_length);
    s
}
