use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use opo_noise::config::{parse_config, parse_couplings_file, RunConfig};
use opo_noise::fit::{
    fit_eta_cross, fit_eta_diagonal, fit_temperature, fit_waist_profile, EtaFitOptions, FitResult,
};
use opo_noise::io;
use opo_noise::model::{normalize_frequency, upper_triangle, upper_triangle_labels, QUADRATURE_LABELS};
use opo_noise::oracle::{simulate_psd, OracleSystem, SimulationPlan};
use opo_noise::phonon::{couplings_microscopic, NoiseCouplings};
use opo_noise::spectra::{duan_criterion, opo_spectrum, sweep, vlf_tripartite, AxisSpec, SweepAxis, SweepContext};
use opo_noise::{Error, QuadratureCovariance};

use crate::args::{Common, FitCommand, Regime, Target};
use crate::failure::Failure;
use crate::manifest::{digest, FileDigest};

/// State gathered while one command runs; becomes the manifest.
pub struct Session<'a> {
    common: &'a Common,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub report: String,
}

impl<'a> Session<'a> {
    pub fn new(common: &'a Common) -> Self {
        Self {
            common,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            config: BTreeMap::new(),
            seed: None,
            report: String::new(),
        }
    }

    fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.config.insert(format!("run.{key}"), value.to_string());
    }

    fn read_input(&mut self, path: &Path) -> Result<String, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::validation(format!("cannot read `{}`: {e}", path.display())))?;
        let mut d = digest(path)?;
        d.path = fs::canonicalize(path)?.display().to_string();
        self.inputs.push(d);
        Ok(text)
    }

    fn load_config(&mut self) -> Result<RunConfig, Failure> {
        let path = self
            .common
            .config
            .clone()
            .ok_or_else(|| Failure::validation("missing required flag --config"))?;
        let text = self.read_input(&path)?;
        let cfg = parse_config(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        self.config.extend(cfg.resolved.clone());
        Ok(cfg)
    }

    fn threshold(&self, cfg: &RunConfig) -> Result<f64, Failure> {
        cfg.opo
            .map(|o| o.threshold_power)
            .ok_or_else(|| Error::MissingKey("opo.threshold_power_w".into()).into())
    }

    fn pump_ratio(&mut self, cfg: &RunConfig) -> Result<f64, Failure> {
        let sigma = self
            .common
            .sigma
            .or(cfg.opo.and_then(|o| o.pump_ratio))
            .ok_or_else(|| Failure::validation("no pump ratio: pass --sigma or set `opo.pump_ratio`"))?;
        self.note("pump_ratio", sigma);
        Ok(sigma)
    }

    fn frequency(&mut self, cfg: &RunConfig) -> Result<f64, Failure> {
        let f = self
            .common
            .freq_hz
            .or(cfg.opo.and_then(|o| o.frequency_hz))
            .ok_or_else(|| Failure::validation("no analysis frequency: pass --freq-hz or set `opo.frequency_hz`"))?;
        self.note("frequency_hz", f);
        Ok(f)
    }

    /// Couplings from `--eta-file`, the config, or the crystal model, in that
    /// order; zero when none is given.
    fn couplings(&mut self, cfg: &RunConfig) -> Result<NoiseCouplings, Failure> {
        let (eta, source) = if let Some(path) = self.common.eta_file.clone() {
            let text = self.read_input(&path)?;
            let eta = parse_couplings_file(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
            (eta, "eta_file")
        } else if let Some(eta) = cfg.couplings {
            (eta, "config")
        } else if let Some(crystal) = &cfg.crystal {
            (couplings_microscopic(&cfg.cavity, crystal)?, "crystal_model")
        } else {
            self.warn("no coupling source given; using eta = 0 (no phonon noise)");
            (NoiseCouplings::zeros(), "none")
        };
        self.note("eta_source", source);
        for (name, (j, k)) in [("eta00", (0, 0)), ("eta11", (1, 1)), ("eta22", (2, 2)), ("eta01", (0, 1)), ("eta02", (0, 2)), ("eta12", (1, 2))] {
            self.note(name, eta.get(j, k));
        }
        Ok(eta)
    }

    fn write_output<F>(&mut self, name: &str, body: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut Vec<u8>) -> opo_noise::Result<()>,
    {
        let mut buf = Vec::new();
        body(&mut buf)?;
        let path = self.common.out.join(name);
        fs::write(&path, buf).map_err(|e| Failure::validation(format!("cannot write `{}`: {e}", path.display())))?;
        self.outputs.push(path);
        Ok(())
    }
}

fn warn_degenerate(s: &mut Session, sigma: f64) {
    if sigma == 1.0 {
        s.warn("pump ratio 1: beta = 0, signal and idler have no mean field and the output is degenerate");
    }
}

pub fn spectrum(s: &mut Session) -> Result<(), Failure> {
    let cfg = s.load_config()?;
    let p_th = s.threshold(&cfg)?;
    let sigma = s.pump_ratio(&cfg)?;
    let f_hz = s.frequency(&cfg)?;
    let omega = normalize_frequency(f_hz, &cfg.cavity)?;
    let eta = s.couplings(&cfg)?;
    warn_degenerate(s, sigma);

    let mut result = opo_spectrum(&cfg.cavity, p_th, &eta, sigma, omega)?;
    if cfg.opo.is_some_and(|o| o.detected) {
        result = result.with_detection(&cfg.cavity.detection_efficiencies())?;
    }
    s.write_output("spectrum.csv", |w| io::write_spectrum(w, sigma, &result))?;

    let v = result.reported();
    let _ = writeln!(s.report, "pump ratio {sigma}, omega {omega:.6}");
    let _ = writeln!(s.report, "{:>6}{}", "", QUADRATURE_LABELS.map(|l| format!("{l:>12}")).concat());
    for i in 0..6 {
        let row: String = (0..6).map(|j| format!("{:>12.6}", v.get(i, j))).collect();
        let _ = writeln!(s.report, "{:>6}{row}", QUADRATURE_LABELS[i]);
    }
    let duan = duan_criterion(v);
    let vlf = vlf_tripartite(v);
    let _ = writeln!(s.report, "duan {:.6} (entangled: {})", duan.value, duan.entangled);
    let _ = writeln!(
        s.report,
        "vlf {:.6} {:.6} {:.6} (genuine tripartite: {})",
        vlf.values[0], vlf.values[1], vlf.values[2], vlf.genuine_tripartite
    );
    Ok(())
}

pub fn sweep_cmd(s: &mut Session, axis: &str) -> Result<(), Failure> {
    let spec: AxisSpec = axis.parse()?;
    let cfg = s.load_config()?;
    s.note("axis", axis);
    let p_th = s.threshold(&cfg)?;
    let pump_ratio = if spec.axis == SweepAxis::PumpRatio {
        f64::NAN
    } else {
        s.pump_ratio(&cfg)?
    };
    let frequency_hz = if spec.axis == SweepAxis::Frequency {
        f64::NAN
    } else {
        s.frequency(&cfg)?
    };
    let couplings = s.couplings(&cfg)?;
    if spec.axis == SweepAxis::PumpRatio && spec.values().contains(&1.0) {
        warn_degenerate(s, 1.0);
    } else if spec.axis != SweepAxis::PumpRatio {
        warn_degenerate(s, pump_ratio);
    }
    let ctx = SweepContext {
        config: cfg.cavity.clone(),
        threshold_power: p_th,
        couplings,
        pump_ratio,
        frequency_hz,
        temperature_law: cfg.temperature_law,
        apply_detection: cfg.opo.is_some_and(|o| o.detected),
    };
    let rows = sweep(&ctx, &spec);
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        let first = rows.iter().find_map(|r| r.outcome.as_ref().err()).cloned().unwrap_or_default();
        s.warn(format!("{failed} of {} points failed (first: {first})", rows.len()));
    }
    s.write_output("sweep.csv", |w| io::write_sweep(w, spec.axis.name(), &rows))?;
    let _ = writeln!(s.report, "{} points along {}", rows.len(), spec.axis.name());
    Ok(())
}

pub fn oracle(s: &mut Session, regime: Regime, target: Target, tolerance: f64) -> Result<(), Failure> {
    if !(tolerance > 0.0) {
        return Err(Failure::validation(format!("--tolerance must be positive, got {tolerance}")));
    }
    let cfg = s.load_config()?;
    let f_hz = s.frequency(&cfg)?;
    let omega = normalize_frequency(f_hz, &cfg.cavity)?;
    let seed = s.common.seed.unwrap_or(cfg.oracle.seed);
    s.seed = Some(seed);
    s.note("regime", format!("{regime:?}").to_lowercase());
    s.note("target", format!("{target:?}").to_lowercase());
    s.note("tolerance", tolerance);

    let (system, sigma, p_th) = match regime {
        Regime::Free => (OracleSystem::free_cavity(&cfg.cavity), None, None),
        Regime::Opo => {
            let p_th = s.threshold(&cfg)?;
            let sigma = s.pump_ratio(&cfg)?;
            let eta = s.couplings(&cfg)?;
            (OracleSystem::opo(&cfg.cavity, p_th, &eta, sigma)?, Some(sigma), Some(p_th))
        }
    };
    let reference = match target {
        Target::Model => *system.analytic(omega)?.v_total.matrix(),
        Target::Identity => QuadratureCovariance::identity().into_inner(),
        Target::EtaZero => match (sigma, p_th) {
            (Some(sigma), Some(p_th)) => {
                *opo_spectrum(&cfg.cavity, p_th, &NoiseCouplings::zeros(), sigma, omega)?.v_total.matrix()
            }
            _ => return Err(Failure::validation("--target eta-zero needs --regime opo")),
        },
    };

    let o = cfg.oracle;
    let (plan, settings) = SimulationPlan::design(
        &system,
        omega,
        o.cycles_per_segment,
        o.segments,
        o.n_trajectories,
        seed,
        o.max_time_step,
    )?;
    plan.validate(&system, Some(omega))?;
    let est = simulate_psd(&system, &plan, &settings)?;
    let cmp = est.compare(0, &reference, tolerance, o.relative_tolerance);

    s.write_output("oracle_psd.csv", |w| io::write_psd(w, &est))?;
    s.write_output("oracle_comparison.csv", |w| io::write_comparison(w, &est, 0, &reference, &cmp))?;

    let _ = writeln!(
        s.report,
        "dt {:.5}, {} trajectories x {} steps, {} segments ({:.0} effective)",
        plan.time_step, plan.n_trajectories, plan.n_steps, est.n_segments, est.effective_segments
    );
    let values = upper_triangle(&est.covariance[0]);
    let targets = upper_triangle(&reference);
    for (k, label) in upper_triangle_labels().iter().enumerate() {
        let _ = writeln!(
            s.report,
            "{label:<8} {:>12.6} {:>12.6} z {:>7.2} {}",
            values[k],
            targets[k],
            cmp.z_scores[k],
            if cmp.pass[k] { "ok" } else { "FAIL" }
        );
    }
    if !cmp.all_pass() {
        let names: Vec<String> = upper_triangle_labels()
            .into_iter()
            .zip(cmp.pass)
            .filter(|(_, p)| !p)
            .map(|(l, _)| l)
            .collect();
        return Err(Failure::comparison(format!(
            "{} of 21 entries outside tolerance: {}",
            names.len(),
            names.join(", ")
        )));
    }
    Ok(())
}

pub fn fit(s: &mut Session, cmd: &FitCommand) -> Result<(), Failure> {
    s.note("fit", cmd.name());
    let fit = match cmd {
        FitCommand::EtaDiag {
            data,
            mode,
            free_intercept,
        } => {
            let cfg = s.load_config()?;
            let omega = normalize_frequency(s.frequency(&cfg)?, &cfg.cavity)?;
            let text = s.read_input(&data.data)?;
            let records = io::read_power_variance(text.as_bytes())?;
            check_mode(*mode)?;
            s.note("mode", mode);
            fit_eta_diagonal(
                &records,
                &cfg.cavity,
                *mode,
                &EtaFitOptions {
                    omega,
                    free_intercept: *free_intercept,
                },
            )?
        }
        FitCommand::EtaCross {
            data,
            modes,
            free_intercept,
        } => {
            let cfg = s.load_config()?;
            let omega = normalize_frequency(s.frequency(&cfg)?, &cfg.cavity)?;
            let (j, k) = parse_pair(modes)?;
            let text = s.read_input(&data.data)?;
            let records = io::read_cross(text.as_bytes())?;
            s.note("modes", modes);
            fit_eta_cross(
                &records,
                &cfg.cavity,
                j,
                k,
                &EtaFitOptions {
                    omega,
                    free_intercept: *free_intercept,
                },
            )?
        }
        FitCommand::Waist { data } => {
            let cfg = s.load_config()?;
            let text = s.read_input(&data.data)?;
            let points = io::read_pairs(text.as_bytes(), "z_m", "eta_00")?;
            fit_waist_profile(&points, &cfg.cavity)?
        }
        FitCommand::Temp { data } => {
            if s.common.config.is_some() {
                s.load_config()?;
            }
            let text = s.read_input(&data.data)?;
            let points = io::read_pairs(text.as_bytes(), "temp_k", "eta_00")?;
            fit_temperature(&points)?
        }
    };
    let name = format!("fit_{}.csv", cmd.name());
    s.write_output(&name, |w| io::write_fit(w, &fit))?;
    report_fit(s, &fit);
    Ok(())
}

fn report_fit(s: &mut Session, fit: &FitResult) {
    for p in &fit.parameters {
        let _ = writeln!(s.report, "{} = {:.6e} +/- {:.2e}", p.name, p.value, p.stderr);
    }
    let _ = writeln!(s.report, "rss {:.6e}, dof {}", fit.rss, fit.dof);
    for a in &fit.annotations {
        let _ = writeln!(s.report, "note: {a}");
    }
    s.warnings.extend(fit.warnings.iter().cloned());
}

fn check_mode(j: usize) -> Result<(), Failure> {
    if j > 2 {
        return Err(Failure::validation(format!("mode index {j} out of range 0..=2")));
    }
    Ok(())
}

fn parse_pair(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::validation(format!("--modes expects `j,k` with distinct indices in 0..=2, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let j: usize = a.trim().parse().map_err(|_| bad())?;
    let k: usize = b.trim().parse().map_err(|_| bad())?;
    if j > 2 || k > 2 || j == k {
        return Err(bad());
    }
    Ok((j, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_pairs() {
        assert_eq!(parse_pair("0,1").unwrap(), (0, 1));
        assert_eq!(parse_pair(" 2 , 1").unwrap(), (2, 1));
        assert!(parse_pair("1,1").is_err());
        assert!(parse_pair("0,3").is_err());
        assert!(parse_pair("01").is_err());
    }
}
