//! CSV readers and writers. Files are headered, comma-separated and use the
//! shortest round-trip decimal form of every number.

use std::io::{Read, Write};

use nalgebra::Matrix6;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fit::{CrossRecord, FitResult, PowerReference, PowerVarianceRecord};
use crate::model::{upper_triangle, upper_triangle_labels, QuadratureCovariance};
use crate::oracle::{Comparison, PsdEstimate};
use crate::spectra::{duan_criterion, vlf_tripartite, SpectrumResult, SweepRow};

fn num(x: f64) -> String {
    format!("{x}")
}

fn diagnostic_labels() -> Vec<String> {
    ["duan_value", "vlf_1", "vlf_2", "vlf_3"].map(String::from).to_vec()
}

fn diagnostics(v: &QuadratureCovariance) -> Vec<String> {
    let d = duan_criterion(v);
    let f = vlf_tripartite(v);
    std::iter::once(d.value).chain(f.values).map(num).collect()
}

/// One row per grid point: axis value, omega, the 21 covariance entries,
/// the Duan and van Loock-Furusawa values, and `status` (`ok` or the error).
pub fn write_sweep<W: Write>(out: W, axis_name: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![axis_name.to_string(), "omega".into()];
    header.extend(upper_triangle_labels());
    header.extend(diagnostic_labels());
    header.push("status".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![num(r.axis_value), num(r.omega)];
        match &r.outcome {
            Ok(s) => {
                rec.extend(s.entries.iter().copied().map(num));
                rec.push(num(s.duan.value));
                rec.extend(s.vlf.values.iter().copied().map(num));
                rec.push("ok".into());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 25));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Component breakdown of one spectrum: rows `total`, `pure`, `loss`,
/// `phase` and, when present, `detected`.
pub fn write_spectrum<W: Write>(out: W, pump_ratio: f64, s: &SpectrumResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["component".to_string(), "pump_ratio".into(), "omega".into()];
    header.extend(upper_triangle_labels());
    header.extend(diagnostic_labels());
    w.write_record(&header)?;
    let mut rows: Vec<(&str, [f64; 21], Option<&QuadratureCovariance>)> = vec![
        ("total", s.v_total.upper_triangle(), Some(&s.v_total)),
        ("pure", upper_triangle(&s.v_pure), None),
        ("loss", upper_triangle(&s.v_loss), None),
        ("phase", upper_triangle(&s.v_phase), None),
    ];
    if let Some(d) = &s.detected {
        rows.push(("detected", d.upper_triangle(), Some(d)));
    }
    for (name, entries, cov) in rows {
        let mut rec = vec![name.to_string(), num(pump_ratio), num(s.omega)];
        rec.extend(entries.iter().copied().map(num));
        match cov {
            Some(v) => rec.extend(diagnostics(v)),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Sweep layout with `omega` as the axis, followed by one `_stderr` column
/// per entry and the segment counts. Diagnostics are left empty when the
/// estimate is not positive semidefinite.
pub fn write_psd<W: Write>(out: W, est: &PsdEstimate) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let labels = upper_triangle_labels();
    let mut header = vec!["omega".to_string()];
    header.extend(labels.iter().cloned());
    header.extend(diagnostic_labels());
    header.extend(labels.iter().map(|l| format!("{l}_stderr")));
    header.push("n_segments".into());
    header.push("effective_segments".into());
    w.write_record(&header)?;
    for (i, omega) in est.omegas.iter().enumerate() {
        let mut rec = vec![num(*omega)];
        rec.extend(upper_triangle(&est.covariance[i]).iter().copied().map(num));
        match QuadratureCovariance::new(est.covariance[i]) {
            Ok(v) => rec.extend(diagnostics(&v)),
            Err(_) => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        rec.extend(upper_triangle(&est.stderr[i]).iter().copied().map(num));
        rec.push(est.n_segments.to_string());
        rec.push(num(est.effective_segments));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per entry: estimate, standard error, target, z-score, relative
/// error and whether it passed.
pub fn write_comparison<W: Write>(
    out: W,
    est: &PsdEstimate,
    index: usize,
    target: &Matrix6<f64>,
    cmp: &Comparison,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["entry", "estimate", "stderr", "target", "z", "relative_error", "pass"])?;
    let est_v = upper_triangle(&est.covariance[index]);
    let se = upper_triangle(&est.stderr[index]);
    let tgt = upper_triangle(target);
    for (k, label) in upper_triangle_labels().into_iter().enumerate() {
        w.write_record([
            label,
            num(est_v[k]),
            num(se[k]),
            num(tgt[k]),
            num(cmp.z_scores[k]),
            num(cmp.relative_error[k]),
            cmp.pass[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `parameter,value,stderr` rows followed by `rss` and `dof`.
pub fn write_fit<W: Write>(out: W, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "value", "stderr"])?;
    for p in &fit.parameters {
        w.write_record([p.name.clone(), num(p.value), num(p.stderr)])?;
    }
    w.write_record(["rss".to_string(), num(fit.rss), String::new()])?;
    w.write_record(["dof".to_string(), fit.dof.to_string(), String::new()])?;
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct DiagRow {
    power_w: f64,
    power_ref: String,
    var_p: f64,
    var_q: f64,
    #[serde(default)]
    sigma_var: Option<f64>,
}

#[derive(Deserialize)]
struct CrossRow {
    power_j_w: f64,
    power_k_w: f64,
    cov_q: f64,
    #[serde(default)]
    sigma: Option<f64>,
    #[serde(default)]
    power_ref: Option<String>,
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Columns `power_w, power_ref, var_p, var_q[, sigma_var]`.
pub fn read_power_variance<R: Read>(input: R) -> Result<Vec<PowerVarianceRecord>> {
    read_rows::<_, DiagRow>(input)?
        .into_iter()
        .map(|r| {
            Ok(PowerVarianceRecord {
                power: r.power_w,
                power_reference: r.power_ref.parse()?,
                variance_p: r.var_p,
                variance_q: r.var_q,
                sigma_var: r.sigma_var,
            })
        })
        .collect()
}

/// Columns `power_j_w, power_k_w, cov_q[, sigma][, power_ref]`; powers are
/// intracavity unless `power_ref` says otherwise.
pub fn read_cross<R: Read>(input: R) -> Result<Vec<CrossRecord>> {
    read_rows::<_, CrossRow>(input)?
        .into_iter()
        .map(|r| {
            Ok(CrossRecord {
                power_j: r.power_j_w,
                power_k: r.power_k_w,
                power_reference: match r.power_ref {
                    Some(s) => s.parse()?,
                    None => PowerReference::Intracavity,
                },
                covariance_q: r.cov_q,
                sigma: r.sigma,
            })
        })
        .collect()
}

/// Two named columns plus an optional `sigma` column.
pub fn read_pairs<R: Read>(input: R, x_col: &str, y_col: &str) -> Result<Vec<(f64, f64, Option<f64>)>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = r.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::InvalidParameter {
        name: "csv",
        reason: format!("missing column `{name}`"),
    };
    let xi = find(x_col).ok_or_else(|| missing(x_col))?;
    let yi = find(y_col).ok_or_else(|| missing(y_col))?;
    let si = find("sigma");
    let parse = |rec: &csv::StringRecord, i: usize, line: usize| -> Result<f64> {
        let v = rec.get(i).unwrap_or("");
        v.parse().map_err(|_| Error::BadValue {
            key: format!("{} (row {line})", headers.get(i).unwrap_or("?")),
            value: v.to_string(),
            expected: "a number",
        })
    };
    r.records()
        .enumerate()
        .map(|(n, rec)| {
            let rec = rec?;
            let sigma = match si {
                Some(i) if !rec.get(i).unwrap_or("").is_empty() => Some(parse(&rec, i, n + 2)?),
                _ => None,
            };
            Ok((parse(&rec, xi, n + 2)?, parse(&rec, yi, n + 2)?, sigma))
        })
        .collect()
}
