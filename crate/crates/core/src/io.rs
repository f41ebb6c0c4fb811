//! CSV and JSON artifacts, and the system-description file.
//!
//! Floats are written with 17 significant digits (`{:.16e}`); booleans as
//! 0/1; undefined values as `NaN`. Files are written to a temporary
//! sibling and renamed, so a failed run never leaves a partial file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{EfficiencyScan, SweepResult};
use crate::error::{Error, Result};
use crate::estimation::EstimationRun;
use crate::linalg::{matrix_from_rows, SymMatrix};
use crate::model::{build_opo, LgqSystem, OpoParams};
use crate::trajectory::{MeasurementRecord, TrueTrajectory};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    fmt_f64(v.unwrap_or(f64::NAN))
}

fn fmt_bool(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn upper_names(prefix: &str, m: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 1..=m {
        for j in i..=m {
            out.push(format!("{prefix}_{i}{j}"));
        }
    }
    out
}

/// `t, x_true_1..M, yodt_1..L_o[, yudt_1..L_u]`, one row per step.
pub fn trajectory_csv(traj: &TrueTrajectory, record: &MeasurementRecord) -> Result<Vec<u8>> {
    let m = traj.means.nrows();
    let mut header = vec!["t".to_string()];
    header.extend(numbered("x_true", m));
    header.extend(numbered("yodt", record.y_o_dt.nrows()));
    if let Some(u) = &record.y_u_dt {
        header.extend(numbered("yudt", u.nrows()));
    }
    let rows = (0..record.grid.n_steps()).map(|k| {
        let mut row = vec![fmt_f64(record.grid.time(k))];
        row.extend(traj.means.column(k).iter().map(|&v| fmt_f64(v)));
        row.extend(record.y_o_dt.column(k).iter().map(|&v| fmt_f64(v)));
        if let Some(u) = &record.y_u_dt {
            row.extend(u.column(k).iter().map(|&v| fmt_f64(v)));
        }
        row
    });
    csv_bytes(&header, rows)
}

/// Filtered, smoothed and SWV moments, purities and physicality flags,
/// one row per grid node.
pub fn estimation_csv(run: &EstimationRun) -> Result<Vec<u8>> {
    let m = run.filter.filter.means.nrows();
    let mut header = vec!["t".to_string()];
    for (x, v) in [("xF", "VF"), ("xS", "VS"), ("xSWV", "VSWV")] {
        header.extend(numbered(x, m));
        header.extend(upper_names(v, m));
    }
    header.extend(["PT", "PF", "PS", "PSWV", "physical_S", "physical_SWV"].map(String::from));
    let f = &run.filter.filter;
    let s = &run.smoother;
    let moments = |row: &mut Vec<String>, means: &crate::linalg::Matrix, cov: &SymMatrix, k: usize| {
        row.extend(means.column(k).iter().map(|&v| fmt_f64(v)));
        row.extend(cov.upper_entries().into_iter().map(fmt_f64));
    };
    let rows = (0..run.grid.n_nodes()).map(|k| {
        let mut row = vec![fmt_f64(run.grid.time(k))];
        moments(&mut row, &f.means, &f.cov[k], k);
        moments(&mut row, &s.means, &s.cov[k], k);
        moments(&mut row, &s.swv_means, &s.swv_cov[k], k);
        row.extend(
            [
                run.purity_true[k],
                run.purity_filtered[k],
                run.purity_smoothed[k],
                run.purity_swv[k],
            ]
            .map(fmt_f64),
        );
        row.push(fmt_bool(run.physical_smoothed[k]));
        row.push(fmt_bool(run.physical_swv[k]));
        row
    });
    csv_bytes(&header, rows)
}

/// `theta_o, theta_u, PF, PS, PSWV, RPR, physical_SWV`.
pub fn sweep_csv(sweep: &SweepResult) -> Result<Vec<u8>> {
    let header = ["theta_o", "theta_u", "PF", "PS", "PSWV", "RPR", "physical_SWV"].map(String::from);
    let rows = sweep.points.iter().map(|p| {
        vec![
            fmt_f64(p.theta_o),
            fmt_f64(p.theta_u),
            fmt_f64(p.purity_f),
            fmt_f64(p.purity_s),
            fmt_f64(p.purity_swv),
            fmt_opt(p.rpr),
            fmt_bool(p.physical_swv),
        ]
    });
    csv_bytes(&header, rows)
}

/// `theta_o, theta_u_grid, theta_u_opt, RPR` for the optimal-phase curve.
pub fn optimal_phase_csv(sweep: &SweepResult) -> Result<Vec<u8>> {
    let header = ["theta_o", "theta_u_grid", "theta_u_opt", "RPR"].map(String::from);
    let rows = sweep.optimal.iter().map(|o| {
        vec![
            fmt_f64(o.theta_o),
            fmt_f64(o.theta_u_grid),
            fmt_f64(o.theta_u),
            fmt_f64(o.rpr),
        ]
    });
    csv_bytes(&header, rows)
}

/// `eta_o, PF, PS, PSWV, RPR, PF_asym, RPR_fit`.
pub fn efficiency_csv(scan: &EfficiencyScan) -> Result<Vec<u8>> {
    let header = ["eta_o", "PF", "PS", "PSWV", "RPR", "PF_asym", "RPR_fit"].map(String::from);
    let rows = scan.points.iter().map(|e| {
        let p = &e.point;
        vec![
            fmt_f64(p.eta_o),
            fmt_f64(p.purity_f),
            fmt_f64(p.purity_s),
            fmt_f64(p.purity_swv),
            fmt_opt(p.rpr),
            fmt_opt(e.purity_f_asym),
            fmt_f64(e.rpr_fit),
        ]
    });
    csv_bytes(&header, rows)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// System description: explicit matrices (row-major nested arrays) or OPO
/// parameters under the key `"opo"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemFile {
    Opo {
        opo: OpoParams,
    },
    Explicit {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "D")]
        d: Vec<Vec<f64>>,
        #[serde(rename = "C_o")]
        c_o: Vec<Vec<f64>>,
        #[serde(rename = "C_u")]
        c_u: Vec<Vec<f64>>,
        #[serde(rename = "Gamma_o")]
        gamma_o: Vec<Vec<f64>>,
        #[serde(rename = "Gamma_u")]
        gamma_u: Vec<Vec<f64>>,
        #[serde(default = "unit_hbar")]
        hbar: f64,
    },
}

fn unit_hbar() -> f64 {
    1.0
}

impl SystemFile {
    pub fn build(&self) -> Result<LgqSystem> {
        match self {
            SystemFile::Opo { opo } => build_opo(opo),
            SystemFile::Explicit {
                a,
                d,
                c_o,
                c_u,
                gamma_o,
                gamma_u,
                hbar,
            } => {
                // An empty channel is given as [] and has no columns to infer.
                let dim = a.len();
                let channel = |rows: &Vec<Vec<f64>>| {
                    if rows.is_empty() {
                        Ok(crate::linalg::Matrix::zeros(0, dim))
                    } else {
                        matrix_from_rows(rows)
                    }
                };
                LgqSystem::new(
                    matrix_from_rows(a)?,
                    SymMatrix::new(matrix_from_rows(d)?)?,
                    channel(c_o)?,
                    channel(c_u)?,
                    channel(gamma_o)?,
                    channel(gamma_u)?,
                    *hbar,
                )
            }
        }
    }
}

pub fn parse_system(json: &str) -> Result<LgqSystem> {
    let file: SystemFile = serde_json::from_str(json).map_err(|e| Error::InvalidSystem(format!("system file: {e}")))?;
    file.build()
}

pub fn load_system(path: &Path) -> Result<LgqSystem> {
    let text = fs::read_to_string(path)?;
    parse_system(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_has_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn system_file_forms_agree() {
        let opo = parse_system(r#"{"opo": {"theta_o": 0.0, "theta_u": 0.0, "eta_o": 1.0, "eta_u": 0.0, "hbar": 1.0}}"#)
            .unwrap();
        let explicit = parse_system(
            r#"{"A": [[0, 0], [0, -2]], "D": [[1, 0], [0, 1]], "C_o": [[2, 0]], "C_u": [[0, 0]],
                "Gamma_o": [[-1, 0]], "Gamma_u": [[0, 0]], "hbar": 1}"#,
        )
        .unwrap();
        assert_eq!(opo.c_o(), explicit.c_o());
        assert_eq!(opo.gamma_o(), explicit.gamma_o());
        assert_eq!(opo.a(), explicit.a());
        assert_eq!(opo.d(), explicit.d());
    }

    #[test]
    fn bad_system_files_are_rejected() {
        assert!(parse_system(r#"{"opo": {"theta_o": 0, "theta_u": 0, "eta_o": 0.8, "eta_u": 0.8}}"#).is_err());
        assert!(parse_system(r#"{"A": [[0]]}"#).is_err());
        assert!(parse_system(
            r#"{"A": [[0, 1], [1]], "D": [[1, 0], [0, 1]], "C_o": [], "C_u": [], "Gamma_o": [], "Gamma_u": []}"#
        )
        .is_err());
    }
}
