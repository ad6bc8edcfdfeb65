//! CSV and JSON emission. Column order is part of the output contract.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::invariants::InvariantRow;
use super::studies::{OptimalityReport, ResidualReport};
use crate::error::{Error, Result};

pub const RESIDUAL_HEADER: &str = "epsilon,delta,v0,q,v_hat,se,residual,resolved";
pub const OPTIMALITY_HEADER: &str = "epsilon,delta,challenger,v_hat,se,ell_hat,ell_se,verdict";
pub const INVARIANTS_HEADER: &str = "name,measured,tolerance,verdict";

/// One row per grid point, then `summary,,,,,<slope_se>,<slope>,<verdict>`.
pub fn residual_csv(r: &ResidualReport) -> String {
    let mut s = String::new();
    writeln!(s, "{RESIDUAL_HEADER}").unwrap();
    for row in &r.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            row.epsilon, row.delta, row.v0, row.q, row.v_hat, row.se, row.residual, row.resolved
        )
        .unwrap();
    }
    let (slope, se) = r.fit.map_or((f64::NAN, f64::NAN), |f| (f.slope, f.slope_se));
    writeln!(s, "summary,,,,,{se},{slope},{}", r.verdict.as_str()).unwrap();
    s
}

pub fn optimality_csv(r: &OptimalityReport) -> String {
    let mut s = String::new();
    writeln!(s, "{OPTIMALITY_HEADER}").unwrap();
    for row in &r.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            row.epsilon,
            row.delta,
            row.challenger,
            row.v_hat,
            row.se,
            row.ell_hat,
            row.ell_se,
            row.verdict.as_str()
        )
        .unwrap();
    }
    s
}

pub fn invariants_csv(rows: &[InvariantRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{INVARIANTS_HEADER}").unwrap();
    for r in rows {
        writeln!(s, "{},{},{},{}", r.name, r.measured, r.tolerance, r.verdict.as_str()).unwrap();
    }
    s
}

/// Header line plus pre-rendered rows.
pub fn table_csv(header: &str, rows: &[Vec<String>]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// Non-finite numbers become `null`.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("json: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    log::info!("wrote {}", dir.join(name).display());
    Ok(())
}
