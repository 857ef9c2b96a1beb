//! JSON reports and CSV kernels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use finite_range::lattice::LatticeKernel;
use finite_range::verify::Check;
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::Settings;
use crate::CliError;

/// Version of the report layout.
pub const SCHEMA: u32 = 1;

/// Everything a command produces.
#[derive(Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
    pub results: serde_json::Map<String, Value>,
    pub kernels: Vec<(String, LatticeKernel)>,
    pub fields: Vec<(String, Vec<(Vec<i64>, f64)>)>,
    pub timings: Vec<(String, f64)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        self.results.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn to_json(&self, command: &str, settings: &Settings) -> Result<Value, CliError> {
        let mut v = json!({
            "schema": SCHEMA,
            "command": command,
            "settings": settings,
            "passed": self.passed(),
            "checks": self.checks,
            "results": self.results,
            "files": self.kernels.iter().map(|(n, _)| format!("{n}.csv"))
                .chain(self.fields.iter().map(|(n, _)| format!("{n}.csv")))
                .collect::<Vec<_>>(),
        });
        if settings.timings {
            v["timings"] = self
                .timings
                .iter()
                .map(|(k, t)| (k.clone(), json!(t)))
                .collect::<serde_json::Map<_, _>>()
                .into();
        }
        Ok(v)
    }

    /// Writes `report.json` and one CSV per kernel or field into `dir`.
    pub fn write(&self, dir: &Path, json: &Value) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(json)? + "\n")?;
        for (name, k) in &self.kernels {
            fs::write(dir.join(format!("{name}.csv")), kernel_csv(k))?;
        }
        for (name, rows) in &self.fields {
            let dim = rows.first().map_or(0, |r| r.0.len());
            fs::write(dir.join(format!("{name}.csv")), rows_csv(dim, rows.iter().cloned()))?;
        }
        Ok(())
    }
}

fn header(dim: usize) -> String {
    let mut h: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    h.push("value".into());
    h.join(",") + "\n"
}

fn rows_csv(dim: usize, rows: impl Iterator<Item = (Vec<i64>, f64)>) -> String {
    let mut out = header(dim);
    for (site, v) in rows {
        for c in &site {
            let _ = write!(out, "{c},");
        }
        let _ = writeln!(out, "{v:e}");
    }
    out
}

/// `x1,...,xd,value` with integer offsets at the kernel's spacing.
pub fn kernel_csv(k: &LatticeKernel) -> String {
    let mut rows = Vec::with_capacity(k.len());
    k.for_each(|s, v| rows.push((s.to_vec(), v)));
    rows_csv(k.dim(), rows.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use finite_range::lattice::LatticeSpec;

    #[test]
    fn csv_layout() {
        let s = LatticeSpec::new(2, 1, 0).unwrap();
        let k = LatticeKernel::centered_from_fn(s, 1, |x| (x[0] * 3 + x[1]) as f64);
        let csv = kernel_csv(&k);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x1,x2,value");
        assert_eq!(lines[1], "-1,-1,-4e0");
        assert_eq!(lines.len(), 10);
    }
}
