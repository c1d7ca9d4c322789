//! Comparison tables of simulated metrics against the static-damping
//! baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifacts::MetricsFile;
use crate::error::{Error, Result};
use crate::pipeline::percent_improvement;
use crate::sim::Metrics;

pub const BASELINE: &str = "static";

type Quantity = fn(&Metrics) -> f64;

const ROWS: [(&str, Quantity); 4] = [
    ("J", |m| m.j),
    ("E{z1^2}", |m| m.z1),
    ("E{z2^2}", |m| m.z2),
    ("E{u^2}", |m| m.u),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub quantity: String,
    pub values: Vec<f64>,
    /// Improvement of each non-baseline column over the baseline, percent.
    pub improvements: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    /// Baseline first.
    pub controllers: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Builds the table from pooled metrics; the static-damping file is the
/// baseline and must be present.
pub fn build_report(files: &[MetricsFile]) -> Result<ReportTable> {
    let base = files
        .iter()
        .find(|f| f.controller == BASELINE)
        .ok_or_else(|| Error::InvalidParameter("no static damping baseline among the metrics files".into()))?;
    let mut cols: Vec<&MetricsFile> = vec![base];
    cols.extend(files.iter().filter(|f| !std::ptr::eq(*f, base)));
    let rows = ROWS
        .iter()
        .map(|(name, get)| {
            let values: Vec<f64> = cols.iter().map(|f| get(&f.pooled)).collect();
            let improvements = values[1..].iter().map(|&v| percent_improvement(values[0], v)).collect();
            ReportRow {
                quantity: (*name).into(),
                values,
                improvements,
            }
        })
        .collect();
    Ok(ReportTable {
        controllers: cols.iter().map(|f| f.controller.clone()).collect(),
        rows,
    })
}

impl ReportTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "");
        for c in &self.controllers {
            let _ = write!(out, "{c:>22}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<10}", r.quantity);
            for (i, v) in r.values.iter().enumerate() {
                let cell = if i == 0 {
                    format!("{v:.4e}")
                } else {
                    format!("{v:.4e} ({:+.1}%)", r.improvements[i - 1])
                };
                let _ = write!(out, "{cell:>22}");
            }
            out.push('\n');
        }
        out
    }

    pub fn render_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["quantity".to_string()];
        for (i, c) in self.controllers.iter().enumerate() {
            header.push(c.clone());
            if i > 0 {
                header.push(format!("{c}_improvement_pct"));
            }
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.quantity.clone()];
            for (i, v) in r.values.iter().enumerate() {
                rec.push(format!("{v:e}"));
                if i > 0 {
                    rec.push(format!("{}", r.improvements[i - 1]));
                }
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::{Provenance, FORMAT_VERSION};
    use approx::assert_relative_eq;

    fn file(name: &str, j: f64, u: f64) -> MetricsFile {
        let m = Metrics {
            j,
            z1: j / 3.0,
            z2: 2.0 * j / 3.0,
            u,
            w: 0.0,
            samples: 1,
        };
        MetricsFile {
            format: FORMAT_VERSION,
            provenance: Provenance::new("h", "simulate"),
            controller: name.into(),
            duration: 6000.0,
            warmup: 10.0,
            below_warmup: false,
            per_seed: vec![],
            pooled: m,
        }
    }

    #[test]
    fn long_simulation_triplet() {
        let t = build_report(&[file("spsa", 0.0198, 0.219), file("static", 0.0240, 0.139), file("pgc", 0.0187, 0.259)]).unwrap();
        assert_eq!(t.controllers, ["static", "spsa", "pgc"]);
        let j = &t.rows[0];
        assert_relative_eq!(j.improvements[0], 17.5, epsilon = 0.05);
        assert_relative_eq!(j.improvements[1], 22.1, epsilon = 0.05);
        let u = &t.rows[3];
        assert_relative_eq!(u.improvements[0], -57.6, epsilon = 0.05);
        assert_relative_eq!(u.improvements[1], -86.3, epsilon = 0.05);
        assert!(t.render_text().contains("+17.5%"));
    }

    #[test]
    fn baseline_only_has_no_percentages() {
        let t = build_report(&[file("static", 0.024, 0.139)]).unwrap();
        assert!(t.rows.iter().all(|r| r.improvements.is_empty()));
        let csv = t.render_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "quantity,static");
        assert!(!t.render_text().contains('%'));
    }

    #[test]
    fn missing_baseline_is_an_error() {
        assert!(build_report(&[file("spsa", 0.02, 0.2)]).is_err());
        assert!(build_report(&[]).is_err());
    }

    #[test]
    fn csv_has_improvement_columns() {
        let t = build_report(&[file("static", 0.024, 0.139), file("pgc", 0.0187, 0.259)]).unwrap();
        let csv = t.render_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "quantity,static,pgc,pgc_improvement_pct");
        assert_eq!(csv.lines().count(), 5);
    }
}
