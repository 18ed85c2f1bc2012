use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Outcome of one quantitative check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check_name: String,
    pub statistic: f64,
    pub bound: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

impl Verdict {
    /// Passes when `statistic ≤ bound`.
    pub fn at_most(name: impl Into<String>, statistic: f64, bound: f64) -> Self {
        Verdict {
            check_name: name.into(),
            statistic,
            bound,
            pass: statistic <= bound,
            detail: None,
        }
    }

    /// Passes when `statistic ≥ bound`.
    pub fn at_least(name: impl Into<String>, statistic: f64, bound: f64) -> Self {
        Verdict {
            check_name: name.into(),
            statistic,
            bound,
            pass: statistic >= bound,
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// A named table plus verdicts; the CLI adds the run manifest.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub verdicts: Vec<Verdict>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        ExperimentReport {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{}", format_value(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Shortest round-trip representation; identical bits print identically.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> std::io::Result<()> {
    let report = ExperimentReport {
        header: header.to_vec(),
        rows: rows.to_vec(),
        ..Default::default()
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(report.to_csv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_round_trip_exact() {
        let mut r = ExperimentReport::new("t", &["a", "b"]);
        r.push_row(vec![0.1 + 0.2, 1.0 / 3.0]);
        r.push_row(vec![f64::NAN, 2.0]);
        let csv = r.to_csv();
        let line: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(line[0].to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(line[1].to_bits(), (1.0f64 / 3.0).to_bits());
        assert!(csv.contains("nan,2.0"));
    }

    #[test]
    fn verdict_directions() {
        assert!(Verdict::at_most("x", 1.0, 1.0).pass);
        assert!(!Verdict::at_most("x", 1.1, 1.0).pass);
        assert!(Verdict::at_least("x", 2.0, 1.5).pass);
        assert!(!Verdict::at_most("x", f64::NAN, 1.0).pass);
    }
}
