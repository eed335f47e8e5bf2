use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::{csv_header, csv_row, AggregateTable, CaseMetrics, PairedTest};
use crate::train::DecoderChoice;

const POOLING: &str = "per-case metrics pooled across folds, then mean and population std over all cases";
const SIGNIFICANCE: &str = "paired t statistic on per-case mean DSC with a two-sided sign-flip permutation p-value \
                            (exhaustive for n <= 14, otherwise 10000 seeded flips) in place of the t-distribution";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub baseline: String,
    /// Absent when all paired differences are equal and nonzero.
    pub t_statistic: Option<f64>,
    pub p_value: f64,
    pub n: usize,
    pub exhaustive: bool,
}

impl Significance {
    pub(crate) fn new(baseline: &str, test: PairedTest) -> Self {
        Significance {
            baseline: baseline.to_string(),
            t_statistic: test.statistic.is_finite().then_some(test.statistic),
            p_value: test.p_value,
            n: test.n,
            exhaustive: test.exhaustive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub arm: String,
    pub decoder: DecoderChoice,
    pub lambda: Option<f64>,
    pub config_hash: String,
    pub aggregate: AggregateTable,
    pub vs_baseline: Option<Significance>,
    pub cases: Vec<CaseMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub config_hash: String,
    pub control_hash: String,
    pub fold_hash: String,
    pub folds: usize,
    pub pooling: String,
    pub significance: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub(crate) fn new(kind: &str, base: &ExperimentConfig, fold_hash: String, folds: usize, rows: Vec<ReportRow>) -> Self {
        Report {
            kind: kind.to_string(),
            config_hash: base.hash(),
            control_hash: base.control_hash(),
            fold_hash,
            folds,
            pooling: POOLING.to_string(),
            significance: SIGNIFICANCE.to_string(),
            rows,
        }
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Table with one line per row: method, then DSC and HD95 `mean(std)` cells
    /// for RV, Myo, LV and their mean, then the p-value against the baseline.
    pub fn to_csv(&self) -> String {
        let with_p = self.rows.iter().any(|r| r.vs_baseline.is_some());
        let mut s = csv_header();
        if with_p {
            s.push_str(",p vs baseline");
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&csv_row(&row.method, &row.aggregate));
            if with_p {
                match &row.vs_baseline {
                    Some(sig) => {
                        let _ = write!(s, ",{:.4}", sig.p_value);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Plot-ready `lambda,mean_dsc,std_dsc,mean_hd95,std_hd95` lines.
    pub fn lambda_csv(&self) -> String {
        let mut s = String::from("lambda,mean_dsc,std_dsc,mean_hd95,std_hd95\n");
        for row in &self.rows {
            if let (Some(lambda), Some(mean)) = (row.lambda, row.aggregate.column("Mean")) {
                let _ = writeln!(
                    s,
                    "{lambda},{:.6},{:.6},{:.6},{:.6}",
                    mean.dsc.mean, mean.dsc.std, mean.hd95.mean, mean.hd95.std
                );
            }
        }
        s
    }
}

/// Writes `report.json` and/or `report.csv` (plus `lambda.csv` for sweeps) into `dir`.
pub fn emit_report(report: &Report, formats: &[ReportFormat], dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::validation("report has no rows"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for format in formats {
        match format {
            ReportFormat::Json => {
                let mut bytes = serde_json::to_vec_pretty(report)?;
                bytes.push(b'\n');
                write_atomic(&dir.join("report.json"), &bytes)?;
            }
            ReportFormat::Csv => {
                write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
                if report.kind == "ablate-lambda" {
                    write_atomic(&dir.join("lambda.csv"), report.lambda_csv().as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Report> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("bad report: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{aggregate, StructureMetrics, STRUCTURES};

    fn row(method: &str, dsc: f64, lambda: Option<f64>) -> ReportRow {
        let cases: Vec<CaseMetrics> = (0..2)
            .map(|i| CaseMetrics {
                case_id: format!("00{i}_01"),
                structures: STRUCTURES
                    .iter()
                    .map(|n| StructureMetrics {
                        name: n.to_string(),
                        dsc: dsc + 0.01 * i as f64,
                        hd95: 2.0,
                        hd95_sentinel: false,
                        pred_empty: false,
                        gt_empty: false,
                    })
                    .collect(),
            })
            .collect();
        ReportRow {
            method: method.into(),
            arm: method.into(),
            decoder: DecoderChoice::Main,
            lambda,
            config_hash: "h".into(),
            aggregate: aggregate(&cases).unwrap(),
            vs_baseline: None,
            cases,
        }
    }

    fn report(kind: &str, rows: Vec<ReportRow>) -> Report {
        Report::new(kind, &ExperimentConfig::default(), "f".into(), 2, rows)
    }

    #[test]
    fn emits_json_and_csv_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("cv", vec![row("pls", 0.8715, Some(0.5))]);
        emit_report(&r, &[ReportFormat::Json, ReportFormat::Csv], dir.path()).unwrap();
        let csv = fs::read(dir.path().join("report.csv")).unwrap();
        let json = fs::read(dir.path().join("report.json")).unwrap();
        emit_report(&r, &[ReportFormat::Json, ReportFormat::Csv], dir.path()).unwrap();
        assert_eq!(csv, fs::read(dir.path().join("report.csv")).unwrap());
        assert_eq!(json, fs::read(dir.path().join("report.json")).unwrap());
        assert!(!dir.path().join("lambda.csv").exists());
        assert_eq!(load_report(&dir.path().join("report.json")).unwrap(), r);
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("pls,0.877(0.005),2.00(0.00)"));
    }

    #[test]
    fn lambda_sweep_gets_plot_file() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("ablate-lambda", vec![row("lambda=0.1", 0.7, Some(0.1)), row("lambda=0.5", 0.8, Some(0.5))]);
        emit_report(&r, &[ReportFormat::Csv], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("lambda.csv")).unwrap();
        let lambdas: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(lambdas, ["0.1", "0.5"]);
        assert!(!dir.path().join("report.json").exists());
    }

    #[test]
    fn significance_column_appears_with_baseline() {
        let mut r = report("ablate-supervision", vec![row("pce", 0.7, None), row("pls d1", 0.8, None)]);
        r.rows[1].vs_baseline = Some(Significance::new(
            "pce",
            PairedTest {
                statistic: f64::INFINITY,
                p_value: 0.5,
                n: 2,
                exhaustive: true,
            },
        ));
        let csv = r.to_csv();
        assert!(csv.lines().next().unwrap().ends_with(",p vs baseline"));
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
        assert!(csv.lines().nth(2).unwrap().ends_with(",0.5000"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<Report>(&json).unwrap(), r);
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&report("cv", vec![]), &[ReportFormat::Csv], dir.path()).is_err());
    }
}
