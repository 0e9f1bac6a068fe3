//! Claim data files, run configuration, report writers and command workflows.
mod config;
mod records;
mod run;

pub use config::{
    AlphaEstimationConfig, BoostBlock, DataConfig, EvaluateConfig, Experiment, FunctionClassConfig,
    Generator, LevelConfig, LevelMode, LossConfig, LossKindConfig, RunConfig, SplitConfig,
    SynthConfig,
};
pub use records::{claims_to_jsonl, load_claims, write_claims, ClaimDataset, ClaimEntry, ClaimRecordLine};
pub use run::{run_command, Command, RunOutput};

use crate::error::{Error, Result};
use crate::eval::CoverageReport;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Column order of every coverage CSV.
pub const REPORT_HEADER: [&str; 6] = ["bin_lo", "bin_hi", "nominal_mean", "realized", "count", "stderr"];

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Validation(format!("csv: {e}"))
}

/// Serialize rows under a fixed header.
pub fn csv_bytes<R: Serialize>(header: &[&str], rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Validation(e.to_string()))
}

/// Coverage report as CSV bytes; realized values must lie in `[0, 1]`.
pub fn report_csv(report: &CoverageReport) -> Result<Vec<u8>> {
    if let Some(r) = report.rows.iter().find(|r| !(0.0..=1.0).contains(&r.realized)) {
        return Err(Error::Contract(format!("realized coverage {} outside [0, 1]", r.realized)));
    }
    let rows: Vec<(f64, f64, f64, f64, usize, f64)> = report
        .rows
        .iter()
        .map(|r| (r.bin_lo, r.bin_hi, r.nominal_mean, r.realized, r.count, r.stderr))
        .collect();
    csv_bytes(&REPORT_HEADER, &rows)
}

/// Write each report as `<name>.csv` under `out_dir`.
pub fn write_reports(reports: &[(&str, &CoverageReport)], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    reports
        .iter()
        .map(|(name, report)| {
            let p = out_dir.join(format!("{name}.csv"));
            write_atomic(&p, &report_csv(report)?)?;
            Ok(p)
        })
        .collect()
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub sub_seeds: BTreeMap<String, u64>,
    /// Record ids per role; empty for synthetic runs.
    pub splits: BTreeMap<String, Vec<String>>,
    /// Group label order used by per-group reports (`bin_lo` holds the index).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<String>,
    pub files: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::calibration_curve;

    #[test]
    fn report_is_deterministic_with_header() {
        let r = calibration_curve(&[0.85, 0.9, 0.95], &[1.0, 0.0, 1.0], &[0.8, 0.9, 1.0]).unwrap();
        let a = report_csv(&r).unwrap();
        assert_eq!(a, report_csv(&r).unwrap());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,nominal_mean,realized,count,stderr\n"));
        assert_eq!(text.lines().count(), 3);
        let empty = report_csv(&CoverageReport::default()).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "bin_lo,bin_hi,nominal_mean,realized,count,stderr\n");
    }

    #[test]
    fn written_files_parse_back_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let r = calibration_curve(&[0.5, 0.7], &[1.0, 0.0], &[0.0, 0.6, 1.0]).unwrap();
        let files = write_reports(&[("cal", &r)], dir.path()).unwrap();
        let mut rd = csv::Reader::from_path(&files[0]).unwrap();
        for rec in rd.records() {
            let v: f64 = rec.unwrap()[3].parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn unwritable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = write_reports(&[("r", &CoverageReport::default())], blocker.join("sub")).unwrap_err();
        assert_eq!(err.category(), "io");
    }
}
