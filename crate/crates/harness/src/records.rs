//! Run records as JSON lines, the report as one JSON document.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use poolmix::PoolingConfig;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{io_err, HarnessError, Result};
use crate::report::Report;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// One search iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub step: u64,
    pub method: Method,
    pub config: PoolingConfig,
    pub config_id: usize,
    pub model: usize,
    /// Validation-minibatch accuracy after the training step.
    pub accuracy: f64,
    /// Sampling temperature in effect (inverse of the Boltzmann inverse
    /// temperature for `bse`); absent for methods without one.
    pub tau: Option<f64>,
    pub loss: Option<f64>,
    /// Milliseconds since the run started.
    pub wall_ms: f64,
}

/// Appends records to a file, one JSON object per line.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<u64>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_step: None,
        })
    }

    pub fn append(&mut self, rec: &RunRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| rec.step <= s) {
            return Err(HarnessError::Data(format!(
                "record step {} does not follow {}",
                rec.step,
                self.last_step.unwrap_or_default()
            )));
        }
        self.last_step = Some(rec.step);
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = RecordWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.flush()
}

/// Reads a record file; a malformed line or a step that does not increase
/// is reported with its 1-based line number.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out: Vec<RunRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| HarnessError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: RunRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(prev) = out.last() {
            if rec.step <= prev.step {
                return Err(parse_err(format!(
                    "step {} after step {}",
                    rec.step, prev.step
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Writes `records.jsonl` and `report.json` into `dir`, creating it.
pub fn persist_results(records: &[RunRecord], report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_records(&dir.join(RECORDS_FILE), records)?;
    write_report(&dir.join(REPORT_FILE), report)
}

pub fn load_results(dir: &Path) -> Result<(Vec<RunRecord>, Report)> {
    Ok((
        read_records(&dir.join(RECORDS_FILE))?,
        read_report(&dir.join(REPORT_FILE))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> RunRecord {
        RunRecord {
            step,
            method: Method::Balanced,
            config: "[4,3,3]".parse().unwrap(),
            config_id: 27,
            model: 1,
            accuracy: 0.1 + step as f64 / 3.0 % 0.8,
            tau: Some(1.0 / 3.0),
            loss: None,
            wall_ms: 0.25,
        }
    }

    #[test]
    fn records_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let records: Vec<RunRecord> = (0..1000).map(rec).collect();
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }

    #[test]
    fn corrupt_line_is_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, &[rec(0), rec(1), rec(2)]).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen("\"step\":1,", "\"step\":1,,", 1);
        fs::write(&path, text).unwrap();
        match read_records(&path) {
            Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_increasing_steps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = RecordWriter::create(&path).unwrap();
        w.append(&rec(3)).unwrap();
        assert!(w.append(&rec(3)).is_err());
        w.flush().unwrap();
        let lines = format!(
            "{}\n{}\n",
            serde_json::to_string(&rec(5)).unwrap(),
            serde_json::to_string(&rec(4)).unwrap()
        );
        fs::write(&path, lines).unwrap();
        assert!(matches!(
            read_records(&path),
            Err(HarnessError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_records(Path::new("/nonexistent/r.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/r.jsonl"));
    }
}
