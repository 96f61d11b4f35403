use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sweep::RunReport;

pub const REPORT_SCHEMA: &str = "surgift-report-1";

pub const CSV_HEADER: [&str; 9] = [
    "run_id",
    "scenario",
    "strategy",
    "seed",
    "lr",
    "best_val",
    "test",
    "relative",
    "test_stderr",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub runs: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
}

impl Report {
    pub fn new(runs: Vec<RunReport>) -> Self {
        let summary = summarize(&runs);
        Self {
            schema: REPORT_SCHEMA.to_string(),
            runs,
            summary,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Report = serde_json::from_str(&text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::invalid(format!("unsupported report schema `{}`", r.schema)));
        }
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean over seeds of completed runs for one (scenario, strategy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub strategy: String,
    pub n: usize,
    pub aborted: usize,
    pub best_val: f64,
    pub test: f64,
    pub relative: Option<f64>,
    /// Sample standard deviation over `√n`; absent for a single run.
    pub test_stderr: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn stderr(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    Some((var / v.len() as f64).sqrt())
}

/// Groups by (scenario, strategy) in sorted order.
pub fn summarize(runs: &[RunReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunReport>> = BTreeMap::new();
    for r in runs {
        groups.entry((&r.scenario, &r.strategy)).or_default().push(r);
    }
    groups
        .into_iter()
        .filter_map(|((scenario, strategy), rs)| {
            let done: Vec<&&RunReport> = rs.iter().filter(|r| r.test.is_some()).collect();
            if done.is_empty() {
                return None;
            }
            let test: Vec<f64> = done.iter().filter_map(|r| r.test).collect();
            let val: Vec<f64> = done.iter().filter_map(|r| r.best_val).collect();
            let rel: Vec<f64> = done.iter().filter_map(|r| r.relative).collect();
            Some(SummaryRow {
                scenario: scenario.to_string(),
                strategy: strategy.to_string(),
                n: done.len(),
                aborted: rs.len() - done.len(),
                best_val: mean(&val),
                test: mean(&test),
                relative: (rel.len() == done.len()).then(|| mean(&rel)),
                test_stderr: stderr(&test),
            })
        })
        .collect()
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-run rows followed by one `summary` row per (scenario, strategy).
/// Aborted runs keep their row with empty metric cells.
pub fn write_csv<W: Write>(runs: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        w.write_record([
            r.run_id.clone(),
            r.scenario.clone(),
            r.strategy.clone(),
            r.seed.to_string(),
            num(r.lr),
            num(r.best_val),
            num(r.test),
            num(r.relative),
            String::new(),
        ])?;
    }
    for s in summarize(runs) {
        w.write_record([
            "summary".to_string(),
            s.scenario,
            s.strategy,
            String::new(),
            String::new(),
            s.best_val.to_string(),
            s.test.to_string(),
            num(s.relative),
            num(s.test_stderr),
        ])?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
    Ok(())
}

pub fn csv_string(runs: &[RunReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(runs, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::invalid(e.to_string()))
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn emit_report(runs: &[RunReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    std::fs::write(&json, Report::new(runs.to_vec()).to_json()?).map_err(|e| Error::io(&json, e))?;
    let csv_path = dir.join("report.csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(runs, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(strategy: &str, seed: u64, test: Option<f64>) -> RunReport {
        RunReport {
            run_id: format!("{strategy}-{seed}"),
            scenario: "label_flip".into(),
            strategy: strategy.into(),
            seed,
            lr: Some(1e-3),
            tuned: vec![],
            curves: vec![],
            best_val: test,
            best_epoch: Some(0),
            test,
            test_loss: test,
            relative: None,
            child_runs: 3,
            selected_block: None,
            trace: None,
            aborted: test.is_none().then(|| "boom".into()),
            wall_clock_secs: 1.0,
        }
    }

    #[test]
    fn stderr_uses_sample_deviation() {
        assert_eq!(stderr(&[1.0]), None);
        let s = stderr(&[1.0, 3.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_has_runs_then_summaries_and_no_wall_clock() {
        let runs = vec![run("all", 0, Some(0.5)), run("all", 1, Some(0.7)), run("last", 0, None)];
        let text = csv_string(&runs).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert!(lines[3].starts_with("last-0,label_flip,last,0,0.001,,,,"));
        assert!(lines[4].starts_with("summary,label_flip,all,,,0.6"));
        assert!(!text.contains("wall"));
    }

    #[test]
    fn json_round_trips() {
        let r = Report::new(vec![run("all", 0, Some(0.5))]);
        let back: Report = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.summary[0].test_stderr, None);
    }
}
