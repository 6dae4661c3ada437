//! Side-by-side comparison of finished experiment directories.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;

pub const REPORT_CSV_HEADER: &str = "run,corpus_cer,mean_nll_per_token,mean_reward";

/// One row of a run directory's `report.csv`: the baseline or one trained
/// mode, with its heldout aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub corpus_cer: f64,
    pub mean_nll_per_token: f64,
    pub mean_reward: f64,
}

pub fn write_report(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.run, r.corpus_cer, r.mean_nll_per_token, r.mean_reward
        ));
    }
    fsio::write_atomic(path, out.as_bytes())
}

/// Reads `report.csv` from an experiment directory.
pub fn read_report(dir: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let dir = dir.as_ref();
    let failed = dir.join("FAILED");
    if failed.exists() {
        let text = std::fs::read_to_string(&failed).unwrap_or_default();
        return Err(Error::Run(format!(
            "experiment in {} failed: {}",
            dir.display(),
            text.trim()
        )));
    }
    let path = dir.join("report.csv");
    let text = fsio::read_to_string(&path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_CSV_HEADER => {}
        _ => return Err(Error::parse(&path, 1, "missing report header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                &path,
                i + 1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let pf = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| Error::parse(&path, i + 1, format!("bad number '{}'", fields[j])))
        };
        rows.push(ReportRow {
            run: fields[0].to_string(),
            corpus_cer: pf(1)?,
            mean_nll_per_token: pf(2)?,
            mean_reward: pf(3)?,
        });
    }
    Ok(rows)
}

/// Renders a comparison table across experiment directories. The first
/// directory is the base; every later directory's rows show deltas against
/// the base row with the same run name. Directories that failed or cannot be
/// read are listed with a FAILED marker instead of aborting the whole
/// comparison; the boolean is false when any did.
pub fn compare_runs(dirs: &[impl AsRef<Path>]) -> Result<(String, bool)> {
    if dirs.is_empty() {
        return Err(Error::usage("compare needs at least one run directory"));
    }
    let mut out = String::new();
    let mut all_ok = true;
    let base = match read_report(dirs[0].as_ref()) {
        Ok(rows) => rows,
        Err(e) => {
            return Err(Error::Run(format!(
                "base run {} is unusable: {e}",
                dirs[0].as_ref().display()
            )))
        }
    };
    out.push_str(&format!("base: {}\n", dirs[0].as_ref().display()));
    out.push_str("  run                 corpus_cer   mean_nll_per_token   mean_reward\n");
    for r in &base {
        out.push_str(&format!(
            "  {:<18} {:>11.6} {:>20.6} {:>13.6}\n",
            r.run, r.corpus_cer, r.mean_nll_per_token, r.mean_reward
        ));
    }
    for dir in &dirs[1..] {
        let dir = dir.as_ref();
        out.push_str(&format!("\nvs: {}\n", dir.display()));
        match read_report(dir) {
            Err(e) => {
                all_ok = false;
                out.push_str(&format!("  FAILED: {e}\n"));
            }
            Ok(rows) => {
                out.push_str(
                    "  run                 corpus_cer   mean_nll_per_token   mean_reward   (deltas vs base)\n",
                );
                for r in &rows {
                    match base.iter().find(|b| b.run == r.run) {
                        Some(b) => out.push_str(&format!(
                            "  {:<18} {:>11.6} {:>20.6} {:>13.6}   ({:+.6}, {:+.6}, {:+.6})\n",
                            r.run,
                            r.corpus_cer,
                            r.mean_nll_per_token,
                            r.mean_reward,
                            r.corpus_cer - b.corpus_cer,
                            r.mean_nll_per_token - b.mean_nll_per_token,
                            r.mean_reward - b.mean_reward
                        )),
                        None => out.push_str(&format!(
                            "  {:<18} {:>11.6} {:>20.6} {:>13.6}   (no base row)\n",
                            r.run, r.corpus_cer, r.mean_nll_per_token, r.mean_reward
                        )),
                    }
                }
            }
        }
    }
    Ok((out, all_ok))
}
