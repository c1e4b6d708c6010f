//! Metrics files and the learning-vs-forgetting tradeoff table.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";

/// One JSON object per line, in order.
pub fn metrics_jsonl(reports: &[EvalReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
        .collect()
}

pub fn append_metrics(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(report).expect("reports serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Hyperparameters identifying a run inside a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub method: String,
    pub lr: f64,
    pub p: f64,
    pub alpha: f64,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub method: String,
    pub lr: f64,
    pub p: f64,
    pub alpha: f64,
    pub nll_old: f64,
    pub nll_new: f64,
}

/// Final evaluation of each run directory (holding `run.json` and
/// `metrics.jsonl`), sorted by method, then lr, p and alpha.
pub fn tradeoff_table(run_dirs: &[PathBuf]) -> Result<Vec<TradeoffRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Contract("tradeoff table needs at least one run".into()));
    }
    let mut rows = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let info_path = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: RunInfo = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: info_path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        let metrics_path = dir.join(METRICS_FILE);
        let reports = read_metrics(&metrics_path)?;
        let last = reports.last().ok_or_else(|| Error::Parse {
            path: metrics_path.clone(),
            line: 0,
            reason: "no evaluation records".into(),
        })?;
        rows.push(TradeoffRow {
            method: info.method,
            lr: info.lr,
            p: info.p,
            alpha: info.alpha,
            nll_old: last.nll_old,
            nll_new: last.nll_new,
        });
    }
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.lr.total_cmp(&b.lr))
            .then(a.p.total_cmp(&b.p))
            .then(a.alpha.total_cmp(&b.alpha))
    });
    Ok(rows)
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from("method,lr,p,alpha,nll_old,nll_new\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.lr, r.p, r.alpha, r.nll_old, r.nll_new
        ));
    }
    out
}

pub fn tradeoff_text(rows: &[TradeoffRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>5}  {:>6}  {:>8}  {:>8}\n",
        "method", "lr", "p", "alpha", "nll_old", "nll_new"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>9.2e}  {:>5.2}  {:>6.3}  {:>8.4}  {:>8.4}\n",
            r.method, r.lr, r.p, r.alpha, r.nll_old, r.nll_new
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(step: usize, nll_old: f64, nll_new: f64) -> EvalReport {
        EvalReport {
            step,
            lr: 1e-4,
            nll_old,
            nll_new,
            ppl_old: nll_old.exp(),
            ppl_new: nll_new.exp(),
            lm_loss: 1.0,
            local_l1: 0.0,
            local_ce: 0.0,
        }
    }

    fn write_run(dir: &Path, method: &str, lr: f64, reports: &[EvalReport]) {
        std::fs::create_dir_all(dir).unwrap();
        let info = RunInfo {
            method: method.into(),
            lr,
            p: 0.1,
            alpha: 0.0,
            budget: 0.2,
        };
        std::fs::write(dir.join(RUN_FILE), serde_json::to_string(&info).unwrap()).unwrap();
        std::fs::write(dir.join(METRICS_FILE), metrics_jsonl(reports)).unwrap();
    }

    #[test]
    fn one_run_echoes_final_report() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("a");
        write_run(&dir, "lora", 5e-5, &[report(10, 2.0, 3.0), report(20, 1.5, 2.5)]);
        let rows = tradeoff_table(&[dir]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].nll_old, rows[0].nll_new), (1.5, 2.5));
    }

    #[test]
    fn rows_sorted_by_method_then_lr() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dirs = Vec::new();
        for (i, (m, lr)) in [("lora", 1e-3), ("finetune", 1e-4), ("lora", 1e-4), ("finetune", 1e-5)]
            .iter()
            .enumerate()
        {
            let d = tmp.path().join(i.to_string());
            write_run(&d, m, *lr, &[report(1, 1.0, 1.0)]);
            dirs.push(d);
        }
        let rows = tradeoff_table(&dirs).unwrap();
        let keys: Vec<(&str, f64)> = rows.iter().map(|r| (r.method.as_str(), r.lr)).collect();
        assert_eq!(
            keys,
            vec![("finetune", 1e-5), ("finetune", 1e-4), ("lora", 1e-4), ("lora", 1e-3)]
        );
        assert_eq!(tradeoff_csv(&rows).lines().count(), 5);
    }

    #[test]
    fn malformed_metrics_names_file_and_line() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("bad");
        write_run(&dir, "lora", 1e-4, &[report(1, 1.0, 1.0)]);
        let mut text = std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
        text.push_str("{\"step\": oops}\n");
        std::fs::write(dir.join(METRICS_FILE), text).unwrap();
        let err = tradeoff_table(&[dir]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("metrics.jsonl:2"), "{msg}");
    }
}
