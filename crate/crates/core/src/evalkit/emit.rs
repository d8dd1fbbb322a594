//! Report files: `report.json`, per-class ROC and confusion CSVs, and the
//! flat comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::EvalReport;
use crate::error::{Error, Result};

pub const TABLE1_HEADER: &str =
    "model,accuracy,loss,macro_f1,f1_std,recall_min,recall_std,overfit_acc,overfit_f1,overfit_loss";
pub const TABLE2_HEADER: &str = "model,f1_mean,f1_std,recall_mean,recall_std";
const SCATTER_HEADER: &str = "model,pair,x,y";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Table-1, Table-2 and scatter-pair CSV text for a set of reports, one row
/// per report (one row per report and pair for the scatter table).
pub fn comparison_tables(reports: &[EvalReport]) -> (String, String, String) {
    let mut t1 = format!("{TABLE1_HEADER}\n");
    let mut t2 = format!("{TABLE2_HEADER}\n");
    let mut sc = format!("{SCATTER_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            t1,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.accuracy,
            r.loss,
            r.macro_f1,
            r.f1_std,
            r.recall_min,
            r.recall_std,
            opt(r.overfit_acc),
            opt(r.overfit_f1),
            opt(r.overfit_loss)
        );
        let _ = writeln!(
            t2,
            "{},{},{},{},{}",
            r.model, r.f1_mean, r.f1_std, r.recall_mean, r.recall_std
        );
        let pairs = [
            ("accuracy~loss", Some(r.accuracy), Some(r.loss)),
            ("macro_f1~recall_min", Some(r.macro_f1), Some(r.recall_min)),
            ("recall_std~overfit_loss", Some(r.recall_std), r.overfit_loss),
            ("f1_mean~recall_mean", Some(r.f1_mean), Some(r.recall_mean)),
            ("f1_std~recall_std", Some(r.f1_std), Some(r.recall_std)),
        ];
        for (name, x, y) in pairs {
            if let (Some(x), Some(y)) = (x, y) {
                let _ = writeln!(sc, "{},{name},{x},{y}", r.model);
            }
        }
    }
    (t1, t2, sc)
}

fn write(dir: &Path, name: &str, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text)?;
    out.push(path);
    Ok(())
}

/// Writes all report artifacts into `dir` (created if needed) and returns
/// the written paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format("report", e.to_string()))?;
    write(dir, "report.json", &json, &mut out)?;

    let names = report.class_names();
    let mut cm = format!("true\\pred,{}\n", names.join(","));
    for (name, row) in names.iter().zip(&report.confusion) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(cm, "{name},{}", cells.join(","));
    }
    write(dir, "confusion.csv", &cm, &mut out)?;

    for roc in &report.roc {
        let Some(curve) = &roc.curve else { continue };
        let mut text = String::from("threshold,fpr,tpr\n");
        for ((t, f), p) in curve.thresholds.iter().zip(&curve.fpr).zip(&curve.tpr) {
            let t = t.map_or_else(|| "inf".to_owned(), |v| v.to_string());
            let _ = writeln!(text, "{t},{f},{p}");
        }
        write(dir, &format!("roc_{}.csv", roc.class), &text, &mut out)?;
    }

    let (t1, t2, sc) = comparison_tables(std::slice::from_ref(report));
    write(dir, "table1.csv", &t1, &mut out)?;
    write(dir, "table2.csv", &t2, &mut out)?;
    write(dir, "scatter_pairs.csv", &sc, &mut out)?;
    Ok(out)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format("report", e.to_string()))
}
