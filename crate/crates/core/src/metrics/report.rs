//! Per-case, per-class CSV evaluation report.
//!
//! Columns are fixed: `case,class,dice,iou,sd,nvd,hd,error`. Undefined
//! values (NVD with empty ground truth, HD with an empty mask) are written as
//! `NA`. A final row with case `mean` and class `all` averages each column
//! over the rows where it is defined.

use std::io::Write;

use super::ClassMetrics;
use crate::error::Result;

pub const REPORT_COLUMNS: [&str; 8] = ["case", "class", "dice", "iou", "sd", "nvd", "hd", "error"];

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub case: String,
    pub class: u8,
    /// The metrics, or why they could not be computed.
    pub outcome: std::result::Result<ClassMetrics, String>,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NA".into(),
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for row in rows {
        let class = row.class.to_string();
        match &row.outcome {
            Ok(m) => w.write_record([
                row.case.as_str(),
                &class,
                &cell(Some(m.dice)),
                &cell(Some(m.iou)),
                &cell(Some(m.surface_dice)),
                &cell(m.nvd),
                &cell(m.hd),
                "",
            ])?,
            Err(e) => w.write_record([row.case.as_str(), &class, "NA", "NA", "NA", "NA", "NA", e.as_str()])?,
        }
    }
    let ok: Vec<&ClassMetrics> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    w.write_record([
        "mean",
        "all",
        &cell(mean(ok.iter().map(|m| Some(m.dice)))),
        &cell(mean(ok.iter().map(|m| Some(m.iou)))),
        &cell(mean(ok.iter().map(|m| Some(m.surface_dice)))),
        &cell(mean(ok.iter().map(|m| m.nvd))),
        &cell(mean(ok.iter().map(|m| m.hd))),
        "",
    ])?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
