//! CSV outputs: the training loss log and comparison reports.
//!
//! Floats use Rust's shortest round-trip formatting; an infinite PSNR is
//! written as `inf`.

use std::path::Path;

use dsmm_core::eval::{CellResult, ComparisonReport};
use dsmm_core::train::LossRecord;

use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;

pub const LOSS_HEADER: [&str; 4] = ["iteration", "epoch", "lr", "loss"];
pub const REPORT_HEADER: [&str; 6] = ["image", "matrix", "ratio", "reconstructor", "psnr_db", "ssim"];
pub const SUMMARY_HEADER: [&str; 8] = [
    "row",
    "matrix",
    "provenance",
    "ratio",
    "reconstructor",
    "psnr_db",
    "ssim",
    "images",
];

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer cannot fail")
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

pub fn loss_csv(history: &[LossRecord]) -> Vec<u8> {
    let mut w = writer();
    w.write_record(LOSS_HEADER).expect("in-memory");
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
        ])
        .expect("in-memory");
    }
    finish(w)
}

pub fn report_csv(rows: &[CellResult]) -> Vec<u8> {
    let mut w = writer();
    w.write_record(REPORT_HEADER).expect("in-memory");
    for c in rows {
        w.write_record([
            c.image.clone(),
            c.matrix.clone(),
            c.ratio.to_string(),
            c.reconstructor.label().to_string(),
            c.psnr_db.to_string(),
            c.ssim.to_string(),
        ])
        .expect("in-memory");
    }
    finish(w)
}

/// One `mean` row per (matrix, ratio, reconstructor), then one `gain` row
/// per non-Gaussian matrix: its mean minus the Gaussian mean.
pub fn summary_csv(report: &ComparisonReport) -> Vec<u8> {
    let mut w = writer();
    w.write_record(SUMMARY_HEADER).expect("in-memory");
    for s in &report.summary {
        w.write_record([
            "mean".to_string(),
            s.matrix.clone(),
            s.provenance.label().to_string(),
            s.ratio.to_string(),
            s.reconstructor.label().to_string(),
            s.mean_psnr_db.to_string(),
            s.mean_ssim.to_string(),
            s.images.to_string(),
        ])
        .expect("in-memory");
    }
    for g in &report.gains {
        w.write_record([
            "gain".to_string(),
            g.matrix.clone(),
            String::new(),
            g.ratio.to_string(),
            g.reconstructor.label().to_string(),
            g.psnr_db.to_string(),
            g.ssim.to_string(),
            String::new(),
        ])
        .expect("in-memory");
    }
    finish(w)
}

pub fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes)
}

/// Parse a loss CSV back into records (used by tooling and tests).
pub fn read_loss_csv(path: &Path) -> CliResult<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::input(path, e))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| CliError::input(path, e))?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = || CliError::format(path, "malformed loss record");
            Ok(LossRecord {
                iteration: field(0).parse().map_err(|_| bad())?,
                epoch: field(1).parse().map_err(|_| bad())?,
                lr: field(2).parse().map_err(|_| bad())?,
                loss: field(3).parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
