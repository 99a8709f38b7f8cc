//! JSON reports and CSV tables.

use std::path::Path;

use serde::Serialize;

use super::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Envelope shared by every report: the effective config travels with results.
#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub format_version: u32,
    pub command: &'a str,
    pub config: Option<&'a RunConfig>,
    pub result: &'a T,
}

pub fn write_report<T: Serialize>(
    path: impl AsRef<Path>,
    command: &str,
    config: Option<&RunConfig>,
    result: &T,
) -> Result<()> {
    let report = Report {
        format_version: FORMAT_VERSION,
        command,
        config,
        result,
    };
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Numeric(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    super::write_atomic(path.as_ref(), text.as_bytes())
}

pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::parse(path, format!("csv: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::parse(path, format!("csv: {e}")))?;
    super::write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct LossRow {
    element_index: usize,
    iteration: usize,
    loss: f64,
}

/// Long-format table: one `(element_index, iteration, loss)` row per sample.
pub fn write_loss_curves<'a>(
    path: impl AsRef<Path>,
    curves: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let rows = curves.into_iter().flat_map(|(element_index, curve)| {
        curve.iter().enumerate().map(move |(iteration, &loss)| LossRow {
            element_index,
            iteration,
            loss,
        })
    });
    write_csv(path, rows)
}
