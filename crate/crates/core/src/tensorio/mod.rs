//! File formats: NPY tensors, PNM/PFM images, JSON configs and reports, CSV.
//!
//! Every writer goes through [`write_atomic`], so readers never observe a
//! half-written file.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

mod config;
mod image;
mod npy;
mod report;

pub use config::{load_config, parse_config, RunConfig};
pub use image::{
    load_image, read_pfm, read_pnm, save_pfm, save_pgm, save_pgm_preview, save_ppm, DEGAMMA_EXPONENT,
};
pub use npy::{
    decode_npy, encode_npy, load_array, load_array2, load_tensor, parse_header, save_array, save_tensor,
    NpyDtype, TensorHeader,
};
pub use report::{write_csv, write_loss_curves, write_report, Report, FORMAT_VERSION};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
