//! JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::CaptureConfig;
use crate::dko::DkoConfig;
use crate::error::{Error, Result};
use crate::fieldcore::{make_circular_aperture, ApertureMask, GridSpec, OpticalConfig};

/// Every key is optional. Physical quantities are SI with a unit suffix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub wavelength_m: f64,
    pub sensor_distance_m: f64,
    /// Phase samples per side (square grid).
    pub grid_n: usize,
    pub pitch_m: f64,
    /// `None` means the full grid extent.
    pub aperture_diameter_m: Option<f64>,
    pub pad_factor: usize,
    pub dko: DkoConfig,
    pub capture: CaptureConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optical = OpticalConfig::default();
        RunConfig {
            wavelength_m: optical.wavelength_m,
            sensor_distance_m: optical.sensor_distance_m,
            grid_n: 128,
            pitch_m: 2.5e-6,
            aperture_diameter_m: None,
            pad_factor: optical.pad_factor,
            dko: DkoConfig::default(),
            capture: CaptureConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn optical(&self) -> Result<OpticalConfig> {
        let cfg = OpticalConfig {
            wavelength_m: self.wavelength_m,
            sensor_distance_m: self.sensor_distance_m,
            pad_factor: self.pad_factor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::square(self.grid_n, self.pitch_m)
    }

    pub fn aperture(&self) -> Result<ApertureMask> {
        let grid = self.grid()?;
        make_circular_aperture(grid, self.aperture_diameter_m.unwrap_or(grid.min_extent_m()))
    }

    pub fn validate(&self) -> Result<()> {
        self.optical()?;
        self.aperture()?;
        self.dko.validate()?;
        self.capture.validate()
    }
}

fn json_path(path: &serde_path_to_error::Path) -> String {
    let inner = path.to_string();
    if inner == "." {
        "$".into()
    } else if inner.starts_with('[') {
        format!("${inner}")
    } else {
        format!("$.{inner}")
    }
}

/// Parses and validates; errors carry the JSON path of the offending key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: json_path(e.path()),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
