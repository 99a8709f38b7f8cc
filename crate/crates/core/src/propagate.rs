//! Single-FFT Fresnel propagation from the element plane to the sensor.
//!
//! The sensor field is the centered unitary DFT of `C(x, y)·exp(jπ(x² + y²)/(λs))`.
//! The quadratic prefactor outside the transform is dropped because only the
//! intensity is observed. With unitary scaling the PSF mass equals `Σ|C|²`.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::fieldcore::{GridSpec, ModulationProfile, OpticalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorGrid {
    pub n_u: usize,
    pub n_v: usize,
    pub pitch_m: f64,
}

impl SensorGrid {
    /// `(rows, cols)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.n_v, self.n_u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    sensor: SensorGrid,
    values: Array2<f64>,
}

impl Psf {
    pub fn new(sensor: SensorGrid, values: Array2<f64>) -> Result<Self> {
        crate::error::ensure_shape("psf", &[sensor.n_v, sensor.n_u], values.shape())?;
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(
                "psf values must be finite and non-negative".into(),
            ));
        }
        Ok(Psf { sensor, values })
    }

    pub fn zeros(sensor: SensorGrid) -> Self {
        Psf {
            sensor,
            values: Array2::zeros(sensor.shape()),
        }
    }

    pub fn sensor(&self) -> &SensorGrid {
        &self.sensor
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// Side length of the (square) transform used for a grid under `config`.
pub fn transform_size(config: &OpticalConfig, grid: &GridSpec) -> usize {
    config.pad_factor.max(1) * grid.n_x().max(grid.n_y())
}

/// Sensor sample pitch `λ s / (N Δx)`, `N` being the (padded) transform size.
pub fn sensor_pitch(config: &OpticalConfig, grid: &GridSpec) -> f64 {
    config.wavelength_m * config.sensor_distance_m / (transform_size(config, grid) as f64 * grid.pitch_m())
}

pub fn sensor_grid(config: &OpticalConfig, grid: &GridSpec) -> SensorGrid {
    let n = transform_size(config, grid);
    SensorGrid {
        n_u: n,
        n_v: n,
        pitch_m: sensor_pitch(config, grid),
    }
}

/// First index of a `window`-long span centered the same way as the grids.
pub(crate) fn window_start(n: usize, window: usize) -> usize {
    n / 2 - window / 2
}

/// Reusable propagation operator for one `(grid, config)` pair.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: GridSpec,
    sensor: SensorGrid,
    chirp: Array2<Complex64>,
    offset: (usize, usize),
    fft: Fft2,
}

impl Propagator {
    pub fn new(grid: GridSpec, config: &OpticalConfig) -> Result<Self> {
        config.validate()?;
        let sensor = sensor_grid(config, &grid);
        let k = PI / (config.wavelength_m * config.sensor_distance_m);
        let chirp = Array2::from_shape_fn(grid.shape(), |(row, col)| {
            let x = grid.x_m(col);
            let y = grid.y_m(row);
            Complex64::from_polar(1.0, k * (x * x + y * y))
        });
        let n = sensor.n_u;
        let offset = (n / 2 - grid.n_y() / 2, n / 2 - grid.n_x() / 2);
        Ok(Propagator {
            grid,
            sensor,
            chirp,
            offset,
            fft: Fft2::new(n, n),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn sensor(&self) -> &SensorGrid {
        &self.sensor
    }

    /// Complex sensor-plane field for an element-plane field `c`.
    pub fn field(&self, c: &Array2<Complex64>) -> Array2<Complex64> {
        let (rows, cols) = self.grid.shape();
        let mut padded = Array2::<Complex64>::zeros(self.sensor.shape());
        let (r0, c0) = self.offset;
        let mut window = padded.slice_mut(s![r0..r0 + rows, c0..c0 + cols]);
        ndarray::Zip::from(&mut window)
            .and(c)
            .and(&self.chirp)
            .for_each(|dst, &v, &q| *dst = v * q);
        self.fft.forward(&padded)
    }

    /// Adjoint of [`field`](Self::field): maps a sensor-plane field back to
    /// the element plane.
    pub fn field_adjoint(&self, sensor_field: &Array2<Complex64>) -> Array2<Complex64> {
        let (rows, cols) = self.grid.shape();
        let back = self.fft.inverse(sensor_field);
        let (r0, c0) = self.offset;
        let mut out = back.slice(s![r0..r0 + rows, c0..c0 + cols]).to_owned();
        ndarray::Zip::from(&mut out)
            .and(&self.chirp)
            .for_each(|v, &q| *v *= q.conj());
        out
    }

    pub fn intensity(&self, c: &Array2<Complex64>) -> Array2<f64> {
        self.field(c).mapv(|f| f.norm_sqr())
    }

    pub fn psf(&self, modulation: &ModulationProfile) -> Result<Psf> {
        if modulation.grid() != &self.grid {
            return Err(Error::Shape {
                what: "modulation grid vs propagator grid",
                expected: vec![self.grid.n_y(), self.grid.n_x()],
                actual: vec![modulation.grid().n_y(), modulation.grid().n_x()],
            });
        }
        if modulation
            .values()
            .iter()
            .any(|c| !(c.re.is_finite() && c.im.is_finite()))
        {
            return Err(Error::Validation("modulation contains non-finite entries".into()));
        }
        Ok(Psf {
            sensor: self.sensor,
            values: self.intensity(modulation.values()),
        })
    }
}

pub fn fresnel_psf(modulation: &ModulationProfile, config: &OpticalConfig) -> Result<Psf> {
    Propagator::new(*modulation.grid(), config)?.psf(modulation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CroppedPsf {
    pub psf: Psf,
    /// Fraction of the original mass that fell outside the window.
    pub discarded_fraction: f64,
}

/// Central `rows × cols` window of a PSF.
pub fn crop_psf(psf: &Psf, rows: usize, cols: usize) -> Result<CroppedPsf> {
    let (n_rows, n_cols) = psf.values.dim();
    if rows == 0 || cols == 0 || rows > n_rows || cols > n_cols {
        return Err(Error::Bounds(format!(
            "crop window {rows}x{cols} does not fit PSF {n_rows}x{n_cols}"
        )));
    }
    let (r0, c0) = (window_start(n_rows, rows), window_start(n_cols, cols));
    let values = psf.values.slice(s![r0..r0 + rows, c0..c0 + cols]).to_owned();
    let total = psf.total();
    let kept = values.sum();
    let discarded_fraction = if total > 0.0 {
        ((total - kept) / total).max(0.0)
    } else {
        0.0
    };
    Ok(CroppedPsf {
        psf: Psf {
            sensor: SensorGrid {
                n_u: cols,
                n_v: rows,
                pitch_m: psf.sensor.pitch_m,
            },
            values,
        },
        discarded_fraction,
    })
}
