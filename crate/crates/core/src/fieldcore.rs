//! Sampling grids and the per-element modulation model `C = T·exp(jφ)`.
//!
//! Every matrix in this crate is stored row-major with shape `(n_y, n_x)`.
//! Sample `(n_y / 2, n_x / 2)` (integer division) sits on the optical axis, so
//! odd-sized grids are exactly symmetric about their center.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    n_x: usize,
    n_y: usize,
    pitch_m: f64,
}

impl GridSpec {
    pub fn new(n_x: usize, n_y: usize, pitch_m: f64) -> Result<Self> {
        if n_x < 2 || n_y < 2 {
            return Err(Error::Validation(format!(
                "grid must be at least 2x2 samples, got {n_x}x{n_y}"
            )));
        }
        if !(pitch_m.is_finite() && pitch_m > 0.0) {
            return Err(Error::Validation(format!(
                "grid pitch must be positive and finite, got {pitch_m}"
            )));
        }
        Ok(GridSpec { n_x, n_y, pitch_m })
    }

    pub fn square(n: usize, pitch_m: f64) -> Result<Self> {
        Self::new(n, n, pitch_m)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn pitch_m(&self) -> f64 {
        self.pitch_m
    }

    /// `(rows, cols)` as used by `ndarray`.
    pub fn shape(&self) -> (usize, usize) {
        (self.n_y, self.n_x)
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent_x_m(&self) -> f64 {
        self.n_x as f64 * self.pitch_m
    }

    pub fn extent_y_m(&self) -> f64 {
        self.n_y as f64 * self.pitch_m
    }

    pub fn min_extent_m(&self) -> f64 {
        self.extent_x_m().min(self.extent_y_m())
    }

    /// Physical x coordinate of column `col`.
    pub fn x_m(&self, col: usize) -> f64 {
        (col as f64 - (self.n_x / 2) as f64) * self.pitch_m
    }

    /// Physical y coordinate of row `row`.
    pub fn y_m(&self, row: usize) -> f64 {
        (row as f64 - (self.n_y / 2) as f64) * self.pitch_m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseProfile {
    grid: GridSpec,
    values: Array2<f64>,
}

impl PhaseProfile {
    pub fn new(grid: GridSpec, values: Array2<f64>) -> Result<Self> {
        ensure_shape("phase profile", &[grid.n_y, grid.n_x], values.shape())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "phase profile contains non-finite values".into(),
            ));
        }
        Ok(PhaseProfile { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        PhaseProfile {
            grid,
            values: Array2::zeros(grid.shape()),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApertureMask {
    grid: GridSpec,
    transmittance: Array2<f64>,
}

impl ApertureMask {
    pub fn new(grid: GridSpec, transmittance: Array2<f64>) -> Result<Self> {
        ensure_shape("aperture", &[grid.n_y, grid.n_x], transmittance.shape())?;
        if transmittance.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Validation(
                "aperture transmittance must lie in [0, 1]".into(),
            ));
        }
        Ok(ApertureMask { grid, transmittance })
    }

    /// Fully open aperture (T ≡ 1).
    pub fn open(grid: GridSpec) -> Self {
        ApertureMask {
            grid,
            transmittance: Array2::ones(grid.shape()),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn transmittance(&self) -> &Array2<f64> {
        &self.transmittance
    }

    /// Σ T², the power a unit plane wave deposits through this aperture.
    pub fn transmitted_power(&self) -> f64 {
        self.transmittance.iter().map(|t| t * t).sum()
    }

    pub fn open_fraction(&self) -> f64 {
        self.transmittance.iter().filter(|&&t| t > 0.0).count() as f64 / self.grid.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationProfile {
    grid: GridSpec,
    values: Array2<Complex64>,
}

impl ModulationProfile {
    /// Builds a modulation from raw complex samples. Magnitudes above 1 are
    /// rejected since a passive element cannot amplify.
    pub fn from_values(grid: GridSpec, values: Array2<Complex64>) -> Result<Self> {
        ensure_shape("modulation", &[grid.n_y, grid.n_x], values.shape())?;
        if values.iter().any(|c| c.norm() > 1.0 + 1e-12) {
            return Err(Error::Validation("modulation magnitude exceeds 1".into()));
        }
        Ok(ModulationProfile { grid, values })
    }

    /// Unchecked constructor for internal callers that may hold non-finite
    /// samples; propagation validates those itself.
    #[cfg(test)]
    pub(crate) fn from_raw(grid: GridSpec, values: Array2<Complex64>) -> Self {
        ModulationProfile { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn power(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    pub wavelength_m: f64,
    pub sensor_distance_m: f64,
    /// Zero-padding factor applied before the Fresnel transform (1 = none).
    #[serde(default = "default_pad_factor")]
    pub pad_factor: usize,
}

fn default_pad_factor() -> usize {
    1
}

impl Default for OpticalConfig {
    fn default() -> Self {
        OpticalConfig {
            wavelength_m: 532e-9,
            sensor_distance_m: 10e-3,
            pad_factor: 1,
        }
    }
}

impl OpticalConfig {
    pub fn new(wavelength_m: f64, sensor_distance_m: f64) -> Result<Self> {
        let cfg = OpticalConfig {
            wavelength_m,
            sensor_distance_m,
            pad_factor: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_pad_factor(mut self, pad_factor: usize) -> Self {
        self.pad_factor = pad_factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_m.is_finite() && self.wavelength_m > 0.0) {
            return Err(Error::Validation(format!(
                "wavelength must be positive, got {}",
                self.wavelength_m
            )));
        }
        if !(self.sensor_distance_m.is_finite() && self.sensor_distance_m > 0.0) {
            return Err(Error::Validation(format!(
                "sensor distance must be positive, got {}",
                self.sensor_distance_m
            )));
        }
        if self.pad_factor == 0 {
            return Err(Error::Validation("pad factor must be at least 1".into()));
        }
        Ok(())
    }

    /// True when the element extent is not small against the sensor distance.
    /// The paraxial model is still evaluated; callers only get a warning.
    pub fn paraxial_warning(&self, grid: &GridSpec) -> bool {
        let half_diag = 0.5 * grid.extent_x_m().hypot(grid.extent_y_m());
        let suspicious = half_diag > 0.25 * self.sensor_distance_m;
        if suspicious {
            log::warn!(
                "element half-diagonal {:.3e} m is not << sensor distance {:.3e} m; paraxial model may be inaccurate",
                half_diag,
                self.sensor_distance_m
            );
        }
        suspicious
    }
}

/// Circular aperture of the given diameter centered on the optical axis.
/// Samples strictly inside the circle are open (T = 1), the rest opaque.
pub fn make_circular_aperture(grid: GridSpec, diameter_m: f64) -> Result<ApertureMask> {
    if !(diameter_m.is_finite() && diameter_m >= 0.0) {
        return Err(Error::Validation(format!(
            "aperture diameter must be non-negative, got {diameter_m}"
        )));
    }
    if diameter_m > grid.min_extent_m() * (1.0 + 1e-12) {
        return Err(Error::Bounds(format!(
            "aperture diameter {diameter_m:.4e} m exceeds grid extent {:.4e} m",
            grid.min_extent_m()
        )));
    }
    let radius = 0.5 * diameter_m;
    let transmittance = Array2::from_shape_fn(grid.shape(), |(row, col)| {
        if grid.x_m(col).hypot(grid.y_m(row)) < radius {
            1.0
        } else {
            0.0
        }
    });
    Ok(ApertureMask { grid, transmittance })
}

/// Aperture with the default diameter: the full (smaller) grid extent.
pub fn default_aperture(grid: GridSpec) -> ApertureMask {
    make_circular_aperture(grid, grid.min_extent_m()).expect("full-extent aperture always fits")
}

pub fn make_modulation(phase: &PhaseProfile, aperture: &ApertureMask) -> Result<ModulationProfile> {
    if phase.grid != aperture.grid {
        return Err(Error::Shape {
            what: "phase vs aperture grid",
            expected: vec![aperture.grid.n_y, aperture.grid.n_x],
            actual: vec![phase.grid.n_y, phase.grid.n_x],
        });
    }
    let mut values = Array2::<Complex64>::zeros(phase.grid.shape());
    ndarray::Zip::from(&mut values)
        .and(&phase.values)
        .and(&aperture.transmittance)
        .for_each(|c, &phi, &t| {
            *c = if t == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(t, phi)
            };
        });
    Ok(ModulationProfile {
        grid: phase.grid,
        values,
    })
}

/// Thin-lens phase `φ = −π(x² + y²)/(λ f)`, zero on the optical axis.
pub fn make_lens_phase(grid: GridSpec, config: &OpticalConfig, focal_m: f64) -> Result<PhaseProfile> {
    if !(focal_m.is_finite() && focal_m > 0.0) {
        return Err(Error::Validation(format!(
            "focal length must be positive, got {focal_m}"
        )));
    }
    config.validate()?;
    let scale = -PI / (config.wavelength_m * focal_m);
    let values = Array2::from_shape_fn(grid.shape(), |(row, col)| {
        let x = grid.x_m(col);
        let y = grid.y_m(row);
        scale * (x * x + y * y)
    });
    Ok(PhaseProfile { grid, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn grid(n: usize) -> GridSpec {
        GridSpec::square(n, 2.5e-6).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_sizes() {
        assert!(GridSpec::new(1, 4, 1e-6).is_err());
        assert!(GridSpec::new(4, 4, 0.0).is_err());
        assert!(GridSpec::new(4, 4, f64::NAN).is_err());
    }

    #[test]
    fn zero_diameter_is_fully_opaque() {
        let mask = make_circular_aperture(grid(17), 0.0).unwrap();
        assert!(mask.transmittance().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn oversized_aperture_is_a_bounds_error() {
        let g = grid(16);
        let err = make_circular_aperture(g, g.min_extent_m() * 1.01).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)));
    }

    #[test]
    fn full_extent_aperture_opens_about_pi_over_4() {
        for n in [33usize, 64, 65, 128] {
            let g = grid(n);
            let mask = make_circular_aperture(g, g.extent_x_m()).unwrap();
            // Brute-force count of sample centers strictly inside the circle.
            let c = (n / 2) as f64;
            let r = n as f64 / 2.0;
            let mut inside = 0usize;
            for i in 0..n {
                for j in 0..n {
                    let (dy, dx) = (i as f64 - c, j as f64 - c);
                    if (dx * dx + dy * dy).sqrt() < r {
                        inside += 1;
                    }
                }
            }
            let open = mask.transmittance().iter().filter(|&&t| t == 1.0).count();
            assert_eq!(open, inside);
            // One pixel ring around the circle bounds the discretization error.
            let ring = std::f64::consts::PI * n as f64;
            let ideal = std::f64::consts::FRAC_PI_4 * (n * n) as f64;
            assert!((open as f64 - ideal).abs() <= ring, "n={n} open={open}");
        }
    }

    #[test]
    fn odd_aperture_is_symmetric() {
        let g = grid(33);
        let mask = make_circular_aperture(g, 0.8 * g.extent_x_m()).unwrap();
        let t = mask.transmittance();
        assert_eq!(t, &t.t().to_owned());
        let rotated = Array2::from_shape_fn(t.dim(), |(i, j)| t[[32 - i, 32 - j]]);
        assert_eq!(t, &rotated);
        let quarter = Array2::from_shape_fn(t.dim(), |(i, j)| t[[j, 32 - i]]);
        assert_eq!(t, &quarter);
    }

    #[test]
    fn zero_phase_modulation_is_transmittance() {
        let g = grid(9);
        let mask = make_circular_aperture(g, g.extent_x_m()).unwrap();
        let m = make_modulation(&PhaseProfile::zeros(g), &mask).unwrap();
        for (c, t) in m.values().iter().zip(mask.transmittance()) {
            assert_eq!(c.re, *t);
            assert_eq!(c.im, 0.0);
        }
    }

    #[test]
    fn modulation_is_2pi_periodic() {
        let g = grid(8);
        let mask = ApertureMask::open(g);
        let phi = Array2::from_shape_fn(g.shape(), |(i, j)| (i * 8 + j) as f64 * 0.37 - 3.0);
        let shifted = phi.mapv(|p| p + 2.0 * std::f64::consts::PI);
        let a = make_modulation(&PhaseProfile::new(g, phi).unwrap(), &mask).unwrap();
        let b = make_modulation(&PhaseProfile::new(g, shifted).unwrap(), &mask).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn quarter_wave_pixel_is_j() {
        let g = grid(2);
        let mut phi = Array2::zeros(g.shape());
        phi[[0, 0]] = FRAC_PI_2;
        let m = make_modulation(&PhaseProfile::new(g, phi).unwrap(), &ApertureMask::open(g)).unwrap();
        assert!((m.values()[[0, 0]] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn modulation_magnitude_equals_transmittance() {
        let g = grid(6);
        let t = Array2::from_shape_fn(g.shape(), |(i, j)| ((i + j) % 5) as f64 / 4.0);
        let mask = ApertureMask::new(g, t).unwrap();
        let phi = Array2::from_shape_fn(g.shape(), |(i, j)| (i as f64) - 1.3 * j as f64);
        let m = make_modulation(&PhaseProfile::new(g, phi).unwrap(), &mask).unwrap();
        for (c, t) in m.values().iter().zip(mask.transmittance()) {
            assert!((c.norm() - t).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_mismatch_is_a_shape_error() {
        let mask = ApertureMask::open(grid(4));
        let err = make_modulation(&PhaseProfile::zeros(grid(5)), &mask).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn lens_phase_closed_form() {
        let g = grid(11);
        let cfg = OpticalConfig::default();
        let f = 0.01;
        let lens = make_lens_phase(g, &cfg, f).unwrap();
        assert_eq!(lens.values()[[5, 5]], 0.0);
        let expected = -std::f64::consts::PI * g.pitch_m().powi(2) / (cfg.wavelength_m * f);
        assert!((lens.values()[[5, 6]] - expected).abs() <= 1e-15 * expected.abs());
        for i in 0..11 {
            for j in 0..11 {
                assert_eq!(lens.values()[[i, j]], lens.values()[[10 - i, 10 - j]]);
            }
        }
        assert!(make_lens_phase(g, &cfg, 0.0).is_err());
    }

    #[test]
    fn constructors_are_pure() {
        let g = grid(21);
        let cfg = OpticalConfig::default();
        assert_eq!(
            make_lens_phase(g, &cfg, 0.02).unwrap(),
            make_lens_phase(g, &cfg, 0.02).unwrap()
        );
        assert_eq!(
            make_circular_aperture(g, 3e-5).unwrap(),
            make_circular_aperture(g, 3e-5).unwrap()
        );
    }

    #[test]
    fn paraxial_flag() {
        let g = grid(1025);
        assert!(!OpticalConfig::default().paraxial_warning(&g));
        let close = OpticalConfig::new(532e-9, 1e-4).unwrap();
        assert!(close.paraxial_warning(&g));
    }
}
