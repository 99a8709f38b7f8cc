//! Target kernels: signed split into non-negative halves, metasurface array
//! planning, and placement of small kernels on the simulated sensor grid.
//!
//! Kernels are held in true-convolution orientation. CNN frameworks store
//! first-layer weights for cross-correlation, so [`import_first_layer`] rotates
//! every kernel by 180° on the way in and [`export_first_layer`] undoes it.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, ArrayViewD, Ix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagate::{window_start, SensorGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Mono,
    R,
    G,
    B,
}

impl Color {
    pub const RGB: [Color; 3] = [Color::R, Color::G, Color::B];

    /// Index of the scene channel this color reads from.
    pub fn scene_channel(self) -> usize {
        match self {
            Color::Mono | Color::R => 0,
            Color::G => 1,
            Color::B => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorMode {
    #[serde(rename = "mono-signed")]
    MonoSigned,
    #[serde(rename = "rgb-signed")]
    RgbSigned,
}

impl ColorMode {
    pub fn colors(self) -> &'static [Color] {
        match self {
            ColorMode::MonoSigned => &[Color::Mono],
            ColorMode::RgbSigned => &Color::RGB,
        }
    }

    pub fn input_channels(self) -> usize {
        self.colors().len()
    }

    pub fn for_input_channels(c: usize) -> Result<Self> {
        match c {
            1 => Ok(ColorMode::MonoSigned),
            3 => Ok(ColorMode::RgbSigned),
            _ => Err(Error::Unsupported(format!(
                "first layers with {c} input channels (expected 1 or 3)"
            ))),
        }
    }
}

impl fmt::Display for ColorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorMode::MonoSigned => "mono-signed",
            ColorMode::RgbSigned => "rgb-signed",
        })
    }
}

impl FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mono-signed" => Ok(ColorMode::MonoSigned),
            "rgb-signed" => Ok(ColorMode::RgbSigned),
            other => Err(Error::Validation(format!(
                "unknown color mode {other:?} (expected mono-signed or rgb-signed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignedKernel {
    taps: Array2<f64>,
    channel: Color,
    tap_pitch_m: f64,
}

impl SignedKernel {
    pub fn new(taps: Array2<f64>, channel: Color, tap_pitch_m: f64) -> Result<Self> {
        let (rows, cols) = taps.dim();
        if rows != cols {
            return Err(Error::Unsupported(format!("non-square kernel {rows}x{cols}")));
        }
        if rows % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "even kernel size {rows}; pad to an odd size before import"
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Validation("kernel taps must be finite".into()));
        }
        if !(tap_pitch_m.is_finite() && tap_pitch_m > 0.0) {
            return Err(Error::Validation(format!(
                "tap pitch must be positive, got {tap_pitch_m}"
            )));
        }
        Ok(SignedKernel {
            taps,
            channel,
            tap_pitch_m,
        })
    }

    pub fn taps(&self) -> &Array2<f64> {
        &self.taps
    }

    pub fn size(&self) -> usize {
        self.taps.nrows()
    }

    pub fn channel(&self) -> Color {
        self.channel
    }

    pub fn tap_pitch_m(&self) -> f64 {
        self.tap_pitch_m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelHalfPair {
    pub plus: Array2<f64>,
    pub minus: Array2<f64>,
}

impl KernelHalfPair {
    pub fn reconstruct(&self) -> Array2<f64> {
        &self.plus - &self.minus
    }
}

/// `h± = (±h + |±h|) / 2`.
pub fn split_signed(kernel: &SignedKernel) -> KernelHalfPair {
    split_taps(&kernel.taps)
}

pub fn split_taps(taps: &Array2<f64>) -> KernelHalfPair {
    KernelHalfPair {
        plus: taps.mapv(|h| if h > 0.0 { h } else { 0.0 }),
        minus: taps.mapv(|h| if h < 0.0 { -h } else { 0.0 }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanElement {
    pub index: usize,
    pub output_channel: usize,
    pub color: Color,
    pub sign: Sign,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayPlan {
    pub output_channels: usize,
    pub color_mode: ColorMode,
    pub elements: Vec<PlanElement>,
}

impl ArrayPlan {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Number of ± pairs (one per output channel and color).
    pub fn pair_count(&self) -> usize {
        self.elements.len() / 2
    }

    /// Element indices `(plus, minus)` of pair `p`.
    pub fn pair_elements(&self, p: usize) -> (&PlanElement, &PlanElement) {
        (&self.elements[2 * p], &self.elements[2 * p + 1])
    }
}

/// Ordering: output channel, then color (R, G, B), then sign (+, −).
pub fn plan_array(output_channels: usize, color_mode: ColorMode) -> Result<ArrayPlan> {
    if output_channels == 0 {
        return Err(Error::Validation(
            "output channel count must be at least 1".into(),
        ));
    }
    let mut elements = Vec::with_capacity(output_channels * color_mode.colors().len() * 2);
    for output_channel in 0..output_channels {
        for &color in color_mode.colors() {
            for sign in [Sign::Plus, Sign::Minus] {
                elements.push(PlanElement {
                    index: elements.len(),
                    output_channel,
                    color,
                    sign,
                });
            }
        }
    }
    Ok(ArrayPlan {
        output_channels,
        color_mode,
        elements,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTarget {
    sensor: SensorGrid,
    values: Array2<f64>,
    footprint: usize,
    samples_per_tap: usize,
}

impl EmbeddedTarget {
    pub fn sensor(&self) -> &SensorGrid {
        &self.sensor
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Side length, in sensor samples, of the centered support window.
    pub fn footprint(&self) -> usize {
        self.footprint
    }

    pub fn samples_per_tap(&self) -> usize {
        self.samples_per_tap
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    pub fn is_dark(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Wraps an arbitrary non-negative full-grid pattern, e.g. a PSF rendered
    /// from a known phase.
    pub fn from_full_grid(sensor: SensorGrid, values: Array2<f64>, footprint: usize) -> Result<Self> {
        crate::error::ensure_shape("embedded target", &[sensor.n_v, sensor.n_u], values.shape())?;
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("target must be finite and non-negative".into()));
        }
        if footprint == 0 || footprint > sensor.n_u.min(sensor.n_v) {
            return Err(Error::Bounds(format!(
                "footprint {footprint} does not fit the sensor"
            )));
        }
        Ok(EmbeddedTarget {
            sensor,
            values,
            footprint,
            samples_per_tap: 1,
        })
    }
}

/// Expands each tap of a non-negative kernel into a `samples_per_tap²` block
/// (mass preserving) centered on the sensor grid, zero elsewhere.
pub fn embed_target(
    half: &Array2<f64>,
    sensor: SensorGrid,
    samples_per_tap: usize,
) -> Result<EmbeddedTarget> {
    if samples_per_tap == 0 {
        return Err(Error::Validation("samples_per_tap must be at least 1".into()));
    }
    if half.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Validation(
            "half-kernel must be finite and non-negative".into(),
        ));
    }
    let (k_rows, k_cols) = half.dim();
    let (foot_rows, foot_cols) = (k_rows * samples_per_tap, k_cols * samples_per_tap);
    let (rows, cols) = sensor.shape();
    if foot_rows > rows || foot_cols > cols {
        return Err(Error::Bounds(format!(
            "kernel footprint {foot_rows}x{foot_cols} exceeds sensor grid {rows}x{cols}"
        )));
    }
    let (r0, c0) = (window_start(rows, foot_rows), window_start(cols, foot_cols));
    let scale = 1.0 / (samples_per_tap * samples_per_tap) as f64;
    let mut values = Array2::zeros((rows, cols));
    for ((i, j), &tap) in half.indexed_iter() {
        if tap == 0.0 {
            continue;
        }
        let (bi, bj) = (r0 + i * samples_per_tap, c0 + j * samples_per_tap);
        values
            .slice_mut(s![bi..bi + samples_per_tap, bj..bj + samples_per_tap])
            .fill(tap * scale);
    }
    Ok(EmbeddedTarget {
        sensor,
        values,
        footprint: foot_rows.max(foot_cols),
        samples_per_tap,
    })
}

/// Inverse of the tap expansion: sums each `samples_per_tap²` block of the
/// centered `k·samples_per_tap` window back into one tap.
pub fn collapse_to_taps(full: &Array2<f64>, k: usize, samples_per_tap: usize) -> Result<Array2<f64>> {
    let (rows, cols) = full.dim();
    let foot = k * samples_per_tap;
    if samples_per_tap == 0 || foot > rows || foot > cols {
        return Err(Error::Bounds(format!(
            "tap window {foot} does not fit grid {rows}x{cols}"
        )));
    }
    let (r0, c0) = (window_start(rows, foot), window_start(cols, foot));
    Ok(Array2::from_shape_fn((k, k), |(i, j)| {
        let (bi, bj) = (r0 + i * samples_per_tap, c0 + j * samples_per_tap);
        full.slice(s![bi..bi + samples_per_tap, bj..bj + samples_per_tap])
            .sum()
    }))
}

fn rotate_180(taps: ndarray::ArrayView2<f64>) -> Array2<f64> {
    taps.slice(s![..;-1, ..;-1]).to_owned()
}

/// Reads an `L × C × k × k` cross-correlation weight tensor into
/// `L·C` true-convolution kernels, ordered like [`plan_array`].
pub fn import_first_layer(tensor: ArrayViewD<'_, f64>, tap_pitch_m: f64) -> Result<Vec<SignedKernel>> {
    let tensor = tensor
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::Unsupported("first-layer tensor must be 4-D [L, C, k, k]".into()))?;
    let (l, c, kh, kw) = tensor.dim();
    if l == 0 {
        return Err(Error::Validation(
            "first-layer tensor has no output channels".into(),
        ));
    }
    let mode = ColorMode::for_input_channels(c)?;
    if kh != kw {
        return Err(Error::Unsupported(format!("non-square kernels {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::Unsupported(format!(
            "even kernel size {kh}; pad to an odd size before import"
        )));
    }
    let mut out = Vec::with_capacity(l * c);
    for li in 0..l {
        for (ci, &color) in mode.colors().iter().enumerate() {
            let taps = rotate_180(tensor.slice(s![li, ci, .., ..]));
            out.push(SignedKernel::new(taps, color, tap_pitch_m)?);
        }
    }
    Ok(out)
}

/// Inverse of [`import_first_layer`].
pub fn export_first_layer(kernels: &[SignedKernel], output_channels: usize) -> Result<Array4<f64>> {
    if output_channels == 0 || kernels.is_empty() || !kernels.len().is_multiple_of(output_channels) {
        return Err(Error::Validation(format!(
            "{} kernels cannot be arranged into {output_channels} output channels",
            kernels.len()
        )));
    }
    let c = kernels.len() / output_channels;
    let k = kernels[0].size();
    let mut out = Array4::zeros((output_channels, c, k, k));
    for (idx, kernel) in kernels.iter().enumerate() {
        if kernel.size() != k {
            return Err(Error::Shape {
                what: "kernel size",
                expected: vec![k, k],
                actual: vec![kernel.size(), kernel.size()],
            });
        }
        out.slice_mut(s![idx / c, idx % c, .., ..])
            .assign(&rotate_180(kernel.taps.view()));
    }
    Ok(out)
}
