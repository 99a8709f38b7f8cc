//! Simulated opto-electronic capture and the electronic reference layer.
//!
//! Every convolution here is a true convolution (kernel flipped), matching
//! the physics of a PSF blurring a scene. Comparisons use the "valid"
//! interior only, where the optical and electronic paths see the same pixels.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dko::DkoResult;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::kernels::{Color, PlanElement, SignedKernel};
use crate::propagate::{crop_psf, Psf};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    channels: Vec<Array2<f64>>,
}

impl SceneImage {
    pub fn new(channels: Vec<Array2<f64>>) -> Result<Self> {
        if channels.len() != 1 && channels.len() != 3 {
            return Err(Error::Validation(format!(
                "scene must have 1 or 3 channels, got {}",
                channels.len()
            )));
        }
        let dim = channels[0].dim();
        for c in &channels {
            if c.dim() != dim {
                return Err(Error::Shape {
                    what: "scene channel",
                    expected: vec![dim.0, dim.1],
                    actual: c.shape().to_vec(),
                });
            }
            if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Validation(
                    "scene intensities must be finite and non-negative".into(),
                ));
            }
        }
        Ok(SceneImage { channels })
    }

    pub fn mono(channel: Array2<f64>) -> Result<Self> {
        Self::new(vec![channel])
    }

    pub fn channels(&self) -> &[Array2<f64>] {
        &self.channels
    }

    pub fn height(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.channels[0].ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: Vec<Array2<f64>>,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.channels.first().map_or(0, |c| c.nrows())
    }

    pub fn width(&self) -> usize {
        self.channels.first().map_or(0, |c| c.ncols())
    }

    /// `‖self − reference‖ / ‖reference‖` over all channels.
    pub fn relative_l2(&self, reference: &FeatureMap) -> Result<f64> {
        if self.channels.len() != reference.channels.len() {
            return Err(Error::Shape {
                what: "feature channel count",
                expected: vec![reference.channels.len()],
                actual: vec![self.channels.len()],
            });
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (a, b) in self.channels.iter().zip(&reference.channels) {
            crate::error::ensure_shape("feature channel", b.shape(), a.shape())?;
            num += (a - b).iter().map(|d| d * d).sum::<f64>();
            den += b.iter().map(|v| v * v).sum::<f64>();
        }
        if den == 0.0 {
            return Err(Error::Numeric("reference feature map is identically zero".into()));
        }
        Ok((num / den).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Noise {
    #[default]
    None,
    /// Additive read noise with standard deviation `sigma` (measurement units).
    Gaussian { sigma: f64 },
    /// Shot noise: a measurement `v` becomes `Poisson(v·scale)/scale`.
    Poisson { scale: f64 },
}

impl FromStr for Noise {
    type Err = Error;

    /// `none`, `gaussian:<sigma>` or `poisson:<scale>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let value = || {
            arg.parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad noise parameter in {s:?}")))
        };
        let noise = match kind {
            "none" => Noise::None,
            "gaussian" => Noise::Gaussian { sigma: value()? },
            "poisson" => Noise::Poisson { scale: value()? },
            _ => {
                return Err(Error::Validation(format!(
                    "unknown noise model {s:?} (expected none, gaussian:<sigma>, poisson:<scale>)"
                )))
            }
        };
        noise.validate()?;
        Ok(noise)
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Noise::None => write!(f, "none"),
            Noise::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            Noise::Poisson { scale } => write!(f, "poisson:{scale}"),
        }
    }
}

impl Noise {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Noise::Gaussian { sigma } if !(sigma.is_finite() && sigma >= 0.0) => Err(Error::Validation(
                format!("gaussian sigma must be >= 0, got {sigma}"),
            )),
            Noise::Poisson { scale } if !(scale.is_finite() && scale > 0.0) => Err(Error::Validation(
                format!("poisson scale must be > 0, got {scale}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureConfig {
    pub samples_per_tap: usize,
    pub stride: usize,
    pub noise: Noise,
    pub quantization_bits: Option<u32>,
    pub seed: u64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            samples_per_tap: 1,
            stride: 1,
            noise: Noise::None,
            quantization_bits: None,
            seed: 0,
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_tap == 0 || self.stride == 0 {
            return Err(Error::Validation(
                "samples_per_tap and stride must be at least 1".into(),
            ));
        }
        if let Some(bits) = self.quantization_bits {
            if !(1..=32).contains(&bits) {
                return Err(Error::Validation(format!(
                    "quantization bits must be in 1..=32, got {bits}"
                )));
            }
        }
        self.noise.validate()
    }
}

/// Full linear convolution `a ∗ b` through zero-padded FFTs.
fn fft_convolve_full(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let (rows, cols) = (ar + br - 1, ac + bc - 1);
    let fft = Fft2::uncentered(rows, cols);
    let pad = |x: &Array2<f64>| {
        let mut out = Array2::<Complex64>::zeros((rows, cols));
        out.slice_mut(s![..x.nrows(), ..x.ncols()])
            .assign(&x.mapv(|v| Complex64::new(v, 0.0)));
        out
    };
    let (fa, fb) = (fft.forward(&pad(a)), fft.forward(&pad(b)));
    // Unitary transforms: the product picks up an extra √(rows·cols).
    let scale = ((rows * cols) as f64).sqrt();
    let product = ndarray::Zip::from(&fa)
        .and(&fb)
        .map_collect(|&x, &y| x * y * scale);
    fft.inverse(&product).mapv(|c| c.re)
}

fn valid_region(full: &Array2<f64>, scene: (usize, usize), kernel: (usize, usize)) -> Array2<f64> {
    full.slice(s![kernel.0 - 1..scene.0, kernel.1 - 1..scene.1])
        .to_owned()
}

/// Optical measurement `I ∗ h` over the valid interior.
pub fn render_measurement(scene_channel: &Array2<f64>, psf: &Psf) -> Result<Array2<f64>> {
    let kernel = psf.values().dim();
    let scene = scene_channel.dim();
    if kernel.0 > scene.0 || kernel.1 > scene.1 {
        return Err(Error::Bounds(format!(
            "PSF footprint {}x{} larger than scene {}x{}",
            kernel.0, kernel.1, scene.0, scene.1
        )));
    }
    if scene_channel.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Validation(
            "scene intensities must be finite and non-negative".into(),
        ));
    }
    let full = fft_convolve_full(scene_channel, psf.values());
    Ok(valid_region(&full, scene, kernel).mapv(|v| v.max(0.0)))
}

/// Same as [`render_measurement`] for a signed kernel; used for the linearity
/// identity and as the noiseless optical ideal.
pub fn render_signed(scene_channel: &Array2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    let k = kernel.dim();
    let scene = scene_channel.dim();
    if k.0 > scene.0 || k.1 > scene.1 {
        return Err(Error::Bounds("kernel larger than scene".into()));
    }
    Ok(valid_region(&fft_convolve_full(scene_channel, kernel), scene, k))
}

fn quantize(values: &mut Array2<f64>, bits: u32, full_scale: f64) {
    if full_scale <= 0.0 {
        return;
    }
    let levels = ((1u64 << bits) - 1) as f64;
    values.mapv_inplace(|v| (v.clamp(0.0, full_scale) / full_scale * levels).round() * full_scale / levels);
}

fn corrupt(meas: &Array2<f64>, noise: Noise, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    Ok(match noise {
        Noise::None => meas.clone(),
        Noise::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Validation(e.to_string()))?;
            meas.mapv(|v| v + normal.sample(rng))
        }
        Noise::Poisson { scale } => meas.mapv(|v| {
            let lambda = v * scale;
            if lambda > 0.0 {
                Poisson::new(lambda).map(|p| p.sample(rng) / scale).unwrap_or(v)
            } else {
                0.0
            }
        }),
    })
}

/// `(m₊ − m₋) / gain` with optional sensor noise and quantization.
///
/// Noise and quantization act on each raw measurement before the subtraction,
/// since that is where a sensor would introduce them.
pub fn compose_feature(
    meas_plus: &Array2<f64>,
    meas_minus: &Array2<f64>,
    gain: f64,
    cfg: &CaptureConfig,
) -> Result<Array2<f64>> {
    compose_feature_seeded(meas_plus, meas_minus, gain, cfg, 0)
}

/// As [`compose_feature`] with an extra noise stream id mixed into the seed.
pub fn compose_feature_seeded(
    meas_plus: &Array2<f64>,
    meas_minus: &Array2<f64>,
    gain: f64,
    cfg: &CaptureConfig,
    stream: u64,
) -> Result<Array2<f64>> {
    crate::error::ensure_shape("minus vs plus measurement", meas_plus.shape(), meas_minus.shape())?;
    if gain == 0.0 || !gain.is_finite() {
        return Err(Error::Validation(format!(
            "capture gain must be finite and non-zero, got {gain}"
        )));
    }
    cfg.validate()?;
    let noisy = !matches!(cfg.noise, Noise::None) || cfg.quantization_bits.is_some();
    if !noisy {
        return Ok((meas_plus - meas_minus) / gain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut plus = corrupt(meas_plus, cfg.noise, &mut rng)?;
    let mut minus = corrupt(meas_minus, cfg.noise, &mut rng)?;
    if let Some(bits) = cfg.quantization_bits {
        let full_scale = meas_plus
            .iter()
            .chain(meas_minus.iter())
            .cloned()
            .fold(0.0, f64::max);
        quantize(&mut plus, bits, full_scale);
        quantize(&mut minus, bits, full_scale);
    }
    Ok((plus - minus) / gain)
}

/// Mean over `samples_per_tap²` blocks, then keep every `stride`-th sample.
pub fn bin_and_stride(
    measurement: &Array2<f64>,
    samples_per_tap: usize,
    stride: usize,
) -> Result<Array2<f64>> {
    if samples_per_tap == 0 || stride == 0 {
        return Err(Error::Validation(
            "samples_per_tap and stride must be at least 1".into(),
        ));
    }
    let (rows, cols) = measurement.dim();
    if rows % samples_per_tap != 0 || cols % samples_per_tap != 0 {
        log::warn!("measurement {rows}x{cols} not divisible by {samples_per_tap}; trailing samples dropped");
    }
    let (br, bc) = (rows / samples_per_tap, cols / samples_per_tap);
    let area = (samples_per_tap * samples_per_tap) as f64;
    let binned = Array2::from_shape_fn((br, bc), |(i, j)| {
        let (r0, c0) = (i * samples_per_tap, j * samples_per_tap);
        measurement
            .slice(s![r0..r0 + samples_per_tap, c0..c0 + samples_per_tap])
            .sum()
            / area
    });
    Ok(binned.slice(s![..;stride, ..;stride]).to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Valid,
    Zero,
}

/// Reference first layer: `kernels` holds `L·C` kernels ordered channel-major
/// then by color, exactly as imported. Color channels are summed.
pub fn electronic_conv(
    scene: &SceneImage,
    kernels: &[SignedKernel],
    stride: usize,
    padding: Padding,
) -> Result<FeatureMap> {
    let c = scene.channels().len();
    if stride == 0 {
        return Err(Error::Validation("stride must be at least 1".into()));
    }
    if kernels.is_empty() || !kernels.len().is_multiple_of(c) {
        return Err(Error::Shape {
            what: "kernel count vs scene channels",
            expected: vec![c],
            actual: vec![kernels.len()],
        });
    }
    let k = kernels[0].size();
    if kernels.iter().any(|kern| kern.size() != k) {
        return Err(Error::Validation("all kernels must share one size".into()));
    }
    for (idx, kern) in kernels.iter().enumerate() {
        let expected = if c == 1 { Color::Mono } else { Color::RGB[idx % 3] };
        if kern.channel() != expected {
            return Err(Error::Validation(format!(
                "kernel {idx} is for channel {:?}, expected {expected:?}",
                kern.channel()
            )));
        }
    }
    let pad = match padding {
        Padding::Valid => 0,
        Padding::Zero => k / 2,
    };
    let (h, w) = (scene.height() + 2 * pad, scene.width() + 2 * pad);
    if k > h || k > w {
        return Err(Error::Bounds(format!("kernel {k} larger than scene {h}x{w}")));
    }
    let padded: Vec<Array2<f64>> = scene
        .channels()
        .iter()
        .map(|ch| {
            let mut p = Array2::zeros((h, w));
            p.slice_mut(s![pad..pad + ch.nrows(), pad..pad + ch.ncols()])
                .assign(ch);
            p
        })
        .collect();
    let (out_h, out_w) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let channels = kernels
        .chunks(c)
        .map(|group| {
            let mut out = Array2::<f64>::zeros((out_h, out_w));
            for (ci, kern) in group.iter().enumerate() {
                let taps = kern.taps();
                let img = &padded[ci];
                for ((oi, oj), acc) in out.indexed_iter_mut() {
                    let (r0, c0) = (oi * stride, oj * stride);
                    let mut sum = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            sum += img[[r0 + k - 1 - a, c0 + k - 1 - b]] * taps[[a, b]];
                        }
                    }
                    *acc += sum;
                }
            }
            out
        })
        .collect();
    Ok(FeatureMap { channels })
}

/// One ± pair of realized optics for one output channel and color.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalPair {
    pub output_channel: usize,
    pub color: Color,
    /// PSFs cropped to the kernel footprint; dark elements are all-zero.
    pub plus: Psf,
    pub minus: Psf,
    /// Radiometric gain of the optics relative to the target kernel.
    pub gain: f64,
}

impl OpticalPair {
    /// Crops both realized PSFs to the centered `footprint` window and takes
    /// the capture gain `1/α`. A pair whose fitted gain is zero realizes the
    /// zero kernel.
    pub fn from_results(
        element: &PlanElement,
        plus: &DkoResult,
        minus: &DkoResult,
        footprint: usize,
    ) -> Result<Self> {
        let crop = |r: &DkoResult| crop_psf(&r.realized_psf, footprint, footprint).map(|c| c.psf);
        let (plus_psf, minus_psf) = (crop(plus)?, crop(minus)?);
        let gain = plus.optical_gain();
        if gain > 0.0 {
            Ok(OpticalPair {
                output_channel: element.output_channel,
                color: element.color,
                plus: plus_psf,
                minus: minus_psf,
                gain,
            })
        } else {
            let sensor = *plus_psf.sensor();
            Ok(OpticalPair {
                output_channel: element.output_channel,
                color: element.color,
                plus: Psf::zeros(sensor),
                minus: Psf::zeros(sensor),
                gain: 1.0,
            })
        }
    }
}

/// Renders every pair, subtracts, compensates gain, sums colors per output
/// channel, then bins and strides.
pub fn simulate_capture(
    scene: &SceneImage,
    pairs: &[OpticalPair],
    cfg: &CaptureConfig,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let n_out = pairs.iter().map(|p| p.output_channel + 1).max().unwrap_or(0);
    let mut channels: Vec<Option<Array2<f64>>> = vec![None; n_out];
    for (idx, pair) in pairs.iter().enumerate() {
        let ch = pair.color.scene_channel();
        let src = scene
            .channels()
            .get(ch)
            .ok_or_else(|| Error::Validation(format!("scene has no channel for color {:?}", pair.color)))?;
        if scene.channels().len() == 1 && pair.color != Color::Mono {
            return Err(Error::Validation("color optics need an RGB scene".into()));
        }
        let plus = render_measurement(src, &pair.plus)?;
        let minus = render_measurement(src, &pair.minus)?;
        let feature = compose_feature_seeded(&plus, &minus, pair.gain, cfg, idx as u64)?;
        let slot = &mut channels[pair.output_channel];
        match slot {
            Some(acc) => {
                crate::error::ensure_shape("color feature", acc.shape(), feature.shape())?;
                *acc += &feature;
            }
            None => *slot = Some(feature),
        }
    }
    let channels = channels
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let c = c.ok_or_else(|| Error::Validation(format!("no optics for output channel {i}")))?;
            bin_and_stride(&c, cfg.samples_per_tap, cfg.stride)
        })
        .collect::<Result<_>>()?;
    Ok(FeatureMap { channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::split_taps;
    use crate::propagate::SensorGrid;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn psf(values: Array2<f64>) -> Psf {
        let (r, c) = values.dim();
        Psf::new(
            SensorGrid {
                n_u: c,
                n_v: r,
                pitch_m: 1e-5,
            },
            values,
        )
        .unwrap()
    }

    fn naive_valid(scene: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
        let (h, w) = scene.dim();
        let (kh, kw) = kernel.dim();
        Array2::from_shape_fn((h - kh + 1, w - kw + 1), |(i, j)| {
            let mut acc = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    // output (i, j) ↔ full index (i + kh - 1, j + kw - 1)
                    acc += kernel[[a, b]] * scene[[i + kh - 1 - a, j + kw - 1 - b]];
                }
            }
            acc
        })
    }

    fn random(rows: usize, cols: usize, seed: u64, lo: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..1.0))
    }

    #[test]
    fn delta_psf_reproduces_interior() {
        let scene = random(10, 12, 1, 0.0);
        let mut d = Array2::zeros((3, 3));
        d[[1, 1]] = 1.0;
        let m = render_measurement(&scene, &psf(d)).unwrap();
        let interior = scene.slice(s![1..9, 1..11]);
        for (a, b) in m.iter().zip(interior.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_scene_scales_by_psf_mass() {
        let scene = Array2::from_elem((9, 9), 2.5);
        let p = random(3, 3, 2, 0.0);
        let m = render_measurement(&scene, &psf(p.clone())).unwrap();
        for v in m.iter() {
            assert!((v - 2.5 * p.sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_render_matches_nested_loops() {
        for seed in 0..5 {
            let scene = random(16, 16, seed, 0.0);
            let kernel = random(3, 3, 100 + seed, 0.0);
            let fast = render_measurement(&scene, &psf(kernel.clone())).unwrap();
            let slow = naive_valid(&scene, &kernel);
            let scale = slow.iter().cloned().fold(0.0, f64::max);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn oversized_psf_is_rejected() {
        let err = render_measurement(&Array2::ones((4, 4)), &psf(Array2::ones((5, 5)))).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)));
    }

    #[test]
    fn gain_scales_feature() {
        let plus = random(5, 5, 3, 0.0);
        let minus = random(5, 5, 4, 0.0);
        let cfg = CaptureConfig::default();
        let unit = compose_feature(&plus, &minus, 1.0, &cfg).unwrap();
        let scaled = compose_feature(&plus, &minus, 4.0, &cfg).unwrap();
        for (a, b) in unit.iter().zip(scaled.iter()) {
            assert!((a / 4.0 - b).abs() < 1e-15);
        }
        assert!(matches!(
            compose_feature(&plus, &minus, 0.0, &cfg),
            Err(Error::Validation(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pair_subtraction_is_signed_convolution(seed in 0u64..10_000, k in prop::sample::select(vec![1usize, 3, 5])) {
            let scene = random(14, 13, seed, 0.0);
            let kernel = random(k, k, seed + 1, -1.0);
            let halves = split_taps(&kernel);
            let plus = render_measurement(&scene, &psf(halves.plus)).unwrap();
            let minus = render_measurement(&scene, &psf(halves.minus)).unwrap();
            let composed = compose_feature(&plus, &minus, 1.0, &CaptureConfig::default()).unwrap();
            let kernels = [SignedKernel::new(kernel.clone(), Color::Mono, 1e-5).unwrap()];
            let reference = electronic_conv(&SceneImage::mono(scene.clone()).unwrap(), &kernels, 1, Padding::Valid).unwrap();
            for (a, b) in composed.iter().zip(reference.channels[0].iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flip_convention_is_pinned() {
        let scene = random(8, 8, 5, 0.0);
        let asym = array![[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let optical = render_measurement(&scene, &psf(asym.clone())).unwrap();
        let kernels = [SignedKernel::new(asym.clone(), Color::Mono, 1e-5).unwrap()];
        let electronic = electronic_conv(
            &SceneImage::mono(scene.clone()).unwrap(),
            &kernels,
            1,
            Padding::Valid,
        )
        .unwrap();
        for (a, b) in optical.iter().zip(electronic.channels[0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // True convolution with a tap above center reads the pixel below.
        for i in 0..6 {
            for j in 0..6 {
                assert!((optical[[i, j]] - scene[[i + 2, j + 1]]).abs() < 1e-12);
            }
        }
        // A cross-correlation with the same taps reads the pixel above instead.
        let corr = naive_valid(&scene, &asym.slice(s![..;-1, ..;-1]).to_owned());
        assert!((corr[[0, 0]] - scene[[0, 1]]).abs() < 1e-12);
        assert!((corr[[0, 0]] - optical[[0, 0]]).abs() > 1e-6);
    }

    #[test]
    fn electronic_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = SceneImage::new((0..3).map(|c| random(11, 9, 20 + c, 0.0)).collect()).unwrap();
        let kernels: Vec<SignedKernel> = (0..6)
            .map(|i| {
                SignedKernel::new(
                    Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0)),
                    Color::RGB[i % 3],
                    1e-5,
                )
                .unwrap()
            })
            .collect();
        for (stride, padding) in [
            (1, Padding::Valid),
            (2, Padding::Valid),
            (1, Padding::Zero),
            (3, Padding::Zero),
        ] {
            let out = electronic_conv(&scene, &kernels, stride, padding).unwrap();
            let pad = if padding == Padding::Zero { 1 } else { 0 };
            let (h, w) = (11 + 2 * pad, 9 + 2 * pad);
            assert_eq!(out.height(), (h - 3) / stride + 1);
            assert_eq!(out.width(), (w - 3) / stride + 1);
            for l in 0..2 {
                for ((i, j), &v) in out.channels[l].indexed_iter() {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        let taps = kernels[l * 3 + c].taps();
                        for a in 0..3 {
                            for b in 0..3 {
                                let (r, q) = (i * stride + 2 - a, j * stride + 2 - b);
                                let (r, q) = (r as isize - pad as isize, q as isize - pad as isize);
                                if r >= 0 && q >= 0 && (r as usize) < 11 && (q as usize) < 9 {
                                    acc += taps[[a, b]] * scene.channels()[c][[r as usize, q as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_kernel_and_stride_shape() {
        let scene = SceneImage::mono(random(9, 9, 7, 0.0)).unwrap();
        let mut d = Array2::zeros((3, 3));
        d[[1, 1]] = 1.0;
        let kernels = [SignedKernel::new(d, Color::Mono, 1e-5).unwrap()];
        let out = electronic_conv(&scene, &kernels, 1, Padding::Valid).unwrap();
        assert_eq!(
            out.channels[0],
            scene.channels()[0].slice(s![1..8, 1..8]).to_owned()
        );
        let strided = electronic_conv(&scene, &kernels, 2, Padding::Valid).unwrap();
        assert_eq!((strided.height(), strided.width()), (4, 4));
    }

    #[test]
    fn binning_cases() {
        let m = random(6, 6, 8, 0.0);
        assert_eq!(bin_and_stride(&m, 1, 1).unwrap(), m);
        let ones = Array2::ones((4, 4));
        assert_eq!(bin_and_stride(&ones, 2, 1).unwrap(), Array2::<f64>::ones((2, 2)));
        let odd = random(7, 9, 9, 0.0);
        let out = bin_and_stride(&odd, 2, 2).unwrap();
        assert_eq!(out.dim(), (2, 2)); // floor(7/2)=3 → ceil(3/2)=2, floor(9/2)=4 → 2
    }

    #[test]
    fn noise_is_seeded() {
        let plus = random(6, 6, 10, 0.0) * 100.0;
        let minus = random(6, 6, 11, 0.0) * 100.0;
        for noise in [Noise::Gaussian { sigma: 0.5 }, Noise::Poisson { scale: 2.0 }] {
            let cfg = CaptureConfig {
                noise,
                seed: 42,
                ..CaptureConfig::default()
            };
            let a = compose_feature(&plus, &minus, 1.0, &cfg).unwrap();
            let b = compose_feature(&plus, &minus, 1.0, &cfg).unwrap();
            assert_eq!(a, b);
            let clean = &plus - &minus;
            assert_ne!(a, clean);
            let other = compose_feature(&plus, &minus, 1.0, &CaptureConfig { seed: 43, ..cfg }).unwrap();
            assert_ne!(a, other);
        }
    }

    #[test]
    fn quantization_snaps_to_levels() {
        let plus = array![[0.0, 0.26, 1.0]];
        let minus = array![[0.0, 0.0, 0.0]];
        let cfg = CaptureConfig {
            quantization_bits: Some(2),
            ..CaptureConfig::default()
        };
        let q = compose_feature(&plus, &minus, 1.0, &cfg).unwrap();
        assert_eq!(q, array![[0.0, 1.0 / 3.0, 1.0]]);
    }

    #[test]
    fn noise_parsing() {
        assert_eq!(
            "gaussian:0.01".parse::<Noise>().unwrap(),
            Noise::Gaussian { sigma: 0.01 }
        );
        assert_eq!("none".parse::<Noise>().unwrap(), Noise::None);
        assert!("gaussian:-1".parse::<Noise>().is_err());
        assert!("speckle:1".parse::<Noise>().is_err());
        assert_eq!(Noise::Poisson { scale: 3.0 }.to_string(), "poisson:3");
    }

    #[test]
    fn rgb_pipeline_sums_colors() {
        let scene = SceneImage::new((0..3).map(|c| random(10, 10, 30 + c, 0.0)).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernels: Vec<SignedKernel> = (0..3)
            .map(|i| {
                SignedKernel::new(
                    Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0)),
                    Color::RGB[i],
                    1e-5,
                )
                .unwrap()
            })
            .collect();
        let pairs: Vec<OpticalPair> = kernels
            .iter()
            .map(|k| {
                let h = split_taps(k.taps());
                OpticalPair {
                    output_channel: 0,
                    color: k.channel(),
                    plus: psf(h.plus * 2.0),
                    minus: psf(h.minus * 2.0),
                    gain: 2.0,
                }
            })
            .collect();
        let optical = simulate_capture(&scene, &pairs, &CaptureConfig::default()).unwrap();
        let electronic = electronic_conv(&scene, &kernels, 1, Padding::Valid).unwrap();
        assert!(optical.relative_l2(&electronic).unwrap() < 1e-12);

        let strided = simulate_capture(
            &scene,
            &pairs,
            &CaptureConfig {
                stride: 2,
                ..CaptureConfig::default()
            },
        )
        .unwrap();
        let reference = electronic_conv(&scene, &kernels, 2, Padding::Valid).unwrap();
        assert!(strided.relative_l2(&reference).unwrap() < 1e-12);
    }
}
