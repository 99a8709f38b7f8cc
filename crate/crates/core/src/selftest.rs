//! Small invariant suite runnable from a release binary.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::fd_check;
use crate::capture::{
    compose_feature, electronic_conv, render_measurement, CaptureConfig, Padding, SceneImage,
};
use crate::error::Result;
use crate::fieldcore::{default_aperture, GridSpec, ModulationProfile, OpticalConfig, PhaseProfile};
use crate::kernels::{embed_target, split_taps, Color, SignedKernel};
use crate::propagate::{fresnel_psf, sensor_grid, Psf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

fn outcome(name: &str, value: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed: value.is_finite() && value <= tolerance,
        value,
        tolerance,
    }
}

fn parseval(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in [32, 48] {
        let grid = GridSpec::square(n, 2.5e-6)?;
        let values = Array2::from_shape_fn(grid.shape(), |_| {
            Complex64::from_polar(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        });
        let m = ModulationProfile::from_values(grid, values)?;
        let psf = fresnel_psf(&m, &OpticalConfig::default())?;
        worst = worst.max((psf.total() - m.power()).abs() / m.power());
    }
    Ok(worst)
}

fn fd_gradient(rng: &mut ChaCha8Rng) -> Result<f64> {
    let optical = OpticalConfig::default();
    let grid = GridSpec::square(16, 2.5e-6)?;
    let aperture = default_aperture(grid);
    let sensor = sensor_grid(&optical, &grid);
    let taps = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..20.0));
    let target = embed_target(&taps, sensor, 1)?;
    let phase = PhaseProfile::new(
        grid,
        Array2::from_shape_fn(grid.shape(), |_| {
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
        }),
    )?;
    fd_check(&phase, &aperture, &target, &optical, 20, 1e-4)
}

fn split_reconstruct(rng: &mut ChaCha8Rng) -> f64 {
    (0..20)
        .map(|_| {
            let k = Array2::from_shape_fn((7, 7), |_| rng.random_range(-1.0..1.0));
            let halves = split_taps(&k);
            let negative = halves.plus.iter().chain(halves.minus.iter()).any(|&v| v < 0.0);
            let err = (&halves.reconstruct() - &k)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if negative {
                f64::INFINITY
            } else {
                err
            }
        })
        .fold(0.0, f64::max)
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let scene = Array2::from_shape_fn((20, 17), |_| rng.random_range(0.0..1.0));
        let kernel = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let halves = split_taps(&kernel);
        let sensor = crate::propagate::SensorGrid {
            n_u: 5,
            n_v: 5,
            pitch_m: 1.0,
        };
        let plus = render_measurement(&scene, &Psf::new(sensor, halves.plus)?)?;
        let minus = render_measurement(&scene, &Psf::new(sensor, halves.minus)?)?;
        let composed = compose_feature(&plus, &minus, 1.0, &CaptureConfig::default())?;
        let reference = electronic_conv(
            &SceneImage::mono(scene.clone())?,
            &[SignedKernel::new(kernel.clone(), Color::Mono, 1.0)?],
            1,
            Padding::Valid,
        )?;
        // Nested-loop true convolution as the independent oracle.
        for ((i, j), &v) in composed.indexed_iter() {
            let mut acc = 0.0;
            for a in 0..5 {
                for b in 0..5 {
                    acc += kernel[[a, b]] * scene[[i + 4 - a, j + 4 - b]];
                }
            }
            worst = worst
                .max((v - acc).abs())
                .max((reference.channels[0][[i, j]] - acc).abs());
        }
    }
    Ok(worst)
}

pub fn run_selftest(seed: u64) -> Result<SelfTestReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = vec![
        outcome("parseval", parseval(&mut rng)?, 1e-10),
        outcome("fd-gradient", fd_gradient(&mut rng)?, 1e-5),
        outcome("split-reconstruct", split_reconstruct(&mut rng), 0.0),
        outcome("conv-oracle", conv_oracle(&mut rng)?, 1e-10),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(SelfTestReport { seed, checks, passed })
}
