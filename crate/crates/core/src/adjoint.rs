//! Kernel-matching loss and its analytic gradient with respect to phase.
//!
//! Loss: `‖α·h(φ) − t‖²` where `h` is the Fresnel PSF of `T·exp(jφ)` and `α`
//! is the least-squares gain clamped at zero. The gradient holds `α` fixed at
//! its fitted value; at an unclamped fit `∂L/∂α = 0`, so this equals the total
//! derivative.
//!
//! For `S = Σ W·|F|²` with `F = A(C)`, `C = T·exp(jφ)` and `A` the
//! propagation operator: `∂S/∂φ = −2·Im(C · conj(Aᴴ(W·F)))`.

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fieldcore::{make_modulation, ApertureMask, GridSpec, OpticalConfig, PhaseProfile};
use crate::kernels::EmbeddedTarget;
use crate::propagate::Propagator;

#[derive(Debug, Clone, PartialEq)]
pub struct DkoLossReport {
    pub loss: f64,
    pub gain: f64,
    /// `α·h − t` over the full sensor grid.
    pub residual: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGradient {
    pub grid: GridSpec,
    pub values: Array2<f64>,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub modulation: Array2<Complex64>,
    pub field: Array2<Complex64>,
    pub psf: Array2<f64>,
}

pub fn evaluate(
    propagator: &Propagator,
    phase: &PhaseProfile,
    aperture: &ApertureMask,
) -> Result<Evaluation> {
    let modulation = make_modulation(phase, aperture)?.values().clone();
    let field = propagator.field(&modulation);
    let psf = field.mapv(|f| f.norm_sqr());
    Ok(Evaluation {
        modulation,
        field,
        psf,
    })
}

/// Vector–Jacobian product `∂/∂φ Σ W·|F|²` through the propagation.
pub fn intensity_vjp(propagator: &Propagator, evaluation: &Evaluation, weight: &Array2<f64>) -> Array2<f64> {
    let weighted = ndarray::Zip::from(&evaluation.field)
        .and(weight)
        .map_collect(|&f, &w| f * w);
    let back = propagator.field_adjoint(&weighted);
    ndarray::Zip::from(&evaluation.modulation)
        .and(&back)
        .map_collect(|&c, &g| -2.0 * (c * g.conj()).im)
}

/// Least-squares gain over any number of `(psf, target)` pairs, clamped at 0.
/// A dark PSF yields 0.
pub fn fit_gain<'a>(pairs: impl IntoIterator<Item = (&'a Array2<f64>, &'a Array2<f64>)>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (h, t) in pairs {
        num += (h * t).sum();
        den += (h * h).sum();
    }
    if den > 0.0 {
        (num / den).max(0.0)
    } else {
        0.0
    }
}

pub fn squared_error(psf: &Array2<f64>, target: &Array2<f64>, gain: f64) -> f64 {
    ndarray::Zip::from(psf).and(target).fold(0.0, |acc, &h, &t| {
        let r = gain * h - t;
        acc + r * r
    })
}

/// Gradient of `‖gain·h − t‖²` with the gain held fixed.
pub fn gradient_at_gain(
    propagator: &Propagator,
    evaluation: &Evaluation,
    target: &Array2<f64>,
    gain: f64,
) -> Array2<f64> {
    let weight = ndarray::Zip::from(&evaluation.psf)
        .and(target)
        .map_collect(|&h, &t| 2.0 * gain * (gain * h - t));
    intensity_vjp(propagator, evaluation, &weight)
}

fn check_consistency(
    propagator: &Propagator,
    phase: &PhaseProfile,
    aperture: &ApertureMask,
    target: &EmbeddedTarget,
) -> Result<()> {
    if phase.grid() != aperture.grid() {
        return Err(Error::Shape {
            what: "phase vs aperture grid",
            expected: vec![aperture.grid().n_y(), aperture.grid().n_x()],
            actual: vec![phase.grid().n_y(), phase.grid().n_x()],
        });
    }
    let sensor = propagator.sensor();
    if target.values().dim() != sensor.shape() {
        return Err(Error::Shape {
            what: "target vs simulated sensor grid",
            expected: vec![sensor.n_v, sensor.n_u],
            actual: target.values().shape().to_vec(),
        });
    }
    Ok(())
}

/// Single-element objective bound to one target.
#[derive(Debug, Clone)]
pub struct DkoObjective<'a> {
    propagator: Propagator,
    aperture: &'a ApertureMask,
    target: &'a EmbeddedTarget,
    fit_gain: bool,
}

impl<'a> DkoObjective<'a> {
    pub fn new(
        aperture: &'a ApertureMask,
        target: &'a EmbeddedTarget,
        config: &OpticalConfig,
        fit_gain: bool,
    ) -> Result<Self> {
        let propagator = Propagator::new(*aperture.grid(), config)?;
        Ok(DkoObjective {
            propagator,
            aperture,
            target,
            fit_gain,
        })
    }

    fn gain_for(&self, psf: &Array2<f64>) -> f64 {
        if self.fit_gain {
            fit_gain([(psf, self.target.values())])
        } else {
            1.0
        }
    }

    pub fn loss(&self, phase: &PhaseProfile) -> Result<DkoLossReport> {
        check_consistency(&self.propagator, phase, self.aperture, self.target)?;
        let eval = evaluate(&self.propagator, phase, self.aperture)?;
        let gain = self.gain_for(&eval.psf);
        let residual = ndarray::Zip::from(&eval.psf)
            .and(self.target.values())
            .map_collect(|&h, &t| gain * h - t);
        let loss = residual.iter().map(|r| r * r).sum();
        Ok(DkoLossReport { loss, gain, residual })
    }

    pub fn gradient(&self, phase: &PhaseProfile) -> Result<PhaseGradient> {
        check_consistency(&self.propagator, phase, self.aperture, self.target)?;
        let eval = evaluate(&self.propagator, phase, self.aperture)?;
        let gain = self.gain_for(&eval.psf);
        Ok(PhaseGradient {
            grid: *phase.grid(),
            values: gradient_at_gain(&self.propagator, &eval, self.target.values(), gain),
        })
    }
}

pub fn dko_loss(
    phase: &PhaseProfile,
    aperture: &ApertureMask,
    target: &EmbeddedTarget,
    config: &OpticalConfig,
    fit_gain: bool,
) -> Result<DkoLossReport> {
    DkoObjective::new(aperture, target, config, fit_gain)?.loss(phase)
}

pub fn dko_grad(
    phase: &PhaseProfile,
    aperture: &ApertureMask,
    target: &EmbeddedTarget,
    config: &OpticalConfig,
    fit_gain: bool,
) -> Result<PhaseGradient> {
    DkoObjective::new(aperture, target, config, fit_gain)?.gradient(phase)
}

/// Anything with a scalar value and an analytic phase gradient.
pub trait PhaseObjective {
    fn value(&self, phase: &Array2<f64>) -> Result<f64>;
    fn gradient(&self, phase: &Array2<f64>) -> Result<Array2<f64>>;
}

impl PhaseObjective for DkoObjective<'_> {
    fn value(&self, phase: &Array2<f64>) -> Result<f64> {
        let phase = PhaseProfile::new(*self.aperture.grid(), phase.clone())?;
        Ok(self.loss(&phase)?.loss)
    }

    fn gradient(&self, phase: &Array2<f64>) -> Result<Array2<f64>> {
        let phase = PhaseProfile::new(*self.aperture.grid(), phase.clone())?;
        Ok(DkoObjective::gradient(self, &phase)?.values)
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic derivatives with central differences at `n_probes`
/// distinct positions where `support > 0`; returns the worst relative error.
pub fn fd_check_objective<O: PhaseObjective + ?Sized>(
    objective: &O,
    phase: &Array2<f64>,
    support: &Array2<f64>,
    n_probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    if n_probes == 0 {
        return Err(Error::Validation("n_probes must be at least 1".into()));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {step}")));
    }
    let interior: Vec<(usize, usize)> = support
        .indexed_iter()
        .filter(|(_, &t)| t > 0.0)
        .map(|(idx, _)| idx)
        .collect();
    if interior.is_empty() {
        return Err(Error::Validation("aperture has no open samples to probe".into()));
    }
    let analytic = objective.gradient(phase)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, interior.len(), n_probes.min(interior.len()));
    let mut worst: f64 = 0.0;
    let mut probe = phase.clone();
    for pick in picks {
        let idx = interior[pick];
        let base = probe[idx];
        probe[idx] = base + step;
        let up = objective.value(&probe)?;
        probe[idx] = base - step;
        let down = objective.value(&probe)?;
        probe[idx] = base;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[idx], numeric));
    }
    Ok(worst)
}

pub fn fd_check(
    phase: &PhaseProfile,
    aperture: &ApertureMask,
    target: &EmbeddedTarget,
    config: &OpticalConfig,
    n_probes: usize,
    step: f64,
) -> Result<f64> {
    let objective = DkoObjective::new(aperture, target, config, true)?;
    fd_check_objective(
        &objective,
        phase.values(),
        aperture.transmittance(),
        n_probes,
        step,
        0,
    )
}
