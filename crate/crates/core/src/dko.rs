//! Direct kernel optimization: fit one metasurface phase per half-kernel so
//! its PSF reproduces the target, then drive all pairs of a layer.
//!
//! The two halves of a pair are optimized side by side with a shared gain
//! refitted every iteration; nothing else couples them. An all-zero half
//! needs no light at all, so its element is left dark (opaque) and skipped.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{evaluate, fit_gain, gradient_at_gain, squared_error};
use crate::error::{Error, Result};
use crate::eval::{kernel_metrics, KernelMatchReport};
use crate::fieldcore::{make_lens_phase, ApertureMask, OpticalConfig, PhaseProfile};
use crate::kernels::{collapse_to_taps, embed_target, split_signed, ArrayPlan, EmbeddedTarget, SignedKernel};
use crate::propagate::{crop_psf, Propagator, Psf, SensorGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Init {
    /// Lens focused on the sensor plus uniform jitter in `[-σ, σ]`.
    LensJitter {
        sigma_rad: f64,
    },
    /// Zero-mean Gaussian phase with standard deviation `σ`.
    Random {
        sigma_rad: f64,
    },
    Zero,
}

impl Default for Init {
    fn default() -> Self {
        Init::LensJitter { sigma_rad: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DkoConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub init: Init,
    pub seed: u64,
    pub rel_tol: f64,
    pub patience: usize,
    /// Extra taps on each side of the footprint when scoring the match.
    pub guard_taps: usize,
}

impl Default for DkoConfig {
    fn default() -> Self {
        DkoConfig {
            max_iters: 2000,
            lr: 0.02,
            optimizer: Optimizer::default(),
            init: Init::default(),
            seed: 0,
            rel_tol: 1e-6,
            patience: 50,
            guard_taps: 2,
        }
    }
}

impl DkoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Validation("max_iters must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return Err(Error::Validation(format!(
                "rel_tol must be non-negative, got {}",
                self.rel_tol
            )));
        }
        match self.init {
            Init::LensJitter { sigma_rad } | Init::Random { sigma_rad }
                if sigma_rad.is_nan() || sigma_rad < 0.0 =>
            {
                return Err(Error::Validation(format!(
                    "init sigma must be non-negative, got {sigma_rad}"
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Loss reached the floating-point floor.
    Converged,
    /// Relative improvement stayed below `rel_tol` for `patience` iterations.
    EarlyStop,
    MaxIters,
    /// All-zero target; the element is left opaque.
    Dark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DkoResult {
    pub element_index: usize,
    /// Best phase seen (lowest pair loss).
    pub phase: PhaseProfile,
    pub realized_psf: Psf,
    /// Gain α shared with the other half of the pair: `α·psf ≈ target`.
    pub gain: f64,
    /// This half's loss `‖α·h − t‖²` at every evaluated iterate.
    pub loss_curve: Vec<f64>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    /// `None` for dark elements, whose target has no defined correlation.
    pub kernel_metrics: Option<KernelMatchReport>,
}

impl DkoResult {
    pub fn is_dark(&self) -> bool {
        self.stop_reason == StopReason::Dark
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().expect("loss curve is never empty")
    }

    /// Running minimum of the loss curve.
    pub fn loss_envelope(&self) -> Vec<f64> {
        self.loss_curve
            .iter()
            .scan(f64::INFINITY, |m, &l| {
                *m = m.min(l);
                Some(*m)
            })
            .collect()
    }

    /// Radiometric gain of the optics relative to the target kernel (1/α);
    /// measurements are divided by this at capture.
    pub fn optical_gain(&self) -> f64 {
        if self.gain > 0.0 {
            1.0 / self.gain
        } else {
            0.0
        }
    }
}

/// The two embedded halves of one signed kernel, with their plan indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTarget {
    pub plus_index: usize,
    pub minus_index: usize,
    pub plus: EmbeddedTarget,
    pub minus: EmbeddedTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub plus: DkoResult,
    pub minus: DkoResult,
    /// Pair loss at the returned phases.
    pub best_loss: f64,
    /// Pair loss at the initial phases.
    pub initial_loss: f64,
}

impl PairResult {
    /// Gain-compensated signed kernel `α·(h₊ − h₋)` collapsed to `k × k` taps.
    pub fn realized_taps(&self, k: usize, samples_per_tap: usize) -> Result<Array2<f64>> {
        let gain = self.plus.gain;
        let signed = (self.plus.realized_psf.values() - self.minus.realized_psf.values()) * gain;
        collapse_to_taps(&signed, k, samples_per_tap)
    }
}

/// Loss, phases, realized PSFs and gain of the best iterate so far.
type BestIterate = (f64, Vec<Array2<f64>>, [Array2<f64>; 2], f64);

fn element_seed(seed: u64, element_index: usize) -> u64 {
    seed ^ element_index as u64
}

fn initial_phase(
    cfg: &DkoConfig,
    aperture: &ApertureMask,
    optical: &OpticalConfig,
    element_index: usize,
) -> Result<PhaseProfile> {
    let grid = *aperture.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(element_seed(cfg.seed, element_index));
    match cfg.init {
        Init::Zero => Ok(PhaseProfile::zeros(grid)),
        Init::Random { sigma_rad } => {
            let normal = Normal::new(0.0, sigma_rad).map_err(|e| Error::Validation(e.to_string()))?;
            PhaseProfile::new(
                grid,
                Array2::from_shape_fn(grid.shape(), |_| normal.sample(&mut rng)),
            )
        }
        Init::LensJitter { sigma_rad } => {
            let lens = make_lens_phase(grid, optical, optical.sensor_distance_m)?;
            let jittered = lens.values().mapv(|p| {
                if sigma_rad > 0.0 {
                    p + rng.random_range(-sigma_rad..=sigma_rad)
                } else {
                    p
                }
            });
            PhaseProfile::new(grid, jittered)
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

fn apply_step(phase: &mut Array2<f64>, grad: &Array2<f64>, state: &mut AdamState, cfg: &DkoConfig) {
    match cfg.optimizer {
        Optimizer::GradientDescent => phase.scaled_add(-cfg.lr, grad),
        Optimizer::Adam { beta1, beta2, eps } => {
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            ndarray::Zip::from(phase)
                .and(&mut state.m)
                .and(&mut state.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

fn score(psf: &Psf, target: &EmbeddedTarget, gain: f64, guard_taps: usize) -> Result<KernelMatchReport> {
    let (rows, cols) = target.values().dim();
    let window = (target.footprint() + 2 * guard_taps * target.samples_per_tap())
        .min(rows)
        .min(cols);
    let realized = crop_psf(psf, window, window)?.psf.into_values() * gain;
    let target_psf = Psf::new(*target.sensor(), target.values().clone())?;
    let wanted = crop_psf(&target_psf, window, window)?.psf.into_values();
    kernel_metrics(&realized, &wanted)
}

fn snapshot_path(element_index: usize, iteration: usize) -> std::path::PathBuf {
    std::env::temp_dir().join(format!(
        "metaforge-abort-element{element_index}-iter{iteration}.npy"
    ))
}

/// Optimizes both halves of a pair starting from `cfg.init`.
pub fn optimize_kernel(
    targets: &PairTarget,
    aperture: &ApertureMask,
    optical: &OpticalConfig,
    cfg: &DkoConfig,
) -> Result<PairResult> {
    optimize_kernel_from(targets, aperture, optical, cfg, None)
}

/// As [`optimize_kernel`], optionally starting from explicit phases `[plus, minus]`.
pub fn optimize_kernel_from(
    targets: &PairTarget,
    aperture: &ApertureMask,
    optical: &OpticalConfig,
    cfg: &DkoConfig,
    start: Option<[PhaseProfile; 2]>,
) -> Result<PairResult> {
    cfg.validate()?;
    let propagator = Propagator::new(*aperture.grid(), optical)?;
    let sensor = *propagator.sensor();
    let halves = [&targets.plus, &targets.minus];
    let indices = [targets.plus_index, targets.minus_index];
    for half in halves {
        if half.values().dim() != sensor.shape() {
            return Err(Error::Shape {
                what: "embedded target vs simulated sensor",
                expected: vec![sensor.n_v, sensor.n_u],
                actual: half.values().shape().to_vec(),
            });
        }
    }
    let active = [!targets.plus.is_dark(), !targets.minus.is_dark()];
    let energy: f64 = halves
        .iter()
        .map(|t| t.values().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let floor = energy * 1e-28;

    let mut phases: Vec<Array2<f64>> = match start {
        Some(explicit) => explicit.into_iter().map(PhaseProfile::into_values).collect(),
        None => indices
            .iter()
            .map(|&i| initial_phase(cfg, aperture, optical, i).map(PhaseProfile::into_values))
            .collect::<Result<_>>()?,
    };
    for p in &phases {
        crate::error::ensure_shape(
            "initial phase",
            &[aperture.grid().n_y(), aperture.grid().n_x()],
            p.shape(),
        )?;
    }
    let zeros = Array2::<f64>::zeros(aperture.grid().shape());
    let mut states = vec![
        AdamState {
            m: zeros.clone(),
            v: zeros.clone(),
            t: 0,
        };
        2
    ];

    let mut curves: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut envelope: Vec<f64> = Vec::new();
    let mut best: Option<BestIterate> = None;
    let mut initial_loss = f64::NAN;
    let mut iterations_run = 0usize;
    let mut stop_reason = StopReason::MaxIters;

    for iteration in 0..=cfg.max_iters {
        let mut evals = Vec::with_capacity(2);
        for (half, phase) in phases.iter().enumerate() {
            if active[half] {
                let profile = PhaseProfile::new(*aperture.grid(), phase.clone()).map_err(|_| {
                    let path = snapshot_path(indices[half], iteration);
                    let _ = crate::tensorio::save_array(&path, phase);
                    Error::Numeric(format!(
                        "element {}: non-finite phase at iteration {iteration}; snapshot {}",
                        indices[half],
                        path.display()
                    ))
                })?;
                evals.push(Some(evaluate(&propagator, &profile, aperture)?));
            } else {
                evals.push(None);
            }
        }
        let gain = fit_gain(
            evals
                .iter()
                .zip(halves)
                .filter_map(|(e, t)| e.as_ref().map(|e| (&e.psf, t.values()))),
        );
        let losses: Vec<f64> = evals
            .iter()
            .zip(halves)
            .map(|(e, t)| {
                e.as_ref()
                    .map_or(0.0, |e| squared_error(&e.psf, t.values(), gain))
            })
            .collect();
        let total = losses[0] + losses[1];
        if !total.is_finite() {
            let path = snapshot_path(indices[0], iteration);
            let _ = crate::tensorio::save_array(&path, &phases[0]);
            return Err(Error::Numeric(format!(
                "elements {}/{}: non-finite loss at iteration {iteration}; phase snapshot {}",
                indices[0],
                indices[1],
                path.display()
            )));
        }
        for half in 0..2 {
            curves[half].push(losses[half]);
        }
        if iteration == 0 {
            initial_loss = total;
        }
        if best.as_ref().is_none_or(|b| total < b.0) {
            let psfs = [0, 1].map(|h| {
                evals[h]
                    .as_ref()
                    .map_or_else(|| Array2::zeros(sensor.shape()), |e| e.psf.clone())
            });
            best = Some((total, phases.clone(), psfs, gain));
        }
        let best_loss = best.as_ref().map(|b| b.0).unwrap_or(total);
        envelope.push(best_loss);

        if total <= floor {
            stop_reason = StopReason::Converged;
            break;
        }
        if iteration == cfg.max_iters {
            stop_reason = StopReason::MaxIters;
            break;
        }
        if cfg.patience > 0 && iteration >= cfg.patience {
            let then = envelope[iteration - cfg.patience];
            if then > 0.0 && (then - best_loss) / then < cfg.rel_tol {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }

        for half in 0..2 {
            if let Some(eval) = &evals[half] {
                let grad = gradient_at_gain(&propagator, eval, halves[half].values(), gain);
                apply_step(&mut phases[half], &grad, &mut states[half], cfg);
            }
        }
        iterations_run += 1;
    }

    let (best_loss, best_phases, best_psfs, best_gain) = best.expect("at least one iterate evaluated");
    let mut out = Vec::with_capacity(2);
    for (half, (phase, psf)) in best_phases.into_iter().zip(best_psfs).enumerate() {
        let realized_psf = Psf::new(sensor, psf)?;
        let dark = !active[half];
        let kernel_metrics = if dark {
            None
        } else {
            Some(score(&realized_psf, halves[half], best_gain, cfg.guard_taps)?)
        };
        out.push(DkoResult {
            element_index: indices[half],
            phase: PhaseProfile::new(*aperture.grid(), phase)?,
            realized_psf,
            gain: best_gain,
            loss_curve: if dark {
                vec![0.0]
            } else {
                std::mem::take(&mut curves[half])
            },
            iterations_run: if dark { 0 } else { iterations_run },
            stop_reason: if dark { StopReason::Dark } else { stop_reason },
            kernel_metrics,
        });
    }
    let minus = out.pop().expect("two halves");
    let plus = out.pop().expect("two halves");
    Ok(PairResult {
        plus,
        minus,
        best_loss,
        initial_loss,
    })
}

/// Splits each kernel and embeds both halves for the matching pair of `plan`.
/// Kernels are ordered like the plan's pairs (output channel, then color).
pub fn layer_targets(
    kernels: &[SignedKernel],
    plan: &ArrayPlan,
    sensor: SensorGrid,
    samples_per_tap: usize,
) -> Result<Vec<PairTarget>> {
    if kernels.len() != plan.pair_count() {
        return Err(Error::Shape {
            what: "kernels vs plan pairs",
            expected: vec![plan.pair_count()],
            actual: vec![kernels.len()],
        });
    }
    kernels
        .iter()
        .enumerate()
        .map(|(p, kernel)| {
            let (plus, minus) = plan.pair_elements(p);
            if kernel.channel() != plus.color {
                return Err(Error::Validation(format!(
                    "kernel {p} is for {:?} but plan pair {p} expects {:?}",
                    kernel.channel(),
                    plus.color
                )));
            }
            let halves = split_signed(kernel);
            Ok(PairTarget {
                plus_index: plus.index,
                minus_index: minus.index,
                plus: embed_target(&halves.plus, sensor, samples_per_tap)?,
                minus: embed_target(&halves.minus, sensor, samples_per_tap)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementFailure {
    pub element_index: usize,
    pub message: String,
}

pub type ElementOutcome = std::result::Result<DkoResult, ElementFailure>;

/// Runs every pair independently on a pool of `parallelism` workers.
/// Returns one outcome per element, plus before minus, in input order.
pub fn optimize_layer(
    targets: &[PairTarget],
    aperture: &ApertureMask,
    optical: &OpticalConfig,
    cfg: &DkoConfig,
    parallelism: usize,
) -> Result<Vec<ElementOutcome>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Numeric(format!("cannot start worker pool: {e}")))?;
    let pairs: Vec<Result<PairResult>> = pool.install(|| {
        targets
            .par_iter()
            .map(|t| optimize_kernel(t, aperture, optical, cfg))
            .collect()
    });
    let mut out = Vec::with_capacity(targets.len() * 2);
    for (target, pair) in targets.iter().zip(pairs) {
        match pair {
            Ok(pair) => {
                out.push(Ok(pair.plus));
                out.push(Ok(pair.minus));
            }
            Err(err) => {
                log::error!("pair {}/{} failed: {err}", target.plus_index, target.minus_index);
                for element_index in [target.plus_index, target.minus_index] {
                    out.push(Err(ElementFailure {
                        element_index,
                        message: err.to_string(),
                    }));
                }
            }
        }
    }
    Ok(out)
}
