//! Parameter accounting and per-step cost of DKO versus end-to-end training.
//!
//! The end-to-end baseline is a toy regression: every element's PSF renders a
//! batch of synthetic scenes, a per-element linear readout combines the
//! measurements, and the loss against a fixed signed "teacher" convolution is
//! backpropagated to all phases at once. Its optical gradient reuses
//! [`adjoint::intensity_vjp`].

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{evaluate, fit_gain, gradient_at_gain, intensity_vjp, relative_error, squared_error};
use crate::capture::{electronic_conv, render_signed, Padding, SceneImage};
use crate::error::{Error, Result};
use crate::fieldcore::{
    default_aperture, make_lens_phase, ApertureMask, GridSpec, OpticalConfig, PhaseProfile,
};
use crate::kernels::{embed_target, split_taps, ArrayPlan, Color, SignedKernel};
use crate::propagate::{window_start, Propagator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamAccount {
    pub elements: u64,
    pub grid_n_x: u64,
    pub grid_n_y: u64,
    pub optical_params: u64,
    pub electronic_first_layer_params: u64,
    /// optical / electronic
    pub ratio: f64,
}

/// Optical phases (`elements · n_x · n_y`) against the electronic layer
/// (`L · C · k²`) it replaces.
pub fn count_parameters(
    plan: &ArrayPlan,
    grid: &GridSpec,
    output_channels: usize,
    input_channels: usize,
    k: usize,
) -> Result<ParamAccount> {
    if plan.output_channels != output_channels || plan.color_mode.input_channels() != input_channels {
        return Err(Error::Validation(format!(
            "plan ({} outputs, {}) does not describe L={output_channels}, C={input_channels}",
            plan.output_channels, plan.color_mode
        )));
    }
    let elements = plan.len() as u64;
    let optical = elements * grid.n_x() as u64 * grid.n_y() as u64;
    let electronic = (output_channels * input_channels * k * k) as u64;
    Ok(ParamAccount {
        elements,
        grid_n_x: grid.n_x() as u64,
        grid_n_y: grid.n_y() as u64,
        optical_params: optical,
        electronic_first_layer_params: electronic,
        ratio: if electronic > 0 {
            optical as f64 / electronic as f64
        } else {
            f64::INFINITY
        },
    })
}

/// Rounded count with a k/M/G suffix, e.g. `403M`, `9k`.
pub fn human_count(n: u64) -> String {
    let units = [(1_000_000_000u64, "G"), (1_000_000, "M"), (1_000, "k")];
    for (scale, suffix) in units {
        if n >= scale {
            return format!("{}{suffix}", (n as f64 / scale as f64).round() as u64);
        }
    }
    n.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    Dko,
    E2e,
    Electronic,
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dko" => Ok(BenchMode::Dko),
            "e2e" => Ok(BenchMode::E2e),
            "electronic" => Ok(BenchMode::Electronic),
            _ => Err(Error::Validation(format!(
                "unknown bench mode {s:?} (expected dko, e2e, electronic)"
            ))),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Dko => "dko",
            BenchMode::E2e => "e2e",
            BenchMode::Electronic => "electronic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSizes {
    pub grid_n: usize,
    pub elements: usize,
    pub scene_n: usize,
    pub kernel_k: usize,
    pub batch: usize,
}

impl Default for BenchSizes {
    fn default() -> Self {
        BenchSizes {
            grid_n: 128,
            elements: 12,
            scene_n: 64,
            kernel_k: 7,
            batch: 4,
        }
    }
}

impl BenchSizes {
    pub fn validate(&self) -> Result<()> {
        if self.elements == 0 || !self.elements.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "elements must be a positive even number (± pairs), got {}",
                self.elements
            )));
        }
        if self.kernel_k.is_multiple_of(2) || self.kernel_k == 0 {
            return Err(Error::Validation(format!(
                "kernel_k must be odd, got {}",
                self.kernel_k
            )));
        }
        if self.kernel_k > self.grid_n || self.kernel_k > self.scene_n {
            return Err(Error::Validation(
                "kernel_k must fit in both the grid and the scene".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::Validation("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub mode: BenchMode,
    pub sizes: BenchSizes,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iterations_timed: usize,
    pub warmup_iterations: usize,
}

const WARMUP: usize = 1;

fn gaussian(k: usize, sigma: f64) -> Array2<f64> {
    let c = (k / 2) as f64;
    let g = Array2::from_shape_fn((k, k), |(i, j)| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let total = g.sum();
    g / total
}

/// Signed difference-of-Gaussians used as the regression teacher.
pub fn teacher_kernel(k: usize) -> Array2<f64> {
    let scale = (k as f64 / 7.0).max(0.3);
    gaussian(k, 1.0 * scale) - gaussian(k, 2.0 * scale) * 0.5
}

/// Smooth, non-negative synthetic scene: a few random cosines on a pedestal.
pub fn synthetic_scene(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.12),
            )
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let mut v = 0.5;
        for &(freq, dir, phase, amp) in &waves {
            let t = (i as f64 * dir.sin() + j as f64 * dir.cos()) * freq * std::f64::consts::TAU;
            v += amp * (t + phase).cos();
        }
        v
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct E2eConfig {
    pub grid_n: usize,
    pub pitch_m: f64,
    pub optical: OpticalConfig,
    pub elements: usize,
    pub kernel_k: usize,
    pub scene_n: usize,
    pub batch: usize,
    pub samples: usize,
    pub steps: usize,
    pub lr_phase: f64,
    pub lr_readout: f64,
    pub seed: u64,
}

impl Default for E2eConfig {
    fn default() -> Self {
        let sizes = BenchSizes::default();
        E2eConfig {
            grid_n: sizes.grid_n,
            pitch_m: 2.5e-6,
            optical: OpticalConfig::default(),
            elements: sizes.elements,
            kernel_k: sizes.kernel_k,
            scene_n: sizes.scene_n,
            batch: sizes.batch,
            samples: 256,
            steps: 200,
            lr_phase: 0.05,
            lr_readout: 0.01,
            seed: 0,
        }
    }
}

impl E2eConfig {
    /// 8×8 phases, one element: small enough for finite differences.
    pub fn micro() -> Self {
        E2eConfig {
            grid_n: 8,
            elements: 1,
            kernel_k: 3,
            scene_n: 8,
            batch: 2,
            samples: 4,
            steps: 10,
            ..E2eConfig::default()
        }
    }

    pub fn from_sizes(sizes: &BenchSizes, seed: u64) -> Self {
        E2eConfig {
            grid_n: sizes.grid_n,
            elements: sizes.elements,
            kernel_k: sizes.kernel_k,
            scene_n: sizes.scene_n,
            batch: sizes.batch,
            seed,
            ..E2eConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optical.validate()?;
        if self.elements == 0 || self.batch == 0 || self.samples == 0 {
            return Err(Error::Validation(
                "elements, batch and samples must be at least 1".into(),
            ));
        }
        if self.kernel_k.is_multiple_of(2) || self.kernel_k > self.grid_n || self.kernel_k > self.scene_n {
            return Err(Error::Validation(format!(
                "kernel_k {} must be odd and fit the grid and scene",
                self.kernel_k
            )));
        }
        if !(self.lr_phase > 0.0 && self.lr_readout > 0.0) {
            return Err(Error::Validation("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable state: one phase map per element, then `elements` readout
/// weights followed by a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct E2eParams {
    pub phases: Vec<Array2<f64>>,
    pub readout: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct E2eGradient {
    pub phases: Vec<Array2<f64>>,
    pub readout: Vec<f64>,
}

pub struct E2eModel {
    cfg: E2eConfig,
    propagator: Propagator,
    aperture: ApertureMask,
    power: f64,
    window: (usize, usize),
    scenes: Vec<Array2<f64>>,
    targets: Vec<Array2<f64>>,
}

impl E2eModel {
    pub fn new(cfg: E2eConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = GridSpec::square(cfg.grid_n, cfg.pitch_m)?;
        let aperture = default_aperture(grid);
        let propagator = Propagator::new(grid, &cfg.optical)?;
        let (rows, cols) = propagator.sensor().shape();
        let window = (window_start(rows, cfg.kernel_k), window_start(cols, cfg.kernel_k));
        let power = aperture.transmitted_power();
        let teacher = teacher_kernel(cfg.kernel_k);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scenes: Vec<_> = (0..cfg.samples)
            .map(|_| synthetic_scene(cfg.scene_n, &mut rng))
            .collect();
        let targets = scenes
            .iter()
            .map(|s| render_signed(s, &teacher))
            .collect::<Result<_>>()?;
        Ok(E2eModel {
            cfg,
            propagator,
            aperture,
            power,
            window,
            scenes,
            targets,
        })
    }

    pub fn config(&self) -> &E2eConfig {
        &self.cfg
    }

    pub fn optical_params(&self) -> u64 {
        (self.cfg.elements * self.cfg.grid_n * self.cfg.grid_n) as u64
    }

    pub fn readout_params(&self) -> u64 {
        self.cfg.elements as u64 + 1
    }

    /// Lens-plus-jitter phases and small random readout weights.
    pub fn init_params(&self) -> Result<E2eParams> {
        let grid = *self.aperture.grid();
        let lens = make_lens_phase(grid, &self.cfg.optical, self.cfg.optical.sensor_distance_m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
        let phases = (0..self.cfg.elements)
            .map(|_| lens.values().mapv(|p| p + rng.random_range(-0.1..=0.1)))
            .collect();
        let mut readout: Vec<f64> = (0..self.cfg.elements)
            .map(|_| rng.random_range(-0.2..0.2))
            .collect();
        readout.push(0.0);
        Ok(E2eParams { phases, readout })
    }

    pub fn batch_for_step(&self, step: usize) -> Vec<usize> {
        (0..self.cfg.batch)
            .map(|b| (step * self.cfg.batch + b) % self.cfg.samples)
            .collect()
    }

    fn crop(&self, psf: &Array2<f64>) -> Array2<f64> {
        let (r0, c0) = self.window;
        let k = self.cfg.kernel_k;
        psf.slice(s![r0..r0 + k, c0..c0 + k]).to_owned() / self.power
    }

    fn check(&self, params: &E2eParams) -> Result<()> {
        if params.phases.len() != self.cfg.elements || params.readout.len() != self.cfg.elements + 1 {
            return Err(Error::Validation(format!(
                "expected {} phase maps and {} readout values",
                self.cfg.elements,
                self.cfg.elements + 1
            )));
        }
        Ok(())
    }

    /// Mean squared error over the batch; optionally the full gradient.
    pub fn loss_and_grad(
        &self,
        params: &E2eParams,
        batch: &[usize],
        want_grad: bool,
    ) -> Result<(f64, Option<E2eGradient>)> {
        self.check(params)?;
        let grid = *self.aperture.grid();
        let k = self.cfg.kernel_k;
        let evals = params
            .phases
            .iter()
            .map(|p| {
                evaluate(
                    &self.propagator,
                    &PhaseProfile::new(grid, p.clone())?,
                    &self.aperture,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let kernels: Vec<Array2<f64>> = evals.iter().map(|e| self.crop(&e.psf)).collect();

        // measurements[b][e]
        let measurements = batch
            .iter()
            .map(|&i| {
                kernels
                    .iter()
                    .map(|h| render_signed(&self.scenes[i], h))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let bias = params.readout[self.cfg.elements];
        let residuals: Vec<Array2<f64>> = batch
            .iter()
            .zip(&measurements)
            .map(|(&i, meas)| {
                let mut pred = Array2::from_elem(self.targets[i].dim(), bias);
                for (w, m) in params.readout.iter().zip(meas) {
                    pred.scaled_add(*w, m);
                }
                pred - &self.targets[i]
            })
            .collect();
        let n = residuals.iter().map(|r| r.len()).sum::<usize>() as f64;
        let loss = residuals
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / n;
        if !want_grad {
            return Ok((loss, None));
        }

        let mut readout_grad = vec![0.0; self.cfg.elements + 1];
        let mut kernel_grads = vec![Array2::<f64>::zeros((k, k)); self.cfg.elements];
        for ((&i, meas), r) in batch.iter().zip(&measurements).zip(&residuals) {
            let g = r * (2.0 / n);
            readout_grad[self.cfg.elements] += g.sum();
            let scene = &self.scenes[i];
            let (out_h, out_w) = g.dim();
            for (e, m) in meas.iter().enumerate() {
                readout_grad[e] += (&g * m).sum();
                let w = params.readout[e];
                let kg = &mut kernel_grads[e];
                for a in 0..k {
                    for b in 0..k {
                        let patch =
                            scene.slice(s![k - 1 - a..k - 1 - a + out_h, k - 1 - b..k - 1 - b + out_w]);
                        kg[[a, b]] += w * (&g * &patch).sum();
                    }
                }
            }
        }
        let (r0, c0) = self.window;
        let phases = evals
            .iter()
            .zip(&kernel_grads)
            .map(|(eval, kg)| {
                let mut weight = Array2::zeros(eval.psf.dim());
                weight
                    .slice_mut(s![r0..r0 + k, c0..c0 + k])
                    .assign(&(kg / self.power));
                intensity_vjp(&self.propagator, eval, &weight)
            })
            .collect();
        Ok((
            loss,
            Some(E2eGradient {
                phases,
                readout: readout_grad,
            }),
        ))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = &'a f64>) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eReport {
    pub config: E2eConfig,
    pub loss_curve: Vec<f64>,
    pub mean_step_ms: f64,
    pub optical_params: u64,
    pub readout_params: u64,
    pub total_params: u64,
}

/// One optimizer step; returns the pre-update loss.
fn train_step(
    model: &E2eModel,
    params: &mut E2eParams,
    phase_opt: &mut Adam,
    readout_opt: &mut Adam,
    step: usize,
) -> Result<f64> {
    let batch = model.batch_for_step(step);
    let (loss, grad) = model.loss_and_grad(params, &batch, true)?;
    if !loss.is_finite() {
        let max_phase = params
            .phases
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::Numeric(format!(
            "end-to-end training diverged at step {step}: loss {loss}, max |phase| {max_phase:.3e}, readout {:?}",
            params.readout
        )));
    }
    let grad = grad.expect("gradient requested");
    phase_opt.step(
        params.phases.iter_mut().flat_map(|p| p.iter_mut()),
        grad.phases.iter().flat_map(|g| g.iter()),
    );
    readout_opt.step(params.readout.iter_mut(), grad.readout.iter());
    Ok(loss)
}

/// Jointly trains all phases and the readout for `cfg.steps` steps.
pub fn e2e_toy_train(cfg: &E2eConfig) -> Result<E2eReport> {
    let model = E2eModel::new(cfg.clone())?;
    let mut params = model.init_params()?;
    let n_phase = cfg.elements * cfg.grid_n * cfg.grid_n;
    let mut phase_opt = Adam::new(n_phase, cfg.lr_phase);
    let mut readout_opt = Adam::new(cfg.elements + 1, cfg.lr_readout);
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let start = Instant::now();
    for step in 0..cfg.steps {
        curve.push(train_step(
            &model,
            &mut params,
            &mut phase_opt,
            &mut readout_opt,
            step,
        )?);
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let (final_loss, _) = model.loss_and_grad(&params, &model.batch_for_step(0), false)?;
    curve.push(final_loss);
    Ok(E2eReport {
        config: cfg.clone(),
        mean_step_ms: if cfg.steps > 0 {
            elapsed / cfg.steps as f64
        } else {
            0.0
        },
        loss_curve: curve,
        optical_params: model.optical_params(),
        readout_params: model.readout_params(),
        total_params: model.optical_params() + model.readout_params(),
    })
}

/// Worst relative error between the analytic end-to-end gradient and central
/// differences, over `n_probes` phase samples per element and every readout
/// value.
pub fn e2e_fd_check(cfg: &E2eConfig, n_probes: usize, step: f64) -> Result<f64> {
    let model = E2eModel::new(cfg.clone())?;
    let mut params = model.init_params()?;
    let batch = model.batch_for_step(0);
    let (_, grad) = model.loss_and_grad(&params, &batch, true)?;
    let grad = grad.expect("gradient requested");
    let open: Vec<(usize, usize)> = model
        .aperture
        .transmittance()
        .indexed_iter()
        .filter(|(_, &t)| t > 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    let central = |params: &mut E2eParams, get: &dyn Fn(&mut E2eParams) -> &mut f64| -> Result<f64> {
        let base = *get(params);
        *get(params) = base + step;
        let up = model.loss_and_grad(params, &batch, false)?.0;
        *get(params) = base - step;
        let down = model.loss_and_grad(params, &batch, false)?.0;
        *get(params) = base;
        Ok((up - down) / (2.0 * step))
    };
    for e in 0..cfg.elements {
        for pick in rand::seq::index::sample(&mut rng, open.len(), n_probes.min(open.len())) {
            let idx = open[pick];
            let numeric = central(&mut params, &move |p: &mut E2eParams| &mut p.phases[e][idx])?;
            worst = worst.max(relative_error(grad.phases[e][idx], numeric));
        }
    }
    for j in 0..=cfg.elements {
        let numeric = central(&mut params, &move |p: &mut E2eParams| &mut p.readout[j])?;
        worst = worst.max(relative_error(grad.readout[j], numeric));
    }
    Ok(worst)
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn time_repeats(repeats: usize, mut step: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..WARMUP {
        step()?;
    }
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            step()?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Wall-clock cost of one forward+backward step in the given mode.
///
/// - `dko`: loss, gain fit and phase gradient for a single metasurface.
/// - `e2e`: one toy training step across all elements and the batch.
/// - `electronic`: the `k × k` convolution layer forward plus kernel gradient.
pub fn time_step(mode: BenchMode, sizes: &BenchSizes, repeats: usize, seed: u64) -> Result<StepTiming> {
    sizes.validate()?;
    if repeats < 3 {
        return Err(Error::Validation(format!(
            "repeats must be at least 3, got {repeats}"
        )));
    }
    let samples = match mode {
        BenchMode::Dko => {
            let optical = OpticalConfig::default();
            let grid = GridSpec::square(sizes.grid_n, 2.5e-6)?;
            let aperture = default_aperture(grid);
            let propagator = Propagator::new(grid, &optical)?;
            let halves = split_taps(&teacher_kernel(sizes.kernel_k));
            let target = embed_target(&halves.plus, *propagator.sensor(), 1)?;
            let lens = make_lens_phase(grid, &optical, optical.sensor_distance_m)?;
            time_repeats(repeats, || {
                let eval = evaluate(&propagator, &lens, &aperture)?;
                let gain = fit_gain([(&eval.psf, target.values())]);
                let loss = squared_error(&eval.psf, target.values(), gain);
                let grad = gradient_at_gain(&propagator, &eval, target.values(), gain);
                std::hint::black_box((loss, grad));
                Ok(())
            })?
        }
        BenchMode::E2e => {
            let model = E2eModel::new(E2eConfig {
                samples: sizes.batch,
                ..E2eConfig::from_sizes(sizes, seed)
            })?;
            let mut params = model.init_params()?;
            let mut phase_opt = Adam::new(sizes.elements * sizes.grid_n * sizes.grid_n, model.cfg.lr_phase);
            let mut readout_opt = Adam::new(sizes.elements + 1, model.cfg.lr_readout);
            let mut step = 0;
            time_repeats(repeats, || {
                train_step(&model, &mut params, &mut phase_opt, &mut readout_opt, step)?;
                step += 1;
                Ok(())
            })?
        }
        BenchMode::Electronic => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = sizes.kernel_k;
            let kernels: Vec<SignedKernel> = (0..sizes.elements / 2)
                .map(|_| {
                    SignedKernel::new(
                        Array2::from_shape_fn((k, k), |_| rng.random_range(-1.0..1.0)),
                        Color::Mono,
                        1.0,
                    )
                })
                .collect::<Result<_>>()?;
            let scenes: Vec<SceneImage> = (0..sizes.batch)
                .map(|_| SceneImage::mono(synthetic_scene(sizes.scene_n, &mut rng)))
                .collect::<Result<_>>()?;
            time_repeats(repeats, || {
                let mut grads = vec![Array2::<f64>::zeros((k, k)); kernels.len()];
                for scene in &scenes {
                    let features = electronic_conv(scene, &kernels, 1, Padding::Valid)?;
                    let img = &scene.channels()[0];
                    for (f, g) in features.channels.iter().zip(&mut grads) {
                        let (h, w) = f.dim();
                        for a in 0..k {
                            for b in 0..k {
                                let patch = img.slice(s![k - 1 - a..k - 1 - a + h, k - 1 - b..k - 1 - b + w]);
                                g[[a, b]] += (f * &patch).sum();
                            }
                        }
                    }
                }
                std::hint::black_box(grads);
                Ok(())
            })?
        }
    };
    let (mean_ms, std_ms) = mean_std(&samples);
    Ok(StepTiming {
        mode,
        sizes: *sizes,
        mean_ms,
        std_ms,
        iterations_timed: samples.len(),
        warmup_iterations: WARMUP,
    })
}

/// End-to-end over DKO per-step cost reported for the original hardware.
pub const REFERENCE_STEP_RATIO: f64 = 730.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub timings: Vec<StepTiming>,
    /// e2e / dko mean step time, when both were measured.
    pub measured_ratio: Option<f64>,
    pub reference_ratio: f64,
    /// `measured_ratio · e2e_steps / dko_steps`; a projection, not a measurement.
    pub projected_convergence_ratio: Option<f64>,
    pub dko_steps: usize,
    pub e2e_steps: usize,
}

pub fn run_bench(
    modes: &[BenchMode],
    sizes: &BenchSizes,
    repeats: usize,
    seed: u64,
    dko_steps: usize,
    e2e_steps: usize,
) -> Result<BenchReport> {
    let timings = modes
        .iter()
        .map(|&m| time_step(m, sizes, repeats, seed))
        .collect::<Result<Vec<_>>>()?;
    let find = |m| timings.iter().find(|t| t.mode == m).map(|t| t.mean_ms);
    let measured_ratio = find(BenchMode::E2e).zip(find(BenchMode::Dko)).map(|(e, d)| e / d);
    Ok(BenchReport {
        measured_ratio,
        reference_ratio: REFERENCE_STEP_RATIO,
        projected_convergence_ratio: measured_ratio
            .filter(|_| dko_steps > 0)
            .map(|r| r * e2e_steps as f64 / dko_steps as f64),
        dko_steps,
        e2e_steps,
        timings,
    })
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>12} {:>10} {:>6}",
            "mode", "mean_ms", "std_ms", "runs"
        )?;
        for t in &self.timings {
            writeln!(
                f,
                "{:<12} {:>12.3} {:>10.3} {:>6}",
                t.mode.to_string(),
                t.mean_ms,
                t.std_ms,
                t.iterations_timed
            )?;
        }
        if let Some(r) = self.measured_ratio {
            writeln!(
                f,
                "e2e/dko step ratio: {r:.1}x (reference hardware: {:.0}x)",
                self.reference_ratio
            )?;
        }
        if let Some(p) = self.projected_convergence_ratio {
            writeln!(
                f,
                "projected convergence ratio: {p:.1}x ({} e2e vs {} dko steps)",
                self.e2e_steps, self.dko_steps
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{plan_array, ColorMode};

    #[test]
    fn reference_scale_accounting() {
        let plan = plan_array(64, ColorMode::RgbSigned).unwrap();
        let grid = GridSpec::square(1025, 2.5e-6).unwrap();
        let acc = count_parameters(&plan, &grid, 64, 3, 7).unwrap();
        assert_eq!(acc.elements, 384);
        assert_eq!(acc.optical_params, 403_440_000);
        assert_eq!(acc.electronic_first_layer_params, 9_408);
        assert_eq!(human_count(acc.optical_params), "403M");
        assert_eq!(human_count(acc.electronic_first_layer_params), "9k");
    }

    #[test]
    fn smallest_accounting_case() {
        let plan = plan_array(1, ColorMode::MonoSigned).unwrap();
        let grid = GridSpec::square(2, 1e-6).unwrap();
        let acc = count_parameters(&plan, &grid, 1, 1, 1).unwrap();
        assert_eq!((acc.optical_params, acc.electronic_first_layer_params), (8, 1));
        assert!(count_parameters(&plan, &grid, 2, 1, 1).is_err());
        assert!(count_parameters(&plan, &grid, 1, 3, 1).is_err());
    }

    #[test]
    fn micro_end_to_end_gradient_matches_finite_differences() {
        let worst = e2e_fd_check(&E2eConfig::micro(), 16, 1e-5).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn small_end_to_end_run_learns() {
        let cfg = E2eConfig {
            grid_n: 32,
            elements: 2,
            kernel_k: 5,
            scene_n: 24,
            batch: 2,
            samples: 16,
            steps: 60,
            ..E2eConfig::default()
        };
        let report = e2e_toy_train(&cfg).unwrap();
        assert!(report.loss_curve.last().unwrap() < &report.loss_curve[0]);
        assert_eq!(report.total_params, 2 * 32 * 32 + 3);
        let again = e2e_toy_train(&cfg).unwrap();
        assert_eq!(report.loss_curve, again.loss_curve);
    }

    #[test]
    fn e2e_param_count_matches_accounting() {
        let cfg = E2eConfig {
            grid_n: 16,
            elements: 2,
            kernel_k: 3,
            scene_n: 8,
            samples: 2,
            ..E2eConfig::default()
        };
        let model = E2eModel::new(cfg).unwrap();
        let plan = plan_array(1, ColorMode::MonoSigned).unwrap();
        let acc = count_parameters(&plan, &GridSpec::square(16, 2.5e-6).unwrap(), 1, 1, 3).unwrap();
        assert_eq!(model.optical_params(), acc.optical_params);
    }

    #[test]
    fn timing_validates_and_reports() {
        let sizes = BenchSizes {
            grid_n: 16,
            elements: 2,
            scene_n: 12,
            kernel_k: 3,
            batch: 1,
        };
        assert!(time_step(BenchMode::Dko, &sizes, 2, 0).is_err());
        for mode in [BenchMode::Dko, BenchMode::E2e, BenchMode::Electronic] {
            let t = time_step(mode, &sizes, 3, 0).unwrap();
            assert_eq!(t.iterations_timed, 3);
            assert!(t.mean_ms > 0.0);
        }
        assert!("gpu".parse::<BenchMode>().is_err());
    }

    #[test]
    fn dko_step_cost_grows_with_grid() {
        let at = |n| {
            let sizes = BenchSizes {
                grid_n: n,
                ..BenchSizes::default()
            };
            time_step(BenchMode::Dko, &sizes, 5, 0).unwrap().mean_ms
        };
        let (small, large) = (at(64), at(256));
        // Sixteen times the samples: anything under four times would be sublinear in side length.
        assert!(large > 4.0 * small, "64²: {small} ms, 256²: {large} ms");
    }
}
