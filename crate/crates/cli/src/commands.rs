use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use metaforge::adjoint::{evaluate, gradient_at_gain};
use metaforge::bench::{count_parameters, human_count, run_bench, BenchMode, BenchSizes};
use metaforge::capture::{electronic_conv, simulate_capture, OpticalPair, Padding, SceneImage};
use metaforge::dko::{layer_targets, optimize_layer, DkoResult, StopReason};
use metaforge::eval::{depth_metrics, kernel_metrics, layer_metrics, KernelMatchReport, LayerAverages};
use metaforge::fieldcore::{make_circular_aperture, GridSpec, PhaseProfile};
use metaforge::kernels::{
    collapse_to_taps, export_first_layer, import_first_layer, plan_array, split_signed, ArrayPlan, Color,
    ColorMode, Sign, SignedKernel,
};
use metaforge::propagate::{crop_psf, sensor_grid, Propagator, Psf};
use metaforge::selftest::run_selftest;
use metaforge::tensorio::{
    load_array2, load_config, load_image, load_tensor, save_array, save_pgm_preview, write_csv,
    write_loss_curves, write_report, RunConfig,
};
use metaforge::{Error, Result};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::args::*;

pub struct Outcome {
    pub report_path: PathBuf,
    pub report: serde_json::Value,
    pub summary: String,
    /// Non-zero when the command ran to completion but some part failed.
    pub exit_code: i32,
}

fn outcome<T: Serialize>(
    report_path: PathBuf,
    command: &str,
    config: Option<&RunConfig>,
    result: &T,
    summary: String,
    exit_code: i32,
) -> Result<Outcome> {
    write_report(&report_path, command, config, result)?;
    let report = serde_json::json!({
        "format_version": metaforge::tensorio::FORMAT_VERSION,
        "command": command,
        "config": config,
        "result": result,
    });
    Ok(Outcome {
        report_path,
        report,
        summary,
        exit_code,
    })
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.dko.seed = seed;
        cfg.capture.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

fn load_kernels(
    path: &Path,
    plan: Option<ColorMode>,
    tap_pitch_m: f64,
) -> Result<(Vec<SignedKernel>, ArrayPlan)> {
    let (tensor, header) = load_tensor(path)?;
    if header.shape.len() != 4 {
        return Err(Error::Unsupported(format!(
            "{}: first-layer tensor must be [L, C, k, k], found shape {:?}",
            path.display(),
            header.shape
        )));
    }
    let (l, c) = (header.shape[0], header.shape[1]);
    let mode = ColorMode::for_input_channels(c)?;
    if let Some(requested) = plan {
        if requested != mode {
            return Err(Error::Validation(format!(
                "plan {requested} needs {} input channels but the tensor has {c}",
                requested.input_channels()
            )));
        }
    }
    let kernels = import_first_layer(tensor.view(), tap_pitch_m)?;
    Ok((kernels, plan_array(l, mode)?))
}

fn worker_count(jobs: Option<usize>) -> usize {
    jobs.filter(|&j| j > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementRow {
    pub index: usize,
    pub output_channel: usize,
    pub color: Color,
    pub sign: Sign,
    pub phase_file: Option<String>,
    pub psf_file: Option<String>,
    pub gain: Option<f64>,
    pub optical_gain: Option<f64>,
    pub iterations: Option<usize>,
    pub stop_reason: Option<StopReason>,
    pub final_loss: Option<f64>,
    pub metrics: Option<KernelMatchReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRow {
    pub pair: usize,
    pub output_channel: usize,
    pub color: Color,
    pub metrics: Option<KernelMatchReport>,
}

/// Everything a later `capture simulate` or `eval kernels` needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerManifest {
    pub plan: ArrayPlan,
    pub kernel_size: usize,
    pub samples_per_tap: usize,
    pub targets_file: String,
    pub jobs: usize,
    pub seed: u64,
    pub elements: Vec<ElementRow>,
    pub pairs: Vec<PairRow>,
    /// Averages over the non-dark halves.
    pub halves: Option<LayerAverages>,
    /// Averages over the composed signed kernels.
    pub composed: Option<LayerAverages>,
    pub failed_elements: usize,
}

const SUMMARY_FILE: &str = "summary.json";

fn read_manifest(dir: &Path) -> Result<(LayerManifest, RunConfig)> {
    #[derive(Deserialize)]
    struct Envelope {
        config: RunConfig,
        result: LayerManifest,
    }
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let env: Envelope = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok((env.result, env.config))
}

fn load_realized_pair(
    dir: &Path,
    manifest: &LayerManifest,
    pair: usize,
    pitch_m: f64,
) -> Result<Option<(Psf, Psf, f64)>> {
    let rows = [&manifest.elements[2 * pair], &manifest.elements[2 * pair + 1]];
    if rows.iter().any(|r| r.error.is_some()) {
        return Ok(None);
    }
    let mut psfs = Vec::with_capacity(2);
    for row in rows {
        let file = row.psf_file.as_ref().ok_or_else(|| Error::Parse {
            path: dir.join(SUMMARY_FILE),
            message: format!("element {} has no PSF file", row.index),
        })?;
        let values = load_array2(dir.join(file))?;
        let (rows_n, cols_n) = values.dim();
        psfs.push(Psf::new(
            metaforge::propagate::SensorGrid {
                n_u: cols_n,
                n_v: rows_n,
                pitch_m,
            },
            values,
        )?);
    }
    let minus = psfs.pop().expect("two halves");
    let plus = psfs.pop().expect("two halves");
    Ok(Some((plus, minus, rows[0].gain.unwrap_or(0.0))))
}

fn realized_signed_taps(plus: &Psf, minus: &Psf, alpha: f64, k: usize, spt: usize) -> Result<Array2<f64>> {
    collapse_to_taps(&((plus.values() - minus.values()) * alpha), k, spt)
}

pub fn dko_optimize(args: &OptimizeArgs) -> Result<Outcome> {
    let mut cfg = run_config(&args.config)?;
    if let Some(max_iters) = args.max_iters {
        cfg.dko.max_iters = max_iters;
    }
    cfg.validate()?;
    let optical = cfg.optical()?;
    let grid = cfg.grid()?;
    let aperture = cfg.aperture()?;
    optical.paraxial_warning(&grid);
    let sensor = sensor_grid(&optical, &grid);
    let spt = cfg.capture.samples_per_tap;
    let (kernels, plan) = load_kernels(&args.kernels, args.plan, sensor.pitch_m * spt as f64)?;
    let k = kernels[0].size();
    let targets = layer_targets(&kernels, &plan, sensor, spt)?;
    let jobs = worker_count(args.jobs);
    log::info!(
        "optimizing {} elements on a {}x{} grid with {jobs} workers",
        plan.len(),
        grid.n_x(),
        grid.n_y()
    );

    create_dir(&args.out)?;
    let outcomes = optimize_layer(&targets, &aperture, &optical, &cfg.dko, jobs)?;
    let propagator = if args.dump_grad {
        Some(Propagator::new(grid, &optical)?)
    } else {
        None
    };

    let mut elements = Vec::with_capacity(plan.len());
    let mut curves: Vec<(usize, Vec<f64>)> = Vec::new();
    for (element, outcome) in plan.elements.iter().zip(&outcomes) {
        let mut row = ElementRow {
            index: element.index,
            output_channel: element.output_channel,
            color: element.color,
            sign: element.sign,
            phase_file: None,
            psf_file: None,
            gain: None,
            optical_gain: None,
            iterations: None,
            stop_reason: None,
            final_loss: None,
            metrics: None,
            error: None,
        };
        match outcome {
            Ok(result) => {
                let phase_file = format!("phase_{:04}.npy", element.index);
                let psf_file = format!("psf_{:04}.npy", element.index);
                save_array(args.out.join(&phase_file), result.phase.values())?;
                save_array(args.out.join(&psf_file), result.realized_psf.values())?;
                if let Some(prop) = &propagator {
                    let pair = element.index / 2;
                    let target = match element.sign {
                        Sign::Plus => &targets[pair].plus,
                        Sign::Minus => &targets[pair].minus,
                    };
                    let eval = evaluate(prop, &result.phase, &aperture)?;
                    let grad = gradient_at_gain(prop, &eval, target.values(), result.gain);
                    save_array(args.out.join(format!("grad_{:04}.npy", element.index)), &grad)?;
                }
                curves.push((element.index, result.loss_curve.clone()));
                row.phase_file = Some(phase_file);
                row.psf_file = Some(psf_file);
                row.gain = Some(result.gain);
                row.optical_gain = Some(result.optical_gain());
                row.iterations = Some(result.iterations_run);
                row.stop_reason = Some(result.stop_reason);
                row.final_loss = Some(result.final_loss());
                row.metrics = result.kernel_metrics;
            }
            Err(failure) => row.error = Some(failure.message.clone()),
        }
        elements.push(row);
    }
    write_loss_curves(
        args.out.join("loss_curves.csv"),
        curves.iter().map(|(i, c)| (*i, c.as_slice())),
    )?;
    let targets_file = "targets.npy".to_string();
    save_array(
        args.out.join(&targets_file),
        &export_first_layer(&kernels, plan.output_channels)?,
    )?;

    let mut pairs = Vec::with_capacity(plan.pair_count());
    for (p, kernel) in kernels.iter().enumerate() {
        let (plus, minus) = (&outcomes[2 * p], &outcomes[2 * p + 1]);
        let metrics = match (plus, minus) {
            (Ok(a), Ok(b)) => Some(composed_metrics(a, b, kernel, k, spt)?),
            _ => None,
        };
        let (el, _) = plan.pair_elements(p);
        pairs.push(PairRow {
            pair: p,
            output_channel: el.output_channel,
            color: el.color,
            metrics,
        });
    }
    let half_reports: Vec<KernelMatchReport> = elements.iter().filter_map(|r| r.metrics).collect();
    let pair_reports: Vec<KernelMatchReport> = pairs.iter().filter_map(|r| r.metrics).collect();
    let failed = elements.iter().filter(|r| r.error.is_some()).count();
    let manifest = LayerManifest {
        plan,
        kernel_size: k,
        samples_per_tap: spt,
        targets_file,
        jobs,
        seed: cfg.dko.seed,
        halves: layer_metrics(&half_reports).ok(),
        composed: layer_metrics(&pair_reports).ok(),
        failed_elements: failed,
        elements,
        pairs,
    };

    let mut summary = String::new();
    writeln!(
        summary,
        "{:>5} {:>3} {:>2} {:>5} {:>9} {:>9} {:>10} {:>6}",
        "elem", "ch", "c", "sign", "ncc", "rmse", "gain", "iters"
    )
    .ok();
    for r in &manifest.elements {
        let ncc = r
            .metrics
            .and_then(|m| m.ncc)
            .map_or("-".into(), |v| format!("{v:.4}"));
        let rmse = r.metrics.map_or("-".into(), |m| format!("{:.5}", m.rmse));
        writeln!(
            summary,
            "{:>5} {:>3} {:>2} {:>5} {:>9} {:>9} {:>10} {:>6}{}",
            r.index,
            r.output_channel,
            format!("{:?}", r.color).to_lowercase(),
            if r.sign == Sign::Plus { "+" } else { "-" },
            ncc,
            rmse,
            r.gain.map_or("-".into(), |g| format!("{g:.3e}")),
            r.iterations.map_or("-".into(), |i| i.to_string()),
            r.error
                .as_ref()
                .map_or(String::new(), |e| format!("  FAILED: {e}"))
        )
        .ok();
    }
    if let Some(avg) = &manifest.composed {
        writeln!(
            summary,
            "signed kernels: mean ncc {} rmse {:.5} mae {:.5} over {}",
            avg.ncc.map_or("-".into(), |v| format!("{v:.4}")),
            avg.rmse,
            avg.mae,
            avg.count
        )
        .ok();
    }
    let exit = if failed > 0 { 2 } else { 0 };
    outcome(
        args.out.join(SUMMARY_FILE),
        "dko optimize",
        Some(&cfg),
        &manifest,
        summary,
        exit,
    )
}

fn composed_metrics(
    plus: &DkoResult,
    minus: &DkoResult,
    kernel: &SignedKernel,
    k: usize,
    spt: usize,
) -> Result<KernelMatchReport> {
    let realized = realized_signed_taps(&plus.realized_psf, &minus.realized_psf, plus.gain, k, spt)?;
    kernel_metrics(&realized, kernel.taps())
}

pub fn dko_render_psf(args: &RenderPsfArgs) -> Result<Outcome> {
    let cfg = run_config(&args.config)?;
    let optical = cfg.optical()?;
    let values = load_array2(&args.phase)?;
    let (rows, cols) = values.dim();
    let grid = GridSpec::new(cols, rows, cfg.pitch_m)?;
    let aperture = make_circular_aperture(grid, cfg.aperture_diameter_m.unwrap_or(grid.min_extent_m()))?;
    optical.paraxial_warning(&grid);
    let phase = PhaseProfile::new(grid, values)?;
    let modulation = metaforge::fieldcore::make_modulation(&phase, &aperture)?;
    let psf = metaforge::propagate::fresnel_psf(&modulation, &optical)?;
    let total = psf.total();
    let (psf, discarded) = match args.crop {
        Some(w) => {
            let c = crop_psf(&psf, w, w)?;
            (c.psf, c.discarded_fraction)
        }
        None => (psf, 0.0),
    };
    save_array(&args.out, psf.values())?;
    let preview = sibling(&args.out, "pgm");
    save_pgm_preview(&preview, psf.values())?;

    #[derive(Serialize)]
    struct RenderReport {
        psf_file: PathBuf,
        preview_file: PathBuf,
        shape: Vec<usize>,
        sensor_pitch_m: f64,
        total_power: f64,
        transmitted_power: f64,
        discarded_fraction: f64,
    }
    let report = RenderReport {
        psf_file: args.out.clone(),
        preview_file: preview,
        shape: psf.values().shape().to_vec(),
        sensor_pitch_m: psf.sensor().pitch_m,
        total_power: total,
        transmitted_power: modulation.power(),
        discarded_fraction: discarded,
    };
    let summary = format!(
        "PSF {:?} at {:.4e} m pitch, power {:.6e} ({:.3}% outside window)\n",
        report.shape,
        report.sensor_pitch_m,
        total,
        100.0 * discarded
    );
    outcome(
        sibling(&args.out, "json"),
        "dko render-psf",
        Some(&cfg),
        &report,
        summary,
        0,
    )
}

pub fn kernels_split(args: &SplitArgs) -> Result<Outcome> {
    let (kernels, plan) = load_kernels(&args.kernels, args.plan, 1.0)?;
    create_dir(&args.out)?;

    #[derive(Serialize)]
    struct SplitRow {
        pair: usize,
        output_channel: usize,
        color: Color,
        plus_index: usize,
        minus_index: usize,
        plus_file: String,
        minus_file: String,
        plus_dark: bool,
        minus_dark: bool,
    }
    let mut rows = Vec::new();
    for (p, kernel) in kernels.iter().enumerate() {
        let halves = split_signed(kernel);
        let (plus, minus) = plan.pair_elements(p);
        let plus_file = format!("half_{:04}.npy", plus.index);
        let minus_file = format!("half_{:04}.npy", minus.index);
        save_array(args.out.join(&plus_file), &halves.plus)?;
        save_array(args.out.join(&minus_file), &halves.minus)?;
        rows.push(SplitRow {
            pair: p,
            output_channel: plus.output_channel,
            color: plus.color,
            plus_index: plus.index,
            minus_index: minus.index,
            plus_file,
            minus_file,
            plus_dark: halves.plus.iter().all(|&v| v == 0.0),
            minus_dark: halves.minus.iter().all(|&v| v == 0.0),
        });
    }
    let plan_text = serde_json::to_string_pretty(&plan).map_err(|e| Error::Numeric(e.to_string()))?;
    metaforge::tensorio::write_atomic(&args.out.join("plan.json"), plan_text.as_bytes())?;
    let dark = rows
        .iter()
        .map(|r| r.plus_dark as usize + r.minus_dark as usize)
        .sum::<usize>();
    let summary = format!(
        "{} kernels -> {} elements ({}), {dark} dark halves\n",
        kernels.len(),
        plan.len(),
        plan.color_mode
    );
    let result = serde_json::json!({ "plan": plan, "pairs": rows });
    outcome(
        args.out.join("split.json"),
        "kernels split",
        None,
        &result,
        summary,
        0,
    )
}

fn load_scene(path: &Path) -> Result<SceneImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let channels = match ext.as_str() {
        "pgm" | "ppm" | "pnm" => load_image(path)?,
        _ => {
            let (tensor, header) = load_tensor(path)?;
            match header.shape.as_slice() {
                [_, _] => vec![tensor.into_dimensionality().expect("checked rank")],
                [_, _, 3] => {
                    let t: Array3<f64> = tensor.into_dimensionality().expect("checked rank");
                    t.axis_iter(Axis(2)).map(|c| c.to_owned()).collect()
                }
                shape => {
                    return Err(Error::Unsupported(format!(
                        "{}: scene must be [H, W] or [H, W, 3], found {shape:?}",
                        path.display()
                    )))
                }
            }
        }
    };
    SceneImage::new(channels)
}

pub fn capture_simulate(args: &SimulateArgs) -> Result<Outcome> {
    let (manifest, design_cfg) = read_manifest(&args.results)?;
    let pitch_m = sensor_grid(&design_cfg.optical()?, &design_cfg.grid()?).pitch_m;
    let mut cfg = match &args.config.config {
        Some(path) => load_config(path)?,
        None => design_cfg,
    };
    if let Some(seed) = args.config.seed {
        cfg.capture.seed = seed;
        cfg.dko.seed = seed;
    }
    if let Some(noise) = args.noise {
        cfg.capture.noise = noise;
    }
    if let Some(stride) = args.stride {
        cfg.capture.stride = stride;
    }
    if args.quantization_bits.is_some() {
        cfg.capture.quantization_bits = args.quantization_bits;
    }
    cfg.capture.samples_per_tap = manifest.samples_per_tap;
    cfg.capture.validate()?;

    let scene = load_scene(&args.scene)?;
    if scene.channels().len() != manifest.plan.color_mode.input_channels() {
        return Err(Error::Validation(format!(
            "scene has {} channels but the design is {}",
            scene.channels().len(),
            manifest.plan.color_mode
        )));
    }
    let footprint = manifest.kernel_size * manifest.samples_per_tap;
    let mut pairs = Vec::with_capacity(manifest.plan.pair_count());
    for p in 0..manifest.plan.pair_count() {
        let (el, _) = manifest.plan.pair_elements(p);
        let (plus, minus, alpha) = load_realized_pair(&args.results, &manifest, p, pitch_m)?
            .ok_or_else(|| Error::Validation(format!("pair {p} failed during design; rerun dko optimize")))?;
        let crop = |psf: &Psf| crop_psf(psf, footprint, footprint).map(|c| c.psf);
        let (plus, minus) = (crop(&plus)?, crop(&minus)?);
        pairs.push(if alpha > 0.0 {
            OpticalPair {
                output_channel: el.output_channel,
                color: el.color,
                plus,
                minus,
                gain: 1.0 / alpha,
            }
        } else {
            OpticalPair {
                output_channel: el.output_channel,
                color: el.color,
                plus: Psf::zeros(*plus.sensor()),
                minus: Psf::zeros(*plus.sensor()),
                gain: 1.0,
            }
        });
    }
    let features = simulate_capture(&scene, &pairs, &cfg.capture)?;
    let stacked = ndarray::stack(
        Axis(0),
        &features.channels.iter().map(|c| c.view()).collect::<Vec<_>>(),
    )
    .map_err(|e| Error::Numeric(e.to_string()))?;
    save_array(&args.out, &stacked)?;

    let relative_l2 = if args.compare_electronic {
        if manifest.samples_per_tap != 1 {
            return Err(Error::Unsupported(
                "electronic comparison needs samples_per_tap = 1".into(),
            ));
        }
        let (tensor, _) = load_tensor(args.results.join(&manifest.targets_file))?;
        let kernels = import_first_layer(tensor.view(), 1.0)?;
        let reference = electronic_conv(&scene, &kernels, cfg.capture.stride, Padding::Valid)?;
        Some(features.relative_l2(&reference)?)
    } else {
        None
    };

    #[derive(Serialize)]
    struct CaptureReport {
        features_file: PathBuf,
        shape: Vec<usize>,
        seed: u64,
        noise: String,
        relative_l2_vs_electronic: Option<f64>,
    }
    let report = CaptureReport {
        features_file: args.out.clone(),
        shape: stacked.shape().to_vec(),
        seed: cfg.capture.seed,
        noise: cfg.capture.noise.to_string(),
        relative_l2_vs_electronic: relative_l2,
    };
    let mut summary = format!("features {:?} written to {}\n", report.shape, args.out.display());
    if let Some(r) = relative_l2 {
        writeln!(summary, "relative L2 vs electronic layer: {:.4}%", 100.0 * r).ok();
    }
    outcome(
        sibling(&args.out, "json"),
        "capture simulate",
        Some(&cfg),
        &report,
        summary,
        0,
    )
}

pub fn eval_kernels(args: &EvalKernelsArgs) -> Result<Outcome> {
    let (manifest, cfg) = read_manifest(&args.realized)?;
    let pitch_m = sensor_grid(&cfg.optical()?, &cfg.grid()?).pitch_m;
    let (kernels, plan) = load_kernels(&args.targets, Some(manifest.plan.color_mode), 1.0)?;
    if plan.len() != manifest.plan.len() {
        return Err(Error::Validation(format!(
            "targets describe {} elements but the design has {}",
            plan.len(),
            manifest.plan.len()
        )));
    }
    if kernels[0].size() != manifest.kernel_size {
        return Err(Error::Validation(format!(
            "target kernels are {}x{} but the design used {}",
            kernels[0].size(),
            kernels[0].size(),
            manifest.kernel_size
        )));
    }

    #[derive(Serialize)]
    struct Row {
        pair: usize,
        output_channel: usize,
        color: Color,
        ncc: Option<f64>,
        rmse: Option<f64>,
        mae: Option<f64>,
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (p, kernel) in kernels.iter().enumerate() {
        let (el, _) = plan.pair_elements(p);
        let metrics = match load_realized_pair(&args.realized, &manifest, p, pitch_m)? {
            Some((plus, minus, alpha)) => {
                let realized = realized_signed_taps(
                    &plus,
                    &minus,
                    alpha,
                    manifest.kernel_size,
                    manifest.samples_per_tap,
                )?;
                Some(kernel_metrics(&realized, kernel.taps())?)
            }
            None => None,
        };
        reports.extend(metrics);
        rows.push(Row {
            pair: p,
            output_channel: el.output_channel,
            color: el.color,
            ncc: metrics.and_then(|m| m.ncc),
            rmse: metrics.map(|m| m.rmse),
            mae: metrics.map(|m| m.mae),
        });
    }
    let averages = layer_metrics(&reports)?;
    write_csv(sibling(&args.report, "csv"), &rows)?;
    let summary = format!(
        "{} kernels: mean ncc {} rmse {:.6} mae {:.6}\n",
        averages.count,
        averages.ncc.map_or("undefined".into(), |v| format!("{v:.4}")),
        averages.rmse,
        averages.mae
    );
    let result = serde_json::json!({ "averages": averages, "kernels": rows });
    outcome(
        args.report.clone(),
        "eval kernels",
        Some(&cfg),
        &result,
        summary,
        0,
    )
}

pub fn eval_depth(args: &EvalDepthArgs) -> Result<Outcome> {
    let pred = load_array2(&args.pred)?;
    let gt = load_array2(&args.gt)?;
    let mask = match &args.mask {
        Some(path) => load_array2(path)?.mapv(|v| v != 0.0),
        None => gt.mapv(|v| v > 0.0),
    };
    let report = depth_metrics(&pred, &gt, &mask)?;
    write_csv(sibling(&args.report, "csv"), [report])?;
    let summary = format!(
        "absrel {:.4} sqrel {:.4} rmse {:.4} m rms_log {:.4} d1 {:.4} d2 {:.4} d3 {:.4} ({} px)\n",
        report.absrel,
        report.sqrel,
        report.rmse_m,
        report.rms_log,
        report.delta1,
        report.delta2,
        report.delta3,
        report.valid_pixels
    );
    outcome(args.report.clone(), "eval depth", None, &report, summary, 0)
}

pub fn bench_accounting(args: &AccountingArgs) -> Result<Outcome> {
    let plan = plan_array(args.l, args.plan)?;
    let c = args.c.unwrap_or(args.plan.input_channels());
    let grid = GridSpec::square(args.grid, RunConfig::default().pitch_m)?;
    let account = count_parameters(&plan, &grid, args.l, c, args.k)?;
    let summary = format!(
        "optical: {} elements x {}x{} = {} ({})\nelectronic first layer: {}x{}x{}x{} = {} ({})\nratio: {:.0}x\n",
        account.elements,
        args.grid,
        args.grid,
        account.optical_params,
        human_count(account.optical_params),
        args.l,
        c,
        args.k,
        args.k,
        account.electronic_first_layer_params,
        human_count(account.electronic_first_layer_params),
        account.ratio
    );
    outcome(
        args.report.clone(),
        "bench accounting",
        None,
        &account,
        summary,
        0,
    )
}

fn parse_sizes(entries: &[String]) -> Result<BenchSizes> {
    let mut sizes = BenchSizes::default();
    for entry in entries {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("size entry {entry:?} is not key=value")))?;
        let value: usize = value
            .parse()
            .map_err(|_| Error::Validation(format!("size {key} must be an integer, got {value:?}")))?;
        match key {
            "grid" => sizes.grid_n = value,
            "elements" => sizes.elements = value,
            "scene" => sizes.scene_n = value,
            "k" => sizes.kernel_k = value,
            "batch" => sizes.batch = value,
            _ => {
                return Err(Error::Validation(format!(
                    "unknown size {key:?} (expected grid, elements, scene, k, batch)"
                )))
            }
        }
    }
    sizes.validate()?;
    Ok(sizes)
}

pub fn bench_steps(args: &StepsArgs) -> Result<Outcome> {
    let modes = args
        .modes
        .iter()
        .map(|m| m.parse::<BenchMode>())
        .collect::<Result<Vec<_>>>()?;
    let sizes = parse_sizes(&args.sizes)?;
    let report = run_bench(
        &modes,
        &sizes,
        args.repeats,
        args.seed,
        args.dko_steps,
        args.e2e_steps,
    )?;
    let summary = report.to_string();
    let result = serde_json::json!({ "seed": args.seed, "sizes": sizes, "bench": report });
    outcome(args.out.clone(), "bench steps", None, &result, summary, 0)
}

pub fn selftest(args: &SelftestArgs) -> Result<Outcome> {
    let report = run_selftest(args.seed)?;
    let mut summary = String::new();
    for c in &report.checks {
        writeln!(
            summary,
            "{:<18} {} (worst {:.3e}, tolerance {:.1e})",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.value,
            c.tolerance
        )
        .ok();
    }
    let exit = if report.passed { 0 } else { 2 };
    outcome(args.report.clone(), "selftest", None, &report, summary, exit)
}
