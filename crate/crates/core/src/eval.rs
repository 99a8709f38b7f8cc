//! Kernel-match metrics and standard monocular depth metrics.
//!
//! Kernel RMSE and MAE are computed after scaling both kernels to unit L2
//! norm, so they are comparable across kernels of different magnitude.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelMatchReport {
    /// Zero-mean normalized cross correlation; `None` when either input is
    /// constant and the correlation is undefined.
    pub ncc: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

fn unit_norm(a: &Array2<f64>) -> Array2<f64> {
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        a / norm
    } else {
        a.clone()
    }
}

pub fn ncc(realized: &Array2<f64>, target: &Array2<f64>) -> Option<f64> {
    let n = realized.len() as f64;
    let (mean_a, mean_b) = (realized.sum() / n, target.sum() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    Zip::from(realized).and(target).for_each(|&a, &b| {
        let (da, db) = (a - mean_a, b - mean_b);
        ab += da * db;
        aa += da * da;
        bb += db * db;
    });
    if aa > 0.0 && bb > 0.0 {
        Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    }
}

pub fn kernel_metrics(realized: &Array2<f64>, target: &Array2<f64>) -> Result<KernelMatchReport> {
    ensure_shape("realized vs target kernel", target.shape(), realized.shape())?;
    if realized.is_empty() {
        return Err(Error::Validation("empty kernels".into()));
    }
    let (a, b) = (unit_norm(realized), unit_norm(target));
    let n = a.len() as f64;
    let (mut sq, mut abs) = (0.0, 0.0);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let d = x - y;
        sq += d * d;
        abs += d.abs();
    });
    Ok(KernelMatchReport {
        ncc: ncc(realized, target),
        rmse: (sq / n).sqrt(),
        mae: abs / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAverages {
    /// Mean over reports with a defined NCC.
    pub ncc: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
    pub ncc_count: usize,
}

pub fn layer_metrics(reports: &[KernelMatchReport]) -> Result<LayerAverages> {
    if reports.is_empty() {
        return Err(Error::Validation("no kernel reports to average".into()));
    }
    let n = reports.len() as f64;
    let nccs: Vec<f64> = reports.iter().filter_map(|r| r.ncc).collect();
    Ok(LayerAverages {
        ncc: (!nccs.is_empty()).then(|| nccs.iter().sum::<f64>() / nccs.len() as f64),
        rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
        mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
        count: reports.len(),
        ncc_count: nccs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricReport {
    pub absrel: f64,
    pub sqrel: f64,
    pub rmse_m: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: usize,
}

/// Standard KITTI depth metrics over pixels where `mask` is true.
pub fn depth_metrics(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> Result<DepthMetricReport> {
    ensure_shape("prediction vs ground truth", gt.shape(), pred.shape())?;
    ensure_shape("mask vs ground truth", gt.shape(), mask.shape())?;

    let mut count = 0usize;
    let (mut absrel, mut sqrel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for ((&p, &g), &valid) in pred.iter().zip(gt.iter()).zip(mask.iter()) {
        if !valid {
            continue;
        }
        if !(p > 0.0 && g > 0.0 && p.is_finite() && g.is_finite()) {
            return Err(Error::Validation(format!(
                "depths must be positive and finite on the mask (pred {p}, gt {g})"
            )));
        }
        count += 1;
        let d = p - g;
        absrel += d.abs() / g;
        sqrel += d * d / g;
        sq += d * d;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (hit, &th) in hits.iter_mut().zip(&thresholds) {
            if ratio < th {
                *hit += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("depth mask selects no pixels".into()));
    }
    let n = count as f64;
    Ok(DepthMetricReport {
        absrel: absrel / n,
        sqrel: sqrel / n,
        rmse_m: (sq / n).sqrt(),
        rms_log: (sq_log / n).sqrt(),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        valid_pixels: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_match_is_perfect() {
        let k = array![[0.1, 0.5, 0.2], [0.3, 1.0, -0.4], [0.0, 0.2, 0.1]];
        let r = kernel_metrics(&k, &k).unwrap();
        assert!((r.ncc.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.mae, 0.0);
        let anti = kernel_metrics(&(-&k), &k).unwrap();
        assert!((anti.ncc.unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn four_sample_hand_computed_case() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[1.0, 2.0], [3.0, 5.0]];
        let r = kernel_metrics(&a, &b).unwrap();
        // Means 2.5 and 2.75; deviations (-1.5,-0.5,0.5,1.5) and (-1.75,-0.75,0.25,2.25).
        let ab = 2.625 + 0.375 + 0.125 + 3.375;
        let expected_ncc = ab / (5.0f64.sqrt() * 8.75f64.sqrt());
        assert!((r.ncc.unwrap() - expected_ncc).abs() < 1e-12);
        // Unit-norm versions: a/√30, b/√39.
        let (na, nb) = (30f64.sqrt(), 39f64.sqrt());
        let diffs = [
            1.0 / na - 1.0 / nb,
            2.0 / na - 2.0 / nb,
            3.0 / na - 3.0 / nb,
            4.0 / na - 5.0 / nb,
        ];
        let rmse = (diffs.iter().map(|d| d * d).sum::<f64>() / 4.0).sqrt();
        let mae = diffs.iter().map(|d| d.abs()).sum::<f64>() / 4.0;
        assert!((r.rmse - rmse).abs() < 1e-12);
        assert!((r.mae - mae).abs() < 1e-12);
    }

    #[test]
    fn constant_target_has_undefined_ncc() {
        let r = kernel_metrics(&array![[1.0, 2.0]], &array![[3.0, 3.0]]).unwrap();
        assert!(r.ncc.is_none());
        assert!(r.rmse > 0.0);
        assert!(kernel_metrics(&array![[1.0]], &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn ncc_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((7, 7), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((7, 7), |_| rng.random_range(-1.0..1.0));
        let base = ncc(&a, &b).unwrap();
        let moved = ncc(&(a.mapv(|v| 3.7 * v + 11.0)), &(b.mapv(|v| 0.2 * v - 4.0))).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn layer_averages() {
        let one = KernelMatchReport {
            ncc: Some(1.0),
            rmse: 0.0,
            mae: 0.0,
        };
        let zero = KernelMatchReport {
            ncc: Some(0.0),
            rmse: 1.0,
            mae: 1.0,
        };
        let single = layer_metrics(&[one]).unwrap();
        assert_eq!((single.ncc, single.rmse, single.mae), (Some(1.0), 0.0, 0.0));
        let avg = layer_metrics(&[one, zero]).unwrap();
        assert_eq!((avg.ncc, avg.rmse, avg.mae), (Some(0.5), 0.5, 0.5));
        assert!(layer_metrics(&[]).is_err());
    }

    #[test]
    fn perfect_depth() {
        let gt = array![[1.0, 2.0], [10.0, 80.0]];
        let r = depth_metrics(&gt, &gt, &Array2::from_elem((2, 2), true)).unwrap();
        assert_eq!(
            (r.absrel, r.sqrel, r.rmse_m, r.rms_log, r.delta1, r.delta2, r.delta3),
            (0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn uniform_overestimate_closed_form() {
        let gt = array![[1.0, 2.5], [7.0, 40.0]];
        let pred = gt.mapv(|g| 1.2 * g);
        let r = depth_metrics(&pred, &gt, &Array2::from_elem((2, 2), true)).unwrap();
        assert!((r.absrel - 0.2).abs() < 1e-12);
        assert_eq!(r.delta1, 1.0);
        assert!((r.rms_log - 1.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn delta_is_symmetric_but_absrel_is_not() {
        let gt = array![[1.0, 2.0, 3.0]];
        let pred = array![[1.5, 1.0, 3.1]];
        let m = Array2::from_elem((1, 3), true);
        let a = depth_metrics(&pred, &gt, &m).unwrap();
        let b = depth_metrics(&gt, &pred, &m).unwrap();
        assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
        assert!((a.absrel - b.absrel).abs() > 1e-3);
        assert!((a.rms_log - b.rms_log).abs() < 1e-15);
    }

    #[test]
    fn masked_pixels_never_matter() {
        let gt = array![[1.0, 2.0], [3.0, 4.0]];
        let pred = array![[1.1, 2.5], [2.0, 4.0]];
        let mask = array![[true, false], [true, true]];
        let a = depth_metrics(&pred, &gt, &mask).unwrap();
        let mut pred2 = pred.clone();
        pred2[[0, 1]] = -7.0;
        let mut gt2 = gt.clone();
        gt2[[0, 1]] = 0.0;
        let b = depth_metrics(&pred2, &gt2, &mask).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.valid_pixels, 3);
    }

    #[test]
    fn invalid_depths_are_rejected() {
        let m = Array2::from_elem((1, 2), true);
        assert!(depth_metrics(&array![[1.0, 0.0]], &array![[1.0, 1.0]], &m).is_err());
        assert!(depth_metrics(
            &array![[1.0, 1.0]],
            &array![[1.0, 1.0]],
            &Array2::from_elem((1, 2), false)
        )
        .is_err());
    }
}
