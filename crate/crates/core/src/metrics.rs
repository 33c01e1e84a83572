//! Evaluation metrics over observed pixels (`gt > 0`).
//!
//! Dataset-level numbers are unweighted means of per-image metrics.

use serde::{Deserialize, Serialize};

use crate::data::DepthMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssim::{mask_unobserved, ssim_index, SsimParams};

/// `1.05, 1.10, 1.25, 1.25², 1.25³`
pub const DELTA_THRESHOLDS: [f64; 5] = [1.05, 1.10, 1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

/// Column labels in report order.
pub const METRIC_NAMES: [&str; 8] = ["rmse", "mean", "ssim", "delta_1.05", "delta_1.10", "delta_1.25", "delta_1.25^2", "delta_1.25^3"];

/// Column headers with the preferred direction.
pub const METRIC_HEADERS: [&str; 8] = ["RMSE↓", "Mean↓", "SSIM↑", "δ1.05↑", "δ1.10↑", "δ1.25↑", "δ1.25²↑", "δ1.25³↑"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mean: f64,
    pub ssim: f64,
    /// Fractions for [`DELTA_THRESHOLDS`], in order.
    pub delta: [f64; 5],
    pub pixel_count: usize,
}

impl MetricsReport {
    /// The eight metric values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 8] {
        let d = self.delta;
        [self.rmse, self.mean, self.ssim, d[0], d[1], d[2], d[3], d[4]]
    }
}

fn observed<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<Vec<(f64, f64)>> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            first_name: "prediction".into(),
            first: pred.dims(),
            second_name: "ground truth".into(),
            second: gt.dims(),
        });
    }
    let pairs: Vec<(f64, f64)> = pred
        .values()
        .iter()
        .zip(gt.values())
        .filter(|(_, &g)| g > T::zero())
        .map(|(&p, &g)| (p.as_f64(), g.as_f64()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyObservation("metric ground truth".into()));
    }
    Ok(pairs)
}

pub fn rmse<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<f64> {
    let obs = observed(pred, gt)?;
    let s: f64 = obs.iter().map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((s / obs.len() as f64).sqrt())
}

pub fn mean_error<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<f64> {
    let obs = observed(pred, gt)?;
    Ok(obs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / obs.len() as f64)
}

/// Windowed SSIM with the default 7×7 window and 16 m normalization,
/// identical to the structural training term. Predictions at unobserved
/// pixels are replaced by the ground truth first.
pub fn ssim_metric<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<f64> {
    ssim_metric_with(pred, gt, SsimParams::new(7, 16.0))
}

pub fn ssim_metric_with<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, params: SsimParams) -> Result<f64> {
    observed(pred, gt)?;
    let (h, w) = pred.dims();
    if h < params.window || w < params.window {
        return Err(Error::TooSmall {
            context: "SSIM window".into(),
            height: h,
            width: w,
            min: params.window,
        });
    }
    let p: Vec<f64> = mask_unobserved(pred.values(), gt.values()).iter().map(|v| v.as_f64()).collect();
    let g: Vec<f64> = gt.values().iter().map(|v| v.as_f64()).collect();
    Ok(ssim_index(&p, &g, h, w, params))
}

fn check_positive<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<()> {
    for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        if g > T::zero() && p <= T::zero() {
            return Err(Error::InvalidPrediction { index: i, value: p.as_f64() });
        }
    }
    Ok(())
}

fn delta_fraction(obs: &[(f64, f64)], t: f64) -> f64 {
    let hits = obs.iter().filter(|(p, g)| (p / g).max(g / p) < t).count();
    hits as f64 / obs.len() as f64
}

/// Fraction of observed pixels with `max(pred/gt, gt/pred) < t`.
pub fn delta_metric<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, t: f64) -> Result<f64> {
    if !(t > 1.0) {
        return Err(Error::Range {
            context: "delta threshold".into(),
            value: t,
            min: 1.0,
            max: f64::INFINITY,
        });
    }
    let obs = observed(pred, gt)?;
    check_positive(pred, gt)?;
    Ok(delta_fraction(&obs, t))
}

pub fn evaluate<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<MetricsReport> {
    evaluate_with(pred, gt, SsimParams::new(7, 16.0))
}

pub fn evaluate_with<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, params: SsimParams) -> Result<MetricsReport> {
    let obs = observed(pred, gt)?;
    check_positive(pred, gt)?;
    let n = obs.len() as f64;
    let sq: f64 = obs.iter().map(|(p, g)| (p - g) * (p - g)).sum();
    let ab: f64 = obs.iter().map(|(p, g)| (p - g).abs()).sum();
    Ok(MetricsReport {
        rmse: (sq / n).sqrt(),
        mean: ab / n,
        ssim: ssim_metric_with(pred, gt, params)?,
        delta: DELTA_THRESHOLDS.map(|t| delta_fraction(&obs, t)),
        pixel_count: obs.len(),
    })
}

/// Unweighted mean of per-image reports; `pixel_count` is summed.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::EmptyObservation("metric aggregation".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        rmse: mean(&|r| r.rmse),
        mean: mean(&|r| r.mean),
        ssim: mean(&|r| r.ssim),
        delta: std::array::from_fn(|i| mean(&|r| r.delta[i])),
        pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> DepthMap<f64> {
        DepthMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let gt = d(&[1.0, 2.0, 0.0]);
        let pred = d(&[2.0, 2.0, 5.0]);
        assert!((rmse(&pred, &gt).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_error(&pred, &gt).unwrap(), 0.5);

        let gt = d(&[1.0; 4]);
        let pred = d(&[1.04, 1.2, 1.3, 2.0]);
        let got = DELTA_THRESHOLDS.map(|t| delta_metric(&pred, &gt, t).unwrap());
        assert_eq!(got, [0.25, 0.25, 0.5, 0.75, 0.75]);
    }

    #[test]
    fn perfect_prediction() {
        let gt = DepthMap::new(8, 8, (0..64).map(|i| 1.0 + i as f64 * 0.05).collect()).unwrap();
        let r = evaluate(&gt, &gt).unwrap();
        assert_eq!((r.rmse, r.mean, r.ssim), (0.0, 0.0, 1.0));
        assert_eq!(r.delta, [1.0; 5]);
        assert_eq!(r.pixel_count, 64);
    }

    #[test]
    fn errors() {
        let gt = d(&[1.0, 0.0]);
        assert!(matches!(delta_metric(&d(&[0.0, 1.0]), &gt, 1.25), Err(Error::InvalidPrediction { index: 0, .. })));
        // non-positive predictions at unobserved pixels are fine
        assert!(delta_metric(&d(&[1.0, 0.0]), &gt, 1.25).is_ok());
        assert!(matches!(rmse(&gt, &d(&[0.0, 0.0])), Err(Error::EmptyObservation(_))));
        assert!(delta_metric(&gt, &gt, 1.0).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_is_per_image_mean() {
        let a = MetricsReport {
            rmse: 1.0,
            mean: 0.5,
            ssim: 0.2,
            delta: [0.1, 0.2, 0.3, 0.4, 0.5],
            pixel_count: 10,
        };
        let b = MetricsReport {
            rmse: 3.0,
            mean: 1.5,
            ssim: 0.4,
            delta: [0.3, 0.4, 0.5, 0.6, 0.7],
            pixel_count: 30,
        };
        let m = aggregate(&[a, b]).unwrap();
        assert_eq!(m.rmse, 2.0);
        assert_eq!(m.pixel_count, 40);
        assert!((m.delta[0] - 0.2).abs() < 1e-15);
    }
}
