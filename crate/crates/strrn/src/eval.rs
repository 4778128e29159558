//! Evaluation protocol: inter-pupil-normalized RMSE, cumulative error
//! distribution curves, AUC at a threshold and per-frame error series.

use crate::error::{Error, Result};
use crate::shape::{ComponentPartition, LandmarkShape};

/// Per-frame normalized errors of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub sequence_id: String,
    pub values: Vec<f64>,
}

impl ErrorSeries {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Empirical cumulative error distribution sampled at given thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

/// Mean Euclidean landmark error divided by the inter-pupil distance, where
/// each pupil is the centroid of its eye group in the ground-truth shape.
pub fn normalized_rmse(
    pred: &LandmarkShape,
    gt: &LandmarkShape,
    partition: &ComponentPartition,
) -> Result<f64> {
    if pred.landmark_count() != gt.landmark_count() {
        return Err(Error::shape(
            "normalized rmse",
            &[pred.landmark_count()],
            &[gt.landmark_count()],
        ));
    }
    partition.check_shape(gt)?;
    let ((rx, ry), (lx, ly)) = partition.eye_centroids(gt)?;
    let inter_pupil = ((rx - lx).powi(2) + (ry - ly).powi(2)).sqrt();
    if inter_pupil <= 0.0 {
        return Err(Error::Degenerate(
            "inter-pupil distance is zero".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..gt.landmark_count() {
        let (px, py) = pred.point(i);
        let (gx, gy) = gt.point(i);
        total += ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
    }
    Ok(total / gt.landmark_count() as f64 / inter_pupil)
}

/// Fraction of errors at or below each threshold. Thresholds must ascend.
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<CedCurve> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("thresholds must be ascending".into()));
    }
    if errors.is_empty() {
        return Err(Error::Input("ced of an empty error list".into()));
    }
    let n = errors.len() as f64;
    let fractions = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    Ok(CedCurve {
        thresholds: thresholds.to_vec(),
        fractions,
    })
}

/// Area under the empirical CDF over `[0, max_thresh]`, normalized by
/// `max_thresh` and expressed in percent. Computed by exact step-function
/// integration: the CDF is constant between sorted error values.
pub fn auc(errors: &[f64], max_thresh: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Input("auc of an empty error list".into()));
    }
    if max_thresh <= 0.0 {
        return Err(Error::Input("auc threshold must be positive".into()));
    }
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = sorted.len() as f64;
    let mut area = 0.0;
    let mut prev = 0.0;
    let mut below = 0usize;
    for &e in &sorted {
        if e > max_thresh {
            break;
        }
        area += (e - prev) * (below as f64 / n);
        below += 1;
        prev = e;
    }
    area += (max_thresh - prev) * (below as f64 / n);
    Ok(100.0 * area / max_thresh)
}

/// Per-frame normalized errors of one prediction/ground-truth sequence pair.
pub fn sequence_errors(
    preds: &[LandmarkShape],
    gts: &[LandmarkShape],
    partition: &ComponentPartition,
    sequence_id: impl Into<String>,
) -> Result<ErrorSeries> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "sequence errors",
            &[preds.len()],
            &[gts.len()],
        ));
    }
    let values = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| normalized_rmse(p, g, partition))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ErrorSeries {
        sequence_id: sequence_id.into(),
        values,
    })
}

/// Plot-ready CSV of a per-frame error series: `frame,err`.
pub fn series_csv(series: &ErrorSeries) -> String {
    let mut out = String::from("frame,err\n");
    for (i, v) in series.values.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

/// Plot-ready CSV of a CED curve: `threshold,fraction`.
pub fn ced_csv(curve: &CedCurve) -> String {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in curve.thresholds.iter().zip(&curve.fractions) {
        out.push_str(&format!("{t},{f}\n"));
    }
    out
}

/// Summary CSV row: `mean_nrmse,auc05,auc08`.
pub fn summary_csv(errors: &[f64]) -> Result<String> {
    if errors.is_empty() {
        return Err(Error::Input("summary of an empty error list".into()));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let auc05 = auc(errors, 0.05)?;
    let auc08 = auc(errors, 0.08)?;
    Ok(format!(
        "mean_nrmse,auc05,auc08\n{mean},{auc05},{auc08}\n"
    ))
}
