//! Percentile thresholds over validation reconstruction errors and window flagging.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Window;
use crate::labeling::DayLabel;
use crate::lstm::LstmAutoencoder;
use crate::par::Execution;

/// Inclusive linear-interpolation percentile. The 100th percentile is the maximum.
pub fn select_threshold(errors: &[f64], percentile: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("cannot take a percentile of no errors".into()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidInput(format!("percentile {percentile} outside [0, 100]")));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidInput("non-finite reconstruction error".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (sorted.len() - 1) as f64 * percentile / 100.0;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() || frac == 0.0 {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

/// Strictly above the threshold.
#[inline]
pub fn is_flagged(error: f64, threshold: f64) -> bool {
    error > threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub participant_id: String,
    pub end_date: NaiveDate,
    pub error: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub label: DayLabel,
    pub episode_ids: Vec<String>,
}

/// Build detections from precomputed errors (one per window, same order).
pub fn detections_from_errors(windows: &[Window], errors: &[f64], threshold: f64) -> Vec<Detection> {
    assert_eq!(windows.len(), errors.len(), "one error per window");
    windows
        .iter()
        .zip(errors)
        .map(|(w, &error)| Detection {
            participant_id: w.participant_id.clone(),
            end_date: w.end_date,
            error,
            threshold,
            flagged: is_flagged(error, threshold),
            label: w.label,
            episode_ids: w.episode_ids.clone(),
        })
        .collect()
}

pub fn detect(model: &LstmAutoencoder, windows: &[Window], threshold: f64, exec: Execution) -> Result<Vec<Detection>> {
    let values: Vec<&[_]> = windows.iter().map(|w| &w.values[..]).collect();
    let errors = model.score_windows(&values, exec)?;
    Ok(detections_from_errors(windows, &errors, threshold))
}

/// Re-threshold existing detections.
pub fn rethreshold(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    detections
        .iter()
        .map(|d| Detection {
            threshold,
            flagged: is_flagged(d.error, threshold),
            ..d.clone()
        })
        .collect()
}
