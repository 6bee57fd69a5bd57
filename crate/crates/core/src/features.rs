//! Daily feature extraction, quality gating, imputation, per-participant
//! z-scoring and 7-day windowing.

use std::collections::HashMap;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::cohort::{MinuteRecord, Participant, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::labeling::{DateSpan, DayLabel, LabeledDay};

pub const FEATURE_COUNT: usize = 3;
pub const WINDOW_DAYS: usize = 7;

/// One day of model input, in feature column order.
pub type DayVector = [f64; FEATURE_COUNT];

/// Model input columns. The discriminant is the column index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Sleep = 0,
    Steps = 1,
    RestingHr = 2,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [Feature::Sleep, Feature::Steps, Feature::RestingHr];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Sleep => "sleep",
            Feature::Steps => "steps",
            Feature::RestingHr => "resting_hr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Days whose step or heart-rate minute coverage misses more than this
    /// fraction are excluded.
    pub max_missing_fraction: f64,
    pub resting_run_minutes: usize,
    /// Training windows must have strictly less than this fraction of imputed cells.
    pub max_window_imputed_fraction: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            max_missing_fraction: 0.2,
            resting_run_minutes: 12,
            max_window_imputed_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyFeatures {
    pub date: NaiveDate,
    pub sleep_minutes: Option<f64>,
    pub total_steps: Option<f64>,
    pub resting_hr: Option<f64>,
    pub quality_ok: bool,
}

impl DailyFeatures {
    pub fn missing(date: NaiveDate) -> Self {
        DailyFeatures {
            date,
            sleep_minutes: None,
            total_steps: None,
            resting_hr: None,
            quality_ok: false,
        }
    }

    pub fn values(&self) -> [Option<f64>; FEATURE_COUNT] {
        [self.sleep_minutes, self.total_steps, self.resting_hr]
    }
}

struct DayGrid {
    steps: [Option<u32>; MINUTES_PER_DAY],
    heart_rate: [Option<f64>; MINUTES_PER_DAY],
}

impl DayGrid {
    fn new(day: &[MinuteRecord]) -> Self {
        let mut grid = DayGrid {
            steps: [None; MINUTES_PER_DAY],
            heart_rate: [None; MINUTES_PER_DAY],
        };
        for m in day {
            let i = m.minute as usize;
            if i < MINUTES_PER_DAY {
                grid.steps[i] = m.steps;
                grid.heart_rate[i] = m.heart_rate;
            }
        }
        grid
    }
}

/// Minutes spent in light, deep or REM sleep; `None` when the day carries no
/// sleep-stage records at all.
pub fn sleep_duration(day: &[MinuteRecord]) -> Option<f64> {
    let mut staged = false;
    let mut asleep = 0usize;
    for m in day {
        if m.sleep_stage != crate::cohort::SleepStage::None {
            staged = true;
        }
        if m.sleep_stage.is_asleep() {
            asleep += 1;
        }
    }
    staged.then_some(asleep as f64)
}

/// Sum of present step counts; `None` only when every minute is missing.
pub fn total_steps(day: &[MinuteRecord]) -> Option<f64> {
    let mut any = false;
    let mut total = 0u64;
    for s in day.iter().filter_map(|m| m.steps) {
        any = true;
        total += s as u64;
    }
    any.then_some(total as f64)
}

/// Mean heart rate over the union of all runs of at least `run_minutes`
/// consecutive zero-step minutes. A missing step value breaks a run.
pub fn resting_heart_rate_with(day: &[MinuteRecord], run_minutes: usize) -> Option<f64> {
    let grid = DayGrid::new(day);
    let run_minutes = run_minutes.max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut run_start = 0usize;
    for i in 0..=MINUTES_PER_DAY {
        let resting = i < MINUTES_PER_DAY && grid.steps[i] == Some(0);
        if resting {
            continue;
        }
        if i - run_start >= run_minutes {
            for hr in grid.heart_rate[run_start..i].iter().flatten() {
                sum += hr;
                count += 1;
            }
        }
        run_start = i + 1;
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn resting_heart_rate(day: &[MinuteRecord]) -> Option<f64> {
    resting_heart_rate_with(day, FeatureConfig::default().resting_run_minutes)
}

fn min_present_minutes(max_missing_fraction: f64) -> usize {
    ((1.0 - max_missing_fraction) * MINUTES_PER_DAY as f64 - 1e-9).ceil() as usize
}

/// Both step and heart-rate minute coverage reach the required share of the day.
pub fn day_quality_with(day: &[MinuteRecord], max_missing_fraction: f64) -> bool {
    let grid = DayGrid::new(day);
    let need = min_present_minutes(max_missing_fraction);
    let steps = grid.steps.iter().filter(|s| s.is_some()).count();
    let hr = grid.heart_rate.iter().filter(|h| h.is_some()).count();
    steps >= need && hr >= need
}

pub fn day_quality(day: &[MinuteRecord]) -> bool {
    day_quality_with(day, FeatureConfig::default().max_missing_fraction)
}

/// Daily features for every date of `calendar`. Days failing the quality
/// gate (or without any records) have all features missing.
pub fn extract_daily(participant: &Participant, calendar: DateSpan, cfg: &FeatureConfig) -> Vec<DailyFeatures> {
    let by_day: HashMap<NaiveDate, &[MinuteRecord]> = participant.days().collect();
    calendar
        .dates()
        .map(|date| match by_day.get(&date) {
            Some(day) if day_quality_with(day, cfg.max_missing_fraction) => DailyFeatures {
                date,
                sleep_minutes: sleep_duration(day),
                total_steps: total_steps(day),
                resting_hr: resting_heart_rate_with(day, cfg.resting_run_minutes),
                quality_ok: true,
            },
            _ => DailyFeatures::missing(date),
        })
        .collect()
}

/// Linear interpolation across interior gaps, nearest-value hold at the edges.
pub fn impute_linear(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let anchors: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    let (&first, &last) = match (anchors.first(), anchors.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(Error::InvalidInput(
                "cannot impute a series with no present values".into(),
            ))
        }
    };
    let mut out = vec![0.0; series.len()];
    let first_value = series[first].unwrap();
    let last_value = series[last].unwrap();
    out[..first].fill(first_value);
    out[last..].fill(last_value);
    for pair in anchors.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let (a, b) = (series[lo].unwrap(), series[hi].unwrap());
        out[lo] = a;
        let span = (hi - lo) as f64;
        for (k, slot) in out[lo + 1..hi].iter_mut().enumerate() {
            let t = (k + 1) as f64 / span;
            *slot = a + (b - a) * t;
        }
    }
    out[last] = last_value;
    Ok(out)
}

/// Per-feature z-score constants (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub mean: [f64; FEATURE_COUNT],
    pub std: [f64; FEATURE_COUNT],
}

impl NormalizationConstants {
    /// Constants over the present values of quality-passing days.
    pub fn from_daily(daily: &[DailyFeatures]) -> Self {
        let mut mean = [0.0; FEATURE_COUNT];
        let mut std = [0.0; FEATURE_COUNT];
        for f in 0..FEATURE_COUNT {
            let xs: Vec<f64> = daily
                .iter()
                .filter(|d| d.quality_ok)
                .filter_map(|d| d.values()[f])
                .collect();
            let (m, s) = mean_std(&xs);
            mean[f] = m;
            std[f] = s;
        }
        NormalizationConstants { mean, std }
    }

    pub fn apply(&self, x: &DayVector) -> DayVector {
        let mut z = [0.0; FEATURE_COUNT];
        for f in 0..FEATURE_COUNT {
            z[f] = zscore(x[f], self.mean[f], self.std[f]);
        }
        z
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn zscore(x: f64, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        (x - mean) / std
    }
}

pub fn normalize_series(series: &[f64], mean: f64, std: f64) -> Vec<f64> {
    series.iter().map(|&x| zscore(x, mean, std)).collect()
}

/// A participant's contiguous daily series after imputation and z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSeries {
    pub participant_id: String,
    pub daily: Vec<DailyFeatures>,
    /// Imputed values on the original scale.
    pub imputed: Vec<DayVector>,
    pub normalized: Vec<DayVector>,
    /// Bit `f` set when feature `f` was imputed that day.
    pub imputed_mask: Vec<u8>,
    pub constants: NormalizationConstants,
}

impl PreparedSeries {
    /// `daily` must be contiguous in calendar dates.
    pub fn new(participant_id: impl Into<String>, daily: Vec<DailyFeatures>) -> Result<Self> {
        let participant_id = participant_id.into();
        if daily.windows(2).any(|w| w[1].date != w[0].date + Duration::days(1)) {
            return Err(Error::InvalidInput(format!(
                "daily series for `{participant_id}` is not contiguous"
            )));
        }
        let constants = NormalizationConstants::from_daily(&daily);
        Self::with_constants(participant_id, daily, constants)
    }

    pub fn with_constants(
        participant_id: String,
        daily: Vec<DailyFeatures>,
        constants: NormalizationConstants,
    ) -> Result<Self> {
        let n = daily.len();
        let mut imputed = vec![[0.0; FEATURE_COUNT]; n];
        let mut imputed_mask = vec![0u8; n];
        for f in 0..FEATURE_COUNT {
            let raw: Vec<Option<f64>> = daily.iter().map(|d| d.values()[f]).collect();
            let filled = impute_linear(&raw).map_err(|_| {
                Error::InvalidInput(format!(
                    "participant `{participant_id}` has no usable {} values",
                    Feature::ALL[f].as_str()
                ))
            })?;
            for i in 0..n {
                imputed[i][f] = filled[i];
                if raw[i].is_none() {
                    imputed_mask[i] |= 1 << f;
                }
            }
        }
        let normalized = imputed.iter().map(|x| constants.apply(x)).collect();
        Ok(PreparedSeries {
            participant_id,
            daily,
            imputed,
            normalized,
            imputed_mask,
            constants,
        })
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.daily.iter().map(|d| d.date)
    }
}

pub type WindowMatrix = [DayVector; WINDOW_DAYS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub participant_id: String,
    pub end_date: NaiveDate,
    pub values: WindowMatrix,
    pub label: DayLabel,
    pub episode_ids: Vec<String>,
    /// Cells filled by imputation, out of 21.
    pub imputed_cells: u8,
}

impl Window {
    pub fn start_date(&self) -> NaiveDate {
        self.end_date - Duration::days(WINDOW_DAYS as i64 - 1)
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> {
        DateSpan::new(self.start_date(), self.end_date).dates()
    }

    pub fn is_training(&self, cfg: &FeatureConfig) -> bool {
        self.label == DayLabel::NormalEligible
            && (self.imputed_cells as f64) < cfg.max_window_imputed_fraction * (WINDOW_DAYS * FEATURE_COUNT) as f64
    }
}

/// Label of a window from the labels of the days it covers.
pub fn window_label<'a>(days: impl IntoIterator<Item = &'a DayLabel>) -> DayLabel {
    let mut all_normal = true;
    for l in days {
        match l {
            DayLabel::Anomalous => return DayLabel::Anomalous,
            DayLabel::NormalEligible => {}
            DayLabel::Ambiguous => all_normal = false,
        }
    }
    if all_normal {
        DayLabel::NormalEligible
    } else {
        DayLabel::Ambiguous
    }
}

/// One window per day with six preceding days available. Days absent from
/// `labels` count as ambiguous.
pub fn make_windows(series: &PreparedSeries, labels: &[LabeledDay]) -> Vec<Window> {
    let by_date: HashMap<NaiveDate, &LabeledDay> = labels.iter().map(|l| (l.date, l)).collect();
    let n = series.daily.len();
    if n < WINDOW_DAYS {
        return Vec::new();
    }
    (WINDOW_DAYS - 1..n)
        .map(|end| {
            let range = end + 1 - WINDOW_DAYS..=end;
            let mut values = [[0.0; FEATURE_COUNT]; WINDOW_DAYS];
            values.copy_from_slice(&series.normalized[range.clone()]);
            let mut day_labels = Vec::with_capacity(WINDOW_DAYS);
            let mut episode_ids: Vec<String> = Vec::new();
            for i in range.clone() {
                match by_date.get(&series.daily[i].date) {
                    Some(l) => {
                        day_labels.push(l.label);
                        for id in &l.episode_ids {
                            if !episode_ids.contains(id) {
                                episode_ids.push(id.clone());
                            }
                        }
                    }
                    None => day_labels.push(DayLabel::Ambiguous),
                }
            }
            let imputed_cells = series.imputed_mask[range]
                .iter()
                .map(|m| m.count_ones() as u8)
                .sum();
            Window {
                participant_id: series.participant_id.clone(),
                end_date: series.daily[end].date,
                values,
                label: window_label(&day_labels),
                episode_ids,
                imputed_cells,
            }
        })
        .collect()
}
