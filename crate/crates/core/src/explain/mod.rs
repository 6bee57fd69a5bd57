//! Shapley attribution of anomaly scores, episode feature rankings, rank
//! distribution tests and per-day attribution series.

mod ranks;
mod shapley;
pub mod stats;

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::features::{DayVector, FEATURE_COUNT};

pub use ranks::{
    episode_feature_ranks, rank_distribution_test, standard_rank_tests, FeatureRanking, RankRow, RankTable, RankTest,
    TIE_ORDER,
};
pub use shapley::{
    attribute_windows, draw_background, exact, sampled, shapley_values, window_seed, AttributionMatrix, Estimator,
    ErrorModel, FnModel, ShapleyMode, ShapleyValues, WindowRef, MAX_EXACT_PLAYERS,
};
pub use stats::{chi_square_independence, chi_square_sf, ChiSquare};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Background windows drawn from the validation split.
    pub background_size: usize,
    /// Sampled permutations per window.
    pub permutations: usize,
    /// Flagged windows explained per detected episode, spread evenly.
    pub max_windows_per_episode: usize,
    /// Flagged normal windows explained in total, spread evenly.
    pub max_false_alarms: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            background_size: 50,
            permutations: 200,
            max_windows_per_episode: 7,
            max_false_alarms: 25,
        }
    }
}

/// One calendar day of a participant's attribution series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDynamicRow {
    pub participant_id: String,
    pub date: NaiveDate,
    pub sleep: f64,
    pub steps: f64,
    pub resting_hr: f64,
    /// Explained windows covering the day.
    pub windows: usize,
    /// Error of the explained window ending on this day, if any.
    pub error: Option<f64>,
    pub threshold: Option<f64>,
}

/// Per-day attribution: for each day, the mean of phi over every explained
/// window covering it, taken at the day's position in that window.
pub fn time_dynamic_export(attributions: &[AttributionMatrix], threshold: Option<f64>) -> Vec<TimeDynamicRow> {
    let mut acc: BTreeMap<(&str, NaiveDate), (DayVector, usize, Option<f64>)> = BTreeMap::new();
    for a in attributions {
        let len = a.phi.len() as i64;
        for (k, row) in a.phi.iter().enumerate() {
            let date = a.end_date - Duration::days(len - 1 - k as i64);
            let e = acc.entry((a.participant_id.as_str(), date)).or_insert(([0.0; FEATURE_COUNT], 0, None));
            for (s, p) in e.0.iter_mut().zip(row) {
                *s += p;
            }
            e.1 += 1;
        }
        if let Some(e) = acc.get_mut(&(a.participant_id.as_str(), a.end_date)) {
            e.2 = Some(a.error);
        }
    }
    acc.into_iter()
        .map(|((pid, date), (sum, n, error))| TimeDynamicRow {
            participant_id: pid.to_string(),
            date,
            sleep: sum[0] / n as f64,
            steps: sum[1] / n as f64,
            resting_hr: sum[2] / n as f64,
            windows: n,
            error,
            threshold: error.and(threshold),
        })
        .collect()
}
