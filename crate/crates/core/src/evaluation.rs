//! Event-adjusted precision/recall/F, per-episode outcomes, stratified
//! breakdowns, threshold sweeps and episode-aligned feature averages.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::ops::RangeInclusive;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::artifacts::Provenance;
use crate::detector::{is_flagged, select_threshold, Detection};
use crate::error::Result;
use crate::features::{Feature, PreparedSeries, FEATURE_COUNT};
use crate::labeling::{Category, DayLabel, Episode, Magnitude};

/// Harmonic mean, zero when both inputs are zero.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedPrf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl AdjustedPrf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        AdjustedPrf {
            precision,
            recall,
            f_score: f_score(precision, recall),
            tp,
            fp,
            fn_,
        }
    }
}

/// Episode ids with at least one flagged window.
pub fn detected_episodes(detections: &[Detection]) -> HashSet<&str> {
    detections
        .iter()
        .filter(|d| d.flagged)
        .flat_map(|d| d.episode_ids.iter().map(String::as_str))
        .collect()
}

struct Counts {
    tp: usize,
    fn_: usize,
    fp: usize,
}

fn count<F>(detections: &[Detection], include: F) -> Counts
where
    F: Fn(&str) -> bool,
{
    let detected: HashSet<&str> = detections
        .iter()
        .filter(|d| d.flagged)
        .flat_map(|d| d.episode_ids.iter().map(String::as_str))
        .filter(|id| include(id))
        .collect();
    let mut c = Counts { tp: 0, fn_: 0, fp: 0 };
    for d in detections {
        match d.label {
            DayLabel::Anomalous => {
                let mut ids = d.episode_ids.iter().map(String::as_str).filter(|id| include(id)).peekable();
                if ids.peek().is_none() {
                    continue;
                }
                if ids.any(|id| detected.contains(id)) {
                    c.tp += 1;
                } else {
                    c.fn_ += 1;
                }
            }
            DayLabel::NormalEligible if d.flagged => c.fp += 1,
            _ => {}
        }
    }
    c
}

/// Point-adjusted PRF at window granularity: every anomalous window of a
/// detected episode is a true positive, anomalous windows of undetected
/// episodes are false negatives, flagged normal windows are false positives
/// and ambiguous windows are ignored.
pub fn adjusted_prf(detections: &[Detection]) -> AdjustedPrf {
    let c = count(detections, |_| true);
    AdjustedPrf::from_counts(c.tp, c.fp, c.fn_)
}

/// PRF for a subset of episodes. The cohort's false positives are attributed
/// to the stratum in proportion to its share of anomalous windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumPrf {
    pub stratum: String,
    pub episodes: usize,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp_attributed: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

pub fn stratum_prf(detections: &[Detection], stratum: &str, episode_ids: &HashSet<&str>) -> StratumPrf {
    let all = count(detections, |_| true);
    let s = count(detections, |id| episode_ids.contains(id));
    let total_anomalous = (all.tp + all.fn_) as f64;
    let share = ratio((s.tp + s.fn_) as f64, total_anomalous);
    let fp_attributed = all.fp as f64 * share;
    let precision = ratio(s.tp as f64, s.tp as f64 + fp_attributed);
    let recall = ratio(s.tp as f64, (s.tp + s.fn_) as f64);
    StratumPrf {
        stratum: stratum.to_string(),
        episodes: episode_ids.len(),
        tp: s.tp,
        fn_: s.fn_,
        fp_attributed,
        precision,
        recall,
        f_score: f_score(precision, recall),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub per_category: Vec<StratumPrf>,
    pub per_magnitude: Vec<StratumPrf>,
}

pub const MAGNITUDE_STRATA: [(&str, bool, Magnitude); 4] = [
    ("PHQ_d5_9", true, Magnitude::D5To9),
    ("PHQ_d10_plus", true, Magnitude::D10Plus),
    ("GAD_d5_9", false, Magnitude::D5To9),
    ("GAD_d10_plus", false, Magnitude::D10Plus),
];

pub fn breakdown(detections: &[Detection], episodes: &[Episode]) -> Breakdown {
    let per_category = Category::ALL
        .iter()
        .map(|&cat| {
            let ids: HashSet<&str> = episodes.iter().filter(|e| e.category == cat).map(|e| e.id.as_str()).collect();
            stratum_prf(detections, cat.as_str(), &ids)
        })
        .collect();
    let per_magnitude = MAGNITUDE_STRATA
        .iter()
        .map(|&(name, phq, mag)| {
            let ids: HashSet<&str> = episodes
                .iter()
                .filter(|e| if phq { e.magnitude_phq == mag } else { e.magnitude_gad == mag })
                .map(|e| e.id.as_str())
                .collect();
            stratum_prf(detections, name, &ids)
        })
        .collect();
    Breakdown {
        per_category,
        per_magnitude,
    }
}

/// Days either side of an assessment whose flagged normal windows are blamed
/// on that episode.
pub const EPISODE_FP_RADIUS_DAYS: i64 = 35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_id: String,
    pub participant_id: String,
    pub category: Category,
    pub detected: bool,
    pub windows: usize,
    pub flagged_windows: usize,
    pub false_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub outcomes: Vec<EpisodeOutcome>,
    /// `None` when there are no episodes.
    pub detection_rate: Option<f64>,
}

pub fn episode_outcomes(detections: &[Detection], episodes: &[Episode]) -> EpisodeSummary {
    let mut by_episode: HashMap<&str, (usize, usize)> = HashMap::new();
    for d in detections.iter().filter(|d| d.label == DayLabel::Anomalous) {
        for id in &d.episode_ids {
            let e = by_episode.entry(id.as_str()).or_default();
            e.0 += 1;
            if d.flagged {
                e.1 += 1;
            }
        }
    }
    let mut flagged_normal: HashMap<&str, Vec<NaiveDate>> = HashMap::new();
    for d in detections.iter().filter(|d| d.flagged && d.label == DayLabel::NormalEligible) {
        flagged_normal.entry(d.participant_id.as_str()).or_default().push(d.end_date);
    }
    let outcomes: Vec<EpisodeOutcome> = episodes
        .iter()
        .map(|e| {
            let (windows, flagged) = by_episode.get(e.id.as_str()).copied().unwrap_or((0, 0));
            let detected = flagged > 0;
            let radius = Duration::days(EPISODE_FP_RADIUS_DAYS);
            let fp = flagged_normal
                .get(e.participant_id.as_str())
                .map(|dates| {
                    dates
                        .iter()
                        .filter(|&&d| d >= e.assessment_date - radius && d <= e.assessment_date + radius)
                        .count()
                })
                .unwrap_or(0);
            let tp = if detected { windows } else { 0 };
            let prf = AdjustedPrf::from_counts(tp, fp, windows - tp);
            EpisodeOutcome {
                episode_id: e.id.clone(),
                participant_id: e.participant_id.clone(),
                category: e.category,
                detected,
                windows,
                flagged_windows: flagged,
                false_positives: fp,
                precision: prf.precision,
                recall: prf.recall,
                f_score: prf.f_score,
            }
        })
        .collect();
    let detection_rate = (!outcomes.is_empty())
        .then(|| outcomes.iter().filter(|o| o.detected).count() as f64 / outcomes.len() as f64);
    EpisodeSummary {
        outcomes,
        detection_rate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub percentile: f64,
    pub threshold: f64,
    pub flagged: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Adjusted PRF with the threshold at each percentile of the validation errors.
pub fn threshold_sweep(detections: &[Detection], validation_errors: &[f64], percentiles: &[f64]) -> Result<Vec<SweepPoint>> {
    percentiles
        .iter()
        .map(|&p| {
            let threshold = select_threshold(validation_errors, p)?;
            let rethresholded: Vec<Detection> = detections
                .iter()
                .map(|d| Detection {
                    threshold,
                    flagged: is_flagged(d.error, threshold),
                    ..d.clone()
                })
                .collect();
            let prf = adjusted_prf(&rethresholded);
            Ok(SweepPoint {
                percentile: p,
                threshold,
                flagged: rethresholded.iter().filter(|d| d.flagged).count(),
                precision: prf.precision,
                recall: prf.recall,
                f_score: prf.f_score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPoint {
    pub offset_day: i64,
    pub feature: Feature,
    pub mean: f64,
    pub n: usize,
    /// Normal-approximation 95% band around the mean.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Cross-episode mean of each normalized feature at each day offset from the
/// assessment date. Imputed cells are left out.
pub fn aligned_averages(series: &[PreparedSeries], episodes: &[Episode], offsets: RangeInclusive<i64>) -> Vec<AlignedPoint> {
    let by_participant: HashMap<&str, &PreparedSeries> = series.iter().map(|s| (s.participant_id.as_str(), s)).collect();
    let mut out = Vec::new();
    for offset in offsets {
        let mut samples: [Vec<f64>; FEATURE_COUNT] = Default::default();
        for e in episodes {
            let Some(s) = by_participant.get(e.participant_id.as_str()) else {
                continue;
            };
            let Some(first) = s.daily.first() else { continue };
            let idx = (e.assessment_date + Duration::days(offset) - first.date).num_days();
            if idx < 0 || idx as usize >= s.daily.len() {
                continue;
            }
            let i = idx as usize;
            for f in 0..FEATURE_COUNT {
                if s.imputed_mask[i] & (1 << f) == 0 {
                    samples[f].push(s.normalized[i][f]);
                }
            }
        }
        for feature in Feature::ALL {
            let xs = &samples[feature.index()];
            let n = xs.len();
            let mean = ratio(xs.iter().sum::<f64>(), n as f64);
            let half = if n > 1 {
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
                1.96 * (var / n as f64).sqrt()
            } else {
                0.0
            };
            out.push(AlignedPoint {
                offset_day: offset,
                feature,
                mean,
                n,
                ci_low: mean - half,
                ci_high: mean + half,
            });
        }
    }
    out
}

/// Counts mirroring a cohort summary table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCounts {
    pub total: usize,
    pub participants_with_episodes: usize,
    pub both: usize,
    pub phq_only: usize,
    pub gad_only: usize,
    pub phq_d5_9: usize,
    pub phq_d10_plus: usize,
    pub gad_d5_9: usize,
    pub gad_d10_plus: usize,
}

impl EpisodeCounts {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let mut c = EpisodeCounts {
            total: episodes.len(),
            participants_with_episodes: episodes.iter().map(|e| e.participant_id.as_str()).collect::<BTreeSet<_>>().len(),
            ..Default::default()
        };
        for e in episodes {
            match e.category {
                Category::Both => c.both += 1,
                Category::PhqOnly => c.phq_only += 1,
                Category::GadOnly => c.gad_only += 1,
            }
            match e.magnitude_phq {
                Magnitude::D5To9 => c.phq_d5_9 += 1,
                Magnitude::D10Plus => c.phq_d10_plus += 1,
                Magnitude::None => {}
            }
            match e.magnitude_gad {
                Magnitude::D5To9 => c.gad_d5_9 += 1,
                Magnitude::D10Plus => c.gad_d10_plus += 1,
                Magnitude::None => {}
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Option<Provenance>,
    pub percentile: f64,
    pub threshold: f64,
    pub overall: AdjustedPrf,
    pub per_category: Vec<StratumPrf>,
    pub per_magnitude: Vec<StratumPrf>,
    pub detection_rate: Option<f64>,
    pub episode_counts: EpisodeCounts,
    pub threshold_sweep: Vec<SweepPoint>,
}

pub fn default_sweep_percentiles() -> Vec<f64> {
    (90..=100).map(|p| p as f64).collect()
}

pub fn metrics_report(
    detections: &[Detection],
    episodes: &[Episode],
    validation_errors: &[f64],
    percentile: f64,
    threshold: f64,
) -> Result<MetricsReport> {
    let b = breakdown(detections, episodes);
    Ok(MetricsReport {
        provenance: None,
        percentile,
        threshold,
        overall: adjusted_prf(detections),
        per_category: b.per_category,
        per_magnitude: b.per_magnitude,
        detection_rate: episode_outcomes(detections, episodes).detection_rate,
        episode_counts: EpisodeCounts::from_episodes(episodes),
        threshold_sweep: threshold_sweep(detections, validation_errors, &default_sweep_percentiles())?,
    })
}
