//! Rule-based ground truth: normal periods, symptom-worsening episodes and
//! per-day labels.

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::cohort::{Assessment, CovidEvent, Participant};

/// Inclusive calendar interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DateSpan {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateSpan {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        debug_assert!(start <= end);
        DateSpan { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn intersects(&self, other: &DateSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// Number of calendar days covered, inclusive.
    pub fn len_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> {
        let start = self.start;
        (0..self.len_days()).map(move |i| start + Duration::days(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Both scores must be strictly below this for an assessment to count as normal.
    pub normal_score_below: u8,
    pub min_normal_span_days: i64,
    pub min_normal_assessments: usize,
    /// Largest gap between neighbouring assessments that still counts as consecutive.
    pub max_gap_days: i64,
    pub covid_days_before: i64,
    pub covid_days_after: i64,
    /// Minimum increase over the normal-period mean that flags an episode.
    pub episode_delta: f64,
    /// Increase at or above which an episode is in the large-magnitude bucket.
    pub large_delta: f64,
    pub anomalous_days_before: i64,
    pub anomalous_days_after: i64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            normal_score_below: 5,
            min_normal_span_days: 56,
            min_normal_assessments: 4,
            max_gap_days: 21,
            covid_days_before: 7,
            covid_days_after: 21,
            episode_delta: 5.0,
            large_delta: 10.0,
            anomalous_days_before: 21,
            anomalous_days_after: 14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovidExclusion {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl CovidExclusion {
    pub fn span(&self) -> DateSpan {
        DateSpan::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalPeriod {
    pub participant_id: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub assessment_count: usize,
    pub mean_phq8: f64,
    pub mean_gad7: f64,
}

impl NormalPeriod {
    pub fn span(&self) -> DateSpan {
        DateSpan::new(self.start_date, self.end_date)
    }

    pub fn span_days(&self) -> i64 {
        (self.end_date - self.start_date).num_days()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "BOTH")]
    Both,
    #[serde(rename = "PHQ_only")]
    PhqOnly,
    #[serde(rename = "GAD_only")]
    GadOnly,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Both, Category::PhqOnly, Category::GadOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Both => "BOTH",
            Category::PhqOnly => "PHQ_only",
            Category::GadOnly => "GAD_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    None,
    #[serde(rename = "d5_9")]
    D5To9,
    #[serde(rename = "d10_plus")]
    D10Plus,
}

impl Magnitude {
    pub fn from_delta(delta: f64, cfg: &LabelingConfig) -> Self {
        if delta >= cfg.large_delta {
            Magnitude::D10Plus
        } else if delta >= cfg.episode_delta {
            Magnitude::D5To9
        } else {
            Magnitude::None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Magnitude::None => "none",
            Magnitude::D5To9 => "d5_9",
            Magnitude::D10Plus => "d10_plus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub participant_id: String,
    pub assessment_date: NaiveDate,
    pub category: Category,
    pub phq_delta: f64,
    pub gad_delta: f64,
    pub magnitude_phq: Magnitude,
    pub magnitude_gad: Magnitude,
    pub period_start: NaiveDate,
    pub period_end: NaiveDate,
}

impl Episode {
    pub fn period(&self) -> DateSpan {
        DateSpan::new(self.period_start, self.period_end)
    }

    pub fn make_id(participant_id: &str, date: NaiveDate) -> String {
        format!("{participant_id}@{date}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayLabel {
    NormalEligible,
    Anomalous,
    Ambiguous,
}

impl DayLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DayLabel::NormalEligible => "normal_eligible",
            DayLabel::Anomalous => "anomalous",
            DayLabel::Ambiguous => "ambiguous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "normal_eligible" => DayLabel::NormalEligible,
            "anomalous" => DayLabel::Anomalous,
            "ambiguous" => DayLabel::Ambiguous,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDay {
    pub date: NaiveDate,
    pub label: DayLabel,
    pub episode_ids: Vec<String>,
}

/// COVID exclusion intervals, merged where they overlap or touch.
pub fn covid_exclusions(events: &[CovidEvent], cfg: &LabelingConfig) -> Vec<CovidExclusion> {
    let mut spans: Vec<CovidExclusion> = events
        .iter()
        .map(|e| CovidExclusion {
            start: e.report_date - Duration::days(cfg.covid_days_before),
            end: e.report_date + Duration::days(cfg.covid_days_after),
        })
        .collect();
    spans.sort_by_key(|s| (s.start, s.end));
    let mut merged: Vec<CovidExclusion> = Vec::with_capacity(spans.len());
    for s in spans {
        match merged.last_mut() {
            Some(last) if s.start <= last.end + Duration::days(1) => {
                last.end = last.end.max(s.end);
            }
            _ => merged.push(s),
        }
    }
    merged
}

/// All maximal runs of consecutive low-score assessments that qualify as a
/// normal period. Assessments must be date-ordered.
pub fn find_normal_periods(
    participant_id: &str,
    assessments: &[Assessment],
    exclusions: &[CovidExclusion],
    cfg: &LabelingConfig,
) -> Vec<NormalPeriod> {
    let excluded = |span: DateSpan| exclusions.iter().any(|e| e.span().intersects(&span));
    let low = |a: &Assessment| a.phq8 < cfg.normal_score_below && a.gad7 < cfg.normal_score_below;

    let mut periods = Vec::new();
    let mut run: Vec<&Assessment> = Vec::new();
    let close = |run: &mut Vec<&Assessment>, periods: &mut Vec<NormalPeriod>| {
        if let (Some(first), Some(last)) = (run.first(), run.last()) {
            let span_days = (last.date - first.date).num_days();
            if run.len() >= cfg.min_normal_assessments && span_days >= cfg.min_normal_span_days {
                let n = run.len() as f64;
                periods.push(NormalPeriod {
                    participant_id: participant_id.to_string(),
                    start_date: first.date,
                    end_date: last.date,
                    assessment_count: run.len(),
                    mean_phq8: run.iter().map(|a| a.phq8 as f64).sum::<f64>() / n,
                    mean_gad7: run.iter().map(|a| a.gad7 as f64).sum::<f64>() / n,
                });
            }
        }
        run.clear();
    };

    for a in assessments {
        if !low(a) || excluded(DateSpan::new(a.date, a.date)) {
            close(&mut run, &mut periods);
            continue;
        }
        if let Some(prev) = run.last() {
            let gap = (a.date - prev.date).num_days();
            if gap > cfg.max_gap_days || excluded(DateSpan::new(prev.date, a.date)) {
                close(&mut run, &mut periods);
            }
        }
        run.push(a);
    }
    close(&mut run, &mut periods);
    periods
}

/// Episodes relative to one baseline: every assessment outside the baseline
/// whose score exceeds the baseline mean by at least the episode delta.
pub fn find_episodes(
    assessments: &[Assessment],
    baseline: &NormalPeriod,
    cfg: &LabelingConfig,
) -> Vec<Episode> {
    assessments
        .iter()
        .filter(|a| !baseline.span().contains(a.date))
        .filter_map(|a| episode_for(a, baseline, cfg))
        .collect()
}

fn episode_for(a: &Assessment, baseline: &NormalPeriod, cfg: &LabelingConfig) -> Option<Episode> {
    let phq_delta = a.phq8 as f64 - baseline.mean_phq8;
    let gad_delta = a.gad7 as f64 - baseline.mean_gad7;
    let phq_hit = phq_delta >= cfg.episode_delta;
    let gad_hit = gad_delta >= cfg.episode_delta;
    let category = match (phq_hit, gad_hit) {
        (true, true) => Category::Both,
        (true, false) => Category::PhqOnly,
        (false, true) => Category::GadOnly,
        (false, false) => return None,
    };
    Some(Episode {
        id: Episode::make_id(&baseline.participant_id, a.date),
        participant_id: baseline.participant_id.clone(),
        assessment_date: a.date,
        category,
        phq_delta,
        gad_delta,
        magnitude_phq: Magnitude::from_delta(phq_delta, cfg),
        magnitude_gad: Magnitude::from_delta(gad_delta, cfg),
        period_start: a.date - Duration::days(cfg.anomalous_days_before),
        period_end: a.date + Duration::days(cfg.anomalous_days_after),
    })
}

/// Episodes for a participant with possibly several normal periods. Each
/// assessment is compared with the nearest normal period that ends before it;
/// assessments preceding every normal period fall back to the earliest one.
pub fn find_participant_episodes(
    assessments: &[Assessment],
    periods: &[NormalPeriod],
    cfg: &LabelingConfig,
) -> Vec<Episode> {
    if periods.is_empty() {
        return Vec::new();
    }
    assessments
        .iter()
        .filter(|a| !periods.iter().any(|p| p.span().contains(a.date)))
        .filter_map(|a| {
            let baseline = periods
                .iter()
                .filter(|p| p.end_date < a.date)
                .max_by_key(|p| p.end_date)
                .unwrap_or(&periods[0]);
            episode_for(a, baseline, cfg)
        })
        .collect()
}

/// Label every day of `calendar`: anomalous inside any episode period, normal
/// inside a normal period, ambiguous otherwise.
pub fn day_labels(
    normal_periods: &[NormalPeriod],
    episodes: &[Episode],
    calendar: DateSpan,
) -> Vec<LabeledDay> {
    calendar
        .dates()
        .map(|date| {
            let episode_ids: Vec<String> = episodes
                .iter()
                .filter(|e| e.period().contains(date))
                .map(|e| e.id.clone())
                .collect();
            let label = if !episode_ids.is_empty() {
                DayLabel::Anomalous
            } else if normal_periods.iter().any(|p| p.span().contains(date)) {
                DayLabel::NormalEligible
            } else {
                DayLabel::Ambiguous
            };
            LabeledDay {
                date,
                label,
                episode_ids,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantLabels {
    pub participant_id: String,
    pub exclusions: Vec<CovidExclusion>,
    pub normal_periods: Vec<NormalPeriod>,
    pub episodes: Vec<Episode>,
    pub days: Vec<LabeledDay>,
}

/// Full labeling for one participant over the given calendar (defaults to the
/// span of the participant's own data).
pub fn label_participant(
    participant: &Participant,
    calendar: Option<DateSpan>,
    cfg: &LabelingConfig,
) -> ParticipantLabels {
    let exclusions = covid_exclusions(&participant.covid_events, cfg);
    let normal_periods =
        find_normal_periods(&participant.id, &participant.assessments, &exclusions, cfg);
    let episodes = find_participant_episodes(&participant.assessments, &normal_periods, cfg);
    let calendar = calendar.or_else(|| {
        participant
            .date_range()
            .map(|(lo, hi)| DateSpan::new(lo, hi))
    });
    let days = calendar
        .map(|c| day_labels(&normal_periods, &episodes, c))
        .unwrap_or_default();
    ParticipantLabels {
        participant_id: participant.id.clone(),
        exclusions,
        normal_periods,
        episodes,
        days,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(n: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + Duration::days(n)
    }

    fn assess(days: &[i64], phq: u8, gad: u8) -> Vec<Assessment> {
        days.iter()
            .map(|&n| Assessment {
                date: day(n),
                phq8: phq,
                gad7: gad,
            })
            .collect()
    }

    fn cfg() -> LabelingConfig {
        LabelingConfig::default()
    }

    #[test]
    fn covid_exclusion_single_and_merged() {
        assert!(covid_exclusions(&[], &cfg()).is_empty());
        let one = covid_exclusions(&[CovidEvent { report_date: day(100) }], &cfg());
        assert_eq!(one, vec![CovidExclusion { start: day(93), end: day(121) }]);
        let two = covid_exclusions(
            &[
                CovidEvent { report_date: day(110) },
                CovidEvent { report_date: day(100) },
            ],
            &cfg(),
        );
        assert_eq!(two, vec![CovidExclusion { start: day(93), end: day(131) }]);
    }

    #[test]
    fn biweekly_low_scores_form_a_normal_period() {
        let a = assess(&[0, 14, 28, 42, 56], 2, 1);
        let periods = find_normal_periods("p", &a, &[], &cfg());
        assert_eq!(periods.len(), 1);
        let p = &periods[0];
        assert_eq!(p.span_days(), 56);
        assert_eq!(p.assessment_count, 5);
        assert_eq!(p.mean_phq8, 2.0);
        assert_eq!(p.mean_gad7, 1.0);
    }

    #[test]
    fn score_of_five_breaks_the_run() {
        let mut a = assess(&[0, 14, 28, 42, 56], 2, 1);
        a[2].gad7 = 5;
        assert!(find_normal_periods("p", &a, &[], &cfg()).is_empty());
    }

    #[test]
    fn covid_inside_run_disqualifies_it() {
        let a = assess(&[0, 14, 28, 42, 56], 2, 1);
        let ex = covid_exclusions(&[CovidEvent { report_date: day(30) }], &cfg());
        assert!(find_normal_periods("p", &a, &ex, &cfg()).is_empty());
    }

    #[test]
    fn long_gap_splits_runs() {
        let a = assess(&[0, 14, 28, 42, 56, 80, 94, 108, 122, 136], 1, 1);
        let periods = find_normal_periods("p", &a, &[], &cfg());
        assert_eq!(periods.len(), 2);
        assert_eq!(periods[1].start_date, day(80));
    }

    #[test]
    fn covid_between_long_runs_keeps_both_halves() {
        let days: Vec<i64> = (0..14).map(|i| i * 14).collect();
        let a = assess(&days, 1, 1);
        // Exclusion [91, 119] swallows the assessments at 98 and 112.
        let ex = covid_exclusions(&[CovidEvent { report_date: day(98) }], &cfg());
        let periods = find_normal_periods("p", &a, &ex, &cfg());
        assert_eq!(periods.len(), 2);
        assert_eq!(periods[0].end_date, day(84));
        assert_eq!(periods[1].start_date, day(126));
        for p in &periods {
            assert!(!ex.iter().any(|e| e.span().intersects(&p.span())));
        }
    }

    fn baseline() -> NormalPeriod {
        NormalPeriod {
            participant_id: "p".into(),
            start_date: day(0),
            end_date: day(56),
            assessment_count: 5,
            mean_phq8: 2.0,
            mean_gad7: 1.0,
        }
    }

    #[test]
    fn phq_only_episode() {
        let eps = find_episodes(&assess(&[70], 7, 3), &baseline(), &cfg());
        assert_eq!(eps.len(), 1);
        let e = &eps[0];
        assert_eq!(e.category, Category::PhqOnly);
        assert_eq!(e.phq_delta, 5.0);
        assert_eq!(e.magnitude_phq, Magnitude::D5To9);
        assert_eq!(e.magnitude_gad, Magnitude::None);
        assert_eq!(e.period().len_days(), 36);
    }

    #[test]
    fn both_episode_with_large_magnitudes() {
        let eps = find_episodes(&assess(&[70], 12, 11), &baseline(), &cfg());
        assert_eq!(eps[0].category, Category::Both);
        assert_eq!(eps[0].magnitude_phq, Magnitude::D10Plus);
        assert_eq!(eps[0].magnitude_gad, Magnitude::D10Plus);
    }

    #[test]
    fn delta_below_five_is_not_an_episode() {
        assert!(find_episodes(&assess(&[70], 6, 1), &baseline(), &cfg()).is_empty());
    }

    #[test]
    fn assessments_inside_baseline_are_ignored() {
        assert!(find_episodes(&assess(&[28], 12, 12), &baseline(), &cfg()).is_empty());
    }

    #[test]
    fn nearest_preceding_baseline_is_used() {
        let early = baseline();
        let late = NormalPeriod {
            start_date: day(100),
            end_date: day(160),
            mean_phq8: 0.0,
            mean_gad7: 0.0,
            ..baseline()
        };
        // phq 6: delta 4 against early, 6 against late.
        let a = assess(&[80, 180], 6, 0);
        let eps = find_participant_episodes(&a, &[early, late], &cfg());
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].assessment_date, day(180));
    }

    #[test]
    fn day_labels_cover_episode_windows() {
        let eps = find_episodes(&assess(&[200, 210], 12, 1), &baseline(), &cfg());
        let labels = day_labels(&[baseline()], &eps, DateSpan::new(day(0), day(240)));
        assert_eq!(labels.len(), 241);
        for l in &labels {
            let n = (l.date - day(0)).num_days();
            let expected = if (179..=224).contains(&n) {
                DayLabel::Anomalous
            } else if n <= 56 {
                DayLabel::NormalEligible
            } else {
                DayLabel::Ambiguous
            };
            assert_eq!(l.label, expected, "day {n}");
        }
        let overlap = &labels[200];
        assert_eq!(overlap.episode_ids.len(), 2);
        assert_eq!(labels[180].episode_ids.len(), 1);
        assert_eq!(labels[224].episode_ids.len(), 1);
    }

    #[test]
    fn single_episode_window_bounds() {
        let eps = find_episodes(&assess(&[200], 12, 1), &baseline(), &cfg());
        let labels = day_labels(&[], &eps, DateSpan::new(day(170), day(220)));
        let anomalous: Vec<i64> = labels
            .iter()
            .filter(|l| l.label == DayLabel::Anomalous)
            .map(|l| (l.date - day(0)).num_days())
            .collect();
        assert_eq!(anomalous.first(), Some(&179));
        assert_eq!(anomalous.last(), Some(&214));
        assert_eq!(anomalous.len(), 36);
    }
}
