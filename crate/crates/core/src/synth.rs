//! Seeded synthetic cohort with known normal periods, episodes and injected
//! behavioural effects.
//!
//! Each participant starts with a low-score baseline that forms one normal
//! period. Every later assessment is mildly elevated (at least one score of 5
//! or more, but less than the baseline mean plus the episode delta) except the
//! scheduled episode assessments, whose scores are derived from the intended
//! delta. The labeling rules therefore recover the injected structure exactly.

use std::io::Write;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    write_participant, Assessment, Cohort, CovidEvent, MinuteRecord, Participant, SleepStage, GAD7_MAX,
    MINUTES_PER_DAY, PHQ8_MAX,
};
use crate::error::{Error, Result};
use crate::labeling::{Category, DateSpan, Episode, LabelingConfig, Magnitude};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dist {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBaselines {
    pub sleep_minutes: Dist,
    pub steps: Dist,
    pub resting_hr: Dist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyNoise {
    pub sleep_minutes: f64,
    /// Relative day-to-day variation of step totals.
    pub steps_fraction: f64,
    pub resting_hr: f64,
}

/// Behavioural change applied across an anomalous period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectProfile {
    pub resting_hr_bpm: f64,
    /// Relative change in daily steps (negative for a decline).
    pub steps_fraction: f64,
    pub sleep_minutes: f64,
    pub onset_days: u32,
    pub offset_days: u32,
}

impl Default for EffectProfile {
    fn default() -> Self {
        EffectProfile {
            resting_hr_bpm: 6.0,
            steps_fraction: -0.35,
            sleep_minutes: -45.0,
            onset_days: 5,
            offset_days: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryEffects {
    pub both: EffectProfile,
    pub phq_only: EffectProfile,
    pub gad_only: EffectProfile,
}

impl CategoryEffects {
    pub fn get(&self, c: Category) -> &EffectProfile {
        match c {
            Category::Both => &self.both,
            Category::PhqOnly => &self.phq_only,
            Category::GadOnly => &self.gad_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    pub both: f64,
    pub phq_only: f64,
    pub gad_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub participants: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    pub cadence_days: u32,
    /// Each assessment after the first moves by up to this many days.
    pub cadence_jitter_days: u32,
    /// Inclusive range of the first assessment's day index.
    pub first_assessment_day: [u32; 2],
    /// Inclusive range of the number of baseline assessments.
    pub baseline_assessments: [usize; 2],
    pub baseline: FeatureBaselines,
    pub daily_noise: DailyNoise,
    /// Relative weekly swing in steps; sleep swings by an hour times this.
    pub weekly_amplitude: f64,
    /// Probability that a participant has episodes.
    pub episode_rate: f64,
    pub episodes_per_participant: usize,
    /// Minimum days from the end of the baseline to an episode assessment.
    pub min_episode_gap_days: u32,
    /// Minimum days between two episode assessments.
    pub min_episode_spacing_days: u32,
    pub category_mix: CategoryMix,
    /// Probability that an episode's deltas reach the large bucket.
    pub large_fraction: f64,
    pub effects: CategoryEffects,
    /// Multiplier on the effect profile for large-delta episodes.
    pub large_effect_scale: f64,
    pub missing_day_rate: f64,
    pub partial_gap_rate: f64,
    pub covid_rate: f64,
    /// Probability that a participant gets a short sleep dip inside the baseline.
    pub sleep_perturbation_rate: f64,
    pub sleep_perturbation_minutes: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            participants: 200,
            days: 180,
            start_date: NaiveDate::from_ymd_opt(2021, 1, 4).expect("valid date"),
            cadence_days: 14,
            cadence_jitter_days: 0,
            first_assessment_day: [3, 10],
            baseline_assessments: [5, 7],
            baseline: FeatureBaselines {
                sleep_minutes: Dist { mean: 420.0, std: 40.0 },
                steps: Dist { mean: 8000.0, std: 2500.0 },
                resting_hr: Dist { mean: 62.0, std: 6.0 },
            },
            daily_noise: DailyNoise {
                sleep_minutes: 25.0,
                steps_fraction: 0.15,
                resting_hr: 1.2,
            },
            weekly_amplitude: 0.15,
            episode_rate: 0.3,
            episodes_per_participant: 1,
            min_episode_gap_days: 28,
            min_episode_spacing_days: 42,
            category_mix: CategoryMix {
                both: 0.4,
                phq_only: 0.3,
                gad_only: 0.3,
            },
            large_fraction: 0.5,
            effects: CategoryEffects::default(),
            large_effect_scale: 1.5,
            missing_day_rate: 0.03,
            partial_gap_rate: 0.1,
            covid_rate: 0.05,
            sleep_perturbation_rate: 0.0,
            sleep_perturbation_minutes: -150.0,
            seed: 42,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let rates = [
            ("episode_rate", self.episode_rate),
            ("large_fraction", self.large_fraction),
            ("missing_day_rate", self.missing_day_rate),
            ("partial_gap_rate", self.partial_gap_rate),
            ("covid_rate", self.covid_rate),
            ("sleep_perturbation_rate", self.sleep_perturbation_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.cadence_days < 1 {
            return bad("cadence_days must be at least 1".into());
        }
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        let labeling = LabelingConfig::default();
        let jitter = self.cadence_jitter_days as i64;
        let cadence = self.cadence_days as i64;
        if cadence + 2 * jitter > labeling.max_gap_days {
            return bad(format!(
                "cadence {cadence} with jitter {jitter} can exceed the {}-day assessment gap limit",
                labeling.max_gap_days
            ));
        }
        if jitter * 2 >= cadence {
            return bad("cadence_jitter_days must be less than half the cadence".into());
        }
        let [lo, hi] = self.baseline_assessments;
        if lo > hi || lo < labeling.min_normal_assessments {
            return bad(format!(
                "baseline_assessments must be an ordered range starting at {} or more",
                labeling.min_normal_assessments
            ));
        }
        if (lo as i64 - 1) * (cadence - 2 * jitter) < labeling.min_normal_span_days {
            return bad(format!(
                "{lo} baseline assessments cannot span {} days",
                labeling.min_normal_span_days
            ));
        }
        if self.first_assessment_day[0] > self.first_assessment_day[1] {
            return bad("first_assessment_day must be an ordered range".into());
        }
        let m = &self.category_mix;
        if [m.both, m.phq_only, m.gad_only].iter().any(|w| *w < 0.0) || m.both + m.phq_only + m.gad_only <= 0.0 {
            return bad("category_mix weights must be non-negative with a positive sum".into());
        }
        if self.large_effect_scale < 0.0 {
            return bad("large_effect_scale must be non-negative".into());
        }
        Ok(())
    }

    pub fn participant_id(&self, index: usize) -> String {
        format!("P{:04}", index + 1)
    }

    pub fn calendar(&self) -> DateSpan {
        DateSpan::new(self.start_date, self.start_date + Duration::days(self.days as i64 - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalSpanTruth {
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub assessments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTruth {
    pub id: String,
    pub assessment_date: NaiveDate,
    pub category: Category,
    pub magnitude_phq: Magnitude,
    pub magnitude_gad: Magnitude,
    pub effect_start: NaiveDate,
    pub effect_end: NaiveDate,
    pub effect_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub participant_id: String,
    pub normal_spans: Vec<NormalSpanTruth>,
    pub episodes: Vec<EpisodeTruth>,
    pub covid_reports: Vec<NaiveDate>,
    pub sleep_perturbations: Vec<DateSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub participants: Vec<ParticipantTruth>,
}

impl GroundTruth {
    pub fn episode_count(&self) -> usize {
        self.participants.iter().map(|p| p.episodes.len()).sum()
    }
}

fn normal(rng: &mut ChaCha8Rng, d: Dist) -> f64 {
    Normal::new(d.mean, d.std.max(0.0)).map_or(d.mean, |n| n.sample(rng))
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    normal(rng, Dist { mean: 0.0, std })
}

fn mean_of(xs: &[u8]) -> f64 {
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
}

/// Score whose delta over `mean` falls in the requested bucket.
fn episode_score(rng: &mut ChaCha8Rng, mean: f64, magnitude: Magnitude, max: u8, cfg: &LabelingConfig) -> Result<u8> {
    let base = mean.ceil() as i64;
    let (lo, hi) = match magnitude {
        Magnitude::D5To9 => (cfg.episode_delta.ceil() as i64, cfg.large_delta.ceil() as i64 - 2),
        Magnitude::D10Plus => (cfg.large_delta.ceil() as i64, cfg.large_delta.ceil() as i64 + 4),
        Magnitude::None => (0, 0),
    };
    let candidates: Vec<u8> = (base + lo..=base + hi)
        .filter(|&s| s >= 0 && s <= max as i64)
        .map(|s| s as u8)
        .filter(|&s| Magnitude::from_delta(s as f64 - mean, cfg) == magnitude)
        .collect();
    candidates
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::Config(format!("no score realizes a {} delta over mean {mean}", magnitude.as_str())))
}

/// Score of at least the normal cutoff whose delta stays below the episode delta.
fn mild_score(rng: &mut ChaCha8Rng, mean: f64, cfg: &LabelingConfig) -> u8 {
    let lo = cfg.normal_score_below;
    let hi = (lo..=PHQ8_MAX.min(GAD7_MAX))
        .take_while(|&s| s as f64 - mean < cfg.episode_delta)
        .last()
        .unwrap_or(lo);
    rng.gen_range(lo..=hi)
}

fn low_score(rng: &mut ChaCha8Rng, cfg: &LabelingConfig) -> u8 {
    rng.gen_range(0..cfg.normal_score_below)
}

/// Fraction of the full effect on `day` inside `[start, end]`.
fn ramp(day: i64, start: i64, end: i64, onset: u32, offset: u32) -> f64 {
    if day < start || day > end {
        return 0.0;
    }
    let up = (day - start + 1) as f64 / onset.max(1) as f64;
    let down = (end - day + 1) as f64 / offset.max(1) as f64;
    up.min(down).min(1.0)
}

struct DayTarget {
    sleep: f64,
    steps: f64,
    resting_hr: f64,
    missing: bool,
}

struct Plan {
    assessments: Vec<Assessment>,
    truth: ParticipantTruth,
    /// Per episode: day indices of the effect window, profile and scale.
    effects: Vec<(i64, i64, EffectProfile, f64)>,
    /// Day index ranges of sleep dips.
    dips: Vec<(i64, i64)>,
}

fn pick_category(rng: &mut ChaCha8Rng, mix: &CategoryMix) -> Category {
    let total = mix.both + mix.phq_only + mix.gad_only;
    let u = rng.gen::<f64>() * total;
    if u < mix.both {
        Category::Both
    } else if u < mix.both + mix.phq_only {
        Category::PhqOnly
    } else {
        Category::GadOnly
    }
}

fn plan_participant(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, id: &str) -> Result<Plan> {
    let lab = LabelingConfig::default();
    let date = |d: i64| cfg.start_date + Duration::days(d);
    let last_day = cfg.days as i64 - 1;

    let mut days: Vec<i64> = Vec::new();
    let mut d = rng.gen_range(cfg.first_assessment_day[0]..=cfg.first_assessment_day[1]) as i64;
    let jitter = cfg.cadence_jitter_days as i64;
    while d <= last_day {
        days.push(d);
        let j = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
        d = d + cfg.cadence_days as i64 + j;
    }
    let nb = rng.gen_range(cfg.baseline_assessments[0]..=cfg.baseline_assessments[1]);
    if days.len() < nb {
        return Err(Error::Config(format!(
            "participant {id}: {} days hold only {} assessments, fewer than the {nb}-assessment baseline",
            cfg.days,
            days.len()
        )));
    }
    // Baseline scores of at least 1 keep the mean high enough that a score of
    // 5 stays below the episode delta.
    let phq_base: Vec<u8> = (0..nb).map(|_| rng.gen_range(1..lab.normal_score_below)).collect();
    let gad_base: Vec<u8> = (0..nb).map(|_| rng.gen_range(1..lab.normal_score_below)).collect();
    let (phq_mean, gad_mean) = (mean_of(&phq_base), mean_of(&gad_base));
    let baseline_end = days[nb - 1];

    let mut episode_slots: Vec<usize> = Vec::new();
    if cfg.episodes_per_participant > 0 && rng.gen_bool(cfg.episode_rate) {
        let candidates: Vec<usize> = (nb..days.len())
            .filter(|&j| {
                days[j] >= baseline_end + cfg.min_episode_gap_days as i64
                    && days[j] + lab.anomalous_days_after <= last_day
            })
            .collect();
        let spacing = cfg.min_episode_spacing_days as i64;
        let count = cfg.episodes_per_participant;
        for k in 0..count {
            let after = episode_slots.last().map(|&j| days[j] + spacing);
            let remaining = (count - 1 - k) as i64;
            let feasible: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&j| after.is_none_or(|a| days[j] >= a))
                .filter(|&j| {
                    candidates
                        .last()
                        .is_some_and(|&l| days[j] + remaining * spacing <= days[l])
                })
                .collect();
            match feasible.choose(rng) {
                Some(&j) => episode_slots.push(j),
                None => {
                    return Err(Error::Config(format!(
                        "participant {id}: cannot schedule {count} episodes at least {spacing} days apart within {} days",
                        cfg.days
                    )))
                }
            }
        }
    }

    let mut assessments = Vec::with_capacity(days.len());
    let mut episodes = Vec::new();
    let mut effects = Vec::new();
    for (j, &day) in days.iter().enumerate() {
        let (phq8, gad7) = if j < nb {
            (phq_base[j], gad_base[j])
        } else if episode_slots.contains(&j) {
            let category = pick_category(rng, &cfg.category_mix);
            let large = rng.gen_bool(cfg.large_fraction);
            let magnitude = if large { Magnitude::D10Plus } else { Magnitude::D5To9 };
            let (phq_hit, gad_hit) = match category {
                Category::Both => (true, true),
                Category::PhqOnly => (true, false),
                Category::GadOnly => (false, true),
            };
            let phq8 = if phq_hit {
                episode_score(rng, phq_mean, magnitude, PHQ8_MAX, &lab)?
            } else {
                low_score(rng, &lab)
            };
            let gad7 = if gad_hit {
                episode_score(rng, gad_mean, magnitude, GAD7_MAX, &lab)?
            } else {
                low_score(rng, &lab)
            };
            let scale = if large { cfg.large_effect_scale } else { 1.0 };
            let (start, end) = (day - lab.anomalous_days_before, day + lab.anomalous_days_after);
            effects.push((start, end, cfg.effects.get(category).clone(), scale));
            episodes.push(EpisodeTruth {
                id: Episode::make_id(id, date(day)),
                assessment_date: date(day),
                category,
                magnitude_phq: Magnitude::from_delta(phq8 as f64 - phq_mean, &lab),
                magnitude_gad: Magnitude::from_delta(gad7 as f64 - gad_mean, &lab),
                effect_start: date(start),
                effect_end: date(end),
                effect_scale: scale,
            });
            (phq8, gad7)
        } else {
            match rng.gen_range(0..3) {
                0 => (mild_score(rng, phq_mean, &lab), low_score(rng, &lab)),
                1 => (low_score(rng, &lab), mild_score(rng, gad_mean, &lab)),
                _ => (mild_score(rng, phq_mean, &lab), mild_score(rng, gad_mean, &lab)),
            }
        };
        assessments.push(Assessment {
            date: date(day),
            phq8,
            gad7,
        });
    }

    let mut covid_reports = Vec::new();
    let covid_from = baseline_end + lab.covid_days_before + 1;
    if covid_from <= last_day && rng.gen_bool(cfg.covid_rate) {
        covid_reports.push(date(rng.gen_range(covid_from..=last_day)));
    }

    let mut dips = Vec::new();
    let mut sleep_perturbations = Vec::new();
    if rng.gen_bool(cfg.sleep_perturbation_rate) {
        let (lo, hi) = (days[0] + 7, baseline_end - 10);
        if lo <= hi {
            let s = rng.gen_range(lo..=hi);
            dips.push((s, s + 2));
            sleep_perturbations.push(DateSpan::new(date(s), date(s + 2)));
        }
    }

    Ok(Plan {
        assessments,
        truth: ParticipantTruth {
            participant_id: id.to_string(),
            normal_spans: vec![NormalSpanTruth {
                start_date: date(days[0]),
                end_date: date(baseline_end),
                assessments: nb,
            }],
            episodes,
            covid_reports,
            sleep_perturbations,
        },
        effects,
        dips,
    })
}

fn daily_targets(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, plan: &Plan) -> Vec<DayTarget> {
    let sleep_base = normal(rng, cfg.baseline.sleep_minutes).clamp(300.0, 540.0);
    let steps_base = normal(rng, cfg.baseline.steps).max(2000.0);
    let rhr_base = normal(rng, cfg.baseline.resting_hr).clamp(45.0, 90.0);
    let phase = rng.gen_range(0..7) as f64;
    (0..cfg.days as i64)
        .map(|d| {
            let weekday = (cfg.start_date + Duration::days(d)).weekday().num_days_from_monday() as f64;
            let wave = (2.0 * std::f64::consts::PI * (weekday + phase) / 7.0).sin() * cfg.weekly_amplitude;
            let mut sleep = sleep_base + 60.0 * wave + gauss(rng, cfg.daily_noise.sleep_minutes);
            let mut steps = steps_base * (1.0 + wave) * (1.0 + gauss(rng, cfg.daily_noise.steps_fraction));
            let mut resting_hr = rhr_base + gauss(rng, cfg.daily_noise.resting_hr);
            for (start, end, profile, scale) in &plan.effects {
                let e = ramp(d, *start, *end, profile.onset_days, profile.offset_days) * scale;
                resting_hr += e * profile.resting_hr_bpm;
                steps *= (1.0 + e * profile.steps_fraction).max(0.05);
                sleep += e * profile.sleep_minutes;
            }
            for (start, end) in &plan.dips {
                if (*start..=*end).contains(&d) {
                    sleep += cfg.sleep_perturbation_minutes;
                }
            }
            DayTarget {
                sleep: sleep.clamp(120.0, 720.0),
                steps: steps.max(0.0),
                resting_hr,
                missing: rng.gen_bool(cfg.missing_day_rate),
            }
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Activity {
    Asleep,
    Still,
    Fidget,
    Walking,
}

fn day_minutes(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, date: NaiveDate, t: &DayTarget, out: &mut Vec<MinuteRecord>) {
    const CYCLE: [(SleepStage, usize); 4] = [
        (SleepStage::Light, 50),
        (SleepStage::Deep, 20),
        (SleepStage::Rem, 18),
        (SleepStage::Awake, 2),
    ];
    let n = MINUTES_PER_DAY;
    let mut stage = vec![SleepStage::None; n];
    let mut activity = vec![Activity::Still; n];
    let mut steps = vec![0u32; n];

    let sleep_start = rng.gen_range(20..80usize);
    let target = t.sleep.round() as usize;
    let (mut asleep, mut m, mut pos) = (0usize, sleep_start, 0usize);
    while asleep < target && m < n {
        let mut acc = 0;
        let s = CYCLE
            .iter()
            .find(|(_, len)| {
                acc += len;
                pos % 90 < acc
            })
            .map_or(SleepStage::Light, |(s, _)| *s);
        stage[m] = s;
        if s.is_asleep() {
            asleep += 1;
            activity[m] = Activity::Asleep;
        }
        m += 1;
        pos += 1;
    }
    let wake = (m + 30).min(n - 1);
    let bed = 1350usize.max(wake + 1).min(n);

    let mut walking = (t.steps / 100.0).round() as usize;
    let span = bed.saturating_sub(wake);
    while walking > 0 && span > 30 {
        let len = walking.min(rng.gen_range(5..=30));
        let start = rng.gen_range(wake..bed - len);
        for i in start..start + len {
            activity[i] = Activity::Walking;
            steps[i] = rng.gen_range(80..=120);
        }
        walking -= len;
    }
    for i in wake..bed {
        if activity[i] == Activity::Still && rng.gen_bool(0.2) {
            activity[i] = Activity::Fidget;
            steps[i] = rng.gen_range(1..=15);
        }
    }

    let gap = rng.gen_bool(cfg.partial_gap_rate).then(|| {
        let len = rng.gen_range(30..=480);
        let start = rng.gen_range(0..n);
        start..(start + len).min(n)
    });
    for i in 0..n {
        let offset = match activity[i] {
            Activity::Asleep => -5.0,
            Activity::Still => 3.0,
            Activity::Fidget => 8.0,
            Activity::Walking => 30.0,
        };
        let hr = (t.resting_hr + offset + gauss(rng, 3.0)).round().clamp(30.0, 220.0);
        let missing = gap.as_ref().is_some_and(|g| g.contains(&i));
        out.push(MinuteRecord {
            date,
            minute: i as u16,
            heart_rate: (!missing).then_some(hr),
            steps: (!missing).then_some(steps[i]),
            sleep_stage: stage[i],
        });
    }
}

fn participant_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One participant's data and ground truth. Independent of every other
/// participant, so any subset can be generated alone.
pub fn generate_participant(cfg: &ScenarioConfig, index: usize) -> Result<(Participant, ParticipantTruth)> {
    let mut rng = participant_rng(cfg.seed, index);
    let id = cfg.participant_id(index);
    let plan = plan_participant(cfg, &mut rng, &id)?;
    let targets = daily_targets(cfg, &mut rng, &plan);
    let mut minutes = Vec::with_capacity(cfg.days * MINUTES_PER_DAY);
    for (d, t) in targets.iter().enumerate() {
        if t.missing {
            continue;
        }
        day_minutes(cfg, &mut rng, cfg.start_date + Duration::days(d as i64), t, &mut minutes);
    }
    let participant = Participant {
        id,
        minutes,
        assessments: plan.assessments,
        covid_events: plan
            .truth
            .covid_reports
            .iter()
            .map(|&report_date| CovidEvent { report_date })
            .collect(),
    };
    Ok((participant, plan.truth))
}

/// The whole cohort in memory.
pub fn generate_cohort(cfg: &ScenarioConfig) -> Result<(Cohort, GroundTruth)> {
    generate_cohort_with(cfg, Execution::default())
}

pub fn generate_cohort_with(cfg: &ScenarioConfig, exec: Execution) -> Result<(Cohort, GroundTruth)> {
    cfg.validate()?;
    let results = exec.map_range(cfg.participants, |i| generate_participant(cfg, i));
    let mut cohort = Cohort::default();
    let mut truth = GroundTruth {
        participants: Vec::with_capacity(cfg.participants),
    };
    for r in results {
        let (p, t) = r?;
        cohort.participants.push(p);
        truth.participants.push(t);
    }
    Ok((cohort, truth))
}

/// Stream the cohort as JSONL one participant at a time and return the ground
/// truth.
pub fn write_cohort_streaming<W: Write>(cfg: &ScenarioConfig, mut out: W) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut truth = GroundTruth {
        participants: Vec::with_capacity(cfg.participants),
    };
    for i in 0..cfg.participants {
        let (p, t) = generate_participant(cfg, i)?;
        write_participant(&mut out, &p)?;
        truth.participants.push(t);
    }
    out.flush().map_err(|e| Error::io("writing cohort", e))?;
    Ok(truth)
}
