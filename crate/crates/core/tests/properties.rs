use std::collections::BTreeSet;
use std::io::Cursor;

use chrono::{Duration, NaiveDate};
use moodshift::cohort::{
    parse_cohort, write_cohort, Assessment, Cohort, CovidEvent, MinuteRecord, ParseOptions, Participant, SleepStage,
};
use moodshift::detector::{select_threshold, Detection};
use moodshift::evaluation::adjusted_prf;
use moodshift::explain::{exact, sampled, FnModel};
use moodshift::features::{
    impute_linear, mean_std, normalize_series, resting_heart_rate_with, DayVector, FEATURE_COUNT,
};
use moodshift::labeling::DayLabel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn base_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 1, 4).unwrap()
}

fn stage(i: u8) -> SleepStage {
    [SleepStage::Awake, SleepStage::Light, SleepStage::Deep, SleepStage::Rem, SleepStage::None][i as usize % 5]
}

prop_compose! {
    fn minute()(
        day in 0i64..3,
        minute in 0u16..1440,
        hr in prop::option::of(35.0f64..190.0),
        steps in prop::option::of(0u32..200),
        s in 0u8..5,
    ) -> MinuteRecord {
        MinuteRecord {
            date: base_date() + Duration::days(day),
            minute,
            heart_rate: hr,
            steps,
            sleep_stage: stage(s),
        }
    }
}

prop_compose! {
    fn participant(idx: usize)(
        minutes in prop::collection::vec(minute(), 0..60),
        days in prop::collection::btree_set(0i64..200, 0..8),
        scores in prop::collection::vec((0u8..=24, 0u8..=21), 8),
        covid in prop::collection::btree_set(0i64..200, 0..3),
    ) -> Participant {
        let mut seen = BTreeSet::new();
        let mut minutes: Vec<MinuteRecord> =
            minutes.into_iter().filter(|m| seen.insert((m.date, m.minute))).collect();
        minutes.sort_by_key(|m| (m.date, m.minute));
        Participant {
            id: format!("P{idx:03}"),
            minutes,
            assessments: days
                .iter()
                .zip(&scores)
                .map(|(&d, &(phq8, gad7))| Assessment { date: base_date() + Duration::days(d), phq8, gad7 })
                .collect(),
            covid_events: covid.iter().map(|&d| CovidEvent { report_date: base_date() + Duration::days(d) }).collect(),
        }
    }
}

fn detection(i: usize, label: DayLabel, episode: Option<usize>, flagged: bool) -> Detection {
    Detection {
        participant_id: "P".into(),
        end_date: base_date() + Duration::days(i as i64),
        error: 0.0,
        threshold: 0.0,
        flagged,
        label,
        episode_ids: episode.map(|e| vec![format!("E{e}")]).unwrap_or_default(),
    }
}

fn label_of(code: u8) -> DayLabel {
    match code % 3 {
        0 => DayLabel::NormalEligible,
        1 => DayLabel::Anomalous,
        _ => DayLabel::Ambiguous,
    }
}

proptest! {
    #[test]
    fn cohort_jsonl_round_trip(a in participant(1), b in participant(2)) {
        let cohort = Cohort { participants: vec![a, b], ..Cohort::default() };
        let mut buf = Vec::new();
        write_cohort(&mut buf, &cohort).unwrap();
        let parsed = parse_cohort(Cursor::new(buf), ParseOptions { strict: true }).unwrap();
        prop_assert_eq!(parsed.cohort, cohort);
    }

    #[test]
    fn resting_hr_is_a_mean_of_resting_minutes(
        steps in prop::collection::vec(prop::option::of(prop_oneof![3 => Just(0u32), 1 => 1u32..50]), 1440),
        hr in prop::collection::vec(prop::option::of(40.0f64..120.0), 1440),
        run in 1usize..30,
    ) {
        let day: Vec<MinuteRecord> = (0..1440)
            .map(|i| MinuteRecord {
                date: base_date(),
                minute: i as u16,
                heart_rate: hr[i],
                steps: steps[i],
                sleep_stage: SleepStage::None,
            })
            .collect();
        // Minutes in a long enough zero run, found by scanning runs.
        let mut resting = vec![false; 1440];
        let mut i = 0;
        while i < 1440 {
            if steps[i] != Some(0) {
                i += 1;
                continue;
            }
            let start = i;
            while i < 1440 && steps[i] == Some(0) {
                i += 1;
            }
            if i - start >= run {
                resting[start..i].fill(true);
            }
        }
        let vals: Vec<f64> = (0..1440).filter(|&i| resting[i]).filter_map(|i| hr[i]).collect();
        let got = resting_heart_rate_with(&day, run);
        if vals.is_empty() {
            prop_assert_eq!(got, None);
        } else {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
            let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
            let got = got.unwrap();
            prop_assert!((got - mean).abs() <= 1e-9 * mean);
            prop_assert!(got >= lo - 1e-9 && got <= hi + 1e-9);
        }
    }

    #[test]
    fn imputation_keeps_observed_values_and_interpolates_between(
        series in prop::collection::vec(prop::option::of(-50.0f64..50.0), 1..60)
    ) {
        prop_assume!(series.iter().any(Option::is_some));
        let out = impute_linear(&series).unwrap();
        prop_assert_eq!(out.len(), series.len());
        for (o, s) in out.iter().zip(&series) {
            if let Some(v) = s {
                prop_assert_eq!(o, v);
            }
        }
        let present: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
        for w in present.windows(2) {
            let (a, b) = (series[w[0]].unwrap(), series[w[1]].unwrap());
            for v in &out[w[0]..=w[1]] {
                prop_assert!(*v >= a.min(b) - 1e-9 && *v <= a.max(b) + 1e-9);
            }
        }
    }

    #[test]
    fn normalized_series_has_zero_mean_unit_std(xs in prop::collection::vec(-1e3f64..1e3, 2..100)) {
        let (m, s) = mean_std(&xs);
        let z = normalize_series(&xs, m, s);
        let (zm, zs) = mean_std(&z);
        prop_assert!(zm.abs() < 1e-9);
        if s > 1e-6 {
            prop_assert!((zs - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(z.iter().all(|v| v.abs() < 1e6));
        }
    }

    #[test]
    fn threshold_is_monotone_in_percentile(errors in prop::collection::vec(0.0f64..5.0, 1..80), p in 0.0f64..99.0) {
        let lo = select_threshold(&errors, p).unwrap();
        let hi = select_threshold(&errors, p + 1.0).unwrap();
        prop_assert!(lo <= hi);
        let min = errors.iter().cloned().fold(f64::MAX, f64::min);
        let max = errors.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(lo >= min && hi <= max);
    }

    #[test]
    fn flagging_more_windows_never_lowers_recall(
        cells in prop::collection::vec((0u8..3, 0usize..4, any::<bool>(), any::<bool>()), 1..50)
    ) {
        let build = |extra: bool| -> Vec<Detection> {
            cells
                .iter()
                .enumerate()
                .map(|(i, &(code, ep, f, g))| {
                    let label = label_of(code);
                    let episode = (label == DayLabel::Anomalous).then_some(ep);
                    detection(i, label, episode, f || (extra && g))
                })
                .collect()
        };
        let (a, b) = (adjusted_prf(&build(false)), adjusted_prf(&build(true)));
        prop_assert!(b.recall >= a.recall);
        prop_assert!(b.fp >= a.fp);
        prop_assert_eq!(a.tp + a.fn_, b.tp + b.fn_);
    }

    #[test]
    fn exact_shapley_is_efficient_for_any_model(
        weights in prop::collection::vec(-2.0f64..2.0, 6),
        window in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 2),
        background in prop::collection::vec(prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 2), 1..4),
    ) {
        let model = FnModel(|w: &[DayVector]| {
            let mut s = 0.0;
            for (d, row) in w.iter().enumerate() {
                for f in 0..FEATURE_COUNT {
                    let v = row[f] * weights[d * FEATURE_COUNT + f];
                    s += v * v + v.sin();
                }
            }
            s
        });
        let sv = exact(&model, &window, &background).unwrap();
        let total: f64 = sv.phi.iter().flatten().sum();
        prop_assert!((total + sv.base_value - sv.error).abs() < 1e-9);
    }
}

/// Mean absolute deviation from exact values shrinks as permutations grow.
#[test]
fn sampled_shapley_converges_with_more_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = FnModel(|w: &[DayVector]| w.iter().flatten().map(|v| v * v).sum::<f64>() + w[0][0] * w[1][2]);
    let mut gaps = [0.0; 3];
    for fixture in 0..10u64 {
        let window: Vec<DayVector> = (0..2).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let background: Vec<Vec<DayVector>> = (0..5)
            .map(|_| (0..2).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect())
            .collect();
        let ex = exact(&model, &window, &background).unwrap();
        for (k, m) in [50, 800, 12800].into_iter().enumerate() {
            let mut srng = ChaCha8Rng::seed_from_u64(fixture);
            let sm = sampled(&model, &window, &background, m, &mut srng).unwrap();
            gaps[k] += ex.phi.iter().flatten().zip(sm.phi.iter().flatten()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
    }
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}
