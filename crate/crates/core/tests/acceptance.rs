//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::HashSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use moodshift::cohort::{MinuteRecord, SleepStage};
use moodshift::detector::Detection;
use moodshift::evaluation::{adjusted_prf, AdjustedPrf, StratumPrf};
use moodshift::explain::{exact, sampled, ErrorModel};
use moodshift::features::{resting_heart_rate, DayVector, FEATURE_COUNT};
use moodshift::labeling::{label_participant, DayLabel, LabelingConfig};
use moodshift::lstm::{gradient_check, train_with, LstmAutoencoder, TrainConfig};
use moodshift::pipeline::{files, run_scenario_in_memory, run_stage, InMemoryRun, PipelineConfig, Stage};
use moodshift::synth::{generate_participant, ScenarioConfig};
use moodshift::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_window(rng: &mut ChaCha8Rng, days: usize) -> Vec<DayVector> {
    (0..days)
        .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        .collect()
}

// 1 -------------------------------------------------------------------------

fn structure(run: &InMemoryRun) -> Outcome {
    let m = &run.metrics;
    let checks = [
        ("episode counts", m.episode_counts.total == run.episodes.len() && m.episode_counts.total > 0),
        ("threshold sweep", m.threshold_sweep.len() == 11),
        ("detection rate", m.detection_rate.is_some()),
        ("aligned averages", !run.aligned.is_empty()),
        ("category strata", m.per_category.len() == 3),
        ("magnitude strata", m.per_magnitude.len() == 4),
    ];
    let missing: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        missing.is_empty(),
        if missing.is_empty() {
            "synthetic cohort; every figure analogue produced".to_string()
        } else {
            format!("missing: {}", missing.join(", "))
        },
    )
}

// 2 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let start = Instant::now();
    let model = LstmAutoencoder::init(4, 2024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let window = random_window(&mut rng, 7);
    let check = gradient_check(&model, &window, 1e-5, usize::MAX, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        check.max_relative_error < 1e-4 && secs < 10.0 && check.coordinates_checked == model.layout().len(),
        format!(
            "max relative error {:.3e} over {} parameters, {secs:.2}s",
            check.max_relative_error, check.coordinates_checked
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let window = random_window(&mut rng, 7);
    let copies = vec![window; 32];
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: 200,
        ..TrainConfig::default()
    };
    let (_, report) = train_with(&copies, &cfg, Execution::Parallel).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let reached = report.validation_loss.iter().position(|&l| l < 1e-3).map(|e| e + 1);
    outcome(
        reached.is_some() && secs < 60.0,
        format!(
            "best validation error {:.3e}, below 1e-3 at epoch {:?}, {secs:.2}s",
            report.best_validation_loss, reached
        ),
    )
}

// 4 -------------------------------------------------------------------------

/// A minute is resting if the zero-step stretch through it, walking both
/// ways, spans at least 12 minutes.
fn resting_hr_oracle(day: &[MinuteRecord]) -> Option<f64> {
    let mut steps = vec![None; 1440];
    let mut hr = vec![None; 1440];
    for m in day {
        steps[m.minute as usize] = m.steps;
        hr[m.minute as usize] = m.heart_rate;
    }
    let zero = |i: usize| steps[i] == Some(0);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..1440 {
        if !zero(i) {
            continue;
        }
        let mut left = i;
        while left > 0 && zero(left - 1) {
            left -= 1;
        }
        let mut right = i;
        while right + 1 < 1440 && zero(right + 1) {
            right += 1;
        }
        if right - left + 1 >= 12 {
            if let Some(h) = hr[i] {
                sum += h;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn random_day(rng: &mut ChaCha8Rng) -> Vec<MinuteRecord> {
    let date = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
    let zero_bias: f64 = rng.gen_range(0.3..0.97);
    let missing: f64 = rng.gen_range(0.0..0.1);
    let mut out = Vec::new();
    let mut resting = rng.gen_bool(zero_bias);
    for minute in 0..1440u16 {
        if rng.gen_bool(0.08) {
            resting = rng.gen_bool(zero_bias);
        }
        if rng.gen_bool(missing / 4.0) {
            continue;
        }
        let steps = if rng.gen_bool(missing) {
            None
        } else if resting {
            Some(0)
        } else {
            Some(rng.gen_range(0..120))
        };
        let heart_rate = (!rng.gen_bool(missing)).then(|| rng.gen_range(45.0..140.0));
        out.push(MinuteRecord {
            date,
            minute,
            heart_rate,
            steps,
            sleep_stage: SleepStage::None,
        });
    }
    // Record order must not matter.
    let k = rng.gen_range(0..out.len().max(1));
    out.rotate_left(k);
    out
}

fn resting_hr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut present = 0;
    for _ in 0..1000 {
        let day = random_day(&mut rng);
        let got = resting_heart_rate(&day);
        let want = resting_hr_oracle(&day);
        present += usize::from(want.is_some());
        if got.map(f64::to_bits) != want.map(f64::to_bits) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && present > 0,
        format!("{mismatches} mismatches over 1000 days ({present} with a value)"),
    )
}

// 5 -------------------------------------------------------------------------

fn detection(i: i64, label: DayLabel, episodes: &[&str], flagged: bool) -> Detection {
    Detection {
        participant_id: "P".into(),
        end_date: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Duration::days(i),
        error: 0.0,
        threshold: 0.0,
        flagged,
        label,
        episode_ids: episodes.iter().map(|s| s.to_string()).collect(),
    }
}

/// Enumerate episodes, then classify each window against that list.
fn naive_prf(ds: &[Detection]) -> (usize, usize, usize) {
    let mut ids: Vec<&str> = Vec::new();
    for d in ds {
        for e in &d.episode_ids {
            if !ids.contains(&e.as_str()) {
                ids.push(e);
            }
        }
    }
    let detected: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| {
            ds.iter()
                .any(|d| d.label == DayLabel::Anomalous && d.flagged && d.episode_ids.iter().any(|e| e == id))
        })
        .collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for d in ds {
        match d.label {
            DayLabel::Anomalous => {
                if d.episode_ids.iter().any(|e| detected.contains(&e.as_str())) {
                    tp += 1;
                } else {
                    fn_ += 1;
                }
            }
            DayLabel::NormalEligible => fp += usize::from(d.flagged),
            DayLabel::Ambiguous => {}
        }
    }
    (tp, fp, fn_)
}

fn prf() -> Outcome {
    let names = ["E0", "E1", "E2", "E3", "E4"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=50);
        let n_episodes = rng.gen_range(0..=5);
        let flag_rate: f64 = rng.gen_range(0.0..1.0);
        let ds: Vec<Detection> = (0..n)
            .map(|i| {
                let label = match rng.gen_range(0..10) {
                    0 => DayLabel::Ambiguous,
                    1..=4 if n_episodes > 0 => DayLabel::Anomalous,
                    _ => DayLabel::NormalEligible,
                };
                let eps: Vec<&str> = if label == DayLabel::Anomalous {
                    let first = rng.gen_range(0..n_episodes);
                    let mut v = vec![names[first]];
                    if rng.gen_bool(0.2) {
                        let second = rng.gen_range(0..n_episodes);
                        if second != first {
                            v.push(names[second]);
                        }
                    }
                    v
                } else {
                    Vec::new()
                };
                detection(i, label, &eps, rng.gen_bool(flag_rate))
            })
            .collect();
        let (tp, fp, fn_) = naive_prf(&ds);
        if adjusted_prf(&ds) != AdjustedPrf::from_counts(tp, fp, fn_) {
            mismatches += 1;
        }
    }
    let hand: Vec<Detection> = (1..=12)
        .map(|i| {
            let flagged = matches!(i, 2 | 3 | 12);
            match i {
                1..=5 => detection(i, DayLabel::Anomalous, &["A"], flagged),
                8..=10 => detection(i, DayLabel::Anomalous, &["B"], flagged),
                _ => detection(i, DayLabel::NormalEligible, &[], flagged),
            }
        })
        .collect();
    let h = adjusted_prf(&hand);
    let r4 = |x: f64| (x * 1e4).round() / 1e4;
    let hand_ok = (h.tp, h.fp, h.fn_) == (5, 1, 3)
        && r4(h.precision) == 0.8333
        && r4(h.recall) == 0.625
        && r4(h.f_score) == 0.7143;
    outcome(
        mismatches == 0 && hand_ok,
        format!(
            "{mismatches} mismatches over 1000 patterns; hand example P={:.4} R={:.4} F={:.4}",
            h.precision, h.recall, h.f_score
        ),
    )
}

// 6 -------------------------------------------------------------------------

/// Background-averaged value of every coalition, computed directly.
fn coalition_values<M: ErrorModel>(model: &M, window: &[DayVector], background: &[Vec<DayVector>]) -> Vec<f64> {
    let n = window.len() * FEATURE_COUNT;
    (0..1usize << n)
        .map(|mask| {
            background
                .iter()
                .map(|b| {
                    let x: Vec<DayVector> = (0..window.len())
                        .map(|d| {
                            let mut row = b[d];
                            for f in 0..FEATURE_COUNT {
                                if mask & (1 << (d * FEATURE_COUNT + f)) != 0 {
                                    row[f] = window[d][f];
                                }
                            }
                            row
                        })
                        .collect();
                    model.error(&x)
                })
                .sum::<f64>()
                / background.len() as f64
        })
        .collect()
}

fn shapley() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for fixture in 0..3u64 {
        let model = LstmAutoencoder::init(8, 100 + fixture).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(600 + fixture);
        let mut window = random_window(&mut rng, 2);
        let background: Vec<Vec<DayVector>> = (0..4)
            .map(|_| {
                let mut b = random_window(&mut rng, 2);
                // Cell (1, steps) matches the window in every background: a null player.
                b[1][1] = 0.75;
                b
            })
            .collect();
        window[1][1] = 0.75;

        let ex = exact(&model, &window, &background).unwrap();
        let total: f64 = ex.phi.iter().flatten().sum();
        let efficiency = (total + ex.base_value - ex.error).abs();
        let null = ex.phi[1][1].abs();

        let values = coalition_values(&model, &window, &background);
        let range = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
        let mut srng = ChaCha8Rng::seed_from_u64(700 + fixture);
        let sm = sampled(&model, &window, &background, 2000, &mut srng).unwrap();
        let gap = ex
            .phi
            .iter()
            .flatten()
            .zip(sm.phi.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let ok = efficiency < 1e-9 && null == 0.0 && gap <= 0.05 * range;
        pass &= ok;
        notes.push(format!("efficiency {efficiency:.1e} null {null:.1e} sampled gap {:.3} of range", gap / range));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    outcome(pass, format!("{}; {secs:.2}s", notes.join(" | ")))
}

// 7, 11 ---------------------------------------------------------------------

fn stratum<'a>(strata: &'a [StratumPrf], name: &str) -> &'a StratumPrf {
    strata.iter().find(|s| s.stratum == name).expect("stratum present")
}

fn benchmark(run: &InMemoryRun, elapsed: Duration) -> Outcome {
    let m = &run.metrics;
    let f = m.overall.f_score;
    let mag = |n: &str| stratum(&m.per_magnitude, n).f_score;
    let (p5, p10, g5, g10) = (mag("PHQ_d5_9"), mag("PHQ_d10_plus"), mag("GAD_d5_9"), mag("GAD_d10_plus"));
    let secs = elapsed.as_secs_f64();
    outcome(
        f >= 0.85 && p10 >= p5 && g10 >= g5 && secs < 300.0,
        format!(
            "{} episodes, F={f:.4} (P={:.4} R={:.4}); PHQ d10+ {p10:.4} vs d5-9 {p5:.4}; GAD d10+ {g10:.4} vs d5-9 {g5:.4}; {secs:.1}s",
            m.episode_counts.total, m.overall.precision, m.overall.recall
        ),
    )
}

fn sweep(run: &InMemoryRun) -> Outcome {
    let flagged: Vec<usize> = run.metrics.threshold_sweep.iter().map(|p| p.flagged).collect();
    let percentiles: Vec<f64> = run.metrics.threshold_sweep.iter().map(|p| p.percentile).collect();
    let expected: Vec<f64> = (90..=100).map(f64::from).collect();
    outcome(
        percentiles == expected && flagged.windows(2).all(|w| w[0] >= w[1]),
        format!("flagged {flagged:?}"),
    )
}

// 8 -------------------------------------------------------------------------

fn label_recovery() -> Outcome {
    let mut compared = (0, 0, 0);
    let mut failures = Vec::new();
    for seed in [1u64, 42, 2024] {
        let cfg = ScenarioConfig {
            participants: 60,
            seed,
            ..ScenarioConfig::default()
        };
        for i in 0..cfg.participants {
            let (p, truth) = generate_participant(&cfg, i).unwrap();
            let labels = label_participant(&p, Some(cfg.calendar()), &LabelingConfig::default());
            let normal: HashSet<_> = labels.normal_periods.iter().map(|n| (n.start_date, n.end_date)).collect();
            let want_normal: HashSet<_> = truth.normal_spans.iter().map(|n| (n.start_date, n.end_date)).collect();
            let episodes: HashSet<_> = labels
                .episodes
                .iter()
                .map(|e| (e.id.clone(), e.assessment_date, e.category, e.magnitude_phq, e.magnitude_gad))
                .collect();
            let want_episodes: HashSet<_> = truth
                .episodes
                .iter()
                .map(|e| (e.id.clone(), e.assessment_date, e.category, e.magnitude_phq, e.magnitude_gad))
                .collect();
            compared.0 += 1;
            compared.1 += want_normal.len();
            compared.2 += want_episodes.len();
            if normal != want_normal || episodes != want_episodes {
                failures.push(format!("seed {seed} {}", p.id));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} participants, {} normal periods, {} episodes; {} mismatched{}",
            compared.0,
            compared.1,
            compared.2,
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// 9 -------------------------------------------------------------------------

/// Upper tail of chi-square(1) by composite Simpson on `[x, x + 400]`.
fn chi2_df1_tail(x: f64) -> f64 {
    let pdf = |t: f64| (-t / 2.0).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
    let n = 400_000;
    let h = 400.0 / n as f64;
    let mut s = pdf(x) + pdf(x + 400.0);
    for k in 1..n {
        s += pdf(x + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn chi_square() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for chi2 in [6.6667, 3.841] {
        let p = moodshift::explain::chi_square_sf(chi2, 1);
        let oracle = chi2_df1_tail(chi2);
        worst = worst.max((p - oracle).abs());
        notes.push(format!("chi2={chi2}: p={p:.8} oracle={oracle:.8}"));
    }
    outcome(worst < 1e-6, format!("{}; max diff {worst:.2e}", notes.join(", ")))
}

// 10 ------------------------------------------------------------------------

fn file_run(workdir: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut cfg = PipelineConfig::default().with_seed(11);
    cfg.workdir = workdir.to_path_buf();
    cfg.scenario.participants = 40;
    cfg.train.hidden = 16;
    cfg.train.max_epochs = 20;
    for stage in [Stage::Simulate, Stage::Label, Stage::Features, Stage::Train, Stage::Detect, Stage::Evaluate] {
        run_stage(stage, &cfg, Execution::Parallel).map_err(|e| e.to_string())?;
    }
    let read = |name: &str| fs::read(workdir.join(name)).map_err(|e| format!("{name}: {e}"));
    Ok((read(files::METRICS)?, read(files::MODEL)?))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = file_run(&tmp.path().join("a"));
    let b = file_run(&tmp.path().join("b"));
    match (a, b) {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!(
                "metrics.json {} bytes identical={}, model.json {} bytes identical={}",
                a.0.len(),
                a.0 == b.0,
                a.1.len(),
                a.1 == b.1
            ),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "criterion {id:>2} {:<22} {} ({:.1}s) {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        results.push((id, name, o));
    };

    let start = Instant::now();
    let run = run_scenario_in_memory(&PipelineConfig::default(), Execution::Parallel);
    let bench_elapsed = start.elapsed();
    let run = match run {
        Ok(r) => Some(r),
        Err(e) => {
            println!("benchmark scenario failed: {e}");
            None
        }
    };
    let failed_run = || outcome(false, "benchmark scenario did not run");

    record(1, "structure", &|| run.as_ref().map_or_else(failed_run, structure));
    record(2, "gradient check", &gradients);
    record(3, "overfit", &overfit);
    record(4, "resting HR oracle", &resting_hr);
    record(5, "adjusted PRF oracle", &prf);
    record(6, "Shapley axioms", &shapley);
    record(7, "synthetic benchmark", &|| {
        run.as_ref().map_or_else(failed_run, |r| benchmark(r, bench_elapsed))
    });
    record(8, "label recovery", &label_recovery);
    record(9, "chi-square", &chi_square);
    record(10, "determinism", &determinism);
    record(11, "sweep monotonicity", &|| run.as_ref().map_or_else(failed_run, sweep));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
