use chrono::NaiveDate;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use moodshift::explain::{attribute_windows, ShapleyMode, WindowRef};
use moodshift::features::{extract_daily, DayVector, FeatureConfig};
use moodshift::lstm::LstmAutoencoder;
use moodshift::synth::{generate_cohort_with, ScenarioConfig};
use moodshift::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn windows(n: usize, seed: u64) -> Vec<Vec<DayVector>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..7)
                .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                .collect()
        })
        .collect()
}

fn scoring(c: &mut Criterion) {
    let model = LstmAutoencoder::init(64, 1).unwrap();
    let ws = windows(512, 2);
    let mut g = c.benchmark_group("score_windows");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.score_windows(black_box(&ws), exec).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let model = LstmAutoencoder::init(64, 1).unwrap();
    let batch = windows(64, 3);
    let mut g = c.benchmark_group("batch_gradient");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.backprop_grads(black_box(&batch), exec).unwrap())
        });
    }
    g.finish();
}

fn shapley(c: &mut Criterion) {
    let model = LstmAutoencoder::init(16, 1).unwrap();
    let ws = windows(8, 4);
    let background = windows(20, 5);
    let end = NaiveDate::from_ymd_opt(2021, 6, 1).unwrap();
    let refs: Vec<WindowRef> = ws
        .iter()
        .map(|w| WindowRef {
            participant_id: "P0001",
            end_date: end,
            values: w,
        })
        .collect();
    let mut g = c.benchmark_group("shapley_sampled");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                attribute_windows(&model, &refs, &background, ShapleyMode::Sampled { permutations: 50 }, 7, exec).unwrap()
            })
        });
    }
    g.finish();
}

fn daily_extraction(c: &mut Criterion) {
    let cfg = ScenarioConfig {
        participants: 16,
        days: 120,
        episode_rate: 0.0,
        ..ScenarioConfig::default()
    };
    let (cohort, _) = generate_cohort_with(&cfg, Execution::Parallel).unwrap();
    let calendar = cfg.calendar();
    let fcfg = FeatureConfig::default();
    let mut g = c.benchmark_group("daily_extraction");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(&cohort.participants, |p| extract_daily(p, calendar, &fcfg)))
        });
    }
    g.finish();
}

criterion_group!(benches, scoring, gradients, shapley, daily_extraction);
criterion_main!(benches);
