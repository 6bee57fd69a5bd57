//! Runs the default synthetic scenario end to end in memory and prints the
//! headline metrics.
//!
//! `cargo run --release --example benchmark -p moodshift-core [config.json]`

use moodshift::pipeline::{run_scenario_in_memory, PipelineConfig};
use moodshift::Execution;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => PipelineConfig::load(path.as_ref())?,
        None => PipelineConfig::default(),
    };
    let run = run_scenario_in_memory(&cfg, Execution::default())?;
    let m = &run.metrics;
    println!("episodes: {}  windows: {}", run.episodes.len(), run.windows.len());
    println!(
        "training: {} epochs (best {}), validation loss {:.5}",
        run.train_report.epochs_run, run.train_report.best_epoch, run.train_report.best_validation_loss
    );
    println!(
        "overall: P={:.4} R={:.4} F={:.4} (TP={} FP={} FN={})",
        m.overall.precision, m.overall.recall, m.overall.f_score, m.overall.tp, m.overall.fp, m.overall.fn_
    );
    for s in m.per_category.iter().chain(&m.per_magnitude) {
        println!("  {:<14} P={:.4} R={:.4} F={:.4} episodes={}", s.stratum, s.precision, s.recall, s.f_score, s.episodes);
    }
    if let Some(rate) = m.detection_rate {
        println!("detection rate: {rate:.4}");
    }
    for p in &m.threshold_sweep {
        println!("  p{:<5} flagged={:<6} F={:.4}", p.percentile, p.flagged, p.f_score);
    }
    let t = &run.timings;
    println!(
        "seconds: prepare {:.1}, train {:.1}, detect {:.1}, evaluate {:.1}, total {:.1}",
        t.prepare_seconds, t.train_seconds, t.detect_seconds, t.evaluate_seconds, t.total()
    );
    Ok(())
}
