//! Pipeline configuration, file-based stages over a working directory, and an
//! in-memory run of the same steps for benchmarking.
//!
//! Each stage reads only the artifacts of earlier stages and writes its own,
//! stamped with the configuration hash and seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{self, fmt_f64, fmt_opt, read_json, require, write_json, CsvTable, Provenance};
use crate::cohort::{parse_cohort, ParseOptions, Participant};
use crate::detector::{detect, select_threshold, Detection};
use crate::error::{Error, Result};
use crate::evaluation::{
    aligned_averages, episode_outcomes, metrics_report, AdjustedPrf, AlignedPoint, EpisodeCounts, EpisodeSummary,
    MetricsReport, StratumPrf, SweepPoint,
};
use crate::explain::{
    attribute_windows, draw_background, episode_feature_ranks, standard_rank_tests, time_dynamic_export,
    AttributionMatrix, ExplainConfig, RankRow, RankTable, RankTest, ShapleyMode, TimeDynamicRow, WindowRef,
};
use crate::features::{
    extract_daily, make_windows, DailyFeatures, DayVector, Feature, FeatureConfig, NormalizationConstants,
    PreparedSeries, Window,
};
use crate::labeling::{label_participant, Category, CovidExclusion, DateSpan, Episode, LabeledDay, LabelingConfig, NormalPeriod, ParticipantLabels};
use crate::lstm::{train_with, Checkpoint, LstmAutoencoder, TrainConfig, TrainReport};
use crate::par::Execution;
use crate::synth::{generate_participant, write_cohort_streaming, GroundTruth, ParticipantTruth, ScenarioConfig};

/// Day offsets around an assessment covered by the aligned averages.
pub const ALIGNED_OFFSETS: std::ops::RangeInclusive<i64> = -35..=21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cohort JSONL to read; defaults to `cohort.jsonl` in the workdir.
    pub cohort: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Master seed, copied into the scenario and training seeds.
    pub seed: u64,
    /// Reject implausible heart-rate values instead of warning.
    pub strict: bool,
    /// Validation-error percentile used as the detection threshold.
    pub percentile: f64,
    pub scenario: ScenarioConfig,
    pub labeling: LabelingConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cohort: None,
            workdir: PathBuf::from("work"),
            seed: 42,
            strict: false,
            percentile: 95.0,
            scenario: ScenarioConfig::default(),
            labeling: LabelingConfig::default(),
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Set the master seed and propagate it to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenario.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::Config(format!("percentile must lie in [0, 100], got {}", self.percentile)));
        }
        let f = &self.features;
        if !(0.0..=1.0).contains(&f.max_missing_fraction) || !(0.0..=1.0).contains(&f.max_window_imputed_fraction) {
            return Err(Error::Config("feature fractions must lie in [0, 1]".into()));
        }
        if f.resting_run_minutes == 0 {
            return Err(Error::Config("resting_run_minutes must be positive".into()));
        }
        let l = &self.labeling;
        if l.min_normal_assessments == 0 || l.min_normal_span_days < 0 || l.max_gap_days < 1 {
            return Err(Error::Config("labeling spans and counts must be positive".into()));
        }
        if !(l.episode_delta > 0.0 && l.large_delta >= l.episode_delta) {
            return Err(Error::Config("episode deltas must satisfy 0 < episode_delta <= large_delta".into()));
        }
        if self.explain.background_size == 0 || self.explain.permutations == 0 {
            return Err(Error::Config("explain background_size and permutations must be positive".into()));
        }
        self.train.validate()?;
        self.scenario.validate()
    }

    /// SHA-256 of the canonical JSON form, ignoring input and output paths.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.cohort = None;
        c.workdir = PathBuf::new();
        let canonical = serde_json::to_string(&serde_json::to_value(&c)?)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.config_hash()?,
            seed: self.seed,
        })
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.cohort.clone().unwrap_or_else(|| self.workdir.join(files::COHORT))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }
}

/// Artifact file names inside the workdir.
pub mod files {
    pub const COHORT: &str = "cohort.jsonl";
    pub const GROUND_TRUTH: &str = "ground_truth.json";
    pub const LABELS: &str = "labels.csv";
    pub const EPISODES: &str = "episodes.json";
    pub const DAILY: &str = "daily.csv";
    pub const WINDOWS: &str = "windows.csv";
    pub const NORMALIZATION: &str = "normalization.json";
    pub const MODEL: &str = "model.json";
    pub const TRAIN_REPORT: &str = "train_report.json";
    pub const DETECTIONS: &str = "detections.csv";
    pub const METRICS: &str = "metrics.json";
    pub const EPISODE_OUTCOMES: &str = "episode_outcomes.csv";
    pub const ALIGNED: &str = "aligned.csv";
    pub const SWEEP: &str = "sweep.csv";
    pub const ATTRIBUTIONS: &str = "attributions.csv";
    pub const RANKS: &str = "ranks.csv";
    pub const EPISODE_RANKS: &str = "episode_ranks.csv";
    pub const CHI_SQUARE: &str = "chi_square.json";
    pub const TIME_DYNAMIC: &str = "time_dynamic.csv";
    pub const EXPLAIN_SUMMARY: &str = "explain_summary.json";
    pub const REPORT_DIR: &str = "report";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Label,
    Features,
    Train,
    Detect,
    Evaluate,
    Explain,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Simulate,
        Stage::Label,
        Stage::Features,
        Stage::Train,
        Stage::Detect,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Label => "label",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Detect => "detect",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }
}

/// Run one stage; returns human-readable summary lines.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, exec: Execution) -> Result<Vec<String>> {
    cfg.validate()?;
    match stage {
        Stage::Simulate => simulate_stage(cfg),
        Stage::Label => label_stage(cfg),
        Stage::Features => features_stage(cfg, exec),
        Stage::Train => train_stage(cfg, exec),
        Stage::Detect => detect_stage(cfg, exec),
        Stage::Evaluate => evaluate_stage(cfg),
        Stage::Explain => explain_stage(cfg, exec),
        Stage::Report => report_stage(cfg),
    }
}

// ---------------------------------------------------------------------------
// Shared step implementations

/// Days covered by a participant's labels.
pub fn labels_calendar(days: &[LabeledDay]) -> Option<DateSpan> {
    Some(DateSpan::new(days.first()?.date, days.last()?.date))
}

/// Daily features, prepared series and windows for one labeled participant.
pub fn prepare_features(
    participant: &Participant,
    days: &[LabeledDay],
    cfg: &FeatureConfig,
) -> Result<Option<(PreparedSeries, Vec<Window>)>> {
    let Some(calendar) = labels_calendar(days) else {
        return Ok(None);
    };
    let daily = extract_daily(participant, calendar, cfg);
    match PreparedSeries::new(participant.id.clone(), daily) {
        Ok(series) => {
            let windows = make_windows(&series, days);
            Ok(Some((series, windows)))
        }
        Err(Error::InvalidInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Train on the training subset and set the threshold from validation errors.
pub fn train_detector(
    windows: &[Window],
    normalization: BTreeMap<String, NormalizationConstants>,
    cfg: &PipelineConfig,
    exec: Execution,
) -> Result<(LstmAutoencoder, TrainReport, Checkpoint)> {
    let training: Vec<&[DayVector]> = windows
        .iter()
        .filter(|w| w.is_training(&cfg.features))
        .map(|w| &w.values[..])
        .collect();
    let (mut model, report) = train_with(&training, &cfg.train, exec)?;
    let threshold = select_threshold(&report.validation_errors, cfg.percentile)?;
    model.threshold = Some(threshold);
    let mut ckpt = Checkpoint::new(
        &model,
        cfg.train.clone(),
        normalization,
        report.validation_errors.clone(),
        Some(cfg.percentile),
    );
    ckpt.provenance = Some(cfg.provenance()?);
    Ok((model, report, ckpt))
}

/// Validation windows of a training run, in split order.
pub fn validation_windows<'a>(windows: &'a [Window], report: &TrainReport, cfg: &FeatureConfig) -> Vec<&'a Window> {
    let training: Vec<&Window> = windows.iter().filter(|w| w.is_training(cfg)).collect();
    report.validation_indices.iter().filter_map(|&i| training.get(i).copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRank {
    pub episode_id: String,
    pub category: Category,
    pub windows: usize,
    pub importance: DayVector,
    /// Features from most to least important.
    pub order: [Feature; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub attributions: Vec<AttributionMatrix>,
    pub episode_ranks: Vec<EpisodeRank>,
    pub rank_table: RankTable,
    pub tests: Vec<RankTest>,
    pub time_dynamic: Vec<TimeDynamicRow>,
}

fn spread<T: Copy>(items: &[T], k: usize) -> Vec<T> {
    if items.len() <= k {
        return items.to_vec();
    }
    (0..k).map(|i| items[i * items.len() / k]).collect()
}

/// Windows chosen for attribution: flagged windows of each detected episode
/// and a sample of flagged normal windows, each capped and spread evenly.
pub fn select_explained<'a>(detections: &'a [Detection], episodes: &[Episode], cfg: &ExplainConfig) -> Vec<&'a Detection> {
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    let mut by_episode: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, d) in detections.iter().enumerate().filter(|(_, d)| d.flagged) {
        for id in &d.episode_ids {
            by_episode.entry(id.as_str()).or_default().push(i);
        }
    }
    for e in episodes {
        if let Some(idx) = by_episode.get(e.id.as_str()) {
            chosen.extend(spread(idx, cfg.max_windows_per_episode));
        }
    }
    let false_alarms: Vec<usize> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.flagged && d.label == crate::labeling::DayLabel::NormalEligible)
        .map(|(i, _)| i)
        .collect();
    chosen.extend(spread(&false_alarms, cfg.max_false_alarms));
    chosen.into_iter().map(|i| &detections[i]).collect()
}

/// Shapley attributions, per-episode rankings, rank tests and per-day series.
pub fn explain_detections(
    model: &LstmAutoencoder,
    windows: &[Window],
    background_pool: &[&Window],
    detections: &[Detection],
    episodes: &[Episode],
    cfg: &PipelineConfig,
    exec: Execution,
) -> Result<Explanation> {
    let by_key: HashMap<(&str, chrono::NaiveDate), &Window> =
        windows.iter().map(|w| ((w.participant_id.as_str(), w.end_date), w)).collect();
    let selected = select_explained(detections, episodes, &cfg.explain);
    let refs: Vec<WindowRef> = selected
        .iter()
        .map(|d| {
            let w = by_key.get(&(d.participant_id.as_str(), d.end_date)).ok_or_else(|| {
                Error::InvalidInput(format!("no window for detection {} {}", d.participant_id, d.end_date))
            })?;
            Ok(WindowRef {
                participant_id: &w.participant_id,
                end_date: w.end_date,
                values: &w.values,
            })
        })
        .collect::<Result<_>>()?;
    let pool: Vec<&[DayVector]> = background_pool.iter().map(|w| &w.values[..]).collect();
    let background = draw_background(&pool, cfg.explain.background_size, cfg.seed);
    let mode = ShapleyMode::Sampled {
        permutations: cfg.explain.permutations,
    };
    let attributions = if refs.is_empty() {
        Vec::new()
    } else {
        attribute_windows(model, &refs, &background, mode, cfg.seed, exec)?
    };

    let flagged_of: HashMap<(&str, chrono::NaiveDate), &AttributionMatrix> =
        attributions.iter().map(|a| ((a.participant_id.as_str(), a.end_date), a)).collect();
    let mut episode_ranks = Vec::new();
    let mut rank_table = RankTable::default();
    for e in episodes {
        let mine: Vec<&AttributionMatrix> = selected
            .iter()
            .filter(|d| d.episode_ids.contains(&e.id))
            .filter_map(|d| flagged_of.get(&(d.participant_id.as_str(), d.end_date)).copied())
            .collect();
        if mine.is_empty() {
            continue;
        }
        let ranking = episode_feature_ranks(&mine)?;
        rank_table.add(e.category, &ranking);
        episode_ranks.push(EpisodeRank {
            episode_id: e.id.clone(),
            category: e.category,
            windows: mine.len(),
            importance: ranking.importance,
            order: ranking.order,
        });
    }
    let tests = standard_rank_tests(&rank_table);
    let threshold = detections.first().map(|d| d.threshold);
    let time_dynamic = time_dynamic_export(&attributions, threshold);
    Ok(Explanation {
        attributions,
        episode_ranks,
        rank_table,
        tests,
        time_dynamic,
    })
}

// ---------------------------------------------------------------------------
// In-memory run

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_seconds: f64,
    pub train_seconds: f64,
    pub detect_seconds: f64,
    pub evaluate_seconds: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.prepare_seconds + self.train_seconds + self.detect_seconds + self.evaluate_seconds
    }
}

pub struct InMemoryRun {
    pub truth: GroundTruth,
    pub labels: Vec<ParticipantLabels>,
    pub series: Vec<PreparedSeries>,
    pub windows: Vec<Window>,
    pub model: LstmAutoencoder,
    pub train_report: TrainReport,
    pub checkpoint: Checkpoint,
    pub detections: Vec<Detection>,
    pub episodes: Vec<Episode>,
    pub metrics: MetricsReport,
    pub outcomes: EpisodeSummary,
    pub aligned: Vec<AlignedPoint>,
    pub timings: Timings,
}

type Prepared = (ParticipantTruth, ParticipantLabels, Option<(PreparedSeries, Vec<Window>)>);

/// Generate, label and featurize the scenario one participant at a time,
/// then train, detect and evaluate. Minute data is dropped per participant.
pub fn run_scenario_in_memory(cfg: &PipelineConfig, exec: Execution) -> Result<InMemoryRun> {
    cfg.validate()?;
    let start = Instant::now();
    let calendar = cfg.scenario.calendar();
    let prepared: Vec<Result<Prepared>> = exec.map_range(cfg.scenario.participants, |i| {
        let (p, truth) = generate_participant(&cfg.scenario, i)?;
        let labels = label_participant(&p, Some(calendar), &cfg.labeling);
        let features = prepare_features(&p, &labels.days, &cfg.features)?;
        Ok((truth, labels, features))
    });
    let mut truth = GroundTruth { participants: Vec::new() };
    let mut labels = Vec::new();
    let mut series = Vec::new();
    let mut windows = Vec::new();
    for r in prepared {
        let (t, l, f) = r?;
        truth.participants.push(t);
        labels.push(l);
        if let Some((s, w)) = f {
            series.push(s);
            windows.extend(w);
        }
    }
    let prepare_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let normalization = series.iter().map(|s| (s.participant_id.clone(), s.constants)).collect();
    let (model, train_report, mut checkpoint) = train_detector(&windows, normalization, cfg, exec)?;
    checkpoint.provenance = Some(cfg.provenance()?);
    let train_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let threshold = model.threshold.unwrap_or(f64::INFINITY);
    let detections = detect(&model, &windows, threshold, exec)?;
    let detect_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let episodes: Vec<Episode> = labels.iter().flat_map(|l| l.episodes.iter().cloned()).collect();
    let mut metrics = metrics_report(&detections, &episodes, &train_report.validation_errors, cfg.percentile, threshold)?;
    metrics.provenance = Some(cfg.provenance()?);
    let outcomes = episode_outcomes(&detections, &episodes);
    let aligned = aligned_averages(&series, &episodes, ALIGNED_OFFSETS);
    let evaluate_seconds = start.elapsed().as_secs_f64();

    Ok(InMemoryRun {
        truth,
        labels,
        series,
        windows,
        model,
        train_report,
        checkpoint,
        detections,
        episodes,
        metrics,
        outcomes,
        aligned,
        timings: Timings {
            prepare_seconds,
            train_seconds,
            detect_seconds,
            evaluate_seconds,
        },
    })
}

// ---------------------------------------------------------------------------
// File stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub provenance: Provenance,
    pub scenario: ScenarioConfig,
    pub truth: GroundTruth,
}

fn simulate_stage(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let path = cfg.cohort_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    let truth = write_cohort_streaming(&cfg.scenario, BufWriter::new(file))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
    let episodes = truth.episode_count();
    write_json(
        &cfg.path(files::GROUND_TRUTH),
        &GroundTruthFile {
            provenance: cfg.provenance()?,
            scenario: cfg.scenario.clone(),
            truth,
        },
    )?;
    Ok(vec![format!(
        "simulated {} participants x {} days with {episodes} episodes -> {}",
        cfg.scenario.participants,
        cfg.scenario.days,
        path.display()
    )])
}

fn load_cohort(cfg: &PipelineConfig) -> Result<(Vec<Participant>, Vec<String>)> {
    let path = cfg.cohort_path();
    require(&path, Stage::Simulate.as_str())?;
    let file = File::open(&path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let parsed = parse_cohort(BufReader::new(file), ParseOptions { strict: cfg.strict })?;
    let warnings = parsed
        .warnings
        .iter()
        .map(|w| format!("warning: line {} ({}): {}", w.line, w.participant_id, w.message))
        .collect();
    Ok((parsed.cohort.participants, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCatalog {
    pub provenance: Provenance,
    pub counts: EpisodeCounts,
    pub exclusions: BTreeMap<String, Vec<CovidExclusion>>,
    pub normal_periods: Vec<NormalPeriod>,
    pub episodes: Vec<Episode>,
}

fn label_stage(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let (participants, mut msgs) = load_cohort(cfg)?;
    let prov = cfg.provenance()?;
    let mut table = artifacts::LabelTable::new();
    let mut exclusions = BTreeMap::new();
    let mut normal_periods = Vec::new();
    let mut episodes = Vec::new();
    let mut sorted: Vec<&Participant> = participants.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for p in sorted {
        let l = label_participant(p, None, &cfg.labeling);
        table.insert(l.participant_id.clone(), l.days);
        exclusions.insert(l.participant_id.clone(), l.exclusions);
        normal_periods.extend(l.normal_periods);
        episodes.extend(l.episodes);
    }
    artifacts::labels_table(&table).write(&cfg.path(files::LABELS), Some(&prov))?;
    let counts = EpisodeCounts::from_episodes(&episodes);
    msgs.push(format!(
        "labeled {} participants: {} normal periods, {} episodes",
        table.len(),
        normal_periods.len(),
        episodes.len()
    ));
    write_json(
        &cfg.path(files::EPISODES),
        &EpisodeCatalog {
            provenance: prov,
            counts,
            exclusions,
            normal_periods,
            episodes,
        },
    )?;
    Ok(msgs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationFile {
    pub provenance: Provenance,
    pub constants: BTreeMap<String, NormalizationConstants>,
}

fn features_stage(cfg: &PipelineConfig, exec: Execution) -> Result<Vec<String>> {
    let labels = artifacts::parse_labels(&CsvTable::read(&cfg.path(files::LABELS), Stage::Label.as_str())?)?;
    let (participants, mut msgs) = load_cohort(cfg)?;
    let by_id: HashMap<&str, &Participant> = participants.iter().map(|p| (p.id.as_str(), p)).collect();
    let jobs: Vec<(&String, &Vec<LabeledDay>)> = labels.iter().collect();
    let results = exec.map(&jobs, |(pid, days)| match by_id.get(pid.as_str()) {
        Some(p) => prepare_features(p, days, &cfg.features),
        None => Err(Error::InvalidInput(format!("labels name unknown participant `{pid}`"))),
    });
    let mut daily = BTreeMap::new();
    let mut constants = BTreeMap::new();
    let mut windows = Vec::new();
    for ((pid, _), r) in jobs.iter().zip(results) {
        match r? {
            Some((series, w)) => {
                constants.insert(series.participant_id.clone(), series.constants);
                windows.extend(w.into_iter().map(|w| {
                    let t = w.is_training(&cfg.features);
                    (w, t)
                }));
                daily.insert(series.participant_id.clone(), (series.daily, series.normalized));
            }
            None => msgs.push(format!("warning: participant {pid} has no usable feature values; skipped")),
        }
    }
    let prov = cfg.provenance()?;
    artifacts::daily_table(&daily).write(&cfg.path(files::DAILY), Some(&prov))?;
    artifacts::windows_table(&windows).write(&cfg.path(files::WINDOWS), Some(&prov))?;
    write_json(
        &cfg.path(files::NORMALIZATION),
        &NormalizationFile {
            provenance: prov,
            constants,
        },
    )?;
    let training = windows.iter().filter(|(_, t)| *t).count();
    msgs.push(format!(
        "extracted features for {} participants: {} windows ({training} for training)",
        daily.len(),
        windows.len()
    ));
    Ok(msgs)
}

fn read_windows(cfg: &PipelineConfig) -> Result<Vec<Window>> {
    let t = CsvTable::read(&cfg.path(files::WINDOWS), Stage::Features.as_str())?;
    Ok(artifacts::parse_windows(&t)?.into_iter().map(|(w, _)| w).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReportFile {
    pub provenance: Provenance,
    pub threshold: f64,
    pub percentile: f64,
    pub report: TrainReport,
}

fn train_stage(cfg: &PipelineConfig, exec: Execution) -> Result<Vec<String>> {
    let windows = read_windows(cfg)?;
    let norm: NormalizationFile = read_json(&cfg.path(files::NORMALIZATION), Stage::Features.as_str())?;
    let (model, report, ckpt) = train_detector(&windows, norm.constants, cfg, exec)?;
    let threshold = model.threshold.unwrap_or(f64::NAN);
    write_atomic_str(&cfg.path(files::MODEL), &ckpt.to_json()?)?;
    let msg = format!(
        "trained H={} for {} epochs (best {}), validation loss {:.6}, threshold {:.6} at p{}",
        cfg.train.hidden, report.epochs_run, report.best_epoch, report.best_validation_loss, threshold, cfg.percentile
    );
    write_json(
        &cfg.path(files::TRAIN_REPORT),
        &TrainReportFile {
            provenance: cfg.provenance()?,
            threshold,
            percentile: cfg.percentile,
            report,
        },
    )?;
    Ok(vec![msg])
}

fn write_atomic_str(path: &Path, text: &str) -> Result<()> {
    let mut s = text.to_string();
    if !s.ends_with('\n') {
        s.push('\n');
    }
    artifacts::write_atomic(path, s.as_bytes())
}

fn read_checkpoint(cfg: &PipelineConfig) -> Result<Checkpoint> {
    let path = cfg.path(files::MODEL);
    require(&path, Stage::Train.as_str())?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_json(&text)
}

fn detect_stage(cfg: &PipelineConfig, exec: Execution) -> Result<Vec<String>> {
    let windows = read_windows(cfg)?;
    let ckpt = read_checkpoint(cfg)?;
    let model = ckpt.model()?;
    let threshold = select_threshold(&ckpt.validation_errors, cfg.percentile)?;
    let detections = detect(&model, &windows, threshold, exec)?;
    artifacts::detections_table(&detections).write(&cfg.path(files::DETECTIONS), Some(&cfg.provenance()?))?;
    let flagged = detections.iter().filter(|d| d.flagged).count();
    Ok(vec![format!(
        "scored {} windows, flagged {flagged} above threshold {threshold:.6} (p{})",
        detections.len(),
        cfg.percentile
    )])
}

fn read_detections(cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    artifacts::parse_detections(&CsvTable::read(&cfg.path(files::DETECTIONS), Stage::Detect.as_str())?)
}

fn read_series(cfg: &PipelineConfig) -> Result<Vec<PreparedSeries>> {
    let daily = artifacts::parse_daily(&CsvTable::read(&cfg.path(files::DAILY), Stage::Features.as_str())?)?;
    daily
        .into_iter()
        .map(|(pid, days): (String, Vec<DailyFeatures>)| PreparedSeries::new(pid, days))
        .collect()
}

fn aligned_table(points: &[AlignedPoint]) -> CsvTable {
    let mut t = CsvTable::new(&["offset_day", "feature", "mean", "n", "ci_low", "ci_high"]);
    for p in points {
        t.push(vec![
            p.offset_day.to_string(),
            p.feature.as_str().into(),
            fmt_f64(p.mean),
            p.n.to_string(),
            fmt_f64(p.ci_low),
            fmt_f64(p.ci_high),
        ]);
    }
    t
}

fn sweep_table(points: &[SweepPoint]) -> CsvTable {
    let mut t = CsvTable::new(&["percentile", "threshold", "flagged", "precision", "recall", "f_score"]);
    for p in points {
        t.push(vec![
            fmt_f64(p.percentile),
            fmt_f64(p.threshold),
            p.flagged.to_string(),
            fmt_f64(p.precision),
            fmt_f64(p.recall),
            fmt_f64(p.f_score),
        ]);
    }
    t
}

fn outcomes_table(summary: &EpisodeSummary) -> CsvTable {
    let mut t = CsvTable::new(&[
        "episode_id",
        "participant_id",
        "category",
        "detected",
        "windows",
        "flagged_windows",
        "false_positives",
        "precision",
        "recall",
        "f_score",
    ]);
    for o in &summary.outcomes {
        t.push(vec![
            o.episode_id.clone(),
            o.participant_id.clone(),
            o.category.as_str().into(),
            o.detected.to_string(),
            o.windows.to_string(),
            o.flagged_windows.to_string(),
            o.false_positives.to_string(),
            fmt_f64(o.precision),
            fmt_f64(o.recall),
            fmt_f64(o.f_score),
        ]);
    }
    t
}

fn evaluate_stage(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let detections = read_detections(cfg)?;
    let catalog: EpisodeCatalog = read_json(&cfg.path(files::EPISODES), Stage::Label.as_str())?;
    let ckpt = read_checkpoint(cfg)?;
    let series = read_series(cfg)?;
    let threshold = detections
        .first()
        .map(|d| d.threshold)
        .map_or_else(|| select_threshold(&ckpt.validation_errors, cfg.percentile), Ok)?;
    let prov = cfg.provenance()?;
    let mut metrics = metrics_report(&detections, &catalog.episodes, &ckpt.validation_errors, cfg.percentile, threshold)?;
    metrics.provenance = Some(prov.clone());
    let outcomes = episode_outcomes(&detections, &catalog.episodes);
    let aligned = aligned_averages(&series, &catalog.episodes, ALIGNED_OFFSETS);
    write_json(&cfg.path(files::METRICS), &metrics)?;
    outcomes_table(&outcomes).write(&cfg.path(files::EPISODE_OUTCOMES), Some(&prov))?;
    aligned_table(&aligned).write(&cfg.path(files::ALIGNED), Some(&prov))?;
    sweep_table(&metrics.threshold_sweep).write(&cfg.path(files::SWEEP), Some(&prov))?;
    let o = &metrics.overall;
    Ok(vec![format!(
        "adjusted P={:.4} R={:.4} F={:.4} (TP={} FP={} FN={}); detection rate {}",
        o.precision,
        o.recall,
        o.f_score,
        o.tp,
        o.fp,
        o.fn_,
        metrics.detection_rate.map_or("n/a".to_string(), |r| format!("{r:.4}"))
    )])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareFile {
    pub provenance: Provenance,
    pub tests: Vec<RankTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub provenance: Provenance,
    pub explained_windows: usize,
    pub rank_table: Vec<RankRow>,
    pub episode_ranks: Vec<EpisodeRank>,
    pub tests: Vec<RankTest>,
}

fn attributions_table(attrs: &[AttributionMatrix]) -> CsvTable {
    let mut t = CsvTable::new(&["participant_id", "date", "feature", "phi", "value_normalized", "window_end_date"]);
    for a in attrs {
        let len = a.phi.len() as i64;
        for (k, (phi, val)) in a.phi.iter().zip(&a.values).enumerate() {
            let date = a.end_date - chrono::Duration::days(len - 1 - k as i64);
            for f in Feature::ALL {
                t.push(vec![
                    a.participant_id.clone(),
                    date.to_string(),
                    f.as_str().into(),
                    fmt_f64(phi[f.index()]),
                    fmt_f64(val[f.index()]),
                    a.end_date.to_string(),
                ]);
            }
        }
    }
    t
}

fn ranks_table(rows: &[RankRow]) -> CsvTable {
    let mut t = CsvTable::new(&["category", "feature", "rank", "count"]);
    for r in rows {
        t.push(vec![
            r.category.as_str().into(),
            r.feature.as_str().into(),
            r.rank.to_string(),
            r.count.to_string(),
        ]);
    }
    t
}

fn episode_ranks_table(ranks: &[EpisodeRank]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "episode_id",
        "category",
        "windows",
        "sleep_importance",
        "steps_importance",
        "resting_hr_importance",
        "rank_1",
        "rank_2",
        "rank_3",
    ]);
    for r in ranks {
        t.push(vec![
            r.episode_id.clone(),
            r.category.as_str().into(),
            r.windows.to_string(),
            fmt_f64(r.importance[0]),
            fmt_f64(r.importance[1]),
            fmt_f64(r.importance[2]),
            r.order[0].as_str().into(),
            r.order[1].as_str().into(),
            r.order[2].as_str().into(),
        ]);
    }
    t
}

fn time_dynamic_table(rows: &[TimeDynamicRow]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "participant_id",
        "date",
        "sleep_phi",
        "steps_phi",
        "resting_hr_phi",
        "windows",
        "error",
        "threshold",
    ]);
    for r in rows {
        t.push(vec![
            r.participant_id.clone(),
            r.date.to_string(),
            fmt_f64(r.sleep),
            fmt_f64(r.steps),
            fmt_f64(r.resting_hr),
            r.windows.to_string(),
            fmt_opt(r.error),
            fmt_opt(r.threshold),
        ]);
    }
    t
}

fn explain_stage(cfg: &PipelineConfig, exec: Execution) -> Result<Vec<String>> {
    let windows = read_windows(cfg)?;
    let ckpt = read_checkpoint(cfg)?;
    let model = ckpt.model()?;
    let report: TrainReportFile = read_json(&cfg.path(files::TRAIN_REPORT), Stage::Train.as_str())?;
    let detections = read_detections(cfg)?;
    let catalog: EpisodeCatalog = read_json(&cfg.path(files::EPISODES), Stage::Label.as_str())?;
    let pool = validation_windows(&windows, &report.report, &cfg.features);
    let ex = explain_detections(&model, &windows, &pool, &detections, &catalog.episodes, cfg, exec)?;
    let prov = cfg.provenance()?;
    attributions_table(&ex.attributions).write(&cfg.path(files::ATTRIBUTIONS), Some(&prov))?;
    let rows = ex.rank_table.rows();
    ranks_table(&rows).write(&cfg.path(files::RANKS), Some(&prov))?;
    episode_ranks_table(&ex.episode_ranks).write(&cfg.path(files::EPISODE_RANKS), Some(&prov))?;
    time_dynamic_table(&ex.time_dynamic).write(&cfg.path(files::TIME_DYNAMIC), Some(&prov))?;
    write_json(
        &cfg.path(files::CHI_SQUARE),
        &ChiSquareFile {
            provenance: prov.clone(),
            tests: ex.tests.clone(),
        },
    )?;
    write_json(
        &cfg.path(files::EXPLAIN_SUMMARY),
        &ExplainSummary {
            provenance: prov,
            explained_windows: ex.attributions.len(),
            rank_table: rows,
            episode_ranks: ex.episode_ranks.clone(),
            tests: ex.tests,
        },
    )?;
    Ok(vec![format!(
        "attributed {} windows; ranked {} episodes",
        ex.attributions.len(),
        ex.episode_ranks.len()
    )])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub participants_labeled: usize,
    pub normal_periods: usize,
    pub episode_counts: EpisodeCounts,
    pub percentile: f64,
    pub threshold: f64,
    pub overall: AdjustedPrf,
    pub per_category: Vec<StratumPrf>,
    pub per_magnitude: Vec<StratumPrf>,
    pub detection_rate: Option<f64>,
    pub threshold_sweep: Vec<SweepPoint>,
    pub explained_windows: usize,
    pub rank_table: Vec<RankRow>,
    pub rank_tests: Vec<RankTest>,
    pub files: Vec<String>,
}

fn report_stage(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let needed: [(&str, Stage); 10] = [
        (files::LABELS, Stage::Label),
        (files::EPISODES, Stage::Label),
        (files::DAILY, Stage::Features),
        (files::MODEL, Stage::Train),
        (files::DETECTIONS, Stage::Detect),
        (files::METRICS, Stage::Evaluate),
        (files::ALIGNED, Stage::Evaluate),
        (files::EPISODE_OUTCOMES, Stage::Evaluate),
        (files::EXPLAIN_SUMMARY, Stage::Explain),
        (files::ATTRIBUTIONS, Stage::Explain),
    ];
    for (name, stage) in needed {
        require(&cfg.path(name), stage.as_str())?;
    }
    let catalog: EpisodeCatalog = read_json(&cfg.path(files::EPISODES), Stage::Label.as_str())?;
    let metrics: MetricsReport = read_json(&cfg.path(files::METRICS), Stage::Evaluate.as_str())?;
    let explain: ExplainSummary = read_json(&cfg.path(files::EXPLAIN_SUMMARY), Stage::Explain.as_str())?;
    let prov = cfg.provenance()?;
    let dir = cfg.path(files::REPORT_DIR);
    let mut written = Vec::new();

    let copies = [
        files::ALIGNED,
        files::SWEEP,
        files::EPISODE_OUTCOMES,
        files::RANKS,
        files::EPISODE_RANKS,
        files::TIME_DYNAMIC,
        files::ATTRIBUTIONS,
    ];
    for name in copies {
        let src = cfg.path(name);
        if !src.is_file() {
            continue;
        }
        let bytes = fs::read(&src).map_err(|e| Error::io(format!("reading {}", src.display()), e))?;
        artifacts::write_atomic(&dir.join(name), &bytes)?;
        written.push(name.to_string());
    }

    let mut table1 = CsvTable::new(&["group", "count"]);
    let c = &catalog.counts;
    for (k, v) in [
        ("episodes", c.total),
        ("participants_with_episodes", c.participants_with_episodes),
        ("BOTH", c.both),
        ("PHQ_only", c.phq_only),
        ("GAD_only", c.gad_only),
        ("PHQ_d5_9", c.phq_d5_9),
        ("PHQ_d10_plus", c.phq_d10_plus),
        ("GAD_d5_9", c.gad_d5_9),
        ("GAD_d10_plus", c.gad_d10_plus),
        ("normal_periods", catalog.normal_periods.len()),
    ] {
        table1.push(vec![k.to_string(), v.to_string()]);
    }
    table1.write(&dir.join("table1.csv"), Some(&prov))?;
    written.push("table1.csv".into());

    let attributions = CsvTable::read(&cfg.path(files::ATTRIBUTIONS), Stage::Explain.as_str())?;
    let (fc, pc, vc) = (
        attributions.column("feature")?,
        attributions.column("phi")?,
        attributions.column("value_normalized")?,
    );
    for f in Feature::ALL {
        let mut t = CsvTable::new(&["value_normalized", "phi"]);
        for r in attributions.rows.iter().filter(|r| r[fc] == f.as_str()) {
            t.push(vec![r[vc].clone(), r[pc].clone()]);
        }
        let name = format!("dependence_{}.csv", f.as_str());
        t.write(&dir.join(&name), Some(&prov))?;
        written.push(name);
    }
    written.push("report.json".into());
    written.sort();

    let report = Report {
        provenance: prov,
        participants_labeled: catalog.exclusions.len(),
        normal_periods: catalog.normal_periods.len(),
        episode_counts: catalog.counts.clone(),
        percentile: metrics.percentile,
        threshold: metrics.threshold,
        overall: metrics.overall,
        per_category: metrics.per_category,
        per_magnitude: metrics.per_magnitude,
        detection_rate: metrics.detection_rate,
        threshold_sweep: metrics.threshold_sweep,
        explained_windows: explain.explained_windows,
        rank_table: explain.rank_table,
        rank_tests: explain.tests,
        files: written.clone(),
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(vec![format!("wrote {} report files to {}", written.len(), dir.display())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.percentile, 95.0);
        assert_eq!(c.labeling.normal_score_below, 5);
        assert_eq!(c.labeling.min_normal_span_days, 56);
        assert_eq!(c.labeling.max_gap_days, 21);
        assert_eq!((c.labeling.covid_days_before, c.labeling.covid_days_after), (7, 21));
        assert_eq!(c.features.max_missing_fraction, 0.2);
        assert_eq!(c.features.resting_run_minutes, 12);
        assert_eq!(c.explain.background_size, 50);
        assert_eq!(c.explain.permutations, 200);
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_paths_but_not_knobs() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            workdir: "elsewhere".into(),
            cohort: Some("x.jsonl".into()),
            ..a.clone()
        };
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        let c = PipelineConfig {
            percentile: 90.0,
            ..a.clone()
        };
        assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap().len(), 64);
    }

    #[test]
    fn partial_json_uses_defaults_and_propagates_seed() {
        let c = PipelineConfig::from_json(r#"{"seed": 7, "train": {"hidden": 8}}"#).unwrap();
        assert_eq!(c.train.hidden, 8);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.scenario.seed, 7);
        assert_eq!(c.train.max_epochs, 200);
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn spread_picks_evenly() {
        assert_eq!(spread(&[1, 2, 3], 5), vec![1, 2, 3]);
        assert_eq!(spread(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 3), vec![0, 3, 6]);
    }
}
