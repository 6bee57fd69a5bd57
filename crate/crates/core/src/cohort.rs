//! Cohort domain types, JSONL ingestion and validation.
//!
//! A cohort file is UTF-8 JSON Lines. Every line carries a `kind`
//! discriminator (`minute`, `assessment`, `covid`, `participant_meta`) and a
//! `participant_id`; the remaining fields depend on the kind:
//!
//! ```text
//! {"kind":"participant_meta","participant_id":"P001"}
//! {"kind":"assessment","participant_id":"P001","date":"2021-01-11","phq8":2,"gad7":1}
//! {"kind":"covid","participant_id":"P001","date":"2021-03-02"}
//! {"kind":"minute","participant_id":"P001","date":"2021-01-04","minute":0,"heart_rate":58.0,"steps":0,"sleep_stage":"light"}
//! ```
//!
//! Missing sensor values are explicit `null`s.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: usize = 1440;
/// Plausible heart-rate range, exclusive on both ends.
pub const HEART_RATE_BOUNDS: (f64, f64) = (20.0, 250.0);
pub const PHQ8_MAX: u8 = 24;
pub const GAD7_MAX: u8 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SleepStage {
    Awake,
    Light,
    Deep,
    Rem,
    #[default]
    None,
}

impl SleepStage {
    /// Light, deep and REM count as sleep; awake minutes inside a session do not.
    pub fn is_asleep(self) -> bool {
        matches!(self, SleepStage::Light | SleepStage::Deep | SleepStage::Rem)
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "awake" => SleepStage::Awake,
            "light" => SleepStage::Light,
            "deep" => SleepStage::Deep,
            "rem" => SleepStage::Rem,
            "none" => SleepStage::None,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinuteRecord {
    pub date: NaiveDate,
    /// Minute of day, 0..=1439.
    pub minute: u16,
    pub heart_rate: Option<f64>,
    pub steps: Option<u32>,
    pub sleep_stage: SleepStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub date: NaiveDate,
    pub phq8: u8,
    pub gad7: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovidEvent {
    pub report_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Participant {
    pub id: String,
    pub minutes: Vec<MinuteRecord>,
    pub assessments: Vec<Assessment>,
    pub covid_events: Vec<CovidEvent>,
}

impl Participant {
    pub fn new(id: impl Into<String>) -> Self {
        Participant {
            id: id.into(),
            ..Default::default()
        }
    }

    /// Minute records grouped by calendar date. Requires time-ordered minutes.
    pub fn days(&self) -> impl Iterator<Item = (NaiveDate, &[MinuteRecord])> {
        self.minutes
            .chunk_by(|a, b| a.date == b.date)
            .map(|chunk| (chunk[0].date, chunk))
    }

    /// First and last date touched by any minute record or assessment.
    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let dates = self
            .minutes
            .iter()
            .map(|m| m.date)
            .chain(self.assessments.iter().map(|a| a.date));
        dates.fold(None, |acc, d| match acc {
            None => Some((d, d)),
            Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub participants: Vec<Participant>,
    /// Free-form source annotations. Not persisted in the JSONL format.
    pub metadata: BTreeMap<String, String>,
}

impl Cohort {
    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.participants.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Treat implausible heart-rate values as errors rather than warnings.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseWarning {
    pub line: usize,
    pub participant_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ParsedCohort {
    pub cohort: Cohort,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    kind: Option<String>,
    participant_id: Option<String>,
    date: Option<String>,
    minute: Option<Value>,
    heart_rate: Option<Value>,
    steps: Option<Value>,
    sleep_stage: Option<Value>,
    phq8: Option<Value>,
    gad7: Option<Value>,
}

#[derive(Default)]
struct Builder {
    participant: Participant,
    minute_lines: Vec<usize>,
    declared: bool,
}

fn required<'a, T>(v: &'a Option<T>, line: usize, field: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::parse(line, field, "required field is missing"))
}

fn int_field(v: &Value, line: usize, field: &str, lo: i64, hi: i64) -> Result<i64> {
    let n = v
        .as_i64()
        .ok_or_else(|| Error::parse(line, field, format!("expected an integer, got {v}")))?;
    if n < lo || n > hi {
        return Err(Error::parse(
            line,
            field,
            format!("value {n} outside range [{lo},{hi}]"),
        ));
    }
    Ok(n)
}

fn parse_date(s: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| Error::parse(line, "date", format!("`{s}` is not an ISO-8601 date: {e}")))
}

/// Load a cohort from JSONL.
///
/// Records are grouped per participant in order of first appearance; each
/// participant's minutes, assessments and COVID events are stably sorted by
/// date (and minute).
pub fn parse_cohort<R: BufRead>(reader: R, opts: ParseOptions) -> Result<ParsedCohort> {
    let mut order: Vec<String> = Vec::new();
    let mut builders: HashMap<String, Builder> = HashMap::new();
    let mut warnings = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading line {lineno}"), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(trimmed)
            .map_err(|e| Error::parse(lineno, "record", e.to_string()))?;
        let kind = required(&raw.kind, lineno, "kind")?.as_str();
        let pid = required(&raw.participant_id, lineno, "participant_id")?;
        if pid.is_empty() {
            return Err(Error::parse(lineno, "participant_id", "must not be empty"));
        }
        let builder = builders.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            Builder {
                participant: Participant::new(pid.clone()),
                ..Default::default()
            }
        });
        match kind {
            "participant_meta" => {
                if builder.declared {
                    return Err(Error::DuplicateParticipant(pid.clone()));
                }
                builder.declared = true;
            }
            "assessment" => {
                let date = parse_date(required(&raw.date, lineno, "date")?, lineno)?;
                let phq8 = int_field(required(&raw.phq8, lineno, "phq8")?, lineno, "phq8", 0, PHQ8_MAX as i64)?;
                let gad7 = int_field(required(&raw.gad7, lineno, "gad7")?, lineno, "gad7", 0, GAD7_MAX as i64)?;
                builder.participant.assessments.push(Assessment {
                    date,
                    phq8: phq8 as u8,
                    gad7: gad7 as u8,
                });
            }
            "covid" => {
                let date = parse_date(required(&raw.date, lineno, "date")?, lineno)?;
                builder
                    .participant
                    .covid_events
                    .push(CovidEvent { report_date: date });
            }
            "minute" => {
                let date = parse_date(required(&raw.date, lineno, "date")?, lineno)?;
                let minute = int_field(
                    required(&raw.minute, lineno, "minute")?,
                    lineno,
                    "minute",
                    0,
                    MINUTES_PER_DAY as i64 - 1,
                )? as u16;
                let heart_rate = match &raw.heart_rate {
                    None | Some(Value::Null) => None,
                    Some(v) => {
                        let hr = v.as_f64().ok_or_else(|| {
                            Error::parse(lineno, "heart_rate", format!("expected a number or null, got {v}"))
                        })?;
                        if !hr.is_finite() || hr <= 0.0 {
                            return Err(Error::parse(lineno, "heart_rate", format!("{hr} is not a positive real")));
                        }
                        if hr <= HEART_RATE_BOUNDS.0 || hr >= HEART_RATE_BOUNDS.1 {
                            let message = format!(
                                "heart rate {hr} outside plausible range ({}, {})",
                                HEART_RATE_BOUNDS.0, HEART_RATE_BOUNDS.1
                            );
                            if opts.strict {
                                return Err(Error::parse(lineno, "heart_rate", message));
                            }
                            warnings.push(ParseWarning {
                                line: lineno,
                                participant_id: pid.clone(),
                                message,
                            });
                        }
                        Some(hr)
                    }
                };
                let steps = match &raw.steps {
                    None | Some(Value::Null) => None,
                    Some(v) => Some(int_field(v, lineno, "steps", 0, u32::MAX as i64)? as u32),
                };
                let sleep_stage = match &raw.sleep_stage {
                    None | Some(Value::Null) => SleepStage::None,
                    Some(Value::String(s)) => SleepStage::parse(s).ok_or_else(|| {
                        Error::parse(lineno, "sleep_stage", format!("unknown sleep stage `{s}`"))
                    })?,
                    Some(v) => {
                        return Err(Error::parse(lineno, "sleep_stage", format!("expected a string, got {v}")))
                    }
                };
                builder.participant.minutes.push(MinuteRecord {
                    date,
                    minute,
                    heart_rate,
                    steps,
                    sleep_stage,
                });
                builder.minute_lines.push(lineno);
            }
            other => {
                return Err(Error::parse(lineno, "kind", format!("unknown record kind `{other}`")));
            }
        }
    }

    let mut participants = Vec::with_capacity(order.len());
    for id in order {
        let b = builders.remove(&id).expect("builder registered for every id");
        participants.push(finish_participant(b)?);
    }
    Ok(ParsedCohort {
        cohort: Cohort {
            participants,
            metadata: BTreeMap::new(),
        },
        warnings,
    })
}

fn finish_participant(b: Builder) -> Result<Participant> {
    let Builder {
        mut participant,
        minute_lines,
        ..
    } = b;

    let key = |m: &MinuteRecord| (m.date, m.minute);
    if !participant.minutes.is_sorted_by_key(key) {
        let mut paired: Vec<(MinuteRecord, usize)> =
            participant.minutes.drain(..).zip(minute_lines.iter().copied()).collect();
        paired.sort_by_key(|(m, _)| key(m));
        let mut lines = Vec::with_capacity(paired.len());
        for (m, l) in paired {
            participant.minutes.push(m);
            lines.push(l);
        }
        check_duplicate_minutes(&participant, &lines)?;
    } else {
        check_duplicate_minutes(&participant, &minute_lines)?;
    }

    participant.assessments.sort_by_key(|a| a.date);
    if let Some(w) = participant.assessments.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(Error::InvalidInput(format!(
            "participant `{}` has two assessments dated {}",
            participant.id, w[0].date
        )));
    }
    participant.covid_events.sort_by_key(|c| c.report_date);
    Ok(participant)
}

fn check_duplicate_minutes(p: &Participant, lines: &[usize]) -> Result<()> {
    for (i, w) in p.minutes.windows(2).enumerate() {
        if w[0].date == w[1].date && w[0].minute == w[1].minute {
            return Err(Error::parse(
                lines[i + 1].max(lines[i]),
                "minute",
                format!(
                    "duplicate record for participant `{}` at {} minute {} (first seen on line {})",
                    p.id,
                    w[0].date,
                    w[0].minute,
                    lines[i + 1].min(lines[i])
                ),
            ));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MetaLine<'a> {
    kind: &'static str,
    participant_id: &'a str,
}

#[derive(Serialize)]
struct AssessmentLine<'a> {
    kind: &'static str,
    participant_id: &'a str,
    date: NaiveDate,
    phq8: u8,
    gad7: u8,
}

#[derive(Serialize)]
struct CovidLine<'a> {
    kind: &'static str,
    participant_id: &'a str,
    date: NaiveDate,
}

#[derive(Serialize)]
struct MinuteLine<'a> {
    kind: &'static str,
    participant_id: &'a str,
    date: NaiveDate,
    minute: u16,
    heart_rate: Option<f64>,
    steps: Option<u32>,
    sleep_stage: SleepStage,
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
        .map_err(|e| Error::io("writing cohort line", e))
}

/// Write one participant's records: declaration, assessments, COVID reports, minutes.
pub fn write_participant<W: Write>(w: &mut W, p: &Participant) -> Result<()> {
    let id = p.id.as_str();
    write_line(
        w,
        &MetaLine {
            kind: "participant_meta",
            participant_id: id,
        },
    )?;
    for a in &p.assessments {
        write_line(
            w,
            &AssessmentLine {
                kind: "assessment",
                participant_id: id,
                date: a.date,
                phq8: a.phq8,
                gad7: a.gad7,
            },
        )?;
    }
    for c in &p.covid_events {
        write_line(
            w,
            &CovidLine {
                kind: "covid",
                participant_id: id,
                date: c.report_date,
            },
        )?;
    }
    for m in &p.minutes {
        write_line(
            w,
            &MinuteLine {
                kind: "minute",
                participant_id: id,
                date: m.date,
                minute: m.minute,
                heart_rate: m.heart_rate,
                steps: m.steps,
                sleep_stage: m.sleep_stage,
            },
        )?;
    }
    Ok(())
}

pub fn write_cohort<W: Write>(w: &mut W, cohort: &Cohort) -> Result<()> {
    for p in &cohort.participants {
        write_participant(w, p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateParticipant,
    MinuteOutOfRange,
    HeartRateOutOfRange,
    DuplicateMinute,
    MinutesOutOfOrder,
    AssessmentsOutOfOrder,
    ScoreOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub participant_id: String,
    pub location: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub participants: usize,
    pub assessments: usize,
    pub minute_records: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every cohort invariant and report each breach. Never fails.
pub fn validate_cohort(cohort: &Cohort) -> ValidationReport {
    let mut report = ValidationReport {
        participants: cohort.participants.len(),
        ..Default::default()
    };
    let mut seen = HashMap::new();
    for p in &cohort.participants {
        let mut push = |location: String, kind| {
            report.violations.push(Violation {
                participant_id: p.id.clone(),
                location,
                kind,
            })
        };
        if seen.insert(p.id.as_str(), ()).is_some() {
            push("participant".into(), ViolationKind::DuplicateParticipant);
        }
        for m in &p.minutes {
            if m.minute as usize >= MINUTES_PER_DAY {
                push(format!("{} minute {}", m.date, m.minute), ViolationKind::MinuteOutOfRange);
            }
            if let Some(hr) = m.heart_rate {
                if !(hr > HEART_RATE_BOUNDS.0 && hr < HEART_RATE_BOUNDS.1) {
                    push(format!("{} minute {}", m.date, m.minute), ViolationKind::HeartRateOutOfRange);
                }
            }
        }
        for w in p.minutes.windows(2) {
            let (a, b) = ((w[0].date, w[0].minute), (w[1].date, w[1].minute));
            if a == b {
                push(format!("{} minute {}", a.0, a.1), ViolationKind::DuplicateMinute);
            } else if a > b {
                push(format!("{} minute {}", b.0, b.1), ViolationKind::MinutesOutOfOrder);
            }
        }
        for a in &p.assessments {
            if a.phq8 > PHQ8_MAX || a.gad7 > GAD7_MAX {
                push(format!("assessment {}", a.date), ViolationKind::ScoreOutOfRange);
            }
        }
        for w in p.assessments.windows(2) {
            if w[0].date >= w[1].date {
                push(format!("assessment {}", w[1].date), ViolationKind::AssessmentsOutOfOrder);
            }
        }
        report.assessments += p.assessments.len();
        report.minute_records += p.minutes.len();
    }
    report
}
