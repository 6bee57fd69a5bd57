//! On-disk artifacts: atomic writes, provenance-stamped CSV and JSON, and
//! codecs for the tables exchanged between pipeline stages.
//!
//! CSV files start with a `# config_hash=... seed=...` comment line. Floats
//! are written in shortest round-trip form so rereading is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::features::{DailyFeatures, Feature, Window, WindowMatrix, FEATURE_COUNT, WINDOW_DAYS};
use crate::labeling::{DayLabel, LabeledDay};

/// Identifies the configuration and seed an artifact was produced with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}

/// Write through a sibling temporary file and rename, so readers never see a
/// partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        })
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_string(value)?.as_bytes())
}

/// Read a JSON artifact produced by `stage`.
pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T> {
    require(path, stage)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("CSV column `{name}` not found")))
    }

    pub fn to_bytes(&self, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        if let Some(p) = provenance {
            out.extend_from_slice(p.comment().as_bytes());
            out.push(b'\n');
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::io("flushing CSV", e.into_error()))
    }

    pub fn write(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        write_atomic(path, &self.to_bytes(provenance)?)
    }

    /// Read a CSV artifact produced by `stage`, skipping comment lines.
    pub fn read(path: &Path, stage: &'static str) -> Result<Self> {
        require(path, stage)?;
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(CsvTable { header, rows })
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::InvalidInput(format!("bad {what} value `{s}`")))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    s.parse().map_err(|_| Error::InvalidInput(format!("bad date `{s}`")))
}

fn parse_label(s: &str) -> Result<DayLabel> {
    DayLabel::parse(s).ok_or_else(|| Error::InvalidInput(format!("bad label `{s}`")))
}

fn parse_bool(s: &str) -> Result<bool> {
    s.parse().map_err(|_| Error::InvalidInput(format!("bad boolean `{s}`")))
}

fn join_ids(ids: &[String]) -> String {
    ids.join(";")
}

fn split_ids(s: &str) -> Vec<String> {
    s.split(';').filter(|x| !x.is_empty()).map(str::to_string).collect()
}

/// Day labels keyed by participant, in file order.
pub type LabelTable = BTreeMap<String, Vec<LabeledDay>>;

pub fn labels_table(labels: &LabelTable) -> CsvTable {
    let mut t = CsvTable::new(&["participant_id", "date", "label", "episode_ids"]);
    for (pid, days) in labels {
        for d in days {
            t.push(vec![pid.clone(), d.date.to_string(), d.label.as_str().into(), join_ids(&d.episode_ids)]);
        }
    }
    t
}

pub fn parse_labels(t: &CsvTable) -> Result<LabelTable> {
    let (p, d, l, e) = (t.column("participant_id")?, t.column("date")?, t.column("label")?, t.column("episode_ids")?);
    let mut out = LabelTable::new();
    for r in &t.rows {
        out.entry(r[p].clone()).or_default().push(LabeledDay {
            date: parse_date(&r[d])?,
            label: parse_label(&r[l])?,
            episode_ids: split_ids(&r[e]),
        });
    }
    Ok(out)
}

/// Raw daily features keyed by participant. Normalized columns are written
/// for inspection and recomputed on read.
pub type DailyTable = BTreeMap<String, Vec<DailyFeatures>>;

pub fn daily_table(daily: &BTreeMap<String, (Vec<DailyFeatures>, Vec<[f64; FEATURE_COUNT]>)>) -> CsvTable {
    let mut t = CsvTable::new(&[
        "participant_id",
        "date",
        "quality_ok",
        "sleep_minutes",
        "total_steps",
        "resting_hr",
        "sleep_z",
        "steps_z",
        "resting_hr_z",
    ]);
    for (pid, (days, z)) in daily {
        for (d, z) in days.iter().zip(z) {
            t.push(vec![
                pid.clone(),
                d.date.to_string(),
                d.quality_ok.to_string(),
                fmt_opt(d.sleep_minutes),
                fmt_opt(d.total_steps),
                fmt_opt(d.resting_hr),
                fmt_f64(z[0]),
                fmt_f64(z[1]),
                fmt_f64(z[2]),
            ]);
        }
    }
    t
}

pub fn parse_daily(t: &CsvTable) -> Result<DailyTable> {
    let c = |n| t.column(n);
    let (p, d, q, s, st, h) = (
        c("participant_id")?,
        c("date")?,
        c("quality_ok")?,
        c("sleep_minutes")?,
        c("total_steps")?,
        c("resting_hr")?,
    );
    let mut out = DailyTable::new();
    for r in &t.rows {
        out.entry(r[p].clone()).or_default().push(DailyFeatures {
            date: parse_date(&r[d])?,
            quality_ok: parse_bool(&r[q])?,
            sleep_minutes: parse_opt(&r[s], "sleep_minutes")?,
            total_steps: parse_opt(&r[st], "total_steps")?,
            resting_hr: parse_opt(&r[h], "resting_hr")?,
        });
    }
    Ok(out)
}

fn cell_column(day: usize, f: Feature) -> String {
    format!("d{day}_{}", f.as_str())
}

/// Windows with a flag marking the training subset.
pub fn windows_table(windows: &[(Window, bool)]) -> CsvTable {
    let mut header: Vec<String> = ["participant_id", "end_date", "label", "episode_ids", "imputed_cells", "training"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for day in 0..WINDOW_DAYS {
        for f in Feature::ALL {
            header.push(cell_column(day, f));
        }
    }
    let mut t = CsvTable { header, rows: Vec::new() };
    for (w, training) in windows {
        let mut row = vec![
            w.participant_id.clone(),
            w.end_date.to_string(),
            w.label.as_str().into(),
            join_ids(&w.episode_ids),
            w.imputed_cells.to_string(),
            training.to_string(),
        ];
        row.extend(w.values.iter().flatten().map(|&x| fmt_f64(x)));
        t.push(row);
    }
    t
}

pub fn parse_windows(t: &CsvTable) -> Result<Vec<(Window, bool)>> {
    let c = |n| t.column(n);
    let (p, d, l, e, im, tr) = (
        c("participant_id")?,
        c("end_date")?,
        c("label")?,
        c("episode_ids")?,
        c("imputed_cells")?,
        c("training")?,
    );
    let mut cells = Vec::with_capacity(WINDOW_DAYS * FEATURE_COUNT);
    for day in 0..WINDOW_DAYS {
        for f in Feature::ALL {
            cells.push(t.column(&cell_column(day, f))?);
        }
    }
    t.rows
        .iter()
        .map(|r| {
            let mut values: WindowMatrix = [[0.0; FEATURE_COUNT]; WINDOW_DAYS];
            for (k, &col) in cells.iter().enumerate() {
                values[k / FEATURE_COUNT][k % FEATURE_COUNT] = parse_f64(&r[col], "window cell")?;
            }
            let window = Window {
                participant_id: r[p].clone(),
                end_date: parse_date(&r[d])?,
                values,
                label: parse_label(&r[l])?,
                episode_ids: split_ids(&r[e]),
                imputed_cells: r[im]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad imputed_cells `{}`", r[im])))?,
            };
            Ok((window, parse_bool(&r[tr])?))
        })
        .collect()
}

pub fn detections_table(detections: &[Detection]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "participant_id",
        "end_date",
        "error",
        "threshold",
        "flagged",
        "label",
        "episode_ids",
    ]);
    for d in detections {
        t.push(vec![
            d.participant_id.clone(),
            d.end_date.to_string(),
            fmt_f64(d.error),
            fmt_f64(d.threshold),
            d.flagged.to_string(),
            d.label.as_str().into(),
            join_ids(&d.episode_ids),
        ]);
    }
    t
}

pub fn parse_detections(t: &CsvTable) -> Result<Vec<Detection>> {
    let c = |n| t.column(n);
    let (p, d, er, th, fl, l, e) = (
        c("participant_id")?,
        c("end_date")?,
        c("error")?,
        c("threshold")?,
        c("flagged")?,
        c("label")?,
        c("episode_ids")?,
    );
    t.rows
        .iter()
        .map(|r| {
            Ok(Detection {
                participant_id: r[p].clone(),
                end_date: parse_date(&r[d])?,
                error: parse_f64(&r[er], "error")?,
                threshold: parse_f64(&r[th], "threshold")?,
                flagged: parse_bool(&r[fl])?,
                label: parse_label(&r[l])?,
                episode_ids: split_ids(&r[e]),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            config_hash: "abc".into(),
            seed: 7,
        }
    }

    #[test]
    fn csv_round_trip_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let mut t = CsvTable::new(&["a", "b"]);
        t.push(vec!["1".into(), fmt_f64(0.1 + 0.2)]);
        t.write(&path, Some(&prov())).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc seed=7\n"));
        let back = CsvTable::read(&path, "test").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.rows[0][1].parse::<f64>().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn missing_artifact_names_stage() {
        let err = CsvTable::read(Path::new("/nonexistent/x.csv"), "detect").unwrap_err();
        assert!(err.to_string().contains("detect"));
    }

    #[test]
    fn windows_round_trip_bit_exact() {
        let mut values = [[0.0; 3]; 7];
        for (i, v) in values.iter_mut().flatten().enumerate() {
            *v = (i as f64 * 0.37).sin() / 3.0;
        }
        let w = Window {
            participant_id: "P1".into(),
            end_date: NaiveDate::from_ymd_opt(2021, 2, 3).unwrap(),
            values,
            label: DayLabel::Anomalous,
            episode_ids: vec!["P1@2021-02-10".into(), "P1@2021-03-01".into()],
            imputed_cells: 2,
        };
        let t = windows_table(&[(w.clone(), false)]);
        let bytes = t.to_bytes(None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        fs::write(&path, bytes).unwrap();
        let back = parse_windows(&CsvTable::read(&path, "features").unwrap()).unwrap();
        assert_eq!(back, vec![(w, false)]);
    }
}
