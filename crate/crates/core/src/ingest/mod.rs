//! Dataset loading and artifact persistence.

mod checkpoint;
mod files;

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDateTime;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouper::{Label, WindowSpec};
use crate::parser::RawLogLine;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, Role,
    CHECKPOINT_VERSION,
};
pub use files::{
    read_parse_file, read_sequence_file, read_templates, write_parse_file, write_sequence_file,
    write_templates,
};

/// Where anomaly labels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSource {
    /// A header field per line; any value other than `normal_flag` marks an
    /// anomaly.
    LineFlag { normal_flag: String },
    /// A `BlockId,Label` CSV next to the log file.
    Csv { file: String },
}

/// Layout of a log corpus, read from a TOML preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Regex with a `content` group and optionally `label` and the groups
    /// named in `timestamp_groups`.
    pub line_pattern: String,
    #[serde(default)]
    pub timestamp_groups: Vec<String>,
    /// chrono format for the space-joined timestamp groups, or `epoch`.
    #[serde(default)]
    pub timestamp_format: Option<String>,
    #[serde(default)]
    pub mask_patterns: Vec<String>,
    pub labels: LabelSource,
    pub window: WindowSpec,
    pub train_count: usize,
    pub val_fraction: f64,
}

const PRESETS: [(&str, &str); 3] = [
    ("hdfs", include_str!("../../presets/hdfs.toml")),
    ("bgl", include_str!("../../presets/bgl.toml")),
    (
        "thunderbird",
        include_str!("../../presets/thunderbird.toml"),
    ),
];

impl DatasetSpec {
    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown dataset preset {name:?}")))?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DatasetSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("dataset spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) {
            return Self::preset(name_or_path);
        }
        let text = std::fs::read_to_string(name_or_path)
            .map_err(|e| Error::io(format!("reading {name_or_path}"), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let re = self.regex()?;
        let names: Vec<&str> = re.capture_names().flatten().collect();
        if !names.contains(&"content") {
            return Err(Error::Config(format!(
                "{}: line pattern lacks a content group",
                self.name
            )));
        }
        for g in &self.timestamp_groups {
            if !names.contains(&g.as_str()) {
                return Err(Error::Config(format!(
                    "{}: timestamp group {g:?} not in line pattern",
                    self.name
                )));
            }
        }
        if !self.timestamp_groups.is_empty() && self.timestamp_format.is_none() {
            return Err(Error::Config(format!(
                "{}: timestamp groups need a timestamp_format",
                self.name
            )));
        }
        if matches!(self.labels, LabelSource::LineFlag { .. }) && !names.contains(&"label") {
            return Err(Error::Config(format!(
                "{}: per-line labels need a label group in the line pattern",
                self.name
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "{}: val_fraction outside [0, 1)",
                self.name
            )));
        }
        self.window.validate()
    }

    fn regex(&self) -> Result<Regex> {
        Regex::new(&self.line_pattern)
            .map_err(|e| Error::Config(format!("{}: line pattern: {e}", self.name)))
    }
}

/// Lines of a corpus in file order plus the session label map (empty for
/// per-line labels).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedDataset {
    pub lines: Vec<RawLogLine>,
    pub labels: HashMap<String, Label>,
}

/// Split log text into lines per `spec`. `path` only names the source in
/// errors.
pub fn parse_log_text(text: &str, spec: &DatasetSpec, path: &Path) -> Result<Vec<RawLogLine>> {
    let re = spec.regex()?;
    let normal_flag = match &spec.labels {
        LabelSource::LineFlag { normal_flag } => Some(normal_flag.as_str()),
        LabelSource::Csv { .. } => None,
    };
    let malformed = |line: usize, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let caps = re.captures(raw).ok_or_else(|| {
            malformed(line_no, format!("does not match the {} layout", spec.name))
        })?;
        let content = caps.name("content").map_or("", |m| m.as_str()).trim();
        if content.is_empty() {
            return Err(malformed(line_no, "empty message content".into()));
        }
        let timestamp = match spec.timestamp_format.as_deref() {
            Some(fmt) if !spec.timestamp_groups.is_empty() => {
                let joined = spec
                    .timestamp_groups
                    .iter()
                    .map(|g| caps.name(g).map_or("", |m| m.as_str()))
                    .collect::<Vec<_>>()
                    .join(" ");
                Some(
                    parse_timestamp(&joined, fmt)
                        .ok_or_else(|| malformed(line_no, format!("bad timestamp {joined:?}")))?,
                )
            }
            _ => None,
        };
        let label_flag = normal_flag.map(|n| caps.name("label").map_or(n, |m| m.as_str()) != n);
        out.push(RawLogLine {
            line_no,
            timestamp,
            label_flag,
            content: content.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "{} holds no log lines",
            path.display()
        )));
    }
    Ok(out)
}

fn parse_timestamp(s: &str, fmt: &str) -> Option<i64> {
    if fmt == "epoch" {
        s.trim().parse().ok()
    } else {
        NaiveDateTime::parse_from_str(s, fmt)
            .ok()
            .map(|t| t.and_utc().timestamp())
    }
}

/// HDFS-style label CSV: `BlockId,Label` header, labels `Normal` or
/// `Anomaly`.
pub fn parse_label_csv(text: &str, path: &Path) -> Result<HashMap<String, Label>> {
    let malformed = |line: usize, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut labels = HashMap::new();
    for (i, row) in text.lines().enumerate() {
        let row = row.trim();
        if row.is_empty() || (i == 0 && row.eq_ignore_ascii_case("BlockId,Label")) {
            continue;
        }
        let (key, label) = row
            .split_once(',')
            .ok_or_else(|| malformed(i + 1, "expected BlockId,Label".into()))?;
        let label = match label.trim() {
            "Normal" => Label::Normal,
            "Anomaly" => Label::Anomaly,
            other => return Err(malformed(i + 1, format!("unknown label {other:?}"))),
        };
        labels.insert(key.trim().to_string(), label);
    }
    Ok(labels)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Load a log file and, for CSV-labelled datasets, its label file
/// (resolved next to the log unless absolute).
pub fn load_dataset(path: &Path, spec: &DatasetSpec) -> Result<LoadedDataset> {
    let lines = parse_log_text(&read_text(path)?, spec, path)?;
    let labels = match &spec.labels {
        LabelSource::LineFlag { .. } => HashMap::new(),
        LabelSource::Csv { file } => {
            let csv = path.parent().unwrap_or(Path::new(".")).join(file);
            if !csv.exists() {
                return Err(Error::InvalidInput(format!(
                    "{} dataset needs its label file {}",
                    spec.name,
                    csv.display()
                )));
            }
            parse_label_csv(&read_text(&csv)?, &csv)?
        }
    };
    Ok(LoadedDataset { lines, labels })
}
