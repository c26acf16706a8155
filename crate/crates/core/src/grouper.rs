//! Grouping of parsed logs into labelled event sequences, either by a
//! session identifier (HDFS block ids) or by time windows (BGL, Thunderbird).

use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::{ParsedLog, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn from_flag(anomalous: bool) -> Self {
        if anomalous {
            Label::Anomaly
        } else {
            Label::Normal
        }
    }

    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    /// Block id (session mode) or window start time (time windows).
    pub seq_id: String,
    pub event_ids: Vec<TemplateId>,
    pub label: Label,
    pub first_timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    Session,
    Sliding,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub mode: WindowMode,
    #[serde(default)]
    pub identifier_pattern: Option<String>,
    #[serde(default)]
    pub window_seconds: Option<i64>,
    #[serde(default)]
    pub step_seconds: Option<i64>,
}

impl WindowSpec {
    pub fn session(identifier_pattern: impl Into<String>) -> Self {
        WindowSpec {
            mode: WindowMode::Session,
            identifier_pattern: Some(identifier_pattern.into()),
            window_seconds: None,
            step_seconds: None,
        }
    }

    pub fn sliding(window_seconds: i64, step_seconds: i64) -> Self {
        WindowSpec {
            mode: WindowMode::Sliding,
            identifier_pattern: None,
            window_seconds: Some(window_seconds),
            step_seconds: Some(step_seconds),
        }
    }

    pub fn fixed(window_seconds: i64) -> Self {
        WindowSpec {
            mode: WindowMode::Fixed,
            identifier_pattern: None,
            window_seconds: Some(window_seconds),
            step_seconds: Some(window_seconds),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            WindowMode::Session => {
                let pattern = self.identifier_pattern.as_deref().ok_or_else(|| {
                    Error::Config("session windows need an identifier pattern".into())
                })?;
                Regex::new(pattern)
                    .map_err(|e| Error::Config(format!("bad identifier pattern: {e}")))?;
            }
            WindowMode::Sliding | WindowMode::Fixed => {
                let window = self.window_seconds.unwrap_or(0);
                let step = self.step_for_mode();
                if window <= 0 || step <= 0 {
                    return Err(Error::Config(
                        "time windows need positive window_seconds and step_seconds".into(),
                    ));
                }
                if step > window {
                    return Err(Error::Config(format!(
                        "step {step}s exceeds window {window}s"
                    )));
                }
            }
        }
        Ok(())
    }

    fn step_for_mode(&self) -> i64 {
        match self.mode {
            WindowMode::Fixed => self.window_seconds.unwrap_or(0),
            _ => self.step_seconds.unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionGrouping {
    pub sequences: Vec<EventSequence>,
    /// Line numbers of logs without an identifier match.
    pub rejected: Vec<usize>,
}

/// One sequence per distinct identifier, in order of first occurrence.
///
/// The identifier is the first match of the window's identifier pattern over a log's
/// parameters. A sequence is anomalous when its key is labelled so in
/// `labels` or when any member log carries an anomaly flag.
pub fn group_session(
    logs: &[ParsedLog],
    spec: &WindowSpec,
    labels: &HashMap<String, Label>,
) -> Result<SessionGrouping> {
    if spec.mode != WindowMode::Session {
        return Err(Error::Config(
            "group_session needs a session window spec".into(),
        ));
    }
    spec.validate()?;
    let pattern = Regex::new(spec.identifier_pattern.as_deref().unwrap_or_default())
        .map_err(|e| Error::Config(format!("bad identifier pattern: {e}")))?;

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out = SessionGrouping::default();
    for log in logs {
        let key = log
            .parameters
            .iter()
            .find_map(|p| pattern.find(p).map(|m| m.as_str().to_string()));
        let Some(key) = key else {
            out.rejected.push(log.line_no);
            continue;
        };
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            out.sequences.push(EventSequence {
                label: labels.get(&key).copied().unwrap_or(Label::Normal),
                seq_id: key,
                event_ids: Vec::new(),
                first_timestamp: log.timestamp,
            });
            out.sequences.len() - 1
        });
        let seq = &mut out.sequences[slot];
        seq.event_ids.push(log.template_id);
        if log.label_flag == Some(true) {
            seq.label = Label::Anomaly;
        }
    }
    Ok(out)
}

/// Time windows `[t0 + k·step, t0 + k·step + window)` with `t0` the earliest
/// timestamp. Windows are emitted until one reaches past the latest
/// timestamp; empty windows are skipped. Members keep their source order.
pub fn group_sliding(logs: &[ParsedLog], spec: &WindowSpec) -> Result<Vec<EventSequence>> {
    if spec.mode == WindowMode::Session {
        return Err(Error::Config(
            "group_sliding needs a time window spec".into(),
        ));
    }
    spec.validate()?;
    let window = spec.window_seconds.unwrap_or_default();
    let step = spec.step_for_mode();

    let mut stamped = Vec::with_capacity(logs.len());
    for (i, log) in logs.iter().enumerate() {
        let ts = log.timestamp.ok_or_else(|| {
            Error::InvalidInput(format!(
                "line {} has no timestamp; time windows need one on every log",
                log.line_no
            ))
        })?;
        stamped.push((ts, i));
    }
    if stamped.is_empty() {
        return Ok(Vec::new());
    }
    // Stable by (timestamp, source index), so in-order input is untouched.
    stamped.sort_unstable();
    let t0 = stamped[0].0;
    let t_max = stamped[stamped.len() - 1].0;

    let mut out = Vec::new();
    let mut lo = 0usize;
    let mut start = t0;
    loop {
        let end = start + window;
        while lo < stamped.len() && stamped[lo].0 < start {
            lo += 1;
        }
        let hi = lo + stamped[lo..].partition_point(|&(t, _)| t < end);
        if hi > lo {
            let mut members: Vec<usize> = stamped[lo..hi].iter().map(|&(_, i)| i).collect();
            members.sort_unstable();
            let anomalous = members.iter().any(|&i| logs[i].label_flag == Some(true));
            out.push(EventSequence {
                seq_id: start.to_string(),
                event_ids: members.iter().map(|&i| logs[i].template_id).collect(),
                label: Label::from_flag(anomalous),
                first_timestamp: Some(start),
            });
        }
        if end > t_max {
            break;
        }
        start += step;
    }
    Ok(out)
}

/// Chronological split of grouped sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<EventSequence>,
    pub val: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub warnings: Vec<String>,
}

/// The first `train_count` normal sequences form the training pool, whose
/// last `val_fraction` share becomes validation. Every anomalous sequence
/// and every remaining normal goes to test. No shuffling: input order is
/// kept within each split.
pub fn chronological_split(
    seqs: &[EventSequence],
    train_count: usize,
    val_fraction: f64,
) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let normals = seqs.iter().filter(|s| !s.label.is_anomaly()).count();
    if normals < train_count {
        return Err(Error::InvalidInput(format!(
            "only {normals} normal sequences, {train_count} requested for training"
        )));
    }
    let val_count = (val_fraction * train_count as f64).round() as usize;
    let fit_count = train_count - val_count;

    let mut split = Split::default();
    let mut taken = 0usize;
    for seq in seqs {
        if seq.label.is_anomaly() {
            split.test.push(seq.clone());
        } else if taken < fit_count {
            split.train.push(seq.clone());
            taken += 1;
        } else if taken < train_count {
            split.val.push(seq.clone());
            taken += 1;
        } else {
            split.test.push(seq.clone());
        }
    }
    if !split.test.iter().any(|s| s.label.is_anomaly()) {
        split
            .warnings
            .push("test split contains no anomalous sequences".into());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(line_no: usize, ts: Option<i64>, tid: TemplateId, params: &[&str]) -> ParsedLog {
        ParsedLog {
            line_no,
            timestamp: ts,
            template_id: tid,
            parameters: params.iter().map(|s| s.to_string()).collect(),
            label_flag: None,
        }
    }

    fn seq(id: usize, label: Label) -> EventSequence {
        EventSequence {
            seq_id: id.to_string(),
            event_ids: vec![1, 2],
            label,
            first_timestamp: Some(id as i64),
        }
    }

    const BLK: &str = r"blk_-?\d+";

    #[test]
    fn session_partitions_by_block() {
        let logs = vec![
            log(1, None, 1, &["blk_1"]),
            log(2, None, 2, &["blk_2"]),
            log(3, None, 3, &["blk_1"]),
            log(4, None, 1, &["x", "/data/blk_1"]),
            log(5, None, 4, &["blk_2"]),
        ];
        let mut labels = HashMap::new();
        labels.insert("blk_1".to_string(), Label::Anomaly);
        let g = group_session(&logs, &WindowSpec::session(BLK), &labels).unwrap();
        assert_eq!(g.sequences.len(), 2);
        assert_eq!(g.sequences[0].seq_id, "blk_1");
        assert_eq!(g.sequences[0].event_ids, vec![1, 3, 1]);
        assert_eq!(g.sequences[0].label, Label::Anomaly);
        assert_eq!(g.sequences[1].event_ids, vec![2, 4]);
        assert_eq!(g.sequences[1].label, Label::Normal);
        assert!(g.rejected.is_empty());
    }

    #[test]
    fn identifier_less_logs_are_rejected() {
        let logs = vec![log(1, None, 1, &["blk_1"]), log(2, None, 2, &["nothing"])];
        let g = group_session(&logs, &WindowSpec::session(BLK), &HashMap::new()).unwrap();
        assert_eq!(g.rejected, vec![2]);
        assert_eq!(g.sequences.len(), 1);
    }

    #[test]
    fn sliding_windows_start_every_step() {
        let logs: Vec<_> = (0..600).map(|t| log(t, Some(t as i64), 1, &[])).collect();
        let w = group_sliding(&logs, &WindowSpec::sliding(300, 60)).unwrap();
        let starts: Vec<_> = w.iter().map(|s| s.first_timestamp.unwrap()).collect();
        assert_eq!(starts, vec![0, 60, 120, 180, 240, 300]);
        assert_eq!(w[0].event_ids.len(), 300);
        assert!(w.iter().all(|s| s.label == Label::Normal));
    }

    #[test]
    fn sliding_membership_and_labels() {
        let mut logs: Vec<_> = (0..10)
            .map(|i| log(i, Some(i as i64 * 20), i as TemplateId, &[]))
            .collect();
        logs[4].label_flag = Some(true); // t = 80
        let w = group_sliding(&logs, &WindowSpec::sliding(60, 30)).unwrap();
        for s in &w {
            let start = s.first_timestamp.unwrap();
            let expected: Vec<TemplateId> = logs
                .iter()
                .filter(|l| {
                    let t = l.timestamp.unwrap();
                    t >= start && t < start + 60
                })
                .map(|l| l.template_id)
                .collect();
            assert_eq!(s.event_ids, expected);
            assert_eq!(s.label.is_anomaly(), (start..start + 60).contains(&80));
        }
    }

    #[test]
    fn missing_timestamp_names_line() {
        let logs = vec![log(1, Some(0), 1, &[]), log(7, None, 1, &[])];
        let err = group_sliding(&logs, &WindowSpec::sliding(60, 30)).unwrap_err();
        assert!(err.to_string().contains("line 7"));
    }

    #[test]
    fn fixed_windows_are_disjoint() {
        let logs: Vec<_> = (0..100).map(|t| log(t, Some(t as i64), 1, &[])).collect();
        let w = group_sliding(&logs, &WindowSpec::fixed(25)).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w.iter().map(|s| s.event_ids.len()).sum::<usize>(), 100);
    }

    #[test]
    fn split_counts_follow_rule() {
        let mut seqs: Vec<_> = (0..6000).map(|i| seq(i, Label::Normal)).collect();
        for i in 0..100 {
            seqs.insert(5000 + i * 10, seq(100_000 + i, Label::Anomaly));
        }
        let s = chronological_split(&seqs, 5000, 0.1).unwrap();
        assert_eq!(s.train.len(), 4500);
        assert_eq!(s.val.len(), 500);
        assert_eq!(s.test.len(), 1100);
        assert_eq!(s.test.iter().filter(|q| q.label.is_anomaly()).count(), 100);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn split_without_anomalies_warns() {
        let seqs: Vec<_> = (0..20).map(|i| seq(i, Label::Normal)).collect();
        let s = chronological_split(&seqs, 10, 0.1).unwrap();
        assert_eq!(s.test.len(), 10);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn split_needs_enough_normals() {
        let seqs: Vec<_> = (0..5).map(|i| seq(i, Label::Normal)).collect();
        assert!(chronological_split(&seqs, 10, 0.1).is_err());
    }

    #[test]
    fn split_keeps_chronological_order() {
        let mut seqs: Vec<_> = (0..50).map(|i| seq(i, Label::Normal)).collect();
        seqs[3].label = Label::Anomaly;
        seqs[30].label = Label::Anomaly;
        let s = chronological_split(&seqs, 20, 0.25).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            assert!(part
                .windows(2)
                .all(|w| w[0].first_timestamp <= w[1].first_timestamp));
        }
    }
}
