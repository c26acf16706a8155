//! Tab-separated artifact formats: parse records, templates and sequences.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grouper::{EventSequence, Label};
use crate::parser::{LogTemplate, ParsedLog, TemplateId};

fn malformed(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty())
}

/// `line_no<TAB>timestamp<TAB>template_id<TAB>params_json<TAB>label_flag`,
/// with empty fields for absent timestamps and flags.
pub fn write_parse_file(logs: &[ParsedLog]) -> String {
    let mut out = String::new();
    for l in logs {
        let params = serde_json::to_string(&l.parameters).expect("strings serialize");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            l.line_no,
            l.timestamp.map(|t| t.to_string()).unwrap_or_default(),
            l.template_id,
            params,
            l.label_flag
                .map(|f| u8::from(f).to_string())
                .unwrap_or_default()
        );
    }
    out
}

pub fn read_parse_file(text: &str, path: &Path) -> Result<Vec<ParsedLog>> {
    records(text)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(malformed(
                    path,
                    n,
                    format!("expected 5 fields, found {}", f.len()),
                ));
            }
            let line_no = f[0]
                .parse()
                .map_err(|_| malformed(path, n, "bad line number"))?;
            let timestamp = match f[1] {
                "" => None,
                t => Some(t.parse().map_err(|_| malformed(path, n, "bad timestamp"))?),
            };
            let template_id = f[2]
                .parse()
                .map_err(|_| malformed(path, n, "bad template id"))?;
            let parameters = serde_json::from_str(f[3])
                .map_err(|e| malformed(path, n, format!("bad parameters: {e}")))?;
            let label_flag = match f[4] {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                _ => return Err(malformed(path, n, "label flag must be empty, 0 or 1")),
            };
            Ok(ParsedLog {
                line_no,
                timestamp,
                template_id,
                parameters,
                label_flag,
            })
        })
        .collect()
}

/// `template_id<TAB>template_string`.
pub fn write_templates(templates: &[LogTemplate]) -> String {
    let mut out = String::new();
    for t in templates {
        let _ = writeln!(out, "{}\t{}", t.template_id, t.render());
    }
    out
}

pub fn read_templates(text: &str, path: &Path) -> Result<Vec<(TemplateId, String)>> {
    records(text)
        .map(|(n, line)| {
            let (id, tpl) = line
                .split_once('\t')
                .ok_or_else(|| malformed(path, n, "expected template_id<TAB>template"))?;
            Ok((
                id.parse()
                    .map_err(|_| malformed(path, n, "bad template id"))?,
                tpl.to_string(),
            ))
        })
        .collect()
}

/// `seq_id<TAB>label<TAB>space-separated template ids`, label `0` or `1`.
pub fn write_sequence_file(seqs: &[EventSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        let ids: Vec<String> = s.event_ids.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{}\t{}\t{}", s.seq_id, s.label.as_u8(), ids.join(" "));
    }
    out
}

pub fn read_sequence_file(text: &str, path: &Path) -> Result<Vec<EventSequence>> {
    records(text)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(malformed(
                    path,
                    n,
                    format!("expected 3 fields, found {}", f.len()),
                ));
            }
            let label = match f[1] {
                "0" => Label::Normal,
                "1" => Label::Anomaly,
                _ => return Err(malformed(path, n, "label must be 0 or 1")),
            };
            let event_ids: Vec<TemplateId> = f[2]
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| malformed(path, n, format!("bad template id {t:?}")))
                })
                .collect::<Result<_>>()?;
            if event_ids.is_empty() {
                return Err(malformed(path, n, "sequence has no events"));
            }
            Ok(EventSequence {
                seq_id: f[0].to_string(),
                event_ids,
                label,
                first_timestamp: None,
            })
        })
        .collect()
}
