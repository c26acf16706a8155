//! End-to-end wiring: parse → group → split → vocabulary → train →
//! calibrate → detect → evaluate, in memory or over an artifact directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{calibrate, detect, verdicts_to_csv, AnomalyVerdict, Threshold};
use crate::error::{Error, Result};
use crate::grouper::{
    chronological_split, group_session, group_sliding, EventSequence, Label, Split, WindowMode,
    WindowSpec,
};
use crate::ingest::{
    load_dataset, read_sequence_file, save_checkpoint, write_parse_file, write_sequence_file,
    write_templates, Checkpoint, DatasetSpec,
};
use crate::metrics::{auc_aupr, prf1, ConfusionCounts, Degenerate};
use crate::parser::{DrainConfig, Masker, ParseTree, ParsedLog};
use crate::scalar::Scalar;
use crate::synth::{CorpusLayout, GrammarSpec};
use crate::trainer::{train, TrainConfig, Trained};
use crate::vocab::{TokenId, Vocabulary};

/// Every setting of a pipeline run. Serialized as TOML for config files and
/// echoed into the artifacts of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Dataset preset name or TOML path; unused for sequence-file input.
    pub dataset: Option<String>,
    pub drain: DrainConfig,
    /// Overrides the dataset's window layout.
    pub window: Option<WindowSpec>,
    /// Overrides the dataset's (or synthetic layout's) training pool size.
    pub train_count: Option<usize>,
    pub val_fraction: Option<f64>,
    pub quantile: f64,
    pub eval_batch_size: usize,
    /// Worker threads for scoring.
    pub threads: usize,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: None,
            drain: DrainConfig::default(),
            window: None,
            train_count: None,
            val_fraction: None,
            quantile: 0.99,
            eval_batch_size: 64,
            threads: 1,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::Config(format!(
                "quantile {} outside (0, 1]",
                self.quantile
            )));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.drain.validate()?;
        if let Some(w) = &self.window {
            w.validate()?;
        }
        self.train.validate()
    }
}

/// Event tokens (no `[CLS]`) of each sequence, truncated for `max_len`.
pub fn encode_events(
    vocab: &Vocabulary,
    seqs: &[EventSequence],
    max_len: usize,
) -> Vec<Vec<TokenId>> {
    seqs.iter()
        .map(|s| vocab.encode_unpadded(s, max_len)[1..].to_vec())
        .collect()
}

/// `[CLS]`-prefixed tokens of each sequence.
pub fn encode_with_cls(
    vocab: &Vocabulary,
    seqs: &[EventSequence],
    max_len: usize,
) -> Vec<Vec<TokenId>> {
    seqs.iter()
        .map(|s| vocab.encode_unpadded(s, max_len))
        .collect()
}

/// SHA-256 over the sequence-file form of `seqs`.
pub fn fingerprint(seqs: &[EventSequence]) -> String {
    format!("{:x}", Sha256::digest(write_sequence_file(seqs).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Vec<Degenerate>,
    /// Absent when the test set holds a single class.
    pub auc: Option<f64>,
    pub aupr: Option<f64>,
    pub threshold: Threshold,
    pub median_score_normal: Option<f64>,
    pub median_score_anomaly: Option<f64>,
    pub test_sequences: usize,
    pub dataset_fingerprint: String,
    pub config: serde_json::Value,
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Score verdicts against the labels of the matching sequences.
pub fn evaluate(
    verdicts: &[AnomalyVerdict],
    labels: &[Label],
    threshold: Threshold,
    dataset_fingerprint: String,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if verdicts.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} verdicts for {} labelled sequences",
            verdicts.len(),
            labels.len()
        )));
    }
    let truth: Vec<bool> = labels.iter().map(|l| l.is_anomaly()).collect();
    let counts = ConfusionCounts::from_pairs(
        verdicts
            .iter()
            .map(|v| v.is_anomaly)
            .zip(truth.iter().copied()),
    );
    let p = prf1(&counts);
    let scores: Vec<f64> = verdicts.iter().map(|v| v.score).collect();
    let (auc, aupr) = match auc_aupr(&scores, &truth) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(Error::InvalidInput(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let (mut normal, mut anomalous): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    for (s, &y) in scores.iter().zip(&truth) {
        if y {
            anomalous.push(*s)
        } else {
            normal.push(*s)
        }
    }
    Ok(EvalReport {
        counts,
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        degenerate: p.degenerate,
        auc,
        aupr,
        threshold,
        median_score_normal: median(&mut normal),
        median_score_anomaly: median(&mut anomalous),
        test_sequences: verdicts.len(),
        dataset_fingerprint,
        config,
    })
}

/// Everything a train-and-evaluate run produces.
#[derive(Debug, Clone)]
pub struct RunOutputs<S> {
    pub vocab: Vocabulary,
    pub trained: Trained<S>,
    pub threshold: Threshold,
    pub verdicts: Vec<AnomalyVerdict>,
    pub report: EvalReport,
}

/// Train on `split.train`, calibrate on `split.val`, detect and evaluate on
/// `split.test`.
pub fn train_and_evaluate<S: Scalar>(
    split: &Split,
    cfg: &PipelineConfig,
    progress: crate::trainer::Progress<'_>,
) -> Result<RunOutputs<S>> {
    cfg.validate()?;
    if split.train.iter().any(|s| s.label.is_anomaly()) {
        return Err(Error::InvalidInput(
            "training split holds anomalous sequences".into(),
        ));
    }
    if split.val.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let max_len = cfg.train.model.max_len;
    let vocab = Vocabulary::build(&split.train)?;
    let trained = train::<S>(
        &encode_events(&vocab, &split.train, max_len),
        &encode_events(&vocab, &split.val, max_len),
        vocab.len(),
        &cfg.train,
        progress,
    )?;
    let val_scores: Vec<f64> = crate::detector::score_batches(
        &trained.discriminator,
        &encode_with_cls(&vocab, &split.val, max_len),
        cfg.eval_batch_size,
    )?
    .into_iter()
    .map(|(s, _)| s)
    .collect();
    let threshold = calibrate(&val_scores, cfg.quantile)?;
    let ids: Vec<String> = split.test.iter().map(|s| s.seq_id.clone()).collect();
    let verdicts = detect(
        &ids,
        &encode_with_cls(&vocab, &split.test, max_len),
        &trained.discriminator,
        vocab.len(),
        &threshold,
        cfg.eval_batch_size,
    )?;
    let labels: Vec<Label> = split.test.iter().map(|s| s.label).collect();
    let report = evaluate(
        &verdicts,
        &labels,
        threshold,
        fingerprint(&split.test),
        cfg.to_json(),
    )?;
    Ok(RunOutputs {
        vocab,
        trained,
        threshold,
        verdicts,
        report,
    })
}

/// Parse raw lines with a fresh tree.
pub fn parse_lines(
    lines: &[crate::parser::RawLogLine],
    drain: DrainConfig,
    mask_patterns: &[String],
) -> Result<(Vec<ParsedLog>, ParseTree)> {
    let masker = if mask_patterns.is_empty() {
        Masker::default()
    } else {
        Masker::new(mask_patterns)?
    };
    let mut tree = ParseTree::new(drain, masker)?;
    let parsed = lines.iter().map(|l| tree.parse_line(l)).collect();
    Ok((parsed, tree))
}

/// Group parsed logs per `window`; returns the sequences and the number of
/// rejected lines.
pub fn group(
    parsed: &[ParsedLog],
    window: &WindowSpec,
    labels: &HashMap<String, Label>,
) -> Result<(Vec<EventSequence>, usize)> {
    match window.mode {
        WindowMode::Session => {
            let g = group_session(parsed, window, labels)?;
            Ok((g.sequences, g.rejected.len()))
        }
        WindowMode::Sliding | WindowMode::Fixed => Ok((group_sliding(parsed, window)?, 0)),
    }
}

/// Sizes of the synthetic corpus in a data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub grammar: GrammarSpec,
    pub layout: CorpusLayout,
}

pub const SEQUENCES_FILE: &str = "sequences.tsv";
pub const SYNTH_MANIFEST: &str = "synth.json";

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Sequences plus split sizes from `data`: either a directory holding
/// `sequences.tsv` (with an optional `synth.json`) or a raw log file read
/// per the configured dataset.
pub fn load_sequences(
    data: &Path,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<(Vec<EventSequence>, usize, f64)> {
    let seq_file = data.join(SEQUENCES_FILE);
    if data.is_dir() && seq_file.exists() {
        let seqs = read_sequence_file(&read_text(&seq_file)?, &seq_file)?;
        let manifest = data.join(SYNTH_MANIFEST);
        let layout = if manifest.exists() {
            let m: SynthManifest = serde_json::from_str(&read_text(&manifest)?)
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", manifest.display())))?;
            Some(m.layout)
        } else {
            None
        };
        let train_count = cfg
            .train_count
            .or(layout.as_ref().map(CorpusLayout::pool))
            .ok_or_else(|| {
                Error::Config(
                    "train_count is required for sequence files without synth.json".into(),
                )
            })?;
        let val_fraction = cfg
            .val_fraction
            .or(layout.as_ref().map(CorpusLayout::val_fraction))
            .unwrap_or(0.1);
        return Ok((seqs, train_count, val_fraction));
    }
    let spec_name = cfg.dataset.as_deref().ok_or_else(|| {
        Error::Config("raw log input needs a dataset preset or dataset TOML (--dataset)".into())
    })?;
    let spec = DatasetSpec::resolve(spec_name)?;
    let log = if data.is_dir() {
        find_log(data)?
    } else {
        data.to_path_buf()
    };
    let loaded = load_dataset(&log, &spec)?;
    let (parsed, tree) = parse_lines(&loaded.lines, cfg.drain, &spec.mask_patterns)?;
    let window = cfg.window.clone().unwrap_or(spec.window.clone());
    let (seqs, _) = group(&parsed, &window, &loaded.labels)?;
    if let Some(out) = out {
        write_text(&out.join("parsed.tsv"), &write_parse_file(&parsed))?;
        write_text(
            &out.join("templates.tsv"),
            &write_templates(tree.templates()),
        )?;
        write_text(&out.join(SEQUENCES_FILE), &write_sequence_file(&seqs))?;
    }
    Ok((
        seqs,
        cfg.train_count.unwrap_or(spec.train_count),
        cfg.val_fraction.unwrap_or(spec.val_fraction),
    ))
}

fn find_log(dir: &Path) -> Result<PathBuf> {
    let mut logs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "log"))
        .collect();
    logs.sort();
    match logs.len() {
        1 => Ok(logs.remove(0)),
        0 => Err(Error::InvalidInput(format!(
            "{} holds neither {SEQUENCES_FILE} nor a .log file",
            dir.display()
        ))),
        _ => Err(Error::InvalidInput(format!(
            "{} holds several .log files",
            dir.display()
        ))),
    }
}

/// Single-line JSON of the config, used as a provenance comment in CSV
/// reports.
pub fn provenance_line(cfg: &PipelineConfig) -> String {
    format!("# config: {}\n", cfg.to_json())
}

/// Run the whole pipeline, writing every artifact under `out`.
pub fn run_pipeline<S: Scalar>(
    data: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    progress: crate::trainer::Progress<'_>,
) -> Result<EvalReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let (seqs, train_count, val_fraction) = load_sequences(data, cfg, Some(out))?;
    let split = chronological_split(&seqs, train_count, val_fraction)?;
    write_split(out, &split)?;
    let run = train_and_evaluate::<S>(&split, cfg, progress)?;
    write_run_artifacts(out, cfg, &run)?;
    Ok(run.report)
}

pub fn write_split(out: &Path, split: &Split) -> Result<()> {
    write_text(&out.join("train.tsv"), &write_sequence_file(&split.train))?;
    write_text(&out.join("val.tsv"), &write_sequence_file(&split.val))?;
    write_text(&out.join("test.tsv"), &write_sequence_file(&split.test))
}

pub fn write_run_artifacts<S: Scalar>(
    out: &Path,
    cfg: &PipelineConfig,
    run: &RunOutputs<S>,
) -> Result<()> {
    let hash = run.vocab.fingerprint();
    write_text(&out.join("vocab.tsv"), &run.vocab.to_tsv())?;
    save_checkpoint(
        &out.join("discriminator.ckpt"),
        &Checkpoint::of_discriminator(&run.trained.discriminator, &hash),
    )?;
    if let Some(g) = &run.trained.generator {
        save_checkpoint(
            &out.join("generator.ckpt"),
            &Checkpoint::of_generator(g, &hash),
        )?;
    }
    let prov = provenance_line(cfg);
    write_text(
        &out.join("train_report.csv"),
        &format!("{prov}{}", run.trained.report.to_csv()),
    )?;
    write_text(
        &out.join("train_summary.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "val_normal": run.trained.report.val_normal,
            "val_pseudo": run.trained.report.val_pseudo,
            "config": cfg.to_json(),
        }))
        .expect("summary serializes"),
    )?;
    write_text(
        &out.join("threshold.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "threshold": run.threshold,
            "config": cfg.to_json(),
        }))
        .expect("threshold serializes"),
    )?;
    write_text(
        &out.join("verdicts.csv"),
        &format!("{prov}{}", verdicts_to_csv(&run.verdicts)),
    )?;
    write_text(
        &out.join("eval_report.json"),
        &serde_json::to_string_pretty(&run.report).expect("report serializes"),
    )
}

/// Parse a `start:end:step` sweep specification (inclusive end).
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("sweep {spec:?} must look like start:end:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || end < start {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let cfg = PipelineConfig::from_toml(
            "quantile = 0.95\n[train]\ngenerator = \"random\"\nrtd = false\n",
        )
        .unwrap();
        assert_eq!(cfg.quantile, 0.95);
        assert!(!cfg.train.rtd);
        assert!(PipelineConfig::from_toml("bogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml("quantile = 1.5\n").is_err());
    }

    #[test]
    fn sweep_specs() {
        let r = parse_sweep("0:1:0.1").unwrap();
        assert_eq!(r.len(), 11);
        assert_eq!(r[3], 0.3);
        assert_eq!(r[10], 1.0);
        assert!(parse_sweep("0:1").is_err());
        assert!(parse_sweep("1:0:0.1").is_err());
    }

    #[test]
    fn evaluation_counts_and_medians() {
        let t = Threshold {
            epsilon: 1.0,
            quantile: 0.99,
            calibration_size: 3,
        };
        let v: Vec<AnomalyVerdict> = [0.5, 2.0, 3.0, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &s)| AnomalyVerdict::new(i.to_string(), s, 1.0, 0))
            .collect();
        let labels = [Label::Normal, Label::Anomaly, Label::Normal, Label::Anomaly];
        let r = evaluate(&v, &labels, t, "x".into(), serde_json::Value::Null).unwrap();
        assert_eq!(
            (r.counts.tp, r.counts.fp, r.counts.fn_, r.counts.tn),
            (1, 1, 1, 1)
        );
        assert_eq!(r.median_score_anomaly, Some(1.35));
        assert_eq!(r.auc, Some(0.5));
        let only_normal = evaluate(
            &v[..1],
            &labels[..1],
            t,
            "x".into(),
            serde_json::Value::Null,
        )
        .unwrap();
        assert_eq!(only_normal.auc, None);
    }
}
