//! Threshold calibration, batch detection and inference benchmarking. Only
//! the discriminator runs on these paths.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::das::Discriminator;
use crate::error::{Error, Result};
use crate::mgag::{generator_ops_on_this_thread, sample_mask, Generator, MaskPattern};
use crate::rng::{substream, tag};
use crate::scalar::Scalar;
use crate::vocab::{TokenId, CLS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub epsilon: f64,
    pub quantile: f64,
    pub calibration_size: usize,
}

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest score.
pub fn calibrate(scores: &[f64], q: f64) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("quantile {q} outside (0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against q·n landing a hair above an integer through rounding.
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(Threshold {
        epsilon: sorted[rank.min(n) - 1],
        quantile: q,
        calibration_size: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub seq_id: String,
    pub score: f64,
    pub threshold: f64,
    pub is_anomaly: bool,
    /// Forward-pass time of the sequence's batch divided by the batch size.
    #[serde(skip)]
    pub latency_ns: u64,
}

impl AnomalyVerdict {
    pub fn new(seq_id: String, score: f64, threshold: f64, latency_ns: u64) -> Self {
        AnomalyVerdict {
            seq_id,
            score,
            threshold,
            is_anomaly: score > threshold,
            latency_ns,
        }
    }
}

fn check_inputs<S: Scalar>(
    disc: &Discriminator<S>,
    vocab_len: usize,
    seqs: &[Vec<TokenId>],
) -> Result<()> {
    if disc.config.vocab_size != vocab_len {
        return Err(Error::VocabMismatch(format!(
            "discriminator expects {} tokens, vocabulary has {vocab_len}",
            disc.config.vocab_size
        )));
    }
    if let Some(i) = seqs.iter().position(|s| s.first() != Some(&CLS)) {
        return Err(Error::InvalidInput(format!(
            "sequence {i} does not start with [CLS]"
        )));
    }
    Ok(())
}

/// Scores of `[CLS]`-prefixed sequences, batch by batch, spread over the
/// current rayon pool. Returns each score with its per-sequence latency.
pub fn score_batches<S: Scalar>(
    disc: &Discriminator<S>,
    seqs: &[Vec<TokenId>],
    batch_size: usize,
) -> Result<Vec<(f64, u64)>> {
    let chunks: Vec<Result<Vec<(f64, u64)>>> = seqs
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let start = Instant::now();
            let scores = disc.scores(chunk)?;
            let per = start.elapsed().as_nanos() as u64 / chunk.len() as u64;
            Ok(scores
                .into_iter()
                .map(|s| (s.to_f64_lossy(), per))
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(seqs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// One verdict per sequence; `seqs` are `[CLS]`-prefixed token ids.
pub fn detect<S: Scalar>(
    ids: &[String],
    seqs: &[Vec<TokenId>],
    disc: &Discriminator<S>,
    vocab_len: usize,
    threshold: &Threshold,
    batch_size: usize,
) -> Result<Vec<AnomalyVerdict>> {
    assert_eq!(ids.len(), seqs.len(), "one id per sequence");
    check_inputs(disc, vocab_len, seqs)?;
    Ok(score_batches(disc, seqs, batch_size)?
        .into_iter()
        .zip(ids)
        .map(|((score, ns), id)| AnomalyVerdict::new(id.clone(), score, threshold.epsilon, ns))
        .collect())
}

pub fn verdicts_to_csv(verdicts: &[AnomalyVerdict]) -> String {
    let mut out = String::from("seq_id,score,threshold,is_anomaly\n");
    for v in verdicts {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            v.seq_id,
            v.score,
            v.threshold,
            u8::from(v.is_anomaly)
        );
    }
    out
}

pub fn verdicts_from_csv(text: &str) -> Result<Vec<AnomalyVerdict>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#'));
    match lines.next() {
        Some((_, "seq_id,score,threshold,is_anomaly")) => {}
        _ => return Err(Error::InvalidInput("verdict file lacks its header".into())),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let bad = || Error::InvalidInput(format!("verdict line {}: {l:?}", n + 1));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let score: f64 = f[1].parse().map_err(|_| bad())?;
            let threshold: f64 = f[2].parse().map_err(|_| bad())?;
            let flag = match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let v = AnomalyVerdict::new(f[0].to_string(), score, threshold, 0);
            if v.is_anomaly != flag {
                return Err(bad());
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    /// Discriminator forward only, as in detection.
    Discriminator,
    /// Mask, generator forward and complement sampling, then the
    /// discriminator: a diagnostic baseline, not a detection path.
    GeneratorDiscriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub path: BenchPath,
    pub sequences: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub threads: usize,
    pub total_seconds: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub generator_ops: u64,
    pub cpu_model: String,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "path {:?}, {} sequences x {} repeats, batch {}, {} thread(s) on {}\n\
             Total (s): {:.3}\nAvg (ms): {:.2}\nMedian (ms): {:.2}\nP99 (ms): {:.2}\ngenerator ops: {}\n",
            self.path,
            self.sequences,
            self.repeats,
            self.batch_size,
            self.threads,
            self.cpu_model,
            self.total_seconds,
            self.mean_ms,
            self.median_ms,
            self.p99_ms,
            self.generator_ops
        )
    }

    pub fn csv_header() -> &'static str {
        "path,threads,sequences,repeats,batch_size,total_seconds,mean_ms,median_ms,p99_ms,generator_ops,cpu_model"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.4},{:.4},{:.4},{},\"{}\"",
            match self.path {
                BenchPath::Discriminator => "discriminator",
                BenchPath::GeneratorDiscriminator => "generator+discriminator",
            },
            self.threads,
            self.sequences,
            self.repeats,
            self.batch_size,
            self.total_seconds,
            self.mean_ms,
            self.median_ms,
            self.p99_ms,
            self.generator_ops,
            self.cpu_model.replace('"', "'")
        )
    }
}

/// CPU model string from `/proc/cpuinfo`, or `unknown`.
pub fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub repeats: usize,
    /// 1 runs on the calling thread; more uses a dedicated rayon pool.
    pub threads: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_size: 64,
            repeats: 1,
            threads: 1,
            mask_ratio: 0.5,
            seed: 0,
        }
    }
}

/// Minimum number of sequences a benchmark accepts.
pub const BENCH_MIN_SEQUENCES: usize = 100;

/// Time inference over `seqs` (`[CLS]`-prefixed) after one untimed warm-up
/// pass. With `generator` set the diagnostic generator path is timed
/// instead. Per-sequence latency is each batch's wall time divided by its
/// size.
pub fn bench<S: Scalar>(
    seqs: &[Vec<TokenId>],
    disc: &Discriminator<S>,
    generator: Option<&Generator<S>>,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if seqs.len() < BENCH_MIN_SEQUENCES {
        return Err(Error::InvalidInput(format!(
            "benchmark needs at least {BENCH_MIN_SEQUENCES} sequences, got {}",
            seqs.len()
        )));
    }
    if cfg.repeats == 0 || cfg.batch_size == 0 || cfg.threads == 0 {
        return Err(Error::Config(
            "batch size, repeats and threads must be positive".into(),
        ));
    }
    check_inputs(disc, disc.config.vocab_size, seqs)?;
    let ops = AtomicU64::new(0);
    let run_batch = |bi: usize, chunk: &[Vec<TokenId>]| -> Result<u64> {
        let before = generator_ops_on_this_thread();
        let start = Instant::now();
        match generator {
            None => {
                disc.scores(chunk)?;
            }
            Some(g) => {
                let events: Vec<&[TokenId]> = chunk.iter().map(|s| &s[1..]).collect();
                let mut rngs: Vec<_> = (0..chunk.len())
                    .map(|i| substream(cfg.seed, &[tag::VALIDATION, bi as u64, i as u64]))
                    .collect();
                let masks: Vec<MaskPattern> = events
                    .iter()
                    .zip(&mut rngs)
                    .map(|(e, r)| sample_mask(e.len(), cfg.mask_ratio, r))
                    .collect();
                let mrefs: Vec<&MaskPattern> = masks.iter().collect();
                let filled = g.generate(&events, &mrefs, &mut rngs)?;
                let inputs: Vec<Vec<TokenId>> = filled
                    .iter()
                    .map(|o| crate::das::with_cls(&o.tokens))
                    .collect();
                disc.scores(&inputs)?;
            }
        }
        let ns = start.elapsed().as_nanos() as u64;
        ops.fetch_add(generator_ops_on_this_thread() - before, Ordering::Relaxed);
        Ok(ns / chunk.len() as u64)
    };
    let pass = || -> Result<Vec<(u64, usize)>> {
        let batches: Vec<(usize, &[Vec<TokenId>])> =
            seqs.chunks(cfg.batch_size).enumerate().collect();
        let per: Vec<Result<(u64, usize)>> = if cfg.threads == 1 {
            batches
                .iter()
                .map(|&(i, c)| Ok((run_batch(i, c)?, c.len())))
                .collect()
        } else {
            batches
                .par_iter()
                .map(|&(i, c)| Ok((run_batch(i, c)?, c.len())))
                .collect()
        };
        per.into_iter().collect()
    };
    let measure = || -> Result<(f64, Vec<u64>)> {
        pass()?;
        ops.store(0, Ordering::Relaxed);
        let start = Instant::now();
        let mut lat = Vec::with_capacity(seqs.len() * cfg.repeats);
        for _ in 0..cfg.repeats {
            for (ns, n) in pass()? {
                lat.extend(std::iter::repeat(ns).take(n));
            }
        }
        Ok((start.elapsed().as_secs_f64(), lat))
    };
    let (total_seconds, mut lat) = if cfg.threads == 1 {
        measure()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(measure)?
    };
    lat.sort_unstable();
    let ms = |ns: u64| ns as f64 / 1e6;
    let n = lat.len();
    let median_ms = if n % 2 == 1 {
        ms(lat[n / 2])
    } else {
        (ms(lat[n / 2 - 1]) + ms(lat[n / 2])) / 2.0
    };
    let p99 = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    Ok(BenchReport {
        path: if generator.is_some() {
            BenchPath::GeneratorDiscriminator
        } else {
            BenchPath::Discriminator
        },
        sequences: seqs.len(),
        batch_size: cfg.batch_size,
        repeats: cfg.repeats,
        threads: cfg.threads,
        total_seconds,
        mean_ms: lat.iter().map(|&v| ms(v)).sum::<f64>() / n as f64,
        median_ms,
        p99_ms: ms(lat[p99]),
        generator_ops: ops.load(Ordering::Relaxed),
        cpu_model: cpu_model(),
    })
}
