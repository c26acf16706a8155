//! Two-stage training: replaced-token detection warm-up (optionally alongside
//! the masked-language generator), then hyperspherical separation of normal
//! sequences from their own pseudo-anomalies.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::das::{with_cls, Discriminator};
use crate::encoder::{EncoderConfig, EncoderParams, Mode, PackedBatch, ParamSet};
use crate::error::{Error, Result};
use crate::grouper::Label;
use crate::mgag::{
    fill_batch, random_generate, sample_mask, Generator, GeneratorOutput, MaskPattern, MaskedBatch,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{substream, tag, SeedRng};
use crate::scalar::Scalar;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Random,
    Mlm,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::Random => "random",
            GeneratorKind::Mlm => "mlm",
        }
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(GeneratorKind::Random),
            "mlm" => Ok(GeneratorKind::Mlm),
            other => Err(Error::Config(format!(
                "unknown generator {other:?} (expected random or mlm)"
            ))),
        }
    }
}

/// Encoder hyperparameters apart from the vocabulary size, which comes from
/// the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = EncoderConfig::standard(0, 512);
        ModelShape {
            embed_dim: c.embed_dim,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            ff_dim: c.ff_dim,
            max_len: c.max_len,
            dropout_rate: c.dropout_rate,
        }
    }
}

impl ModelShape {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            vocab_size,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator: GeneratorKind,
    /// Train the replaced-token head during stage 1.
    pub rtd: bool,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelShape,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorKind::Mlm,
            rtd: true,
            mask_ratio: 0.5,
            lambda: 1.0,
            stage1_epochs: 10,
            stage2_epochs: 20,
            batch_size: 32,
            seed: 42,
            model: ModelShape::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.stage2_epochs == 0 {
            return Err(Error::Config("stage2_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        self.optimizer.validate()?;
        self.model.encoder_config(1).validate()
    }

    /// Whether stage 1 has anything to train.
    pub fn runs_stage1(&self) -> bool {
        self.stage1_epochs > 0 && (self.rtd || self.generator == GeneratorKind::Mlm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub mlm_loss: Option<f64>,
    pub rtd_loss: Option<f64>,
    pub hst_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

impl NormStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return NormStats {
                count: 0,
                mean: f64::NAN,
                median: f64::NAN,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        NormStats {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Scores of held-out normal sequences after training.
    pub val_normal: Option<NormStats>,
    /// Scores of pseudo-anomalies generated from the held-out normals.
    pub val_pseudo: Option<NormStats>,
    pub total_seconds: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,mlm_loss,rtd_loss,hst_loss,seconds\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                e.stage,
                e.epoch,
                f(e.mlm_loss),
                f(e.rtd_loss),
                f(e.hst_loss),
                e.seconds
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Trained<S> {
    pub generator: Option<Generator<S>>,
    pub discriminator: Discriminator<S>,
    pub report: TrainReport,
}

/// Per-epoch progress hook.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochRecord);

fn truncate(seqs: &[Vec<TokenId>], max_len: usize) -> Vec<Vec<TokenId>> {
    seqs.iter()
        .map(|s| s[..s.len().min(max_len - 1)].to_vec())
        .collect()
}

fn check_training_set(train: &[Vec<TokenId>]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if let Some(i) = train.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!(
            "training sequence {i} has no events"
        )));
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &[tag::SHUFFLE, stage, epoch as u64]));
    order
}

fn mean_or_none(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn ensure_finite(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Generate one pseudo-anomaly per source sequence with per-sequence
/// substreams `(seed, tags..., index)`.
pub fn pseudo_anomalies<S: Scalar>(
    sources: &[&[TokenId]],
    indices: &[usize],
    generator: Option<&Generator<S>>,
    cfg: &TrainConfig,
    vocab_size: usize,
    tags: &[u64],
) -> Result<Vec<GeneratorOutput>> {
    let (seed, mask_ratio) = (cfg.seed, cfg.mask_ratio);
    let mut rngs: Vec<SeedRng> = indices
        .iter()
        .map(|&i| {
            let mut path = tags.to_vec();
            path.push(i as u64);
            substream(seed, &path)
        })
        .collect();
    let masks: Vec<MaskPattern> = sources
        .iter()
        .zip(&mut rngs)
        .map(|(s, rng)| sample_mask(s.len(), mask_ratio, rng))
        .collect();
    match cfg.generator {
        GeneratorKind::Random => sources
            .iter()
            .zip(&masks)
            .zip(&mut rngs)
            .map(|((s, m), rng)| random_generate(s, m, vocab_size, rng))
            .collect(),
        GeneratorKind::Mlm => {
            let g = generator.ok_or_else(|| {
                Error::Config("masked-language generator required but absent".into())
            })?;
            let mrefs: Vec<&MaskPattern> = masks.iter().collect();
            g.generate(sources, &mrefs, &mut rngs)
        }
    }
}

/// Stage 1. Returns the generator (masked-language variant only), the
/// discriminator and one record per epoch.
pub fn train_stage1<S: Scalar>(
    train: &[Vec<TokenId>],
    vocab_size: usize,
    cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<(Option<Generator<S>>, Discriminator<S>, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_training_set(train)?;
    let enc = cfg.model.encoder_config(vocab_size);
    let train = truncate(train, enc.max_len);
    let seed = cfg.seed;
    let mut disc = Discriminator::<S>::init(enc, &mut substream(seed, &[tag::INIT_DISCRIMINATOR]))?;
    let mut gen = match cfg.generator {
        GeneratorKind::Mlm => Some(Generator::<S>::init(
            enc,
            &mut substream(seed, &[tag::INIT_GENERATOR]),
        )?),
        GeneratorKind::Random => None,
    };
    let mut records = Vec::new();
    if !cfg.runs_stage1() {
        return Ok((gen, disc, records));
    }
    let mut opt_d = Adam::new(cfg.optimizer, &disc);
    let mut opt_g = gen.as_ref().map(|g| Adam::new(cfg.optimizer, g));
    let mut grads_d = disc.zeros_like();
    let mut grads_g = gen.as_ref().map(Generator::zeros_like);

    for epoch in 0..cfg.stage1_epochs {
        let start = Instant::now();
        let (mut mlm_sum, mut mlm_n, mut rtd_sum, mut rtd_n) = (0.0, 0, 0.0, 0);
        let order = epoch_order(train.len(), seed, tag::STAGE1, epoch);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let sources: Vec<&[TokenId]> = chunk.iter().map(|&i| train[i].as_slice()).collect();
            let mut rngs: Vec<SeedRng> = chunk
                .iter()
                .map(|&i| substream(seed, &[tag::STAGE1, epoch as u64, i as u64]))
                .collect();
            let masks: Vec<MaskPattern> = sources
                .iter()
                .zip(&mut rngs)
                .map(|(s, rng)| sample_mask(s.len(), cfg.mask_ratio, rng))
                .collect();
            let outputs: Vec<GeneratorOutput> = match (&mut gen, &mut opt_g, &mut grads_g) {
                (Some(g), Some(opt), Some(gg)) => {
                    let mrefs: Vec<&MaskPattern> = masks.iter().collect();
                    let input = MaskedBatch::new(&sources, &mrefs)?;
                    if input.rows.is_empty() {
                        fill_batch::<S>(
                            &sources,
                            &mrefs,
                            &[],
                            &input.per_seq,
                            vocab_size,
                            &mut rngs,
                        )?
                    } else {
                        let truth: Vec<TokenId> = sources
                            .iter()
                            .zip(&masks)
                            .flat_map(|(s, m)| m.positions().map(move |i| s[i]))
                            .collect();
                        let mut drop = substream(
                            seed,
                            &[tag::DROPOUT, tag::STAGE1, epoch as u64, bi as u64, 0],
                        );
                        gg.zero_grad();
                        let (loss, dists) =
                            g.loss_and_grads(&input, &truth, Mode::Train(&mut drop), gg)?;
                        let loss = ensure_finite(loss.to_f64_lossy(), || {
                            format!("stage 1 epoch {epoch} generator loss")
                        })?;
                        mlm_sum += loss;
                        mlm_n += 1;
                        opt.step(g, gg)?;
                        fill_batch(
                            &sources,
                            &mrefs,
                            &dists,
                            &input.per_seq,
                            vocab_size,
                            &mut rngs,
                        )?
                    }
                }
                _ => sources
                    .iter()
                    .zip(&masks)
                    .zip(&mut rngs)
                    .map(|((s, m), rng)| random_generate(s, m, vocab_size, rng))
                    .collect::<Result<_>>()?,
            };
            if cfg.rtd {
                let inputs: Vec<Vec<TokenId>> =
                    outputs.iter().map(|o| with_cls(&o.tokens)).collect();
                let targets: Vec<Vec<u8>> = outputs.into_iter().map(|o| o.replaced).collect();
                let batch = PackedBatch::from_sequences(&inputs);
                let mut drop = substream(
                    seed,
                    &[tag::DROPOUT, tag::STAGE1, epoch as u64, bi as u64, 1],
                );
                grads_d.zero_grad();
                let loss = disc.rtd_loss_and_grads(
                    &batch,
                    &targets,
                    Mode::Train(&mut drop),
                    &mut grads_d,
                )?;
                let loss = ensure_finite(loss.to_f64_lossy(), || {
                    format!("stage 1 epoch {epoch} replaced-token loss")
                })?;
                rtd_sum += loss;
                rtd_n += 1;
                opt_d.step(&mut disc, &grads_d)?;
            }
        }
        let rec = EpochRecord {
            stage: 1,
            epoch,
            mlm_loss: mean_or_none(mlm_sum, mlm_n),
            rtd_loss: mean_or_none(rtd_sum, rtd_n),
            hst_loss: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&rec);
        records.push(rec);
    }
    Ok((gen, disc, records))
}

/// Stage 2: the trunk learns to pull normal `[CLS]` embeddings to the origin
/// and push each sequence's pseudo-anomaly away. The generator is frozen and
/// the replaced-token head is left as is.
pub fn train_stage2<S: Scalar>(
    train: &[Vec<TokenId>],
    generator: Option<&Generator<S>>,
    disc: &mut Discriminator<S>,
    cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_training_set(train)?;
    if cfg.generator == GeneratorKind::Mlm && generator.is_none() {
        return Err(Error::Config(
            "masked-language generator required but absent".into(),
        ));
    }
    let enc = disc.config;
    let vocab_size = enc.vocab_size;
    let train = truncate(train, enc.max_len);
    let seed = cfg.seed;
    let lambda = S::from_f64_lossy(cfg.lambda);
    let mut opt = Adam::new(cfg.optimizer, &disc.trunk);
    let mut grads = EncoderParams::<S>::zeros(&enc);
    let mut records = Vec::new();
    for epoch in 0..cfg.stage2_epochs {
        let start = Instant::now();
        let (mut sum, mut n) = (0.0, 0);
        let order = epoch_order(train.len(), seed, tag::STAGE2, epoch);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let sources: Vec<&[TokenId]> = chunk.iter().map(|&i| train[i].as_slice()).collect();
            let pseudo = pseudo_anomalies(
                &sources,
                chunk,
                generator,
                cfg,
                vocab_size,
                &[tag::STAGE2, epoch as u64],
            )?;
            let mut inputs: Vec<Vec<TokenId>> = sources.iter().map(|s| with_cls(s)).collect();
            inputs.extend(pseudo.iter().map(|o| with_cls(&o.tokens)));
            let mut labels = vec![Label::Normal; sources.len()];
            labels.extend(std::iter::repeat(Label::Anomaly).take(sources.len()));
            let batch = PackedBatch::from_sequences(&inputs);
            let mut drop = substream(seed, &[tag::DROPOUT, tag::STAGE2, epoch as u64, bi as u64]);
            grads.zero_grad();
            let loss = disc.hst_loss_and_grads(
                &batch,
                &labels,
                lambda,
                Mode::Train(&mut drop),
                &mut grads,
            )?;
            sum += ensure_finite(loss.to_f64_lossy(), || {
                format!("stage 2 epoch {epoch} hyperspherical loss")
            })?;
            n += 1;
            opt.step(&mut disc.trunk, &grads)?;
        }
        let rec = EpochRecord {
            stage: 2,
            epoch,
            mlm_loss: None,
            rtd_loss: None,
            hst_loss: mean_or_none(sum, n),
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Scores of many sequences (events only; `[CLS]` is prepended), evaluated
/// in batches.
pub fn score_events<S: Scalar>(
    disc: &Discriminator<S>,
    seqs: &[&[TokenId]],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let max = disc.config.max_len - 1;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let inputs: Vec<Vec<TokenId>> = chunk
            .iter()
            .map(|s| with_cls(&s[..s.len().min(max)]))
            .collect();
        out.extend(disc.scores(&inputs)?.into_iter().map(|v| v.to_f64_lossy()));
    }
    Ok(out)
}

/// Both stages followed by validation statistics.
pub fn train<S: Scalar>(
    train: &[Vec<TokenId>],
    val: &[Vec<TokenId>],
    vocab_size: usize,
    cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<Trained<S>> {
    let start = Instant::now();
    let (generator, mut discriminator, mut epochs) =
        train_stage1::<S>(train, vocab_size, cfg, progress)?;
    epochs.extend(train_stage2(
        train,
        generator.as_ref(),
        &mut discriminator,
        cfg,
        progress,
    )?);
    let (val_normal, val_pseudo) = if val.is_empty() {
        (None, None)
    } else {
        let val = truncate(val, discriminator.config.max_len);
        let sources: Vec<&[TokenId]> = val.iter().map(Vec::as_slice).collect();
        let normal = score_events(&discriminator, &sources, cfg.batch_size)?;
        let indices: Vec<usize> = (0..val.len()).collect();
        let pseudo = pseudo_anomalies(
            &sources,
            &indices,
            generator.as_ref(),
            cfg,
            vocab_size,
            &[tag::VALIDATION],
        )?;
        let pseudo_src: Vec<&[TokenId]> = pseudo.iter().map(|o| o.tokens.as_slice()).collect();
        let pseudo_scores = score_events(&discriminator, &pseudo_src, cfg.batch_size)?;
        (
            Some(NormStats::of(&normal)),
            Some(NormStats::of(&pseudo_scores)),
        )
    };
    Ok(Trained {
        generator,
        discriminator,
        report: TrainReport {
            epochs,
            val_normal,
            val_pseudo,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}
