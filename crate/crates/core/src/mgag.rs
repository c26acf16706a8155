//! Mask-guided pseudo-anomaly generation: exact-count random masking, and two
//! ways of refilling masked slots (uniform random tokens, or samples from the
//! complement of a masked-language model's prediction).

use std::cell::Cell;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;

use crate::encoder::{EncoderConfig, EncoderParams, Mode, PackedBatch, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{linear, linear_backward, softmax_in_place};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, CLS, MASK, NUM_RESERVED, UNK};

thread_local! {
    static GENERATOR_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of generator forward passes run on the calling thread so far.
pub fn generator_ops_on_this_thread() -> u64 {
    GENERATOR_OPS.with(Cell::get)
}

fn count_generator_op() {
    GENERATOR_OPS.with(|c| c.set(c.get() + 1));
}

/// Replacement candidates for a vocabulary of `vocab_size`: `[UNK]` plus
/// every event token.
pub fn candidate_tokens(vocab_size: usize) -> Vec<TokenId> {
    std::iter::once(UNK)
        .chain((NUM_RESERVED..vocab_size).map(|t| t as TokenId))
        .collect()
}

/// Column of `token` in the candidate list, if it is a candidate.
pub fn candidate_index(token: TokenId) -> Option<usize> {
    match token {
        UNK => Some(0),
        t if t as usize >= NUM_RESERVED => Some(t as usize - NUM_RESERVED + 1),
        _ => None,
    }
}

/// Which event positions (CLS excluded) are masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    pub bits: Vec<u8>,
}

impl MaskPattern {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
    }
}

/// `round(r·d)`, lifted to 1 when `r > 0`.
pub fn mask_count(d: usize, r: f64) -> usize {
    if r <= 0.0 || d == 0 {
        return 0;
    }
    ((r * d as f64).round() as usize).clamp(1, d)
}

pub fn sample_mask(d: usize, r: f64, rng: &mut SeedRng) -> MaskPattern {
    assert!((0.0..=1.0).contains(&r), "mask ratio {r} outside [0, 1]");
    let mut bits = vec![0u8; d];
    for i in index::sample(rng, d, mask_count(d, r)) {
        bits[i] = 1;
    }
    MaskPattern { bits }
}

pub fn apply_mask(s: &[TokenId], m: &MaskPattern) -> Result<Vec<TokenId>> {
    check_len(s, m)?;
    Ok(s.iter()
        .zip(&m.bits)
        .map(|(&t, &b)| if b == 1 { MASK } else { t })
        .collect())
}

fn check_len(s: &[TokenId], m: &MaskPattern) -> Result<()> {
    if s.len() != m.bits.len() {
        return Err(Error::InvalidInput(format!(
            "sequence has {} events but mask has {}",
            s.len(),
            m.bits.len()
        )));
    }
    Ok(())
}

/// A pseudo-abnormal sequence and the positions that were refilled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorOutput {
    pub tokens: Vec<TokenId>,
    pub replaced: Vec<u8>,
}

/// Fill each masked slot with a candidate drawn uniformly from all
/// candidates except the original token.
pub fn random_generate(
    s: &[TokenId],
    m: &MaskPattern,
    vocab_size: usize,
    rng: &mut SeedRng,
) -> Result<GeneratorOutput> {
    check_len(s, m)?;
    if vocab_size < NUM_RESERVED + 2 {
        return Err(Error::InvalidInput(format!(
            "random replacement needs a vocabulary of at least {}, got {vocab_size}",
            NUM_RESERVED + 2
        )));
    }
    let cands = candidate_tokens(vocab_size);
    let mut tokens = s.to_vec();
    for i in m.positions() {
        let orig = candidate_index(s[i]);
        let pool = cands.len() - usize::from(orig.is_some());
        let mut pick = rng.gen_range(0..pool);
        if let Some(o) = orig {
            if pick >= o {
                pick += 1;
            }
        }
        tokens[i] = cands[pick];
    }
    Ok(GeneratorOutput {
        tokens,
        replaced: m.bits.clone(),
    })
}

/// `(1 − P) / Σ(1 − P)`.
pub fn complement_distribution<S: Scalar>(p: &[S]) -> Result<Vec<S>> {
    if p.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "complement distribution needs at least 2 outcomes, got {}",
            p.len()
        )));
    }
    let total = p.iter().fold(S::zero(), |acc, &v| acc + (S::one() - v));
    if total <= S::zero() || !total.is_finite() {
        return Err(Error::NonFinite(
            "complement distribution normalizer".into(),
        ));
    }
    Ok(p.iter().map(|&v| (S::one() - v) / total).collect())
}

/// Mean negative log-probability of the true token over masked positions.
/// `probs` holds one distribution per row; `truth` the column of the true
/// token in each row.
pub fn mlm_loss<S: Scalar>(probs: &[Vec<S>], truth: &[usize]) -> Result<S> {
    if probs.is_empty() {
        return Err(Error::InvalidInput(
            "masked-language loss needs a masked position".into(),
        ));
    }
    assert_eq!(probs.len(), truth.len(), "one truth per masked position");
    let sum = probs
        .iter()
        .zip(truth)
        .fold(S::zero(), |acc, (row, &t)| acc - row[t].ln());
    Ok(sum / S::from_usize_lossy(probs.len()))
}

/// Draw one outcome from a categorical distribution.
pub fn sample_categorical<S: Scalar>(p: &[S], rng: &mut SeedRng) -> Result<usize> {
    let weights: Vec<f64> = p.iter().map(|v| v.to_f64_lossy().max(0.0)).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::NonFinite(format!("sampling distribution ({e})")))?;
    Ok(dist.sample(rng))
}

/// Fill masked slots by sampling from the complement of the generator's
/// per-position distribution. `dists[j]` belongs to the `j`-th masked
/// position in `m`, over [`candidate_tokens`].
pub fn complement_fill<S: Scalar>(
    s: &[TokenId],
    m: &MaskPattern,
    dists: &[Vec<S>],
    vocab_size: usize,
    rng: &mut SeedRng,
) -> Result<GeneratorOutput> {
    check_len(s, m)?;
    if dists.len() != m.count() {
        return Err(Error::InvalidInput(format!(
            "{} distributions for {} masked positions",
            dists.len(),
            m.count()
        )));
    }
    let cands = candidate_tokens(vocab_size);
    let mut tokens = s.to_vec();
    for (i, p) in m.positions().zip(dists) {
        let comp = complement_distribution(p)?;
        tokens[i] = cands[sample_categorical(&comp, rng)?];
    }
    Ok(GeneratorOutput {
        tokens,
        replaced: m.bits.clone(),
    })
}

/// Masked-language generator: encoder trunk plus a linear head over the
/// replacement candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<S> {
    pub config: EncoderConfig,
    pub trunk: EncoderParams<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

/// Generator inputs for one batch: `[CLS] ++ ŝ` per sequence and the token
/// positions (CLS offset included) that hold `[MASK]`.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub batch: PackedBatch,
    /// Packed row of each masked position, in sequence then position order.
    pub rows: Vec<usize>,
    /// Number of masked positions contributed by each sequence.
    pub per_seq: Vec<usize>,
}

impl MaskedBatch {
    pub fn new(events: &[&[TokenId]], masks: &[&MaskPattern]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(events.len());
        let mut rows = Vec::new();
        let mut per_seq = Vec::with_capacity(events.len());
        let mut offset = 0;
        for (s, m) in events.iter().zip(masks) {
            let mut x = Vec::with_capacity(s.len() + 1);
            x.push(CLS);
            x.extend(apply_mask(s, m)?);
            rows.extend(m.positions().map(|i| offset + 1 + i));
            per_seq.push(m.count());
            offset += x.len();
            inputs.push(x);
        }
        Ok(MaskedBatch {
            batch: PackedBatch::from_sequences(&inputs),
            rows,
            per_seq,
        })
    }
}

impl<S: Scalar> Generator<S> {
    pub fn init(config: EncoderConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let trunk = EncoderParams::init(&config, rng);
        let c = candidate_tokens(config.vocab_size).len();
        Ok(Generator {
            head_w: Tensor::truncated_normal(&[config.embed_dim, c], 0.02, rng),
            head_b: Tensor::zeros(&[c]),
            trunk,
            config,
        })
    }

    /// All-zero parameters of the right shapes, e.g. for gradients.
    pub fn zeros(config: EncoderConfig) -> Self {
        let c = candidate_tokens(config.vocab_size).len();
        Generator {
            trunk: EncoderParams::zeros(&config),
            head_w: Tensor::zeros(&[config.embed_dim, c]),
            head_b: Tensor::zeros(&[c]),
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn num_candidates(&self) -> usize {
        self.head_b.len()
    }

    fn head_probs(&self, hidden: &[S], rows: &[usize]) -> Result<Vec<S>> {
        let d = self.config.embed_dim;
        let c = self.num_candidates();
        let mut x = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            x.extend_from_slice(&hidden[r * d..(r + 1) * d]);
        }
        let mut logits = vec![S::zero(); rows.len() * c];
        linear(
            &x,
            &self.head_w.data,
            &self.head_b.data,
            rows.len(),
            d,
            &mut logits,
        );
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generator logits".into()));
        }
        for row in logits.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Predicted distribution over the candidates at every masked position
    /// (eval mode, no dropout).
    pub fn predict(&self, input: &MaskedBatch) -> Result<Vec<Vec<S>>> {
        count_generator_op();
        let pass = self
            .trunk
            .forward(&self.config, &input.batch, Mode::Eval, false)?;
        let probs = self.head_probs(&pass.hidden, &input.rows)?;
        Ok(probs
            .chunks_exact(self.num_candidates())
            .map(<[S]>::to_vec)
            .collect())
    }

    /// Masked-language loss for `truth` (original tokens at the masked
    /// rows), accumulating its gradient into `grads`. Returns the loss and
    /// the predicted distributions.
    pub fn loss_and_grads(
        &self,
        input: &MaskedBatch,
        truth: &[TokenId],
        mode: Mode<'_>,
        grads: &mut Generator<S>,
    ) -> Result<(S, Vec<Vec<S>>)> {
        count_generator_op();
        if input.rows.is_empty() {
            return Err(Error::InvalidInput(
                "masked-language loss needs a masked position".into(),
            ));
        }
        assert_eq!(
            truth.len(),
            input.rows.len(),
            "one truth per masked position"
        );
        let d = self.config.embed_dim;
        let c = self.num_candidates();
        let k = input.rows.len();
        let pass = self.trunk.forward(&self.config, &input.batch, mode, true)?;
        let probs = self.head_probs(&pass.hidden, &input.rows)?;
        let cols: Vec<usize> = truth
            .iter()
            .map(|&t| {
                candidate_index(t).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "reserved token {t} cannot be a masked-language target"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<S>> = probs.chunks_exact(c).map(<[S]>::to_vec).collect();
        let loss = mlm_loss(&rows, &cols)?;

        let inv_k = S::one() / S::from_usize_lossy(k);
        let mut dlogits = probs;
        for (j, &t) in cols.iter().enumerate() {
            dlogits[j * c + t] -= S::one();
        }
        for v in &mut dlogits {
            *v *= inv_k;
        }
        let mut x = Vec::with_capacity(k * d);
        for &r in &input.rows {
            x.extend_from_slice(pass.row(r));
        }
        let mut dx = vec![S::zero(); k * d];
        linear_backward(
            &x,
            &self.head_w.data,
            &dlogits,
            k,
            d,
            c,
            &mut grads.head_w.data,
            &mut grads.head_b.data,
            Some((&mut dx, S::zero())),
        );
        let mut d_hidden = vec![S::zero(); pass.hidden.len()];
        for (j, &r) in input.rows.iter().enumerate() {
            d_hidden[r * d..(r + 1) * d].copy_from_slice(&dx[j * d..(j + 1) * d]);
        }
        self.trunk.backward(
            &self.config,
            &input.batch,
            &pass,
            &d_hidden,
            &mut grads.trunk,
        )?;
        Ok((loss, rows))
    }

    /// Complement sampling for a whole batch; `events[b]` and
    /// `masks[b]` describe one source sequence each.
    pub fn generate(
        &self,
        events: &[&[TokenId]],
        masks: &[&MaskPattern],
        rngs: &mut [SeedRng],
    ) -> Result<Vec<GeneratorOutput>> {
        let input = MaskedBatch::new(events, masks)?;
        let dists = if input.rows.is_empty() {
            Vec::new()
        } else {
            self.predict(&input)?
        };
        fill_batch(
            events,
            masks,
            &dists,
            &input.per_seq,
            self.config.vocab_size,
            rngs,
        )
    }
}

/// Split flat per-position distributions back per sequence and sample.
pub(crate) fn fill_batch<S: Scalar>(
    events: &[&[TokenId]],
    masks: &[&MaskPattern],
    dists: &[Vec<S>],
    per_seq: &[usize],
    vocab_size: usize,
    rngs: &mut [SeedRng],
) -> Result<Vec<GeneratorOutput>> {
    let mut out = Vec::with_capacity(events.len());
    let mut at = 0;
    for (((s, m), &n), rng) in events.iter().zip(masks).zip(per_seq).zip(rngs.iter_mut()) {
        out.push(complement_fill(s, m, &dists[at..at + n], vocab_size, rng)?);
        at += n;
    }
    Ok(out)
}

impl<S: Scalar> ParamSet<S> for Generator<S> {
    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.trunk.tensors();
        out.push(("mlm_head.w".into(), &self.head_w));
        out.push(("mlm_head.b".into(), &self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.trunk.tensors_mut();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}
