//! Discriminator: one encoder trunk with a per-token replaced-token head and a
//! sequence-level hyperspherical objective on the `[CLS]` embedding, whose
//! norm is the anomaly score.

use crate::encoder::{EncoderConfig, EncoderParams, Mode, PackedBatch, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::grouper::Label;
use crate::linalg::{dot, l2_norm};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, CLS};

/// Norms of abnormal samples are floored here before `log(1 − e^{−n})`.
pub const HST_NORM_FLOOR: f64 = 1e-6;

/// `[CLS] ++ events`.
pub fn with_cls(events: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(events.len() + 1);
    v.push(CLS);
    v.extend_from_slice(events);
    v
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus<S: Scalar>(z: S) -> S {
    if z > S::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean binary cross-entropy between predicted replacement probabilities and
/// the replaced flags.
pub fn rtd_loss<S: Scalar>(probs: &[S], targets: &[u8]) -> Result<S> {
    if probs.is_empty() {
        return Err(Error::InvalidInput(
            "replaced-token loss over zero positions".into(),
        ));
    }
    assert_eq!(probs.len(), targets.len(), "one target per position");
    let sum = probs.iter().zip(targets).fold(S::zero(), |acc, (&p, &y)| {
        let term = if y == 1 { p.ln() } else { (S::one() - p).ln() };
        acc - term
    });
    Ok(sum / S::from_usize_lossy(probs.len()))
}

/// Contribution of one sample to the hyperspherical loss.
pub fn hst_term<S: Scalar>(norm: S, label: Label, lambda: S) -> S {
    match label {
        Label::Normal => norm,
        Label::Anomaly => {
            let n = norm.max(S::from_f64_lossy(HST_NORM_FLOOR));
            -lambda * (-(-n).exp_m1()).ln()
        }
    }
}

/// Mean of [`hst_term`] over a batch.
pub fn hst_loss<S: Scalar>(norms: &[S], labels: &[Label], lambda: S) -> Result<S> {
    if norms.is_empty() {
        return Err(Error::InvalidInput(
            "hyperspherical loss over an empty batch".into(),
        ));
    }
    assert_eq!(norms.len(), labels.len(), "one label per norm");
    if !(lambda > S::zero()) {
        return Err(Error::Config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut sum = S::zero();
    for (&n, &y) in norms.iter().zip(labels) {
        if n.is_nan() || n < S::zero() {
            return Err(Error::NonFinite(format!("embedding norm {n}")));
        }
        sum += hst_term(n, y, lambda);
    }
    Ok(sum / S::from_usize_lossy(norms.len()))
}

/// Gradient of [`hst_term`] with respect to the embedding `e` itself.
pub fn hst_term_grad<S: Scalar>(e: &[S], label: Label, lambda: S, out: &mut [S]) {
    let norm = l2_norm(e);
    if norm == S::zero() {
        out.fill(S::zero());
        return;
    }
    let dn = match label {
        Label::Normal => S::one(),
        Label::Anomaly if norm < S::from_f64_lossy(HST_NORM_FLOOR) => S::zero(),
        Label::Anomaly => -lambda / norm.exp_m1(),
    };
    for (o, &v) in out.iter_mut().zip(e) {
        *o = dn * v / norm;
    }
}

/// Encoder trunk plus the replaced-token head (`embed_dim → 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<S> {
    pub config: EncoderConfig,
    pub trunk: EncoderParams<S>,
    pub rtd_w: Tensor<S>,
    pub rtd_b: Tensor<S>,
}

impl<S: Scalar> Discriminator<S> {
    pub fn init(config: EncoderConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let trunk = EncoderParams::init(&config, rng);
        Ok(Discriminator {
            rtd_w: Tensor::truncated_normal(&[config.embed_dim], 0.02, rng),
            rtd_b: Tensor::zeros(&[1]),
            trunk,
            config,
        })
    }

    /// All-zero parameters of the right shapes, e.g. for gradients.
    pub fn zeros(config: EncoderConfig) -> Self {
        Discriminator {
            trunk: EncoderParams::zeros(&config),
            rtd_w: Tensor::zeros(&[config.embed_dim]),
            rtd_b: Tensor::zeros(&[1]),
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Anomaly scores (`[CLS]` embedding norms) for CLS-prefixed sequences,
    /// in eval mode.
    pub fn scores(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<S>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = PackedBatch::from_sequences(seqs);
        let pass = self
            .trunk
            .forward_cls(&self.config, &batch, Mode::Eval, false)?;
        Ok((0..batch.num_seqs())
            .map(|b| l2_norm(pass.row(batch.offsets[b])))
            .collect())
    }

    pub fn anomaly_score(&self, seq: &[TokenId]) -> Result<S> {
        if seq.first() != Some(&CLS) {
            return Err(Error::InvalidInput(
                "scored sequences must start with [CLS]".into(),
            ));
        }
        Ok(self.scores(&[seq.to_vec()])?[0])
    }

    /// Predicted replacement probability of every event position.
    pub fn rtd_probs(&self, batch: &PackedBatch) -> Result<Vec<Vec<S>>> {
        let pass = self.trunk.forward(&self.config, batch, Mode::Eval, false)?;
        Ok((0..batch.num_seqs())
            .map(|b| {
                let r = batch.seq_range(b);
                (r.start + 1..r.end)
                    .map(|row| sigmoid(dot(pass.row(row), &self.rtd_w.data) + self.rtd_b.data[0]))
                    .collect()
            })
            .collect())
    }

    /// Replaced-token loss over all event positions of the batch, with
    /// gradients accumulated into the trunk and head of `grads`.
    /// `targets[b][i]` flags event `i` (position `i + 1`) of sequence `b`.
    pub fn rtd_loss_and_grads(
        &self,
        batch: &PackedBatch,
        targets: &[Vec<u8>],
        mode: Mode<'_>,
        grads: &mut Discriminator<S>,
    ) -> Result<S> {
        let d = self.config.embed_dim;
        let total: usize = (0..batch.num_seqs())
            .map(|b| batch.seq_len(b).saturating_sub(1))
            .sum();
        if total == 0 {
            return Err(Error::InvalidInput(
                "replaced-token loss over zero positions".into(),
            ));
        }
        let pass = self.trunk.forward(&self.config, batch, mode, true)?;
        let inv = S::one() / S::from_usize_lossy(total);
        let mut loss = S::zero();
        let mut d_hidden = vec![S::zero(); pass.hidden.len()];
        for (b, t) in targets.iter().enumerate() {
            let r = batch.seq_range(b);
            assert_eq!(
                t.len() + 1,
                r.len(),
                "targets must cover every event position"
            );
            for (row, &y) in (r.start + 1..r.end).zip(t) {
                let h = pass.row(row);
                let z = dot(h, &self.rtd_w.data) + self.rtd_b.data[0];
                let yf = if y == 1 { S::one() } else { S::zero() };
                loss += softplus(z) - yf * z;
                let dz = (sigmoid(z) - yf) * inv;
                grads.rtd_b.data[0] += dz;
                for ((gw, &hv), (dh, &w)) in grads.rtd_w.data.iter_mut().zip(h).zip(
                    d_hidden[row * d..(row + 1) * d]
                        .iter_mut()
                        .zip(&self.rtd_w.data),
                ) {
                    *gw += dz * hv;
                    *dh = dz * w;
                }
            }
        }
        self.trunk
            .backward(&self.config, batch, &pass, &d_hidden, &mut grads.trunk)?;
        Ok(loss * inv)
    }

    /// Hyperspherical loss over the batch's `[CLS]` embeddings; gradients go
    /// to the trunk only.
    pub fn hst_loss_and_grads(
        &self,
        batch: &PackedBatch,
        labels: &[Label],
        lambda: S,
        mode: Mode<'_>,
        grads: &mut EncoderParams<S>,
    ) -> Result<S> {
        let d = self.config.embed_dim;
        let pass = self.trunk.forward_cls(&self.config, batch, mode, true)?;
        let norms: Vec<S> = (0..batch.num_seqs())
            .map(|b| l2_norm(pass.row(batch.offsets[b])))
            .collect();
        let loss = hst_loss(&norms, labels, lambda)?;
        let inv = S::one() / S::from_usize_lossy(norms.len());
        let mut d_hidden = vec![S::zero(); pass.hidden.len()];
        for (b, &y) in labels.iter().enumerate() {
            let row = batch.offsets[b];
            let out = &mut d_hidden[row * d..(row + 1) * d];
            hst_term_grad(pass.row(row), y, lambda, out);
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        self.trunk
            .backward(&self.config, batch, &pass, &d_hidden, grads)?;
        Ok(loss)
    }
}

impl<S: Scalar> ParamSet<S> for Discriminator<S> {
    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.trunk.tensors();
        out.push(("rtd_head.w".into(), &self.rtd_w));
        out.push(("rtd_head.b".into(), &self.rtd_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.trunk.tensors_mut();
        out.push(&mut self.rtd_w);
        out.push(&mut self.rtd_b);
        out
    }
}
