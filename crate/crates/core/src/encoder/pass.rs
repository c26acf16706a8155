use std::ops::Range;

use super::kernels::{dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, LnCache};
use super::{EncoderConfig, EncoderParams, LayerParams};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, linear, linear_backward, softmax_in_place};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, TokenSequence};

/// Variable-length sequences flattened into one row per real token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<TokenId>,
    /// Position of each token in its own sequence (drives the positional
    /// embedding lookup).
    pub positions: Vec<usize>,
    /// Row ranges: sequence `b` spans `offsets[b]..offsets[b + 1]`.
    pub offsets: Vec<usize>,
}

impl PackedBatch {
    pub fn from_sequences<T: AsRef<[TokenId]>>(seqs: &[T]) -> Self {
        let mut batch = PackedBatch {
            offsets: vec![0],
            ..Default::default()
        };
        for seq in seqs {
            let seq = seq.as_ref();
            batch.tokens.extend_from_slice(seq);
            batch.positions.extend(0..seq.len());
            batch.offsets.push(batch.tokens.len());
        }
        batch
    }

    /// Keeps only positions whose attention mask is set; each kept token
    /// retains its original position index.
    pub fn from_token_sequences(seqs: &[TokenSequence]) -> Self {
        let mut batch = PackedBatch {
            offsets: vec![0],
            ..Default::default()
        };
        for seq in seqs {
            for (pos, (&id, &m)) in seq.ids.iter().zip(&seq.attn_mask).enumerate() {
                if m == 1 {
                    batch.tokens.push(id);
                    batch.positions.push(pos);
                }
            }
            batch.offsets.push(batch.tokens.len());
        }
        batch
    }

    pub fn num_seqs(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn seq_range(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn seq_len(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    fn attention_offsets(&self, heads: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_seqs() + 1);
        let mut acc = 0;
        out.push(0);
        for b in 0..self.num_seqs() {
            let n = self.seq_len(b);
            acc += heads * n * n;
            out.push(acc);
        }
        out
    }
}

/// Dropout is active only in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeedRng),
}

/// Dense `(batch, len, dim)` output for padded inputs. Rows of pad
/// positions are zero: they are never computed.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<S> {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<S>,
}

impl<S> HiddenStates<S> {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.dim)
    }

    pub fn row(&self, b: usize, pos: usize) -> &[S] {
        let start = (b * self.len + pos) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Rows that act as attention queries in a layer, grouped by sequence.
/// Every row queries in ordinary layers; a `[CLS]`-only final layer
/// computes outputs for the first row of each sequence alone.
#[derive(Debug, Clone)]
struct Queries {
    rows: Vec<usize>,
    /// Sequence `b` owns `rows[offsets[b]..offsets[b + 1]]`.
    offsets: Vec<usize>,
    /// Start of each sequence's `heads × queries × keys` probability block.
    attn: Vec<usize>,
}

impl Queries {
    fn all(batch: &PackedBatch, heads: usize) -> Self {
        let attn = batch.attention_offsets(heads);
        Queries {
            rows: (0..batch.total_tokens()).collect(),
            offsets: batch.offsets.clone(),
            attn,
        }
    }

    fn first_of_each(batch: &PackedBatch, heads: usize) -> Self {
        let mut rows = Vec::with_capacity(batch.num_seqs());
        let mut offsets = vec![0];
        let mut attn = vec![0];
        for b in 0..batch.num_seqs() {
            let n = batch.seq_len(b);
            if n > 0 {
                rows.push(batch.offsets[b]);
            }
            offsets.push(rows.len());
            attn.push(attn[b] + heads * n.min(1) * n);
        }
        Queries {
            rows,
            offsets,
            attn,
        }
    }

    fn count(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    fn is_full(&self, total_rows: usize) -> bool {
        self.rows.len() == total_rows
    }
}

#[derive(Debug, Clone)]
struct LayerCache<S> {
    queries: Queries,
    x_in: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    probs_mask: Option<Vec<S>>,
    ctx: Vec<S>,
    ln1: LnCache<S>,
    h1: Vec<S>,
    ff_pre: Vec<S>,
    ff_act: Vec<S>,
    ff_mask: Option<Vec<S>>,
    ln2: LnCache<S>,
}

#[derive(Debug, Clone)]
struct Cache<S> {
    emb_ln: LnCache<S>,
    layers: Vec<LayerCache<S>>,
}

/// Output of one forward pass: final hidden rows (one per packed token) and,
/// when requested, the activations backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    pub hidden: Vec<S>,
    pub dim: usize,
    cache: Option<Cache<S>>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn row(&self, r: usize) -> &[S] {
        &self.hidden[r * self.dim..(r + 1) * self.dim]
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Attention probabilities (`queries × keys`, row-major) of one head,
    /// before dropout. Requires a cached pass.
    pub fn attention_probs(
        &self,
        batch: &PackedBatch,
        layer: usize,
        seq: usize,
        head: usize,
    ) -> Option<&[S]> {
        let lc = self.cache.as_ref()?.layers.get(layer)?;
        let n = batch.seq_len(seq);
        let block = lc.queries.count(seq) * n;
        let start = lc.queries.attn[seq] + head * block;
        Some(&lc.probs[start..start + block])
    }

    /// Normalized (pre-scale) output of the final layer norm, one row per
    /// computed output row.
    pub fn final_normalized(&self) -> Option<&[S]> {
        self.cache
            .as_ref()
            .and_then(|c| c.layers.last())
            .map(|l| l.ln2.xhat.as_slice())
    }
}

fn check_finite<S: Scalar>(values: &[S], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn gather<S: Scalar>(x: &[S], rows: &[usize], d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

impl<S: Scalar> EncoderParams<S> {
    /// Full forward pass: every row of the final layer is computed.
    pub fn forward(
        &self,
        cfg: &EncoderConfig,
        batch: &PackedBatch,
        mode: Mode<'_>,
        keep_cache: bool,
    ) -> Result<ForwardPass<S>> {
        self.run(cfg, batch, mode, keep_cache, false)
    }

    /// Forward pass whose final layer is evaluated only at each sequence's
    /// first row (the `[CLS]` position). Other rows of the result are zero.
    /// Identical to [`forward`](Self::forward) at the rows it computes.
    pub fn forward_cls(
        &self,
        cfg: &EncoderConfig,
        batch: &PackedBatch,
        mode: Mode<'_>,
        keep_cache: bool,
    ) -> Result<ForwardPass<S>> {
        self.run(cfg, batch, mode, keep_cache, true)
    }

    fn run(
        &self,
        cfg: &EncoderConfig,
        batch: &PackedBatch,
        mode: Mode<'_>,
        keep_cache: bool,
        cls_only: bool,
    ) -> Result<ForwardPass<S>> {
        let d = cfg.embed_dim;
        let t = batch.total_tokens();
        for &tok in &batch.tokens {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: tok,
                    vocab_size: cfg.vocab_size,
                });
            }
        }
        if let Some(&p) = batch.positions.iter().find(|&&p| p >= cfg.max_len) {
            return Err(Error::InvalidInput(format!(
                "position {p} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let mut rng = match mode {
            Mode::Train(rng) if cfg.dropout_rate > 0.0 => Some(rng),
            _ => None,
        };

        let mut emb = vec![S::zero(); t * d];
        for (r, (&tok, &pos)) in batch.tokens.iter().zip(&batch.positions).enumerate() {
            let te = &self.token_embedding.data[tok as usize * d..(tok as usize + 1) * d];
            let pe = &self.position_embedding.data[pos * d..(pos + 1) * d];
            for ((o, &a), &b) in emb[r * d..(r + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        let mut x = vec![S::zero(); t * d];
        let emb_ln = layer_norm(
            &emb,
            &self.embed_ln_gamma.data,
            &self.embed_ln_beta.data,
            d,
            &mut x,
        );
        check_finite(&x, || "embedding layer".into())?;

        let n_layers = self.layers.len();
        let mut layers = Vec::new();
        for (l, lp) in self.layers.iter().enumerate() {
            let queries = if cls_only && l + 1 == n_layers {
                Queries::first_of_each(batch, cfg.n_heads)
            } else {
                Queries::all(batch, cfg.n_heads)
            };
            let (out, lc) = layer_forward(cfg, lp, batch, queries, x, rng.as_deref_mut());
            check_finite(&out, || format!("encoder layer {l}"))?;
            let out = if lc.queries.is_full(t) {
                out
            } else {
                let mut full = vec![S::zero(); t * d];
                for (j, &r) in lc.queries.rows.iter().enumerate() {
                    full[r * d..(r + 1) * d].copy_from_slice(&out[j * d..(j + 1) * d]);
                }
                full
            };
            x = out;
            if keep_cache {
                layers.push(lc);
            }
        }
        Ok(ForwardPass {
            hidden: x,
            dim: d,
            cache: keep_cache.then_some(Cache { emb_ln, layers }),
        })
    }

    /// Forward over padded sequences; returns `(batch, L, embed_dim)`.
    pub fn forward_padded(
        &self,
        cfg: &EncoderConfig,
        seqs: &[TokenSequence],
        mode: Mode<'_>,
    ) -> Result<HiddenStates<S>> {
        let len = seqs.first().map_or(0, |s| s.ids.len());
        if seqs
            .iter()
            .any(|s| s.ids.len() != len || s.attn_mask.len() != len)
        {
            return Err(Error::InvalidInput(
                "padded batch has ragged lengths".into(),
            ));
        }
        if len > cfg.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {len} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let batch = PackedBatch::from_token_sequences(seqs);
        let pass = self.forward(cfg, &batch, mode, false)?;
        let d = cfg.embed_dim;
        let mut data = vec![S::zero(); seqs.len() * len * d];
        for b in 0..batch.num_seqs() {
            for r in batch.seq_range(b) {
                let start = (b * len + batch.positions[r]) * d;
                data[start..start + d].copy_from_slice(pass.row(r));
            }
        }
        Ok(HiddenStates {
            batch: seqs.len(),
            len,
            dim: d,
            data,
        })
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// with respect to every final hidden row. Rows a `[CLS]`-only pass did
    /// not compute must carry zero gradient; they are ignored.
    pub fn backward(
        &self,
        cfg: &EncoderConfig,
        batch: &PackedBatch,
        pass: &ForwardPass<S>,
        d_hidden: &[S],
        grads: &mut EncoderParams<S>,
    ) -> Result<()> {
        let cache = pass.cache.as_ref().ok_or(Error::MissingCache)?;
        let d = cfg.embed_dim;
        let t = batch.total_tokens();
        if d_hidden.len() != t * d {
            return Err(Error::InvalidInput(format!(
                "hidden gradient has {} values, expected {}",
                d_hidden.len(),
                t * d
            )));
        }
        let mut dx = d_hidden.to_vec();
        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let d_out = if lc.queries.is_full(t) {
                dx
            } else {
                gather(&dx, &lc.queries.rows, d)
            };
            dx = layer_backward(
                cfg,
                &self.layers[l],
                batch,
                lc,
                &d_out,
                &mut grads.layers[l],
            );
        }
        let mut demb = vec![S::zero(); t * d];
        layer_norm_backward(
            &dx,
            &cache.emb_ln,
            &self.embed_ln_gamma.data,
            d,
            &mut grads.embed_ln_gamma.data,
            &mut grads.embed_ln_beta.data,
            &mut demb,
        );
        for (r, (&tok, &pos)) in batch.tokens.iter().zip(&batch.positions).enumerate() {
            let g = &demb[r * d..(r + 1) * d];
            let te = &mut grads.token_embedding.data[tok as usize * d..(tok as usize + 1) * d];
            for (a, &v) in te.iter_mut().zip(g) {
                *a += v;
            }
            let pe = &mut grads.position_embedding.data[pos * d..(pos + 1) * d];
            for (a, &v) in pe.iter_mut().zip(g) {
                *a += v;
            }
        }
        Ok(())
    }
}

/// One post-norm block. Keys and values cover every row; queries, and hence
/// outputs, only `queries.rows`. The returned output has one row per query.
fn layer_forward<S: Scalar>(
    cfg: &EncoderConfig,
    lp: &LayerParams<S>,
    batch: &PackedBatch,
    queries: Queries,
    x: Vec<S>,
    mut rng: Option<&mut SeedRng>,
) -> (Vec<S>, LayerCache<S>) {
    let d = cfg.embed_dim;
    let f = cfg.ff_dim;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let t = batch.total_tokens();
    let nq = queries.rows.len();
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let full = queries.is_full(t);
    let xq = if full {
        None
    } else {
        Some(gather(&x, &queries.rows, d))
    };
    let xq_ref: &[S] = xq.as_deref().unwrap_or(&x);

    let mut q = vec![S::zero(); nq * d];
    let mut k = vec![S::zero(); t * d];
    let mut v = vec![S::zero(); t * d];
    linear(xq_ref, &lp.wq.data, &lp.bq.data, nq, d, &mut q);
    linear(&x, &lp.wk.data, &lp.bk.data, t, d, &mut k);
    linear(&x, &lp.wv.data, &lp.bv.data, t, d, &mut v);

    let total_attn = queries.attn[queries.attn.len() - 1];
    let mut probs = vec![S::zero(); total_attn];
    let probs_mask = rng
        .as_deref_mut()
        .map(|r| dropout_mask::<S>(total_attn, cfg.dropout_rate, r));
    let mut ctx = vec![S::zero(); nq * d];
    for b in 0..batch.num_seqs() {
        let n = batch.seq_len(b);
        let o = batch.offsets[b];
        let qs = queries.offsets[b]..queries.offsets[b + 1];
        let block = qs.len() * n;
        for h in 0..heads {
            let col = h * dh;
            for (a, qi_row) in qs.clone().enumerate() {
                let start = queries.attn[b] + h * block + a * n;
                let qi = &q[qi_row * d + col..][..dh];
                let row = &mut probs[start..start + n];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = scale * dot(qi, &k[(o + j) * d + col..][..dh]);
                }
                softmax_in_place(row);
                let ci = &mut ctx[qi_row * d + col..][..dh];
                let keep = probs_mask.as_ref().map(|m| &m[start..start + n]);
                for (j, &p) in row.iter().enumerate() {
                    let w = keep.map_or(p, |m| p * m[j]);
                    axpy(w, &v[(o + j) * d + col..][..dh], ci);
                }
            }
        }
    }

    let mut z1 = vec![S::zero(); nq * d];
    linear(&ctx, &lp.wo.data, &lp.bo.data, nq, d, &mut z1);
    for (a, &b) in z1.iter_mut().zip(xq_ref) {
        *a += b;
    }
    let mut h1 = vec![S::zero(); nq * d];
    let ln1 = layer_norm(&z1, &lp.ln1_gamma.data, &lp.ln1_beta.data, d, &mut h1);

    let mut ff_pre = vec![S::zero(); nq * f];
    linear(&h1, &lp.ff_in_w.data, &lp.ff_in_b.data, nq, d, &mut ff_pre);
    let ff_act: Vec<S> = ff_pre.iter().map(|&p| gelu(p)).collect();
    let mut z2 = vec![S::zero(); nq * d];
    linear(
        &ff_act,
        &lp.ff_out_w.data,
        &lp.ff_out_b.data,
        nq,
        f,
        &mut z2,
    );
    let ff_mask = rng.map(|r| dropout_mask::<S>(nq * d, cfg.dropout_rate, r));
    if let Some(mask) = &ff_mask {
        for (a, &m) in z2.iter_mut().zip(mask) {
            *a *= m;
        }
    }
    for (a, &b) in z2.iter_mut().zip(&h1) {
        *a += b;
    }
    let mut out = vec![S::zero(); nq * d];
    let ln2 = layer_norm(&z2, &lp.ln2_gamma.data, &lp.ln2_beta.data, d, &mut out);

    let cache = LayerCache {
        queries,
        x_in: x,
        q,
        k,
        v,
        probs,
        probs_mask,
        ctx,
        ln1,
        h1,
        ff_pre,
        ff_act,
        ff_mask,
        ln2,
    };
    (out, cache)
}

/// Backward of [`layer_forward`]; `d_out` has one row per query, the result
/// one row per input row.
fn layer_backward<S: Scalar>(
    cfg: &EncoderConfig,
    lp: &LayerParams<S>,
    batch: &PackedBatch,
    lc: &LayerCache<S>,
    d_out: &[S],
    g: &mut LayerParams<S>,
) -> Vec<S> {
    let d = cfg.embed_dim;
    let f = cfg.ff_dim;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let t = batch.total_tokens();
    let queries = &lc.queries;
    let nq = queries.rows.len();
    let full = queries.is_full(t);
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();

    // out = LN2(h1 + dropout(ffn(h1)))
    let mut dz2 = vec![S::zero(); nq * d];
    layer_norm_backward(
        d_out,
        &lc.ln2,
        &lp.ln2_gamma.data,
        d,
        &mut g.ln2_gamma.data,
        &mut g.ln2_beta.data,
        &mut dz2,
    );
    let mut dh1 = dz2.clone();
    let mut dff = dz2;
    if let Some(mask) = &lc.ff_mask {
        for (a, &m) in dff.iter_mut().zip(mask) {
            *a *= m;
        }
    }
    let mut dact = vec![S::zero(); nq * f];
    linear_backward(
        &lc.ff_act,
        &lp.ff_out_w.data,
        &dff,
        nq,
        f,
        d,
        &mut g.ff_out_w.data,
        &mut g.ff_out_b.data,
        Some((&mut dact, S::zero())),
    );
    for (a, &p) in dact.iter_mut().zip(&lc.ff_pre) {
        *a *= gelu_grad(p);
    }
    linear_backward(
        &lc.h1,
        &lp.ff_in_w.data,
        &dact,
        nq,
        d,
        f,
        &mut g.ff_in_w.data,
        &mut g.ff_in_b.data,
        Some((&mut dh1, S::one())),
    );

    // h1 = LN1(x_q + attn(x))
    let mut dz1 = vec![S::zero(); nq * d];
    layer_norm_backward(
        &dh1,
        &lc.ln1,
        &lp.ln1_gamma.data,
        d,
        &mut g.ln1_gamma.data,
        &mut g.ln1_beta.data,
        &mut dz1,
    );
    let mut dctx = vec![S::zero(); nq * d];
    linear_backward(
        &lc.ctx,
        &lp.wo.data,
        &dz1,
        nq,
        d,
        d,
        &mut g.wo.data,
        &mut g.bo.data,
        Some((&mut dctx, S::zero())),
    );
    // Residual path into the query rows.
    let mut dxq = dz1;

    let mut dq = vec![S::zero(); nq * d];
    let mut dk = vec![S::zero(); t * d];
    let mut dv = vec![S::zero(); t * d];
    let mut dp = Vec::new();
    for b in 0..batch.num_seqs() {
        let n = batch.seq_len(b);
        let o = batch.offsets[b];
        let qs = queries.offsets[b]..queries.offsets[b + 1];
        let block = qs.len() * n;
        for h in 0..heads {
            let col = h * dh;
            for (a, qi_row) in qs.clone().enumerate() {
                let start = queries.attn[b] + h * block + a * n;
                let p = &lc.probs[start..start + n];
                let keep = lc.probs_mask.as_ref().map(|m| &m[start..start + n]);
                let dci = &dctx[qi_row * d + col..][..dh];
                // ctx_i = Σ_j w_ij v_j with w = p ∘ keep
                dp.clear();
                for j in 0..n {
                    let w = keep.map_or(p[j], |m| p[j] * m[j]);
                    axpy(w, dci, &mut dv[(o + j) * d + col..][..dh]);
                    let gj = dot(dci, &lc.v[(o + j) * d + col..][..dh]);
                    dp.push(keep.map_or(gj, |m| gj * m[j]));
                }
                // softmax backward, folded with the score scale
                let inner = dot(&dp, p);
                let qi = &lc.q[qi_row * d + col..][..dh];
                for j in 0..n {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    axpy(
                        ds,
                        &lc.k[(o + j) * d + col..][..dh],
                        &mut dq[qi_row * d + col..][..dh],
                    );
                    axpy(ds, qi, &mut dk[(o + j) * d + col..][..dh]);
                }
            }
        }
    }

    let mut dx = vec![S::zero(); t * d];
    linear_backward(
        &lc.x_in,
        &lp.wk.data,
        &dk,
        t,
        d,
        d,
        &mut g.wk.data,
        &mut g.bk.data,
        Some((&mut dx, S::zero())),
    );
    linear_backward(
        &lc.x_in,
        &lp.wv.data,
        &dv,
        t,
        d,
        d,
        &mut g.wv.data,
        &mut g.bv.data,
        Some((&mut dx, S::one())),
    );
    if full {
        linear_backward(
            &lc.x_in,
            &lp.wq.data,
            &dq,
            t,
            d,
            d,
            &mut g.wq.data,
            &mut g.bq.data,
            Some((&mut dxq, S::one())),
        );
        for (a, &b) in dx.iter_mut().zip(&dxq) {
            *a += b;
        }
    } else {
        let xq = gather(&lc.x_in, &queries.rows, d);
        linear_backward(
            &xq,
            &lp.wq.data,
            &dq,
            nq,
            d,
            d,
            &mut g.wq.data,
            &mut g.bq.data,
            Some((&mut dxq, S::one())),
        );
        for (j, &r) in queries.rows.iter().enumerate() {
            for (a, &b) in dx[r * d..(r + 1) * d]
                .iter_mut()
                .zip(&dxq[j * d..(j + 1) * d])
            {
                *a += b;
            }
        }
    }
    dx
}
