use super::*;
use crate::grouper::Label;
use crate::rng::substream;
use crate::vocab::{TokenSequence, CLS, PAD};

fn tiny() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 12,
        max_len: 4,
        vocab_size: 8,
        dropout_rate: 0.0,
    }
}

fn padded(ids: &[u32], len: usize) -> TokenSequence {
    let mut v = ids.to_vec();
    v.resize(len, PAD);
    let mut mask = vec![0u8; len];
    mask[..ids.len()].fill(1);
    TokenSequence {
        ids: v,
        attn_mask: mask,
        label: Label::Normal,
    }
}

/// Perturb biases and layer-norm params away from their trivial init so every
/// gradient path is exercised.
fn jitter(params: &mut EncoderParams<f64>, seed: u64) {
    let mut rng = substream(seed, &[99]);
    for t in params.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn projection(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, &[7]);
    (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn loss(params: &EncoderParams<f64>, cfg: &EncoderConfig, batch: &PackedBatch, r: &[f64]) -> f64 {
    let pass = params.forward(cfg, batch, Mode::Eval, false).unwrap();
    pass.hidden.iter().zip(r).map(|(a, b)| a * b).sum()
}

#[test]
fn padded_output_shape() {
    let cfg = EncoderConfig::standard(12, 8);
    let params = EncoderParams::<f32>::init(&cfg, &mut substream(1, &[]));
    let seqs = [
        padded(&[CLS, 4, 5, 6], 8),
        padded(&[CLS, 7, 7, 8, 9, 10, 11], 8),
    ];
    let out = params.forward_padded(&cfg, &seqs, Mode::Eval).unwrap();
    assert_eq!(out.shape(), (2, 8, 256));
    assert!(out.row(0, 5).iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    let cfg = EncoderConfig::standard(12, 8);
    let params = EncoderParams::<f32>::init(&cfg, &mut substream(2, &[]));
    let seqs = [padded(&[CLS, 4, 5, 6, 11], 8)];
    let a = params.forward_padded(&cfg, &seqs, Mode::Eval).unwrap();
    let b = params.forward_padded(&cfg, &seqs, Mode::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_mode_applies_dropout() {
    let cfg = EncoderConfig::standard(12, 8);
    let params = EncoderParams::<f32>::init(&cfg, &mut substream(2, &[]));
    let seqs = [padded(&[CLS, 4, 5, 6, 11], 8)];
    let a = params.forward_padded(&cfg, &seqs, Mode::Eval).unwrap();
    let mut rng = substream(3, &[]);
    let b = params
        .forward_padded(&cfg, &seqs, Mode::Train(&mut rng))
        .unwrap();
    assert_ne!(a, b);
}

#[test]
fn pad_tail_content_does_not_change_real_outputs() {
    let cfg = EncoderConfig::standard(12, 10);
    let params = EncoderParams::<f64>::init(&cfg, &mut substream(4, &[]));
    let base = padded(&[CLS, 4, 5, 9], 10);
    // Same real prefix, pad tail with different (masked-out) ids.
    let mut other = base.clone();
    other.ids[5] = 7;
    other.ids[8] = 11;
    let a = params
        .forward_padded(&cfg, &[base.clone()], Mode::Eval)
        .unwrap();
    let b = params.forward_padded(&cfg, &[other], Mode::Eval).unwrap();
    for pos in 0..4 {
        for (x, y) in a.row(0, pos).iter().zip(b.row(0, pos)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    // Batch neighbours of different length do not leak into each other.
    let long = padded(&[CLS, 6, 6, 6, 6, 6, 6, 6], 10);
    let c = params
        .forward_padded(&cfg, &[base, long], Mode::Eval)
        .unwrap();
    for pos in 0..4 {
        for (x, y) in a.row(0, pos).iter().zip(c.row(0, pos)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn rejects_out_of_range_tokens_and_lengths() {
    let cfg = tiny();
    let params = EncoderParams::<f64>::init(&cfg, &mut substream(5, &[]));
    let bad = PackedBatch::from_sequences(&[vec![2u32, 8]]);
    assert!(matches!(
        params.forward(&cfg, &bad, Mode::Eval, false),
        Err(Error::TokenOutOfRange { id: 8, .. })
    ));
    let long = PackedBatch::from_sequences(&[vec![2u32, 4, 4, 4, 4]]);
    assert!(params.forward(&cfg, &long, Mode::Eval, false).is_err());
}

#[test]
fn non_finite_weights_are_reported_with_layer() {
    let cfg = tiny();
    let mut params = EncoderParams::<f64>::init(&cfg, &mut substream(5, &[]));
    params.layers[0].ff_out_b.data[0] = f64::NAN;
    let batch = PackedBatch::from_sequences(&[vec![2u32, 4]]);
    match params.forward(&cfg, &batch, Mode::Eval, false) {
        Err(Error::NonFinite(what)) => assert_eq!(what, "encoder layer 0"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn attention_rows_sum_to_one_and_layer_norm_standardizes() {
    let cfg = EncoderConfig {
        n_layers: 2,
        ..EncoderConfig::standard(12, 8)
    };
    let params = EncoderParams::<f32>::init(&cfg, &mut substream(6, &[]));
    let batch = PackedBatch::from_sequences(&[vec![CLS, 4, 5], vec![CLS, 6, 7, 8, 9, 10]]);
    let pass = params.forward(&cfg, &batch, Mode::Eval, true).unwrap();
    for layer in 0..2 {
        for seq in 0..2 {
            let n = batch.seq_len(seq);
            for head in 0..cfg.n_heads {
                let p = pass.attention_probs(&batch, layer, seq, head).unwrap();
                for row in p.chunks(n) {
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                }
            }
        }
    }
    for row in pass.final_normalized().unwrap().chunks(cfg.embed_dim) {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn backward_without_cache_is_an_error() {
    let cfg = tiny();
    let params = EncoderParams::<f64>::init(&cfg, &mut substream(8, &[]));
    let batch = PackedBatch::from_sequences(&[vec![2u32, 4]]);
    let pass = params.forward(&cfg, &batch, Mode::Eval, false).unwrap();
    let mut grads = EncoderParams::zeros(&cfg);
    let d = vec![0.0; pass.hidden.len()];
    assert!(matches!(
        params.backward(&cfg, &batch, &pass, &d, &mut grads),
        Err(Error::MissingCache)
    ));
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let cfg = tiny();
    let mut params = EncoderParams::<f64>::init(&cfg, &mut substream(9, &[]));
    jitter(&mut params, 9);
    let batch = PackedBatch::from_sequences(&[vec![2u32, 4, 5], vec![2, 6]]);
    let pass = params.forward(&cfg, &batch, Mode::Eval, true).unwrap();
    let mut grads = EncoderParams::zeros(&cfg);
    params
        .backward(
            &cfg,
            &batch,
            &pass,
            &vec![0.0; pass.hidden.len()],
            &mut grads,
        )
        .unwrap();
    for (name, t) in grads.tensors() {
        assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn gradients_match_central_differences() {
    let cfg = tiny();
    let mut params = EncoderParams::<f64>::init(&cfg, &mut substream(10, &[]));
    jitter(&mut params, 10);
    let batch = PackedBatch::from_sequences(&[vec![2u32, 4, 5, 7], vec![2, 6, 1]]);
    let r = projection(batch.total_tokens(), cfg.embed_dim, 10);

    let pass = params.forward(&cfg, &batch, Mode::Eval, true).unwrap();
    let mut grads = EncoderParams::zeros(&cfg);
    params
        .backward(&cfg, &batch, &pass, &r, &mut grads)
        .unwrap();

    let h = 1e-5;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .iter()
        .map(|(_, t)| t.data.clone())
        .collect();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[i] -= h;
            *slot = (loss(&plus, &cfg, &batch, &r) - loss(&minus, &cfg, &batch, &r)) / (2.0 * h);
        }
        let diff: f64 = numeric
            .iter()
            .zip(&analytic[ti])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt()
            + analytic[ti].iter().map(|a| a * a).sum::<f64>().sqrt();
        // Key biases shift every score in a softmax row equally, so their
        // true gradient is zero; compare absolutely there.
        if scale < 1e-8 {
            assert!(diff < 1e-9, "{name}: absolute error {diff}");
            continue;
        }
        assert!(
            diff / scale < 1e-4,
            "{name}: relative error {}",
            diff / scale
        );
    }
}

#[test]
fn pad_embedding_row_receives_no_gradient() {
    let cfg = tiny();
    let params = EncoderParams::<f64>::init(&cfg, &mut substream(11, &[]));
    let seqs = [padded(&[2, 4, 5], 4), padded(&[2, 6], 4)];
    let batch = PackedBatch::from_token_sequences(&seqs);
    let r = projection(batch.total_tokens(), cfg.embed_dim, 11);
    let pass = params.forward(&cfg, &batch, Mode::Eval, true).unwrap();
    let mut grads = EncoderParams::zeros(&cfg);
    params
        .backward(&cfg, &batch, &pass, &r, &mut grads)
        .unwrap();
    let d = cfg.embed_dim;
    assert!(grads.token_embedding.data[..d].iter().all(|&v| v == 0.0));
    // Position 3 is pad in both sequences.
    assert!(grads.position_embedding.data[3 * d..4 * d]
        .iter()
        .all(|&v| v == 0.0));
    assert!(grads.token_embedding.data[4 * d..5 * d]
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn train_mode_gradients_match_with_fixed_dropout_stream() {
    // With dropout active, backward must use the same masks as forward:
    // compare against finite differences that replay the identical stream.
    let cfg = EncoderConfig {
        dropout_rate: 0.3,
        ..tiny()
    };
    let mut params = EncoderParams::<f64>::init(&cfg, &mut substream(12, &[]));
    jitter(&mut params, 12);
    let batch = PackedBatch::from_sequences(&[vec![2u32, 4, 5, 7]]);
    let r = projection(batch.total_tokens(), cfg.embed_dim, 12);
    let run = |p: &EncoderParams<f64>| {
        let mut rng = substream(12, &[1]);
        let pass = p
            .forward(&cfg, &batch, Mode::Train(&mut rng), true)
            .unwrap();
        let l: f64 = pass.hidden.iter().zip(&r).map(|(a, b)| a * b).sum();
        (l, pass)
    };
    let (_, pass) = run(&params);
    let mut grads = EncoderParams::zeros(&cfg);
    params
        .backward(&cfg, &batch, &pass, &r, &mut grads)
        .unwrap();
    let h = 1e-5;
    let ti = 4; // layer0.attn.wq
    for i in [0usize, 9, 33] {
        let mut plus = params.clone();
        plus.tensors_mut()[ti].data[i] += h;
        let mut minus = params.clone();
        minus.tensors_mut()[ti].data[i] -= h;
        let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
        let an = grads.tensors()[ti].1.data[i];
        assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
    }
}

#[test]
fn cls_only_pass_matches_full_pass() {
    let cfg = EncoderConfig {
        n_layers: 2,
        max_len: 8,
        ..tiny()
    };
    let mut params = EncoderParams::<f64>::init(&cfg, &mut substream(13, &[]));
    jitter(&mut params, 13);
    let batch = PackedBatch::from_sequences(&[vec![2u32, 4, 5, 7], vec![2], vec![2, 6, 1, 3, 3]]);
    let full = params.forward(&cfg, &batch, Mode::Eval, true).unwrap();
    let cls = params.forward_cls(&cfg, &batch, Mode::Eval, true).unwrap();
    let d = cfg.embed_dim;
    let r = projection(batch.total_tokens(), d, 13);
    let mut d_hidden = vec![0.0; r.len()];
    for b in 0..batch.num_seqs() {
        let row = batch.offsets[b];
        for (x, y) in full.row(row).iter().zip(cls.row(row)) {
            assert!((x - y).abs() < 1e-12);
        }
        d_hidden[row * d..(row + 1) * d].copy_from_slice(&r[row * d..(row + 1) * d]);
    }
    let mut g_full = EncoderParams::zeros(&cfg);
    let mut g_cls = EncoderParams::zeros(&cfg);
    params
        .backward(&cfg, &batch, &full, &d_hidden, &mut g_full)
        .unwrap();
    params
        .backward(&cfg, &batch, &cls, &d_hidden, &mut g_cls)
        .unwrap();
    for ((name, a), (_, b)) in g_full.tensors().iter().zip(g_cls.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12, "{name}");
        }
    }
}

use rand::Rng;
