//! Acceptance criteria, one PASS/FAIL/SKIP line each.
//!
//! Exits 0 unless `FASTLOGAD_ACCEPTANCE_STRICT` is set, so that known
//! shortfalls are reported without breaking `cargo test`. Set
//! `FASTLOGAD_HDFS` to a directory holding `HDFS.log` and
//! `anomaly_label.csv` to run the real-data check, and
//! `FASTLOGAD_ACCEPTANCE_ONLY` to a name fragment to run matching criteria.

use std::time::Instant;

use fastlogad::das::{hst_loss, hst_term, rtd_loss, Discriminator};
use fastlogad::detector::{bench, calibrate, detect, score_batches, BenchConfig};
use fastlogad::encoder::{EncoderConfig, Mode, PackedBatch, ParamSet};
use fastlogad::grouper::{chronological_split, EventSequence, Label, Split};
use fastlogad::ingest::{read_checkpoint, write_checkpoint, Checkpoint};
use fastlogad::mgag::{
    candidate_index, candidate_tokens, complement_distribution, complement_fill,
    generator_ops_on_this_thread, mlm_loss, random_generate, sample_mask, Generator, MaskPattern,
    MaskedBatch,
};
use fastlogad::pipeline::{
    encode_with_cls, run_pipeline, train_and_evaluate, PipelineConfig, RunOutputs,
};
use fastlogad::rng::substream;
use fastlogad::synth::{benchmark_corpus, gen_normal_from, CorpusLayout, GrammarSpec};
use fastlogad::trainer::{GeneratorKind, ModelShape};
use fastlogad::vocab::{TokenId, Vocabulary, PAD};
use rand::Rng;

type Outcome = std::result::Result<String, String>;

#[derive(Default)]
struct Report {
    passed: usize,
    failed: usize,
    skipped: usize,
}

impl Report {
    fn record(&mut self, name: &str, start: Instant, outcome: Option<Outcome>) {
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Some(Ok(d)) => {
                self.passed += 1;
                ("PASS", d)
            }
            Some(Err(d)) => {
                self.failed += 1;
                ("FAIL", d)
            }
            None => {
                self.skipped += 1;
                ("SKIP", "no input supplied".to_string())
            }
        };
        println!("{tag} {name} [{secs:.1}s]: {detail}");
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn complement() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(1, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=64);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let c = complement_distribution(&p).map_err(|e| e.to_string())?;
        worst = worst.max((c.iter().sum::<f64>() - 1.0).abs());
    }
    let examples: [(&[f64], &[f64]); 3] = [
        (&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.5]),
        (&[0.25, 0.25, 0.25, 0.25], &[0.25, 0.25, 0.25, 0.25]),
        (&[0.9, 0.1], &[0.1, 0.9]),
    ];
    let mut example_err = 0.0f64;
    for (p, want) in examples {
        let c = complement_distribution(p).map_err(|e| e.to_string())?;
        for (a, b) in c.iter().zip(want) {
            example_err = example_err.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-9 && example_err <= 1e-12 && secs < 1.0,
        format!("max |sum - 1| = {worst:.2e}, worked-example error {example_err:.2e}, {secs:.3}s"),
    )
}

fn loss_identities() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let norms = [0.0, 0.3, 1.7, 12.5];
    let normal_exact = norms.iter().all(|&n| hst_term(n, Label::Normal, 1.0) == n)
        && hst_loss(&norms, &[Label::Normal; 4], 1.0).map_err(|e| e.to_string())?
            == norms.iter().sum::<f64>() / 4.0;
    let hst1 = hst_loss(&[ln2], &[Label::Anomaly], 1.0).map_err(|e| e.to_string())?;
    let rtd1 = rtd_loss(&[0.5f64], &[1]).map_err(|e| e.to_string())?;
    let rtd0 = rtd_loss(&[0.5f64], &[0]).map_err(|e| e.to_string())?;
    let mlm = mlm_loss(&[vec![0.125f64; 8]], &[3]).map_err(|e| e.to_string())?;
    let errs = [
        (hst1 - ln2).abs(),
        (rtd1 - ln2).abs(),
        (rtd0 - ln2).abs(),
        (mlm - 8f64.ln()).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    verdict(
        normal_exact && worst <= 1e-9,
        format!("y=0 exact: {normal_exact}; HST y=1 {hst1:.12}, RTD {rtd1:.12}/{rtd0:.12}, MLM {mlm:.12}; max error {worst:.1e}"),
    )
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 12,
        max_len: 8,
        vocab_size: 10,
        dropout_rate: 0.1,
    }
}

fn jitter<P: ParamSet<f64>>(p: &mut P, seed: u64) {
    let mut rng = substream(seed, &[]);
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// Largest per-tensor relative error `‖num − ana‖ / (‖num‖ + ‖ana‖)`
/// between central differences of `loss` and `analytic`.
fn max_relative_error<P: ParamSet<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) -> (f64, String, usize) {
    let h = 1e-5;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let ana: Vec<Vec<f64>> = analytic
        .tensors()
        .iter()
        .map(|(_, t)| t.data.clone())
        .collect();
    let mut worst = (0.0, String::new());
    for (ti, name) in names.iter().enumerate() {
        let mut diff = 0.0;
        let mut num_sq = 0.0;
        for (i, &a) in ana[ti].iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[i] -= h;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            diff += (num - a).powi(2);
            num_sq += num * num;
        }
        let scale = num_sq.sqrt() + ana[ti].iter().map(|a| a * a).sum::<f64>().sqrt();
        // A softmax is invariant to key biases, so their true gradient is
        // zero; only an absolute comparison is meaningful there.
        let err = if scale < 1e-8 {
            if diff.sqrt() < 1e-9 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff.sqrt() / scale
        };
        if err >= worst.0 {
            worst = (err, name.clone());
        }
    }
    (worst.0, worst.1, names.len())
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config();
    let seqs: Vec<Vec<TokenId>> = vec![vec![2, 4, 5, 7, 9], vec![2, 6, 1, 8]];
    let batch = PackedBatch::from_sequences(&seqs);
    let mut lines = Vec::new();
    let mut ok = true;

    let mut gen =
        Generator::<f64>::init(cfg, &mut substream(11, &[])).map_err(|e| e.to_string())?;
    jitter(&mut gen, 11);
    let events: Vec<&[TokenId]> = seqs.iter().map(|s| &s[1..]).collect();
    let masks = [
        MaskPattern {
            bits: vec![1, 0, 1, 0],
        },
        MaskPattern {
            bits: vec![0, 1, 1],
        },
    ];
    let mrefs: Vec<&MaskPattern> = masks.iter().collect();
    let input = MaskedBatch::new(&events, &mrefs).map_err(|e| e.to_string())?;
    let truth: Vec<TokenId> = vec![4, 7, 1, 8];
    let mut g_grads = gen.zeros_like();
    gen.loss_and_grads(&input, &truth, Mode::Eval, &mut g_grads)
        .map_err(|e| e.to_string())?;
    let (err, name, groups) = max_relative_error(&gen, &g_grads, |g| {
        g.loss_and_grads(&input, &truth, Mode::Eval, &mut g.zeros_like())
            .unwrap()
            .0
    });
    ok &= err < 1e-4;
    lines.push(format!("MLM {err:.1e} ({name}, {groups} groups)"));

    let mut disc =
        Discriminator::<f64>::init(cfg, &mut substream(12, &[])).map_err(|e| e.to_string())?;
    jitter(&mut disc, 12);
    let targets = vec![vec![1, 0, 0, 1], vec![0, 1, 0]];
    let mut d_grads = disc.zeros_like();
    disc.rtd_loss_and_grads(&batch, &targets, Mode::Eval, &mut d_grads)
        .map_err(|e| e.to_string())?;
    let (err, name, groups) = max_relative_error(&disc, &d_grads, |d| {
        d.rtd_loss_and_grads(&batch, &targets, Mode::Eval, &mut d.zeros_like())
            .unwrap()
    });
    ok &= err < 1e-4;
    lines.push(format!("RTD {err:.1e} ({name}, {groups} groups)"));

    let labels = [Label::Normal, Label::Anomaly];
    let mut t_grads = disc.zeros_like().trunk;
    disc.hst_loss_and_grads(&batch, &labels, 1.0, Mode::Eval, &mut t_grads)
        .map_err(|e| e.to_string())?;
    let (err, name, groups) = max_relative_error(&disc.trunk, &t_grads, |trunk| {
        let mut d = disc.clone();
        d.trunk = trunk.clone();
        let mut scratch = d.zeros_like().trunk;
        d.hst_loss_and_grads(&batch, &labels, 1.0, Mode::Eval, &mut scratch)
            .unwrap()
    });
    ok &= err < 1e-4;
    lines.push(format!("HST {err:.1e} ({name}, {groups} groups)"));

    let secs = start.elapsed().as_secs_f64();
    verdict(
        ok && secs < 60.0,
        format!(
            "worst relative error per loss: {}; {secs:.1}s",
            lines.join(", ")
        ),
    )
}

fn masking() -> Outcome {
    let (d, r, n) = (20, 0.5, 10_000);
    let mut rng = substream(13, &[]);
    let mut counts = vec![0usize; d];
    let mut bad_count = 0;
    let mut at_pad = 0;
    // A padded layout: [CLS], 20 events, 4 pads. Masks cover event slots only.
    let padded: Vec<TokenId> = std::iter::once(2).chain(4..24).chain([PAD; 4]).collect();
    for _ in 0..n {
        let m = sample_mask(d, r, &mut rng);
        if m.count() != 10 {
            bad_count += 1;
        }
        for i in m.positions() {
            counts[i] += 1;
            if padded[i + 1] == PAD {
                at_pad += 1;
            }
        }
    }
    let worst = counts
        .iter()
        .map(|&c| (c as f64 / n as f64 - 0.5).abs())
        .fold(0.0, f64::max);
    verdict(
        bad_count == 0 && at_pad == 0 && worst <= 0.03,
        format!("{bad_count} masks with a count other than 10, {at_pad} pad hits, max positional deviation {:.2} points", worst * 100.0),
    )
}

fn generator_sampling() -> Outcome {
    let draws = 100_000;
    let vocab_size = 10;
    let cands = candidate_tokens(vocab_size);

    let s: Vec<TokenId> = vec![4, 5, 6];
    let m = MaskPattern {
        bits: vec![0, 1, 0],
    };
    let mut rng = substream(14, &[]);
    let mut freq = vec![0usize; cands.len()];
    let mut kept = 0;
    for _ in 0..draws {
        let out = random_generate(&s, &m, vocab_size, &mut rng).map_err(|e| e.to_string())?;
        let t = out.tokens[1];
        if t == s[1] {
            kept += 1;
        }
        freq[candidate_index(t).expect("candidate")] += 1;
    }
    let orig = candidate_index(s[1]).expect("candidate");
    let uniform = 1.0 / (cands.len() - 1) as f64;
    let random_dev = freq
        .iter()
        .enumerate()
        .map(|(i, &c)| (c as f64 / draws as f64 - if i == orig { 0.0 } else { uniform }).abs())
        .fold(0.0, f64::max);

    let mut gen_cfg = tiny_config();
    gen_cfg.vocab_size = vocab_size;
    let gen =
        Generator::<f64>::init(gen_cfg, &mut substream(15, &[])).map_err(|e| e.to_string())?;
    let events: &[TokenId] = &s;
    let input = MaskedBatch::new(&[events], &[&m]).map_err(|e| e.to_string())?;
    let dist = gen.predict(&input).map_err(|e| e.to_string())?.remove(0);
    let target = complement_distribution(&dist).map_err(|e| e.to_string())?;
    let mut freq = vec![0usize; cands.len()];
    let batch = 1000;
    for round in 0..draws / batch {
        let evs = vec![events; batch];
        let ms = vec![&m; batch];
        let mut rngs: Vec<_> = (0..batch)
            .map(|i| substream(16, &[round as u64, i as u64]))
            .collect();
        for out in gen
            .generate(&evs, &ms, &mut rngs)
            .map_err(|e| e.to_string())?
        {
            freq[candidate_index(out.tokens[1]).expect("candidate")] += 1;
        }
    }
    let mlm_dev = freq
        .iter()
        .zip(&target)
        .map(|(&c, &p)| (c as f64 / draws as f64 - p).abs())
        .fold(0.0, f64::max);
    // The filling step alone, against the same target.
    let fill = complement_fill(&s, &m, &[dist.clone()], vocab_size, &mut substream(17, &[]));
    verdict(
        random_dev <= 0.02 && mlm_dev <= 0.02 && kept == 0 && fill.is_ok(),
        format!(
            "random max deviation {:.2} points, original kept {kept} times; mlm max deviation {:.2} points",
            random_dev * 100.0,
            mlm_dev * 100.0
        ),
    )
}

fn synthetic_split(seed: u64) -> (GrammarSpec, CorpusLayout, Split) {
    let grammar = GrammarSpec::standard(seed);
    let layout = CorpusLayout::default();
    let corpus = benchmark_corpus(&grammar, &layout).expect("standard corpus");
    let split = chronological_split(&corpus, layout.pool(), layout.val_fraction()).expect("split");
    (grammar, layout, split)
}

/// Encoder for the synthetic experiments, sized to train within the time
/// budget on one core.
fn desk_shape() -> ModelShape {
    ModelShape {
        embed_dim: 64,
        n_layers: 2,
        n_heads: 4,
        ff_dim: 128,
        ..ModelShape::default()
    }
}

fn run(split: &Split, cfg: &PipelineConfig) -> std::result::Result<(RunOutputs<f32>, f64), String> {
    let start = Instant::now();
    let out = train_and_evaluate::<f32>(split, cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn end_to_end(runs: &[(GeneratorKind, &RunOutputs<f32>, f64)]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, out, secs) in runs {
        let r = &out.report;
        let (an, no) = (
            r.median_score_anomaly.unwrap_or(f64::NAN),
            r.median_score_normal.unwrap_or(f64::NAN),
        );
        let ratio = an / no;
        let pass = r.f1 >= 0.95 && ratio >= 10.0 && *secs <= 300.0;
        ok &= pass;
        parts.push(format!(
            "{}: F1 {:.4}, median anomaly/normal {an:.4}/{no:.4} = {ratio:.1}x, {secs:.0}s",
            kind.as_str(),
            r.f1
        ));
    }
    verdict(ok, parts.join("; "))
}

fn threshold_semantics(
    grammar: &GrammarSpec,
    layout: &CorpusLayout,
    out: &RunOutputs<f32>,
    cfg: &PipelineConfig,
) -> Outcome {
    let base = layout.pool() + layout.test_normal + layout.test_anomaly;
    let cal = gen_normal_from(grammar, base, 2000).map_err(|e| e.to_string())?;
    let fresh = gen_normal_from(grammar, base + 2000, 10_000).map_err(|e| e.to_string())?;
    let disc = &out.trained.discriminator;
    let max_len = disc.config.max_len;
    let score = |seqs: &[EventSequence]| -> std::result::Result<Vec<f64>, String> {
        Ok(score_batches(
            disc,
            &encode_with_cls(&out.vocab, seqs, max_len),
            cfg.eval_batch_size,
        )
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
    };
    let threshold = calibrate(&score(&cal)?, 0.99).map_err(|e| e.to_string())?;
    let fp = score(&fresh)?
        .iter()
        .filter(|&&s| s > threshold.epsilon)
        .count();
    let fpr = fp as f64 / fresh.len() as f64;
    verdict(
        (0.002..=0.02).contains(&fpr),
        format!(
            "epsilon {:.4} from 2000 normals; {fp} of {} fresh normals flagged = {:.2}%",
            threshold.epsilon,
            fresh.len(),
            fpr * 100.0
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn throughput(out: &RunOutputs<f32>, split: &Split) -> Outcome {
    let Some(gen) = &out.trained.generator else {
        return Err("run has no generator".into());
    };
    let disc = &out.trained.discriminator;
    let seqs = encode_with_cls(&out.vocab, &split.test, disc.config.max_len);
    let ids: Vec<String> = split.test.iter().map(|s| s.seq_id.clone()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let detect_ops = pool.install(|| {
        let before = generator_ops_on_this_thread();
        detect(&ids, &seqs, disc, out.vocab.len(), &out.threshold, 64)
            .map(|_| generator_ops_on_this_thread() - before)
    });
    let detect_ops = detect_ops.map_err(|e| e.to_string())?;
    let cfg = BenchConfig {
        batch_size: 64,
        repeats: 3,
        ..BenchConfig::default()
    };
    let d = bench(&seqs, disc, None, &cfg).map_err(|e| e.to_string())?;
    let g = bench(&seqs, disc, Some(gen), &cfg).map_err(|e| e.to_string())?;
    verdict(
        detect_ops == 0 && d.generator_ops == 0 && g.generator_ops > 0 && d.mean_ms < g.mean_ms,
        format!(
            "detect ran {detect_ops} generator ops, bench {}; per-sequence {:.4} ms vs {:.4} ms with generator ({} ops)",
            d.generator_ops, d.mean_ms, g.mean_ms, g.generator_ops
        ),
    )
}

fn persistence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let grammar = GrammarSpec::standard(5);
    let layout = CorpusLayout {
        train: 200,
        val: 50,
        test_normal: 100,
        test_anomaly: 20,
        ..CorpusLayout::default()
    };
    let corpus = benchmark_corpus(&grammar, &layout).map_err(|e| e.to_string())?;
    let split = chronological_split(&corpus, layout.pool(), layout.val_fraction())
        .map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&split.train).map_err(|e| e.to_string())?;
    let tsv = vocab.to_tsv();
    let vocab_ok = Vocabulary::from_tsv(&tsv)
        .map_err(|e| e.to_string())?
        .to_tsv()
        == tsv;

    let mut cfg = PipelineConfig::default();
    cfg.train.model = ModelShape {
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 32,
        max_len: 40,
        ..ModelShape::default()
    };
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_epochs = 2;
    let disc = Discriminator::<f32>::init(
        cfg.train.model.encoder_config(vocab.len()),
        &mut substream(18, &[]),
    )
    .map_err(|e| e.to_string())?;
    let bytes = write_checkpoint(&Checkpoint::of_discriminator(&disc, &vocab.fingerprint()));
    let back = read_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let ckpt_ok = write_checkpoint(&back) == bytes
        && back
            .into_discriminator::<f32>(&vocab.fingerprint())
            .map_err(|e| e.to_string())?
            == disc;

    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).map_err(|e| e.to_string())?;
    std::fs::write(
        data.join("sequences.tsv"),
        fastlogad::ingest::write_sequence_file(&corpus),
    )
    .map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        cfg.train_count = Some(layout.pool());
        cfg.val_fraction = Some(layout.val_fraction());
        run_pipeline::<f32>(&data, &out, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(out.join("eval_report.json")).map_err(|e| e.to_string())?);
    }
    let rerun_ok = reports[0] == reports[1];
    verdict(
        vocab_ok && ckpt_ok && rerun_ok,
        format!("vocab byte-exact {vocab_ok}, checkpoint byte-exact {ckpt_ok}, identical eval_report.json {rerun_ok}"),
    )
}

fn hdfs() -> Option<Outcome> {
    let dir = std::env::var_os("FASTLOGAD_HDFS")?;
    let dir = std::path::PathBuf::from(dir);
    let out = tempfile::tempdir().ok()?;
    let mut cfg = PipelineConfig {
        dataset: Some("hdfs".into()),
        train_count: Some(5000),
        val_fraction: Some(0.1),
        ..PipelineConfig::default()
    };
    cfg.threads = 1;
    Some(
        match run_pipeline::<f32>(&dir, out.path(), &cfg, &mut |_| {}) {
            Ok(r) => verdict(
                r.f1 >= 0.80,
                format!("F1 {:.4} on {} test sequences", r.f1, r.test_sequences),
            ),
            Err(e) => Err(e.to_string()),
        },
    )
}

fn main() {
    // Pass through the flags cargo's test runner hands every target.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only = std::env::var("FASTLOGAD_ACCEPTANCE_ONLY").ok();
    let wanted = |name: &str| only.as_deref().map_or(true, |o| name.contains(o));
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .ok();
    let mut report = Report::default();
    let mut check = |name: &str, f: &mut dyn FnMut() -> Option<Outcome>| {
        if wanted(name) {
            let start = Instant::now();
            let outcome = f();
            report.record(name, start, outcome);
        }
    };

    check("complement distribution", &mut || Some(complement()));
    check("loss identities", &mut || Some(loss_identities()));
    check("gradient checks", &mut || Some(gradient_checks()));
    check("masking contract", &mut || Some(masking()));
    check("generator sampling", &mut || Some(generator_sampling()));

    let (grammar, layout, split) = synthetic_split(7);
    let mut cfg = PipelineConfig::default();
    cfg.train.model = desk_shape();
    cfg.train.optimizer.learning_rate = 1e-3;
    let mut runs = Vec::new();
    if [
        "end-to-end synthetic run",
        "threshold semantics",
        "throughput property",
    ]
    .iter()
    .any(|n| wanted(n))
    {
        for kind in [GeneratorKind::Random, GeneratorKind::Mlm] {
            let mut c = cfg.clone();
            c.train.generator = kind;
            runs.push((kind, run(&split, &c)));
        }
    }
    check("end-to-end synthetic run", &mut || {
        let mut ok = Vec::new();
        for (kind, r) in &runs {
            match r {
                Ok((out, secs)) => ok.push((*kind, out, *secs)),
                Err(e) => return Some(Err(format!("{} run failed: {e}", kind.as_str()))),
            }
        }
        Some(end_to_end(&ok))
    });
    check("threshold semantics", &mut || {
        Some(match &runs[0].1 {
            Ok((out, _)) => threshold_semantics(&grammar, &layout, out, &cfg),
            Err(e) => Err(e.clone()),
        })
    });

    let mut desk = cfg.clone();
    desk.train.generator = GeneratorKind::Random;
    let seeds = [1u64, 2, 3];
    let mut with_rtd = Vec::new();
    let mut without_rtd = Vec::new();
    let mut errors = Vec::new();
    if wanted("RTD ablation direction") || wanted("masking-ratio sweep") {
        for &seed in &seeds {
            for rtd in [true, false] {
                if !rtd && !wanted("RTD ablation direction")
                    || seed != seeds[0] && !wanted("RTD ablation direction")
                {
                    continue;
                }
                let mut c = desk.clone();
                c.train.seed = seed;
                c.train.rtd = rtd;
                match run(&split, &c) {
                    Ok((out, _)) => {
                        if rtd { &mut with_rtd } else { &mut without_rtd }.push(out.report.f1)
                    }
                    Err(e) => errors.push(e),
                }
            }
        }
    }
    check("RTD ablation direction", &mut || {
        Some(if errors.is_empty() {
            let (a, b) = (mean(&with_rtd), mean(&without_rtd));
            verdict(
                a >= b - 0.005,
                format!("mean F1 over seeds {seeds:?}: with RTD {a:.4} {with_rtd:.4?}, without {b:.4} {without_rtd:.4?}"),
            )
        } else {
            Err(errors.join("; "))
        })
    });
    check("masking-ratio sweep", &mut || {
        let mut c = desk.clone();
        c.train.seed = seeds[0];
        c.train.mask_ratio = 0.0;
        Some(match run(&split, &c) {
            Ok((out, _)) => {
                let (f0, f5) = (out.report.f1, with_rtd.first().copied().unwrap_or(f64::NAN));
                verdict(
                    f5 - f0 >= 0.20,
                    format!(
                        "F1 at r=0 {f0:.4} vs r=0.5 {f5:.4}, drop {:.1} points",
                        (f5 - f0) * 100.0
                    ),
                )
            }
            Err(e) => Err(e),
        })
    });

    check("throughput property", &mut || {
        Some(match &runs[1].1 {
            Ok((out, _)) => throughput(out, &split),
            Err(e) => Err(e.clone()),
        })
    });
    check("persistence", &mut || Some(persistence()));
    check("HDFS real-data run (optional)", &mut || hdfs());

    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        report.passed, report.failed, report.skipped
    );
    if report.failed > 0 && std::env::var_os("FASTLOGAD_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
