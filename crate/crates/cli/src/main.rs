//! `fastlogad` command-line interface.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fastlogad::detector::{
    bench, calibrate, detect, score_batches, verdicts_from_csv, verdicts_to_csv, BenchConfig,
    BenchReport, Threshold,
};
use fastlogad::grouper::{chronological_split, EventSequence, Label, WindowSpec};
use fastlogad::ingest::{
    load_checkpoint, load_dataset, parse_label_csv, read_parse_file, read_sequence_file,
    save_checkpoint, write_parse_file, write_sequence_file, write_templates, Checkpoint,
    DatasetSpec, LabelSource,
};
use fastlogad::pipeline::{
    encode_events, encode_with_cls, evaluate, fingerprint, group, load_sequences, parse_lines,
    parse_sweep, provenance_line, run_pipeline, train_and_evaluate, write_run_artifacts,
    write_split, write_text, PipelineConfig, SynthManifest, SEQUENCES_FILE, SYNTH_MANIFEST,
};
use fastlogad::synth::{benchmark_corpus, gen_normal, CorpusLayout, GrammarSpec};
use fastlogad::trainer::{train, EpochRecord, GeneratorKind};
use fastlogad::vocab::Vocabulary;
use fastlogad::{Discriminator32, Error, Generator32, Result};

#[derive(Parser)]
#[command(
    name = "fastlogad",
    version,
    about = "Log anomaly detection with a norm-scored transformer discriminator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw log file into templates and structured records.
    Parse(ParseArgs),
    /// Group parsed records into labelled event sequences.
    Group(GroupArgs),
    /// Split sequences chronologically and build the vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Train generator and discriminator on a split directory.
    Train(TrainArgs),
    /// Calibrate the anomaly threshold on normal validation sequences.
    Calibrate(CalibrateArgs),
    /// Score sequences and flag anomalies.
    Detect(DetectArgs),
    /// Evaluate verdicts against labels.
    Eval(EvalArgs),
    /// Time discriminator-only inference.
    Bench(BenchArgs),
    /// Write a synthetic benchmark corpus.
    Synth(SynthArgs),
    /// Run parse, group, build-vocab, train, calibrate, detect and eval.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GeneratorArg {
    Random,
    Mlm,
}

/// Settings shared by every command; each mirrors a config-file key.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct DataFlags {
    /// Dataset preset (hdfs, bgl, thunderbird) or path to a dataset TOML.
    #[arg(long)]
    dataset: Option<String>,
    /// Parse-tree depth.
    #[arg(long)]
    drain_depth: Option<usize>,
    /// Template similarity threshold.
    #[arg(long)]
    drain_similarity: Option<f64>,
    /// Maximum children per parse-tree node.
    #[arg(long)]
    drain_max_children: Option<usize>,
    /// Sliding-window length in seconds (overrides the dataset window).
    #[arg(long)]
    window_seconds: Option<i64>,
    /// Sliding-window step in seconds.
    #[arg(long)]
    step_seconds: Option<i64>,
    /// Normal sequences in the training pool (train plus validation).
    #[arg(long)]
    train_count: Option<usize>,
    /// Share of the training pool held out for validation.
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Pseudo-anomaly generator.
    #[arg(long, value_enum)]
    generator: Option<GeneratorArg>,
    /// Replaced-token detection during stage 1.
    #[arg(long, value_enum)]
    rtd: Option<Switch>,
    /// Share of event positions masked per sequence.
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Weight of the pseudo-anomaly term of the separation loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Stage-1 epochs.
    #[arg(long)]
    stage1_epochs: Option<usize>,
    /// Stage-2 epochs.
    #[arg(long)]
    stage2_epochs: Option<usize>,
    /// Training batch size (normal sequences per step).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Global gradient-norm clip (0 disables).
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Embedding width.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Encoder layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward width.
    #[arg(long)]
    ff_dim: Option<usize>,
    /// Maximum tokens per sequence including [CLS].
    #[arg(long)]
    max_len: Option<usize>,
    /// Dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Calibration quantile.
    #[arg(long)]
    quantile: Option<f64>,
    /// Sequences per scoring batch.
    #[arg(long)]
    eval_batch_size: Option<usize>,
}

#[derive(Args)]
struct ParseArgs {
    /// Raw log file.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GroupArgs {
    /// parsed.tsv from `parse`.
    #[arg(long)]
    input: PathBuf,
    /// BlockId,Label CSV for session datasets.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Sequence file, or a directory holding sequences.tsv.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with train.tsv, val.tsv and vocab.tsv from `build-vocab`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Directory with discriminator.ckpt and vocab.tsv.
    #[arg(long)]
    model: PathBuf,
    /// Normal validation sequences.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ModelFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DetectArgs {
    /// Directory with discriminator.ckpt and vocab.tsv.
    #[arg(long)]
    model: PathBuf,
    /// Sequences to score.
    #[arg(long)]
    input: PathBuf,
    /// threshold.json from `calibrate`.
    #[arg(long)]
    threshold: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ModelFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// verdicts.csv from `detect`.
    #[arg(long)]
    verdicts: PathBuf,
    /// Labelled sequence file the verdicts were computed on.
    #[arg(long)]
    labels: PathBuf,
    /// threshold.json, for the report.
    #[arg(long)]
    threshold: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    /// Discriminator checkpoint; vocab.tsv is read from its directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequences to score; defaults to 1000 synthetic normals.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sequences per batch (config key eval_batch_size).
    #[arg(long)]
    batch: Option<usize>,
    /// Timed passes over the input.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Also time the generator+discriminator path with this generator checkpoint.
    #[arg(long)]
    with_generator: Option<PathBuf>,
    /// Write bench.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training normals.
    #[arg(long)]
    train: Option<usize>,
    /// Validation normals.
    #[arg(long)]
    val: Option<usize>,
    /// Test normals.
    #[arg(long)]
    test_normal: Option<usize>,
    /// Injected test anomalies.
    #[arg(long)]
    test_anomaly: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PipelineArgs {
    /// Directory with sequences.tsv (e.g. from `synth`), a directory with one
    /// .log file, or a log file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; defaults to <data>/run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun train and eval for each mask ratio in start:end:step and write
    /// sweep.csv.
    #[arg(long)]
    mask_ratio_sweep: Option<String>,
    #[command(flatten)]
    data_flags: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    common: Common,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::from_toml(&read(path)?)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.train.seed, common.seed);
    set(&mut cfg.threads, common.threads);
    Ok(cfg)
}

fn apply_data(cfg: &mut PipelineConfig, f: &DataFlags) -> Result<()> {
    if f.dataset.is_some() {
        cfg.dataset = f.dataset.clone();
    }
    set(&mut cfg.drain.depth, f.drain_depth);
    set(&mut cfg.drain.similarity_threshold, f.drain_similarity);
    set(&mut cfg.drain.max_children, f.drain_max_children);
    if let Some(w) = f.window_seconds {
        cfg.window = Some(WindowSpec::sliding(w, f.step_seconds.unwrap_or(w)));
    } else if f.step_seconds.is_some() {
        return Err(Error::Config(
            "--step-seconds needs --window-seconds".into(),
        ));
    }
    if f.train_count.is_some() {
        cfg.train_count = f.train_count;
    }
    if f.val_fraction.is_some() {
        cfg.val_fraction = f.val_fraction;
    }
    Ok(())
}

fn apply_model(cfg: &mut PipelineConfig, f: &ModelFlags) {
    let t = &mut cfg.train;
    if let Some(g) = f.generator {
        t.generator = match g {
            GeneratorArg::Random => GeneratorKind::Random,
            GeneratorArg::Mlm => GeneratorKind::Mlm,
        };
    }
    if let Some(r) = f.rtd {
        t.rtd = r == Switch::On;
    }
    set(&mut t.mask_ratio, f.mask_ratio);
    set(&mut t.lambda, f.lambda);
    set(&mut t.stage1_epochs, f.stage1_epochs);
    set(&mut t.stage2_epochs, f.stage2_epochs);
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.optimizer.learning_rate, f.learning_rate);
    set(&mut t.optimizer.clip_norm, f.clip_norm);
    set(&mut t.model.embed_dim, f.embed_dim);
    set(&mut t.model.n_layers, f.layers);
    set(&mut t.model.n_heads, f.heads);
    set(&mut t.model.ff_dim, f.ff_dim);
    set(&mut t.model.max_len, f.max_len);
    set(&mut t.model.dropout_rate, f.dropout);
    set(&mut cfg.quantile, f.quantile);
    set(&mut cfg.eval_batch_size, f.eval_batch_size);
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_text(
        path,
        &serde_json::to_string_pretty(value).expect("json serializes"),
    )
}

fn read_sequences(path: &Path) -> Result<Vec<EventSequence>> {
    let path = if path.is_dir() {
        path.join(SEQUENCES_FILE)
    } else {
        path.to_path_buf()
    };
    read_sequence_file(&read(&path)?, &path)
}

fn setup_threads(cfg: &PipelineConfig) {
    // Fails only if the global pool already exists, which keeps that pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global();
}

fn print_epoch(e: &EpochRecord) {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "stage {} epoch {:>3}  mlm {}  rtd {}  hst {}  ({:.1}s)",
        e.stage,
        e.epoch,
        f(e.mlm_loss),
        f(e.rtd_loss),
        f(e.hst_loss),
        e.seconds
    );
}

fn load_model(dir: &Path) -> Result<(Vocabulary, Discriminator32)> {
    let vocab = Vocabulary::from_tsv(&read(&dir.join("vocab.tsv"))?)?;
    let disc = load_checkpoint(&dir.join("discriminator.ckpt"))?
        .into_discriminator(&vocab.fingerprint())?;
    Ok((vocab, disc))
}

fn cmd_parse(a: ParseArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_data(&mut cfg, &a.data)?;
    cfg.validate()?;
    let spec = DatasetSpec::resolve(
        cfg.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("parse needs --dataset".into()))?,
    )?;
    let loaded = load_dataset(&a.input, &spec)?;
    let (parsed, tree) = parse_lines(&loaded.lines, cfg.drain, &spec.mask_patterns)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    write_text(&a.out.join("parsed.tsv"), &write_parse_file(&parsed))?;
    write_text(
        &a.out.join("templates.tsv"),
        &write_templates(tree.templates()),
    )?;
    println!(
        "{} lines, {} templates",
        parsed.len(),
        tree.templates().len()
    );
    Ok(())
}

fn cmd_group(a: GroupArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_data(&mut cfg, &a.data)?;
    cfg.validate()?;
    let spec = DatasetSpec::resolve(
        cfg.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("group needs --dataset".into()))?,
    )?;
    let input = if a.input.is_dir() {
        a.input.join("parsed.tsv")
    } else {
        a.input.clone()
    };
    let parsed = read_parse_file(&read(&input)?, &input)?;
    let labels: HashMap<String, Label> = match (&spec.labels, &a.labels) {
        (_, Some(path)) => parse_label_csv(&read(path)?, path)?,
        (LabelSource::Csv { file }, None) => {
            return Err(Error::InvalidInput(format!(
                "{} sequences need --labels ({file})",
                spec.name
            )))
        }
        (LabelSource::LineFlag { .. }, None) => HashMap::new(),
    };
    let window = cfg.window.clone().unwrap_or(spec.window.clone());
    let (seqs, rejected) = group(&parsed, &window, &labels)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    write_text(&a.out.join(SEQUENCES_FILE), &write_sequence_file(&seqs))?;
    let anomalies = seqs.iter().filter(|s| s.label.is_anomaly()).count();
    println!(
        "{} sequences ({anomalies} anomalous), {rejected} lines without identifier",
        seqs.len()
    );
    Ok(())
}

fn cmd_build_vocab(a: BuildVocabArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_data(&mut cfg, &a.data)?;
    cfg.validate()?;
    let (seqs, train_count, val_fraction) = if a.input.is_dir() {
        load_sequences(&a.input, &cfg, None)?
    } else {
        let tc = cfg.train_count.ok_or_else(|| {
            Error::Config("build-vocab on a sequence file needs --train-count".into())
        })?;
        (
            read_sequences(&a.input)?,
            tc,
            cfg.val_fraction.unwrap_or(0.1),
        )
    };
    let split = chronological_split(&seqs, train_count, val_fraction)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let vocab = Vocabulary::build(&split.train)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    write_split(&a.out, &split)?;
    write_text(&a.out.join("vocab.tsv"), &vocab.to_tsv())?;
    println!(
        "train {} / val {} / test {}; vocabulary of {} tokens",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        vocab.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_model(&mut cfg, &a.model);
    cfg.validate()?;
    let vocab = Vocabulary::from_tsv(&read(&a.data.join("vocab.tsv"))?)?;
    let train_seqs = read_sequences(&a.data.join("train.tsv"))?;
    let val_seqs = read_sequences(&a.data.join("val.tsv"))?;
    if train_seqs.iter().any(|s| s.label.is_anomaly()) {
        return Err(Error::InvalidInput(
            "train.tsv holds anomalous sequences".into(),
        ));
    }
    let max_len = cfg.train.model.max_len;
    let trained = train::<f32>(
        &encode_events(&vocab, &train_seqs, max_len),
        &encode_events(&vocab, &val_seqs, max_len),
        vocab.len(),
        &cfg.train,
        &mut print_epoch,
    )?;
    create_dir(&a.out)?;
    let hash = vocab.fingerprint();
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    write_text(&a.out.join("vocab.tsv"), &vocab.to_tsv())?;
    save_checkpoint(
        &a.out.join("discriminator.ckpt"),
        &Checkpoint::of_discriminator(&trained.discriminator, &hash),
    )?;
    if let Some(g) = &trained.generator {
        save_checkpoint(
            &a.out.join("generator.ckpt"),
            &Checkpoint::of_generator(g, &hash),
        )?;
    }
    write_text(
        &a.out.join("train_report.csv"),
        &format!("{}{}", provenance_line(&cfg), trained.report.to_csv()),
    )?;
    write_json(
        &a.out.join("train_summary.json"),
        &serde_json::json!({
            "val_normal": trained.report.val_normal,
            "val_pseudo": trained.report.val_pseudo,
            "total_seconds": trained.report.total_seconds,
            "config": cfg.to_json(),
        }),
    )?;
    println!("trained in {:.1}s", trained.report.total_seconds);
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_model(&mut cfg, &a.flags);
    cfg.validate()?;
    setup_threads(&cfg);
    let (vocab, disc) = load_model(&a.model)?;
    let seqs = read_sequences(&a.input)?;
    if seqs.iter().any(|s| s.label.is_anomaly()) {
        return Err(Error::InvalidInput(
            "calibration sequences must all be normal".into(),
        ));
    }
    let scores: Vec<f64> = score_batches(
        &disc,
        &encode_with_cls(&vocab, &seqs, disc.config.max_len),
        cfg.eval_batch_size,
    )?
    .into_iter()
    .map(|(s, _)| s)
    .collect();
    let threshold = calibrate(&scores, cfg.quantile)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("threshold.json"),
        &serde_json::json!({ "threshold": threshold, "config": cfg.to_json() }),
    )?;
    println!(
        "epsilon {} (q = {}, n = {})",
        threshold.epsilon, threshold.quantile, threshold.calibration_size
    );
    Ok(())
}

fn read_threshold(path: &Path) -> Result<Threshold> {
    let v: serde_json::Value = serde_json::from_str(&read(path)?)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    serde_json::from_value(v["threshold"].clone())
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_model(&mut cfg, &a.flags);
    cfg.validate()?;
    setup_threads(&cfg);
    let (vocab, disc) = load_model(&a.model)?;
    let threshold = read_threshold(&a.threshold)?;
    let seqs = read_sequences(&a.input)?;
    let ids: Vec<String> = seqs.iter().map(|s| s.seq_id.clone()).collect();
    let verdicts = detect(
        &ids,
        &encode_with_cls(&vocab, &seqs, disc.config.max_len),
        &disc,
        vocab.len(),
        &threshold,
        cfg.eval_batch_size,
    )?;
    create_dir(&a.out)?;
    write_text(
        &a.out.join("verdicts.csv"),
        &format!("{}{}", provenance_line(&cfg), verdicts_to_csv(&verdicts)),
    )?;
    let flagged = verdicts.iter().filter(|v| v.is_anomaly).count();
    println!("{flagged} of {} sequences flagged", verdicts.len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let verdicts = verdicts_from_csv(&read(&a.verdicts)?)?;
    let seqs = read_sequences(&a.labels)?;
    let by_id: HashMap<&str, Label> = seqs.iter().map(|s| (s.seq_id.as_str(), s.label)).collect();
    let labels: Vec<Label> = verdicts
        .iter()
        .map(|v| {
            by_id
                .get(v.seq_id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("no label for sequence {}", v.seq_id)))
        })
        .collect::<Result<_>>()?;
    let threshold = match &a.threshold {
        Some(p) => read_threshold(p)?,
        None => Threshold {
            epsilon: verdicts.first().map_or(0.0, |v| v.threshold),
            quantile: cfg.quantile,
            calibration_size: 0,
        },
    };
    let report = evaluate(
        &verdicts,
        &labels,
        threshold,
        fingerprint(&seqs),
        cfg.to_json(),
    )?;
    create_dir(&a.out)?;
    write_text(
        &a.out.join("eval_report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &fastlogad::pipeline::EvalReport) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "precision {:.4}  recall {:.4}  F1 {:.4}  AUC {}  AUPR {}",
        r.precision,
        r.recall,
        r.f1,
        opt(r.auc),
        opt(r.aupr)
    );
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    set(&mut cfg.eval_batch_size, a.batch);
    cfg.validate()?;
    let dir = a.checkpoint.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::from_tsv(&read(&dir.join("vocab.tsv"))?)?;
    let disc: Discriminator32 =
        load_checkpoint(&a.checkpoint)?.into_discriminator(&vocab.fingerprint())?;
    let seqs = match &a.input {
        Some(p) => read_sequences(p)?,
        None => gen_normal(&GrammarSpec::standard(cfg.train.seed), 1000)?,
    };
    let tokens = encode_with_cls(&vocab, &seqs, disc.config.max_len);
    let bc = BenchConfig {
        batch_size: cfg.eval_batch_size,
        repeats: a.repeats,
        threads: cfg.threads,
        mask_ratio: cfg.train.mask_ratio,
        seed: cfg.train.seed,
    };
    let mut reports = vec![bench(&tokens, &disc, None, &bc)?];
    if let Some(g) = &a.with_generator {
        let gen: Generator32 = load_checkpoint(g)?.into_generator(&vocab.fingerprint())?;
        reports.push(bench(&tokens, &disc, Some(&gen), &bc)?);
    }
    for r in &reports {
        print!("{}", r.to_text());
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut csv = format!("{}{}\n", provenance_line(&cfg), BenchReport::csv_header());
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        write_text(&out.join("bench.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let grammar = GrammarSpec::standard(cfg.train.seed);
    let mut layout = CorpusLayout::default();
    set(&mut layout.train, a.train);
    set(&mut layout.val, a.val);
    set(&mut layout.test_normal, a.test_normal);
    set(&mut layout.test_anomaly, a.test_anomaly);
    let corpus = benchmark_corpus(&grammar, &layout)?;
    create_dir(&a.out)?;
    write_text(&a.out.join(SEQUENCES_FILE), &write_sequence_file(&corpus))?;
    let manifest = SynthManifest { grammar, layout };
    write_text(
        &a.out.join(SYNTH_MANIFEST),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    println!(
        "{} sequences written to {}",
        corpus.len(),
        a.out.join(SEQUENCES_FILE).display()
    );
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_data(&mut cfg, &a.data_flags)?;
    apply_model(&mut cfg, &a.model);
    cfg.validate()?;
    setup_threads(&cfg);
    let out = a.out.clone().unwrap_or_else(|| a.data.join("run"));
    match &a.mask_ratio_sweep {
        None => {
            let report = run_pipeline::<f32>(&a.data, &out, &cfg, &mut print_epoch)?;
            print_report(&report);
            println!(
                "report written to {}",
                out.join("eval_report.json").display()
            );
        }
        Some(spec) => {
            let ratios = parse_sweep(spec)?;
            if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::Config(format!("sweep {spec:?} leaves [0, 1]")));
            }
            create_dir(&out)?;
            let (seqs, train_count, val_fraction) = load_sequences(&a.data, &cfg, Some(&out))?;
            let split = chronological_split(&seqs, train_count, val_fraction)?;
            write_split(&out, &split)?;
            let mut csv = format!("{}mask_ratio,f1,auc,aupr\n", provenance_line(&cfg));
            for r in ratios {
                let mut c = cfg.clone();
                c.train.mask_ratio = r;
                let run = train_and_evaluate::<f32>(&split, &c, &mut print_epoch)?;
                let sub = out.join(format!("ratio_{r:.2}"));
                create_dir(&sub)?;
                write_text(&sub.join("config.toml"), &c.to_toml())?;
                write_run_artifacts(&sub, &c, &run)?;
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
                csv.push_str(&format!(
                    "{r},{:.6},{},{}\n",
                    run.report.f1,
                    opt(run.report.auc),
                    opt(run.report.aupr)
                ));
                println!("mask ratio {r:.2}: F1 {:.4}", run.report.f1);
            }
            write_text(&out.join("sweep.csv"), &csv)?;
            println!("sweep written to {}", out.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Parse(a) => cmd_parse(a),
        Command::Group(a) => cmd_group(a),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!(
                "error[{}]: {}",
                cat.as_str(),
                e.to_string().replace('\n', " ")
            );
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn help_lists_every_flag() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands_mut() {
            let help = sub.render_long_help().to_string();
            for arg in sub.get_arguments() {
                if let Some(long) = arg.get_long() {
                    assert!(
                        help.contains(&format!("--{long}")),
                        "{} help misses --{long}",
                        sub.get_name()
                    );
                }
            }
        }
    }

    #[test]
    fn every_model_flag_has_a_config_key() {
        let flags = ModelFlags {
            generator: Some(GeneratorArg::Random),
            rtd: Some(Switch::Off),
            mask_ratio: Some(0.3),
            lambda: Some(2.0),
            stage1_epochs: Some(3),
            stage2_epochs: Some(4),
            batch_size: Some(5),
            learning_rate: Some(0.01),
            clip_norm: Some(0.5),
            embed_dim: Some(16),
            layers: Some(1),
            heads: Some(2),
            ff_dim: Some(8),
            max_len: Some(9),
            dropout: Some(0.0),
            quantile: Some(0.9),
            eval_batch_size: Some(7),
        };
        let mut cfg = PipelineConfig::default();
        apply_model(&mut cfg, &flags);
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.generator, GeneratorKind::Random);
        assert!(!back.train.rtd);
        assert_eq!(back.train.model.n_layers, 1);
        assert_eq!(back.eval_batch_size, 7);
    }

    #[test]
    fn step_without_window_is_a_usage_error() {
        let flags = DataFlags {
            step_seconds: Some(3),
            ..Default::default()
        };
        let err = apply_data(&mut PipelineConfig::default(), &flags).unwrap_err();
        assert_eq!(err.category().exit_code(), 2);
    }
}
