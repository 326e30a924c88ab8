use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protomix::config::Config;
use protomix::data::{
    check_disjoint, generate_synthetic_corpus, load_manifest, sample_batch, write_corpus, BatchSpec, Corpus,
    FeatureExtractor, Split,
};
use protomix::evaluation::{evaluate, run_experiment, write_report_csv};
use protomix::losses::LossKind;
use protomix::model::{
    gradient_check, init_params, prepare_batch, read_checkpoint, train, write_checkpoint, Checkpoint,
    EncoderConfig, EncoderParams, TrainConfig,
};
use protomix::rng::{stream, Stream};
use protomix::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "protomix", version, about = "Prototypical speaker embeddings with contrastive mixup")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic train/eval corpus as WAV files with manifests.
    GenerateData,
    /// Trains an encoder and writes a checkpoint plus a loss trace.
    Train,
    /// Scores the eval trial list with a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Runs the arm x sweep x seed grid and writes the report CSV.
    Experiment,
    /// Compares analytic and finite-difference gradients for every loss.
    GradCheck,
    /// Prints the resolved configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::parse(&std::fs::read_to_string(path)?)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for assignment in &cli.set {
        cfg.apply_override(assignment)?;
    }
    Ok(cfg)
}

fn load_split(cfg: &Config, key: &str, split: Split) -> Result<Corpus> {
    let load = load_manifest(
        Path::new(cfg.raw(key)),
        split,
        cfg.get("train.m")?,
        Some(cfg.get("data.sample_rate")?),
    )?;
    for warning in &load.summary.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(load.corpus)
}

/// Manifest corpora when both manifests are configured, otherwise the
/// synthetic corpus for `seed`.
fn corpora(cfg: &Config) -> Result<(Corpus, Corpus)> {
    let (train_manifest, eval_manifest) = (cfg.raw("data.train_manifest"), cfg.raw("data.eval_manifest"));
    let (train, eval) = match (train_manifest.is_empty(), eval_manifest.is_empty()) {
        (true, true) => {
            let synth = generate_synthetic_corpus(&cfg.synth()?, &mut stream(cfg.seed()?, Stream::Corpus))?;
            (synth.train, synth.eval)
        }
        (false, false) => (
            load_split(cfg, "data.train_manifest", Split::Train)?,
            load_split(cfg, "data.eval_manifest", Split::Eval)?,
        ),
        _ => return Err(Error::Config("set both data.train_manifest and data.eval_manifest or neither".into())),
    };
    check_disjoint(&train, &eval)?;
    Ok((train, eval))
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out".into()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn generate_data(cli: &Cli, cfg: &Config) -> Result<()> {
    let dir = required_out(cli)?;
    let synth = generate_synthetic_corpus(&cfg.synth()?, &mut stream(cfg.seed()?, Stream::Corpus))?;
    for corpus in [&synth.train, &synth.eval] {
        let manifest = write_corpus(dir, corpus)?;
        println!(
            "{}: {} utterances from {} speakers",
            manifest.display(),
            corpus.len(),
            corpus.speaker_count()
        );
    }
    Ok(())
}

fn run_train(cli: &Cli, cfg: &Config) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let (train_corpus, _) = corpora(cfg)?;
    let outcome = train(&train_corpus, &cfg.encoder()?, &cfg.train()?)?;
    write_checkpoint(
        &out,
        &Checkpoint {
            config_text: cfg.render(),
            values: outcome.params.values().to_vec(),
        },
    )?;
    let trace_path = out.with_extension("loss.csv");
    let mut trace = BufWriter::new(File::create(&trace_path)?);
    writeln!(trace, "epoch,learning_rate,mean_loss")?;
    for (e, (lr, loss)) in outcome.learning_rates.iter().zip(&outcome.loss_trace).enumerate() {
        writeln!(trace, "{e},{lr},{loss}")?;
    }
    trace.flush()?;
    if let Some(last) = outcome.loss_trace.last() {
        println!("final mean loss {last:.6}");
    }
    println!("checkpoint {}", out.display());
    println!("loss trace {}", trace_path.display());
    Ok(())
}

fn run_evaluate(cli: &Cli, cfg: &Config, checkpoint: &Path) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let encoder = Config::parse(&ck.config_text)?.encoder()?;
    let params = EncoderParams::from_values(encoder, ck.values)?;
    let (_, eval_corpus) = corpora(cfg)?;
    let result = evaluate(&params, &eval_corpus, &cfg.eval()?)?;
    if let Some(path) = &cli.out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "enroll,test,is_target,score")?;
        for (t, s) in result.trials.iter().zip(&result.scores.scores) {
            writeln!(w, "{},{},{},{}", t.enroll, t.test, t.is_target, s)?;
        }
        w.flush()?;
    }
    println!("trials {}", result.trials.len());
    println!("eer_percent {:.4}", result.rates.eer * 100.0);
    println!("threshold {}", result.rates.threshold);
    Ok(())
}

fn run_experiment_cmd(cli: &Cli, cfg: &Config) -> Result<()> {
    let (train_corpus, eval_corpus) = corpora(cfg)?;
    let report = run_experiment(&train_corpus, &eval_corpus, &cfg.experiment()?)?;
    let mut w = output(cli.out.as_deref())?;
    write_report_csv(&report, &mut w)?;
    w.flush()?;
    let failed: usize = report.summaries.iter().map(|s| s.failed_seeds).sum();
    if failed > 0 {
        eprintln!("warning: {failed} cell(s) failed; see the note column");
    }
    Ok(())
}

/// Small encoder on short segments so that every parameter can be probed.
fn run_grad_check(cfg: &Config) -> Result<()> {
    let seed = cfg.seed()?;
    let base = cfg.encoder()?;
    let encoder = EncoderConfig {
        hidden_dims: vec![8],
        embedding_dim: 4,
        ..base
    };
    let mut synth = cfg.synth()?;
    synth.n_speakers = 3;
    synth.eval_speakers = 2;
    synth.utterances_per_speaker = 2;
    synth.utterance_seconds = 0.2;
    synth.segment_seconds = 0.1;
    let corpus = generate_synthetic_corpus(&synth, &mut stream(seed, Stream::Corpus))?.train;
    let train_cfg = TrainConfig {
        mixup: protomix::mixup::MixupConfig {
            enabled: true,
            ..cfg.train()?.mixup
        },
        segment_seconds: 0.1,
        features: cfg.features()?,
        ..TrainConfig::default()
    };
    let spec = BatchSpec {
        speakers_per_batch: 3,
        utterances_per_speaker: 2,
        segment_seconds: 0.1,
    };
    let batch = sample_batch(&corpus, &spec, &mut stream(seed, Stream::Batches))?;
    let extractor = FeatureExtractor::new(train_cfg.features)?;
    let prepared = prepare_batch(
        &batch,
        &train_cfg,
        &extractor,
        &mut stream(seed, Stream::Augment),
        &mut stream(seed, Stream::Mixup),
    )?;
    let params = init_params(&encoder, &mut stream(seed, Stream::Init))?;
    let mut failed = false;
    for kind in [LossKind::Ap, LossKind::CeMixup, LossKind::ContrastiveMixup] {
        let ratio = gradient_check(&params, &prepared, kind, 1e-4, 1e-7)?;
        let verdict = if ratio <= 1.0 { "ok" } else { "FAIL" };
        println!("{:<18} {} params  mismatch/tolerance {ratio:.3e}  {verdict}", kind.to_string(), params.values().len());
        failed |= ratio > 1.0;
    }
    if failed {
        return Err(Error::Numeric("analytic gradient disagrees with finite differences".into()));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenerateData => generate_data(cli, &cfg),
        Command::Train => run_train(cli, &cfg),
        Command::Evaluate { checkpoint } => run_evaluate(cli, &cfg, checkpoint),
        Command::Experiment => run_experiment_cmd(cli, &cfg),
        Command::GradCheck => run_grad_check(&cfg),
        Command::ShowConfig => {
            let mut w = output(cli.out.as_deref())?;
            w.write_all(cfg.render().as_bytes())?;
            Ok(w.flush()?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
