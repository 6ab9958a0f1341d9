use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use avasr_core::checkpoint::Checkpoint;
use avasr_core::config::parse_kv;
use avasr_core::data::{
    chunk_records, filter_long, load_manifest, load_utterances, save_split, stack_utterance, LoadOptions, Utterance,
};
use avasr_core::decode::{decode_utterance, evaluate, BeamConfig, DecodeOptions, EvalMode, LengthNorm};
use avasr_core::model::ModelConfig;
use avasr_core::selfcheck::{self, SelfCheckOptions};
use avasr_core::synth::{generate, write_corpus, SynthConfig};
use avasr_core::tokenizer::{normalize_text, BpeModel, CharVocab, Resolution, Tokenizers};
use avasr_core::train::{TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};

const CHAR_VOCAB_FILE: &str = "chars.vocab";
const BPE_FILE: &str = "subwords.bpe";
const RESOLVED_FILE: &str = "config.resolved";

/// Audio-visual speech recognition: tokenizers, preprocessing, training,
/// decoding and evaluation.
#[derive(Parser)]
#[command(name = "avasr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the character vocabulary and BPE merges from transcripts.
    TokenizeTrain(TokenizeArgs),
    /// Filter, chunk or stack a manifest's utterances.
    Prep(PrepArgs),
    /// Train a model; writes checkpoints and metrics under --out.
    Train(TrainArgs),
    /// Beam-decode a manifest with a checkpoint.
    Decode(DecodeArgs),
    /// Decode and score a manifest; writes a report under --out.
    Eval(EvalArgs),
    /// Run the gradient and oracle suites.
    Selfcheck(SelfcheckArgs),
    /// Generate the synthetic toy corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TokenizeArgs {
    /// Manifest whose transcripts are the training text.
    #[arg(long, conflicts_with = "text", required_unless_present = "text")]
    manifest: Option<PathBuf>,
    /// Plain text, one transcript per line.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Subword vocabulary size, specials included.
    #[arg(long, default_value_t = 1200)]
    subword_vocab: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Filter,
    Chunk,
    Stack,
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    strategy: Strategy,
    /// Longest utterance kept by `filter`, in seconds.
    #[arg(long, default_value_t = 15.0)]
    max_seconds: f64,
    /// Frames per row for `stack`.
    #[arg(long, default_value_t = 4)]
    stack: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Directory from `tokenize-train`; without it, tokenizers are learned
    /// from the training transcripts.
    #[arg(long)]
    tokenizers: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint, appending to the metrics log.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Any config key, e.g. `--set d_model=256`; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    no_fusion: bool,
    /// Drop invalid manifest lines instead of failing.
    #[arg(long)]
    skip_invalid: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResolutionArg {
    Char,
    Subword,
}

impl From<ResolutionArg> for Resolution {
    fn from(r: ResolutionArg) -> Self {
        match r {
            ResolutionArg::Char => Resolution::Character,
            ResolutionArg::Subword => Resolution::Subword,
        }
    }
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// full, audio_only_zeros, audio_only_gaussian[:sigma] or audio_only_gate.
    #[arg(long, default_value = "full")]
    mode: String,
    /// Evaluate the audio-only path of the same weights.
    #[arg(long)]
    no_fusion: bool,
    #[arg(long, value_enum, default_value = "subword")]
    resolution: ResolutionArg,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Length-normalisation exponent.
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    /// Maximum generated tokens per utterance.
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    /// Seeds the Gaussian missing-video mode.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    flags: DecodeFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: DecodeFlags,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 20)]
    gradient_seeds: u64,
    #[arg(long, default_value_t = 50)]
    beam_models: u64,
    #[arg(long, default_value_t = 1000)]
    wer_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    train: usize,
    #[arg(long, default_value_t = 10)]
    dev: usize,
    #[arg(long, default_value_t = 10)]
    test: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::TokenizeTrain(a) => tokenize_train(a),
        Command::Prep(a) => prep(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a.flags),
        Command::Eval(a) => eval(a.flags),
        Command::Selfcheck(a) => run_selfcheck(a),
        Command::Synth(a) => synth(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_resolved(dir: &Path, command: &str, body: &str) -> Result<()> {
    let path = dir.join(RESOLVED_FILE);
    fs::write(&path, format!("# avasr {command}\n{body}")).with_context(|| format!("cannot write {}", path.display()))
}

fn load(manifest: &Path, skip_invalid: bool) -> Result<Vec<Utterance>> {
    let records = load_manifest(manifest, LoadOptions { skip_invalid })?;
    load_utterances(&records).with_context(|| format!("loading features listed in {}", manifest.display()))
}

fn tokenize_train(a: TokenizeArgs) -> Result<ExitCode> {
    let lines: Vec<String> = match (&a.manifest, &a.text) {
        (Some(m), _) => load_manifest(m, LoadOptions::default())?
            .into_iter()
            .map(|r| normalize_text(&r.transcript))
            .collect(),
        (None, Some(t)) => fs::read_to_string(t)
            .with_context(|| format!("cannot read {}", t.display()))?
            .lines()
            .map(normalize_text)
            .filter(|l| !l.is_empty())
            .collect(),
        (None, None) => bail!("either --manifest or --text is required"),
    };
    let tok = Tokenizers::train(&lines, a.subword_vocab)?;
    create_dir(&a.out)?;
    fs::write(a.out.join(CHAR_VOCAB_FILE), tok.chars.to_file_string())?;
    fs::write(a.out.join(BPE_FILE), tok.subwords.to_file_string())?;
    let source = a.manifest.as_ref().or(a.text.as_ref()).expect("one source");
    write_resolved(
        &a.out,
        "tokenize-train",
        &format!("source = {}\nsubword_vocab_size = {}\n", source.display(), a.subword_vocab),
    )?;
    log::info!(
        "{} transcripts: {} character ids, {} subword ids, {} merges",
        lines.len(),
        tok.chars.len(),
        tok.subwords.len(),
        tok.subwords.merges().len()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_tokenizers(dir: &Path) -> Result<Tokenizers> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p)
            .with_context(|| format!("cannot read {}", p.display()))
            .map(|t| (t, p.display().to_string()))
    };
    let (chars, cp) = read(CHAR_VOCAB_FILE)?;
    let (bpe, bp) = read(BPE_FILE)?;
    Ok(Tokenizers {
        chars: CharVocab::from_file_string(&chars, &cp)?,
        subwords: BpeModel::from_file_string(&bpe, &bp)?,
    })
}

fn prep(a: PrepArgs) -> Result<ExitCode> {
    let utts = load(&a.manifest, false)?;
    let n_in = utts.len();
    let (out, detail) = match a.strategy {
        Strategy::Filter => {
            let (kept, r) = filter_long(&utts, a.max_seconds);
            let detail = format!(
                "max_seconds = {}\n# kept {}/{} utterances, {:.2}% of audio time\n",
                a.max_seconds,
                r.kept,
                r.total,
                100.0 * r.retained_fraction()
            );
            (kept, detail)
        }
        Strategy::Chunk => (chunk_records(&utts)?, String::new()),
        Strategy::Stack => (
            utts.iter().map(|u| stack_utterance(u, a.stack)).collect::<avasr_core::Result<Vec<_>>>()?,
            format!("stack = {}\n", a.stack),
        ),
    };
    create_dir(&a.out)?;
    let manifest = save_split(&out, &a.out, "manifest.tsv")?;
    let strategy = match a.strategy {
        Strategy::Filter => "filter",
        Strategy::Chunk => "chunk",
        Strategy::Stack => "stack",
    };
    write_resolved(
        &a.out,
        "prep",
        &format!("manifest = {}\nstrategy = {strategy}\n{detail}", a.manifest.display()),
    )?;
    log::info!("{strategy}: {n_in} utterances in, {} out, manifest {}", out.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

/// Applies `key=value` to whichever config owns the key.
fn apply(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    if !model.set(key, value)? && !train.set(key, value)? {
        bail!("unknown config key '{key}'");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut model = ModelConfig::default();
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        for (k, v) in parse_kv(&text, &path.display().to_string())? {
            apply(&mut model, &mut cfg, &k, &v).with_context(|| path.display().to_string())?;
        }
    }
    for o in &a.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{o}'");
        };
        apply(&mut model, &mut cfg, k.trim(), v.trim())?;
    }
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = a.max_steps {
        cfg.max_steps = s;
    }
    if a.no_fusion {
        model.fusion_enabled = false;
    }

    let train_utts = load(&a.train, a.skip_invalid)?;
    let dev_utts = load(&a.dev, a.skip_invalid)?;
    if a.resume.is_none() && a.out.join("metrics.tsv").exists() {
        bail!("{} already holds a run; pass --resume to continue it", a.out.display());
    }
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let ckpt = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let mut t = Trainer::from_checkpoint(ckpt)?;
            // Stopping limits may be raised on resume; everything else comes
            // from the checkpoint.
            t.config.max_epochs = cfg.max_epochs;
            t.config.max_steps = cfg.max_steps;
            t.config.patience = cfg.patience;
            t
        }
        None => {
            let tok = match &a.tokenizers {
                Some(dir) => load_tokenizers(dir)?,
                None => {
                    let lines: Vec<String> = train_utts.iter().map(|u| u.transcript.clone()).collect();
                    Tokenizers::train(&lines, model.subword_vocab_size)?
                }
            };
            Trainer::new(model, cfg, tok)?
        }
    };
    create_dir(&a.out)?;
    let mut echo = String::new();
    let _ = writeln!(echo, "train_manifest = {}", a.train.display());
    let _ = writeln!(echo, "dev_manifest = {}", a.dev.display());
    if let Some(r) = &a.resume {
        let _ = writeln!(echo, "resume = {}", r.display());
    }
    echo.push_str(&trainer.model.config.to_kv());
    echo.push_str(&trainer.config.to_kv());
    write_resolved(&a.out, "train", &echo)?;
    fs::write(a.out.join(CHAR_VOCAB_FILE), trainer.tokenizers.chars.to_file_string())?;
    fs::write(a.out.join(BPE_FILE), trainer.tokenizers.subwords.to_file_string())?;
    log::info!(
        "seed {}; {} parameters; {} train / {} dev utterances",
        trainer.config.seed,
        trainer.model.num_params(),
        train_utts.len(),
        dev_utts.len()
    );
    let report = trainer.fit(&train_utts, &dev_utts, Some(&a.out))?;
    log::info!(
        "stopped ({:?}) after {} epochs; best epoch {} with dev loss {:.4}",
        report.stop,
        trainer.progress.epoch,
        report.best_epoch,
        report.best_dev_loss
    );
    Ok(ExitCode::SUCCESS)
}

fn decode_options(f: &DecodeFlags) -> Result<(EvalMode, DecodeOptions)> {
    let mode: EvalMode = f.mode.parse()?;
    let opts = DecodeOptions {
        beam: BeamConfig {
            beam: f.beam,
            norm: LengthNorm::Power(f.lambda),
            max_len: f.max_len,
            ..BeamConfig::default()
        },
        resolution: f.resolution.into(),
        seed: f.seed,
    };
    Ok((mode, opts))
}

fn decode_echo(f: &DecodeFlags, mode: EvalMode, opts: &DecodeOptions) -> String {
    format!(
        "checkpoint = {}\nmanifest = {}\nmode = {mode}\nfusion = {}\nresolution = {}\nbeam = {}\nlambda = {}\nmax_len = {}\nseed = {}\n",
        f.checkpoint.display(),
        f.manifest.display(),
        if f.no_fusion { "off" } else { "on" },
        opts.resolution,
        opts.beam.beam,
        f.lambda,
        opts.beam.max_len,
        opts.seed
    )
}

fn load_model(f: &DecodeFlags) -> Result<(avasr_core::model::AvAsrModel, Tokenizers)> {
    let ckpt = Checkpoint::load(&f.checkpoint).with_context(|| format!("loading {}", f.checkpoint.display()))?;
    let (mut model, tok) = ckpt.model_and_tokenizers()?;
    if f.no_fusion {
        model.config.fusion_enabled = false;
    }
    Ok((model, tok))
}

fn decode(f: DecodeFlags) -> Result<ExitCode> {
    let (mode, opts) = decode_options(&f)?;
    let (model, tok) = load_model(&f)?;
    let utts = load(&f.manifest, false)?;
    create_dir(&f.out)?;
    write_resolved(&f.out, "decode", &decode_echo(&f, mode, &opts))?;
    let mut out = String::new();
    let mut failed = 0;
    for u in &utts {
        match decode_utterance(&model, &tok, u, mode, &opts) {
            Ok((_, unfinished, text)) => {
                if unfinished {
                    log::warn!("{}: no end of sentence within {} tokens", u.id, opts.beam.max_len);
                }
                let _ = writeln!(out, "{}\t{text}", u.id);
            }
            Err(e) => {
                failed += 1;
                log::error!("{}: {e}", u.id);
            }
        }
    }
    let path = f.out.join("hypotheses.tsv");
    fs::write(&path, out).with_context(|| format!("cannot write {}", path.display()))?;
    log::info!("decoded {} utterances into {}", utts.len() - failed, path.display());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn eval(f: DecodeFlags) -> Result<ExitCode> {
    let (mode, opts) = decode_options(&f)?;
    let (model, tok) = load_model(&f)?;
    let utts = load(&f.manifest, false)?;
    create_dir(&f.out)?;
    write_resolved(&f.out, "eval", &decode_echo(&f, mode, &opts))?;
    let report = evaluate(&model, &tok, &utts, mode, &opts);
    fs::write(f.out.join("report.tsv"), report.to_tsv())?;
    let table = report.to_table();
    fs::write(f.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(if report.failed() == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let checks = selfcheck::run(&SelfCheckOptions {
        gradient_seeds: a.gradient_seeds,
        beam_models: a.beam_models,
        wer_pairs: a.wer_pairs,
        seed: a.seed,
    });
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        seed: a.seed,
        train: a.train,
        dev: a.dev,
        test: a.test,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg);
    create_dir(&a.out)?;
    write_corpus(&corpus, &a.out)?;
    write_resolved(
        &a.out,
        "synth",
        &format!(
            "seed = {}\ntrain = {}\ndev = {}\ntest = {}\nfeature_dim = {}\nvideo_dim = {}\n",
            cfg.seed, cfg.train, cfg.dev, cfg.test, cfg.feature_dim, cfg.video_dim
        ),
    )?;
    log::info!("seed {}: wrote {} utterances to {}", cfg.seed, a.train + a.dev + a.test, a.out.display());
    Ok(ExitCode::SUCCESS)
}
