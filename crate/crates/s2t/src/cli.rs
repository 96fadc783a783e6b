//! Command-line entry points.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use s2t_core::audio::{extract_features, FEATURE_DIM};
use s2t_core::bleu::bleu_multi_reference;
use s2t_core::lm::train_trigram_with;
use s2t_core::text::tokenize;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_override, parse_pairs, RunConfig};
use crate::data::{read_tokenized, SourceFile};
use crate::error::{exit_code, UsageError};
use crate::features::write_archive;
use crate::lmfile::{read_lm, write_lm};
use crate::train::Trainer;
use crate::translate::{dump_attention, DecodeOptions, Ensemble};
use crate::wav::load_pcm_wav;

/// Attention-based encoder-decoder translation of text and speech.
///
/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
#[derive(Parser, Debug)]
#[command(name = "s2t", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model, writing checkpoints and a tab-separated log.
    Train(TrainArgs),
    /// Translate a text file or feature archive, one output line per input.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against one or more reference files.
    Evaluate(EvaluateArgs),
    /// Train a trigram language model over a checkpoint's target vocabulary.
    LmTrain(LmTrainArgs),
    /// Write the attention matrix of one input as tab-separated values.
    DumpAttention(DumpArgs),
    /// Compute MFCC features for every .wav file of a directory.
    ExtractFeatures(ExtractArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; applied after the file and other flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// text or speech.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub train_source: Option<PathBuf>,
    #[arg(long)]
    pub train_target: Option<PathBuf>,
    #[arg(long)]
    pub dev_source: Option<PathBuf>,
    #[arg(long)]
    pub dev_target: Option<PathBuf>,
    /// Directory for checkpoints and the log.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Total number of training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Evaluate on dev and checkpoint every this many steps.
    #[arg(long)]
    pub save_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint; its configuration is the base.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Model checkpoint; repeat for an equally weighted ensemble.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Text file (one sentence per line) or feature archive.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Beam width; 1 is greedy decoding.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub beam_size: u64,
    /// Trigram language model file for shallow fusion.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Weight of the language model score.
    #[arg(long, default_value_t = 0.2)]
    pub lm_weight: f64,
    /// Maximum output length; defaults to twice the encoded length plus 10.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Rank finished hypotheses by per-token score.
    #[arg(long)]
    pub length_normalize: bool,
    /// Apply the language model only to the final beam.
    #[arg(long)]
    pub rescore_only: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference file; repeat for multiple references.
    #[arg(long = "ref", required = true)]
    pub refs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LmTrainArgs {
    /// Target-language text, one sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint whose target vocabulary the model is built over.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Unigram, bigram and trigram interpolation weights.
    #[arg(long, default_value = "0.1,0.3,0.6")]
    pub lambdas: String,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text file or feature archive holding the item.
    #[arg(long)]
    pub input: PathBuf,
    /// Zero-based item index.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Reference translation; when given, attention is teacher-forced on it.
    #[arg(long)]
    pub reference: Option<String>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub wav_dir: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a, &mut io::stdout()),
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a, &mut io::stdout()),
        Command::LmTrain(a) => cmd_lm_train(&a),
        Command::DumpAttention(a) => cmd_dump_attention(&a),
        Command::ExtractFeatures(a) => cmd_extract_features(&a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Resolves the run configuration: checkpoint or defaults, then the file,
/// then individual flags, then `--set` overrides.
pub fn resolve_config(args: &TrainArgs, base: Option<&RunConfig>) -> Result<RunConfig> {
    let mut pairs = match base {
        Some(cfg) => parse_pairs(&cfg.to_text()).map_err(usage)?,
        None => Vec::new(),
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        pairs.extend(parse_pairs(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?);
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("task", args.task.clone()),
        ("train_source", path(&args.train_source)),
        ("train_target", path(&args.train_target)),
        ("dev_source", path(&args.dev_source)),
        ("dev_target", path(&args.dev_target)),
        ("output_dir", path(&args.output_dir)),
        ("steps", args.steps.map(|v| v.to_string())),
        ("save_every", args.save_every.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
    ];
    pairs.extend(
        flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
    );
    for o in &args.overrides {
        pairs.push(parse_override(o).map_err(usage)?);
    }
    RunConfig::from_pairs(&pairs).map_err(usage)
}

/// Writes to both sinks.
struct Tee<'a> {
    a: &'a mut dyn Write,
    b: File,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.a.write_all(buf)?;
        self.b.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.a.flush()?;
        self.b.flush()
    }
}

/// Trains per the resolved configuration; log lines go to `out` and to
/// `train.log` in the output directory.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let cfg = resolve_config(args, Some(&ckpt.config))?;
            Trainer::resume(ckpt, cfg)?
        }
        None => Trainer::new(resolve_config(args, None)?)?,
    };
    let dir = trainer.config.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let log_path = dir.join("train.log");
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = Tee { a: out, b: file };
    let start = trainer.step();
    let result = trainer.run(&mut log);
    if let Err(e) = &result {
        if exit_code(e) == 3 {
            eprintln!("training diverged; last checkpoint in {} is kept", dir.display());
        }
    }
    let outcome = result?;
    if outcome.last_step == start {
        eprintln!("nothing to do: already at step {start}");
    }
    Ok(())
}

pub fn decode_options(args: &TranslateArgs) -> Result<DecodeOptions> {
    let lm = match &args.lm {
        Some(p) => Some(read_lm(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    if !args.lm_weight.is_finite() || args.lm_weight < 0.0 {
        return Err(usage("--lm-weight must be a non-negative number"));
    }
    Ok(DecodeOptions {
        beam_size: args.beam_size as usize,
        lm,
        lm_weight: args.lm_weight,
        max_len: args.max_len,
        length_normalize: args.length_normalize,
        rescore_only: args.rescore_only,
    })
}

pub fn translate_lines(args: &TranslateArgs) -> Result<Vec<String>> {
    let opts = decode_options(args)?;
    let checkpoints = args
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let ensemble = Ensemble::new(checkpoints)?;
    let input = SourceFile::read(&args.input)?;
    let sources = ensemble.sources(&input)?;
    ensemble.decode_all(&sources, &opts)
}

pub fn cmd_translate(args: &TranslateArgs) -> Result<()> {
    let lines = translate_lines(args)?;
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    write_output(args.output.as_deref(), &text)
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let hyps = read_tokenized(&args.hyp)?;
    let mut refs: Vec<Vec<Vec<String>>> = vec![Vec::new(); hyps.len()];
    for path in &args.refs {
        let lines = read_tokenized(path)?;
        if lines.len() != hyps.len() {
            bail!(
                "{} has {} lines, the hypothesis file has {}",
                path.display(),
                lines.len(),
                hyps.len()
            );
        }
        for (set, line) in refs.iter_mut().zip(lines) {
            set.push(line);
        }
    }
    let report = bleu_multi_reference(&hyps, &refs, 4)?;
    let precisions: Vec<String> = report
        .precisions
        .iter()
        .map(|p| format!("{:.1}", 100.0 * p))
        .collect();
    writeln!(
        out,
        "BLEU = {:.2}, {} (BP = {:.3}, ratio = {:.3}, hyp_len = {}, ref_len = {})",
        report.score,
        precisions.join("/"),
        report.brevity_penalty,
        report.length_ratio(),
        report.hyp_len,
        report.ref_len
    )?;
    Ok(())
}

pub fn cmd_lm_train(args: &LmTrainArgs) -> Result<()> {
    let lambdas: Vec<f64> = args
        .lambdas
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| usage("--lambdas needs three comma-separated numbers"))?;
    let lambdas: [f64; 3] = lambdas
        .try_into()
        .map_err(|_| usage("--lambdas needs three comma-separated numbers"))?;
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let corpus: Vec<Vec<u32>> = read_tokenized(&args.corpus)?
        .iter()
        .map(|s| ckpt.target_vocab.encode(s))
        .collect();
    let lm = train_trigram_with(&corpus, ckpt.target_vocab.len(), lambdas).map_err(|e| match e {
        s2t_core::Error::InvalidConfig(m) => usage(m),
        e => anyhow::Error::from(e).context(format!("training on {}", args.corpus.display())),
    })?;
    write_lm(&args.output, &lm).with_context(|| format!("writing {}", args.output.display()))
}

pub fn cmd_dump_attention(args: &DumpArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let input = SourceFile::read(&args.input)?;
    let reference = args.reference.as_deref().map(tokenize);
    let dump = dump_attention(&ckpt, &input, args.index, reference.as_deref())?;
    write_output(args.output.as_deref(), &dump.to_tsv())
}

pub fn cmd_extract_features(args: &ExtractArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.wav_dir)
        .with_context(|| format!("reading {}", args.wav_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")));
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in &paths {
        let audio = load_pcm_wav(path).with_context(|| format!("reading {}", path.display()))?;
        let features = extract_features(&audio).with_context(|| format!("features of {}", path.display()))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        records.push((id, features));
    }
    write_archive(&args.output, FEATURE_DIM, &records)
        .with_context(|| format!("writing {}", args.output.display()))
}
