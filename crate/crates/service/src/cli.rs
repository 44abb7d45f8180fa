//! Command-line interface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clsm_core::checkpoint::ModelKind;
use clsm_core::TargetSpan;

use crate::commands;
use crate::served::parse_kind;

#[derive(Debug, Parser)]
#[command(name = "clsm", version, about = "Contextual latent space model for melody infilling, interpolation and variation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and inspect window corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Fill a span of context windows from a checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Ingest MIDI (`.mid`, `.midi`) and token text (`.txt`) files.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic scale and arpeggio corpus.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-split counts and token histogram of a corpus.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainKind {
    Clsm,
    Vae,
    Lm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub kind: TrainKind,
    /// Corpus directory or manifest file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// TOML settings; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the small synthetic-corpus settings instead of the defaults.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Use at most this many training and validation windows.
    #[arg(long)]
    pub max_windows: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub params: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Independent draws from the prior.
    Sample,
    /// A path between two prior draws.
    Interpolate,
    /// Perturbations of the encoded window.
    Vary,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Token text with one context window per line.
    #[arg(long)]
    pub context: PathBuf,
    /// Target positions as `start:end`.
    #[arg(long, value_parser = parse_span)]
    pub span: TargetSpan,
    #[arg(long, value_enum, default_value_t = Mode::Sample)]
    pub mode: Mode,
    #[arg(long = "J", alias = "j", default_value_t = 8)]
    pub j: usize,
    /// Sequences per context for `sample` and `vary`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Sample tokens at this temperature instead of taking the argmax.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail unless the checkpoint holds this kind of model.
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory or manifest; the synthetic corpus when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate at most this many windows.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file of line-delimited records; defaults to `<checkpoint>.<metric>.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Interpolation edit-distance ratio for each J.
    Iedr {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long = "J", alias = "j", value_delimiter = ',', default_values_t = [2, 4, 8])]
        j: Vec<usize>,
    },
    /// Language-model NLL of windows filled from the prior.
    Nll {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long)]
        lm: PathBuf,
    },
    /// Left-contextual reconstruction accuracy.
    Recon {
        #[command(flatten)]
        common: EvalCommon,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "CLSM_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Idle seconds before a session expires.
    #[arg(long, default_value_t = 3600)]
    pub ttl_secs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `start:end` on the default bar grid.
pub fn parse_span(s: &str) -> Result<TargetSpan, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected start:end, got {s:?}"))?;
    let start: usize = a.trim().parse().map_err(|_| format!("bad start {a:?}"))?;
    let end: usize = b.trim().parse().map_err(|_| format!("bad end {b:?}"))?;
    if end <= start {
        return Err(format!("end {end} must exceed start {start}"));
    }
    TargetSpan::new(start, end - start).map_err(|e| e.to_string())
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
