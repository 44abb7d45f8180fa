//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, ensure, Context as _};
use candle_core::{DType, Device};
use clsm_core::baseline_vae::Vae;
use clsm_core::checkpoint::{self, LoadedModel, ModelKind};
use clsm_core::corpus::midi::{tracks_from_smf, IngestStats};
use clsm_core::corpus::toy::toy_corpus;
use clsm_core::corpus::{read_token_text, write_token_text, Corpus, Source, Split};
use clsm_core::lm::{lm_nll, EvalLm};
use clsm_core::metrics::{interpolation_edit_distance_ratio, left_contextual_recon_accuracy, sample_contexts};
use clsm_core::model::{Clsm, ModelConfig};
use clsm_core::sampler::{generate, interpolate_contextual, vary_contextual, DecodeStrategy};
use clsm_core::settings::Settings;
use clsm_core::training::{fit, gradient_check, Batch, FitReport, Objective, TrainConfig};
use clsm_core::{Context, Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::api::{self, AppState, ServeOptions};
use crate::cli::{Command, CorpusCmd, EvalCmd, EvalCommon, GenerateArgs, GradcheckArgs, Mode, ServeArgs, TrainArgs, TrainKind};
use crate::served::ServedModel;

pub const MANIFEST: &str = "manifest.jsonl";

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Corpus(c) => corpus(c),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(e) => eval(e),
        Command::Serve(a) => serve(a),
    }
}

/// A corpus argument may name the directory or the manifest itself.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST)
    } else {
        p.to_path_buf()
    }
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn print_stats(corpus: &Corpus) {
    let stats = corpus.stats();
    println!("{:<8} {:>10} {:>8}", "split", "identities", "windows");
    for (split, s) in &stats.per_split {
        println!("{:<8} {:>10} {:>8}", split.name(), s.identities, s.windows);
    }
    let hist: Vec<String> = stats
        .token_histogram
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0)
        .map(|(i, n)| format!("{}:{n}", Token::from_index(i).map(|t| t.symbol()).unwrap_or_default()))
        .collect();
    println!("tokens {}", hist.join(" "));
}

fn corpus(cmd: CorpusCmd) -> anyhow::Result<()> {
    match cmd {
        CorpusCmd::Build { input, out, seed } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&input)
                .with_context(|| format!("reading {}", input.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            paths.sort();
            let mut sources = Vec::new();
            let mut midi = IngestStats::default();
            for path in paths {
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unnamed").to_string();
                match ext.as_str() {
                    "mid" | "midi" => {
                        let bytes = std::fs::read(&path)?;
                        // unreadable files are counted and skipped
                        match tracks_from_smf(&bytes, &mut midi) {
                            Ok(tracks) => sources.extend(tracks.into_iter().map(|t| (id.clone(), Source::Track(t)))),
                            Err(e) => eprintln!("skipping {}: {e}", path.display()),
                        }
                    }
                    "txt" => {
                        let text = std::fs::read_to_string(&path)?;
                        let lines = read_token_text(&text).with_context(|| format!("parsing {}", path.display()))?;
                        sources.push((id, Source::Windows(lines)));
                    }
                    _ => {}
                }
            }
            let corpus = Corpus::build(sources, seed)?;
            std::fs::create_dir_all(&out)?;
            corpus.write_manifest(&out.join(MANIFEST))?;
            if midi.files > 0 {
                println!("midi {}", serde_json::to_string(&midi)?);
            }
            print_stats(&corpus);
            Ok(())
        }
        CorpusCmd::Toy { out, seed } => {
            let corpus = toy_corpus(seed)?;
            std::fs::create_dir_all(&out)?;
            corpus.write_manifest(&out.join(MANIFEST))?;
            print_stats(&corpus);
            Ok(())
        }
        CorpusCmd::Stats { input } => {
            let path = manifest_path(&input);
            let corpus = Corpus::read_manifest(&path).with_context(|| format!("reading {}", path.display()))?;
            print_stats(&corpus);
            Ok(())
        }
    }
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    let path = manifest_path(path);
    Corpus::read_manifest(&path).with_context(|| format!("reading {}", path.display()))
}

fn windows_of(corpus: &Corpus, split: Split, limit: Option<usize>) -> Vec<TokenSeq> {
    let mut w: Vec<TokenSeq> = corpus.windows(split).into_iter().map(|w| w.into_tokens()).collect();
    if let Some(n) = limit {
        w.truncate(n);
    }
    w
}

fn run_fit<O: Objective>(
    model: &O,
    train: &[TokenSeq],
    val: &[TokenSeq],
    cfg: &TrainConfig,
    out: &Path,
) -> anyhow::Result<FitReport> {
    let train: Vec<&[Token]> = train.iter().map(|w| w.as_slice()).collect();
    let val: Vec<&[Token]> = val.iter().map(|w| w.as_slice()).collect();
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut io_err = None;
    let report = fit(model, &train, &val, cfg, |r| {
        if io_err.is_none() {
            let written = serde_json::to_writer(&mut log, r).map_err(std::io::Error::from).and_then(|_| log.write_all(b"\n"));
            io_err = written.err();
        }
        if r.step % 50 == 0 {
            eprintln!("step {:>6} epoch {} rec {:.4} kl {:.4} beta {:.5} total {:.4}", r.step, r.epoch, r.rec, r.kl, r.beta, r.total);
        }
    })?;
    log.flush()?;
    if let Some(e) = io_err {
        return Err(anyhow::Error::from(e).context("writing metrics.jsonl"));
    }
    write_records(&out.join("epochs.jsonl"), &report.epochs)?;
    for e in &report.epochs {
        println!("epoch {} val rec {:.4} kl {:.4} total {:.4}", e.epoch, e.val.rec, e.val.kl, e.val.total);
    }
    if let Some(reason) = &report.diverged {
        eprintln!("training stopped early: {reason}");
    }
    Ok(report)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut settings = match &a.config {
        Some(p) => Settings::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None if a.toy => Settings::toy(),
        None => Settings::default(),
    };
    if let Some(seed) = a.seed {
        settings.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        settings.train.epochs = e;
    }
    settings.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let (train_split, val_split) = match a.kind {
        TrainKind::Clsm | TrainKind::Vae => (Split::Train1, Split::Val1),
        TrainKind::Lm => (Split::Train2, Split::Val2),
    };
    let train = windows_of(&corpus, train_split, a.max_windows);
    let val = windows_of(&corpus, val_split, a.max_windows);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("settings.toml"), settings.to_toml())?;
    let cfg = &settings.train;
    let seed = cfg.seed;
    let device = Device::Cpu;
    let meta = |r: &FitReport, which: &str| {
        json!({
            "seed": seed,
            "which": which,
            "best_epoch": r.best_epoch,
            "epochs": r.epochs,
            "diverged": r.diverged,
        })
    };
    macro_rules! finish {
        ($model:expr, $save:path) => {{
            let m = $model;
            let report = run_fit(&m, &train, &val, cfg, &a.out)?;
            $save(&a.out.join("final.ckpt"), &m, meta(&report, "final"))?;
            m.store().restore(&report.best)?;
            $save(&a.out.join("model.ckpt"), &m, meta(&report, "best"))?;
        }};
    }
    match a.kind {
        TrainKind::Clsm => finish!(Clsm::new(settings.model.clone(), seed, DType::F32, &device)?, checkpoint::save_clsm),
        TrainKind::Vae => finish!(Vae::new(settings.vae.clone(), seed, DType::F32, &device)?, checkpoint::save_vae),
        TrainKind::Lm => finish!(EvalLm::new(settings.lm.clone(), seed, DType::F32, &device)?, checkpoint::save_lm),
    }
    println!("wrote {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let model = Clsm::new(ModelConfig::tiny(), a.seed, DType::F64, &Device::Cpu)?;
    // a randomized flow so its gradients are exercised away from the identity
    model.store().pp("flow").randomize(a.seed.wrapping_add(1), 0.3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let k = model.config().seq_len;
    let windows: Vec<TokenSeq> = (0..3)
        .map(|_| (0..k).map(|_| Token::from_index(rng.random_range(0..clsm_core::tokens::DATA_VOCAB))).collect())
        .collect::<Result<_, _>>()?;
    let span = model.config().grid().sample(&mut rng);
    let batch = Batch::new(&windows, span, &Device::Cpu)?;
    let report = gradient_check(&model, &batch, a.beta, a.params, a.step, a.seed)?;
    for e in &report.entries {
        println!("{}", serde_json::to_string(e)?);
    }
    println!("max relative error {:.3e} over {} parameters", report.max_rel_err, report.entries.len());
    let failures = report.failures(a.tol);
    if !failures.is_empty() {
        let names: Vec<String> = failures.iter().map(|e| format!("{}[{}]", e.param, e.index)).collect();
        bail!("{} parameters exceed tolerance {}: {}", failures.len(), a.tol, names.join(", "));
    }
    Ok(())
}

fn load_served(path: &Path, expect: Option<ModelKind>) -> anyhow::Result<ServedModel> {
    let m = ServedModel::load(path)?;
    if let Some(k) = expect {
        ensure!(m.kind() == k, "checkpoint holds a {:?} model, not {:?}", m.kind(), k);
    }
    Ok(m)
}

fn generate_cmd(a: GenerateArgs) -> anyhow::Result<()> {
    let served = load_served(&a.checkpoint, a.model)?;
    let span = served.check_span(a.span)?;
    let model = served.model();
    let text = std::fs::read_to_string(&a.context).with_context(|| format!("reading {}", a.context.display()))?;
    let windows = read_token_text(&text)?;
    ensure!(!windows.is_empty(), "{} has no context windows", a.context.display());
    ensure!(a.j >= 1, "J must be at least 1");
    let strategy = match a.temperature {
        Some(t) => DecodeStrategy::Sample { temperature: t, seed: a.seed },
        None => DecodeStrategy::Greedy,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out: Vec<TokenSeq> = Vec::new();
    for (line, w) in windows.iter().enumerate() {
        ensure!(
            w.len() == model.window_len(),
            "context line {} has {} tokens, the model expects {}",
            line + 1,
            w.len(),
            model.window_len()
        );
        let context = Context::from_window(w, span)?;
        match a.mode {
            Mode::Sample => {
                for _ in 0..a.count {
                    let z = model.sample_latent(&context, &mut rng)?;
                    out.push(generate(model, &z, &context, strategy)?);
                }
            }
            Mode::Interpolate => {
                let z1 = model.sample_latent(&context, &mut rng)?;
                let z2 = model.sample_latent(&context, &mut rng)?;
                out.extend(interpolate_contextual(model, &z1, &z2, a.j, &context, strategy)?.1);
            }
            Mode::Vary => {
                let z = model.posterior_mean(w, span)?;
                out.push(generate(model, &z, &context, strategy)?);
                for _ in 0..a.count {
                    out.push(vary_contextual(model, &z, a.delta, &context, &mut rng, strategy)?.1);
                }
            }
        }
    }
    let seqs = out.iter().map(|s| s.as_slice());
    match &a.out {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            write_token_text(&mut f, seqs)?;
            f.flush()?;
        }
        None => write_token_text(&mut std::io::stdout().lock(), seqs)?,
    }
    Ok(())
}

fn eval_windows(c: &EvalCommon) -> anyhow::Result<Vec<TokenSeq>> {
    let split: Split = c.split.parse()?;
    let corpus = match &c.corpus {
        Some(p) => load_corpus(p)?,
        None => toy_corpus(c.seed)?,
    };
    let w = windows_of(&corpus, split, c.limit);
    ensure!(!w.is_empty(), "split {split} has no windows");
    Ok(w)
}

fn report_path(c: &EvalCommon, metric: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| {
        let mut s = c.checkpoint.clone().into_os_string();
        s.push(format!(".{metric}.jsonl"));
        PathBuf::from(s)
    })
}

fn eval(cmd: EvalCmd) -> anyhow::Result<()> {
    match cmd {
        EvalCmd::Iedr { common, j } => {
            let served = load_served(&common.checkpoint, common.model)?;
            let windows = eval_windows(&common)?;
            let contexts = sample_contexts(&windows, &served.grid(), false, common.seed)?;
            let mut records = Vec::new();
            println!("{:>3} {:>8} {:>7} {:>9} {:>10}", "J", "ratio", "paths", "excluded", "zero-pairs");
            for &jj in &j {
                ensure!(jj >= 1, "J must be at least 1");
                let r = interpolation_edit_distance_ratio(served.model(), &contexts, jj, common.seed)?;
                println!("{:>3} {:>8.4} {:>7} {:>9} {:>10}", r.j, r.ratio, r.n_paths, r.n_excluded_paths, r.n_excluded_pairs);
                records.push(json!({ "metric": "iedr", "J": r.j, "report": r }));
            }
            let path = report_path(&common, "iedr");
            write_records(&path, &records)?;
            println!("wrote {}", path.display());
        }
        EvalCmd::Nll { common, lm } => {
            let served = load_served(&common.checkpoint, common.model)?;
            let lm = match checkpoint::load(&lm, &Device::Cpu)? {
                LoadedModel::Lm(m) => m,
                other => bail!("{} holds a {:?} model, not a language model", lm.display(), other.kind()),
            };
            let windows = eval_windows(&common)?;
            let contexts = sample_contexts(&windows, &served.grid(), false, common.seed)?;
            let model = served.model();
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let samples = contexts
                .iter()
                .map(|c| generate(model, &model.sample_latent(c, &mut rng)?, c, DecodeStrategy::Greedy))
                .collect::<clsm_core::Result<Vec<_>>>()?;
            let generated = lm_nll(&lm, &samples)?;
            let reference = lm_nll(&lm, &windows)?;
            println!("{:<10} {:>8}", "windows", "nll");
            println!("{:<10} {:>8.4}", "generated", generated);
            println!("{:<10} {:>8.4}", "reference", reference);
            let path = report_path(&common, "nll");
            write_records(
                &path,
                &[json!({ "metric": "nll", "generated": generated, "reference": reference, "n": samples.len() })],
            )?;
            println!("wrote {}", path.display());
        }
        EvalCmd::Recon { common } => {
            let served = load_served(&common.checkpoint, common.model)?;
            let windows = eval_windows(&common)?;
            let acc = left_contextual_recon_accuracy(served.model(), &windows, &served.grid(), common.seed)?;
            println!("left-contextual reconstruction accuracy {acc:.4} over {} windows", windows.len());
            let path = report_path(&common, "recon");
            write_records(&path, &[json!({ "metric": "recon", "accuracy": acc, "n": windows.len() })])?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let served = ServedModel::load(&a.checkpoint)?;
    let version = format!(
        "{:?}/{}@{}",
        served.kind(),
        a.checkpoint.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint"),
        env!("CARGO_PKG_VERSION")
    )
    .to_lowercase();
    let state = AppState::new(served, version, ServeOptions { ttl: Duration::from_secs(a.ttl_secs), seed: a.seed });
    let rt = tokio::runtime::Runtime::new().map_err(|e| anyhow!("starting runtime: {e}"))?;
    rt.block_on(api::serve(state, std::net::SocketAddr::new(a.host, a.port)))
}
