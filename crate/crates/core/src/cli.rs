//! The `lidkit` command line.
//!
//! Every subcommand wraps one library operation chain. Configuration is a
//! flat `key = value` file plus `--set key=value` overrides (last wins), and
//! every output file starts with a `# lidkit <command> config=<hash>
//! seed=<seed>` comment so runs can be traced back to their inputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backend::{score_closed_set_wave, score_zero_resource_wave, LanguageModelSet, Scored};
use crate::config::KvConfig;
use crate::dsp::FrontEnd;
use crate::harness::{
    center_crop, derive_seed, desk_defaults, extract_features, run_task, train_on_corpus, Corpus, ExperimentPlan, Split, Task, Utterance, PLAN_KEYS, SAMPLE_RATE,
};
use crate::metrics::{compute_cavg, EvalConfig, ThresholdPolicy};
use crate::net::{extract_xvector, load_params, save_params, NetConfig, NetError, NetworkParams, TrainConfig};
use crate::submission::{fill_missing, parse_key, parse_scores, write_scores, ScoreRecord, TrialKey};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lidkit", version, about = "Spoken language identification scoring and x-vector baseline")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed; same as `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (wav/, manifest.txt, `key_<split>.txt`) for the plan in the config.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an x-vector network on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Model file; the language list goes next to it with extension `.languages`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one `utt-id v1 v2 ...` x-vector line per utterance.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average reference x-vectors into per-language centroids.
    Enroll {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "reference")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split: closed-set log posteriors, or cosine against `--centroids`.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Comma-separated trained languages to report (closed set).
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<String>>,
        /// Centroid file from `enroll`; switches to zero-resource scoring.
        #[arg(long)]
        centroids: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a score file against a key and fill lost trials with -inf.
    Validate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Write the filled score file here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print Cavg and EER% for a score file.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Fixed decision threshold instead of the minimising sweep.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        p_target: f64,
        /// Full flat report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// DET points, `p_miss p_fa` per line.
        #[arg(long)]
        det: Option<PathBuf>,
    },
    /// Generate, train, score and evaluate the plan in the config.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Extract { .. } => "extract",
            Command::Enroll { .. } => "enroll",
            Command::Score { .. } => "score",
            Command::Validate { .. } => "validate",
            Command::Evaluate { .. } => "evaluate",
            Command::Run { .. } => "run",
        }
    }
}

/// A failure with its exit code and one-line message.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn data(message: impl ToString) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.to_string(),
        }
    }

    fn at(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::data(format!("{}:{err}", path.display()))
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        let code = match e {
            NetError::NonFiniteLoss => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<crate::harness::HarnessError> for CliError {
    fn from(e: crate::harness::HarnessError) -> Self {
        match e {
            crate::harness::HarnessError::Net(n) => n.into(),
            other => Self::data(other),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::data(e)
            }
        }
    )*};
}
data_errors!(
    crate::config::ConfigError,
    crate::dsp::DspError,
    crate::backend::BackendError,
    crate::metrics::MetricsError,
    std::io::Error
);

type CliResult<T> = Result<T, CliError>;

struct Context {
    command: &'static str,
    kv: KvConfig,
    seed: u64,
}

impl Context {
    fn stamp(&self) -> String {
        format!("lidkit {} config={} seed={}", self.command, self.kv.hash(), self.seed)
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place, so a
/// failed run never leaves a partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let res = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(|e| CliError::at(path, format!(" {e}")))
}

fn stamped(ctx: &Context, body: &[u8]) -> Vec<u8> {
    let mut out = format!("# {}\n", ctx.stamp()).into_bytes();
    out.extend_from_slice(body);
    out
}

fn read_key(path: &Path) -> CliResult<TrialKey> {
    let f = fs::File::open(path).map_err(|e| CliError::at(path, format!(" {e}")))?;
    parse_key(BufReader::new(f)).map_err(|e| CliError::at(path, e))
}

fn read_scores(path: &Path, languages: &[String]) -> CliResult<Vec<ScoreRecord>> {
    let f = fs::File::open(path).map_err(|e| CliError::at(path, format!(" {e}")))?;
    parse_scores(BufReader::new(f), languages).map_err(|e| CliError::at(path, e))
}

fn languages_path(model: &Path) -> PathBuf {
    model.with_extension("languages")
}

fn read_model(path: &Path) -> CliResult<(NetworkParams, Vec<String>)> {
    let bytes = fs::read(path).map_err(|e| CliError::at(path, format!(" {e}")))?;
    let lpath = languages_path(path);
    let langs: Vec<String> = fs::read_to_string(&lpath)
        .map_err(|e| CliError::at(&lpath, format!(" {e}")))?
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.trim().to_string())
        .collect();
    let params = load_params(&bytes, Some(langs.len())).map_err(|e| CliError::at(path, format!(" {e}")))?;
    Ok((params, langs))
}

fn read_corpus(path: &Path, split: Split) -> CliResult<Vec<Utterance>> {
    let corpus = Corpus::read_manifest(path)?;
    let utts: Vec<Utterance> = corpus.utterances.into_iter().filter(|u| u.split == split).collect();
    if utts.is_empty() {
        return Err(CliError::at(path, format!(" no `{split}` utterances")));
    }
    Ok(utts)
}

fn crop(kv: &KvConfig, u: &Utterance) -> CliResult<crate::dsp::Waveform> {
    let secs: f64 = kv.get_or("test.crop_seconds", 0.0)?;
    let samples = if secs > 0.0 { center_crop(&u.samples, secs) } else { &u.samples };
    Ok(crate::dsp::Waveform::from_pcm16(samples, SAMPLE_RATE))
}

fn report_lost(records: &[ScoreRecord], scored: &[Scored]) {
    for (r, s) in records.iter().zip(scored) {
        if let Some(d) = &s.diagnostic {
            eprintln!("{}: {d}", r.segment_id);
        }
    }
}

fn plural(n: usize, word: &str) -> String {
    if n == 1 {
        format!("{n} {word}")
    } else {
        format!("{n} {word}s")
    }
}

fn cmd_generate(ctx: &Context, out: &Path) -> CliResult<()> {
    let plan = ExperimentPlan::from_kv(&ctx.kv)?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(CliError::at(out, " output directory is not empty"));
    }
    let corpus = plan.materialize()?;
    let partial = out.with_extension("partial");
    let res = corpus.write(&partial, &[ctx.stamp()]).map_err(CliError::from).and_then(|_| {
        if out.exists() {
            fs::remove_dir(out)?;
        }
        fs::rename(&partial, out)?;
        Ok(())
    });
    if res.is_err() {
        let _ = fs::remove_dir_all(&partial);
    }
    res?;
    println!("{} utterances written to {}", corpus.utterances.len(), out.display());
    Ok(())
}

fn cmd_train(ctx: &Context, manifest: &Path, out: &Path) -> CliResult<()> {
    let corpus = Corpus::read_manifest(manifest)?;
    let languages = corpus.languages(Split::Train);
    if languages.len() < 2 {
        return Err(CliError::at(manifest, " train split needs at least 2 languages"));
    }
    let front_end = FrontEnd::from_kv(&ctx.kv)?;
    let net = NetConfig::from_kv(&ctx.kv, languages.len())?;
    let mut train_cfg = TrainConfig::from_kv(&ctx.kv)?;
    train_cfg.seed = derive_seed(ctx.seed, "train");
    let (params, losses) = train_on_corpus(&corpus, &languages, &front_end, &net, &train_cfg, derive_seed(ctx.seed, "init"))?;
    write_atomic(out, &save_params(&params))?;
    let mut list = format!("# {}\n", ctx.stamp());
    for l in &languages {
        list.push_str(l);
        list.push('\n');
    }
    write_atomic(&languages_path(out), list.as_bytes())?;
    println!(
        "{} steps, final loss {:.6}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_extract(ctx: &Context, model: &Path, manifest: &Path, split: Split, out: &Path) -> CliResult<()> {
    let (params, _) = read_model(model)?;
    let utts = read_corpus(manifest, split)?;
    let front_end = FrontEnd::from_kv(&ctx.kv)?;
    let mut body = Vec::new();
    for (u, f) in utts.iter().zip(extract_features(&front_end, &utts)) {
        let x = f.ok_or_else(|| "front end rejected the utterance".to_string()).and_then(|f| extract_xvector(&params, &f).map_err(|e| e.to_string()));
        match x {
            Ok(x) => {
                let rec = ScoreRecord::new(u.id.clone(), x.to_vec());
                write_scores(std::slice::from_ref(&rec), &mut body)?;
            }
            Err(e) => eprintln!("{}: skipped: {e}", u.id),
        }
    }
    write_atomic(out, &stamped(ctx, &body))
}

fn cmd_enroll(ctx: &Context, model: &Path, manifest: &Path, split: Split, out: &Path) -> CliResult<()> {
    let (params, _) = read_model(model)?;
    let utts = read_corpus(manifest, split)?;
    let front_end = FrontEnd::from_kv(&ctx.kv)?;
    let mut per_lang: Vec<(String, Vec<ndarray::Array1<f64>>)> = Vec::new();
    for (u, f) in utts.iter().zip(extract_features(&front_end, &utts)) {
        if !per_lang.iter().any(|(l, _)| *l == u.language) {
            per_lang.push((u.language.clone(), Vec::new()));
        }
        let Some(f) = f else { continue };
        match extract_xvector(&params, &f) {
            Ok(x) => per_lang.iter_mut().find(|(l, _)| *l == u.language).expect("inserted").1.push(x),
            Err(e) => eprintln!("{}: skipped: {e}", u.id),
        }
    }
    let models = LanguageModelSet::from_xvectors(per_lang)?;
    let mut body = Vec::new();
    models.write_text(&mut body)?;
    write_atomic(out, &stamped(ctx, &body))?;
    println!("{} enrolled", plural(models.len(), "language"));
    Ok(())
}

fn cmd_score(
    ctx: &Context,
    model: &Path,
    manifest: &Path,
    split: Split,
    subset: Option<&[String]>,
    centroids: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    use rayon::prelude::*;
    let (params, langs) = read_model(model)?;
    let utts = read_corpus(manifest, split)?;
    let front_end = FrontEnd::from_kv(&ctx.kv)?;
    let waves = utts.iter().map(|u| crop(&ctx.kv, u)).collect::<CliResult<Vec<_>>>()?;
    let scored: Vec<Scored> = match centroids {
        Some(path) => {
            let f = fs::File::open(path).map_err(|e| CliError::at(path, format!(" {e}")))?;
            let models = LanguageModelSet::parse_text(BufReader::new(f)).map_err(|e| CliError::at(path, e))?;
            waves
                .par_iter()
                .map(|w| score_zero_resource_wave(&models, &front_end, w, &params))
                .collect::<Result<_, _>>()?
        }
        None => {
            let idx = match subset {
                Some(s) => Some(
                    s.iter()
                        .map(|id| {
                            langs
                                .iter()
                                .position(|l| l == id)
                                .ok_or_else(|| CliError::data(format!("subset language `{id}` is not in the model")))
                        })
                        .collect::<CliResult<Vec<_>>>()?,
                ),
                None => None,
            };
            waves
                .par_iter()
                .map(|w| score_closed_set_wave(&params, &front_end, w, idx.as_deref()))
                .collect::<Result<_, _>>()?
        }
    };
    let records: Vec<ScoreRecord> = utts
        .iter()
        .zip(&scored)
        .map(|(u, s)| ScoreRecord::new(u.id.clone(), s.scores.clone()))
        .collect();
    report_lost(&records, &scored);
    let mut body = Vec::new();
    write_scores(&records, &mut body)?;
    write_atomic(out, &stamped(ctx, &body))
}

fn cmd_validate(ctx: &Context, scores: &Path, key_path: &Path, out: Option<&Path>) -> CliResult<()> {
    let key = read_key(key_path)?;
    let records = read_scores(scores, key.languages())?;
    let filled = fill_missing(records, &key);
    if !filled.extra.is_empty() {
        return Err(CliError::at(
            scores,
            format!(" {} not in the key, first `{}`", plural(filled.extra.len(), "segment"), filled.extra[0]),
        ));
    }
    if !filled.lost.is_empty() {
        eprintln!("warning: {} filled with -inf", plural(filled.lost.len(), "lost trial"));
    }
    if let Some(out) = out {
        let mut body = Vec::new();
        write_scores(&filled.records, &mut body)?;
        write_atomic(out, &stamped(ctx, &body))?;
    }
    println!("{}: {} ok", scores.display(), plural(filled.records.len(), "segment"));
    Ok(())
}

fn cmd_evaluate(
    ctx: &Context,
    scores: &Path,
    key_path: &Path,
    threshold: Option<f64>,
    p_target: f64,
    report: Option<&Path>,
    det: Option<&Path>,
) -> CliResult<()> {
    let key = read_key(key_path)?;
    let records = read_scores(scores, key.languages())?;
    let filled = fill_missing(records, &key);
    if !filled.lost.is_empty() {
        eprintln!("warning: {} filled with -inf", plural(filled.lost.len(), "lost trial"));
    }
    if !filled.extra.is_empty() {
        eprintln!("warning: {} not in the key ignored", plural(filled.extra.len(), "segment"));
    }
    let policy = threshold.map_or(ThresholdPolicy::MinSweep, ThresholdPolicy::Fixed);
    let cfg = EvalConfig::new(key.num_languages()).with_p_target(p_target).with_threshold(policy);
    let rep = compute_cavg(&filled.records, &key, &cfg)?;
    println!("Cavg {:.4}", rep.cavg);
    println!("EER% {:.2}", rep.eer * 100.0);
    println!("threshold {} {}", rep.threshold_policy, crate::submission::format_score(rep.threshold_used));
    if let Some(path) = report {
        write_atomic(path, &stamped(ctx, rep.to_text().as_bytes()))?;
    }
    if let Some(path) = det {
        let mut body = Vec::new();
        rep.write_det(&mut body)?;
        write_atomic(path, &stamped(ctx, &body))?;
    }
    Ok(())
}

fn cmd_run(ctx: &Context, out: &Path) -> CliResult<()> {
    let plan = ExperimentPlan::from_kv(&ctx.kv)?;
    let outcome = run_task(&plan)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("scores.txt"), &stamped(ctx, outcome.scores_text().as_bytes()))?;
    let mut key = Vec::new();
    crate::submission::write_key(&outcome.key, &mut key)?;
    write_atomic(&out.join("key.txt"), &stamped(ctx, &key))?;
    write_atomic(&out.join("report.txt"), &stamped(ctx, outcome.report_text().as_bytes()))?;
    for (seg, reason) in &outcome.diagnostics {
        eprintln!("{seg}: {reason}");
    }
    println!("task {}", plan.task);
    println!("Cavg {:.4}", outcome.report.cavg);
    println!("EER% {:.2}", outcome.report.eer * 100.0);
    Ok(())
}

/// Config file, then `--set`, then `--seed`, all layered over the
/// defaults of the configured task.
fn build_context(cli: &Cli) -> CliResult<Context> {
    let mut user = match &cli.config {
        Some(p) => KvConfig::load(p).map_err(|e| CliError::at(p, format!(" {e}")))?,
        None => KvConfig::new(),
    };
    user.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        user.set("seed", s);
    }
    user.check_keys(PLAN_KEYS)?;
    let task: Task = user.get_str("task").unwrap_or("short_utterance").parse()?;
    let mut kv = desk_defaults(task);
    for k in user.keys() {
        kv.set(k, user.get_str(k).expect("listed key"));
    }
    let seed = kv.get_or("seed", 0u64)?;
    Ok(Context {
        command: cli.command.name(),
        kv,
        seed,
    })
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let ctx = build_context(cli)?;
    match &cli.command {
        Command::Generate { out } => cmd_generate(&ctx, out),
        Command::Train { manifest, out } => cmd_train(&ctx, manifest, out),
        Command::Extract { model, manifest, split, out } => cmd_extract(&ctx, model, manifest, *split, out),
        Command::Enroll { model, manifest, split, out } => cmd_enroll(&ctx, model, manifest, *split, out),
        Command::Score {
            model,
            manifest,
            split,
            subset,
            centroids,
            out,
        } => cmd_score(&ctx, model, manifest, *split, subset.as_deref(), centroids.as_deref(), out),
        Command::Validate { scores, key, out } => cmd_validate(&ctx, scores, key, out.as_deref()),
        Command::Evaluate {
            scores,
            key,
            threshold,
            p_target,
            report,
            det,
        } => cmd_evaluate(&ctx, scores, key, *threshold, *p_target, report.as_deref(), det.as_deref()),
        Command::Run { out } => cmd_run(&ctx, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_target(false).try_init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("lidkit: --jobs must be at least 1");
            return EXIT_USAGE;
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(e) => {
            eprintln!("lidkit {}: {}", cli.command.name(), e.message);
            e.code
        }
    }
}
