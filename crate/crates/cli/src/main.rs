use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use simulstream::agent::protocol::{serve_stdio, Endpoint, TcpServer};
use simulstream::harness::{
    build_factory, generate_synthetic, pivot_tsv, run_eval, train_cmd, write_corpus, AgentSpec, HarnessError, Report,
    RunConfig, SyntheticConfig, TrainConfig,
};
use simulstream::manifest::{load_manifest, LoadOptions, Manifest};
use simulstream::model::Variant;
use simulstream::policy::{Mode, Schedule};
use simulstream::stream::{parse_languages, TargetLanguage, DEFAULT_FEATURE_DIM, DEFAULT_PACKET_FRAMES};

#[derive(Parser, Debug)]
#[command(
    name = "simulstream",
    version,
    about = "Multilingual wait-k simultaneous translation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shifted-translation corpus.
    Gen(GenArgs),
    /// Train a count model on the training split of a manifest.
    Train(TrainArgs),
    /// Evaluate an agent on a manifest under a wait-k schedule.
    Eval(EvalArgs),
    /// Host a built-in agent over the wire protocol.
    Serve(ServeArgs),
    /// Re-render the BLEU pivot from JSON reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sync => Mode::Sync,
            ModeArg::Async => Mode::Async,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Separate,
    Unified,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Separate => Variant::Separate,
            VariantArg::Unified => Variant::Unified,
        }
    }
}

#[derive(Args, Debug)]
struct FeatureArgs {
    /// Frames per source packet.
    #[arg(long, default_value_t = DEFAULT_PACKET_FRAMES)]
    q: usize,

    /// Feature dimension of every frame.
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    dim: usize,
}

impl FeatureArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            q: self.q,
            dim: self.dim,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Read the whole configuration from a JSON file; other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, default_value_t = 64)]
    vocab_size: usize,

    #[arg(long, default_value_t = 2000)]
    train: usize,

    #[arg(long, default_value_t = 100)]
    dev: usize,

    #[arg(long, default_value_t = 200)]
    test: usize,

    #[arg(long, default_value_t = 6)]
    min_len: usize,

    #[arg(long, default_value_t = 14)]
    max_len: usize,

    /// Per-language shift, e.g. `es=1,fr=3`.
    #[arg(long, default_value = "es=1,fr=3")]
    shift: String,

    #[arg(long, default_value_t = DEFAULT_PACKET_FRAMES)]
    frames_per_token: usize,

    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    dim: usize,

    /// Let languages share target words.
    #[arg(long)]
    shared_vocab: bool,

    #[arg(long, default_value_t = 11)]
    dict_seed: u64,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, default_value_t = 0.02)]
    noise: f32,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,

    /// Training lag per language, e.g. `es=4,fr=6`, or one k with `--languages`.
    #[arg(long)]
    k: String,

    /// Target languages when `--k` is a single number.
    #[arg(long)]
    languages: Option<String>,

    #[arg(long, value_enum, default_value_t = VariantArg::Unified)]
    variant: VariantArg,

    /// Additive smoothing constant.
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,

    /// Largest source offset considered per conditioning key.
    #[arg(long, default_value_t = 8)]
    max_offset: usize,

    #[arg(long, default_value_t = 8000)]
    vocab_cap: usize,

    #[command(flatten)]
    features: FeatureArgs,

    /// Model file; the NLL log goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,

    /// Lag per language, e.g. `es=4,fr=6`, or one k with `--languages`.
    #[arg(long)]
    k: String,

    #[arg(long)]
    languages: Option<String>,

    #[arg(long, value_enum, default_value_t = ModeArg::Sync)]
    mode: ModeArg,

    /// oracle | uniform[:SEED] | model:PATH | tcp://HOST:PORT
    #[arg(long, default_value = "oracle")]
    agent: String,

    #[arg(long, default_value_t = 1)]
    workers: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    features: FeatureArgs,

    /// Report JSON; the TSV pivot is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// oracle | uniform[:SEED] | model:PATH
    #[arg(long)]
    agent: String,

    /// Corpus for the oracle and uniform agents.
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// tcp://HOST:PORT or stdio://
    #[arg(long, default_value = "stdio://")]
    endpoint: String,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON reports, in row order.
    #[arg(required = true)]
    reports: Vec<PathBuf>,

    /// Write the TSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config(msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(msg.to_string())
}

/// Parse `es=4,fr=6`, or a bare `4` applied to `languages`.
fn parse_k(spec: &str, languages: Option<&str>) -> Result<BTreeMap<TargetLanguage, usize>, HarnessError> {
    if let Ok(k) = spec.trim().parse::<usize>() {
        let languages = languages.ok_or_else(|| config("a single --k needs --languages"))?;
        let languages = parse_languages(languages).map_err(config)?;
        return Ok(languages.into_iter().map(|l| (l, k)).collect());
    }
    let mut map = BTreeMap::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (lang, k) = item
            .split_once('=')
            .ok_or_else(|| config(format!("expected LANG=K, got {item:?}")))?;
        let lang = TargetLanguage::new(lang.trim()).map_err(config)?;
        let k = k.trim().parse().map_err(|_| config(format!("bad k in {item:?}")))?;
        if map.insert(lang, k).is_some() {
            return Err(config(format!("language repeated in --k {spec:?}")));
        }
    }
    if let Some(languages) = languages {
        let listed: BTreeSet<_> = parse_languages(languages).map_err(config)?.into_iter().collect();
        if !listed.iter().eq(map.keys()) {
            return Err(config("--languages disagrees with --k"));
        }
    }
    if map.is_empty() {
        return Err(config("--k names no languages"));
    }
    Ok(map)
}

fn gen(args: GenArgs) -> Result<(), HarnessError> {
    let cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?
        }
        None => {
            let shifts = parse_k(&args.shift, None)?;
            SyntheticConfig {
                vocab_size: args.vocab_size,
                train: args.train,
                dev: args.dev,
                test: args.test,
                min_len: args.min_len,
                max_len: args.max_len,
                shifts,
                frames_per_token: args.frames_per_token,
                dim: args.dim,
                disjoint_vocab: !args.shared_vocab,
                dict_seed: args.dict_seed,
                seed: args.seed,
                noise: args.noise,
            }
        }
    };
    let corpus = generate_synthetic(&cfg)?;
    write_corpus(&corpus, &args.out)?;
    log::info!("wrote synthetic corpus to {}", args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), HarnessError> {
    let k = parse_k(&args.k, args.languages.as_deref())?;
    let mut cfg = TrainConfig::new(args.manifest, k, args.out);
    cfg.variant = args.variant.into();
    cfg.model.epsilon = args.epsilon;
    cfg.model.max_offset = args.max_offset;
    cfg.vocab_cap = args.vocab_cap;
    cfg.q = args.features.q;
    cfg.dim = args.features.dim;
    let log = train_cmd(&cfg)?;
    println!(
        "nll/token\t{:.6}\t{:.6}\ttokens\t{}",
        log.initial_nll_per_token, log.final_nll_per_token, log.tokens
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), HarnessError> {
    let k = parse_k(&args.k, args.languages.as_deref())?;
    let schedule = Schedule::new(args.mode.into(), k).map_err(config)?;
    let cfg = RunConfig {
        manifest: args.manifest,
        schedule,
        agent: args.agent.parse()?,
        workers: args.workers,
        out: args.out,
        q: args.features.q,
        dim: args.features.dim,
        seed: args.seed,
    };
    let report = run_eval(&cfg)?;
    for (lang, r) in &report.languages {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.3}"));
        println!(
            "{lang}\tk={}\tbleu={:.2}\tal={}\tap={}\tdal={}",
            r.k,
            r.bleu,
            fmt(r.al),
            fmt(r.ap),
            fmt(r.dal)
        );
    }
    if !report.failures.is_empty() {
        log::warn!(
            "{} of {} sessions failed",
            report.failures.len(),
            report.failures.len() + report.utterances.len()
        );
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), HarnessError> {
    let spec: AgentSpec = args.agent.parse()?;
    let corpus = match (&spec, &args.manifest) {
        (AgentSpec::Remote(_), _) => return Err(config("serve hosts a built-in agent, not a remote one")),
        (AgentSpec::Model(_), _) => Vec::new(),
        (_, Some(path)) => {
            let languages = Manifest::read(path)?.languages().to_vec();
            load_manifest(path, &languages, args.features.options())?
        }
        (_, None) => return Err(config(format!("agent {spec} needs --manifest"))),
    };
    let factory = build_factory(&spec, &corpus, args.seed)?;
    match args.endpoint.parse::<Endpoint>().map_err(config)? {
        Endpoint::Stdio => serve_stdio(&*factory).map_err(|e| HarnessError::Agent(e.to_string())),
        Endpoint::Tcp(addr) => {
            let server = TcpServer::bind(&addr, Arc::clone(&factory)).map_err(|e| config(format!("{addr}: {e}")))?;
            let local = server.local_addr().map_err(|e| config(e.to_string()))?;
            log::info!("serving {spec} on tcp://{local}");
            server.run().map_err(|e| HarnessError::Agent(e.to_string()))
        }
    }
}

fn read_report(path: &Path) -> Result<Report, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    Report::from_json(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn report(args: ReportArgs) -> Result<(), HarnessError> {
    let reports = args
        .reports
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let tsv = pivot_tsv(&reports);
    match args.out {
        Some(path) => fs::write(&path, tsv).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display()))),
        None => {
            print!("{tsv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIMULSTREAM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("simulstream: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
