//! `invfilter`: data generation, training, evaluation, replay and serving
//! for the completion invocation filter.
//!
//! Exit codes: 0 success, 1 user error (bad flags, unreadable or invalid
//! input, overlapping evaluation data), 2 internal error.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use invocation_filter::eval::{
    evaluate_offline, EncoderSpec, EvalError, LogisticSpec, OfflineReport, Scorer, ScorerConfig, SplitModel,
};
use invocation_filter::events::{
    balance, generate_synthetic, read_log, write_log, write_log_string, BalanceStrategy, Dataset, LogMode,
    SyntheticConfig,
};
use invocation_filter::features::{fit_scaling, FeatureEncoder, FeatureMask};
use invocation_filter::gateway::{replay, serve_lines, serve_tcp, Filter, FilterArm, ServeStats};
use invocation_filter::models::{
    self, base_config, train_staged, EncoderClassifier, LogisticFilter, ModelConfig, TokenizationConfig, TrainConfig,
};
use invocation_filter::tokenizer::{Strategy, Tokenizer};

/// An error caused by the invocation rather than by the program.
#[derive(Debug)]
struct UserError(String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl fmt::Display) -> anyhow::Error {
    UserError(msg.to_string()).into()
}

trait UserContext<T> {
    fn user_context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: fmt::Display> UserContext<T> for std::result::Result<T, E> {
    fn user_context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| user(format!("{}: {e}", what())))
    }
}

#[derive(Parser)]
#[command(name = "invfilter", version, about = "Decide whether to invoke a code-completion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random choice of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides `pool_size` of the configuration.
        #[arg(long)]
        pool_size: Option<usize>,
    },
    /// Train a logistic or encoder filter on an event log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "logistic")]
        model: ModelKind,
    },
    /// Train on k splits of a pool and bootstrap accuracy on a test log.
    EvalOffline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        /// Test log; without it a tenth of the pool is held out.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "logistic")]
        model: ModelKind,
        #[arg(long, default_value_t = 5)]
        splits: usize,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
    },
    /// Replay a log through several filters with session-level assignment.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        /// `NAME=none`, `NAME=logistic:PATH` or `NAME=encoder:PATH`; repeatable.
        #[arg(long = "arm", required = true)]
        arms: Vec<String>,
        /// Encoder checkpoint used to score accepted completions.
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        scorer_layer: Option<usize>,
        /// Put the (run-dependent) latency percentiles into the JSON report.
        #[arg(long)]
        include_latency: bool,
    },
    /// Answer newline-delimited JSON requests on stdio or a TCP socket.
    Serve {
        #[command(flatten)]
        common: Common,
        /// `none`, `logistic:PATH` or `encoder:PATH`.
        #[arg(long)]
        filter: String,
        /// Listen on this TCP address instead of stdio.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Show how a prefix/suffix pair is turned into a model input.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prefix_file: PathBuf,
        #[arg(long)]
        suffix_file: PathBuf,
        /// Take tokenizer and tokenization from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        suffix_cap: Option<usize>,
    },
    /// Print the header of an encoder checkpoint.
    InspectCheckpoint {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ModelKind {
    Logistic,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FeatureSet {
    TelemetryOnly,
    #[default]
    Baseline,
    Extension,
}

impl FeatureSet {
    fn mask(self) -> FeatureMask {
        match self {
            FeatureSet::TelemetryOnly => FeatureMask::telemetry_only(),
            FeatureSet::Baseline => FeatureMask::baseline(),
            FeatureSet::Extension => FeatureMask::extension(),
        }
    }
}

/// Configuration of `train` and `eval-offline`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    tokenization: TokenizationConfig,
    /// Logistic features, or the telemetry given to encoder extensions.
    features: FeatureSet,
    /// Epoch at which encoder extensions join a base run.
    extension_epoch: usize,
    balance: Option<BalanceStrategy>,
}

/// Configuration of `serve` and `replay`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FilterFile {
    threshold: f64,
    mid_line_rule: bool,
}

impl Default for FilterFile {
    fn default() -> Self {
        FilterFile {
            threshold: invocation_filter::gateway::DEFAULT_THRESHOLD,
            mid_line_rule: false,
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).user_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).user_context(|| format!("invalid configuration {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).user_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn load_log(path: &Path) -> Result<Dataset> {
    let read = read_log(path, LogMode::Strict).user_context(|| format!("cannot read log {}", path.display()))?;
    Ok(read.dataset)
}

fn encoder_spec(cfg: &TrainFile, seed: u64, tokenizer: Tokenizer) -> EncoderSpec {
    let mut config = cfg.model.clone();
    if config.vocab_size != tokenizer.vocab_size() {
        log::info!("vocab_size set to the tokenizer's {}", tokenizer.vocab_size());
        config.vocab_size = tokenizer.vocab_size();
    }
    if config.head_variant.is_some() || !config.attn_layers.is_empty() {
        config.features = FeatureEncoder::new(cfg.features.mask(), Default::default()).layout.len();
    }
    EncoderSpec {
        name: format!("encoder ({:?} tokenization)", cfg.tokenization.strategy).to_lowercase(),
        config,
        tokenization: cfg.tokenization,
        train: TrainConfig {
            seed,
            ..cfg.train.clone()
        },
        tokenizer,
        feature_mask: cfg.features.mask(),
        extension_epoch: cfg.extension_epoch,
    }
}

fn validate_training(cfg: &TrainFile) -> Result<()> {
    cfg.model.validate().map_err(user)?;
    cfg.train.validate().map_err(user)?;
    Ok(())
}

fn gen_data(common: &Common, pool_size: Option<usize>) -> Result<()> {
    let mut cfg: SyntheticConfig = read_config(common.config.as_deref())?;
    if let Some(n) = pool_size {
        cfg.pool_size = n;
    }
    let data = generate_synthetic(&cfg, common.seed).map_err(user)?;
    let c = data.subclass_counts();
    log::info!(
        "{} events: {} manual, {} auto accepted, {} auto rejected",
        data.len(),
        c.manual,
        c.auto_accepted,
        c.auto_rejected
    );
    match &common.out {
        Some(p) => write_log(&data, p).user_context(|| format!("cannot write {}", p.display())),
        None => emit(None, &write_log_string(&data)),
    }
}

fn train_cmd(common: &Common, data: &Path, kind: ModelKind) -> Result<()> {
    let cfg: TrainFile = read_config(common.config.as_deref())?;
    validate_training(&cfg)?;
    let mut dataset = load_log(data)?;
    if let Some(strategy) = cfg.balance {
        dataset = balance(&dataset, strategy, common.seed).map_err(user)?;
    }
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| user("train needs --out for the model file"))?;
    let train_cfg = TrainConfig {
        seed: common.seed,
        ..cfg.train.clone()
    };
    match kind {
        ModelKind::Logistic => {
            let model = LogisticFilter::train(&dataset, cfg.features.mask(), &train_cfg).map_err(user)?;
            model.save_json(out).user_context(|| format!("cannot write {}", out.display()))?;
            println!("logistic filter with {} features written to {}", model.weights.len(), out.display());
        }
        ModelKind::Encoder => {
            let spec = encoder_spec(&cfg, common.seed, Tokenizer::byte_level());
            let mut base = EncoderClassifier::<f32>::new(base_config(&spec.config), common.seed).map_err(user)?;
            base.tokenization = spec.tokenization;
            let features = FeatureEncoder::new(spec.feature_mask.clone(), fit_scaling(&dataset));
            let run = train_staged(base, &spec.config, features, spec.extension_epoch, &dataset, &spec.tokenizer, &train_cfg)
                .map_err(|e| match e {
                    models::ModelError::NonFiniteLoss { .. } => anyhow!(e),
                    other => user(other),
                })?;
            models::save(&run.model, &spec.tokenizer, out).context("writing checkpoint")?;
            let curve: Vec<String> = run.loss_curve.iter().map(|l| format!("{l:.4}")).collect();
            println!("encoder checkpoint written to {} (loss per epoch: {})", out.display(), curve.join(", "));
        }
    }
    Ok(())
}

fn eval_offline_cmd(
    common: &Common,
    pool: &Path,
    test: Option<&Path>,
    kind: ModelKind,
    splits: usize,
    iterations: usize,
) -> Result<()> {
    let cfg: TrainFile = read_config(common.config.as_deref())?;
    validate_training(&cfg)?;
    if splits == 0 || iterations == 0 {
        return Err(user("--splits and --iterations must be positive"));
    }
    let mut pool = load_log(pool)?;
    let test = match test {
        Some(p) => load_log(p)?,
        None => {
            let (train, held_out) = pool.split(0.1, common.seed);
            pool = train;
            held_out
        }
    };
    if let Some(strategy) = cfg.balance {
        pool = balance(&pool, strategy, common.seed).map_err(user)?;
    }
    let model: Box<dyn SplitModel> = match kind {
        ModelKind::Logistic => Box::new(LogisticSpec {
            mask: cfg.features.mask(),
            train: cfg.train.clone(),
        }),
        ModelKind::Encoder => Box::new(encoder_spec(&cfg, common.seed, Tokenizer::byte_level())),
    };
    let report = evaluate_offline(model.as_ref(), &pool, &test, splits, iterations, common.seed).map_err(|e| match e {
        EvalError::Model(models::ModelError::NonFiniteLoss { .. }) => anyhow!(e),
        other => user(other),
    })?;
    eprint!("{}", OfflineReport::table(std::slice::from_ref(&report)));
    emit(common.out.as_deref(), &report.to_json())
}

fn load_arm(spec: &str) -> Result<FilterArm> {
    let (kind, path) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "none" if path.is_empty() => Ok(FilterArm::None),
        "logistic" if !path.is_empty() => {
            let m = LogisticFilter::load_json(path).user_context(|| format!("cannot load logistic model {path}"))?;
            Ok(FilterArm::Logistic(Arc::new(m)))
        }
        "encoder" if !path.is_empty() => {
            let (model, tokenizer) = models::load(path).user_context(|| format!("cannot load checkpoint {path}"))?;
            Ok(FilterArm::Encoder {
                model: Arc::new(model),
                tokenizer: Arc::new(tokenizer),
            })
        }
        _ => Err(user(format!(
            "bad filter `{spec}`: expected none, logistic:PATH or encoder:PATH"
        ))),
    }
}

fn build_filter(name: &str, spec: &str, cfg: &FilterFile) -> Result<Filter> {
    Ok(Filter::new(name, load_arm(spec)?)
        .with_threshold(cfg.threshold)
        .map_err(user)?
        .with_mid_line_rule(cfg.mid_line_rule))
}

fn replay_cmd(
    common: &Common,
    log_path: &Path,
    arm_specs: &[String],
    scorer: Option<&Path>,
    scorer_layer: Option<usize>,
    include_latency: bool,
) -> Result<()> {
    let cfg: FilterFile = read_config(common.config.as_deref())?;
    let log = load_log(log_path)?;
    let mut arms = Vec::new();
    for spec in arm_specs {
        let (name, what) = spec
            .split_once('=')
            .ok_or_else(|| user(format!("bad arm `{spec}`: expected NAME=FILTER")))?;
        arms.push(Arc::new(build_filter(name, what, &cfg)?));
    }
    let scorer = match scorer {
        Some(p) => {
            let (model, tokenizer) = models::load(p).user_context(|| format!("cannot load scorer {}", p.display()))?;
            let mut sc = ScorerConfig::default();
            if let Some(l) = scorer_layer {
                sc.layer = l;
            }
            Some(Scorer::new(Arc::new(model), Arc::new(tokenizer), sc).map_err(user)?)
        }
        None => None,
    };
    let report = replay(&log, &arms, scorer.as_ref(), common.seed).map_err(user)?;
    eprint!("{}", report.table());
    emit(common.out.as_deref(), &report.to_json(include_latency))
}

fn flush_histogram(stats: &ServeStats, out: Option<&Path>) {
    let text = stats.snapshot().render();
    match out {
        Some(p) => {
            if let Err(e) = fs::write(p, &text) {
                log::error!("cannot write {}: {e}", p.display());
                eprint!("{text}");
            }
        }
        None => eprint!("{text}"),
    }
}

fn serve_cmd(common: &Common, spec: &str, listen: Option<&str>) -> Result<()> {
    let cfg: FilterFile = read_config(common.config.as_deref())?;
    let filter = Arc::new(build_filter(spec.split(':').next().unwrap_or(spec), spec, &cfg)?);
    let stats = Arc::new(ServeStats::default());
    let shutdown = Arc::new(AtomicBool::new(false));
    let out = common.out.clone();
    match listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).user_context(|| format!("cannot listen on {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            let flag = Arc::clone(&shutdown);
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;
            serve_tcp(filter, listener, Arc::clone(&stats), shutdown)?;
        }
        None => {
            // stdin reads cannot be interrupted, so the handler flushes and exits itself
            let (s, o) = (Arc::clone(&stats), out.clone());
            ctrlc::set_handler(move || {
                flush_histogram(&s, o.as_deref());
                std::process::exit(0);
            })
            .context("installing signal handler")?;
            serve_lines(&filter, io::stdin().lock(), io::stdout().lock(), &stats, &shutdown)?;
        }
    }
    flush_histogram(&stats, out.as_deref());
    Ok(())
}

#[derive(Serialize)]
struct TokenizeSummary {
    window: usize,
    content: usize,
    sep_index: usize,
    prefix_tokens: usize,
    suffix_tokens: usize,
    strategy: Strategy,
    ids: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
fn tokenize_cmd(
    common: &Common,
    prefix_file: &Path,
    suffix_file: &Path,
    checkpoint: Option<&Path>,
    strategy: Option<Strategy>,
    window: Option<usize>,
    suffix_cap: Option<usize>,
) -> Result<()> {
    let (tokenizer, mut t) = match checkpoint {
        Some(p) => {
            let (model, tok) = models::load(p).user_context(|| format!("cannot load checkpoint {}", p.display()))?;
            (tok, model.tokenization)
        }
        None => (Tokenizer::byte_level(), read_config::<TokenizationConfig>(common.config.as_deref())?),
    };
    t.strategy = strategy.unwrap_or(t.strategy);
    t.window = window.unwrap_or(t.window);
    t.suffix_cap = suffix_cap.unwrap_or(t.suffix_cap);
    let read = |p: &Path| fs::read_to_string(p).user_context(|| format!("cannot read {}", p.display()));
    let (prefix, suffix) = (read(prefix_file)?, read(suffix_file)?);
    let ctx = tokenizer
        .encode_context(&prefix, &suffix, t.strategy, t.window, t.suffix_cap)
        .map_err(user)?;
    println!(
        "window {} content {} sep_index {} prefix_tokens {} suffix_tokens {}",
        ctx.window(),
        ctx.content_len(),
        ctx.sep_index,
        ctx.n_p,
        ctx.n_s
    );
    if let Some(out) = &common.out {
        let summary = TokenizeSummary {
            window: ctx.window(),
            content: ctx.content_len(),
            sep_index: ctx.sep_index,
            prefix_tokens: ctx.n_p,
            suffix_tokens: ctx.n_s,
            strategy: t.strategy,
            ids: ctx.ids,
        };
        emit(Some(out), &serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(())
}

fn inspect_cmd(common: &Common, path: &Path) -> Result<()> {
    let summary = models::inspect(path).user_context(|| format!("cannot inspect {}", path.display()))?;
    emit(common.out.as_deref(), &serde_json::to_string_pretty(&summary)?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common, pool_size } => gen_data(common, *pool_size),
        Command::Train { common, data, model } => train_cmd(common, data, *model),
        Command::EvalOffline {
            common,
            pool,
            test,
            model,
            splits,
            iterations,
        } => eval_offline_cmd(common, pool, test.as_deref(), *model, *splits, *iterations),
        Command::Replay {
            common,
            log,
            arms,
            scorer,
            scorer_layer,
            include_latency,
        } => replay_cmd(common, log, arms, scorer.as_deref(), *scorer_layer, *include_latency),
        Command::Serve { common, filter, listen } => serve_cmd(common, filter, listen.as_deref()),
        Command::Tokenize {
            common,
            prefix_file,
            suffix_file,
            checkpoint,
            strategy,
            window,
            suffix_cap,
        } => tokenize_cmd(
            common,
            prefix_file,
            suffix_file,
            checkpoint.as_deref(),
            *strategy,
            *window,
            *suffix_cap,
        ),
        Command::InspectCheckpoint { common, checkpoint } => inspect_cmd(common, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UserError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
