mod config;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use uninas::builders::{seed_network, BuilderVariant};
use uninas::cost::{network_cost, CostError};
use uninas::interp::{forward_network, init_network_params, EvalContext, InterpError};
use uninas::io::{self, IoError, Task};
use uninas::mutation::{MutationError, SearchStepConfig};
use uninas::proxy::{score_network, ProxyConfig, ProxyError, ProxyId};
use uninas::search::{evolve, random_walk, replay, EvoConfig, SearchError, WalkConfig};
use uninas::tensor::normal_sample;
use uninas::{Budget, Cost, NetworkSpec, Rng, Shape};

use config::{named_skeleton, Config};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Usage(String),
    #[error("cost {cost:?} lies outside the budget {budget:?}")]
    Budget { cost: Cost, budget: Budget },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Format(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Format(_) | CliError::Usage(_) => 2,
            CliError::Budget { .. } => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Format(_) | IoError::UnsupportedVersion(_) => CliError::Format(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::SeedOutsideBudget { cost, budget } => CliError::Budget { cost, budget },
            SearchError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}

validation_from!(CostError, MutationError, ProxyError, InterpError);

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

/// Block-DAG architecture search toolkit.
#[derive(Debug, Parser)]
#[command(name = "uninas", version)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `params_min,params_max,flops_min,flops_max`, with optional k/M/G suffixes.
    #[arg(long, global = true)]
    budget: Option<Budget>,
    /// TOML file with defaults; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the main output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for `search`. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DocArg {
    /// Graph document, or `-` for stdin.
    document: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a seed network from block builders.
    Build {
        /// Builder per stage, comma-separated; the last one repeats.
        #[arg(long, default_value = "mbconv4", value_delimiter = ',')]
        builder: Vec<BuilderVariant>,
        /// `desk` or `imagenet`; overrides the config skeleton.
        #[arg(long)]
        skeleton: Option<String>,
    },
    /// Check a graph document.
    Validate(DocArg),
    /// Per-term Params/FLOPs report.
    Cost(DocArg),
    /// Random walk from a seed document; writes the final network.
    Walk {
        #[command(flatten)]
        doc: DocArg,
        /// Number of walk steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Per-op FLOPs are logged every this many steps.
        #[arg(long)]
        record_every: Option<usize>,
        /// Line-delimited JSON step log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Budget-constrained evolutionary search; writes the best network.
    Search {
        #[command(flatten)]
        doc: DocArg,
        /// Number of candidates.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        /// vkdnw, neg_params, neg_flops or random.
        #[arg(long)]
        proxy: Option<ProxyId>,
        /// Per-block parameter cap of the vkdnw proxy.
        #[arg(long)]
        max_params: Option<usize>,
        /// Line-delimited JSON log, one line per candidate.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Training-free proxy score.
    Score {
        #[command(flatten)]
        doc: DocArg,
        /// vkdnw, neg_params, neg_flops or random.
        #[arg(long, default_value = "vkdnw")]
        proxy: ProxyId,
        /// Random inputs per proxy batch.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Per-block parameter cap of the vkdnw proxy.
        #[arg(long)]
        max_params: Option<usize>,
    },
    /// Forward a seeded random batch and print a checksum of the logits.
    Eval {
        #[command(flatten)]
        doc: DocArg,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Graphviz DOT export.
    Dot {
        #[command(flatten)]
        doc: DocArg,
        /// Export only this block.
        #[arg(long)]
        block: Option<usize>,
    },
    /// Training protocol for a downstream task.
    Protocol {
        /// classification, detection or segmentation.
        #[arg(long)]
        task: Task,
        /// GPU count; learning rates stay symbolic in `N` without it.
        #[arg(long)]
        gpus: Option<u32>,
    },
    /// Apply a walk log's edits to a seed document.
    Replay {
        #[command(flatten)]
        doc: DocArg,
        /// Step log written by `walk --log`.
        log: PathBuf,
    },
}

struct Ctx {
    seed: u64,
    budget: Option<Budget>,
    threads: Option<usize>,
    config: Config,
}

impl Ctx {
    fn budget_or_unbounded(&self) -> Budget {
        self.budget.unwrap_or_else(Budget::unbounded)
    }

    fn check_budget(&self, cost: Cost) -> Result<(), CliError> {
        match self.budget {
            Some(budget) if !budget.contains(cost) => Err(CliError::Budget { cost, budget }),
            _ => Ok(()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| CliError::io(path, e))?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load(doc: &DocArg) -> Result<NetworkSpec, CliError> {
    Ok(io::parse(&read_text(&doc.document)?)?)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

fn pretty<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn fnv1a(values: &[f64]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325, |h, v| {
        v.to_bits()
            .to_le_bytes()
            .iter()
            .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    })
}

fn run(cli: Cli) -> Result<String, CliError> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        budget: match cli.budget {
            Some(b) => Some(b),
            None => config.budget()?,
        },
        threads: cli.threads.or(config.threads),
        config,
    };
    match cli.command {
        Command::Build { builder, skeleton } => {
            let skel = match (&skeleton, &ctx.config.skeleton) {
                (Some(name), _) => named_skeleton(name)?,
                (None, Some(choice)) => choice.resolve()?,
                (None, None) => uninas::Skeleton::desk(),
            };
            let net = seed_network(&skel, &builder).map_err(|e| CliError::Validation(e.to_string()))?;
            ctx.check_budget(network_cost(&net)?.total)?;
            Ok(io::serialize(&net)?)
        }
        Command::Validate(doc) => {
            let net = load(&doc)?;
            let cost = network_cost(&net)?.total;
            ctx.check_budget(cost)?;
            Ok(format!(
                "ok: {} blocks, {} params, {} flops\n",
                net.blocks.len(),
                cost.params,
                cost.flops
            ))
        }
        Command::Cost(doc) => {
            let report = network_cost(&load(&doc)?)?;
            ctx.check_budget(report.total)?;
            pretty(&report)
        }
        Command::Walk {
            doc,
            steps,
            record_every,
            log,
        } => {
            let seed_net = load(&doc)?;
            let w = &ctx.config.walk;
            let mut step = SearchStepConfig::new(ctx.budget_or_unbounded());
            if let Some(p) = w.p_eliminate {
                step.p_eliminate = p;
            }
            if let Some(n) = w.n_try {
                step.n_try = n;
            }
            let cfg = WalkConfig {
                steps: steps.or(w.steps).unwrap_or(1000),
                step,
                record_every: record_every.or(w.record_every).unwrap_or(100),
                seed: ctx.seed,
            };
            let (net, walk_log) = random_walk(&seed_net, &cfg)?;
            if let Some(path) = log {
                write_file(&path, &io::write_walk_log(&walk_log.records)?)?;
            }
            Ok(io::serialize(&net)?)
        }
        Command::Search {
            doc,
            iterations,
            population,
            proxy,
            max_params,
            log,
        } => {
            let seed_net = load(&doc)?;
            let mut cfg = EvoConfig::new(ctx.budget_or_unbounded(), ProxyId::Vkdnw, ctx.seed);
            ctx.config.apply_search(&mut cfg)?;
            if let Some(n) = iterations {
                cfg.total_steps = n;
            }
            if let Some(n) = population {
                cfg.population_size = n;
            }
            if let Some(p) = proxy {
                cfg.proxy = p;
            }
            if let Some(m) = max_params {
                cfg.proxy_config.max_params = m;
            }
            cfg.threads = ctx.threads;
            let result = evolve(&seed_net, &cfg)?;
            if let Some(path) = log {
                write_file(&path, &jsonl(&result.log)?)?;
            }
            Ok(io::serialize(&result.best.net)?)
        }
        Command::Score {
            doc,
            proxy,
            batch_size,
            max_params,
        } => {
            let net = load(&doc)?;
            let mut pc = ProxyConfig::default();
            if let Some(b) = batch_size.or(ctx.config.search.batch_size) {
                pc.batch_size = b;
            }
            if let Some(m) = max_params.or(ctx.config.search.max_params) {
                pc.max_params = m;
            }
            pretty(&score_network(&net, proxy, ctx.seed, &pc)?)
        }
        Command::Eval { doc, batch } => {
            let net = load(&doc)?;
            if batch == 0 {
                return Err(CliError::Usage("--batch must be positive".into()));
            }
            let params = init_network_params(&net, ctx.seed)?;
            let shape = Shape::new(net.input_channels, net.input_resolution.0, net.input_resolution.1);
            let mut rng = Rng::derive(ctx.seed, u64::MAX - 1);
            let inputs: Vec<_> = (0..batch).map(|_| normal_sample(&mut rng, shape, 0.0, 1.0)).collect();
            let logits = forward_network(&net, &params, &inputs, &mut EvalContext::deterministic())?;
            let argmax: Vec<usize> = (0..logits.batch)
                .map(|i| {
                    let row = logits.row(i);
                    (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
                })
                .collect();
            pretty(&serde_json::json!({
                "batch": logits.batch,
                "classes": logits.classes,
                "params": params.len(),
                "sum": logits.data.iter().sum::<f64>(),
                "argmax": argmax,
                "checksum": format!("{:016x}", fnv1a(&logits.data)),
            }))
        }
        Command::Dot { doc, block } => {
            let net = load(&doc)?;
            match block {
                None => Ok(io::network_to_dot(&net)?),
                Some(i) => {
                    let b = net.blocks.get(i).ok_or_else(|| {
                        CliError::Usage(format!("block {i} out of range (network has {})", net.blocks.len()))
                    })?;
                    Ok(io::block_to_dot(b)?)
                }
            }
        }
        Command::Protocol { task, gpus } => Ok(io::emit_protocol(task, gpus)),
        Command::Replay { doc, log } => {
            let seed_net = load(&doc)?;
            let records = io::read_walk_log(&read_text(&log)?)?;
            let net = replay(&seed_net, records.iter().filter_map(|r| r.edit.as_ref()))?;
            Ok(io::serialize(&net)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone();
    let result = run(cli).and_then(|text| match &out {
        Some(path) => write_file(path, &text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
