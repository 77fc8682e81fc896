use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use forge_core::attribution::ShapConfig;
use forge_core::model::{Sector, SetsSpec};
use forge_core::narrator::{self, AskContext, AskResult, LlmClient, LlmClientSpec, NarratorConfig, ParameterMap, StubClient};
use forge_core::pipeline::{self, Run, TrainConfig};
use forge_core::similarity::DEFAULT_THRESHOLD;
use forge_core::surrogate::EnsembleConfig;
use forge_cli::service::{self, ServiceConfig};

#[derive(Parser)]
#[command(name = "forge", version, about = "Scenario banks, surrogates and grounded narratives for a land-use abatement model")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    /// 16 regions, 7 FM and 6 Agri technologies, 2020-2050.
    Full,
    /// 4 regions, 3 FM and 2 Agri technologies, 2025-2030.
    Desk,
}

impl Size {
    fn sets(self) -> SetsSpec {
        match self {
            Size::Full => SetsSpec::full(),
            Size::Desk => SetsSpec::desk(),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or solve a scenario bank.
    Bank {
        #[command(subcommand)]
        cmd: BankCmd,
    },
    /// Assemble per-scenario feature matrices.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Correlate and cluster scenarios in input and output space.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        /// Cut height on the 1 - rho scale.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        t: f64,
    },
    /// Fit the surrogate ensemble and report held-out metrics.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        /// Target tensor; must be the bank's capacity (capFMs or capAgri).
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 50)]
        trees: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Defaults to the bank seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attribute held-out predictions to features.
    Shap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long, default_value_t = 3)]
        subsamples: usize,
        #[arg(long, default_value_t = 32)]
        subsample_size: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Answer a what-if question from the scenario bank.
    Ask {
        question: String,
        /// Run directory; without it a desk-size bank is built in memory.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value = "fm")]
        bank: Sector,
        /// Use the deterministic offline client.
        #[arg(long)]
        stub: bool,
        /// Narrator JSON config (patterns, eps, threshold, client).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model name when the client comes from FORGE_LLM_ENDPOINT.
        #[arg(long, default_value = "default")]
        model: String,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API over existing run directories.
    Serve {
        #[arg(long)]
        fm: Option<PathBuf>,
        #[arg(long)]
        agri: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Allowed CORS origin; repeatable, `*` for any.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BankCmd {
    /// Synthesize the baseline and write the 26 scenarios.
    Generate {
        #[arg(long)]
        bank: Sector,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Size::Full)]
        size: Size,
    },
    /// Solve every scenario of a generated bank.
    Run {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("forge: error: {line}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<NarratorConfig> {
    match path {
        None => Ok(NarratorConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// `--stub` wins; otherwise an HTTP client from the config file or, when
/// only the environment names an endpoint, from FORGE_LLM_ENDPOINT.
fn choose_client(stub: bool, cfg: &NarratorConfig, has_config: bool, model: &str) -> Result<Box<dyn LlmClient>> {
    if stub {
        return Ok(Box::new(StubClient));
    }
    if has_config && cfg.client != LlmClientSpec::Stub {
        return Ok(cfg.client.build()?);
    }
    if has_config && cfg.client == LlmClientSpec::Stub {
        return Ok(Box::new(StubClient));
    }
    if std::env::var(narrator::ENDPOINT_ENV).is_ok() {
        let spec: LlmClientSpec = serde_json::from_value(serde_json::json!({ "kind": "http", "model": model }))?;
        return Ok(spec.build()?);
    }
    bail!("no LLM client configured: pass --stub, --config with an http client, or set {}", narrator::ENDPOINT_ENV)
}

fn run(cmd: Cmd) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cmd {
        Cmd::Bank { cmd: BankCmd::Generate { bank, seed, out: dir, size } } => {
            let m = pipeline::generate(&Run::new(&dir), bank, &size.sets(), seed)?;
            writeln!(out, "wrote {} {} scenarios (seed {seed}) to {}", m.recipes.len(), bank, dir.display())?;
        }
        Cmd::Bank { cmd: BankCmd::Run { input, workers } } => {
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let summaries = pipeline::solve(&Run::new(&input), workers)?;
            writeln!(out, "{:<5} {:>16} {:>16} {:>14} {:>10}", "id", "objective", "total_cost", "pur_co2_total", "max_viol")?;
            for s in summaries.values() {
                writeln!(
                    out,
                    "{:<5} {:>16.6e} {:>16.6e} {:>14.4e} {:>10.2e}",
                    s.scenario_id, s.objective, s.total_cost, s.pur_co2_total, s.max_violation
                )?;
            }
        }
        Cmd::Features { input } => {
            let shapes = pipeline::build_features(&Run::new(&input))?;
            let (r, c) = shapes.first().copied().unwrap_or((0, 0));
            writeln!(out, "{} feature matrices of {r}x{c} in {}", shapes.len(), Run::new(&input).features_dir().display())?;
        }
        Cmd::Cluster { input, t } => {
            if !(t.is_finite() && t >= 0.0) {
                bail!("--t must be a finite number >= 0, got {t}");
            }
            let run = Run::new(&input);
            let bank = run.manifest()?.bank;
            for (space, rep) in pipeline::cluster(&run, t)? {
                let k = rep.labels.iter().max().copied().unwrap_or(0);
                let var = if space == "output" { pipeline::output_variable(bank) } else { "features" };
                writeln!(out, "{space} space ({var}): {k} cluster(s) at t = {t}")?;
                if let Some(min) = rep.correlation.min_off_diagonal() {
                    writeln!(out, "  min off-diagonal rho = {min:.4}")?;
                }
                writeln!(out, "  {}", rep.extremal.render().replace('\n', "\n  "))?;
            }
        }
        Cmd::Train { input, target, folds, trees, test_fraction, seed } => {
            let run = Run::new(&input);
            let m = run.manifest()?;
            let expected = match m.bank {
                Sector::Fm => "capFMs",
                Sector::Agri => "capAgri",
            };
            if let Some(t) = &target {
                if t != expected {
                    bail!("target {t:?} is not available for the {} bank (expected {expected})", m.bank);
                }
            }
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                bail!("--test-fraction must lie in (0, 1), got {test_fraction}");
            }
            let seed = seed.unwrap_or(m.seed);
            let cfg = TrainConfig {
                ensemble: EnsembleConfig { n_folds: folds, trees_per_forest: trees, seed, ..Default::default() },
                test_fraction,
                split_seed: seed,
            };
            let r = pipeline::train(&run, cfg)?;
            writeln!(
                out,
                "{}: held-out R2 = {:.4}, RMSE = {:.4} ({:.2}% of target range), {} train / {} test rows",
                r.target, r.test.r2, r.test.rmse, r.rmse_pct_of_range, r.n_train, r.n_test
            )?;
            writeln!(out, "wrote {}", run.model_dir().display())?;
        }
        Cmd::Shap { input, top_k, subsamples, subsample_size, seed } => {
            let run = Run::new(&input);
            let seed = seed.unwrap_or(run.manifest()?.seed);
            let cfg = ShapConfig { subsamples, subsample_size, seed };
            let (_, s) = pipeline::explain(&run, cfg, top_k)?;
            writeln!(out, "{} rows attributed, max local-accuracy error {:.2e}", s.rows, s.max_local_error)?;
            for (i, d) in s.drivers.iter().enumerate() {
                writeln!(out, "{}. {} (mean |SHAP| = {:.4}, sign {:+}, mean value = {:.4})", i + 1, d.feature, d.magnitude, d.sign, d.mean_value)?;
            }
        }
        Cmd::Ask { question, input, bank, stub, config, model, json } => {
            let cfg = load_config(config.as_deref())?;
            let client = choose_client(stub, &cfg, config.is_some(), &model)?;
            let res = match input {
                Some(dir) => pipeline::ask(&Run::new(&dir), &question, &cfg, client.as_ref())?,
                None => ask_ephemeral(&question, bank, &cfg, client.as_ref())?,
            };
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&res)?)?;
            } else {
                print_answer(&mut out, &res)?;
            }
        }
        Cmd::Serve { fm, agri, addr, cors_origins, config } => {
            let mut runs = std::collections::BTreeMap::new();
            if let Some(p) = fm {
                runs.insert(Sector::Fm, p);
            }
            if let Some(p) = agri {
                runs.insert(Sector::Agri, p);
            }
            if runs.is_empty() {
                bail!("serve needs at least one of --fm or --agri");
            }
            let narrator = load_config(config.as_deref())?;
            let app = service::router(ServiceConfig { runs, narrator, cors_origins });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                log::info!("listening on {addr}");
                axum::serve(listener, app).await.context("serving")
            })?;
        }
    }
    Ok(())
}

fn ask_ephemeral(question: &str, bank: Sector, cfg: &NarratorConfig, client: &dyn LlmClient) -> Result<AskResult> {
    let (b, report) = pipeline::ephemeral_context(bank, &SetsSpec::desk(), 0, cfg.threshold)?;
    let map = ParameterMap::builtin(bank).with_extensions(&cfg.patterns)?;
    let ctx = AskContext { map: &map, recipes: &b.recipes, report: &report, eps: cfg.eps, extras: None };
    Ok(narrator::ask(question, &ctx, client)?)
}

fn print_answer(out: &mut impl Write, res: &AskResult) -> Result<()> {
    let q = &res.query;
    let change = q.multiplier.map_or_else(|| format!("{:?}", q.direction).to_lowercase(), |m| format!("x{m}"));
    writeln!(out, "Parsed: {} {change}", q.parameter)?;
    let m = &res.matches;
    writeln!(out, "Matches: {}", if m.ids.is_empty() { "none".to_string() } else { m.ids.join(", ") })?;
    writeln!(out)?;
    write!(out, "{}", narrator::scenario_summary(q, &res.bundle))?;
    writeln!(out)?;
    writeln!(out, "Narrative ({}):", res.narrative.provenance.client)?;
    writeln!(out, "{}", res.narrative.text)?;
    Ok(())
}
