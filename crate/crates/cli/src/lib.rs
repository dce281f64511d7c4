//! The `msag` command line.

pub mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use msag_core::audit::{
    anomaly::AlertOnly, read_ndjson, Aggregator, AnomalyScanner, Component, EventFilter, EventSink,
};
use msag_core::keystore::{load_keyfile, save_keyfile};
use msag_core::{load_policy, Clock, KeyRing, KeySet, KeySetConfig, SharedClock, SystemClock};
use msag_services::aggregator::HttpSink;
use msag_services::gateway::http::{HttpIntrospector, HttpUpstream};
use msag_services::gateway::{Gateway, RouteTable};
use msag_services::server::{self, ServerHandle};
use msag_services::sts::{SealedStore, Sts};
use msag_services::InMemoryIdp;

use crate::config::{Config, SecretRef, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "msag", version, about = "Token service, API gateways and audit log for microservices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one or all components until interrupted.
    Serve {
        /// Config file; defaults to $MSAG_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::All)]
        component: Part,
        /// Only start the named gateway.
        #[arg(long)]
        gateway: Option<String>,
    },
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    #[command(subcommand)]
    Keys(KeysCmd),
    #[command(subcommand)]
    Policy(PolicyCmd),
    #[command(subcommand)]
    Logs(LogsCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Sts,
    Gateway,
    Aggregator,
    All,
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCmd {
    /// Run a scenario file, or a bundled scenario by name.
    Run {
        scenario: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// JSON report path; defaults to `<name>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Mirror events to this NDJSON file.
        #[arg(long)]
        sink: Option<PathBuf>,
    },
    /// List bundled scenarios.
    List,
}

#[derive(Debug, Subcommand)]
pub enum KeysCmd {
    /// Apply the rotation schedule to the key file, creating it if absent.
    Rotate {
        #[command(flatten)]
        file: KeyFileArgs,
        /// Replace the active key regardless of its age.
        #[arg(long)]
        force: bool,
    },
    /// Show key ids, states and ages. Secrets are never printed.
    List {
        #[command(flatten)]
        file: KeyFileArgs,
    },
}

#[derive(Debug, clap::Args)]
pub struct KeyFileArgs {
    #[arg(long)]
    keyfile: Option<PathBuf>,
    /// Secret reference wrapping a --keyfile, read from MSAG_SECRET_<NAME>.
    #[arg(long, default_value = "KEYFILE", requires = "keyfile")]
    secret: String,
    /// Take the key file, its secret and the schedule from this config
    /// (or $MSAG_CONFIG).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PolicyCmd {
    /// Check a policy file; exits 1 naming the offending route.
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum LogsCmd {
    /// Print matching events as NDJSON.
    Query {
        /// NDJSON sink file to read.
        #[arg(long, conflicts_with = "url")]
        sink: Option<PathBuf>,
        /// Aggregator base URL.
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        correlation_id: Option<String>,
        #[arg(long)]
        component: Option<Component>,
        #[arg(long)]
        event_type: Option<String>,
        #[arg(long)]
        subject: Option<String>,
        /// Epoch milliseconds, inclusive.
        #[arg(long)]
        from: Option<i64>,
        #[arg(long)]
        to: Option<i64>,
    },
}

fn config_path(explicit: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    explicit
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
        .ok_or_else(|| anyhow!("no config given (use --config or {CONFIG_ENV})"))
}

pub async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve {
            config,
            component,
            gateway,
        } => {
            let cfg = Config::load(&config_path(config)?)?;
            serve(cfg, component, gateway.as_deref()).await
        }
        Command::Scenario(ScenarioCmd::List) => {
            for (name, _) in msag_harness::BUNDLED {
                println!("{name}");
            }
            Ok(())
        }
        Command::Scenario(ScenarioCmd::Run {
            scenario,
            seed,
            report,
            sink,
        }) => run_scenario(&scenario, seed, report, sink).await,
        Command::Keys(cmd) => keys(cmd),
        Command::Policy(PolicyCmd::Validate { file }) => {
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let table = load_policy(&text).map_err(|e| match e.route() {
                Some(route) => anyhow!("{}: invalid rule for route {route}: {e}", file.display()),
                None => anyhow!("{}: {e}", file.display()),
            })?;
            println!("{}: {} rules ok", file.display(), table.len());
            Ok(())
        }
        Command::Logs(LogsCmd::Query {
            sink,
            url,
            correlation_id,
            component,
            event_type,
            subject,
            from,
            to,
        }) => {
            let filter = EventFilter {
                correlation_id,
                component,
                event_type,
                subject,
                from,
                to,
            };
            logs_query(sink, url, &filter).await
        }
    }
}

async fn run_scenario(
    scenario: &str,
    seed: u64,
    report: Option<PathBuf>,
    sink: Option<PathBuf>,
) -> anyhow::Result<()> {
    let path = Path::new(scenario);
    let script = if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| scenario.to_owned())?;
        msag_harness::ScenarioScript::from_json(&text)?
    } else {
        msag_harness::bundled(scenario)?
    };
    let opts = msag_harness::RunOptions {
        seed,
        sink,
        ..Default::default()
    };
    let result = msag_harness::run_scenario(&script, &opts).await?;
    print!("{}", result.render());
    let out = report.unwrap_or_else(|| PathBuf::from(format!("{}.report.json", script.name)));
    result.write_json(&out).with_context(|| out.display().to_string())?;
    println!("report written to {}", out.display());
    if !result.passed {
        bail!("{} step(s) failed", result.failed_steps().count());
    }
    Ok(())
}

struct KeySource {
    path: PathBuf,
    schedule: KeySetConfig,
    wrap: String,
}

fn key_source(args: KeyFileArgs) -> anyhow::Result<KeySource> {
    match (args.keyfile, args.config) {
        (Some(path), None) => Ok(KeySource {
            path,
            schedule: KeySetConfig::default(),
            wrap: SecretRef::new(&args.secret).resolve()?,
        }),
        (keyfile, config) => {
            let cfg = Config::load(&config_path(config)?)?;
            Ok(KeySource {
                path: keyfile.unwrap_or(cfg.keys.keyfile),
                schedule: cfg.keys.schedule,
                wrap: cfg.keys.secret.resolve()?,
            })
        }
    }
}

fn keys(cmd: KeysCmd) -> anyhow::Result<()> {
    let now = SystemClock.now();
    match cmd {
        KeysCmd::Rotate { file, force } => {
            let KeySource { path, schedule, wrap } = key_source(file)?;
            let (before, after) = if path.exists() {
                let set = load_keyfile(&path, schedule, wrap.as_bytes())?;
                let next = if force { set.force_rotate(now) } else { set.rotate(now) };
                (Some(set.active().kid.clone()), next)
            } else {
                (None, KeySet::generate(now, schedule))
            };
            save_keyfile(&path, &after, wrap.as_bytes())?;
            let active = after.active().kid.clone();
            match before {
                Some(b) if b == active => println!("no rotation due; active key {active}"),
                Some(b) => println!("rotated {b} -> {active}"),
                None => println!("created {} with active key {active}", path.display()),
            }
            Ok(())
        }
        KeysCmd::List { file } => {
            let KeySource { path, schedule, wrap } = key_source(file)?;
            let set = load_keyfile(&path, schedule, wrap.as_bytes())?;
            for k in set.keys() {
                println!(
                    "{}\t{}\tcreated {}\tage {}s",
                    k.kid,
                    serde_json::to_value(k.state)?.as_str().unwrap_or_default(),
                    k.created_at,
                    now - k.created_at
                );
            }
            Ok(())
        }
    }
}

async fn logs_query(sink: Option<PathBuf>, url: Option<String>, filter: &EventFilter) -> anyhow::Result<()> {
    let events = match (sink, url) {
        (Some(path), _) => {
            let (events, bad) = read_ndjson(&path).with_context(|| path.display().to_string())?;
            if bad > 0 {
                eprintln!("skipped {bad} unreadable line(s)");
            }
            events.into_iter().filter(|e| filter.matches(e)).collect::<Vec<_>>()
        }
        (None, Some(url)) => reqwest::Client::new()
            .get(format!("{}/events", url.trim_end_matches('/')))
            .query(filter)
            .send()
            .await?
            .error_for_status()?
            .json()
            .await?,
        (None, None) => bail!("give --sink or --url"),
    };
    for e in events {
        println!("{}", serde_json::to_string(&e)?);
    }
    Ok(())
}

struct Running {
    servers: Vec<(String, ServerHandle)>,
    sinks: Vec<Arc<HttpSink>>,
    aggregator: Option<Arc<Aggregator>>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

fn component_sink(cfg: &Config, name: &str) -> Arc<HttpSink> {
    let fallback = cfg.audit.sink.with_extension(format!("{name}.fallback.ndjson"));
    Arc::new(HttpSink::spawn(&cfg.audit.url(), fallback))
}

async fn serve(cfg: Config, part: Part, only_gateway: Option<&str>) -> anyhow::Result<()> {
    let clock: SharedClock = Arc::new(SystemClock);
    let mut run = Running {
        servers: Vec::new(),
        sinks: Vec::new(),
        aggregator: None,
        tasks: Vec::new(),
    };
    let result = start(&cfg, part, only_gateway, &clock, &mut run).await;
    if result.is_ok() {
        eprintln!("running; press ctrl-c to stop");
        tokio::signal::ctrl_c().await?;
        eprintln!("shutting down");
    }
    for t in &run.tasks {
        t.abort();
    }
    // Front doors first so in-flight requests finish before their backends.
    for (name, s) in run.servers.into_iter().rev() {
        if s.shutdown().await.is_err() {
            eprintln!("{name}: unclean shutdown");
        }
    }
    for s in &run.sinks {
        s.flush().await;
    }
    if let Some(a) = &run.aggregator {
        a.flush()?;
    }
    result
}

async fn start(
    cfg: &Config,
    part: Part,
    only_gateway: Option<&str>,
    clock: &SharedClock,
    run: &mut Running,
) -> anyhow::Result<()> {
    let want = |p: Part| part == Part::All || part == p;

    if want(Part::Aggregator) {
        let agg = Arc::new(Aggregator::with_sink(&cfg.audit.sink).context("audit sink")?);
        let handle = server::spawn(msag_services::aggregator::router(agg.clone()), cfg.audit.listen).await?;
        eprintln!("aggregator listening on {}", handle.url());
        run.servers.push(("aggregator".into(), handle));
        let mut scanner = AnomalyScanner::new(cfg.audit.anomaly_rules.clone(), Component::Harness)?;
        let scan_agg = agg.clone();
        let scan_clock = clock.clone();
        let every = Duration::from_secs(cfg.audit.scan_interval.max(1));
        run.tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                scanner.scan(&scan_agg, scan_clock.now(), &AlertOnly);
            }
        }));
        run.aggregator = Some(agg);
    }

    if want(Part::Sts) {
        let sink = component_sink(cfg, "sts");
        run.sinks.push(sink.clone());
        let wrap = cfg.keys.secret.resolve()?;
        let keyset = if cfg.keys.keyfile.exists() {
            load_keyfile(&cfg.keys.keyfile, cfg.keys.schedule, wrap.as_bytes())?
        } else {
            let k = KeySet::generate(clock.now(), cfg.keys.schedule);
            save_keyfile(&cfg.keys.keyfile, &k, wrap.as_bytes())?;
            k
        };
        let ring = KeyRing::new(keyset);
        let users = cfg.sts.users.iter().map(|a| a.resolve()).collect::<Result<Vec<_>, _>>()?;
        let clients = cfg.sts.clients.iter().map(|a| a.resolve()).collect::<Result<Vec<_>, _>>()?;
        let idp = InMemoryIdp::new(cfg.sts.roles.clone(), users, clients, cfg.sts.pbkdf2_iterations)?;
        let store = match &cfg.sts.store {
            Some(p) => SealedStore::persistent(ring.clone(), p.clone())?,
            None => SealedStore::in_memory(ring.clone()),
        };
        let sts = Arc::new(Sts::new(
            cfg.sts.settings.clone(),
            Arc::new(idp),
            ring,
            store,
            sink,
            clock.clone(),
        )?);
        let handle = server::spawn(msag_services::sts::http::router(sts.clone()), cfg.sts.listen).await?;
        eprintln!("sts listening on {}", handle.url());
        run.servers.push(("sts".into(), handle));
        let keyfile = cfg.keys.keyfile.clone();
        let rot_clock = clock.clone();
        run.tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(60));
            loop {
                tick.tick().await;
                if sts.rotate_keys(rot_clock.now(), &msag_core::audit::new_correlation_id()) {
                    if let Err(e) = save_keyfile(&keyfile, &sts.keys().snapshot(), wrap.as_bytes()) {
                        eprintln!("key file: {e}");
                    }
                }
            }
        }));
    }

    if want(Part::Gateway) {
        let policy_text = std::fs::read_to_string(&cfg.policy).with_context(|| cfg.policy.display().to_string())?;
        let policy = Arc::new(load_policy(&policy_text).map_err(|e| anyhow!("{}: {e}", cfg.policy.display()))?);
        let selected: Vec<_> = cfg
            .gateways
            .iter()
            .filter(|g| only_gateway.is_none_or(|n| n == g.name))
            .collect();
        if selected.is_empty() {
            bail!("no gateway to start");
        }
        for g in selected {
            let sink = component_sink(cfg, &g.name);
            run.sinks.push(sink.clone());
            let gw = Gateway::new(
                g.profile()?,
                RouteTable::new(g.routes.clone())?,
                policy.clone(),
                Arc::new(HttpIntrospector::new(&g.sts_url, Duration::from_millis(g.introspect_timeout_ms))),
                Arc::new(HttpUpstream::new(Duration::from_millis(g.upstream_timeout_ms))),
                cfg.audit.breaker,
                sink as Arc<dyn EventSink>,
                clock.clone(),
            )?;
            let handle = server::spawn(msag_services::gateway::http::router(Arc::new(gw)), g.listen).await?;
            eprintln!("gateway {} listening on {}", g.name, handle.url());
            run.servers.push((g.name.clone(), handle));
        }
    }
    Ok(())
}
