use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cvgrid_cli::{parse_override, save_results, submit_and_monitor, ClientSettings, SaveRoots, EXIT_CONFIG};
use cvgrid_core::job::{Locator, ResourceClass};
use cvgrid_service::cluster::LocalCluster;
use cvgrid_service::coordinator::{self, CoordinatorConfig};
use cvgrid_service::worker::{register_worker, FunctionalityRegistry, WorkerConfig, WorkerProfile};

#[derive(Parser)]
#[command(name = "cvgrid", version, about = "Distributed image-processing jobs on a desk-scale cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordinator: HTTP API, event channel, broker and relay listeners.
    Coordinator(CoordinatorArgs),
    /// Run a worker that pulls tasks for the given resource classes.
    Worker(WorkerArgs),
    /// Submit a job from a config file and stream its output.
    Submit(SubmitArgs),
    /// Copy the artifacts of a finished job.
    Save(SaveArgs),
    /// Run a coordinator plus one gpu and two cpu workers in one process.
    Cluster(ClusterArgs),
}

#[derive(Args)]
struct CoordinatorArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    http: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:5672")]
    broker: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:5673")]
    relay: SocketAddr,
    #[arg(long, default_value = "cvgrid-data")]
    storage_root: PathBuf,
    #[arg(long)]
    dropbox_root: Option<PathBuf>,
    /// Directory with the web console bundle, served at `/`.
    #[arg(long)]
    console_dir: Option<PathBuf>,
    /// Seconds a delivery may stay unacknowledged without a heartbeat.
    #[arg(long, default_value_t = 60)]
    visibility_timeout: u64,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, default_value = "127.0.0.1:5672")]
    broker: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:5673")]
    relay: SocketAddr,
    /// Comma-separated resource classes, e.g. `gpu,cpu`.
    #[arg(long, value_delimiter = ',', default_value = "cpu")]
    classes: Vec<ResourceClass>,
    #[arg(long, default_value_t = 1)]
    slots: usize,
    #[arg(long, default_value = "cvgrid-data")]
    storage_root: PathBuf,
    #[arg(long)]
    dropbox_root: Option<PathBuf>,
    /// Threads for a task's internal parallelism.
    #[arg(long, default_value_t = 2)]
    threads: usize,
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct SubmitArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    coordinator: String,
    /// Submit without a user token.
    #[arg(long)]
    anonymous: bool,
    #[arg(long, env = cvgrid_cli::TOKEN_ENV)]
    token: Option<String>,
    /// Copy artifacts to this `scheme:path` once the job is done.
    #[arg(long)]
    save: Option<Locator>,
    #[arg(long, default_value = "dropbox")]
    dropbox_root: PathBuf,
}

#[derive(Args)]
struct SaveArgs {
    job_id: String,
    /// Destination as `local:<dir>` or `dropbox:<dir>`.
    target: Locator,
    #[arg(long, default_value = "127.0.0.1:8080")]
    coordinator: String,
    #[arg(long, default_value = "dropbox")]
    dropbox_root: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    http: SocketAddr,
    #[arg(long, default_value = "cvgrid-data")]
    storage_root: PathBuf,
    #[arg(long)]
    console_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let code = runtime.block_on(async {
        match cli.command {
            Command::Submit(args) => submit(args).await,
            Command::Save(args) => save(args).await,
            Command::Coordinator(args) => report(run_coordinator(args).await),
            Command::Worker(args) => report(run_worker(args).await),
            Command::Cluster(args) => report(run_cluster(args).await),
        }
    });
    ExitCode::from(code as u8)
}

fn report(result: anyhow::Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

async fn submit(args: SubmitArgs) -> i32 {
    let mut overrides = BTreeMap::new();
    for raw in &args.overrides {
        match parse_override(raw) {
            Ok((k, v)) => {
                overrides.insert(k, v);
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    }
    let settings = ClientSettings {
        overrides,
        authenticated: !args.anonymous,
        token: args.token,
        ..ClientSettings::new(&args.config, &args.coordinator)
    };
    let mut stdout = std::io::stdout();
    let summary = match submit_and_monitor(&settings, &mut stdout).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    eprintln!("job {} {}", summary.job_id, if summary.succeeded { "done" } else { "failed" });
    if let (Some(target), true) = (&args.save, summary.succeeded) {
        let roots = SaveRoots { dropbox: args.dropbox_root };
        match save_results(&args.coordinator, &summary.job_id, target, &roots).await {
            Ok(paths) => eprintln!("saved {} artifacts to {target}", paths.len()),
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        }
    }
    summary.exit_code()
}

async fn save(args: SaveArgs) -> i32 {
    let roots = SaveRoots { dropbox: args.dropbox_root };
    match save_results(&args.coordinator, &args.job_id, &args.target, &roots).await {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

async fn run_coordinator(args: CoordinatorArgs) -> anyhow::Result<()> {
    let config = CoordinatorConfig {
        http_addr: args.http,
        broker_addr: args.broker,
        relay_addr: args.relay,
        storage_root: args.storage_root,
        dropbox_root: args.dropbox_root,
        console_dir: args.console_dir,
        visibility_timeout: Duration::from_secs(args.visibility_timeout),
    };
    let handle = coordinator::start(config).await.context("starting coordinator")?;
    tracing::info!(http = %handle.http_addr, broker = %handle.broker_addr, relay = %handle.relay_addr, "coordinator up");
    handle.wait().await;
    Ok(())
}

async fn run_worker(args: WorkerArgs) -> anyhow::Result<()> {
    let id = args.id.unwrap_or_else(|| {
        let classes: Vec<&str> = args.classes.iter().map(|c| c.name()).collect();
        format!("{}-{}", classes.join("+"), std::process::id())
    });
    let profile = WorkerProfile::new(id, args.classes, args.slots)?;
    let mut config = WorkerConfig::new(profile, args.broker, args.relay, args.storage_root);
    config.dropbox_root = args.dropbox_root;
    config.threads = args.threads;
    let handle = register_worker(config, FunctionalityRegistry::standard())
        .await
        .context("registering worker")?;
    tracing::info!(worker = %handle.worker_id, "worker up");
    handle.wait().await;
    Ok(())
}

async fn run_cluster(args: ClusterArgs) -> anyhow::Result<()> {
    let mut config = CoordinatorConfig::ephemeral(&args.storage_root);
    config.http_addr = args.http;
    config.console_dir = args.console_dir;
    let cluster = LocalCluster::start_with(config, LocalCluster::default_profiles(), FunctionalityRegistry::standard())
        .await
        .context("starting local cluster")?;
    tracing::info!(url = %cluster.base_url(), workers = cluster.workers.len(), "local cluster up");
    tokio::signal::ctrl_c().await?;
    Ok(())
}
