use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use groupwise::api::router;
use groupwise::commands::{decode_records, run_step_loop, DecodeOptions};
use groupwise::CampaignStore;
use groupwise_core::decoder::HybridConfig;
use groupwise_core::posterior::SmcConfig;
use groupwise_core::simulator::{export, run_batch, AssaySource, NoiseSpec, SessionConfig, SimulationConfig};

#[derive(Parser)]
#[command(name = "groupwise", version, about = "Adaptive noisy group testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run simulated campaigns and write metrics.csv and trajectories.jsonl.
    Simulate(SimulateArgs),
    /// Live campaigns.
    #[command(subcommand)]
    Campaign(CampaignCommand),
    /// Decode a file of recorded tests (`members outcome` per line).
    Decode(DecodeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Master seed; overrides the one in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum CampaignCommand {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "campaigns")]
        data: PathBuf,
        /// Directory of static files served under /ui.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Create a campaign from a session config (JSON) and print its id.
    Create {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "campaigns")]
        data: PathBuf,
    },
    /// Step through a campaign interactively in the terminal.
    Step {
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "campaigns")]
        data: PathBuf,
    },
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    tests: PathBuf,
    /// Population size; one past the largest index by default.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    #[arg(long, default_value_t = 0.97)]
    specificity: f64,
    #[arg(long, default_value_t = 0.85)]
    sensitivity: f64,
    #[arg(long)]
    n_max: Option<usize>,
    /// Particles for the sampling fallback.
    #[arg(long, default_value_t = 10_000)]
    particles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print JSON instead of one `index probability` line per individual.
    #[arg(long)]
    json: bool,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Campaign(CampaignCommand::Serve { port, host, data, ui }) => serve(&host, port, data, ui),
        Command::Campaign(CampaignCommand::Create { config, id, data }) => {
            let store = CampaignStore::open(data)?;
            let view = store.create(id, read_session_config(&config)?)?;
            println!("{}", view.id);
            Ok(())
        }
        Command::Campaign(CampaignCommand::Step { id, data }) => {
            let store = CampaignStore::open(data)?;
            let stdin = std::io::stdin();
            run_step_loop(&store, &id, BufReader::new(stdin.lock()), std::io::stdout())
        }
        Command::Decode(a) => decode(a),
    }
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = SimulationConfig::from_file(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let parallelism = a
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_batch(&cfg, a.runs, parallelism)?;
    export(&result, &a.out)?;
    for r in result.metrics.rows.iter().filter(|r| r.cycle == cfg.cycles) {
        println!(
            "{:<16} cycle {} threshold {:.3}: sensitivity {:.4} specificity {:.4}",
            r.policy, r.cycle, r.threshold, r.mean_sensitivity, r.mean_specificity
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Reads a session config; a relative assay path is taken relative to the
/// config file.
fn read_session_config(path: &Path) -> anyhow::Result<SessionConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: SessionConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(AssaySource::Path(p)) = &mut cfg.assay {
        if p.is_relative() {
            *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
        }
    }
    Ok(cfg)
}

fn serve(host: &str, port: u16, data: PathBuf, ui: Option<PathBuf>) -> anyhow::Result<()> {
    let store = Arc::new(CampaignStore::open(&data).with_context(|| format!("opening {}", data.display()))?);
    let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(store, ui))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.tests).with_context(|| format!("reading {}", a.tests.display()))?;
    let opts = DecodeOptions {
        n: a.n,
        q: a.q,
        noise: NoiseSpec::constant(a.specificity, a.sensitivity),
        n_max: a.n_max,
        decoder: HybridConfig::default(),
        smc: SmcConfig {
            num_particles: a.particles,
            ..Default::default()
        },
        seed: a.seed,
    };
    let report = decode_records(&text, &opts)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for (i, p) in report.marginal.iter().enumerate() {
            println!("{i}\t{p:.6}");
        }
        eprintln!(
            "{} tests decoded by {:?} ({} belief-propagation iterations)",
            report.tests, report.source, report.lbp_iterations
        );
    }
    Ok(())
}
