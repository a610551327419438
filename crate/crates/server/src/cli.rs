//! `regmark` command line.

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};

use regmark_bench::{run_benchmark, BenchmarkConfig};
use regmark_core::annotation::DEFAULT_ALPHA;
use regmark_core::evaluation::{entropy_map, error_heat_map};
use regmark_core::{GpSession, KernelSpec, Strategy, TransformField};

use crate::evaluate::{evaluate, load_annotations, load_points, load_transforms, write_reports};
use crate::images::load_image;
use crate::maps::{render, MapKind};
use crate::session::SessionDefaults;
use crate::store::SessionStore;

/// Exit status for usage errors, matching clap's own.
pub const USAGE_EXIT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "regmark", version, about = "Registration gold standards from uncertain landmark annotations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a synthetic benchmark from a JSON config.
    Benchmark(BenchmarkArgs),
    /// Score candidate transformations with landmark and posterior-based scores.
    Evaluate(EvaluateArgs),
    /// Write error, entropy and blended maps for a saved session.
    Maps(MapsArgs),
    /// Serve the HTTP annotation API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Benchmark config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for results.csv and summary.json.
    #[arg(long, default_value = "regmark-out")]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restricts the strategies run (repeatable).
    #[arg(long)]
    pub strategy: Vec<Strategy>,
    /// Overrides the config's annotation budget.
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Annotations as CSV (x0,x1,y0,y1,s00,s01,s11 in 2-D) or JSON.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of candidate transformations, each `<name>.json` + `<name>.raw`.
    #[arg(long)]
    pub transforms: PathBuf,
    /// Kernel spec (JSON with basis, scales, weights, dimension).
    #[arg(long)]
    pub kernel: PathBuf,
    /// Target points (JSON array); defaults to the transform grid nodes.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Grid stride for default targets.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    /// Output directory for scores_landmark.csv and scores_proposed.csv.
    #[arg(long, default_value = "regmark-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapsArgs {
    /// Saved session (JSON document with kernel and annotations).
    #[arg(long)]
    pub session: PathBuf,
    /// Candidate transformation base path (`<base>.json` + `<base>.raw`).
    #[arg(long)]
    pub transform: PathBuf,
    /// Fixed image used as the blended map's background.
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Replaces the session's kernel.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Evaluate every `stride` grid nodes.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value = "regmark-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory holding images and transforms.
    #[arg(long, env = "REGMARK_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
    /// Persist sessions as append-only logs here and replay them on start.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Default kernel spec for new sessions.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Default suggestion strategy for new sessions.
    #[arg(long, default_value = "entropy")]
    pub strategy: Strategy,
    /// Default seed for new sessions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Default annotation budget for new sessions.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Default confidence level of ellipse annotations.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

fn read_kernel(path: &Path) -> anyhow::Result<KernelSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading kernel {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing kernel {}", path.display()))
}

fn usage_error(subcommand: &str, message: &str) -> i32 {
    let mut cmd = Cli::command();
    let usage = cmd
        .find_subcommand_mut(subcommand)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    eprintln!("error: {message}\n\n{usage}");
    USAGE_EXIT
}

fn benchmark(args: &BenchmarkArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config)?;
    let mut config = BenchmarkConfig::from_json(&text).context("invalid benchmark config")?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if !args.strategy.is_empty() {
        config.strategies = args.strategy.clone();
    }
    if let Some(budget) = args.budget {
        config.budget = budget;
    }
    config.validate().context("invalid benchmark config")?;
    let result = run_benchmark(&config)?;
    result.write_to_dir(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> anyhow::Result<()> {
    let annotations = load_annotations(&args.annotations)?;
    let transforms = load_transforms(&args.transforms)?;
    let kernel = read_kernel(&args.kernel)?;
    let targets = args.targets.as_deref().map(load_points).transpose()?;
    let evaluation = evaluate(&annotations, &transforms, &kernel, targets, args.stride)?;
    let (landmark, proposed) = write_reports(&evaluation, &args.out)?;
    println!("wrote {} and {}", landmark.display(), proposed.display());
    Ok(())
}

fn maps_cmd(args: &MapsArgs) -> anyhow::Result<()> {
    let file = fs::File::open(&args.session).with_context(|| format!("opening {}", args.session.display()))?;
    let mut session = GpSession::load_json(file)?;
    if let Some(path) = &args.kernel {
        let doc = session.to_document()?;
        session = GpSession::from_document(regmark_core::gp::SessionDocument {
            kernel: read_kernel(path)?,
            ..doc
        })?;
    }
    let phi_hat = TransformField::read_raw(&args.transform)
        .with_context(|| format!("reading transform {}", args.transform.display()))?;
    if phi_hat.dimension() != session.dimension() {
        bail!("transform is {}-D, session is {}-D", phi_hat.dimension(), session.dimension());
    }
    if args.stride == 0 {
        bail!("stride must be positive");
    }
    fs::create_dir_all(&args.out)?;
    let geometry = phi_hat.geometry.clone();
    let grid = geometry.strided(args.stride);
    error_heat_map(&phi_hat, &session, &grid)?.write_raw(&args.out.join("error"))?;
    entropy_map(&session, &grid)?.write_raw(&args.out.join("entropy"))?;
    if geometry.dimension() == 2 {
        let background = args.fixed.as_deref().map(load_image).transpose()?;
        for kind in [MapKind::Error, MapKind::Entropy, MapKind::Blended] {
            let map = render(kind, &session, &geometry, args.stride, Some(&phi_hat), background.as_ref())?;
            fs::write(args.out.join(format!("{kind}.png")), map.png)?;
        }
    }
    println!("wrote maps to {}", args.out.display());
    Ok(())
}

async fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let defaults = SessionDefaults {
        kernel: args.kernel.as_deref().map(read_kernel).transpose()?,
        strategy: args.strategy,
        seed: args.seed,
        budget: args.budget,
        alpha: args.alpha,
    };
    let store = match &args.log_dir {
        Some(dir) => SessionStore::on_disk(&args.data_dir, dir, defaults)?,
        None => SessionStore::in_memory(&args.data_dir, defaults),
    };
    let restored = store.ids()?.len();
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("invalid listen address")?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{} ({restored} sessions restored)", listener.local_addr()?);
    axum::serve(listener, crate::api::router(Arc::new(store)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Benchmark(a) => {
            if !a.config.is_file() {
                return usage_error("benchmark", &format!("config file {} not found", a.config.display()));
            }
            benchmark(a)
        }
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Maps(a) => maps_cmd(a),
        Command::Serve(a) => tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .context("starting the async runtime")
            .and_then(|rt| rt.block_on(serve(a))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
