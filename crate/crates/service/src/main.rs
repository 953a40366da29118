use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use segd_service::{serve, Session, DEFAULT_PORT};

/// Interactive segmentation session over HTTP.
#[derive(Parser)]
#[command(name = "segd-service", version)]
struct Args {
    /// Project directory holding volume.mvol and stage outputs.
    #[arg(long)]
    project: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Worker threads for stage execution; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Some(n) = args.jobs {
        rayon_pool(n)?;
    }
    let session = Session::open(&args.project).with_context(|| format!("opening {}", args.project.display()))?;
    tokio::runtime::Runtime::new()?.block_on(serve(session, args.port))?;
    Ok(())
}

fn rayon_pool(n: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")
}
