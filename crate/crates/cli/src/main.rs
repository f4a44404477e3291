use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use updp::pipeline::{run_stage, PipelineConfig, Stage};
use updp::supernet::PruneMask;
use updp::Error;

/// Progressive depth pruning pipeline.
#[derive(Parser, Debug)]
#[command(name = "updp", version)]
struct Cli {
    /// One of train-supernet, search, train-subnet, merge, verify, flops, report.
    stage: Stage,
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Explicit pruning mask such as 00110100; skips supernet training and search.
    #[arg(long)]
    mask: Option<PruneMask>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let in_stage = |e: Error| Error::Stage {
        stage: cli.stage.name().into(),
        msg: e.to_string(),
    };
    let mut cfg = PipelineConfig::load(&cli.config).map_err(in_stage)?;
    if let Some(m) = &cli.mask {
        cfg.mask = Some(m.clone());
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    let outcome = run_stage(&cfg, cli.stage, &mut |rec| eprintln!("{rec}"))?;
    if let Some(t) = outcome.table {
        print!("{t}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
