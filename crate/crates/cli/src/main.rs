//! `reprobe`: layer similarity, attention masks and feature maps from
//! activation dump bundles.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, Outputs};

#[derive(Parser)]
#[command(
    name = "reprobe",
    version,
    about = "Representation analysis over activation dump bundles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a bundle's manifest.
    Info { bundle: PathBuf },
    /// Linear CKA between the activation layers of two bundles.
    Cka {
        bundle_a: PathBuf,
        bundle_b: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "heat")]
        palette: String,
        /// Pixels per matrix cell in the heatmap.
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..=1024))]
        cell_px: u32,
        #[arg(long, default_value = "auto")]
        route: String,
    },
    /// Attention weight mask overlays for a ViT bundle.
    Attn {
        bundle: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cls")]
        mask_row: String,
        #[arg(long, default_value = "nearest")]
        upsample: String,
    },
    /// Channel-mean feature maps for a CNN bundle.
    Fmap {
        bundle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated glob patterns over entry names.
    #[arg(long, default_value = "")]
    layers: String,
}

fn configure_threads() {
    let Ok(raw) = std::env::var("REPROBE_THREADS") else {
        return;
    };
    match raw.trim().parse::<usize>() {
        Ok(0) => {}
        Ok(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
            {
                log::warn!("could not size thread pool: {e}");
            }
        }
        Err(_) => log::warn!("ignoring REPROBE_THREADS={raw:?}; expected a non-negative integer"),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (out, outputs): (PathBuf, Outputs) = match cli.command {
        Command::Info { bundle } => {
            print!("{}", commands::info(&bundle)?);
            return Ok(());
        }
        Command::Cka {
            bundle_a,
            bundle_b,
            common,
            palette,
            cell_px,
            route,
        } => {
            let layers = commands::parse_layers(&common.layers)?;
            let outputs = commands::cka(
                &bundle_a,
                &bundle_b,
                &layers,
                &route,
                &palette,
                cell_px as usize,
            )?;
            (common.out, outputs)
        }
        Command::Attn {
            bundle,
            common,
            mask_row,
            upsample,
        } => {
            let layers = commands::parse_layers(&common.layers)?;
            (
                common.out,
                commands::attn(&bundle, &layers, &mask_row, &upsample)?,
            )
        }
        Command::Fmap { bundle, common } => {
            let layers = commands::parse_layers(&common.layers)?;
            (common.out, commands::fmap(&bundle, &layers)?)
        }
    };
    commands::write_outputs(&out, &outputs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(e.exit)
        }
    }
}
