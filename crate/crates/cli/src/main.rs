mod commands;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clearnet::{Error, Law, Normalization};

#[derive(Parser, Debug)]
#[command(name = "clearnet", version, about = "Clearing vectors of interbank networks and their sensitivity to the liability matrix")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Network file: JSON, or CSV liability matrix together with --side.
    #[arg(long, short, global = true)]
    pub input: Option<PathBuf>,

    /// CSV side table (external_assets and optional society_liabilities) for CSV networks.
    #[arg(long, global = true)]
    pub side: Option<PathBuf>,

    /// Write the report here instead of standard output.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum, global = true)]
    pub format: Option<Format>,

    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,

    /// Worker threads for sampling; defaults to the machine parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Use the payout to society as the objective.
    #[arg(long, global = true)]
    pub society: bool,

    /// Use the completely connected network's perturbation space.
    #[arg(long, global = true)]
    pub complete: bool,

    #[arg(long, value_enum, default_value_t = NormalizeArg::None, global = true)]
    pub normalize: NormalizeArg,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clearing payments and default set.
    Clear,
    /// Directional derivative of the clearing vector along a perturbation.
    Sens(SensArgs),
    /// Worst-case first-order deviation or society shortfall.
    Worst,
    /// Fixed-support and complete-network bounds on the worst case.
    Bounds,
    /// Orthonormal basis of the perturbation space.
    Basis {
        /// Include every basis matrix.
        #[arg(long)]
        dump: bool,
    },
    /// Distribution of the deviation or society change under random perturbations.
    Dist(DistArgs),
    /// Quantile bands of the exact society payout change over a grid of step sizes.
    Bands(BandsArgs),
    /// Check the input and report every violated invariant.
    Validate,
}

#[derive(Args, Debug)]
pub struct SensArgs {
    /// JSON file holding the perturbation as an n x n array of rows.
    #[arg(long)]
    pub delta: PathBuf,

    /// Step size for a resolvent check against a full clearing solve.
    #[arg(long, allow_hyphen_values = true)]
    pub h: Option<f64>,

    /// Allow new links with positive weight.
    #[arg(long)]
    pub rewiring: bool,
}

#[derive(Args, Debug)]
pub struct DistArgs {
    #[arg(long, value_enum, default_value_t = LawArg::Uniform)]
    pub law: LawArg,

    #[arg(long, short = 'n', default_value_t = 100_000)]
    pub samples: usize,

    /// Also write the sorted samples as one CSV column.
    #[arg(long)]
    pub samples_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BandsArgs {
    #[arg(long, value_enum, default_value_t = LawArg::Uniform)]
    pub law: LawArg,

    /// Comma-separated step sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub h_grid: Vec<f64>,

    /// Comma-separated central coverage levels; 0 gives the median.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.9])]
    pub levels: Vec<f64>,

    #[arg(long, short = 'n', default_value_t = 10_000)]
    pub samples: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawArg {
    Uniform,
    Gaussian,
}

impl From<LawArg> for Law {
    fn from(l: LawArg) -> Law {
        match l {
            LawArg::Uniform => Law::UniformBall,
            LawArg::Gaussian => Law::Gaussian,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeArg {
    None,
    Clearing,
    Liabilities,
}

impl From<NormalizeArg> for Normalization {
    fn from(n: NormalizeArg) -> Normalization {
        match n {
            NormalizeArg::None => Normalization::None,
            NormalizeArg::Clearing => Normalization::Clearing,
            NormalizeArg::Liabilities => Normalization::Liabilities,
        }
    }
}

/// Open the report destination.
pub fn sink(path: Option<&PathBuf>) -> clearnet::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLEARNET_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    if let Some(threads) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }

    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Invalid(report) = &e {
                log::debug!("{} issue(s)", report.issues.len());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
