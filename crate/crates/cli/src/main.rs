use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use catrisk::analytics::SettingSummary;
use catrisk::io::{analyze_dir, grid_table, run_grid, simulate, summary_rows, ExperimentGrid, OutputOptions};
use catrisk::{load_config, Error, Params};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "catrisk", version, about = "Catastrophe insurance and reinsurance market simulator")]
struct Cli {
    /// Worker threads for ensembles (default: all cores).
    #[arg(long, global = true, env = "CATRISK_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an ensemble and write its output tree.
    Simulate(SimulateArgs),
    /// Recompute statistics from an output tree.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-cell experiment grid (margin of safety x reinsurance).
    Grid(GridArgs),
    /// Check a configuration file and print it with every default filled in.
    ValidateConfig { config: PathBuf },
}

#[derive(Args)]
struct Overrides {
    /// TOML configuration; missing keys take their standard values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Margin of safety.
    #[arg(long)]
    mu: Option<f64>,
    /// Disable reinsurance (and with it cat bonds).
    #[arg(long)]
    no_reinsurance: bool,
    #[arg(long)]
    t_max: Option<u32>,
    #[arg(long)]
    burn_in: Option<u32>,
}

impl Overrides {
    fn resolve(&self) -> catrisk::Result<Params> {
        let mut p = match &self.config {
            Some(path) => load_config(path)?,
            None => Params::default(),
        };
        if let Some(seed) = self.seed {
            p.seed = seed;
        }
        if let Some(mu) = self.mu {
            p.margin_of_safety = mu;
        }
        if self.no_reinsurance {
            p.reinsurance = false;
        }
        if let Some(t) = self.t_max {
            p.t_max = t;
        }
        if let Some(b) = self.burn_in {
            p.burn_in = b;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Risk-model diversity settings to run.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    settings: Vec<u32>,
    /// Replications per setting (default: from the configuration).
    #[arg(long)]
    replications: Option<u64>,
    #[arg(long, env = "CATRISK_OUT")]
    out: PathBuf,
    /// Also write every claim record.
    #[arg(long)]
    settlements: bool,
    /// Skip the per-step series files.
    #[arg(long)]
    no_series: bool,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Grid definition; without it the four standard cells are run.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Replications per setting for the standard cells.
    #[arg(long, default_value_t = 20)]
    replications: u64,
    #[arg(long, env = "CATRISK_OUT")]
    out: PathBuf,
    /// Write per-step series for every run.
    #[arg(long)]
    series: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|cause| {
                matches!(
                    cause.downcast_ref::<Error>(),
                    Some(Error::Config { .. } | Error::UnknownKey(_) | Error::Parse { .. })
                )
            });
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate(args) => {
            let params = args.overrides.resolve()?;
            let replications = args.replications.unwrap_or(u64::from(params.replications));
            let outputs = OutputOptions { series: !args.no_series, settlements: args.settlements };
            let out = simulate(&params, &args.settings, replications, &args.out, outputs)?;
            for f in &out.manifest.failures {
                eprintln!("setting {} replication {} failed: {}", f.setting, f.replication, f.error);
            }
            print_summaries(&out.summaries);
            println!("wrote {}", args.out.display());
        }
        Command::Analyze { input, out } => {
            let analysis = analyze_dir(&input, &out)?;
            print_summaries(&analysis.summaries);
            for ((setting, t, kind), ratio) in &analysis.size_ratios {
                println!("setting {setting} step {t} {kind:?}: largest/median size {ratio:.2}");
            }
            println!("wrote {}", out.display());
        }
        Command::Grid(args) => {
            let base = args.overrides.resolve()?;
            let grid = match &args.grid {
                Some(path) => ExperimentGrid::load(path)?,
                None => ExperimentGrid::four_cells(args.replications, base.t_max, base.seed),
            };
            let outputs = OutputOptions { series: args.series, settlements: false };
            let reports = run_grid(&base, &grid, &args.out, outputs)?;
            print!("{}", grid_table(&reports));
            if reports.iter().all(|r| r.result.is_err()) {
                anyhow::bail!("every grid cell failed");
            }
        }
        Command::ValidateConfig { config } => {
            let params = load_config(&config)?;
            print!("{}", params.to_toml_string());
            eprintln!("{}: ok", display(&config));
        }
    }
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn print_summaries(summaries: &[SettingSummary]) {
    println!("{:>8} {:>6} {:>9} {:>12} {:>10}", "setting", "reps", "cascades", ">10% events", "slope");
    for row in summary_rows(summaries) {
        let slope = row.lambda_hat.map(|l| format!("{l:.1}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>8} {:>6} {:>9} {:>12} {:>10}",
            row.setting, row.replications, row.cascades, row.tail_events, slope
        );
    }
}
