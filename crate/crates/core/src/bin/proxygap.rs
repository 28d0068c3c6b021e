use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use proxygap::chart::emit_charts;
use proxygap::data::{gen_dataset, save_splits, DatasetConfig};
use proxygap::experiment::{read_text, run_experiment, ExperimentName, ExperimentSpec, Scale, OUT_ENV};
use proxygap::metrics::ConfigReport;
use proxygap::verify::verify_tables;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(version, about = "Proxy-versus-probe gap experiments on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment over its seed sweep.
    Run {
        /// primary, background_only, relevance_only or custom
        name: String,
        #[arg(long, default_value = "smoke")]
        scale: String,
        /// Comma-separated seeds (default 42,123,456)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output root
        #[arg(long, env = OUT_ENV, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// TOML file with θ overrides (custom experiments)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render SVG charts from one or more report JSON files.
    Charts {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Defaults to a `charts` directory beside the first report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a report's gap signs and criterion counts with a reference table.
    Verify { report: PathBuf, reference: PathBuf },
    /// Generate and save the four splits of one dataset config.
    GenData {
        config: PathBuf,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
}

fn load_report(path: &Path) -> anyhow::Result<ConfigReport> {
    ConfigReport::from_json(&read_text(path)?).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            name,
            scale,
            seeds,
            out,
            workers,
            config,
        } => {
            let name: ExperimentName = name.parse()?;
            let scale: Scale = scale.parse()?;
            let mut spec = match (name, config) {
                (ExperimentName::Custom, Some(path)) => {
                    let mut spec = ExperimentSpec::custom_from_toml(&read_text(&path)?, &out)?;
                    spec.scale = scale;
                    spec
                }
                (ExperimentName::Custom, None) => bail!(proxygap::Error::Usage("custom needs --config FILE".into())),
                (_, Some(_)) => bail!(proxygap::Error::Usage("--config applies only to custom".into())),
                (name, None) => ExperimentSpec::named(name, scale, &out)?,
            };
            if let Some(seeds) = seeds {
                spec.seeds = seeds;
            }
            spec.workers = workers;
            let manifest = run_experiment(&spec)?;
            if !manifest.is_complete() {
                for e in &manifest.errors {
                    eprintln!("error: {e}");
                }
                bail!("run incomplete; see {}", spec.experiment_dir().join("manifest.json").display());
            }
            print!("{}", manifest.load_report()?.to_csv_string());
            eprintln!("wrote {} in {:.1}s", spec.experiment_dir().display(), manifest.wall_seconds);
        }
        Command::Charts { reports, out } => {
            let loaded = reports.iter().map(|p| load_report(p)).collect::<anyhow::Result<Vec<_>>>()?;
            let dir = out.unwrap_or_else(|| reports[0].parent().unwrap_or(Path::new(".")).join("charts"));
            for p in emit_charts(&loaded, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { report, reference } => {
            let verdict = verify_tables(&load_report(&report)?, &read_text(&reference)?)?;
            for d in &verdict.diffs {
                println!("{d}");
            }
            if !verdict.passed() {
                bail!("{} cell(s) differ", verdict.diffs.len());
            }
            println!("pass");
        }
        Command::GenData { config, out } => {
            let cfg = DatasetConfig::from_toml_str(&read_text(&config)?)?;
            save_splits(&out, &gen_dataset(&cfg)?)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<proxygap::Error>(), Some(proxygap::Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
