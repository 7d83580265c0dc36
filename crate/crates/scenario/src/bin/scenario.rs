//! Scenario runner: run bundled or custom scenarios, compute metrics, draw
//! figures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgrid_runtime::record::read_record;
use mgrid_scenario::plot::{comparison_figure, emit_plots};
use mgrid_scenario::run::SCENARIO_FILE;
use mgrid_scenario::scenario::BUNDLED;
use mgrid_scenario::{bundled, compute_metrics, run_scenario, Limits, MetricsOptions, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "scenario", version, about = "Run microgrid testbed scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file or a bundled scenario by name.
    Run {
        scenario: String,
        /// In-process lockstep instead of realtime TCP.
        #[arg(long)]
        accelerated: bool,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        no_plots: bool,
    },
    /// Metrics for a run record. Limits come from the scenario copy saved
    /// next to the record unless --scenario is given.
    Metrics {
        record: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Figures for a run record.
    Plot {
        record: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        /// Second record to draw next to the first.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Defaults to the record's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Names of the bundled scenarios.
    List,
    /// Print a bundled scenario.
    Show { name: String },
}

fn load_scenario(arg: &str) -> Result<Scenario, String> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::load(path).map_err(|e| e.to_string());
    }
    bundled(arg).ok_or_else(|| format!("{arg}: no such file or bundled scenario"))
}

fn scenario_for(record: &Path, arg: Option<&str>) -> Result<Scenario, String> {
    match arg {
        Some(a) => load_scenario(a),
        None => {
            let beside = record.with_file_name(SCENARIO_FILE);
            Scenario::load(&beside).map_err(|e| format!("{e} (pass --scenario to name the scenario)"))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Run { scenario, accelerated, out, no_plots } => {
            let s = load_scenario(&scenario)?;
            let opts = if accelerated { RunOptions::accelerated(out) } else { RunOptions::realtime(out) };
            let outcome = run_scenario(&s, &opts).map_err(|e| e.to_string())?;
            println!("{}", outcome.metrics.to_json());
            if !no_plots {
                let rows = read_record(&outcome.record).map_err(|e| e.to_string())?;
                for f in emit_plots(&rows, &Limits::of(&s), &outcome.dir).map_err(|e| e.to_string())? {
                    log::info!("wrote {}", f.display());
                }
            }
            if outcome.metrics.violations.total() > 0 {
                return Err(format!("{} limit violations", outcome.metrics.violations.total()));
            }
            Ok(())
        }
        Cmd::Metrics { record, scenario } => {
            let s = scenario_for(&record, scenario.as_deref())?;
            let rows = read_record(&record).map_err(|e| e.to_string())?;
            println!("{}", compute_metrics(&rows, &Limits::of(&s), &MetricsOptions::default()).to_json());
            Ok(())
        }
        Cmd::Plot { record, scenario, compare, out } => {
            let s = scenario_for(&record, scenario.as_deref())?;
            let limits = Limits::of(&s);
            let rows = read_record(&record).map_err(|e| e.to_string())?;
            let dir = out.unwrap_or_else(|| record.parent().map(Path::to_path_buf).unwrap_or_default());
            let mut files = emit_plots(&rows, &limits, &dir).map_err(|e| e.to_string())?;
            if let Some(other) = compare {
                let other_rows = read_record(&other).map_err(|e| e.to_string())?;
                let name = |p: &Path| {
                    p.parent().and_then(|d| d.file_name()).map_or("run".to_string(), |n| n.to_string_lossy().into_owned())
                };
                let (a, b) = (name(&record), name(&other));
                let path = dir.join(format!("compare_{a}_{b}.svg"));
                files.push(comparison_figure((&a, &rows), (&b, &other_rows), &limits, &path).map_err(|e| e.to_string())?);
            }
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Cmd::List => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            Ok(())
        }
        Cmd::Show { name } => {
            let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name).ok_or_else(|| format!("no bundled scenario {name}"))?;
            print!("{text}");
            Ok(())
        }
    }
}
