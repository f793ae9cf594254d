use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dflow::functionals::FunctionalKind;
use dflow::lagrangian::CostKind;
use dflow::scenario::{
    cost_table_csv, parse_scenario, run_cost_table, run_scenario, run_trace, summary_table,
    ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "dflow", about = "Batch checker for the D-condition on model flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every check of a scenario and report pass/fail margins.
    Check {
        scenario: PathBuf,
        /// Directory for reports.json and summary.txt (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; checks are independent, reports stay ordered.
        #[arg(long)]
        parallel: Option<usize>,
        /// Override grid fields, e.g. --grid-override Nx=64,dt=0.001
        #[arg(long = "grid-override")]
        grid_override: Option<String>,
    },
    /// Print a functional trace along the scenario's flow as CSV.
    Trace {
        scenario: PathBuf,
        #[arg(long)]
        functional: TraceFunctional,
    },
    /// Print the action-cost table between two time slices as CSV.
    CostTable {
        scenario: PathBuf,
        #[arg(long)]
        family: FamilyArg,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        t: f64,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum TraceFunctional {
    F,
    W,
    Entropy,
}

#[derive(Copy, Clone, ValueEnum)]
enum FamilyArg {
    L0,
    Lminus,
    Lplus,
}

fn load(path: &PathBuf) -> Result<ScenarioConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_scenario(&text).map_err(|e| e.to_string())
}

fn apply_grid_override(config: &mut ScenarioConfig, spec: &str) -> Result<(), String> {
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("grid override {part:?}: expected key=value"))?;
        match key {
            "Nx" | "n_x" => {
                config.grid.n_x = value
                    .parse()
                    .map_err(|e| format!("grid override Nx: {e}"))?
            }
            "dt" => {
                config.grid.dt = value
                    .parse()
                    .map_err(|e| format!("grid override dt: {e}"))?
            }
            "K" | "k_layers" => {
                config.grid.k_layers = value
                    .parse()
                    .map_err(|e| format!("grid override K: {e}"))?
            }
            "W" | "window" => {
                config.grid.window = value
                    .parse()
                    .map_err(|e| format!("grid override W: {e}"))?
            }
            other => return Err(format!("grid override: unknown field {other:?}")),
        }
    }
    Ok(())
}

fn run() -> Result<u8, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Check {
            scenario,
            out,
            parallel,
            grid_override,
        } => {
            let mut config = load(&scenario)?;
            if let Some(spec) = &grid_override {
                apply_grid_override(&mut config, spec)?;
            }
            let outcome = run_scenario(&config, parallel).map_err(|e| e.to_string())?;
            let json = serde_json::to_string_pretty(&outcome.reports)
                .map_err(|e| e.to_string())?;
            let table = summary_table(&outcome.reports);
            let dir = out.or_else(|| config.output.directory.as_ref().map(PathBuf::from));
            match dir {
                Some(dir) => {
                    fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                    fs::write(dir.join("reports.json"), &json)
                        .map_err(|e| e.to_string())?;
                    fs::write(dir.join("summary.txt"), &table)
                        .map_err(|e| e.to_string())?;
                    eprint!("{table}");
                }
                None => {
                    println!("{json}");
                    eprint!("{table}");
                }
            }
            Ok(outcome.exit_code as u8)
        }
        Command::Trace {
            scenario,
            functional,
        } => {
            let config = load(&scenario)?;
            let kind = match functional {
                TraceFunctional::F => FunctionalKind::F,
                TraceFunctional::W => FunctionalKind::W,
                TraceFunctional::Entropy => FunctionalKind::Entropy,
            };
            let trace = run_trace(&config, kind).map_err(|e| e.to_string())?;
            println!("tau,value");
            for (tau, value) in trace.taus.iter().zip(&trace.values) {
                println!("{tau:.12e},{value:.12e}");
            }
            Ok(0)
        }
        Command::CostTable {
            scenario,
            family,
            s,
            t,
        } => {
            let config = load(&scenario)?;
            let kind = match family {
                FamilyArg::L0 => CostKind::L0,
                FamilyArg::Lminus => CostKind::Lminus,
                FamilyArg::Lplus => CostKind::Lplus,
            };
            let table = run_cost_table(&config, kind, s, t).map_err(|e| e.to_string())?;
            print!("{}", cost_table_csv(&table));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("dflow: {msg}");
            ExitCode::from(1)
        }
    }
}
