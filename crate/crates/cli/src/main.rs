mod report;
mod serve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trainsim::runner::{run_scenario, write_artifacts, EXIT_INVALID};
use trainsim::scenario::Scenario;

#[derive(Parser)]
#[command(name = "trainsim", version, about = "Deterministic 3D-parallel training simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write its artifacts.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact directory; overrides the scenario's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive a report from an artifact directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum)]
        kind: report::Kind,
        /// Heat map dimension: rank, node, dp_idx, pp_idx, tp_idx.
        #[arg(long, default_value = "rank")]
        dim: String,
        /// Trace group as `dim:index`, e.g. `pp:0`.
        #[arg(long, default_value = "pp:0")]
        group: String,
        /// Rank counts for the group-init scaling table; defaults to the
        /// scenario's size times 1, 2, 4, 8 and 16.
        #[arg(long, value_delimiter = ',')]
        ns: Vec<usize>,
        /// Output file; `-` writes to stdout. Defaults to `<dir>/reports/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API over an artifact directory, or over a live
    /// control plane built from a scenario file with `--live`.
    Serve {
        path: PathBuf,
        #[arg(long)]
        live: bool,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simulated seconds per wall-clock second in live mode.
        #[arg(long, default_value_t = 10.0)]
        speed: f64,
        /// Overrides the scenario's seed in live mode.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run { scenario, seed, out } => cmd_run(&scenario, seed, out),
        Cmd::Report { dir, kind, dim, group, ns, out } => {
            let opts = report::Options { dim, group, ns };
            match report::cmd_report(&dir, kind, &opts, out.as_deref()) {
                Ok(()) => 0,
                Err(e) => fail(e),
            }
        }
        Cmd::Serve { path, live, port, speed, seed } => match serve::cmd_serve(&path, live, port, speed, seed) {
            Ok(()) => 0,
            Err(e) => fail(e),
        },
    };
    ExitCode::from(code as u8)
}

fn fail(e: impl std::fmt::Display) -> i32 {
    eprintln!("error: {e}");
    EXIT_INVALID
}

pub(crate) fn load_scenario(path: &Path, seed: Option<u64>) -> trainsim::Result<Scenario> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn cmd_run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> i32 {
    let s = match load_scenario(path, seed) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let dir = out.or_else(|| s.output_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| {
        let stem = path.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        PathBuf::from("out").join(stem)
    });
    let a = match run_scenario(&s) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    if let Err(e) = write_artifacts(&dir, &s, &a) {
        return fail(e);
    }
    let m = &a.summary;
    println!(
        "{:?}: {}/{} steps in {:.3}s, {} recoveries, effective time {:.4}, artifacts in {}",
        m.outcome,
        m.steps_completed,
        m.steps,
        m.elapsed,
        m.recoveries.len(),
        m.effective_time_rate,
        dir.display()
    );
    m.exit_code
}
