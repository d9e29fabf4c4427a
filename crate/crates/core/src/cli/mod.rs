//! Scenario runner behind the `disthash` binary.
//!
//! Exit status: 0 when the run settles cleanly, 1 on an invariant violation
//! or an object lost that the scenario did not expect, 2 when the scenario
//! cannot be read, parsed or validated.

pub mod metrics;
pub mod run;
pub mod scenario;

use std::io::Write;
use std::path::PathBuf;

use clap::Parser;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_SCENARIO: i32 = 2;

#[derive(Parser, Debug, Clone)]
#[command(name = "disthash", about = "Run a DistHash scenario in the simulator")]
pub struct Args {
    /// Scenario file to run.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes the event trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Writes metrics here instead of stdout.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Parses and validates the scenario without running it.
    #[arg(long)]
    pub check: bool,
}

/// Runs the CLI and returns the process exit status.
pub fn main_with(args: &Args, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let text = match std::fs::read_to_string(&args.scenario) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}: {e}", args.scenario.display());
            return EXIT_SCENARIO;
        }
    };
    let sc = match scenario::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}: {e}", args.scenario.display());
            return EXIT_SCENARIO;
        }
    };
    if args.check {
        let _ = writeln!(stdout, "scenario ok nodes={} events={}", sc.nodes.len(), sc.events.len());
        return EXIT_OK;
    }
    let outcome = match run::execute(&sc, args.seed, args.trace.is_some()) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_SCENARIO;
        }
    };
    if let Some(path) = &args.trace {
        if let Err(e) = std::fs::write(path, outcome.sim.trace().render()) {
            let _ = writeln!(stderr, "error: {}: {e}", path.display());
            return EXIT_SCENARIO;
        }
    }
    let text = metrics::render(&outcome);
    match &args.metrics {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &text) {
                let _ = writeln!(stderr, "error: {}: {e}", path.display());
                return EXIT_SCENARIO;
            }
        }
        None => {
            let _ = stdout.write_all(text.as_bytes());
        }
    }
    for v in &outcome.violations {
        let _ = writeln!(stderr, "violation {v}");
    }
    if outcome.violations.is_empty() {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}
