use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridmeter_core::{verify_chain, ChainStatus, Ledger};
use gridmeter_sim::{load_scenario, read_ndjson, run_scenario, summarize, with_seed, write_outputs};

/// Location-independent metering simulator.
#[derive(Parser)]
#[command(name = "gridmeter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trace, metrics and ledgers into a directory.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check an exported ledger file. Exit 0 when valid, 1 when not.
    VerifyLedger { file: PathBuf },
    /// Print counts per record and message kind for a trace.
    Summarize { trace: PathBuf },
}

const VERIFY_FAILED: u8 = 1;
const IO_OR_PARSE: u8 = 2;

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(IO_OR_PARSE)
}

fn run(scenario: PathBuf, out: PathBuf, seed: Option<u64>) -> ExitCode {
    let mut s = match load_scenario(&scenario) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if let Some(seed) = seed {
        s = with_seed(&s, seed);
    }
    let result = match run_scenario(&s) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let files = match write_outputs(&result, &out) {
        Ok(f) => f,
        Err(e) => return fail(format!("{}: {e}", out.display())),
    };
    print!("{}", result.metrics.summary());
    println!("wrote {} files to {}", files.len(), out.display());
    ExitCode::SUCCESS
}

fn verify_ledger(file: PathBuf) -> ExitCode {
    let bytes = match fs::read(&file) {
        Ok(b) => b,
        Err(e) => return fail(format!("{}: {e}", file.display())),
    };
    let ledger = match Ledger::decode(&bytes) {
        Ok(l) => l,
        Err(e) => return fail(format!("{}: {e}", file.display())),
    };
    match verify_chain(&ledger) {
        ChainStatus::Valid => {
            println!("Valid");
            ExitCode::SUCCESS
        }
        ChainStatus::Invalid { index } => {
            println!("Invalid({index})");
            ExitCode::from(VERIFY_FAILED)
        }
    }
}

fn summarize_trace(trace: PathBuf) -> ExitCode {
    let records = match fs::File::open(&trace) {
        Ok(f) => match read_ndjson(BufReader::new(f)) {
            Ok(r) => r,
            Err(e) => return fail(format!("{}: {e}", trace.display())),
        },
        Err(e) => return fail(format!("{}: {e}", trace.display())),
    };
    let s = summarize(&records);
    println!("records: {}", s.records);
    if let (Some(first), Some(last)) = (s.first_us, s.last_us) {
        println!("span:    {:.6} s .. {:.6} s", first as f64 / 1e6, last as f64 / 1e6);
    }
    println!("by kind:");
    for (k, n) in &s.by_kind {
        println!("  {k:<12} {n}");
    }
    if !s.messages_by_kind.is_empty() {
        println!("messages sent:");
        for (k, n) in &s.messages_by_kind {
            println!("  {k:<22} {n}");
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, out, seed } => run(scenario, out, seed),
        Command::VerifyLedger { file } => verify_ledger(file),
        Command::Summarize { trace } => summarize_trace(trace),
    }
}
