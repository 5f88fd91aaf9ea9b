use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use envme::scenario::{self, ScenarioConfig};

#[derive(Parser)]
#[command(name = "envme", version, about = "Malicious NVMe SSD simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file, or a bundled scenario by name.
    Run {
        config: String,
        /// Write the event log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print the run report as JSON instead of one line per assertion.
        #[arg(long)]
        json: bool,
    },
    /// Build a raw disk image (and its manifest) from an image spec.
    BuildImage {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// List bundled scenarios.
    List,
    /// Show a bundled scenario's description and source.
    Describe { name: String },
}

fn run(config: &str, log: Option<PathBuf>, seed: Option<u64>, json: bool) -> Result<bool> {
    let mut out = scenario::run_named(config, seed).with_context(|| format!("scenario {config}"))?;
    if let Some(path) = &log {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        out.log.write_jsonl(BufWriter::new(f))?;
        out.report.log_path = Some(path.display().to_string());
    }
    let r = &out.report;
    if json {
        println!("{}", serde_json::to_string_pretty(r)?);
    } else {
        for a in &r.assertions {
            println!("{} {} ({}): {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.kind, a.message);
            if let Some(e) = &a.violating_event {
                println!("    violating event: {}", serde_json::to_string(e)?);
            }
        }
        let passed = r.assertions.iter().filter(|a| a.passed).count();
        println!(
            "{}: {passed}/{} assertions passed, {} events, seed {}",
            r.scenario,
            r.assertions.len(),
            r.events,
            r.seed
        );
    }
    Ok(r.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, log, seed, json } => run(&config, log, seed, json),
        Cmd::BuildImage { spec, output } => envme::image::build_to_file(&spec, &output)
            .map(|m| {
                println!(
                    "{}: {} blocks of {} bytes, {} files",
                    output.display(),
                    m.total_blocks,
                    m.device_block_size,
                    m.files.len()
                );
                true
            })
            .map_err(Into::into),
        Cmd::List => {
            for (name, desc) in scenario::list() {
                println!("{name:20} {desc}");
            }
            Ok(true)
        }
        Cmd::Describe { name } => describe(&name),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn describe(name: &str) -> Result<bool> {
    let Some(src) = scenario::bundled_source(name) else {
        bail!("no bundled scenario named {name}; see `envme list`");
    };
    let cfg = ScenarioConfig::parse(src)?;
    println!("{}\n\n{}\n", cfg.name, cfg.description);
    println!("actions: {}", cfg.actions.len());
    for a in &cfg.assertions {
        println!("  assert {} ({})", a.name, a.check.name());
    }
    println!("\n{src}");
    Ok(true)
}
