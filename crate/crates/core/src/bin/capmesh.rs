//! Operator CLI: boot the services, seed them, replay the demo scenarios.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use capmesh::config::Config;
use capmesh::reasoner::Backend;
use capmesh::scenario::{compare, normalize, shipped_golden, Harness, ScenarioTranscript};
use capmesh::stack::{configured_urls, seed_remote, SeedBundle, SeedError, Stack, StackOptions};

#[derive(Debug, Parser)]
#[command(name = "capmesh", version, about = "Capability-collaboration runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve every capability over HTTP until interrupted.
    Boot {
        #[arg(long)]
        config: PathBuf,
        /// Seed directory loaded once the services are healthy.
        #[arg(long)]
        seed: Option<PathBuf>,
    },
    /// Load methodologies, profiles and tool services into a running stack.
    Seed {
        dir: PathBuf,
        /// Configuration the stack was booted with; the shipped one when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Replay a demo scenario in process and compare it with a golden transcript.
    Scenario {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
        n: u8,
        /// Golden transcript; the shipped one when omitted.
        #[arg(long)]
        golden: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `reasoner.backend`.
        #[arg(long)]
        backend: Option<Backend>,
        /// Write the normalized transcript here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a transcript read from a file or stdin.
    Transcript {
        /// Replace ids and timestamps with stable placeholders.
        #[arg(long)]
        normalize: bool,
        file: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config, String> {
    match path {
        Some(p) => Config::load(p).map_err(|e| e.to_string()),
        None => Ok(Config::shipped()),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Boot { config, seed } => boot(&config, seed.as_deref()).await,
        Command::Seed { dir, config } => seed(&dir, config.as_deref()).await,
        Command::Scenario {
            n,
            golden,
            config,
            backend,
            out,
        } => {
            scenario(
                n,
                golden.as_deref(),
                config.as_deref(),
                backend,
                out.as_deref(),
            )
            .await
        }
        Command::Transcript { normalize, file } => transcript(normalize, file.as_deref()),
    }
}

async fn boot(config: &Path, seed_dir: Option<&Path>) -> ExitCode {
    let cfg = match load_config(Some(config)) {
        Ok(c) => c,
        Err(e) => return fail(2, e),
    };
    let bundle = match seed_dir.map(SeedBundle::from_dir).transpose() {
        Ok(b) => b,
        Err(e) => return fail(2, e),
    };
    let mut stack = match Stack::serve(cfg, StackOptions::default()).await {
        Ok(s) => s,
        Err(e) => return fail(1, e),
    };
    let health = stack.health().await;
    for (name, ok) in &health {
        println!(
            "{name:<12} {} {}",
            if *ok { "healthy" } else { "unhealthy" },
            stack.url(name).unwrap_or("-")
        );
    }
    println!(
        "{} healthy services",
        health.iter().filter(|(_, ok)| *ok).count()
    );
    if let Some(bundle) = bundle {
        match stack.seed(&bundle).await {
            Ok(c) => println!(
                "seeded {}",
                serde_json::to_string(&c).expect("counts serialize")
            ),
            Err(e) => {
                stack.shutdown().await;
                return fail(1, e);
            }
        }
    }
    let _ = tokio::signal::ctrl_c().await;
    stack.shutdown().await;
    ExitCode::SUCCESS
}

async fn seed(dir: &Path, config: Option<&Path>) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => return fail(2, e),
    };
    let bundle = match SeedBundle::from_dir(dir) {
        Ok(b) => b,
        Err(e) => return fail(2, e),
    };
    let urls = configured_urls(&cfg);
    match seed_remote(&urls, &urls["tools"], &bundle).await {
        Ok(c) => {
            println!("{}", serde_json::to_string(&c).expect("counts serialize"));
            ExitCode::SUCCESS
        }
        Err(e @ SeedError::Validation(_)) => fail(2, e),
        Err(e) => fail(1, e),
    }
}

async fn scenario(
    n: u8,
    golden: Option<&Path>,
    config: Option<&Path>,
    backend: Option<Backend>,
    out: Option<&Path>,
) -> ExitCode {
    let mut cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => return fail(2, e),
    };
    if let Some(b) = backend {
        cfg.reasoner.backend = b;
    }
    let expected = match golden {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => return fail(2, format!("{}: {e}", p.display())),
        },
        None => shipped_golden(n)
            .expect("scenario number is validated")
            .to_string(),
    };
    let mut harness = match Harness::demo(cfg, StackOptions::default()).await {
        Ok(h) => h,
        Err(e) => return fail(1, e),
    };
    let run = match harness.run(n).await {
        Ok(r) => r,
        Err(e) => return fail(1, e),
    };
    let actual = run.transcript.normalized();
    match out {
        Some(p) => {
            if let Err(e) = std::fs::write(p, &actual) {
                return fail(1, format!("{}: {e}", p.display()));
            }
        }
        None => print!("{actual}"),
    }
    match compare(&actual, &normalize(&expected)) {
        Ok(()) => {
            eprintln!(
                "scenario {n}: {} in {} ms, matches golden",
                run.transcript.final_result.status.as_str(),
                run.elapsed.as_millis()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(1, format!("scenario {n}: {e}")),
    }
}

fn transcript(normalize_ids: bool, file: Option<&Path>) -> ExitCode {
    let text = match file {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display())),
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map(|_| s)
                .map_err(|e| format!("stdin: {e}"))
        }
    };
    let text = match text {
        Ok(t) => t,
        Err(e) => return fail(2, e),
    };
    // Transcripts keep their field order; any other JSON is pretty-printed as is.
    let pretty = match serde_json::from_str::<ScenarioTranscript>(&text) {
        Ok(t) => t.to_json(),
        Err(_) => match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(v) => serde_json::to_string_pretty(&v).expect("values serialize") + "\n",
            Err(e) => return fail(2, format!("not a JSON transcript: {e}")),
        },
    };
    print!(
        "{}",
        if normalize_ids {
            normalize(&pretty)
        } else {
            pretty
        }
    );
    ExitCode::SUCCESS
}
