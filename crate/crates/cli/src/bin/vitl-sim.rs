use std::path::PathBuf;

use clap::Parser;
use vitl_core::sim::{
    lab_fleet, parse_fleet, render_csv, render_json, run_experiment, summarize_curve, CurveFormat,
    ExperimentConfig,
};

#[derive(Debug, Parser)]
#[command(name = "vitl-sim", about = "Replay the turnaround-versus-load experiment in virtual time")]
struct Args {
    /// Fleet file, one host per line; defaults to the five-host lab fleet.
    #[arg(long)]
    fleet: Option<PathBuf>,
    #[arg(long, default_value_t = 23)]
    requests: usize,
    /// Seconds between submissions.
    #[arg(long, default_value_t = 300.0)]
    inter_arrival: f64,
    #[arg(long, default_value_t = 3600.0)]
    horizon: f64,
    #[arg(long, default_value = "csv")]
    format: CurveFormat,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Print per-segment slopes to stderr.
    #[arg(long)]
    summary: bool,
}

fn main() {
    let args = Args::parse();
    let fleet = match &args.fleet {
        Some(path) => {
            let text = std::fs::read_to_string(path).unwrap_or_else(|e| {
                eprintln!("vitl-sim: {}: {e}", path.display());
                std::process::exit(2);
            });
            parse_fleet(&text).unwrap_or_else(|e| {
                eprintln!("vitl-sim: {}: {e}", path.display());
                std::process::exit(2);
            })
        }
        None => lab_fleet(),
    };
    let cfg = ExperimentConfig {
        fleet,
        requests: args.requests,
        inter_arrival_seconds: args.inter_arrival,
        horizon_seconds: args.horizon,
        seed: args.seed,
        ..ExperimentConfig::default()
    };
    let run = run_experiment(&cfg).unwrap_or_else(|e| {
        eprintln!("vitl-sim: {e}");
        std::process::exit(1);
    });
    let body = match args.format {
        CurveFormat::Csv => render_csv(&run.points),
        CurveFormat::Json => render_json(&run.points),
    };
    match &args.out {
        Some(path) => std::fs::write(path, body).unwrap_or_else(|e| {
            eprintln!("vitl-sim: {}: {e}", path.display());
            std::process::exit(1);
        }),
        None => print!("{body}"),
    }
    if args.summary {
        let s = summarize_curve(&run.points);
        for seg in &s.segments {
            eprintln!(
                "{} loads {}-{} ({} points): {:.2} s/request",
                seg.label, seg.first_load, seg.last_load, seg.points, seg.slope
            );
        }
        eprintln!("monotone violations: {:?}", s.monotone_violations);
        if let Some(spread) = s.initial_spread {
            eprintln!("initial spread: {:.1}%", spread * 100.0);
        }
    }
    for problem in &run.audit {
        eprintln!("vitl-sim: audit: {problem}");
    }
    if !run.audit.is_empty() {
        std::process::exit(1);
    }
}
