use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wiloc::evaluate::{write_report, EvalConfig};
use wiloc::feed::{classify_record, filter_record, read_feed_archive, FilterThresholds, ProbeRates};
use wiloc::fingerprint::{load_db, save_db, ClassFilter};
use wiloc::localizer::{Heuristic, MatchScope};
use wiloc::pipeline::{
    calibrate, default_calibration_grid, evaluate_dir, fingerprint_dir, simulate_run, RunDir, REFERENCE_MISMATCH,
    TRUTH_FILE,
};
use wiloc::service::{self, ServiceConfig};
use wiloc::sim::{desk_scenario, SimScenario};

/// WiFi fingerprint localization from controller RTLS feeds.
#[derive(Debug, Parser)]
#[command(name = "wiloc", version, about)]
struct Cli {
    /// Log level; `warn` by default, or the config file's for `serve`.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the built-in desk scenario.
    Scenario {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a scenario into a run directory (online and survey feeds,
    /// truth logs, landmark and AP tables).
    Simulate {
        /// Scenario file; the desk scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Seed of the desk scenario, or override of the file's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a fingerprint database from survey feeds.
    Fingerprint(FingerprintArgs),
    /// Evaluate a run's online feed against a fingerprint database.
    Evaluate(EvaluateArgs),
    /// Annotate a feed archive with frame classes.
    Classify {
        #[arg(long)]
        input: PathBuf,
        /// Standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Drop records failing the age and signal thresholds.
        #[arg(long)]
        filter: bool,
    },
    /// Sweep controller intensity on the desk scenario and report the
    /// intensity per band whose mismatch rate is closest to the reference.
    Calibrate {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        /// CSV of the sweep.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the feed listener and query API.
    Serve(ServeArgs),
    /// Send a feed archive to a listener, paced by record timestamps.
    Replay {
        #[arg(long)]
        feed: PathBuf,
        #[arg(long, default_value = "127.0.0.1:5140")]
        to: SocketAddr,
        /// Multiple of real time; 0 sends as fast as possible.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

#[derive(Debug, Args)]
struct FingerprintArgs {
    /// Directory of survey feed archives (`*.csv`).
    #[arg(long)]
    feeds: PathBuf,
    /// Survey truth log; `truth.csv` in the feed directory by default.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    aps: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// Report directory; `<run>/report` by default.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    window_s: u64,
    #[arg(long)]
    match_scope: Option<MatchScope>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// UDP address for feed datagrams.
    #[arg(long)]
    feed_addr: Option<SocketAddr>,
    /// HTTP address for queries.
    #[arg(long)]
    api_addr: Option<SocketAddr>,
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long)]
    ap_directory: Option<PathBuf>,
    #[arg(long)]
    window_s: Option<u64>,
    /// Default heuristic for queries without one.
    #[arg(long)]
    heuristic: Option<Heuristic>,
    #[arg(long)]
    class_filter: Option<ClassFilter>,
    #[arg(long)]
    match_scope: Option<MatchScope>,
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new().parse_filters(level).try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wiloc: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if !matches!(cli.command, Command::Serve(_)) {
        init_logging(cli.log_level.as_deref().unwrap_or("warn"));
    }
    match cli.command {
        Command::Scenario { seed, out } => {
            desk_scenario(seed).save(&out)?;
        }
        Command::Simulate { scenario, seed, out } => {
            let mut s = match &scenario {
                Some(p) => SimScenario::load(p)?,
                None => desk_scenario(seed.unwrap_or(1)),
            };
            if let (Some(seed), Some(_)) = (seed, &scenario) {
                s.seed = seed;
            }
            simulate_run(&s, &RunDir::new(&out))?;
            println!("wrote {}", out.display());
        }
        Command::Fingerprint(a) => fingerprint(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Classify { input, output, filter } => classify(&input, output.as_deref(), filter)?,
        Command::Calibrate { seeds, out } => {
            if seeds.is_empty() {
                bail!("no seeds given");
            }
            let c = calibrate(desk_scenario, &seeds, &default_calibration_grid(), REFERENCE_MISMATCH)?;
            let mut csv = String::from("intensity,band24_mismatch_pct,band5_mismatch_pct\n");
            println!("intensity  2.4 GHz  5 GHz");
            for p in &c.points {
                println!("{:>9.1}  {:>6.1}%  {:>5.1}%", p.intensity, p.rate.band24, p.rate.band5);
                csv.push_str(&format!("{},{:.3},{:.3}\n", p.intensity, p.rate.band24, p.rate.band5));
            }
            println!(
                "chosen: 2.4 GHz {:.1} (target {:.1}%), 5 GHz {:.1} (target {:.1}%)",
                c.chosen.band24, REFERENCE_MISMATCH.band24, c.chosen.band5, REFERENCE_MISMATCH.band5
            );
            if let Some(out) = out {
                fs::write(&out, csv).with_context(|| out.display().to_string())?;
            }
        }
        Command::Serve(a) => serve(a, cli.log_level)?,
        Command::Replay { feed, to, speed } => {
            let records = read_feed_archive(&feed)?;
            let rt = tokio::runtime::Runtime::new()?;
            let sent = rt.block_on(service::replay(&records, to, speed))?;
            println!("sent {} records in {sent} datagrams to {to}", records.len());
        }
    }
    Ok(())
}

fn fingerprint(a: FingerprintArgs) -> Result<()> {
    let truth = a.truth.unwrap_or_else(|| a.feeds.join(TRUTH_FILE));
    let (db, missing) = fingerprint_dir(
        &a.feeds,
        &truth,
        &a.landmarks,
        &a.aps,
        &FilterThresholds::default(),
        &ProbeRates::default(),
    )?;
    for (landmark, band) in &missing {
        log::warn!("landmark {landmark} has no {band} GHz fingerprint");
    }
    save_db(&db, &a.out)?;
    println!("wrote {} fingerprints to {}", db.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let run = RunDir::new(&a.run);
    let db = load_db(&a.db)?;
    let mut cfg = EvalConfig {
        online_window_s: a.window_s,
        ..EvalConfig::default()
    };
    if let Some(scope) = a.match_scope {
        cfg.match_scope = scope;
    }
    let ev = evaluate_dir(&run, &db, &cfg)?;
    let out = a.out.unwrap_or_else(|| run.root.join("report"));
    write_report(&out, &ev.report, Some(&ev.scans))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn classify(input: &Path, output: Option<&Path>, filter: bool) -> Result<()> {
    let records = read_feed_archive(input)?;
    let sink: Box<dyn Write> = match output {
        Some(p) => Box::new(fs::File::create(p).with_context(|| p.display().to_string())?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    let thresholds = FilterThresholds::default();
    let rates = ProbeRates::default();
    let written = records
        .iter()
        .filter(|r| !filter || filter_record(r, &thresholds))
        .try_for_each(|r| writeln!(w, "{},{}", r.to_line(), classify_record(r, &rates)))
        .and_then(|()| w.flush());
    match written {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn serve(a: ServeArgs, log_level: Option<String>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(v) = a.feed_addr {
        cfg.feed_addr = v;
    }
    if let Some(v) = a.api_addr {
        cfg.api_addr = v;
    }
    if let Some(v) = a.db {
        cfg.db = v;
    }
    if let Some(v) = a.ap_directory {
        cfg.ap_directory = Some(v);
    }
    if let Some(v) = a.window_s {
        cfg.online_window_s = v;
    }
    if let Some(v) = a.heuristic {
        cfg.heuristic = v;
    }
    if let Some(v) = a.class_filter {
        cfg.class_filter = v;
    }
    if let Some(v) = a.match_scope {
        cfg.match_scope = v;
    }
    if let Some(v) = log_level {
        cfg.log_level = v;
    }
    init_logging(&cfg.log_level);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(cfg))?;
    Ok(())
}
