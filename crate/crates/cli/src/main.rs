//! `demand`: generate fixtures and run the forecasting pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demand_core::pipeline::{run_pipeline, PipelineConfig, Stage};
use demand_core::synth::{self, Interaction, SynthSpec};
use demand_core::{CalendarDate, Error, ErrorKind};

/// Worker-count override for every parallel stage.
const WORKERS_ENV: &str = "DEMAND_WORKERS";

#[derive(Parser)]
#[command(name = "demand", version, about = "Weather-aware demand forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sales/weather/key fixture.
    Synth(SynthArgs),
    /// Load, impute and join the input tables.
    Ingest(PipelineArgs),
    /// Random-forest feature selection.
    Select(PipelineArgs),
    /// Architecture sweep (or fixed architecture).
    Sweep(PipelineArgs),
    /// Train the comparison models.
    Train(PipelineArgs),
    /// Build the comparison report.
    Compare(PipelineArgs),
    /// Write test-period predictions.
    Predict(PipelineArgs),
    /// Every stage, ending with predictions.
    Run(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    stores: Option<u32>,
    #[arg(long)]
    items: Option<u32>,
    #[arg(long)]
    stations: Option<u32>,
    #[arg(long)]
    start: Option<CalendarDate>,
    #[arg(long)]
    end: Option<CalendarDate>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    /// Add a tmax x dewpoint product term to the target.
    #[arg(long)]
    nonlinear: bool,
}

#[derive(Args)]
struct PipelineArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding sales.csv, weather.csv and key.csv.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    sales: Option<PathBuf>,
    #[arg(long)]
    weather: Option<PathBuf>,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    holidays: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Runs per architecture in the sweep.
    #[arg(long)]
    runs: Option<usize>,
    /// Use Dweather only.
    #[arg(long)]
    no_events: bool,
    /// Skip the sweep and use net.layers / net.neurons.
    #[arg(long)]
    no_sweep: bool,
    /// Also write reference comparisons for full-scale data.
    #[arg(long)]
    replicate_paper_scale: bool,
    /// Any config key, e.g. `--set net.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(dir) = &self.input_dir {
            let files = synth::SynthFiles::in_dir(dir);
            cfg.sales = files.sales;
            cfg.weather = files.weather;
            cfg.key = files.key;
        }
        let mut pairs = Vec::new();
        for (k, v) in [
            ("input.sales", &self.sales),
            ("input.weather", &self.weather),
            ("input.key", &self.key),
            ("input.holidays", &self.holidays),
            ("output.dir", &self.output),
        ] {
            if let Some(p) = v {
                pairs.push((k.to_string(), p.display().to_string()));
            }
        }
        if let Some(s) = self.seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        if let Some(r) = self.runs {
            pairs.push(("runs".into(), r.to_string()));
        }
        if self.no_events {
            pairs.push(("use_events".into(), "false".into()));
        }
        if self.no_sweep {
            pairs.push(("sweep.enabled".into(), "false".into()));
        }
        if self.replicate_paper_scale {
            pairs.push(("replicate_paper_scale".into(), "true".into()));
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        cfg.apply(&pairs, std::path::Path::new(""))?;
        Ok(cfg)
    }
}

fn synth_command(a: &SynthArgs) -> Result<(), Error> {
    let mut spec = SynthSpec::desk_default(a.seed);
    if let Some(v) = a.stores {
        spec.n_stores = v;
    }
    if let Some(v) = a.items {
        spec.n_items = v;
    }
    if let Some(v) = a.stations {
        spec.n_stations = v;
    }
    if let Some(v) = a.start {
        spec.start = v;
    }
    if let Some(v) = a.end {
        spec.end = v;
    }
    if let Some(v) = a.noise_sd {
        spec.noise_sd = v;
    }
    if let Some(v) = a.missing_rate {
        spec.missing_rate = v;
    }
    if a.nonlinear {
        spec.interaction = Some(Interaction {
            a: "tmax".into(),
            b: "dewpoint".into(),
            beta: 1.0,
        });
    }
    let files = synth::generate(&spec, &a.out)?;
    println!("wrote {}", files.sales.display());
    println!("wrote {}", files.weather.display());
    println!("wrote {}", files.key.display());
    println!("wrote {}", files.manifest.display());
    Ok(())
}

fn pipeline_command(a: &PipelineArgs, through: Stage) -> Result<(), Error> {
    let cfg = a.config()?;
    let summary = run_pipeline(&cfg, through)?;
    print!("{}", summary.to_text());
    let c = summary.counts;
    println!(
        "rows: train {} modeled of {}, test {} modeled of {} ({} zero-rule, {} closure)",
        c.train_rows_modeled,
        c.train_rows_raw,
        c.test_rows_modeled,
        c.test_rows_raw,
        c.zero_rule_rows,
        c.closure_rows
    );
    let reports = cfg.output_dir.join("reports");
    let show = match through {
        Stage::Sweep => Some("sweep.txt"),
        Stage::Compare | Stage::Predict => Some("compare.txt"),
        _ => None,
    };
    if let Some(name) = show {
        if let Ok(text) = std::fs::read_to_string(reports.join(name)) {
            print!("\n{text}");
        }
    }
    if let Some(p) = summary.predictions {
        println!("\npredictions: {}", p.display());
    }
    Ok(())
}

fn init_workers() -> Result<(), Error> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_workers().and_then(|()| match &cli.command {
        Command::Synth(a) => synth_command(a),
        Command::Ingest(a) => pipeline_command(a, Stage::Ingest),
        Command::Select(a) => pipeline_command(a, Stage::Select),
        Command::Sweep(a) => pipeline_command(a, Stage::Sweep),
        Command::Train(a) => pipeline_command(a, Stage::Train),
        Command::Compare(a) => pipeline_command(a, Stage::Compare),
        Command::Predict(a) | Command::Run(a) => pipeline_command(a, Stage::Predict),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
