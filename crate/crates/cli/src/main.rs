use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divetrack::pipeline::{
    run_metrics, run_mosaic, run_pipeline, run_sample, run_track, write_synthetic_clip, ErrorKind, PipelineConfig,
    PipelineError, Stage,
};
use divetrack::synth::{scenario, SynthSpec, SCENARIO_NAMES};

/// Diving-video analysis: mosaic a shaky clip, track the diver, measure the dive.
#[derive(Parser)]
#[command(name = "divetrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from sampling to metrics.
    Run(StageArgs),
    /// Decimate the clip to the target rate and write the sampled manifest.
    Sample(StageArgs),
    /// Register sampled frames and write the panorama and transforms.
    Mosaic(StageArgs),
    /// Locate the diver in every frame and write the raw track.
    Track(StageArgs),
    /// Smooth the track, fit the ballistic model and write metrics.
    Metrics(StageArgs),
    /// Render a synthetic clip with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set ransac.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set composite_mode=<MODE>`.
    #[arg(long, value_name = "MODE")]
    composite_mode: Option<String>,
    /// Shorthand for `--set threads=<N>`.
    #[arg(long)]
    threads: Option<usize>,
    /// Shorthand for `--set debug=true`.
    #[arg(long)]
    debug: bool,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["scenario", "spec"])))]
struct SynthArgs {
    /// Built-in scenario name.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SCENARIO_NAMES))]
    scenario: Option<String>,
    /// JSON scene description, as written to `synth_spec.json`.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Directory receiving frames, manifest, config and ground truth.
    #[arg(long)]
    out: PathBuf,
}

impl StageArgs {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut overrides = self.overrides.clone();
        if let Some(mode) = &self.composite_mode {
            overrides.push(format!("composite_mode={mode}"));
        }
        if let Some(n) = self.threads {
            overrides.push(format!("threads={n}"));
        }
        if self.debug {
            overrides.push("debug=true".into());
        }
        let mut cfg = PipelineConfig::load(&self.config, &overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn read_spec(path: &Path) -> Result<SynthSpec, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| {
        PipelineError::new(
            Stage::Synth,
            ErrorKind::Io {
                path: path.to_path_buf(),
                source,
            },
        )
    })?;
    serde_json::from_str(&text).map_err(|e| {
        PipelineError::new(
            Stage::Synth,
            ErrorKind::Config(format!("invalid synth spec {}: {e}", path.display())),
        )
    })
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run(args) => run_pipeline(&args.load()?).map(drop),
        Command::Sample(args) => run_sample(&args.load()?).map(drop),
        Command::Mosaic(args) => run_mosaic(&args.load()?).map(drop),
        Command::Track(args) => run_track(&args.load()?).map(drop),
        Command::Metrics(args) => run_metrics(&args.load()?).map(drop),
        Command::Synth(args) => {
            let spec = match (&args.scenario, &args.spec) {
                (Some(name), _) => scenario(name).expect("clap restricts scenario names"),
                (None, Some(path)) => read_spec(path)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            write_synthetic_clip(&spec, &args.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
