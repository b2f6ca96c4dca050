//! Command-line front end. `run` returns the process exit code:
//! 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use djscc_core::train::TrainReport;

use crate::checkpoint::ModelKind;
use crate::config::ExperimentConfig;
use crate::dataset::generate_dataset;
use crate::error::{HarnessError, Result};
use crate::pipeline::{self, Models, TransmitOptions};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "djscc", about = "Diffusion-aided JSCC desk simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// SNR in dB; `sweep` and `evaluate` accept a comma-separated list.
    #[arg(long = "snr-db", global = true, allow_hyphen_values = true)]
    pub snr_db: Option<String>,
    /// Guidance strength.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Spaced sampling steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the JSCC encoder/decoder.
    TrainJscc,
    /// Train the latent codec.
    TrainVae,
    /// Pretrain the unconditional base denoiser.
    PretrainDiffusion,
    /// Train the control branch with the other stages frozen.
    TrainControl,
    /// Transmit the test set at one SNR and write metrics and images.
    Transmit,
    /// Evaluate the configured SNR grid and print a summary.
    Evaluate,
    /// Evaluate an SNR list, one CSV section per SNR.
    Sweep,
    /// Write the procedural desk dataset.
    GenDataset {
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(HarnessError),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Self::Runtime(e)
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: djscc <COMMAND> --config <PATH> [OPTIONS]\nRun `djscc --help` for details.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn parse_snr_list(text: &str) -> std::result::Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("--snr-db: cannot parse {s:?}")))
        })
        .collect()
}

fn load_config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.clone();
    }
    if let Some(l) = common.lambda {
        cfg.sampler.lambda = l;
    }
    if let Some(s) = common.steps {
        cfg.sampler.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: &str, r: &TrainReport) {
    println!(
        "{stage}: eval loss {:.6} -> {:.6} ({:.1}% drop over {} iterations)",
        r.initial_eval,
        r.final_eval,
        100.0 * r.relative_drop(),
        r.losses.len()
    );
}

fn execute(cli: &Cli) -> std::result::Result<(), Failure> {
    if let Command::GenDataset { train, test, size } = &cli.command {
        let out = cli
            .common
            .out
            .as_ref()
            .ok_or_else(|| Failure::Usage("gen-dataset needs --out".into()))?;
        generate_dataset(out, *train, *test, *size, cli.common.seed.unwrap_or(0))?;
        println!("wrote {train} train and {test} test images to {}", out.display());
        return Ok(());
    }
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::TrainJscc => {
            let data = pipeline::load_train(&cfg)?;
            let mut m = Models::init(&cfg)?;
            report("jscc", &pipeline::train_jscc_stage(&cfg, &mut m, &data)?);
            m.save_stage(&cfg, ModelKind::Jscc)?;
        }
        Command::TrainVae => {
            let data = pipeline::load_train(&cfg)?;
            let mut m = Models::init(&cfg)?;
            report("latent", &pipeline::train_latent_stage(&cfg, &mut m, &data)?);
            m.save_stage(&cfg, ModelKind::Latent)?;
        }
        Command::PretrainDiffusion => {
            let data = pipeline::load_train(&cfg)?;
            let mut m = Models::init(&cfg)?;
            m.load_stage(&cfg, ModelKind::Latent)?;
            report("base", &pipeline::pretrain_stage(&cfg, &mut m, &data)?);
            m.save_stage(&cfg, ModelKind::Denoiser)?;
        }
        Command::TrainControl => {
            let data = pipeline::load_train(&cfg)?;
            let mut m = Models::load(&cfg)?;
            report("control", &pipeline::control_stage(&cfg, &mut m, &data)?);
            m.save_stage(&cfg, ModelKind::Denoiser)?;
        }
        Command::Transmit => {
            let gamma = match &cli.common.snr_db {
                Some(s) => match parse_snr_list(s)?.as_slice() {
                    [g] => *g,
                    _ => return Err(Failure::Usage("transmit takes a single --snr-db value".into())),
                },
                None => cfg.run.snr_db.first().copied().unwrap_or(10.0),
            };
            let m = Models::load(&cfg)?;
            let data = pipeline::load_test(&cfg)?;
            let opts = TransmitOptions::from_config(&cfg, gamma);
            let sections = pipeline::sweep(&cfg, &m, &data, &[gamma], &opts)?;
            finish(&cfg, "transmit.csv", &sections)?;
        }
        Command::Evaluate | Command::Sweep => {
            let gammas = match &cli.common.snr_db {
                Some(s) => parse_snr_list(s)?,
                None => cfg.run.snr_db.clone(),
            };
            let m = Models::load(&cfg)?;
            let data = pipeline::load_test(&cfg)?;
            let opts = TransmitOptions {
                image_dir: None,
                ..TransmitOptions::from_config(&cfg, 0.0)
            };
            let sections = pipeline::sweep(&cfg, &m, &data, &gammas, &opts)?;
            let name = if matches!(cli.command, Command::Sweep) { "sweep.csv" } else { "evaluate.csv" };
            finish(&cfg, name, &sections)?;
        }
        Command::GenDataset { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn finish(cfg: &ExperimentConfig, name: &str, sections: &[(f64, Vec<pipeline::Transmission>)]) -> Result<()> {
    let path = cfg.run.out_dir.join(name);
    pipeline::write_text(&path, &pipeline::render_csv(sections))?;
    print!("{}", pipeline::summary(sections));
    println!("metrics written to {}", path.display());
    Ok(())
}
