use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdvsr::io::RunConfig;
use mdvsr::pipeline::{run, Command, Invocation};
use mdvsr::Error;

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (also where later commands look for earlier results).
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Desk-scale presets for every section the configuration leaves out.
    #[arg(long, global = true)]
    desk: bool,
    /// Scale factor.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["2", "3", "4"]))]
    factor: Option<String>,
    /// Gaussian blur σ (0 for pure bicubic degradation).
    #[arg(long, global = true)]
    sigma: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate synthetic training records and test videos.
    Synth,
    /// Fit one pseudo-inverse per blur σ.
    LearnPinv,
    /// Fit the hyper-network that predicts pseudo-inverses from kernels.
    TrainHypernet,
    /// Train the generator on the MSE objective.
    Train,
    /// Adversarial fine-tuning of a trained generator.
    FinetuneGan,
    /// Super-resolve one window of 2l+1 frames (oldest first).
    Sr {
        #[arg(required = true)]
        frames: Vec<PathBuf>,
    },
    /// PSNR / SSIM sweep over blur levels.
    Eval,
    /// Finite-difference check of every loss, layer and network.
    Gradcheck {
        /// Scale analytic gradients by 1.01; every check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Quick numerical invariants and gradient checks.
    Selftest,
}

fn invocation(cmd: Cmd, common: Common) -> Result<Invocation, Error> {
    let (mut config, text) = match &common.config {
        Some(p) => {
            let (c, t) = RunConfig::load(p)?;
            (c, Some(t))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(f) = &common.factor {
        config.factor = f.parse().expect("validated by clap");
    }
    if common.desk {
        config.desk = true;
    }
    let command = match cmd {
        Cmd::Synth => Command::Synth,
        Cmd::LearnPinv => Command::LearnPinv,
        Cmd::TrainHypernet => Command::TrainHypernet,
        Cmd::Train => Command::Train,
        Cmd::FinetuneGan => Command::FinetuneGan,
        Cmd::Sr { frames } => Command::Sr { inputs: frames },
        Cmd::Eval => Command::Eval,
        Cmd::Gradcheck { corrupt } => Command::Gradcheck { corrupt },
        Cmd::Selftest => Command::Selftest,
    };
    Ok(Invocation {
        command,
        config: config.effective()?,
        config_text: text,
        out: common.out,
        sigma: common.sigma,
    })
}

/// Multiple-degradation video super-resolution with a learned pseudo-inverse.
///
/// Exit codes: 0 success, 2 configuration error, 3 missing input,
/// 4 divergence, 5 failed check, 1 anything else.
#[derive(Parser, Debug)]
#[command(name = "mdvsr", version)]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let top = Top::parse();
    let result = invocation(top.command, top.common).and_then(|inv| run(&inv));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for p in &outcome.outputs {
                println!("  {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
