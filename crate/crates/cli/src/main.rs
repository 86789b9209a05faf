use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foton::experiment::{ablation_grid, preset, resume_experiment, AblationAxis, ExperimentConfig, RunMetrics};
use foton::{diagnostics::verify_suite, Error};

#[derive(Parser)]
#[command(name = "foton", version, about = "Forward-only training of orthogonal networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        base: BaseArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run one training per value of an axis.
    Ablate {
        #[command(flatten)]
        base: BaseArgs,
        /// `ortho` (ortho_rate) or `feedback` (f_refresh).
        #[arg(long)]
        axis: String,
        /// Axis values, space or comma separated.
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run the built-in oracle and equivalence checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the preset names.
    Presets,
}

#[derive(Args)]
struct BaseArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Steps between projections, or `init-only` / `never`.
    #[arg(long)]
    ortho_rate: Option<String>,
    /// Steps between feedback refreshes, `epoch`, or `never`.
    #[arg(long)]
    f_refresh: Option<String>,
    /// Epochs between alignment sweeps (0 disables them).
    #[arg(long)]
    align_sweep: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    train_limit: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl BaseArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(name), _) => preset(name)?,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                ExperimentConfig::parse(&text)?
            }
            (None, None) => return Err(Error::Config("one of --preset or --config is required".into())),
        };
        let flags = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("out_dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("ortho_rate", self.ortho_rate.clone()),
            ("f_refresh", self.f_refresh.clone()),
            ("align_every", self.align_sweep.clone()),
            ("epochs", self.epochs.clone()),
            ("train_limit", self.train_limit.clone()),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn report(m: &RunMetrics, out: Option<&Path>) {
    for e in &m.epochs {
        println!(
            "epoch {:>3}  lr {:<8} train_loss {:<10} test_loss {:.5}  test_acc {:.2}%",
            e.epoch,
            e.lr,
            e.train_loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "-".into()),
            e.test_loss,
            e.test_acc
        );
    }
    if let Some(dir) = out {
        println!("metrics written to {}", dir.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { base, resume } => {
            let cfg = base.config()?;
            let m = resume_experiment(&cfg, resume.as_deref())?;
            report(&m, cfg.out_dir.as_deref());
        }
        Command::Ablate { base, axis, values } => {
            let cfg = base.config()?;
            let axis = AblationAxis::parse(&axis)
                .ok_or_else(|| Error::Config(format!("unknown axis {axis:?}; use ortho or feedback")))?;
            let values: Vec<String> = values
                .iter()
                .flat_map(|v| v.split_whitespace())
                .map(str::to_string)
                .collect();
            let mut first_err = None;
            for cell in ablation_grid(&cfg, axis, &values)? {
                match cell.result {
                    Ok(m) => println!("{}={}: final test acc {:.2}%", axis.key(), cell.value, m.final_test_acc().unwrap_or(f64::NAN)),
                    Err(e) => {
                        println!("{}={}: failed: {e}", axis.key(), cell.value);
                        first_err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Command::Verify { seed } => {
            let outcomes = verify_suite(seed)?;
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<22} value {:.3e} tolerance {:.1e}", o.name, o.value, o.tolerance);
            }
            if failed > 0 {
                return Err(Error::State(format!("{failed} verification check(s) failed")));
            }
        }
        Command::Presets => {
            for n in foton::experiment::preset_names() {
                println!("{n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
