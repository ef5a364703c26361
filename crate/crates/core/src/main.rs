use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sud::cli::{self, GlobalOpts};
use sud::config::SweepAxis;
use sud::Error;

/// Supervision by denoising: synthetic data, denoiser pretraining,
/// semi-supervised training, evaluation, sweeps and spectra.
#[derive(Parser, Debug)]
#[command(name = "sud", version)]
struct Cli {
    /// Experiment config (TOML); omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data, training and denoiser seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into the output directory.
    GenData,
    /// Pretrain the learned denoiser on corrupted labels.
    TrainDenoiser {
        /// Skip training and record an identity denoiser.
        #[arg(long)]
        identity: bool,
    },
    /// Train a reconstructor.
    Train {
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a model on a dataset split.
    Eval {
        /// Model checkpoint (defaults to `<out>/model.sudt`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Split to evaluate: labeled, val or test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate once per (value, seed).
    Sweep {
        /// beta, alpha-const, lambda-max, mode or denoiser-labels.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Run independent trainings concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Direct and proximal filter factors of a ring smoother.
    Spectrum {
        /// Comma-separated β values.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
}

fn execute(args: Cli) -> sud::Result<()> {
    let opts = GlobalOpts {
        config: args.config,
        seed: args.seed,
        out: args.out,
        force: args.force,
    };
    let mut cfg = cli::resolve(&opts)?;
    match args.command {
        Command::GenData => {
            let ds = cli::cmd_gen_data(&cfg, opts.force)?;
            println!("{} examples written to {}", ds.examples.len(), cfg.out.display());
        }
        Command::TrainDenoiser { identity } => match cli::cmd_train_denoiser(&cfg, opts.force, identity)? {
            Some(d) => println!("denoiser validation dice {d:.4}"),
            None => println!("identity denoiser recorded"),
        },
        Command::Train { resume } => {
            let r = cli::cmd_train(&cfg, opts.force, resume.as_deref())?;
            let last = r.state.log.last();
            println!(
                "trained {} steps; last validation dice {}",
                r.state.step,
                last.map_or("n/a".to_string(), |l| format!("{:.4}", l.val_mean_dice))
            );
        }
        Command::Eval { model, split } => {
            if let Some(m) = model {
                cfg.eval.model = m;
            }
            if let Some(s) = split {
                cfg.eval.split = sud::dataset::Split::parse(&s)?;
            }
            let s = cli::cmd_eval(&cfg, opts.force)?;
            println!(
                "dice mean {:.4} median {:.4}; 95hd mean {:.2} median {:.2}",
                s.mean_dice, s.median_dice, s.mean_hd95, s.median_hd95
            );
        }
        Command::Sweep {
            axis,
            values,
            seeds,
            parallel,
        } => {
            if let Some(a) = axis {
                cfg.sweep.axis = SweepAxis::parse(&a)?;
            }
            if let Some(v) = values {
                cfg.sweep.values = v;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s;
            }
            cfg.sweep.parallel |= parallel;
            let rows = cli::cmd_sweep(&cfg, opts.force)?;
            print!("{}", cli::sweep_csv(&rows));
        }
        Command::Spectrum { betas } => {
            if let Some(b) = betas {
                cfg.spectrum.betas = b;
            }
            cli::cmd_spectrum(&cfg, opts.force)?;
            println!("wrote {}", cfg.out.join("spectrum.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if args.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { .. } = e {
                eprintln!("run labelled diverged");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
