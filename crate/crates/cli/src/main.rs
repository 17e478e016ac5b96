use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use privseq::corpus::{load_parallel, Format, SplitName};
use privseq::harness::run::{METRICS_FILE, TRANSLATIONS_FILE};
use privseq::harness::{self, ExperimentConfig, HarnessError, Mode, ResumeOptions, RunOutcome, SynthOptions};
use privseq::optimizer::{DivisorMode, StopReason};
use privseq::sampling::{lots_per_epoch, Method};

/// Differentially private seq2seq training with DP-SGD.
#[derive(Parser)]
#[command(name = "privseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Stop and checkpoint after this many lots; `resume` finishes the run.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Continue a run from its checkpoint.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Greedy-decode a test set with a checkpoint and score it.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test file, or a dataset directory containing `test.<format>`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print ε spent by a run's noise, rate and length.
    Account {
        #[command(flatten)]
        run: RunArgs,
        /// Sampling rate; otherwise L / N from the lot size and dataset.
        #[arg(long)]
        q: Option<f64>,
        /// Dataset size, when no dataset is given.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Print the smallest σ meeting a target ε.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write a synthetic reversal corpus (train and test splits).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        test_n: usize,
        /// Number of distinct content tokens.
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "jsonl")]
        format: Format,
    },
}

/// Config file plus per-key overrides; a flag always beats the file.
#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    lot_size: Option<usize>,
    /// Micro-batch size for gradient accumulation [default: 16].
    #[arg(long)]
    physical_batch: Option<usize>,
    /// Target ε; `inf` trains without privacy.
    #[arg(long)]
    epsilon: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs of ⌈N/L⌉ lots [default: 25].
    #[arg(long)]
    epochs: Option<u64>,
    /// Total number of lots; replaces --epochs.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    divisor: Option<Divisor>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Divisor {
    Expected,
    Actual,
}

impl RunArgs {
    fn config(&self, mode: Mode) -> Result<ExperimentConfig, HarnessError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        c.mode = mode;
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v.into();
                }
            };
        }
        set!(dataset => data.dataset);
        set!(test => data.test);
        set!(format => data.format);
        set!(max_seq_len => data.max_seq_len);
        set!(vocab_size => data.vocab_size);
        set!(d_model => model.d_model);
        set!(layers => model.n_layers);
        set!(heads => model.n_heads);
        set!(d_ff => model.d_ff);
        set!(method => sampler.method);
        set!(lot_size => sampler.lot_size);
        set!(physical_batch => sampler.physical_batch);
        set!(delta => privacy.delta);
        set!(clip => privacy.clip);
        set!(lr => train.lr);
        set!(epochs => train.epochs);
        set!(steps => train.steps);
        set!(seed => seed);
        set!(out => out);
        if let Some(d) = self.divisor {
            c.privacy.divisor = match d {
                Divisor::Expected => DivisorMode::Expected,
                Divisor::Actual => DivisorMode::Actual,
            };
        }
        // A privacy flag replaces the file's privacy choice; giving both
        // flags is left for validation to reject.
        match (self.epsilon, self.sigma) {
            (Some(e), sigma) if e == f64::INFINITY && sigma.is_none() => {
                c.privacy.private = false;
                c.privacy.epsilon = None;
                c.privacy.sigma = None;
            }
            (None, None) => {}
            (epsilon, sigma) => {
                c.privacy.private = true;
                c.privacy.epsilon = epsilon;
                c.privacy.sigma = sigma;
            }
        }
        Ok(c)
    }
}

fn print_outcome(out: &RunOutcome) {
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let how = match out.stop {
        StopReason::Budget => "stopped at the privacy budget",
        StopReason::Completed if out.step == out.plan.steps => "completed",
        StopReason::Completed => "paused",
    };
    println!("{how} after {} of {} lots", out.step, out.plan.steps);
    if let Some(p) = &out.provenance {
        print!("{p}");
    }
    if let Some(b) = &out.bleu {
        println!("test BLEU: {:.2}", b.bleu);
    }
    println!("checkpoint: {}", out.checkpoint.display());
}

/// Sampling rate and run length for `account` / `calibrate`.
fn rate_and_steps(run: &RunArgs, q: Option<f64>, n: Option<usize>) -> Result<(ExperimentConfig, f64, u64), HarnessError> {
    let cfg = run.config(Mode::Train)?;
    let n = match (n, &cfg.data.dataset) {
        (Some(n), _) => Some(n),
        (None, Some(_)) => Some(harness::load_dataset(&cfg.data)?.train.len()),
        (None, None) => None,
    };
    let lot = cfg.sampler.lot_size;
    let q = match (q, n) {
        (Some(q), _) => q,
        (None, Some(n)) if n > 0 => (lot as f64 / n as f64).min(1.0),
        _ => return Err(HarnessError::Config("give --q, or --lot-size with --n or --dataset".into())),
    };
    let steps = match (cfg.train.steps, n) {
        (Some(t), _) => t,
        (None, Some(n)) if n > 0 => cfg.train.epochs * lots_per_epoch(n, lot) as u64,
        _ => return Err(HarnessError::Config("give --steps, or --epochs with --n or --dataset".into())),
    };
    Ok((cfg, q, steps))
}

fn load_test(path: &Path, format: Format) -> Result<privseq::corpus::DatasetSplit, HarnessError> {
    let file = if path.is_dir() { path.join(format!("test.{format}")) } else { path.to_path_buf() };
    Ok(load_parallel(file, format, SplitName::Test)?)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { run, stop_after } => {
            let cfg = run.config(Mode::Train)?;
            print_outcome(&harness::train(&cfg, stop_after)?);
        }
        Command::Resume {
            checkpoint,
            dataset,
            test,
            out,
            stop_after,
        } => {
            let opts = ResumeOptions {
                out,
                dataset,
                test,
                stop_after,
            };
            print_outcome(&harness::resume(&checkpoint, &opts)?);
        }
        Command::Infer {
            checkpoint,
            dataset,
            format,
            out,
        } => {
            let test = load_test(&dataset, format)?;
            let (report, provenance) = harness::infer(&checkpoint, &test, &out)?;
            println!("test BLEU: {:.2}", report.bleu);
            if let Some(p) = provenance {
                print!("{p}");
            }
            println!("translations: {}", out.join(TRANSLATIONS_FILE).display());
            println!("metrics: {}", out.join(METRICS_FILE).display());
        }
        Command::Account { run, q, n } => {
            let (cfg, q, steps) = rate_and_steps(&run, q, n)?;
            let sigma = cfg
                .privacy
                .sigma
                .ok_or_else(|| HarnessError::Config("account needs --sigma".into()))?;
            print!("{}", harness::account(q, sigma, steps, cfg.privacy.delta, cfg.sampler.method)?);
        }
        Command::Calibrate { run, q, n } => {
            let (cfg, q, steps) = rate_and_steps(&run, q, n)?;
            let target = cfg
                .privacy
                .epsilon
                .ok_or_else(|| HarnessError::Config("calibrate needs a finite --epsilon".into()))?;
            print!("{}", harness::calibrate(target, q, steps, cfg.privacy.delta, cfg.sampler.method)?);
        }
        Command::Synth {
            out,
            n,
            test_n,
            vocab,
            min_len,
            max_len,
            seed,
            format,
        } => {
            let opts = SynthOptions {
                train_pairs: n,
                test_pairs: test_n,
                vocab_tokens: vocab,
                lengths: (min_len, max_len),
                seed,
                format,
            };
            let (train, test) = harness::synth(&out, &opts)?;
            println!("{}\n{}", train.display(), test.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
