//! Command-line front end. `run` never exits the process; it returns the
//! exit code so tests can drive it in-process.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::data::{load_dataset, save_dataset, synth_dataset, SegmentationSample};
use super::eval::{evaluate, predict_masks};
use super::pgm::{load_pgm, save_mask_pgm};
use super::selftest::run_all;
use super::train::{train, TrainState};
use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rich-unet", version, about = "Train, evaluate and run a Rich-U-Net segmentation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a PGM dataset directory or on generated ellipses.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict the mask of one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Run the built-in invariant suites.
    Selftest,
    /// Write a generated ellipse dataset to disk.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with `images/` and `masks/`.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    /// Number of generated samples (seeded by `--seed`); also saved to OUT/data.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from this checkpoint instead of a fresh network.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => run_train(args, out),
        Command::Eval { checkpoint, data, report } => run_eval(&checkpoint, &data, &report, out),
        Command::Infer { checkpoint, image, mask } => run_infer(&checkpoint, &image, &mask),
        Command::Selftest => match run_all(out) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Numerical("selftest failed".into())),
            Err(e) => Err(e.into()),
        },
        Command::Synth { n, size, seed, out: dir } => {
            synth_dataset(n, size, size, seed).and_then(|d| save_dataset(&d, &dir))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn run_train(args: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = Some(steps);
    }
    fs::create_dir_all(&args.out)?;
    let data: Vec<SegmentationSample> = match (&args.data, args.synth) {
        (Some(dir), _) => load_dataset(dir)?,
        (None, Some(n)) => {
            let d = synth_dataset(n, cfg.image_size, cfg.image_size, cfg.train.seed)?;
            save_dataset(&d, &args.out.join("data"))?;
            d
        }
        (None, None) => return Err(Error::Usage("train needs --data or --synth".into())),
    };
    let mut state = match &args.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            if let Some(steps) = args.steps {
                state.config.steps = Some(steps);
            }
            state
        }
        None => TrainState::new(&cfg.net, cfg.train.clone())?,
    };
    let total = state.config.total_steps(data.len());
    let every = state.config.checkpoint_every;
    let log_path = args.out.join("log.csv");
    let mut log = if args.resume.is_some() && log_path.exists() {
        fs::read_to_string(&log_path)?
    } else {
        String::from("step,loss,dice\n")
    };
    train(&mut state, &data, total, |st, entry| {
        writeln!(out, "{entry}")?;
        log.push_str(&format!("{},{:.12},{:.12}\n", entry.step, entry.loss, entry.dice));
        if every > 0 && st.step % every == 0 {
            save_checkpoint(st, &args.out.join(format!("checkpoint_{:06}.bin", st.step)))?;
        }
        Ok(())
    })?;
    fs::write(&log_path, log)?;
    save_checkpoint(&state, &args.out.join("checkpoint.bin"))?;
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, report: &Path, out: &mut dyn Write) -> Result<()> {
    let mut state = load_checkpoint(checkpoint)?;
    let data = load_dataset(data)?;
    let result = evaluate(&mut state.net, &data)?;
    fs::write(report, result.to_csv())?;
    write!(out, "{}", result.to_table())?;
    Ok(())
}

fn run_infer(checkpoint: &Path, image: &Path, mask: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let image = load_pgm(image)?;
    state.net.config().validate_input(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?;
    let pred = predict_masks(&state.net, &image)?.remove(0);
    save_mask_pgm(&pred, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run_capture(&["rich-unet", "train", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"));
        let (code, _, _) = run_capture(&["rich-unet", "train", "--out", "x"]);
        assert_eq!(code, EXIT_USAGE);
        let (code, _, _) = run_capture(&["rich-unet", "train", "--out", "x", "--synth", "2", "--data", "y"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["rich-unet", "--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("selftest"));
    }

    #[test]
    fn missing_files_are_data_errors() {
        let (code, _, err) = run_capture(&["rich-unet", "infer", "--checkpoint", "/nonexistent.bin", "--image", "a", "--mask", "b"]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.starts_with("error:"));
    }
}
