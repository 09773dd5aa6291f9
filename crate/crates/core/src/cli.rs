//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::data::{build_manifest, materialize, Fractions, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, infer_dir, ExternalMethod};
use crate::gradcheck::run_suite;
use crate::model::{DEFAULT_IMAGE_SIZE, DEFAULT_SLOPE};
use crate::train::{fit, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fcgan", version, about = "Face super-resolution with an equilibrium-controlled conditional GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialize HR, LR and BHR images for every image of a corpus.
    Degrade {
        corpus: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
        size: usize,
    },
    /// Write a seeded train/val/test split of a corpus.
    Manifest {
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "0.9,0.05,0.05")]
        fractions: Fractions,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a `key = value` config file.
    Train { config: PathBuf },
    /// Super-resolve an image or a directory of LR or BHR images.
    Infer {
        checkpoint: PathBuf,
        inputs: PathBuf,
        out: PathBuf,
    },
    /// Mean PSNR table of bicubic, the model and optional external methods.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Corpus directory; defaults to the one in the checkpoint's config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Another method's outputs as `name=dir`, images named by id.
        #[arg(long = "external")]
        externals: Vec<ExternalMethod>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SLOPE)]
        slope: f64,
    },
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Output goes to stdout, diagnostics to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Degrade { corpus, out, size } => {
            let ids = materialize(&corpus, &out, size)?;
            println!("materialized {} records into {}", ids.len(), out.display());
        }
        Command::Manifest {
            corpus,
            seed,
            fractions,
            out,
        } => {
            let manifest = build_manifest(&corpus, seed, fractions)?;
            write_or_print(out.as_ref(), &manifest.to_text())?;
            eprintln!(
                "train {} / val {} / test {}",
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len()
            );
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let outputs = fit(&cfg)?;
            println!(
                "trained to step {}; checkpoint {}; metrics {}",
                outputs.checkpoint.state.step,
                outputs.final_checkpoint.display(),
                outputs.metrics.display()
            );
        }
        Command::Infer {
            checkpoint,
            inputs,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            for path in infer_dir(&ckpt, &inputs, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            corpus,
            split,
            externals,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let manifest = SplitManifest::load(&manifest)?;
            let corpus = corpus
                .or_else(|| ckpt.config.corpus_dir.clone())
                .ok_or_else(|| Error::Invalid("eval needs --corpus".into()))?;
            let evaluation = evaluate(&ckpt, &manifest, split, &corpus, &externals)?;
            for w in &evaluation.warnings {
                eprintln!("warning: {w}");
            }
            if !evaluation.warnings.is_empty() {
                eprintln!("{} image(s) excluded", evaluation.warnings.len());
            }
            write_or_print(out.as_ref(), &evaluation.to_csv())?;
        }
        Command::Gradcheck { seed, slope } => {
            let cases = run_suite(seed, slope)?;
            let mut all = true;
            for case in &cases {
                all &= case.passed();
                println!(
                    "{:<18} max_rel_err {:.3e}  coords {:>4}  {}",
                    case.name,
                    case.report.max_relative_error,
                    case.report.coords_checked,
                    if case.passed() { "ok" } else { "FAIL" }
                );
            }
            return Ok(if all { EXIT_OK } else { EXIT_RUNTIME });
        }
    }
    Ok(EXIT_OK)
}
