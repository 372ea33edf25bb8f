//! Batch CLI: dataset generation, training, evaluation, verification.
//!
//! stdout carries machine-parseable `key=value` summary lines (plus CSV
//! for eval); human-facing prose goes to stderr. Exit codes: 0 ok,
//! 1 verification failure, 2 usage, 3 i/o or format, 4 numeric abort.

use clap::{Parser, Subcommand};
use hdc_core::config::Settings;
use hdc_core::error::HdcError;
use hdc_core::metrics::evaluate_model;
use hdc_core::synth::{self, Split};
use hdc_core::trainer::{load_checkpoint, run_experiment};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hdc", about = "Semi-supervised segmentation with hierarchical distillation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ultrasound-like dataset with a manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training samples (labeled + unlabeled); val and test splits are
        /// emitted on top.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long = "labeled-frac", default_value_t = 0.1)]
        labeled_frac: f64,
        /// Spatial size as HxW, e.g. 64x64.
        #[arg(long, default_value = "64x64")]
        size: String,
        /// Segmentation classes including background.
        #[arg(long, default_value_t = 2)]
        classes: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset.
    Train {
        /// key = value config file; omitted keys use documented defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Path to a dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value pairs overriding config-file values.
        #[arg(long = "override", num_args = 1.., value_name = "K=V")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional CSV output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suites (gradient checks, entropy and metric
    /// oracles) in double precision.
    Verify,
}

fn exit_code_for(err: &HdcError) -> u8 {
    match err {
        HdcError::Contract(_) => 2,
        HdcError::Io { .. } | HdcError::Format(_) => 3,
        HdcError::Numeric(_) => 4,
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), HdcError> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| HdcError::contract(format!("size must look like 64x64, got '{s}'")))?;
    let h = h.trim().parse::<usize>().map_err(|_| HdcError::contract(format!("bad height in '{s}'")))?;
    let w = w.trim().parse::<usize>().map_err(|_| HdcError::contract(format!("bad width in '{s}'")))?;
    Ok((h, w))
}

fn run(cli: Cli) -> Result<u8, HdcError> {
    hdc_core::exec::init_threads();
    match cli.command {
        Command::GenData { seed, n, labeled_frac, size, classes, out } => {
            let (h, w) = parse_size(&size)?;
            eprintln!("generating {n} training samples ({h}x{w}) into {}", out.display());
            let manifest = synth::generate_dataset_multiclass(seed, n, labeled_frac, h, w, classes, &out)?;
            println!("manifest={}", synth::manifest_path(&out).display());
            println!("labeled={} unlabeled={}", manifest.labeled, manifest.unlabeled);
            println!(
                "val={} test={}",
                manifest.records_for(Split::Val).len(),
                manifest.records_for(Split::Test).len()
            );
            Ok(0)
        }
        Command::Train { config, data, out, overrides } => {
            let mut settings = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| HdcError::io(path, e))?;
                    Settings::from_text(&text)?
                }
                None => {
                    let mut s = Settings::default();
                    s.finalize()?;
                    s
                }
            };
            settings.apply_overrides(&overrides)?;
            let manifest = synth::read_manifest(&data)?;
            eprintln!(
                "training {} iterations on {} labeled / {} unlabeled samples",
                settings.train.iterations, manifest.labeled, manifest.unlabeled
            );
            let result = run_experiment(&settings, &manifest, &out)?;
            println!("effective_config={}", out.join("effective-config").display());
            println!("train_log={}", out.join("train_log.csv").display());
            println!("checkpoint={}", result.checkpoint.display());
            println!(
                "final_dsc={:.6} final_hd={:.6} final_hd95={:.6} final_asd={:.6}",
                result.final_test.mean.dsc,
                result.final_test.mean.hd,
                result.final_test.mean.hd95,
                result.final_test.mean.asd
            );
            Ok(0)
        }
        Command::Eval { checkpoint, data, split, out } => {
            let split = Split::parse(&split)?;
            let session = load_checkpoint(&checkpoint)?;
            let manifest = synth::read_manifest(&data)?;
            let report = evaluate_model(&session.state, &manifest, split)?;
            let csv = report.to_csv();
            if let Some(path) = out {
                std::fs::write(&path, &csv).map_err(|e| HdcError::io(path, e))?;
            }
            print!("{csv}");
            Ok(0)
        }
        Command::Verify => {
            eprintln!("running property suites in double precision...");
            let results = hdc_core::verify::run_all();
            print!("{}", hdc_core::verify::render_table(&results));
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("verify_passed={} verify_failed={failed}", results.len() - failed);
            Ok(u8::from(failed > 0))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
