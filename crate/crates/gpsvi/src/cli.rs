//! Command-line surface: dataset generation, training, evaluation, the
//! diagnostic reports, and the quick oracle suite.
//!
//! Exit codes: 0 success, 1 validation failure (bad flags, malformed or
//! invalid config, mismatched data), 2 runtime abort (non-finite loss or an
//! internal numeric failure).

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, holdout_split, load_jsonl, split_head_tail, DataError, Dataset, Manifest,
    SplitInfo, SynthConfig,
};
use crate::eval::{
    evaluate, mask_sensitivity, variance_report, write_sensitivity_csv, write_variance_csv,
};
use crate::models::CtrModel;
use crate::params::ParamStore;
use crate::train::{render_eval_report, train, TrainError};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "gpsvi",
    version,
    about = "Group-prior variational CTR laboratory",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic long-tail dataset directory (train.jsonl,
    /// eval.jsonl, manifest.json).
    GenerateData {
        /// Path to a generator config JSON document.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per run config; writes run_config.json, checkpoint.json and
    /// metrics.json into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset with a trained checkpoint (mean-path inference unless
    /// the run config asks for MC samples); writes metrics.json.
    Evaluate {
        /// checkpoint.json written by `train`; its run_config.json sidecar
        /// must sit in the same directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL dataset (manifest.json next to it is honored).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnostic reports from a trained checkpoint.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Run the quick oracle suite (gradient, KL Monte-Carlo, flow
    /// round-trip, AUC brute-force, determinism).
    Selftest,
}

#[derive(Subcommand, Debug)]
pub enum ReportKind {
    /// Mean posterior scale per sequence-length bin (variance_report.csv).
    Variance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of log-spaced length bins.
        #[arg(long, default_value_t = 8)]
        bins: usize,
    },
    /// Per-dimension latent shift when behaviors are masked
    /// (sensitivity.csv).
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `argv` and run; the returned code is the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are clap "errors" but user successes.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_runtime_abort() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), TrainError> {
    match command {
        Command::GenerateData { config, seed, out } => generate_data(&config, seed, &out),
        Command::Train { config, out } => run_train(&config, &out),
        Command::Evaluate { checkpoint, data, out } => run_evaluate(&checkpoint, &data, &out),
        Command::Report { kind } => match kind {
            ReportKind::Variance { checkpoint, data, out, bins } => {
                run_variance(&checkpoint, &data, &out, bins)
            }
            ReportKind::Sensitivity { checkpoint, data, out } => {
                run_sensitivity(&checkpoint, &data, &out)
            }
        },
        Command::Selftest => run_selftest(),
    }
}

fn parse_synth_config(path: &Path) -> Result<SynthConfig, TrainError> {
    let text = std::fs::read_to_string(path).map_err(TrainError::Io)?;
    let cfg: SynthConfig = serde_json::from_str(&text).map_err(|e| {
        DataError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn generate_data(config: &Path, seed: u64, out: &Path) -> Result<(), TrainError> {
    let synth = parse_synth_config(config)?;
    let full = generate_synthetic(&synth, seed)?;
    let (train_ds, eval_ds) = holdout_split(&full, synth.eval_impressions);
    std::fs::create_dir_all(out)?;
    let mut splits = BTreeMap::new();
    for (name, ds) in [("train", &train_ds), ("eval", &eval_ds)] {
        let file = format!("{name}.jsonl");
        crate::data::write_jsonl(ds, &out.join(&file))?;
        splits.insert(
            name.to_string(),
            SplitInfo { file, records: ds.len(), sha256: ds.content_hash() },
        );
    }
    let manifest = Manifest {
        seed,
        n_users: full.vocab.n_users,
        n_groups: full.vocab.n_groups,
        n_items: full.vocab.n_items,
        n_contexts: full.vocab.n_contexts,
        max_seq_len: synth.max_seq_len,
        splits,
        synth,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .expect("manifest serialization cannot fail") + "\n";
    crate::jsonfmt::write_atomic(&out.join("manifest.json"), text.as_bytes())?;
    println!(
        "wrote {} train and {} eval records to {}",
        train_ds.len(),
        eval_ds.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: &Path, out: &Path) -> Result<(), TrainError> {
    let cfg = RunConfig::load(config)?;
    let summary = train(&cfg, out)?;
    for (r, rep) in summary.repeats.iter().enumerate() {
        let auc = rep
            .eval
            .as_ref()
            .and_then(|e| e.auc.all)
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "repeat {r}: final loss {:.6}, eval AUC {auc}",
            rep.final_loss
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

/// Rebuild the model a checkpoint was trained with and load its weights.
/// The run_config.json sidecar supplies the architecture; the dataset
/// supplies the vocabulary, so a mismatched pairing fails shape checks.
fn load_model(
    checkpoint: &Path,
    data: &Path,
) -> Result<(RunConfig, Dataset, CtrModel, ParamStore), TrainError> {
    let sidecar = checkpoint
        .parent()
        .map(|d| d.join("run_config.json"))
        .filter(|p| p.is_file())
        .ok_or_else(|| {
            TrainError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!(
                    "no run_config.json next to {}; evaluate needs the training sidecar",
                    checkpoint.display()
                ),
            ))
        })?;
    let cfg = RunConfig::load(&sidecar)?;
    // Keep the length-feature normalization identical to training: synthetic
    // runs derive it from the generator, file runs from data.max_seq_len.
    let cap = cfg
        .data
        .synthetic
        .as_ref()
        .map(|s| s.max_seq_len)
        .unwrap_or(cfg.data.max_seq_len);
    let ds = load_jsonl(data, cap)?;
    let (model, store) = CtrModel::init(cfg.model.clone(), ds.vocab, ds.max_seq_len, 0)?;
    store.load_checkpoint(checkpoint)?;
    Ok((cfg, ds, model, store))
}

fn run_evaluate(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), TrainError> {
    let (cfg, ds, model, store) = load_model(checkpoint, data)?;
    let segments = split_head_tail(&ds, cfg.eval.head_quantile)?;
    let report = evaluate(
        &model,
        &store,
        &ds,
        &segments,
        cfg.eval.mc_samples,
        cfg.seeds.noise,
    )?;
    std::fs::create_dir_all(out)?;
    render_eval_report(&report)
        .write_atomic(&out.join("metrics.json"))
        .map_err(TrainError::Io)?;
    let show = |v: Option<f64>| v.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{} records: AUC all {} head {} tail {}",
        report.n_records,
        show(report.auc.all),
        show(report.auc.head),
        show(report.auc.tail)
    );
    Ok(())
}

fn run_variance(checkpoint: &Path, data: &Path, out: &Path, bins: usize) -> Result<(), TrainError> {
    let (_cfg, ds, model, store) = load_model(checkpoint, data)?;
    let rows = variance_report(&model, &store, &ds, bins)?;
    std::fs::create_dir_all(out)?;
    write_variance_csv(&out.join("variance_report.csv"), &rows)?;
    println!(
        "wrote {} length bins to {}",
        rows.len(),
        out.join("variance_report.csv").display()
    );
    Ok(())
}

fn run_sensitivity(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), TrainError> {
    let (cfg, ds, model, store) = load_model(checkpoint, data)?;
    let segments = split_head_tail(&ds, cfg.eval.head_quantile)?;
    let s = mask_sensitivity(&model, &store, &ds, &segments)?;
    std::fs::create_dir_all(out)?;
    write_sensitivity_csv(&out.join("sensitivity.csv"), &s)?;
    println!("wrote {} dims to {}", s.tail.len(), out.join("sensitivity.csv").display());
    Ok(())
}

fn run_selftest() -> Result<(), TrainError> {
    let results = crate::selftest::run_all()?;
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", r.name, r.detail);
        failed += (!r.passed) as usize;
    }
    if failed > 0 {
        return Err(TrainError::Io(std::io::Error::other(format!(
            "{failed} of {} self-test checks failed",
            results.len()
        ))));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
