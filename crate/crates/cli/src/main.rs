//! `diffse` binary: corpus generation, training, enhancement, evaluation and
//! ablation sweeps over noise-conditioned diffusion speech enhancement.
//!
//! Every command echoes its fully resolved configuration to the output
//! directory before doing any work, and all randomness flows from the config
//! seed (or the `--seed` override), so runs are reproducible from artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffse_core::checkpoint::Checkpoint;
use diffse_core::datagen::{build_corpus, load_manifest, load_records, Record, Split};
use diffse_core::error::Error;
use diffse_core::experiment::{
    build_report, echo_config, enhance_records, evaluate_records, read_embeddings_csv, run_sweep,
    run_train, write_embeddings_csv, write_eval_table_csv, write_per_utterance_csv,
    ExperimentConfig, SweepAxis,
};
use diffse_core::metrics::UtteranceEval;

#[derive(Parser)]
#[command(
    name = "diffse",
    about = "Noise-conditioned diffusion speech enhancement on synthetic signals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus on disk.
    Datagen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override every stage seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker thread cap (0 = library default).
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Train a model; writes a checkpoint and the training report CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory (with manifest.json); generated in memory from
        /// the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Enhance the signals referenced by a corpus manifest.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split to enhance: train, test, unseen_eval or all.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Score previously enhanced signals against their references.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        enhanced: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Train and compare every setting along one ablation axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis: lambda_nc, inject or pretrain-freeze.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Config(_) | Error::Json(_) | Error::InfeasibleSchedule { .. } => 3,
        Error::CheckpointVersion { .. } | Error::CheckpointFormat(_) => 4,
        Error::EmptyInput(_) | Error::EmptyBatch => 5,
        Error::Diverged { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteState { .. } => 6,
        _ => 1,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let cfg = ExperimentConfig::from_json(&text)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_corpus(
    cfg: &ExperimentConfig,
    corpus: &Option<PathBuf>,
) -> Result<Vec<Record>, Error> {
    match corpus {
        Some(dir) => {
            let manifest = load_manifest(&dir.join("manifest.json"))?;
            load_records(&manifest, dir)
        }
        None => diffse_core::datagen::generate_records(&cfg.corpus),
    }
}

fn parse_split(s: &str) -> Result<Option<Split>, Error> {
    match s {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "unseen_eval" | "unseen-eval" => Ok(Some(Split::UnseenEval)),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Datagen { config, out, seed, threads } => {
            diffse_core::par::configure_threads(threads);
            let cfg = load_config(&config, seed)?;
            echo_config(&cfg, &out)?;
            let manifest = build_corpus(&cfg.corpus, &out)?;
            println!(
                "datagen: wrote {} records across {} families to {}",
                manifest.records.len(),
                manifest.families.len(),
                out.display()
            );
        }
        Command::Train { config, out, corpus, seed, threads } => {
            diffse_core::par::configure_threads(threads);
            let cfg = load_config(&config, seed)?;
            let records = load_corpus(&cfg, &corpus)?;
            let (model, report, _) = run_train(&cfg, &records, &out)?;
            let acc = report
                .final_nc_accuracy()
                .map(|a| format!("{:.1}%", 100.0 * a))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "train: {} params, {} epochs, final nc accuracy {acc}; checkpoint at {}",
                model.param_count(),
                report.epochs.len(),
                out.join("checkpoint.bin").display()
            );
        }
        Command::Enhance { checkpoint, manifest, out, split, seed, threads } => {
            diffse_core::par::configure_threads(threads);
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = ExperimentConfig::from_json(&ckpt.config_json)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let man = load_manifest(&manifest)?;
            let base_dir = manifest.parent().unwrap_or(Path::new("."));
            let mut records = load_records(&man, base_dir)?;
            if let Some(filter) = parse_split(&split)? {
                records.retain(|r| r.split == filter);
            }
            if records.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "manifest has no records for split {split:?}"
                )));
            }
            std::fs::create_dir_all(&out)?;
            echo_config(&cfg, &out)?;
            let enhanced = enhance_records(&ckpt.model, &ckpt.schedule, &records, &cfg.sampler)?;
            for (rec, sig) in records.iter().zip(&enhanced) {
                diffse_core::datagen::write_raw(
                    &out.join(format!("{}_enhanced.f64", rec.id)),
                    sig,
                )?;
            }
            let (rows, embeddings) =
                evaluate_records(Some(&ckpt.model), &records, &enhanced, &cfg.metrics)?;
            write_per_utterance_csv(&rows, &out.join("per_utterance.csv"))?;
            if !embeddings.is_empty() {
                write_embeddings_csv(&embeddings, &out.join("embeddings.csv"))?;
            }
            println!("enhance: wrote {} signals to {}", records.len(), out.display());
        }
        Command::Eval { manifest, enhanced, out, threads } => {
            diffse_core::par::configure_threads(threads);
            let man = load_manifest(&manifest)?;
            let base_dir = manifest.parent().unwrap_or(Path::new("."));
            let all = load_records(&man, base_dir)?;
            // score whichever records have enhanced signals present
            let mut records = Vec::new();
            let mut signals = Vec::new();
            for rec in all {
                let path = enhanced.join(format!("{}_enhanced.f64", rec.id));
                if path.exists() {
                    signals.push(diffse_core::datagen::read_raw(&path)?);
                    records.push(rec);
                }
            }
            if records.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "no enhanced signals found in {}",
                    enhanced.display()
                )));
            }
            std::fs::create_dir_all(&out)?;
            let metrics_cfg = diffse_core::experiment::MetricsConfig::default();
            let (mut rows, _) = evaluate_records(None, &records, &signals, &metrics_cfg)?;
            // merge classifier predictions from the enhance stage if present
            let pred_path = enhanced.join("per_utterance.csv");
            if pred_path.exists() {
                let prior = diffse_core::experiment::read_per_utterance_csv(&pred_path)?;
                for row in rows.iter_mut() {
                    if let Some(p) = prior.iter().find(|p| p.id == row.id) {
                        row.predicted_class = p.predicted_class;
                    }
                }
            }
            let embeddings = {
                let p = enhanced.join("embeddings.csv");
                if p.exists() {
                    read_embeddings_csv(&p)?
                } else {
                    Vec::new()
                }
            };
            let n_classes = diffse_core::datagen::seen_families().len();
            let report = build_report(&rows, &embeddings, n_classes)?;
            write_per_utterance_csv(&rows, &out.join("per_utterance.csv"))?;
            write_eval_table_csv(&rows, &out.join("eval_table.csv"))?;
            std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
            print_report(&rows, &report);
        }
        Command::Sweep { config, axis, out, corpus, seed, threads } => {
            diffse_core::par::configure_threads(threads);
            let cfg = load_config(&config, seed)?;
            let axis = SweepAxis::parse(&axis)?;
            let records = load_corpus(&cfg, &corpus)?;
            let rows = run_sweep(&cfg, axis, &records, &out)?;
            println!(
                "sweep: {} settings; comparison at {}",
                rows.len(),
                out.join("comparison.csv").display()
            );
            for r in &rows {
                let acc = r
                    .nc_accuracy
                    .map(|a| format!("{:.1}%", 100.0 * a))
                    .unwrap_or_else(|| "n/a".into());
                println!(
                    "  {:>12}: nc_acc={acc:>6} in-dist {:.2} -> {:.2} dB, unseen {:.2} -> {:.2} dB",
                    r.setting,
                    r.in_dist_si_sdr_noisy,
                    r.in_dist_si_sdr_enhanced,
                    r.unseen_si_sdr_noisy,
                    r.unseen_si_sdr_enhanced
                );
            }
        }
    }
    Ok(())
}

fn print_report(rows: &[UtteranceEval], report: &diffse_core::metrics::EvalReport) {
    println!(
        "eval: {} utterances, si-sdr {:.2} -> {:.2} dB, seg-snr {:.2} -> {:.2} dB",
        rows.len(),
        report.mean_si_sdr_noisy,
        report.mean_si_sdr_enhanced,
        report.mean_seg_snr_noisy,
        report.mean_seg_snr_enhanced
    );
    if let Some(acc) = report.nc_accuracy {
        println!("eval: nc accuracy {:.1}%", 100.0 * acc);
    }
    if let Some(sep) = report.separability {
        println!("eval: embedding separability {sep:.3}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
