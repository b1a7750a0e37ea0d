//! `cpca` — command-line front end for the adaptation pipeline.
//!
//! The commands compose into the full experiment chain:
//! gen-data -> pretrain -> init-protos -> adapt -> pseudo-label ->
//! self-train -> eval -> report, all driven by one config file.

mod config;
mod plot;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use cpca_core::data::{gen_synthetic, load_manifest, save_dataset, write_atomic, Dataset};
use cpca_core::labels::LabelBatch;
use cpca_core::metrics::{format_table, scores, ConfusionMatrix};
use cpca_core::pipeline::{configure_threads, gen_test_split};
use cpca_core::self_training::{
    apply_to_dataset, collect_confidences, compute_thresholds, emit_pseudolabels,
};
use cpca_core::trainer::{
    adapt_cpca, evaluate, init_prototype_bank, load_checkpoint, pretrain_source, save_checkpoint,
    self_train,
};

#[derive(Parser)]
#[command(name = "cpca", version, about = "Causal prototype contrast adaptation for semantic segmentation")]
struct Cli {
    /// Force fully serial execution (same results, one thread).
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set train.seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired-domain datasets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Generation seed; defaults to train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 1: supervised pretraining on the source domain.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Source dataset manifest.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize class prototypes from the pretrained model.
    InitProtos {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: contrast adaptation with counterfactual intervention.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Checkpoint with initialized prototypes (or a partial adapt run
        /// together with --resume).
        #[arg(long)]
        ckpt: PathBuf,
        /// Stop after this many iterations (defaults to the configured
        /// phase length).
        #[arg(long)]
        until: Option<usize>,
        /// Continue from the checkpoint's stored iteration instead of
        /// starting the phase fresh.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit confidence-thresholded pseudo-labels for the target domain.
    PseudoLabel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 3: retrain on pseudo-labeled target data.
    SelfTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pseudo-labeled dataset manifest (from pseudo-label).
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        until: Option<usize>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or precomputed predictions) on a labeled set.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ground-truth dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint to run inference with.
        #[arg(long, conflicts_with = "pred")]
        ckpt: Option<PathBuf>,
        /// Manifest whose label maps are treated as predictions (matched to
        /// --data by sample id).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Run name used in tables.
        #[arg(long, default_value = "run")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison table and charts from metric records and training logs.
    Report {
        /// Metric record files (from eval).
        #[arg(long = "metrics", value_name = "FILE")]
        metrics: Vec<PathBuf>,
        /// Training-log CSV files.
        #[arg(long = "logs", value_name = "FILE")]
        logs: Vec<PathBuf>,
        /// Optional config; enables the analytic momentum-schedule chart.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.serial {
        Some(1)
    } else {
        std::env::var("CPCA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    };
    configure_threads(threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<config::ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::from_file(&args.config, &args.set)?)
}

/// Echo the resolved configuration next to the artifacts.
fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("config.resolved.txt"), cfg.to_text().as_bytes())?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, seed, out } => {
            let cfg = load_config(&cfg)?;
            echo_config(&out, &cfg)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let (source, target) = gen_synthetic(&cfg.synth, seed)?;
            save_dataset(&out.join("source"), &source)?;
            save_dataset(&out.join("target"), &target)?;
            if cfg.n_target_test > 0 {
                let test = gen_test_split(&cfg.synth, seed, cfg.n_target_test)?;
                save_dataset(&out.join("target_test"), &test)?;
            }
            println!(
                "generated {} source + {} target train and {} target test samples under {}",
                source.len(),
                target.len(),
                cfg.n_target_test,
                out.display()
            );
            Ok(())
        }

        Command::Pretrain { cfg, source, out } => {
            let cfg = load_config(&cfg)?;
            echo_config(&out, &cfg)?;
            let train = cfg.resolved_train();
            let source = load_manifest(&source)?;
            let (state, log) = pretrain_source(&train, &cfg.arch, &source)?;
            write_atomic(&out.join("pretrain_log.csv"), log.to_csv().as_bytes())?;
            save_checkpoint(&out.join("pretrained.ckpt"), &state, cfg.digest())?;
            let last = log.records.last().map(|r| r.bundle.l_seg).unwrap_or(f64::NAN);
            println!(
                "pretrained {} iterations, final source CE {last:.4}; wrote {}",
                train.pretrain.iterations,
                out.join("pretrained.ckpt").display()
            );
            Ok(())
        }

        Command::InitProtos { cfg, source, ckpt, out } => {
            let cfg = load_config(&cfg)?;
            echo_config(&out, &cfg)?;
            let train = cfg.resolved_train();
            let source = load_manifest(&source)?;
            let mut state = load_checkpoint(&ckpt, cfg.digest())?;
            let bank = init_prototype_bank(&train, &state.params, &source)?;
            let seen = bank.valid.iter().filter(|&&v| v).count();
            state.bank = Some(bank);
            state.iteration = 0;
            state.velocities.clear();
            save_checkpoint(&out.join("protos.ckpt"), &state, cfg.digest())?;
            println!(
                "initialized prototypes for {seen}/{} classes; wrote {}",
                cfg.arch.num_classes,
                out.join("protos.ckpt").display()
            );
            Ok(())
        }

        Command::Adapt {
            cfg,
            source,
            target,
            ckpt,
            until,
            resume,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            echo_config(&out, &cfg)?;
            let train = cfg.resolved_train();
            let source = load_manifest(&source)?;
            let target = load_manifest(&target)?;
            let mut state = load_checkpoint(&ckpt, cfg.digest())?;
            if !resume {
                state.iteration = 0;
                state.velocities.clear();
            }
            let end = until.unwrap_or(train.adapt.iterations).min(train.adapt.iterations);
            let log = adapt_cpca(&train, &mut state, &source, &target, end)?;
            write_atomic(&out.join("adapt_log.csv"), log.to_csv().as_bytes())?;
            save_checkpoint(&out.join("adapted.ckpt"), &state, cfg.digest())?;
            println!(
                "adapted to iteration {}; wrote {}",
                state.iteration,
                out.join("adapted.ckpt").display()
            );
            Ok(())
        }

        Command::PseudoLabel { cfg, target, ckpt, out } => {
            let cfg = load_config(&cfg)?;
            echo_config(&out, &cfg)?;
            let train = cfg.resolved_train();
            let target = load_manifest(&target)?;
            let state = load_checkpoint(&ckpt, cfg.digest())?;
            let sets = collect_confidences(&state.params, &target, cfg.inference)?;
            let thresholds = compute_thresholds(&sets, train.eta)?;
            let set = emit_pseudolabels(&state.params, &target, &sets, &thresholds, train.eta, cfg.inference)?;
            let pseudo_ds = apply_to_dataset(&target, &set);
            let manifest = save_dataset(&out.join("pseudo"), &pseudo_ds)?;
            let mut summary = String::from("class,predicted,threshold,retained\n");
            let retained = set.retained_per_class(cfg.arch.num_classes);
            for (k, name) in target.class_names.iter().enumerate() {
                summary.push_str(&format!(
                    "{name},{},{},{}\n",
                    set.class_counts[k], set.thresholds[k], retained[k]
                ));
            }
            write_atomic(&out.join("pseudo_summary.csv"), summary.as_bytes())?;
            println!(
                "retained {} of {} pixels; wrote {}",
                set.total_retained(),
                set.class_counts.iter().sum::<usize>(),
                manifest.display()
            );
            Ok(())
        }

        Command::SelfTrain {
            cfg,
            pseudo,
            ckpt,
            until,
            resume,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            echo_config(&out, &cfg)?;
            let train = cfg.resolved_train();
            let pseudo = load_manifest(&pseudo)?;
            let mut state = load_checkpoint(&ckpt, cfg.digest())?;
            if !resume {
                state.iteration = 0;
                state.velocities.clear();
            }
            let end = until
                .unwrap_or(train.selftrain.iterations)
                .min(train.selftrain.iterations);
            let log = self_train(&train, &mut state, &pseudo, end)?;
            write_atomic(&out.join("selftrain_log.csv"), log.to_csv().as_bytes())?;
            save_checkpoint(&out.join("final.ckpt"), &state, cfg.digest())?;
            println!(
                "self-trained to iteration {}; wrote {}",
                state.iteration,
                out.join("final.ckpt").display()
            );
            Ok(())
        }

        Command::Eval {
            cfg,
            data,
            ckpt,
            pred,
            name,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            echo_config(&out, &cfg)?;
            let dataset = load_manifest(&data)?;
            let report = match (ckpt, pred) {
                (Some(ckpt), None) => {
                    let state = load_checkpoint(&ckpt, cfg.digest())?;
                    evaluate(&state.params, &dataset, cfg.inference)?
                }
                (None, Some(pred)) => eval_predictions(&dataset, &pred)?,
                _ => bail!("eval needs exactly one of --ckpt or --pred"),
            };
            write_atomic(&out.join("metrics.txt"), report.to_record().as_bytes())?;
            let table = format_table(&[(name, report.clone())])?;
            write_atomic(&out.join("metrics_table.txt"), table.as_bytes())?;
            print!("{table}");
            Ok(())
        }

        Command::Report {
            metrics,
            logs,
            config,
            set,
            out,
        } => {
            let train_cfg = match config {
                Some(path) => Some(RunConfig::from_file(&path, &set)?.resolved_train()),
                None => None,
            };
            report::build_report(&out, &metrics, &logs, train_cfg.as_ref())?;
            Ok(())
        }
    }
}

/// Score precomputed prediction maps against ground truth, matching
/// samples by id.
fn eval_predictions(gt: &Dataset, pred_manifest: &Path) -> Result<cpca_core::metrics::MetricReport> {
    let pred = load_manifest(pred_manifest)?;
    let by_id: BTreeMap<&str, usize> = pred
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut conf = ConfusionMatrix::new(gt.num_classes);
    for sample in &gt.samples {
        let Some(&idx) = by_id.get(sample.id.as_str()) else {
            bail!("prediction manifest is missing sample `{}`", sample.id);
        };
        let p = LabelBatch::from_maps(&[&pred.samples[idx].labels]);
        let g = LabelBatch::from_maps(&[&sample.labels]);
        conf.accumulate(&p, &g)?;
    }
    Ok(scores(&conf, &gt.class_names))
}
