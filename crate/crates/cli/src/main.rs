//! `viplab` command line: corpus generation, training, evaluation, the
//! ablation ladder, the prompt-count sweep, embedding analysis, and plot
//! export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viplab_cli::config::ExperimentConfig;
use viplab_cli::plots;
use viplab_cli::runner;
use viplab_core::fusion::FusionMode;
use viplab_core::metrics;

#[derive(Parser)]
#[command(name = "viplab", about = "Visual-prompt detection laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key: --set section.key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => ExperimentConfig::from_toml("", &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write corpus descriptors (space seed, scene seeds, parameters) and
    /// the ground-truth dump for each split.
    GenerateCorpus {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write the checkpoint, record, and curves.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under a protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// visual-g or visual-i
        #[arg(long, default_value = "visual-g")]
        protocol: String,
        /// Override the fusion mode of active placements: none|full|selective.
        #[arg(long)]
        fusion_mode: Option<String>,
        /// Optional directory for the detection dump.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all roadmap variants over several seeds and emit the trend CSVs.
    AblationLadder {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompt-count robustness sweep on a trained checkpoint.
    PromptSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated prompt counts, e.g. 1,2,4,8,12.
        #[arg(long)]
        counts: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity distributions, IISR, and 2-D projection of an embedding dump.
    AnalyzeEmbeddings {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-export plot files from a saved run record or report.
    ExportPlots {
        /// Directory containing record.json / ladder.json / sweep.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_error(&err))
        }
    }
}

fn classify_error(err: &anyhow::Error) -> u8 {
    if let Some(core_err) = err.downcast_ref::<viplab_core::Error>() {
        if matches!(core_err, viplab_core::Error::NumericAbort { .. }) {
            return 3;
        }
    }
    let text = format!("{err:#}");
    if text.contains("numeric abort") {
        3
    } else if text.contains("config")
        || text.contains("TOML")
        || text.contains("override")
        || text.contains("mutually exclusive")
        || text.contains("must")
        || text.contains("schema")
    {
        2
    } else {
        1
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateCorpus { config, out } => {
            let config = config.load()?;
            std::fs::create_dir_all(&out)?;
            runner::write_corpus_spec(
                &config,
                "train",
                config.corpus.train_scenes,
                &out.join("train.json"),
            )?;
            runner::write_corpus_spec(
                &config,
                "eval",
                config.corpus.eval_scenes,
                &out.join("eval.json"),
            )?;
            let (_, scenes) = runner::read_corpus_spec(&out.join("eval.json"))?;
            runner::write_ground_truth(&scenes, &out.join("eval_gt.txt"))?;
            let (_, scenes) = runner::read_corpus_spec(&out.join("train.json"))?;
            runner::write_ground_truth(&scenes, &out.join("train_gt.txt"))?;
            println!("corpus descriptors written to {}", out.display());
            Ok(())
        }
        Command::Train { config, out } => {
            let config = config.load()?;
            std::fs::create_dir_all(&out)?;
            let (mut record, trained) = runner::run_training(&config)?;
            let checkpoint = out.join("checkpoint.json");
            runner::save_checkpoint(&trained, &checkpoint)?;
            record.checkpoint_path = Some(checkpoint.display().to_string());
            std::fs::write(out.join("record.json"), serde_json::to_string_pretty(&record)?)?;
            std::fs::write(
                out.join("training_curve.csv"),
                plots::training_curve_csv(&record),
            )?;
            let last = record.final_metrics();
            println!(
                "trained: visual-g mAP {:.4}, visual-i mAP {:.4}, iisr {}",
                last.visual_g_map,
                last.visual_i_map,
                last.iisr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            protocol,
            fusion_mode,
            out,
        } => {
            let trained = runner::load_checkpoint(&checkpoint)?;
            let mut fusion = trained.config.fusion_settings()?;
            if let Some(mode) = fusion_mode {
                let mode: FusionMode = mode.parse().map_err(anyhow::Error::new)?;
                if fusion.encoder != FusionMode::None {
                    fusion.encoder = mode;
                }
                if fusion.decoder != FusionMode::None {
                    fusion.decoder = mode;
                }
            }
            let (train_scenes, eval_scenes) =
                runner::build_corpora(&trained.config, &trained.space)?;
            match protocol.as_str() {
                "visual-g" => {
                    let categories: Vec<u32> = (0..trained.space.k() as u32).collect();
                    let bank = viplab_core::bench::protocol::visual_g_prompts(
                        &trained.model,
                        &trained.store,
                        &categories,
                        &train_scenes,
                        trained.config.corpus.support_per_class,
                        trained.config.experiment.seed ^ 0x5eed,
                    )?;
                    let (report, detections) = viplab_core::bench::protocol::evaluate_bank(
                        &trained.model,
                        &trained.store,
                        &eval_scenes,
                        &bank,
                        fusion,
                    )?;
                    if let Some(dir) = out {
                        std::fs::create_dir_all(&dir)?;
                        runner::write_detections(&detections, &dir.join("detections.txt"))?;
                    }
                    println!("visual-g mAP {:.4}", report.map);
                    for (cat, ap) in &report.per_category {
                        println!("  category {cat}: AP {ap:.4}");
                    }
                }
                "visual-i" => {
                    let report = viplab_core::bench::protocol::evaluate_visual_i(
                        &trained.model,
                        &trained.store,
                        &eval_scenes,
                        trained.config.experiment.seed ^ 0x1111,
                        fusion,
                    )?;
                    println!("visual-i mAP {:.4}", report.map);
                }
                other => anyhow::bail!("unknown protocol {other:?} (config error)"),
            }
            Ok(())
        }
        Command::AblationLadder { config, out } => {
            let config = config.load()?;
            std::fs::create_dir_all(&out)?;
            let report = viplab_cli::run_ablation_ladder(&config)?;
            std::fs::write(out.join("ladder.json"), serde_json::to_string_pretty(&report)?)?;
            plots::export_ladder(&report, &out)?;
            println!("variant,mean_visual_g_map,mean_iisr");
            for row in &report.rows {
                println!(
                    "{},{:.4},{:.4}",
                    row.variant, row.mean_visual_g_map, row.mean_iisr
                );
            }
            println!(
                "{},{:.4},{:.4}",
                report.scl_row.variant,
                report.scl_row.mean_visual_g_map,
                report.scl_row.mean_iisr
            );
            Ok(())
        }
        Command::PromptSweep {
            checkpoint,
            counts,
            out,
        } => {
            let trained = runner::load_checkpoint(&checkpoint)?;
            let counts: Vec<usize> = counts
                .split(',')
                .map(|t| t.trim().parse().map_err(anyhow::Error::new))
                .collect::<anyhow::Result<_>>()?;
            let report = viplab_cli::run_prompt_count_sweep(&trained, &counts)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
            plots::export_sweep(&report, &out)?;
            println!(
                "spread full {:.4}, spread selective {:.4}",
                report.spread_full, report.spread_selective
            );
            Ok(())
        }
        Command::AnalyzeEmbeddings { dump, out } => {
            let data = metrics::read_dump(&dump)?;
            std::fs::create_dir_all(&out)?;
            let report = metrics::similarity_distributions(&data)?;
            std::fs::write(
                out.join("similarity_report.csv"),
                plots::similarity_report_csv(&report),
            )?;
            std::fs::write(out.join("similarity_hist.svg"), plots::histogram_svg(&report))?;
            let projection = metrics::project_2d(&data)?;
            std::fs::write(
                out.join("projection.csv"),
                plots::projection_csv(&data, &projection),
            )?;
            std::fs::write(
                out.join("projection.svg"),
                plots::projection_svg(&data, &projection),
            )?;
            match metrics::iisr(&data) {
                Ok(i) => println!(
                    "iisr {:.4}{}",
                    i.value,
                    if i.negative_inter { " (negative inter-similarity)" } else { "" }
                ),
                Err(e) => println!("iisr unavailable: {e}"),
            }
            Ok(())
        }
        Command::ExportPlots { run, out } => {
            std::fs::create_dir_all(&out)?;
            let mut exported = false;
            let record_path = run.join("record.json");
            if record_path.exists() {
                let record: runner::RunRecord =
                    serde_json::from_str(&std::fs::read_to_string(record_path)?)?;
                std::fs::write(
                    out.join("training_curve.csv"),
                    plots::training_curve_csv(&record),
                )?;
                exported = true;
            }
            let ladder_path = run.join("ladder.json");
            if ladder_path.exists() {
                let report: viplab_cli::LadderReport =
                    serde_json::from_str(&std::fs::read_to_string(ladder_path)?)?;
                plots::export_ladder(&report, &out)?;
                exported = true;
            }
            let sweep_path = run.join("sweep.json");
            if sweep_path.exists() {
                let report: viplab_cli::SweepReport =
                    serde_json::from_str(&std::fs::read_to_string(sweep_path)?)?;
                plots::export_sweep(&report, &out)?;
                exported = true;
            }
            if !exported {
                anyhow::bail!(
                    "no record.json, ladder.json, or sweep.json in {}",
                    run.display()
                );
            }
            println!("plots exported to {}", out.display());
            Ok(())
        }
    }
}
