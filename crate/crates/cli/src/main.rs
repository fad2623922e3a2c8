use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use unime_core::experiment;
use unime_core::{Architecture, ExperimentConfig};

/// Missing-modality brain tumor segmentation on synthetic multimodal phantoms.
#[derive(Parser, Debug)]
#[command(name = "unime", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from: desk, paper or tiny.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Request bit-reproducible execution (always honoured on the CPU backend).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: masked reconstruction pretraining of the transformer encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Continue from a stage-1 checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: train the segmentation network.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Stage-1 checkpoint directory supplying the encoder weights.
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Continue from a stage-2 checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// full, multi-only or uni-only.
        #[arg(long, value_parser = parse_arch)]
        arch: Option<Architecture>,
        /// Keep the transformer encoder fixed.
        #[arg(long)]
        freeze_uni: bool,
        /// Initialize the transformer encoder randomly instead of from stage 1.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate a checkpoint over all 15 modality subsets of the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    Architecture::parse(s).ok_or_else(|| format!("unknown architecture {s:?} (full, multi-only, uni-only)"))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, common.preset.as_deref())?,
        None => ExperimentConfig::preset(common.preset.as_deref().unwrap_or("desk"))?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("UNIME_NUM_WORKERS") {
        let n: usize = v.parse().with_context(|| format!("UNIME_NUM_WORKERS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { common, force } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, "data");
            let manifest = experiment::gen_data(&cfg, &out, force)?;
            println!("wrote {} cases to {}", manifest.cases.len(), show(&out));
        }
        Command::Pretrain { common, data, resume } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, "runs/stage1");
            let s = experiment::pretrain(&cfg, &data, &out, resume.as_deref())?;
            let last = s.losses.last().copied().unwrap_or(f64::NAN);
            println!("pretraining finished at step {} (last loss {last:.5}) in {}", s.final_step, show(&out));
        }
        Command::Finetune {
            common,
            data,
            stage1,
            resume,
            arch,
            freeze_uni,
            from_scratch,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = arch {
                cfg.model.arch = a;
            }
            cfg.model.from_scratch |= from_scratch;
            cfg.finetune.optim.freeze_uni_encoder |= freeze_uni;
            let out = out_dir(&cfg, "runs/stage2");
            let s = experiment::finetune(&cfg, &data, stage1.as_deref(), &out, resume.as_deref())?;
            match s.best_val_dsc {
                Some(d) => println!("fine-tuning finished at step {} (best validation DSC {d:.4}) in {}", s.final_step, show(&out)),
                None => println!("fine-tuning finished at step {} in {}", s.final_step, show(&out)),
            }
        }
        Command::Eval { common, data, ckpt } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, "runs/eval");
            let e = experiment::evaluate(&cfg, &ckpt, &data, &out)?;
            let avg = e.report.average;
            println!(
                "mean DSC over 15 subsets: WT {:.2} TC {:.2} ET {:.2}",
                avg[0].dsc, avg[1].dsc, avg[2].dsc
            );
            for f in e.files {
                println!("wrote {}", show(&f));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<unime_core::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
