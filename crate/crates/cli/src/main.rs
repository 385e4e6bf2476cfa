use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdiqa::data::{load_manifest, synthetic_dataset, write_manifest, ManifestEntry};
use mdiqa::losses::RatioOverride;
use mdiqa::metrics::evaluate;
use mdiqa::restore::{sweep_ratio, train_restorer, RestorationRun};
use mdiqa::train::{load_checkpoint, save_checkpoint, train_stage1, train_stage2, LogRecord, TrainOptions};
use mdiqa::{DType, ImageTensor, MdiqaConfig, MultiDimSample};

#[derive(Parser)]
#[command(name = "mdiqa", version, about = "Multi-dimensional image quality assessment")]
struct Cli {
    /// Replaces every seed in the configuration with values derived from this one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON configuration file; desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1 (heads) or stage 2 (aggregation).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage 1: an incomplete stage-1 checkpoint. Stage 2: a finished
        /// stage-1 checkpoint or an incomplete stage-2 one.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training manifest; the configured synthetic set when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stop after this many steps and save an incomplete checkpoint.
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation report over repeated random splits.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation manifest; the configured synthetic set when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        splits: Option<usize>,
        /// Directory for report.json and report.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print per-dimension scores, weights and the overall score as JSON.
    Score {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train a restorer against a frozen critic.
    Restore {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        critic: PathBuf,
        /// Per-dimension weight ratio, `dim=λ`; repeatable.
        #[arg(long = "ratio")]
        ratios: Vec<String>,
        /// Directory for restored images, metrics.json and log.jsonl.
        #[arg(long, default_value = "restore-out")]
        out: PathBuf,
    },
    /// One restoration run per ratio of one dimension.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        critic: PathBuf,
        #[arg(long)]
        dim: String,
        /// Ascending, comma separated, starting at 1.0.
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        /// Directory for sweep.csv and per-ratio outputs.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Write synthetic samples and their manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<MdiqaConfig> {
    let mut cfg = match &arg.config {
        Some(p) => MdiqaConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => MdiqaConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn dataset(cfg: &MdiqaConfig, manifest: Option<&Path>) -> Result<Vec<MultiDimSample>> {
    Ok(match manifest {
        Some(p) => load_manifest(p, &cfg.model.dimensions).with_context(|| format!("loading {}", p.display()))?,
        None => synthetic_dataset(&cfg.data, &cfg.model.dimensions)?,
    })
}

fn parse_ratios(cfg: &MdiqaConfig, flags: &[String]) -> Result<RatioOverride> {
    let mut ov = cfg.ratios.clone();
    for f in flags {
        let (dim, v) = RatioOverride::parse_entry(f)?;
        ov = ov.with(&dim, v);
    }
    let names: Vec<String> = cfg.model.dimensions.names().map(str::to_string).collect();
    ov.factors(&names)?;
    Ok(ov)
}

fn json_line(out: &mut impl Write, value: &impl serde::Serialize) {
    // Progress goes to stdout; a closed pipe should not abort training.
    let _ = writeln!(out, "{}", serde_json::to_string(value).expect("plain data"));
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var("MDIQA_DETERMINISTIC") {
        // Every kernel is single-threaded and deterministic already; only
        // validate the value.
        if !matches!(v.as_str(), "0" | "1") {
            bail!("MDIQA_DETERMINISTIC must be 0 or 1, got `{v}`");
        }
    }
    let seed = cli.seed;
    match cli.command {
        Command::Train {
            config,
            stage,
            resume,
            manifest,
            max_steps,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let data = dataset(&cfg, manifest.as_deref())?;
            let resume = resume
                .map(|p| load_checkpoint(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            let mut stdout = std::io::stdout().lock();
            let mut log = |r: &LogRecord| json_line(&mut stdout, r);
            let opts = TrainOptions {
                max_steps,
                log: Some(&mut log),
            };
            let (_, ck) = match stage {
                1 => train_stage1(&data, &cfg, resume.as_ref(), opts)?,
                _ => {
                    let Some(from) = resume else {
                        bail!("stage 2 needs --resume with a finished stage-1 checkpoint");
                    };
                    train_stage2(&data, &from, &cfg, opts)?
                }
            };
            save_checkpoint(&ck, &out)?;
            eprintln!(
                "saved stage {stage} checkpoint ({} steps, {}) to {}",
                ck.step,
                if ck.completed { "complete" } else { "incomplete" },
                out.display()
            );
        }
        Command::Eval {
            config,
            ckpt,
            manifest,
            splits,
            out,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = splits {
                cfg.eval.splits = s;
            }
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            cfg.model = ck.config.model.clone();
            let model = ck.model()?;
            let data = dataset(&cfg, manifest.as_deref())?;
            let report = evaluate(&model, &data, &cfg.eval)?;
            create_dir(&out)?;
            let (json, csv) = (out.join("report.json"), out.join("report.csv"));
            report.write_json(&json)?;
            report.write_csv(&csv)?;
            println!("{}", json.display());
            println!("{}", csv.display());
        }
        Command::Score { image, ckpt } => {
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let model = ck.model()?;
            let img = ImageTensor::load(&image).with_context(|| format!("loading {}", image.display()))?;
            let q = model.forward_full(&img)?;
            println!("{}", serde_json::to_string_pretty(&q)?);
        }
        Command::Restore {
            config,
            critic,
            ratios,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let ov = parse_ratios(&cfg, &ratios)?;
            let ck = load_checkpoint(&critic).with_context(|| format!("loading {}", critic.display()))?;
            let critic = ck.critic(DType::F32)?;
            let mut run = RestorationRun::from_config(&cfg.restoration, &ov);
            run.out_dir = Some(out.clone());
            let result = train_restorer(&run, &critic)?;
            let log_path = out.join("log.jsonl");
            let mut log = std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            for r in &result.log {
                json_line(&mut log, r);
            }
            println!("{}", serde_json::to_string_pretty(&result.metrics)?);
        }
        Command::Sweep {
            config,
            critic,
            dim,
            ratios,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let ck = load_checkpoint(&critic).with_context(|| format!("loading {}", critic.display()))?;
            let critic = ck.critic(DType::F32)?;
            let mut base = RestorationRun::from_config(&cfg.restoration, &parse_ratios(&cfg, &[])?);
            base.out_dir = Some(out.clone());
            let report = sweep_ratio(&base, &critic, &dim, &ratios)?;
            let path = out.join("sweep.csv");
            report.write_csv(&path)?;
            println!("{}", path.display());
        }
        Command::GenData { config, n, size, out } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(n) = n {
                cfg.data.samples = n;
            }
            if let Some(s) = size {
                cfg.data.size = s;
            }
            let samples = synthetic_dataset(&cfg.data, &cfg.model.dimensions)?;
            create_dir(&out.join("images"))?;
            let mut entries = Vec::with_capacity(samples.len());
            for (i, s) in samples.into_iter().enumerate() {
                let rel = PathBuf::from("images").join(format!("{i:05}.png"));
                s.image.save(&out.join(&rel))?;
                entries.push(ManifestEntry {
                    path: rel,
                    overall: s.overall,
                    labels: s.labels,
                });
            }
            let manifest = out.join("manifest.csv");
            write_manifest(&manifest, &entries, &cfg.model.dimensions, None)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
