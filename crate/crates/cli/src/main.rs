use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use subflow_cli::commands::{self, AblationVariant, ClusterArgs};
use subflow_cli::config::{ClusterMethod, ExperimentConfig};
use subflow_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "subflow", version, about = "Sub-mode conditioned flow matching on 2D toy mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file; built-in toy defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct SampleFlags {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    nfe: Option<usize>,
    /// Guidance scale.
    #[arg(short = 'w', long = "guidance-scale")]
    guidance_scale: Option<f64>,
    /// prior | uniform | fixed:K
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use raw weights instead of the EMA.
    #[arg(long)]
    raw: bool,
}

impl SampleFlags {
    fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("sample.{k}={val}"));
            }
        };
        push("count", self.count.map(|x| x.to_string()));
        push("nfe", self.nfe.map(|x| x.to_string()));
        push("guidance_scale", self.guidance_scale.map(|x| x.to_string()));
        push("strategy", self.strategy.clone());
        push("seed", self.seed.map(|x| x.to_string()));
        if self.raw {
            push("use_ema", Some("false".into()));
        }
        v
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cluster (for sub-mode conditioning) and train; writes a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sample from a checkpoint; writes a CSV and an SVG scatter plot.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class to sample; all classes by weight when omitted.
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        sample: SampleFlags,
        /// Also write per-step trajectories.
        #[arg(long)]
        trajectory: bool,
    },
    /// Generate and score one sample set; appends a metrics row.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sample: SampleFlags,
    },
    /// Evaluate at each step count in the list.
    SweepNfe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated step counts; defaults to metrics.nfe_list.
        #[arg(long)]
        nfe_list: Option<String>,
        #[command(flatten)]
        sample: SampleFlags,
    },
    /// Compare a sub-mode ablation with the default and class-only models.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantFlags,
    },
    /// Cluster an external feature CSV (one row per sample, plus a `class` column).
    Cluster {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// kmeans | random
        #[arg(long, default_value = "kmeans")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long)]
        standardize: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Verify that a manifest's files exist and match their checksums.
    Check { manifest: PathBuf },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct VariantFlags {
    #[arg(long)]
    random_assignment: bool,
    #[arg(long)]
    uniform_sampling: bool,
    #[arg(long)]
    drop_k: bool,
}

fn load_config(common: &Common, extra: &[String]) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    cfg.apply_overrides(extra)?;
    cfg.validate()?;
    Ok(cfg)
}

fn report(manifest: &Path) {
    println!("manifest: {}", manifest.display());
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load_config(&common, &[])?;
            let (_, path) = commands::train(&cfg, &common.out)?;
            report(&path);
        }
        Command::Generate {
            common,
            checkpoint,
            class,
            sample,
            trajectory,
        } => {
            let mut extra = sample.overrides();
            if trajectory {
                extra.push("sample.trajectory=true".into());
            }
            let cfg = load_config(&common, &extra)?;
            let (_, path) = commands::generate(&checkpoint, &cfg, class, &common.out)?;
            report(&path);
        }
        Command::Evaluate {
            common,
            checkpoint,
            sample,
        } => {
            let cfg = load_config(&common, &sample.overrides())?;
            let (m, row) = commands::evaluate(&checkpoint, &cfg, &common.out)?;
            println!("{}", serde_json::to_string(&row)?);
            println!("run: {}", m.run_id);
        }
        Command::SweepNfe {
            common,
            checkpoint,
            nfe_list,
            sample,
        } => {
            let mut extra = sample.overrides();
            if let Some(list) = nfe_list {
                extra.push(format!("metrics.nfe_list={list}"));
            }
            let cfg = load_config(&common, &extra)?;
            let (m, rows) = commands::sweep_nfe(&checkpoint, &cfg, &common.out)?;
            for r in rows {
                println!("{}", serde_json::to_string(&r)?);
            }
            println!("run: {}", m.run_id);
        }
        Command::Ablate { common, variant } => {
            let v = if variant.random_assignment {
                AblationVariant::RandomAssignment
            } else if variant.uniform_sampling {
                AblationVariant::UniformSampling
            } else {
                AblationVariant::DropK
            };
            let cfg = load_config(&common, &[])?;
            let (m, rows) = commands::ablate(&cfg, v, &common.out)?;
            for r in rows {
                println!("{}", serde_json::to_string(&r)?);
            }
            println!("run: {}", m.run_id);
        }
        Command::Cluster {
            features,
            k,
            method,
            seed,
            max_iters,
            standardize,
            out,
        } => {
            let method = match method.as_str() {
                "kmeans" => ClusterMethod::KMeans,
                "random" => ClusterMethod::Random,
                other => {
                    return Err(CliError::Core(subflow::Error::InvalidArgument(format!(
                        "unknown cluster method {other:?} (kmeans | random)"
                    ))))
                }
            };
            let args = ClusterArgs {
                features,
                k,
                method,
                seed,
                max_iters,
                standardize,
            };
            let (_, path) = commands::cluster(&args, &out)?;
            report(&path);
        }
        Command::Check { manifest } => {
            let m = commands::check(&manifest)?;
            println!("ok: {} ({} files)", m.run_id, m.checksums.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
