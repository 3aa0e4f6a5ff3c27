//! One function per subcommand. Each writes its artifacts under `out`,
//! prefixed by a fresh run id, and finishes with a manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use subflow::clustering::{assign_submodes, random_assignment, standardize};
use subflow::mixture::{sample_dataset, Vec2};
use subflow::objectives::Conditioning;
use subflow::sampler::SubmodeStrategy;

use crate::checkpoint::Checkpoint;
use crate::config::{ClusterMethod, ExperimentConfig};
use crate::manifest::{next_run_id, RunManifest};
use crate::output::{self, MetricRow};
use crate::pipeline;
use crate::{CliError, CliResult};

/// Real points drawn behind generated ones in scatter plots.
const SVG_REAL_POINTS: usize = 4000;

fn prepare(out: &Path, prefix: &str) -> CliResult<String> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    Ok(next_run_id(out, prefix))
}

fn seal(mut m: RunManifest, out: &Path, started: Instant) -> CliResult<(RunManifest, PathBuf)> {
    m.duration_secs = started.elapsed().as_secs_f64();
    let path = m.finish(out)?;
    Ok((m, path))
}

fn base_manifest(run_id: &str, command: &str, cfg: &ExperimentConfig) -> RunManifest {
    let mut m = RunManifest::new(run_id, command, cfg.emit());
    m.seeds.insert("train".into(), cfg.train.seed);
    m.seeds.insert("sample".into(), cfg.sample.seed);
    m
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> CliResult<(RunManifest, PathBuf)> {
    let started = Instant::now();
    cfg.validate()?;
    let run_id = prepare(out, "train")?;
    let run = pipeline::train_run(cfg)?;
    let mut m = base_manifest(&run_id, "train", cfg);
    let ck = format!("{run_id}.ckpt");
    run.checkpoint.save(&out.join(&ck))?;
    m.checkpoint = Some(ck);
    let loss = format!("{run_id}.loss.csv");
    output::write_loss(&out.join(&loss), &run.curve)?;
    m.loss_curve = Some(loss);
    if let Some(table) = &run.table {
        let a = format!("{run_id}.assignments.csv");
        let p = format!("{run_id}.priors.csv");
        output::write_assignments(&out.join(&a), table)?;
        output::write_priors(&out.join(&p), table)?;
        m.tables.extend([a, p]);
    }
    seal(m, out, started)
}

/// Samples one class, or every class in proportion to its weight when
/// `class` is `None`, and writes a CSV and a scatter plot.
pub fn generate(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    class: Option<usize>,
    out: &Path,
) -> CliResult<(RunManifest, PathBuf)> {
    let started = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.net(cfg.sample.use_ema)?;
    let nfe = cfg.sample.nfe;
    let batch = match class {
        Some(c) => pipeline::generate_class(&ck, &net, &pipeline::request(&cfg.sample, c, cfg.sample.count, nfe))?,
        None => {
            pipeline::request(&cfg.sample, 0, cfg.sample.count, nfe).validate()?;
            pipeline::generate_mixture(&ck, &net, &cfg.sample, nfe)?
        }
    };
    let run_id = prepare(out, "generate")?;
    let mut m = base_manifest(&run_id, "generate", cfg);
    let samples = format!("{run_id}.samples.csv");
    output::write_samples(&out.join(&samples), &batch)?;
    m.tables.push(samples);
    if cfg.sample.trajectory {
        let t = format!("{run_id}.trajectory.csv");
        output::write_trajectories(&out.join(&t), &batch)?;
        m.tables.push(t);
    }
    let spec = &ck.context.spec;
    let real: Vec<Vec2> = sample_dataset(spec, SVG_REAL_POINTS, cfg.train.seed)?
        .into_iter()
        .filter(|s| class.is_none_or(|c| s.class_id == c))
        .map(|s| s.x)
        .collect();
    let title = format!("nfe = {nfe}, w = {}", cfg.sample.guidance_scale);
    let svg = format!("{run_id}.svg");
    output::write_text(&out.join(&svg), &output::scatter_svg(spec, &real, &batch, &title))?;
    m.figures.push(svg);
    seal(m, out, started)
}

/// Scores one generation at `cfg.sample.nfe`. The row goes to the run's own
/// CSV and is also appended to `metrics.csv` in `out`.
pub fn evaluate(checkpoint: &Path, cfg: &ExperimentConfig, out: &Path) -> CliResult<(RunManifest, MetricRow)> {
    let started = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let ev = pipeline::evaluate(&ck, cfg, cfg.sample.nfe)?;
    let run_id = prepare(out, "evaluate")?;
    let row = ev.row(&run_id, cfg.sample.nfe, cfg.sample.guidance_scale);
    let mut m = base_manifest(&run_id, "evaluate", cfg);
    let own = format!("{run_id}.metrics.csv");
    output::append_metric_rows(&out.join(&own), std::slice::from_ref(&row))?;
    output::append_metric_rows(&out.join("metrics.csv"), std::slice::from_ref(&row))?;
    m.metrics.push(own);
    let (m, _) = seal(m, out, started)?;
    Ok((m, row))
}

/// One metrics row per entry of `cfg.metrics.nfe_list`.
pub fn sweep_nfe(checkpoint: &Path, cfg: &ExperimentConfig, out: &Path) -> CliResult<(RunManifest, Vec<MetricRow>)> {
    let started = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let mut rows = Vec::new();
    let run_id = prepare(out, "sweep")?;
    for &nfe in &cfg.metrics.nfe_list {
        let ev = pipeline::evaluate(&ck, cfg, nfe)?;
        rows.push(ev.row(&run_id, nfe, cfg.sample.guidance_scale));
    }
    let mut m = base_manifest(&run_id, "sweep-nfe", cfg);
    let table = format!("{run_id}.sweep.csv");
    output::append_metric_rows(&out.join(&table), &rows)?;
    m.metrics.push(table);
    let (m, _) = seal(m, out, started)?;
    Ok((m, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    RandomAssignment,
    UniformSampling,
    DropK,
}

impl AblationVariant {
    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::RandomAssignment => "random_assignment",
            AblationVariant::UniformSampling => "uniform_sampling",
            AblationVariant::DropK => "drop_k",
        }
    }
}

/// Trains the class-conditional baseline, the default sub-mode model and the
/// variant, and writes one row each. `run_id` in the rows names the model.
pub fn ablate(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    out: &Path,
) -> CliResult<(RunManifest, Vec<MetricRow>)> {
    let started = Instant::now();
    let mut sub = cfg.clone();
    sub.train.conditioning = Conditioning::SubFlow;
    sub.cluster.enabled = true;
    sub.cluster.method = ClusterMethod::KMeans;
    sub.sample.strategy = SubmodeStrategy::Prior;
    sub.validate()?;
    let mut baseline = sub.clone();
    baseline.train.conditioning = Conditioning::Class;

    let nfe = cfg.sample.nfe;
    let w = cfg.sample.guidance_scale;
    let mut rows = Vec::new();
    let mut score = |name: &str, train_cfg: &ExperimentConfig, eval_cfg: &ExperimentConfig| -> CliResult<()> {
        let run = pipeline::train_run(train_cfg)?;
        let ev = pipeline::evaluate(&run.checkpoint, eval_cfg, nfe)?;
        rows.push(ev.row(name, nfe, w));
        Ok(())
    };
    score("class_baseline", &baseline, &baseline)?;
    match variant {
        AblationVariant::UniformSampling => {
            let run = pipeline::train_run(&sub)?;
            let ev = pipeline::evaluate(&run.checkpoint, &sub, nfe)?;
            rows.push(ev.row("subflow", nfe, w));
            let mut uniform = sub.clone();
            uniform.sample.strategy = SubmodeStrategy::Uniform;
            let ev = pipeline::evaluate(&run.checkpoint, &uniform, nfe)?;
            rows.push(ev.row(variant.name(), nfe, w));
        }
        AblationVariant::RandomAssignment => {
            score("subflow", &sub, &sub)?;
            let mut v = sub.clone();
            v.cluster.method = ClusterMethod::Random;
            score(variant.name(), &v, &v)?;
        }
        AblationVariant::DropK => {
            score("subflow", &sub, &sub)?;
            let mut v = sub.clone();
            v.train.p_drop_submode = v.train.p_drop_class;
            score(variant.name(), &v, &v)?;
        }
    }
    let run_id = prepare(out, "ablate")?;
    let mut m = base_manifest(&run_id, "ablate", cfg);
    let table = format!("{run_id}.ablation.csv");
    output::append_metric_rows(&out.join(&table), &rows)?;
    m.metrics.push(table);
    let (m, _) = seal(m, out, started)?;
    Ok((m, rows))
}

#[derive(Debug, Clone)]
pub struct ClusterArgs {
    pub features: PathBuf,
    pub k: usize,
    pub method: ClusterMethod,
    pub seed: u64,
    pub max_iters: usize,
    pub standardize: bool,
}

/// Clusters an external feature CSV per class.
pub fn cluster(args: &ClusterArgs, out: &Path) -> CliResult<(RunManifest, PathBuf)> {
    let started = Instant::now();
    let (mut feats, classes) = output::read_features(&args.features)?;
    if args.standardize {
        standardize(&mut feats);
    }
    let table = match args.method {
        ClusterMethod::KMeans => assign_submodes(&feats, &classes, args.k, args.seed, args.max_iters)?,
        ClusterMethod::Random => random_assignment(&feats, &classes, args.k, args.seed)?,
    };
    let run_id = prepare(out, "cluster")?;
    let mut m = RunManifest::new(&run_id, "cluster", String::new());
    m.seeds.insert("cluster".into(), args.seed);
    let a = format!("{run_id}.assignments.csv");
    let p = format!("{run_id}.priors.csv");
    output::write_assignments(&out.join(&a), &table)?;
    output::write_priors(&out.join(&p), &table)?;
    m.tables.extend([a, p]);
    seal(m, out, started)
}

/// Verifies a manifest written by any command.
pub fn check(manifest: &Path) -> CliResult<RunManifest> {
    let m = RunManifest::load(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    m.check(dir)?;
    Ok(m)
}
