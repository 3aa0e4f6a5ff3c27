//! Train, generate and evaluate steps shared by the commands and the tests.

use subflow::clustering::{assign_submodes, random_assignment, standardize, SubmodeTable};
use subflow::metrics::{self, MetricReport};
use subflow::mixture::{oracle_velocity, sample_dataset, ConditionFilter, LabeledSample, MixtureSpec, Vec2};
use subflow::net::VelocityNet;
use subflow::objectives::{net_config_for, train, Conditioning, LossRecord};
use subflow::sampler::{generate, ConditionalField, ConditionedNet, FieldQuery, GenerationBatch, SampleRequest};
use subflow::{Error, Result};

use crate::checkpoint::{Checkpoint, RunContext};
use crate::config::{ClusterMethod, ExperimentConfig, SampleSection};
use crate::output::MetricRow;

pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
    pub table: Option<SubmodeTable>,
}

pub fn training_set(cfg: &ExperimentConfig) -> Result<Vec<LabeledSample>> {
    sample_dataset(&cfg.spec()?, cfg.mixture.n_train, cfg.train.seed)
}

/// Clusters each class on raw coordinates. With `standardize`, clustering
/// runs on z-scored features and centroids are mapped back to raw
/// coordinates as member means.
pub fn build_table(cfg: &ExperimentConfig, data: &[LabeledSample]) -> Result<SubmodeTable> {
    let raw: Vec<Vec<f64>> = data.iter().map(|s| s.x.to_vec()).collect();
    let classes: Vec<usize> = data.iter().map(|s| s.class_id).collect();
    let mut feats = raw.clone();
    if cfg.cluster.standardize {
        standardize(&mut feats);
    }
    let c = &cfg.cluster;
    let mut table = match c.method {
        ClusterMethod::KMeans => assign_submodes(&feats, &classes, c.k, cfg.train.seed, c.max_iters)?,
        ClusterMethod::Random => random_assignment(&feats, &classes, c.k, cfg.train.seed)?,
    };
    if cfg.cluster.standardize {
        for cc in table.classes.values_mut() {
            let mut sums = vec![[0.0; 2]; cc.centroids.len()];
            for ((x, &cls), &k) in raw.iter().zip(&classes).zip(&table.assignments) {
                if cls == cc.class_id {
                    sums[k][0] += x[0];
                    sums[k][1] += x[1];
                }
            }
            for ((row, s), &n) in cc.centroids.iter_mut().zip(&sums).zip(&cc.counts) {
                if n > 0 {
                    *row = vec![s[0] / n as f64, s[1] / n as f64];
                }
            }
        }
    }
    Ok(table)
}

/// Samples the training set, clusters it when sub-mode conditioning is on,
/// and trains.
pub fn train_run(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let mut data = training_set(cfg)?;
    let table = if cfg.train.conditioning == Conditioning::SubFlow {
        let t = build_table(cfg, &data)?;
        for (s, &k) in data.iter_mut().zip(&t.assignments) {
            s.submode_id = Some(k);
        }
        Some(t)
    } else {
        for s in &mut data {
            s.submode_id = None;
        }
        None
    };
    let k = table.as_ref().map_or(1, |t| t.k);
    let net_config = net_config_for(&cfg.net, &spec, k, cfg.train.objective);
    let (state, curve) = train(&data, &spec, net_config, &cfg.train)?;
    let checkpoint = Checkpoint::from_state(
        &state,
        RunContext {
            objective: cfg.train.objective,
            conditioning: cfg.train.conditioning,
            spec,
            table: table.clone(),
        },
    );
    Ok(TrainedRun { checkpoint, curve, table })
}

pub fn request(sample: &SampleSection, class_id: usize, count: usize, nfe: usize) -> SampleRequest {
    SampleRequest {
        class_id,
        count,
        nfe,
        guidance_scale: sample.guidance_scale,
        submode_strategy: sample.strategy,
        seed: sample.seed,
        record_trajectory: sample.trajectory,
    }
}

pub fn generate_class(ck: &Checkpoint, net: &VelocityNet, req: &SampleRequest) -> Result<GenerationBatch> {
    let spec = &ck.context.spec;
    if req.class_id >= spec.num_classes() {
        return Err(Error::OutOfRange(format!(
            "class {} (model has {} classes)",
            req.class_id,
            spec.num_classes()
        )));
    }
    let field = ConditionedNet {
        net,
        conditioning: ck.context.conditioning,
    };
    let table = match ck.context.conditioning {
        Conditioning::SubFlow => ck.context.table.as_ref(),
        _ => None,
    };
    generate(&field, table, spec.source_std(), req)
}

/// Splits `count` across classes in proportion to class weight, the last
/// class taking the rounding remainder.
pub fn class_counts(spec: &MixtureSpec, count: usize) -> Vec<usize> {
    let n = spec.num_classes();
    let mut out = Vec::with_capacity(n);
    let mut used = 0;
    for c in 0..n {
        let k = if c + 1 == n {
            count - used
        } else {
            ((count as f64 * spec.class_weight(c)).round() as usize).min(count - used)
        };
        used += k;
        out.push(k);
    }
    out
}

/// Samples from every class, proportionally to class weight.
pub fn generate_mixture(ck: &Checkpoint, net: &VelocityNet, sample: &SampleSection, nfe: usize) -> Result<GenerationBatch> {
    let mut all = GenerationBatch::default();
    for (c, n) in class_counts(&ck.context.spec, sample.count).into_iter().enumerate() {
        if n > 0 {
            all.samples.extend(generate_class(ck, net, &request(sample, c, n, nfe))?.samples);
        }
    }
    Ok(all)
}

/// `(class, learned sub-mode, oracle filter)`.
type FieldTarget = (Option<usize>, Option<usize>, ConditionFilter);

/// The conditions the learned field is compared on.
fn field_targets(ck: &Checkpoint) -> Result<Vec<FieldTarget>> {
    let spec = &ck.context.spec;
    let classes = 0..spec.num_classes();
    Ok(match ck.context.conditioning {
        Conditioning::Uncond => vec![(None, None, ConditionFilter::All)],
        Conditioning::Class => classes.map(|c| (Some(c), None, ConditionFilter::Class(c))).collect(),
        Conditioning::SubFlow => {
            let table = ck
                .context
                .table
                .as_ref()
                .ok_or_else(|| Error::MissingSubmode("checkpoint has no sub-mode table".into()))?;
            let mut out = Vec::new();
            for c in classes {
                let cc = table.class(c)?;
                for (k, centroid) in cc.centroids.iter().enumerate() {
                    if cc.counts[k] == 0 || centroid.len() != 2 {
                        continue;
                    }
                    let nearest = spec
                        .select(ConditionFilter::Class(c))
                        .into_iter()
                        .map(|j| &spec.components()[j])
                        .min_by(|a, b| {
                            let d = |m: Vec2| (m[0] - centroid[0]).powi(2) + (m[1] - centroid[1]).powi(2);
                            d(a.mean).total_cmp(&d(b.mean))
                        })
                        .ok_or(Error::EmptySubset)?;
                    out.push((Some(c), Some(k), ConditionFilter::Submode(c, nearest.submode_id)));
                }
            }
            out
        }
    })
}

/// RMS difference between the learned instantaneous field and the oracle,
/// pooled over every conditioning target. Interval nets use `r = t`.
pub fn learned_field_rmse(ck: &Checkpoint, net: &VelocityNet, grid_n: usize, times: &[f64]) -> Result<f64> {
    let spec = &ck.context.spec;
    let grid = metrics::lattice(spec, grid_n);
    let field = ConditionedNet {
        net,
        conditioning: ck.context.conditioning,
    };
    let targets = field_targets(ck)?;
    let mut total = 0.0;
    for &(class, submode, cond) in &targets {
        let learned = |g: &[Vec2], t: f64| {
            let q: Vec<FieldQuery> = g
                .iter()
                .map(|&x| FieldQuery {
                    x,
                    t,
                    r: field.uses_interval().then_some(t),
                    class,
                    submode,
                })
                .collect();
            field.eval_batch(&q)
        };
        let oracle = |g: &[Vec2], t: f64| g.iter().map(|&x| oracle_velocity(spec, x, t, cond)).collect();
        total += metrics::field_rmse(learned, oracle, &grid, times)?.powi(2);
    }
    Ok((total / targets.len() as f64).sqrt())
}

pub struct Evaluation {
    pub report: MetricReport,
    /// Within-class shares of each class's components, in spec order.
    pub class_shares: Vec<Vec<f64>>,
    pub samples: GenerationBatch,
}

impl Evaluation {
    pub fn row(&self, run_id: &str, nfe: usize, w: f64) -> MetricRow {
        MetricRow {
            run_id: run_id.to_string(),
            nfe,
            w,
            frechet: self.report.frechet,
            precision: self.report.precision,
            recall: self.report.recall,
            mode_tv: self.report.mode_tv,
            coverage_count: self.report.coverage_count,
            field_rmse: self.report.field_rmse,
        }
    }
}

/// Generates `cfg.sample.count` points at `nfe` and scores them against a
/// fresh draw of `cfg.metrics.n_real` target points.
pub fn evaluate(ck: &Checkpoint, cfg: &ExperimentConfig, nfe: usize) -> Result<Evaluation> {
    let spec = &ck.context.spec;
    let net = ck.net(cfg.sample.use_ema)?;
    let samples = generate_mixture(ck, &net, &cfg.sample, nfe)?;
    let gen = samples.points();
    let real: Vec<Vec2> = sample_dataset(spec, cfg.metrics.n_real, cfg.train.seed)?
        .into_iter()
        .map(|s| s.x)
        .collect();
    let m = &cfg.metrics;
    let (precision, recall) = metrics::knn_precision_recall(&real, &gen, m.knn_k)?;
    let frechet = metrics::frechet_2d(&real, &gen)?.distance;
    let shares = metrics::mode_shares(spec, &gen, m.tau)?;
    let mut class_shares = Vec::new();
    for c in 0..spec.num_classes() {
        let pts: Vec<Vec2> = samples.samples.iter().filter(|s| s.class_id == c).map(|s| s.x).collect();
        class_shares.push(if pts.is_empty() {
            Vec::new()
        } else {
            metrics::class_mode_shares(spec, c, &pts, m.tau)?.shares
        });
    }
    let field_rmse = learned_field_rmse(ck, &net, m.grid, &m.times)?;
    Ok(Evaluation {
        report: MetricReport {
            frechet,
            precision,
            recall,
            mode_shares: shares.shares,
            mode_tv: shares.tv,
            coverage_count: shares.coverage_count,
            field_rmse: Some(field_rmse),
        },
        class_shares,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.mixture.n_train = 400;
        cfg.net.hidden_width = 8;
        cfg.net.hidden_layers = 1;
        cfg.net.embed_dim = 2;
        cfg.train.steps = 3;
        cfg.train.batch_size = 16;
        cfg.sample.count = 60;
        cfg.metrics.n_real = 60;
        cfg.metrics.grid = 5;
        cfg
    }

    #[test]
    fn class_counts_follow_weights() {
        let spec = MixtureSpec::four_peak_toy();
        assert_eq!(class_counts(&spec, 10_001), vec![5001, 5000]);
        assert_eq!(class_counts(&spec, 1), vec![1, 0]);
    }

    #[test]
    fn tiny_pipeline_runs() {
        let cfg = tiny();
        let run = train_run(&cfg).unwrap();
        assert_eq!(run.curve.len(), 3);
        assert_eq!(run.table.as_ref().unwrap().k, 2);
        let ev = evaluate(&run.checkpoint, &cfg, 2).unwrap();
        assert_eq!(ev.samples.samples.len(), 60);
        assert!(ev.report.field_rmse.unwrap() > 0.0);
        assert_eq!(ev.class_shares.len(), 2);
    }

    #[test]
    fn class_out_of_range_is_rejected() {
        let cfg = tiny();
        let run = train_run(&cfg).unwrap();
        let net = run.checkpoint.net(true).unwrap();
        let err = generate_class(&run.checkpoint, &net, &request(&cfg.sample, 5, 3, 1)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange(_)));
    }

    #[test]
    fn standardized_centroids_are_in_raw_units() {
        let mut cfg = tiny();
        cfg.cluster.standardize = true;
        let data = training_set(&cfg).unwrap();
        let t = build_table(&cfg, &data).unwrap();
        for cc in t.classes.values() {
            for row in &cc.centroids {
                assert!((row[0].abs() - 4.0).abs() < 0.5 && (row[1].abs() - 2.0).abs() < 0.5, "{row:?}");
            }
        }
    }
}
