//! Inference: sub-mode selection, classifier-free guidance and fixed-step
//! Euler integration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::SubmodeTable;
use crate::error::{invalid, Error, Result};
use crate::mixture::{oracle_velocity, ConditionFilter, MixtureSpec, Vec2};
use crate::net::{NetInput, VelocityNet};
use crate::objectives::Conditioning;
use crate::rng;

/// Largest number of points sent to a field in one call.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubmodeStrategy {
    Prior,
    Uniform,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub class_id: usize,
    pub count: usize,
    pub nfe: usize,
    pub guidance_scale: f64,
    pub submode_strategy: SubmodeStrategy,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl SampleRequest {
    pub fn new(class_id: usize, count: usize, nfe: usize, seed: u64) -> Self {
        Self {
            class_id,
            count,
            nfe,
            guidance_scale: 1.0,
            submode_strategy: SubmodeStrategy::Prior,
            seed,
            record_trajectory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return invalid("count must be >= 1");
        }
        if self.nfe == 0 {
            return invalid("nfe must be >= 1");
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return invalid(format!("guidance scale must be >= 0, got {}", self.guidance_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub x: Vec2,
    pub class_id: usize,
    pub submode_id: Option<usize>,
    pub trajectory: Option<Vec<Vec2>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationBatch {
    pub samples: Vec<GeneratedSample>,
}

impl GenerationBatch {
    pub fn points(&self) -> Vec<Vec2> {
        self.samples.iter().map(|s| s.x).collect()
    }
}

/// A query for a conditional field. `class: None` is the null token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldQuery {
    pub x: Vec2,
    pub t: f64,
    pub r: Option<f64>,
    pub class: Option<usize>,
    pub submode: Option<usize>,
}

/// Anything that maps `(x, t[, r], c, k)` to a velocity.
pub trait ConditionalField: Sync {
    /// True when the field is an average velocity over `[t, r]`.
    fn uses_interval(&self) -> bool;

    fn eval_batch(&self, queries: &[FieldQuery]) -> Result<Vec<Vec2>>;
}

/// A trained net together with the conditioning it was trained under.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedNet<'a> {
    pub net: &'a VelocityNet,
    pub conditioning: Conditioning,
}

impl ConditionalField for ConditionedNet<'_> {
    fn uses_interval(&self) -> bool {
        self.net.config().uses_interval
    }

    fn eval_batch(&self, queries: &[FieldQuery]) -> Result<Vec<Vec2>> {
        let inputs: Vec<NetInput> = queries
            .iter()
            .map(|q| {
                let (class, submode) = match self.conditioning {
                    Conditioning::Uncond => (None, None),
                    Conditioning::Class => (q.class, None),
                    Conditioning::SubFlow => (q.class, q.submode),
                };
                NetInput {
                    x: q.x,
                    t: q.t,
                    r: q.r,
                    class,
                    submode,
                }
            })
            .collect();
        Ok(self.net.forward_batch(&inputs)?.outputs())
    }
}

/// The closed-form field. Class and sub-mode ids index the mixture's ground
/// truth labels; the null token selects the full mixture.
#[derive(Debug, Clone, Copy)]
pub struct OracleField<'a> {
    pub spec: &'a MixtureSpec,
}

impl ConditionalField for OracleField<'_> {
    fn uses_interval(&self) -> bool {
        false
    }

    fn eval_batch(&self, queries: &[FieldQuery]) -> Result<Vec<Vec2>> {
        queries
            .iter()
            .map(|q| {
                let cond = match (q.class, q.submode) {
                    (None, _) => ConditionFilter::All,
                    (Some(c), None) => ConditionFilter::Class(c),
                    (Some(c), Some(k)) => ConditionFilter::Submode(c, k),
                };
                oracle_velocity(self.spec, q.x, q.t, cond)
            })
            .collect()
    }
}

pub fn sample_submode<R: Rng + ?Sized>(table: &SubmodeTable, c: usize, strategy: SubmodeStrategy, rng: &mut R) -> Result<usize> {
    let counts = &table.class(c)?.counts;
    match strategy {
        SubmodeStrategy::Fixed(k) => {
            if counts.get(k).copied().unwrap_or(0) == 0 {
                return Err(Error::OutOfRange(format!("sub-mode {k} of class {c} has no training samples")));
            }
            Ok(k)
        }
        SubmodeStrategy::Prior => {
            let total: usize = counts.iter().sum();
            let mut u = rng.random_range(0..total);
            for (k, &n) in counts.iter().enumerate() {
                if u < n {
                    return Ok(k);
                }
                u -= n;
            }
            unreachable!("draw below total count")
        }
        SubmodeStrategy::Uniform => {
            let live: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
            Ok(live[rng.random_range(0..live.len())])
        }
    }
}

/// `v(∅, k) + w · (v(c, k) - v(∅, k))`, batched. At `w = 1` only the
/// conditional branch is evaluated.
pub fn cfg_velocity_batch<F: ConditionalField + ?Sized>(field: &F, queries: &[FieldQuery], w: f64) -> Result<Vec<Vec2>> {
    if !(w.is_finite() && w >= 0.0) {
        return invalid(format!("guidance scale must be >= 0, got {w}"));
    }
    let cond = field.eval_batch(queries)?;
    if w == 1.0 {
        return Ok(cond);
    }
    let nulls: Vec<FieldQuery> = queries.iter().map(|q| FieldQuery { class: None, ..*q }).collect();
    let uncond = field.eval_batch(&nulls)?;
    Ok(cond
        .iter()
        .zip(&uncond)
        .map(|(c, u)| [u[0] + w * (c[0] - u[0]), u[1] + w * (c[1] - u[1])])
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn cfg_velocity<F: ConditionalField + ?Sized>(
    field: &F,
    x: Vec2,
    t: f64,
    r: Option<f64>,
    c: usize,
    k: Option<usize>,
    w: f64,
) -> Result<Vec2> {
    let q = FieldQuery {
        x,
        t,
        r,
        class: Some(c),
        submode: k,
    };
    Ok(cfg_velocity_batch(field, &[q], w)?[0])
}

/// Fixed-step Euler from `t = 0` to `t = 1` for a batch of starting points.
/// An interval field is evaluated on `(t, r) = (s, s + h)`.
pub fn integrate<F: ConditionalField + ?Sized>(
    field: &F,
    starts: &[Vec2],
    classes: &[Option<usize>],
    submodes: &[Option<usize>],
    nfe: usize,
    w: f64,
    mut trajectories: Option<&mut Vec<Vec<Vec2>>>,
) -> Result<Vec<Vec2>> {
    if nfe == 0 {
        return invalid("nfe must be >= 1");
    }
    let h = 1.0 / nfe as f64;
    let mut xs = starts.to_vec();
    if let Some(tr) = trajectories.as_deref_mut() {
        *tr = xs.iter().map(|&x| vec![x]).collect();
    }
    for step in 0..nfe {
        let s = step as f64 * h;
        let r = field.uses_interval().then(|| ((step + 1) as f64 * h).min(1.0));
        for start in (0..xs.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(xs.len());
            let queries: Vec<FieldQuery> = (start..end)
                .map(|i| FieldQuery {
                    x: xs[i],
                    t: s,
                    r,
                    class: classes[i],
                    submode: submodes[i],
                })
                .collect();
            let v = cfg_velocity_batch(field, &queries, w)?;
            for (i, vi) in (start..end).zip(v) {
                xs[i][0] += h * vi[0];
                xs[i][1] += h * vi[1];
            }
        }
        if let Some(tr) = trajectories.as_deref_mut() {
            for (path, x) in tr.iter_mut().zip(&xs) {
                path.push(*x);
            }
        }
    }
    Ok(xs)
}

/// Draws per-sample sub-modes and source points and integrates them.
///
/// Sample `i` uses the stream `(seed, "sample", class, i)`, so results do not
/// depend on batching. `table` may be `None` for fields without sub-modes.
pub fn generate<F: ConditionalField + ?Sized>(
    field: &F,
    table: Option<&SubmodeTable>,
    source_std: f64,
    request: &SampleRequest,
) -> Result<GenerationBatch> {
    request.validate()?;
    let mut starts = Vec::with_capacity(request.count);
    let mut submodes = Vec::with_capacity(request.count);
    for i in 0..request.count {
        let mut rng = rng::stream(request.seed, "sample", &[request.class_id as u64, i as u64]);
        let k = match table {
            Some(t) => Some(sample_submode(t, request.class_id, request.submode_strategy, &mut rng)?),
            None => None,
        };
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        starts.push([source_std * z0, source_std * z1]);
        submodes.push(k);
    }
    let classes = vec![Some(request.class_id); request.count];
    let mut paths = Vec::new();
    let ends = integrate(
        field,
        &starts,
        &classes,
        &submodes,
        request.nfe,
        request.guidance_scale,
        request.record_trajectory.then_some(&mut paths),
    )?;
    let mut paths = paths.into_iter();
    Ok(GenerationBatch {
        samples: ends
            .into_iter()
            .zip(submodes)
            .map(|(x, k)| GeneratedSample {
                x,
                class_id: request.class_id,
                submode_id: k,
                trajectory: if request.record_trajectory { paths.next() } else { None },
            })
            .collect(),
    })
}
