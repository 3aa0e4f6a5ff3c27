//! Ground-truth Gaussian-mixture targets and their closed-form velocity fields.
//!
//! The source is `x0 ~ N(0, source_std² I)`, the target is a mixture of
//! isotropic Gaussians, and points travel on the straight path
//! `x_t = (1 - t) x0 + t x1`. Conditioned on a component `j`, the pair
//! `(x_t, x1 - x0)` is jointly Gaussian, so `E[x1 - x0 | x_t = x, j]` is affine
//! in `x`. Mixing those per-component means with the component posteriors gives
//! the exact minimiser of the conditional flow-matching loss for any subset of
//! components (all of them, one class, or one sub-mode).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub type Vec2 = [f64; 2];

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec2,
    pub std: f64,
    pub class_id: usize,
    pub submode_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
    source_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec2,
    pub class_id: usize,
    pub submode_id: Option<usize>,
}

/// Which conditional expectation the oracle computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionFilter {
    All,
    Class(usize),
    Submode(usize, usize),
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>, source_std: f64) -> Result<Self> {
        let spec = Self {
            components,
            source_std,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.components.is_empty() {
            return bad("at least one component is required".into());
        }
        if !(self.source_std.is_finite() && self.source_std > 0.0) {
            return bad(format!("source_std must be > 0, got {}", self.source_std));
        }
        let mut total = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight > 0.0 && c.weight <= 1.0) {
                return bad(format!("component {i}: weight must be in (0, 1], got {}", c.weight));
            }
            if !(c.std.is_finite() && c.std > 0.0) {
                return bad(format!("component {i}: std must be > 0, got {}", c.std));
            }
            if !(c.mean[0].is_finite() && c.mean[1].is_finite()) {
                return bad(format!("component {i}: mean must be finite"));
            }
            total += c.weight;
            for (j, d) in self.components[..i].iter().enumerate() {
                if d.class_id == c.class_id && d.submode_id == c.submode_id {
                    return bad(format!(
                        "components {j} and {i} share (class {}, submode {})",
                        c.class_id, c.submode_id
                    ));
                }
            }
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return bad(format!("weights sum to {total}, expected 1"));
        }
        for c in 0..self.num_classes() {
            if !self.components.iter().any(|m| m.class_id == c) {
                return bad(format!("class ids must be contiguous; class {c} has no component"));
            }
        }
        Ok(())
    }

    /// Two classes with two sub-modes each, weights 0.35 / 0.15 within each
    /// class, std 0.5, sub-modes four units apart.
    pub fn four_peak_toy() -> Self {
        let comp = |weight, mean, class_id, submode_id| MixtureComponent {
            weight,
            mean,
            std: 0.5,
            class_id,
            submode_id,
        };
        Self::new(
            vec![
                comp(0.35, [-4.0, 2.0], 0, 0),
                comp(0.15, [-4.0, -2.0], 0, 1),
                comp(0.35, [4.0, 2.0], 1, 0),
                comp(0.15, [4.0, -2.0], 1, 1),
            ],
            1.0,
        )
        .expect("toy spec is valid")
    }

    pub fn single_gaussian(mean: Vec2, std: f64) -> Result<Self> {
        Self::new(
            vec![MixtureComponent {
                weight: 1.0,
                mean,
                std,
                class_id: 0,
                submode_id: 0,
            }],
            1.0,
        )
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn source_std(&self) -> f64 {
        self.source_std
    }

    pub fn num_classes(&self) -> usize {
        self.components.iter().map(|c| c.class_id + 1).max().unwrap_or(0)
    }

    /// Total prior mass of a class.
    pub fn class_weight(&self, class_id: usize) -> f64 {
        self.components
            .iter()
            .filter(|c| c.class_id == class_id)
            .map(|c| c.weight)
            .sum()
    }

    /// Component indices selected by a filter, in spec order.
    pub fn select(&self, cond: ConditionFilter) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter(|(_, c)| match cond {
                ConditionFilter::All => true,
                ConditionFilter::Class(k) => c.class_id == k,
                ConditionFilter::Submode(k, s) => c.class_id == k && c.submode_id == s,
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// A new spec holding only the selected components, weights renormalised.
    pub fn restrict(&self, cond: ConditionFilter) -> Result<MixtureSpec> {
        let idx = self.select(cond);
        if idx.is_empty() {
            return Err(Error::EmptySubset);
        }
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        let mut comps: Vec<MixtureComponent> = idx
            .iter()
            .map(|&i| {
                let mut c = self.components[i];
                c.weight /= total;
                c.class_id = 0;
                c
            })
            .collect();
        // absorb rounding so the weights still pass validation
        let drift: f64 = 1.0 - comps.iter().map(|c| c.weight).sum::<f64>();
        comps[0].weight += drift;
        MixtureSpec::new(comps, self.source_std)
    }

    /// Axis-aligned box covering every component mean ± `n_sigma` std, and
    /// the source ± `n_sigma` source_std.
    pub fn bounding_box(&self, n_sigma: f64) -> (Vec2, Vec2) {
        let s0 = n_sigma * self.source_std;
        let mut lo = [-s0, -s0];
        let mut hi = [s0, s0];
        for c in &self.components {
            for d in 0..2 {
                lo[d] = lo[d].min(c.mean[d] - n_sigma * c.std);
                hi[d] = hi[d].max(c.mean[d] + n_sigma * c.std);
            }
        }
        (lo, hi)
    }

    /// Bounding box of the target components only.
    pub fn target_box(&self, n_sigma: f64) -> (Vec2, Vec2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in &self.components {
            for d in 0..2 {
                lo[d] = lo[d].min(c.mean[d] - n_sigma * c.std);
                hi[d] = hi[d].max(c.mean[d] + n_sigma * c.std);
            }
        }
        (lo, hi)
    }
}

pub fn sample_dataset(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return invalid("sample_dataset needs n >= 1");
    }
    spec.validate()?;
    let mut rng = rng::stream(seed, "mixture.sample", &[]);
    let comps = spec.components();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = comps.len() - 1;
        for (j, c) in comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        let c = &comps[pick];
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        out.push(LabeledSample {
            x: [c.mean[0] + c.std * z0, c.mean[1] + c.std * z1],
            class_id: c.class_id,
            submode_id: Some(c.submode_id),
        });
    }
    Ok(out)
}

/// Point on the straight path and its (constant) velocity.
pub fn interpolate(x0: Vec2, x1: Vec2, t: f64) -> Result<(Vec2, Vec2)> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("t must be in [0, 1], got {t}"));
    }
    Ok((
        [(1.0 - t) * x0[0] + t * x1[0], (1.0 - t) * x0[1] + t * x1[1]],
        [x1[0] - x0[0], x1[1] - x0[1]],
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// (component index, normalised weight), in spec order.
    pub weights: Vec<(usize, f64)>,
    /// Set when every density underflowed and the weights fell back to uniform.
    pub underflow: bool,
}

fn path_variance(spec: &MixtureSpec, c: &MixtureComponent, t: f64) -> f64 {
    let s0 = spec.source_std;
    (1.0 - t).powi(2) * s0 * s0 + t * t * c.std * c.std
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("t must be in [0, 1], got {t}"));
    }
    Ok(())
}

pub fn posterior_weights(
    spec: &MixtureSpec,
    x: Vec2,
    t: f64,
    cond: ConditionFilter,
) -> Result<Posterior> {
    check_time(t)?;
    let idx = spec.select(cond);
    if idx.is_empty() {
        return Err(Error::EmptySubset);
    }
    let logs: Vec<f64> = idx
        .iter()
        .map(|&j| {
            let c = &spec.components[j];
            let s2 = path_variance(spec, c, t);
            let dx = x[0] - t * c.mean[0];
            let dy = x[1] - t * c.mean[1];
            c.weight.ln() - s2.ln() - 0.5 * (dx * dx + dy * dy) / s2
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let w = 1.0 / idx.len() as f64;
        return Ok(Posterior {
            weights: idx.into_iter().map(|j| (j, w)).collect(),
            underflow: true,
        });
    }
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Posterior {
        weights: idx.into_iter().zip(exps).map(|(j, e)| (j, e / total)).collect(),
        underflow: false,
    })
}

/// Slope of the per-component conditional mean in `x`.
fn component_gain(spec: &MixtureSpec, c: &MixtureComponent, t: f64) -> f64 {
    let s0 = spec.source_std;
    (t * c.std * c.std - (1.0 - t) * s0 * s0) / path_variance(spec, c, t)
}

/// `E[x1 - x0 | x_t = x, component j]`.
pub fn component_velocity(spec: &MixtureSpec, j: usize, x: Vec2, t: f64) -> Result<Vec2> {
    check_time(t)?;
    let c = spec
        .components
        .get(j)
        .ok_or_else(|| Error::OutOfRange(format!("component {j}")))?;
    let g = component_gain(spec, c, t);
    Ok([
        c.mean[0] + g * (x[0] - t * c.mean[0]),
        c.mean[1] + g * (x[1] - t * c.mean[1]),
    ])
}

pub fn oracle_velocity(spec: &MixtureSpec, x: Vec2, t: f64, cond: ConditionFilter) -> Result<Vec2> {
    let post = posterior_weights(spec, x, t, cond)?;
    let mut v = [0.0; 2];
    for &(j, w) in &post.weights {
        let m = component_velocity(spec, j, x, t)?;
        v[0] += w * m[0];
        v[1] += w * m[1];
    }
    Ok(v)
}

/// Jacobian `d oracle_velocity / dx` as rows `[[dv0/dx0, dv0/dx1], [dv1/dx0, dv1/dx1]]`.
pub fn oracle_jacobian(
    spec: &MixtureSpec,
    x: Vec2,
    t: f64,
    cond: ConditionFilter,
) -> Result<[[f64; 2]; 2]> {
    let post = posterior_weights(spec, x, t, cond)?;
    // d log density_j / dx = -(x - t mu_j) / s_j^2
    let mut score = Vec::with_capacity(post.weights.len());
    let mut mean_score = [0.0; 2];
    let mut vel = Vec::with_capacity(post.weights.len());
    for &(j, w) in &post.weights {
        let c = &spec.components[j];
        let s2 = path_variance(spec, c, t);
        let g = [-(x[0] - t * c.mean[0]) / s2, -(x[1] - t * c.mean[1]) / s2];
        mean_score[0] += w * g[0];
        mean_score[1] += w * g[1];
        score.push(g);
        vel.push(component_velocity(spec, j, x, t)?);
    }
    let mut jac = [[0.0; 2]; 2];
    for (n, &(j, w)) in post.weights.iter().enumerate() {
        let gain = component_gain(spec, &spec.components[j], t);
        for a in 0..2 {
            jac[a][a] += w * gain;
            for b in 0..2 {
                jac[a][b] += w * (score[n][b] - mean_score[b]) * vel[n][a];
            }
        }
    }
    Ok(jac)
}
