//! Training objectives and the optimisation loop.
//!
//! Two regression objectives share one conditioning mechanism:
//!
//! * conditional flow matching: regress `v(x_t, t, c, k)` onto `x1 - x0`;
//! * the average-velocity objective: the net takes the state time `t` and an
//!   interval end `r >= t` and regresses `u(x_t, t, r)` onto the detached target
//!   `v - (t - r) du/dt`, where `du/dt` is the total derivative along
//!   `(dx, dt, dr) = (v, 1, 0)`. At `r = t` this is plain flow matching; at
//!   inference one step from `s` to `s + h` moves by `h · u(x_s, s, s + h)`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{interpolate, LabeledSample, MixtureSpec, Vec2};
use crate::net::{NetConfig, NetInput, Tangent, VelocityNet};
use crate::rng::{self, StreamRng};

/// Batch rows per gradient work item. Partial gradients are summed in chunk
/// order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Cfm,
    MeanFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    Uncond,
    Class,
    SubFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub conditioning: Conditioning,
    pub p_drop_class: f64,
    pub p_drop_submode: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub ema_decay: f64,
    pub rt_equal_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Cfm,
            conditioning: Conditioning::Class,
            p_drop_class: 0.1,
            p_drop_submode: 0.0,
            steps: 4000,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            ema_decay: 0.999,
            rt_equal_fraction: 0.75,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_drop_class", self.p_drop_class),
            ("p_drop_submode", self.p_drop_submode),
            ("rt_equal_fraction", self.rt_equal_fraction),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return invalid(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// One training pair with its time draw(s) and dropout decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainExample {
    pub x0: Vec2,
    pub x1: Vec2,
    pub class: usize,
    pub submode: Option<usize>,
    pub t: f64,
    /// Interval end for the average-velocity objective.
    pub r: Option<f64>,
    pub drop_class: bool,
    pub drop_submode: bool,
}

impl TrainExample {
    pub fn new(x0: Vec2, x1: Vec2, class: usize, submode: Option<usize>, t: f64) -> Self {
        Self {
            x0,
            x1,
            class,
            submode,
            t,
            r: None,
            drop_class: false,
            drop_submode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Returns `None` (the null token) with probability `p_drop`.
pub fn cfg_dropout<R: Rng + ?Sized>(c: usize, p_drop: f64, rng: &mut R) -> Option<usize> {
    let u: f64 = rng.random();
    if u < p_drop {
        None
    } else {
        Some(c)
    }
}

/// The net input an example produces under a conditioning mode.
pub fn condition_input(ex: &TrainExample, x: Vec2, conditioning: Conditioning) -> Result<NetInput> {
    let class = if ex.drop_class { None } else { Some(ex.class) };
    let (class, submode) = match conditioning {
        Conditioning::Uncond => (None, None),
        Conditioning::Class => (class, None),
        Conditioning::SubFlow => {
            let k = ex.submode.ok_or_else(|| {
                Error::MissingSubmode("sub-mode conditioning needs a label on every example".into())
            })?;
            (class, (!ex.drop_submode).then_some(k))
        }
    };
    Ok(NetInput {
        x,
        t: ex.t,
        r: None,
        class,
        submode,
    })
}

fn sum_chunks(net: &VelocityNet, parts: Vec<Result<(f64, Vec<f64>)>>) -> Result<LossOutput> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(LossOutput { loss, grad })
}

/// Mean squared error of the velocity prediction against `x1 - x0`.
///
/// A net that consumes an interval end is evaluated on the diagonal `r = t`.
pub fn cfm_loss(net: &VelocityNet, batch: &[TrainExample], conditioning: Conditioning) -> Result<LossOutput> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let interval = net.config().uses_interval;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for ex in chunk {
                if !(0.0..=1.0).contains(&ex.t) {
                    return invalid(format!("t = {} outside [0, 1]", ex.t));
                }
                let (xt, v) = interpolate(ex.x0, ex.x1, ex.t)?;
                let mut inp = condition_input(ex, xt, conditioning)?;
                if interval {
                    inp.r = Some(ex.t);
                }
                inputs.push(inp);
                targets.push(v);
            }
            let cache = net.forward_batch(&inputs)?;
            let out = cache.outputs();
            let mut loss = 0.0;
            let mut cot = Vec::with_capacity(chunk.len());
            for (o, v) in out.iter().zip(&targets) {
                let d = [o[0] - v[0], o[1] - v[1]];
                loss += d[0] * d[0] + d[1] * d[1];
                cot.push([2.0 * scale * d[0], 2.0 * scale * d[1]]);
            }
            let mut grad = vec![0.0; net.num_params()];
            net.backward(&cache, &cot, &mut grad)?;
            Ok((loss * scale, grad))
        })
        .collect();
    sum_chunks(net, parts)
}

/// Per-example pieces of the average-velocity objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFlowTerms {
    pub prediction: Vec2,
    pub total_derivative: Vec2,
    pub target: Vec2,
}

fn meanflow_inputs(
    net: &VelocityNet,
    chunk: &[TrainExample],
    conditioning: Conditioning,
) -> Result<(Vec<NetInput>, Vec<Tangent>, Vec<Vec2>)> {
    if !net.config().uses_interval {
        return invalid("the average-velocity objective needs a net with uses_interval");
    }
    let mut inputs = Vec::with_capacity(chunk.len());
    let mut tangents = Vec::with_capacity(chunk.len());
    let mut vs = Vec::with_capacity(chunk.len());
    for ex in chunk {
        let r = ex
            .r
            .ok_or_else(|| Error::InvalidArgument("missing interval end r".into()))?;
        if !(0.0 <= ex.t && ex.t <= r && r <= 1.0) {
            return invalid(format!("need 0 <= t <= r <= 1, got t = {}, r = {r}", ex.t));
        }
        let (xt, v) = interpolate(ex.x0, ex.x1, ex.t)?;
        let mut inp = condition_input(ex, xt, conditioning)?;
        inp.r = Some(r);
        inputs.push(inp);
        tangents.push(Tangent {
            x: v,
            t: 1.0,
            r: Some(0.0),
        });
        vs.push(v);
    }
    Ok((inputs, tangents, vs))
}

/// Prediction, total derivative and stop-gradient target for each example.
pub fn meanflow_terms(
    net: &VelocityNet,
    batch: &[TrainExample],
    conditioning: Conditioning,
) -> Result<Vec<MeanFlowTerms>> {
    let (inputs, tangents, vs) = meanflow_inputs(net, batch, conditioning)?;
    let cache = net.forward_batch(&inputs)?;
    let du = net.jvp_cached(&cache, &tangents)?;
    Ok(cache
        .outputs()
        .into_iter()
        .zip(du)
        .zip(vs)
        .zip(batch)
        .map(|(((u, d), v), ex)| {
            let gap = ex.t - ex.r.unwrap_or(ex.t);
            MeanFlowTerms {
                prediction: u,
                total_derivative: d,
                target: [v[0] - gap * d[0], v[1] - gap * d[1]],
            }
        })
        .collect())
}

pub fn meanflow_loss(net: &VelocityNet, batch: &[TrainExample], conditioning: Conditioning) -> Result<LossOutput> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let (inputs, tangents, vs) = meanflow_inputs(net, chunk, conditioning)?;
            let cache = net.forward_batch(&inputs)?;
            let du = net.jvp_cached(&cache, &tangents)?;
            let mut loss = 0.0;
            let mut cot = Vec::with_capacity(chunk.len());
            for (((u, d), v), ex) in cache.outputs().iter().zip(&du).zip(&vs).zip(chunk) {
                let gap = ex.t - ex.r.unwrap_or(ex.t);
                // the target is a constant: no gradient flows through d
                let target = [v[0] - gap * d[0], v[1] - gap * d[1]];
                let e = [u[0] - target[0], u[1] - target[1]];
                loss += e[0] * e[0] + e[1] * e[1];
                cot.push([2.0 * scale * e[0], 2.0 * scale * e[1]]);
            }
            let mut grad = vec![0.0; net.num_params()];
            net.backward(&cache, &cot, &mut grad)?;
            Ok((loss * scale, grad))
        })
        .collect();
    sum_chunks(net, parts)
}

pub fn loss_for(net: &VelocityNet, batch: &[TrainExample], objective: Objective, conditioning: Conditioning) -> Result<LossOutput> {
    match objective {
        Objective::Cfm => cfm_loss(net, batch, conditioning),
        Objective::MeanFlow => meanflow_loss(net, batch, conditioning),
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: VelocityNet,
    pub ema: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: usize,
    pub rng: StreamRng,
}

impl TrainState {
    pub fn new(net: VelocityNet, seed: u64) -> Self {
        let n = net.num_params();
        Self {
            ema: net.params().to_vec(),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
            rng: rng::stream(seed, "train.loop", &[]),
            net,
        }
    }

    /// One Adam step followed by the EMA update.
    pub fn apply_gradient(&mut self, grad: &[f64], cfg: &TrainConfig) -> Result<()> {
        if grad.len() != self.net.num_params() {
            return Err(Error::Shape("gradient length does not match the net".into()));
        }
        const EPS: f64 = 1e-8;
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = cfg.ema_decay;
        let params = self.net.params_mut();
        for i in 0..params.len() {
            let g = grad[i];
            self.adam_m[i] = b1 * self.adam_m[i] + (1.0 - b1) * g;
            self.adam_v[i] = b2 * self.adam_v[i] + (1.0 - b2) * g * g;
            let mhat = self.adam_m[i] / c1;
            let vhat = self.adam_v[i] / c2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + EPS);
            self.ema[i] = decay * self.ema[i] + (1.0 - decay) * params[i];
        }
        Ok(())
    }

    pub fn ema_net(&self) -> Result<VelocityNet> {
        VelocityNet::from_parameters(*self.net.config(), self.ema.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Draws one training batch.
pub fn draw_batch(
    rng: &mut StreamRng,
    dataset: &[LabeledSample],
    source_std: f64,
    cfg: &TrainConfig,
) -> Vec<TrainExample> {
    (0..cfg.batch_size)
        .map(|_| {
            let s = &dataset[rng.random_range(0..dataset.len())];
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let x0 = [source_std * z0, source_std * z1];
            let (t, r) = match cfg.objective {
                Objective::Cfm => (rng.random::<f64>(), None),
                Objective::MeanFlow => {
                    let a: f64 = rng.random();
                    let b: f64 = rng.random();
                    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                    let same = rng.random::<f64>() < cfg.rt_equal_fraction;
                    (lo, Some(if same { lo } else { hi }))
                }
            };
            let drop_class = cfg_dropout(s.class_id, cfg.p_drop_class, rng).is_none();
            let drop_submode = cfg.p_drop_submode > 0.0 && rng.random::<f64>() < cfg.p_drop_submode;
            TrainExample {
                x0,
                x1: s.x,
                class: s.class_id,
                submode: s.submode_id,
                t,
                r,
                drop_class,
                drop_submode,
            }
        })
        .collect()
}

/// Net shape implied by a spec, a sub-mode count and an objective.
pub fn net_config_for(base: &NetConfig, spec: &MixtureSpec, num_submodes: usize, objective: Objective) -> NetConfig {
    NetConfig {
        num_classes: spec.num_classes(),
        num_submodes: num_submodes.max(1),
        uses_interval: objective == Objective::MeanFlow,
        ..*base
    }
}

/// Runs the full optimisation loop from a fresh initialisation.
pub fn train(
    dataset: &[LabeledSample],
    spec: &MixtureSpec,
    net_config: NetConfig,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<LossRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return invalid("empty training set");
    }
    if net_config.uses_interval != (cfg.objective == Objective::MeanFlow) {
        return invalid("uses_interval must be set exactly for the average-velocity objective");
    }
    if let Some(s) = dataset.iter().find(|s| s.class_id >= net_config.num_classes) {
        return Err(Error::OutOfRange(format!("class {} in training set", s.class_id)));
    }
    if cfg.conditioning == Conditioning::SubFlow {
        if dataset.iter().any(|s| s.submode_id.is_none()) {
            return Err(Error::MissingSubmode(
                "sub-mode conditioning needs a sub-mode table for the training set".into(),
            ));
        }
        if let Some(k) = dataset
            .iter()
            .filter_map(|s| s.submode_id)
            .find(|&k| k >= net_config.num_submodes)
        {
            return Err(Error::OutOfRange(format!("submode {k} in training set")));
        }
    }
    let net = VelocityNet::init(net_config, cfg.seed)?;
    let mut state = TrainState::new(net, cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = draw_batch(&mut state.rng, dataset, spec.source_std(), cfg);
        let out = loss_for(&state.net, &batch, cfg.objective, cfg.conditioning)?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                param_norm: state.net.param_norm(),
            });
        }
        curve.push(LossRecord {
            step: state.step,
            loss: out.loss,
        });
        state.apply_gradient(&out.grad, cfg)?;
    }
    Ok((state, curve))
}
