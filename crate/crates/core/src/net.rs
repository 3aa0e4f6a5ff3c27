//! Conditional velocity network.
//!
//! A SiLU multilayer perceptron over the concatenation
//! `[x, enc(t), enc(r)?, class_embedding, submode_embedding]`, where `enc` is
//! the raw time followed by sines and cosines at 16 geometrically spaced
//! frequencies between 1 and 10. Class row `num_classes` is the null token.
//! An absent sub-mode feeds zeros into its slot.
//!
//! All parameters live in one flat `f64` buffer described by a [`Layout`].
//! Reverse-mode gradients and forward-mode directional derivatives are
//! computed by hand over that buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dual::{silu, silu_grad, Dual};
use crate::error::{Error, Result};
use crate::mixture::Vec2;
use crate::rng;

pub const TIME_FREQUENCIES: usize = 16;
pub const TIME_FEATURES: usize = 1 + 2 * TIME_FREQUENCIES;
pub const MAX_FREQUENCY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub num_submodes: usize,
    pub uses_interval: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_width: 128,
            hidden_layers: 3,
            embed_dim: 32,
            num_classes: 1,
            num_submodes: 1,
            uses_interval: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden_width", self.hidden_width),
            ("hidden_layers", self.hidden_layers),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
            ("num_submodes", self.num_submodes),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 + TIME_FEATURES * self.time_slots() + 2 * self.embed_dim
    }

    fn time_slots(&self) -> usize {
        if self.uses_interval {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named row-major blocks making up the flat parameter buffer, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn for_config(cfg: &NetConfig) -> Self {
        let mut entries = vec![
            LayoutEntry {
                name: "class_embed".into(),
                rows: cfg.num_classes + 1,
                cols: cfg.embed_dim,
            },
            LayoutEntry {
                name: "submode_embed".into(),
                rows: cfg.num_submodes,
                cols: cfg.embed_dim,
            },
        ];
        let mut fan_in = cfg.input_dim();
        for l in 0..=cfg.hidden_layers {
            let out = if l == cfg.hidden_layers { 2 } else { cfg.hidden_width };
            entries.push(LayoutEntry {
                name: format!("layer{l}.weight"),
                rows: out,
                cols: fan_in,
            });
            entries.push(LayoutEntry {
                name: format!("layer{l}.bias"),
                rows: out,
                cols: 1,
            });
            fan_in = out;
        }
        Self { entries }
    }

    pub fn from_entries(entries: Vec<LayoutEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(LayoutEntry::len).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.entries
            .iter()
            .map(|e| {
                let o = acc;
                acc += e.len();
                o
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// One evaluation point. `class: None` selects the null token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetInput {
    pub x: Vec2,
    pub t: f64,
    pub r: Option<f64>,
    pub class: Option<usize>,
    pub submode: Option<usize>,
}

/// Direction for forward-mode differentiation. Embeddings are constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent {
    pub x: Vec2,
    pub t: f64,
    pub r: Option<f64>,
}

impl Tangent {
    pub fn zero(uses_interval: bool) -> Self {
        Self {
            x: [0.0; 2],
            t: 0.0,
            r: uses_interval.then_some(0.0),
        }
    }
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the assembled input; `acts[l]` the output of hidden layer `l`.
    acts: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
    class_rows: Vec<usize>,
    submode_rows: Vec<Option<usize>>,
    times: Vec<(f64, Option<f64>)>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.out.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outputs(&self) -> Vec<Vec2> {
        self.out.rows().into_iter().map(|r| [r[0], r[1]]).collect()
    }
}

fn frequency(i: usize) -> f64 {
    MAX_FREQUENCY.powf(i as f64 / (TIME_FREQUENCIES - 1) as f64)
}

/// Time encoding evaluated on a dual number; `.re` is the feature, `.eps` its
/// derivative along the tangent.
pub fn time_features(t: Dual) -> [Dual; TIME_FEATURES] {
    let mut f = [Dual::constant(0.0); TIME_FEATURES];
    f[0] = t;
    for i in 0..TIME_FREQUENCIES {
        let arg = t * frequency(i);
        f[1 + i] = arg.sin();
        f[1 + TIME_FREQUENCIES + i] = arg.cos();
    }
    f
}

impl VelocityNet {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::for_config(&config);
        let params = vec![0.0; layout.total_len()];
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Kaiming-uniform hidden layers, unit-normal embeddings, zero biases and
    /// a zero output layer.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = rng::stream(seed, "net.init", &[]);
        let offsets = net.layout.offsets();
        for (e, &off) in net.layout.entries.iter().zip(&offsets) {
            let block = &mut net.params[off..off + e.len()];
            if e.name.ends_with("_embed") {
                for p in block {
                    *p = rng.sample(StandardNormal);
                }
            } else if e.name.ends_with(".weight") && e.rows != 2 {
                let bound = (6.0 / e.cols as f64).sqrt();
                for p in block {
                    *p = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn from_parameters(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::for_config(&config);
        if params.len() != layout.total_len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total_len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn slots(&self) -> (usize, usize, Vec<LayerSlot>) {
        let offs = self.layout.offsets();
        let e = &self.layout.entries;
        let layers = (0..=self.config.hidden_layers)
            .map(|l| {
                let wi = 2 + 2 * l;
                LayerSlot {
                    w: offs[wi],
                    b: offs[wi + 1],
                    out: e[wi].rows,
                    inp: e[wi].cols,
                }
            })
            .collect();
        (offs[0], offs[1], layers)
    }

    /// Mutable views of one layer's weight (out × in) and bias.
    pub fn layer_mut(&mut self, layer: usize) -> Result<(ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>)> {
        if layer > self.config.hidden_layers {
            return Err(Error::OutOfRange(format!("layer {layer}")));
        }
        let (_, _, slots) = self.slots();
        let s = slots[layer];
        let (head, tail) = self.params.split_at_mut(s.b);
        let w = ArrayViewMut2::from_shape((s.out, s.inp), &mut head[s.w..s.w + s.out * s.inp])
            .expect("layout shape");
        let b = ArrayViewMut1::from(&mut tail[..s.out]);
        Ok((w, b))
    }

    /// Mutable view of the class (`submode = false`) or sub-mode embedding table.
    pub fn embedding_mut(&mut self, submode: bool) -> ArrayViewMut2<'_, f64> {
        let (c, s, _) = self.slots();
        let e = &self.layout.entries;
        let (off, rows) = if submode { (s, e[1].rows) } else { (c, e[0].rows) };
        let cols = self.config.embed_dim;
        ArrayViewMut2::from_shape((rows, cols), &mut self.params[off..off + rows * cols])
            .expect("layout shape")
    }

    fn check_input(&self, inp: &NetInput) -> Result<()> {
        if let Some(c) = inp.class {
            if c >= self.config.num_classes {
                return Err(Error::OutOfRange(format!(
                    "class {c} (num_classes = {})",
                    self.config.num_classes
                )));
            }
        }
        if let Some(k) = inp.submode {
            if k >= self.config.num_submodes {
                return Err(Error::OutOfRange(format!(
                    "submode {k} (num_submodes = {})",
                    self.config.num_submodes
                )));
            }
        }
        if inp.r.is_some() != self.config.uses_interval {
            return Err(Error::Shape(format!(
                "second time input {} but uses_interval = {}",
                if inp.r.is_some() { "given" } else { "missing" },
                self.config.uses_interval
            )));
        }
        Ok(())
    }

    fn weight(&self, s: &LayerSlot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.out, s.inp), &self.params[s.w..s.w + s.out * s.inp])
            .expect("layout shape")
    }

    fn bias(&self, s: &LayerSlot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[s.b..s.b + s.out])
    }

    pub fn forward_batch(&self, inputs: &[NetInput]) -> Result<ForwardCache> {
        let cfg = &self.config;
        let (c_off, s_off, slots) = self.slots();
        let ed = cfg.embed_dim;
        let dim = cfg.input_dim();
        let emb_at = 2 + TIME_FEATURES * cfg.time_slots();
        let mut z = Array2::<f64>::zeros((inputs.len(), dim));
        let mut class_rows = Vec::with_capacity(inputs.len());
        let mut submode_rows = Vec::with_capacity(inputs.len());
        let mut times = Vec::with_capacity(inputs.len());
        for (i, inp) in inputs.iter().enumerate() {
            self.check_input(inp)?;
            let mut row = z.row_mut(i);
            row[0] = inp.x[0];
            row[1] = inp.x[1];
            for (j, f) in time_features(Dual::constant(inp.t)).iter().enumerate() {
                row[2 + j] = f.re;
            }
            if let Some(r) = inp.r {
                for (j, f) in time_features(Dual::constant(r)).iter().enumerate() {
                    row[2 + TIME_FEATURES + j] = f.re;
                }
            }
            let crow = inp.class.unwrap_or(cfg.num_classes);
            let ce = &self.params[c_off + crow * ed..c_off + (crow + 1) * ed];
            for j in 0..ed {
                row[emb_at + j] = ce[j];
            }
            if let Some(k) = inp.submode {
                let se = &self.params[s_off + k * ed..s_off + (k + 1) * ed];
                for j in 0..ed {
                    row[emb_at + ed + j] = se[j];
                }
            }
            class_rows.push(crow);
            submode_rows.push(inp.submode);
            times.push((inp.t, inp.r));
        }

        let mut acts = Vec::with_capacity(slots.len());
        let mut pre = Vec::with_capacity(slots.len() - 1);
        acts.push(z);
        for s in &slots[..slots.len() - 1] {
            let mut a = acts.last().unwrap().dot(&self.weight(s).t());
            a += &self.bias(s);
            let h = a.mapv(silu);
            pre.push(a);
            acts.push(h);
        }
        let last = slots.last().unwrap();
        let mut out = acts.last().unwrap().dot(&self.weight(last).t());
        out += &self.bias(last);
        Ok(ForwardCache {
            acts,
            pre,
            out,
            class_rows,
            submode_rows,
            times,
        })
    }

    pub fn forward(&self, input: &NetInput) -> Result<Vec2> {
        Ok(self.forward_batch(std::slice::from_ref(input))?.outputs()[0])
    }

    /// Accumulates `d/dθ Σ_b ⟨cotangent_b, output_b⟩` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, cotangents: &[Vec2], grad: &mut [f64]) -> Result<()> {
        if cotangents.len() != cache.len() {
            return Err(Error::Shape(format!(
                "{} cotangents for a batch of {}",
                cotangents.len(),
                cache.len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has {} entries, net has {}",
                grad.len(),
                self.params.len()
            )));
        }
        let (c_off, s_off, slots) = self.slots();
        let n = cache.len();
        let mut delta = Array2::from_shape_fn((n, 2), |(i, j)| cotangents[i][j]);
        for l in (0..slots.len()).rev() {
            let s = slots[l];
            let input = &cache.acts[l];
            {
                let mut gw = ArrayViewMut2::from_shape((s.out, s.inp), &mut grad[s.w..s.w + s.out * s.inp])
                    .expect("layout shape");
                general_mat_mul(1.0, &delta.t(), input, 1.0, &mut gw);
            }
            {
                let mut gb = ArrayViewMut1::from(&mut grad[s.b..s.b + s.out]);
                gb += &delta.sum_axis(Axis(0));
            }
            let mut dh = delta.dot(&self.weight(&s));
            if l > 0 {
                Zip::from(&mut dh)
                    .and(&cache.pre[l - 1])
                    .for_each(|d, &a| *d *= silu_grad(a));
            }
            delta = dh;
        }
        // delta is now d/d(input row); route the embedding slices back to their tables
        let ed = self.config.embed_dim;
        let emb_at = 2 + TIME_FEATURES * self.config.time_slots();
        for i in 0..n {
            let row = delta.row(i);
            let crow = cache.class_rows[i];
            for j in 0..ed {
                grad[c_off + crow * ed + j] += row[emb_at + j];
            }
            if let Some(k) = cache.submode_rows[i] {
                for j in 0..ed {
                    grad[s_off + k * ed + j] += row[emb_at + ed + j];
                }
            }
        }
        Ok(())
    }

    /// Directional derivatives of the cached outputs along per-row tangents.
    pub fn jvp_cached(&self, cache: &ForwardCache, tangents: &[Tangent]) -> Result<Vec<Vec2>> {
        if tangents.len() != cache.len() {
            return Err(Error::Shape(format!(
                "{} tangents for a batch of {}",
                tangents.len(),
                cache.len()
            )));
        }
        let (_, _, slots) = self.slots();
        let mut dz = Array2::<f64>::zeros(cache.acts[0].raw_dim());
        for (i, tan) in tangents.iter().enumerate() {
            if tan.r.is_some() != self.config.uses_interval {
                return Err(Error::Shape("tangent time slots do not match the net".into()));
            }
            let (t, r) = cache.times[i];
            let mut row = dz.row_mut(i);
            row[0] = tan.x[0];
            row[1] = tan.x[1];
            for (j, f) in time_features(Dual::new(t, tan.t)).iter().enumerate() {
                row[2 + j] = f.eps;
            }
            if let (Some(r), Some(dr)) = (r, tan.r) {
                for (j, f) in time_features(Dual::new(r, dr)).iter().enumerate() {
                    row[2 + TIME_FEATURES + j] = f.eps;
                }
            }
        }
        let mut dh = dz;
        for (l, s) in slots[..slots.len() - 1].iter().enumerate() {
            let mut da = dh.dot(&self.weight(s).t());
            Zip::from(&mut da)
                .and(&cache.pre[l])
                .for_each(|d, &a| *d = Dual::new(a, *d).silu().eps);
            dh = da;
        }
        let dout = dh.dot(&self.weight(slots.last().unwrap()).t());
        Ok(dout.rows().into_iter().map(|r| [r[0], r[1]]).collect())
    }

    pub fn jvp(&self, input: &NetInput, tangent: &Tangent) -> Result<Vec2> {
        let cache = self.forward_batch(std::slice::from_ref(input))?;
        Ok(self.jvp_cached(&cache, std::slice::from_ref(tangent))?[0])
    }

    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum::<f64>().sqrt()
    }
}
