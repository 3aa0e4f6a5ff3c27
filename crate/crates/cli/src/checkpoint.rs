//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SFLW"  u32 version
//! net config     5 × u64, u8 uses_interval
//! layout         u32 count, then per block: u32 name length, name, u64 rows, u64 cols
//! u64 step
//! params         u64 length, f64 × length
//! ema            u64 length, f64 × length
//! context        u8 objective, u8 conditioning, mixture spec, optional sub-mode table
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use subflow::clustering::{ClassClusters, SubmodeTable};
use subflow::mixture::{MixtureComponent, MixtureSpec};
use subflow::net::{Layout, LayoutEntry, NetConfig, VelocityNet};
use subflow::objectives::{Conditioning, Objective, TrainState};
use subflow::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFLW";
pub const VERSION: u32 = 1;

/// What a checkpoint needs besides weights to generate and evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub objective: Objective,
    pub conditioning: Conditioning,
    pub spec: MixtureSpec,
    pub table: Option<SubmodeTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net_config: NetConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
    pub step: u64,
    pub context: RunContext,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, context: RunContext) -> Self {
        Self {
            net_config: *state.net.config(),
            layout: state.net.layout().clone(),
            params: state.net.params().to_vec(),
            ema: state.ema.clone(),
            step: state.step as u64,
            context,
        }
    }

    /// The EMA or raw network.
    pub fn net(&self, use_ema: bool) -> Result<VelocityNet> {
        let p = if use_ema { &self.ema } else { &self.params };
        VelocityNet::from_parameters(self.net_config, p.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let c = &self.net_config;
        for v in [c.hidden_width, c.hidden_layers, c.embed_dim, c.num_classes, c.num_submodes] {
            w.u64(v as u64);
        }
        w.u8(c.uses_interval as u8);
        w.u32(self.layout.entries().len() as u32);
        for e in self.layout.entries() {
            w.u32(e.name.len() as u32);
            w.0.extend_from_slice(e.name.as_bytes());
            w.u64(e.rows as u64);
            w.u64(e.cols as u64);
        }
        w.u64(self.step);
        w.f64s(&self.params);
        w.f64s(&self.ema);
        let ctx = &self.context;
        w.u8(match ctx.objective {
            Objective::Cfm => 0,
            Objective::MeanFlow => 1,
        });
        w.u8(match ctx.conditioning {
            Conditioning::Uncond => 0,
            Conditioning::Class => 1,
            Conditioning::SubFlow => 2,
        });
        w.f64(ctx.spec.source_std());
        w.u64(ctx.spec.components().len() as u64);
        for m in ctx.spec.components() {
            w.f64(m.weight);
            w.f64(m.mean[0]);
            w.f64(m.mean[1]);
            w.f64(m.std);
            w.u64(m.class_id as u64);
            w.u64(m.submode_id as u64);
        }
        match &ctx.table {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.u64(t.k as u64);
                w.u64(t.classes.len() as u64);
                for cc in t.classes.values() {
                    w.u64(cc.class_id as u64);
                    w.u64(cc.effective_k as u64);
                    w.u8(cc.reduced as u8);
                    w.u64(cc.counts.len() as u64);
                    for &n in &cc.counts {
                        w.u64(n as u64);
                    }
                    let dim = cc.centroids.first().map_or(0, Vec::len);
                    w.u64(dim as u64);
                    for row in &cc.centroids {
                        for &v in row {
                            w.f64(v);
                        }
                    }
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let net_config = NetConfig {
            hidden_width: r.usize()?,
            hidden_layers: r.usize()?,
            embed_dim: r.usize()?,
            num_classes: r.usize()?,
            num_submodes: r.usize()?,
            uses_interval: r.flag()?,
        };
        net_config.validate()?;
        let n_entries = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries.min(1024));
        for _ in 0..n_entries {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("layout name is not UTF-8"))?;
            entries.push(LayoutEntry {
                name,
                rows: r.usize()?,
                cols: r.usize()?,
            });
        }
        let layout = Layout::from_entries(entries);
        if layout != Layout::for_config(&net_config) {
            return Err(bad("layout descriptor does not match the net config"));
        }
        let step = r.u64()?;
        let params = r.f64s()?;
        let ema = r.f64s()?;
        if params.len() != layout.total_len() || ema.len() != layout.total_len() {
            return Err(bad(format!(
                "parameter arrays have lengths {} and {}, descriptor says {}",
                params.len(),
                ema.len(),
                layout.total_len()
            )));
        }
        let objective = match r.u8()? {
            0 => Objective::Cfm,
            1 => Objective::MeanFlow,
            v => return Err(bad(format!("unknown objective tag {v}"))),
        };
        let conditioning = match r.u8()? {
            0 => Conditioning::Uncond,
            1 => Conditioning::Class,
            2 => Conditioning::SubFlow,
            v => return Err(bad(format!("unknown conditioning tag {v}"))),
        };
        let source_std = r.f64()?;
        let n_comp = r.usize()?;
        let mut components = Vec::new();
        for _ in 0..n_comp {
            components.push(MixtureComponent {
                weight: r.f64()?,
                mean: [r.f64()?, r.f64()?],
                std: r.f64()?,
                class_id: r.usize()?,
                submode_id: r.usize()?,
            });
        }
        let spec = MixtureSpec::new(components, source_std)?;
        let table = if r.flag()? {
            let k = r.usize()?;
            let n_classes = r.usize()?;
            let mut classes = BTreeMap::new();
            for _ in 0..n_classes {
                let class_id = r.usize()?;
                let effective_k = r.usize()?;
                let reduced = r.flag()?;
                let nk = r.usize()?;
                let counts = (0..nk).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
                let dim = r.usize()?;
                let centroids = (0..nk)
                    .map(|_| (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                classes.insert(
                    class_id,
                    ClassClusters {
                        class_id,
                        centroids,
                        counts,
                        effective_k,
                        reduced,
                        sse_history: Vec::new(),
                        iterations: 0,
                    },
                );
            }
            Some(SubmodeTable {
                k,
                classes,
                assignments: Vec::new(),
                sample_classes: Vec::new(),
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            net_config,
            layout,
            params,
            ema,
            step,
            context: RunContext {
                objective,
                conditioning,
                spec,
                table,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(bad(format!("invalid boolean byte {v}"))),
        }
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("size does not fit in usize"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(bad("truncated file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use subflow::clustering::assign_submodes;
    use subflow::mixture::sample_dataset;

    fn sample() -> Checkpoint {
        let spec = MixtureSpec::four_peak_toy();
        let data = sample_dataset(&spec, 200, 1).unwrap();
        let feats: Vec<Vec<f64>> = data.iter().map(|s| s.x.to_vec()).collect();
        let classes: Vec<usize> = data.iter().map(|s| s.class_id).collect();
        let table = assign_submodes(&feats, &classes, 2, 0, 50).unwrap();
        let cfg = NetConfig {
            hidden_width: 6,
            hidden_layers: 2,
            embed_dim: 3,
            num_classes: 2,
            num_submodes: 2,
            uses_interval: true,
        };
        let net = VelocityNet::init(cfg, 3).unwrap();
        let mut state = TrainState::new(net, 3);
        state.ema.iter_mut().for_each(|v| *v = v.sin() * 1e-300);
        state.step = 17;
        Checkpoint::from_state(
            &state,
            RunContext {
                objective: Objective::MeanFlow,
                conditioning: Conditioning::SubFlow,
                spec,
                table: Some(table),
            },
        )
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ck.params));
        assert_eq!(bits(&back.ema), bits(&ck.ema));
        assert_eq!(back.step, 17);
        assert_eq!(back.context.spec, ck.context.spec);
        let (a, b) = (back.context.table.as_ref().unwrap(), ck.context.table.as_ref().unwrap());
        for (x, y) in a.classes.values().zip(b.classes.values()) {
            assert_eq!(x.counts, y.counts);
            assert_eq!(x.centroids, y.centroids);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(Checkpoint::from_bytes(&v).unwrap_err().to_string().contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
