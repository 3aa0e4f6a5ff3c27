//! Experiment configuration in a flat `key = value` format.
//!
//! ```text
//! [mixture]
//! source_std = 1.0
//! n_train = 20000
//! component = 0.35 -4.0 2.0 0.5 0 0
//! ```
//!
//! Sections are `[mixture]`, `[net]`, `[train]`, `[cluster]`, `[sample]` and
//! `[metrics]`. `#` starts a comment. `component` is the only key that may
//! repeat; its fields are `weight mean_x mean_y std class submode`.

use std::fmt::Write as _;
use std::path::Path;

use subflow::mixture::{MixtureComponent, MixtureSpec};
use subflow::net::NetConfig;
use subflow::objectives::{Conditioning, Objective, TrainConfig};
use subflow::sampler::SubmodeStrategy;
use subflow::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMethod {
    KMeans,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSection {
    pub source_std: f64,
    pub n_train: usize,
    pub components: Vec<MixtureComponent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSection {
    pub enabled: bool,
    pub method: ClusterMethod,
    pub k: usize,
    pub max_iters: usize,
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSection {
    pub count: usize,
    pub nfe: usize,
    pub guidance_scale: f64,
    pub strategy: SubmodeStrategy,
    pub seed: u64,
    pub use_ema: bool,
    pub trajectory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSection {
    pub n_real: usize,
    pub knn_k: usize,
    pub tau: f64,
    pub grid: usize,
    pub times: Vec<f64>,
    pub nfe_list: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mixture: MixtureSection,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub cluster: ClusterSection,
    pub sample: SampleSection,
    pub metrics: MetricsSection,
}

impl Default for ExperimentConfig {
    /// The two-class, two-sub-mode toy.
    fn default() -> Self {
        let toy = MixtureSpec::four_peak_toy();
        Self {
            mixture: MixtureSection {
                source_std: toy.source_std(),
                n_train: 20_000,
                components: toy.components().to_vec(),
            },
            net: NetConfig::default(),
            train: TrainConfig {
                objective: Objective::MeanFlow,
                conditioning: Conditioning::SubFlow,
                steps: 3000,
                ..TrainConfig::default()
            },
            cluster: ClusterSection {
                enabled: true,
                method: ClusterMethod::KMeans,
                k: 2,
                max_iters: 100,
                standardize: false,
            },
            sample: SampleSection {
                count: 10_000,
                nfe: 1,
                guidance_scale: 1.0,
                strategy: SubmodeStrategy::Prior,
                seed: 0,
                use_ema: true,
                trajectory: false,
            },
            metrics: MetricsSection {
                n_real: 10_000,
                knn_k: subflow::metrics::DEFAULT_KNN_K,
                tau: subflow::metrics::DEFAULT_TAU,
                grid: subflow::metrics::DEFAULT_GRID,
                times: subflow::metrics::DEFAULT_TIMES.to_vec(),
                nfe_list: vec![1, 2, 4, 8, 16, 32, 64, 128],
            },
        }
    }
}

const SECTIONS: [&str; 6] = ["mixture", "net", "train", "cluster", "sample", "metrics"];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

pub fn parse_objective(v: &str) -> std::result::Result<Objective, String> {
    match v {
        "cfm" => Ok(Objective::Cfm),
        "meanflow" => Ok(Objective::MeanFlow),
        _ => Err(format!("unknown objective {v:?} (cfm | meanflow)")),
    }
}

pub fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Cfm => "cfm",
        Objective::MeanFlow => "meanflow",
    }
}

pub fn parse_conditioning(v: &str) -> std::result::Result<Conditioning, String> {
    match v {
        "uncond" => Ok(Conditioning::Uncond),
        "class" => Ok(Conditioning::Class),
        "subflow" => Ok(Conditioning::SubFlow),
        _ => Err(format!("unknown conditioning {v:?} (uncond | class | subflow)")),
    }
}

pub fn conditioning_name(c: Conditioning) -> &'static str {
    match c {
        Conditioning::Uncond => "uncond",
        Conditioning::Class => "class",
        Conditioning::SubFlow => "subflow",
    }
}

pub fn parse_strategy(v: &str) -> std::result::Result<SubmodeStrategy, String> {
    match v {
        "prior" => Ok(SubmodeStrategy::Prior),
        "uniform" => Ok(SubmodeStrategy::Uniform),
        _ => match v.strip_prefix("fixed:") {
            Some(k) => Ok(SubmodeStrategy::Fixed(parse_num(k)?)),
            None => Err(format!("unknown strategy {v:?} (prior | uniform | fixed:K)")),
        },
    }
}

pub fn strategy_name(s: SubmodeStrategy) -> String {
    match s {
        SubmodeStrategy::Prior => "prior".into(),
        SubmodeStrategy::Uniform => "uniform".into(),
        SubmodeStrategy::Fixed(k) => format!("fixed:{k}"),
    }
}

fn parse_component(v: &str) -> std::result::Result<MixtureComponent, String> {
    let f: Vec<&str> = v.split_whitespace().collect();
    if f.len() != 6 {
        return Err(format!("component needs 6 fields (weight mx my std class submode), got {}", f.len()));
    }
    Ok(MixtureComponent {
        weight: parse_num(f[0])?,
        mean: [parse_num(f[1])?, parse_num(f[2])?],
        std: parse_num(f[3])?,
        class_id: parse_num(f[4])?,
        submode_id: parse_num(f[5])?,
    })
}

impl ExperimentConfig {
    pub fn spec(&self) -> Result<MixtureSpec> {
        MixtureSpec::new(self.mixture.components.clone(), self.mixture.source_std)
    }

    /// Assigns one key. Components are appended.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match (section, key) {
            ("mixture", "source_std") => self.mixture.source_std = parse_num(v)?,
            ("mixture", "n_train") => self.mixture.n_train = parse_num(v)?,
            ("mixture", "component") => self.mixture.components.push(parse_component(v)?),
            ("net", "hidden_width") => self.net.hidden_width = parse_num(v)?,
            ("net", "hidden_layers") => self.net.hidden_layers = parse_num(v)?,
            ("net", "embed_dim") => self.net.embed_dim = parse_num(v)?,
            ("train", "objective") => self.train.objective = parse_objective(v)?,
            ("train", "conditioning") => self.train.conditioning = parse_conditioning(v)?,
            ("train", "p_drop_class") => self.train.p_drop_class = parse_num(v)?,
            ("train", "p_drop_submode") => self.train.p_drop_submode = parse_num(v)?,
            ("train", "steps") => self.train.steps = parse_num(v)?,
            ("train", "batch_size") => self.train.batch_size = parse_num(v)?,
            ("train", "learning_rate") => self.train.learning_rate = parse_num(v)?,
            ("train", "adam_beta1") => self.train.adam_beta1 = parse_num(v)?,
            ("train", "adam_beta2") => self.train.adam_beta2 = parse_num(v)?,
            ("train", "ema_decay") => self.train.ema_decay = parse_num(v)?,
            ("train", "rt_equal_fraction") => self.train.rt_equal_fraction = parse_num(v)?,
            ("train", "seed") => self.train.seed = parse_num(v)?,
            ("cluster", "enabled") => self.cluster.enabled = parse_bool(v)?,
            ("cluster", "method") => {
                self.cluster.method = match v {
                    "kmeans" => ClusterMethod::KMeans,
                    "random" => ClusterMethod::Random,
                    _ => return Err(format!("unknown cluster method {v:?} (kmeans | random)")),
                }
            }
            ("cluster", "k") => self.cluster.k = parse_num(v)?,
            ("cluster", "max_iters") => self.cluster.max_iters = parse_num(v)?,
            ("cluster", "standardize") => self.cluster.standardize = parse_bool(v)?,
            ("sample", "count") => self.sample.count = parse_num(v)?,
            ("sample", "nfe") => self.sample.nfe = parse_num(v)?,
            ("sample", "guidance_scale") => self.sample.guidance_scale = parse_num(v)?,
            ("sample", "strategy") => self.sample.strategy = parse_strategy(v)?,
            ("sample", "seed") => self.sample.seed = parse_num(v)?,
            ("sample", "use_ema") => self.sample.use_ema = parse_bool(v)?,
            ("sample", "trajectory") => self.sample.trajectory = parse_bool(v)?,
            ("metrics", "n_real") => self.metrics.n_real = parse_num(v)?,
            ("metrics", "knn_k") => self.metrics.knn_k = parse_num(v)?,
            ("metrics", "tau") => self.metrics.tau = parse_num(v)?,
            ("metrics", "grid") => self.metrics.grid = parse_num(v)?,
            ("metrics", "times") => self.metrics.times = parse_list(v)?,
            ("metrics", "nfe_list") => self.metrics.nfe_list = parse_list(v)?,
            _ if !SECTIONS.contains(&section) => return Err(format!("unknown section [{section}]")),
            _ => return Err(format!("unknown key {key:?} in [{section}]")),
        }
        Ok(())
    }

    /// Parses a config. Keys not present keep their defaults, except that a
    /// `[mixture]` section with any `component` line replaces the default
    /// components entirely.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::BTreeSet::new();
        let mut replaced_components = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |msg: String| Error::Config { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header {content:?}")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
            let key = key.trim();
            let sec = section
                .as_deref()
                .ok_or_else(|| err(format!("key {key:?} appears before any section header")))?;
            if key == "component" && sec == "mixture" {
                if !replaced_components {
                    cfg.mixture.components.clear();
                    replaced_components = true;
                }
            } else if !seen.insert(format!("{sec}.{key}")) {
                return Err(err(format!("duplicate key {key:?} in [{sec}]")));
            }
            cfg.set(sec, key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `section.key=value` overrides. Errors report line 0.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let err = |msg: String| Error::Config { line: 0, msg };
            let (path, value) = o
                .split_once('=')
                .ok_or_else(|| err(format!("override {o:?} is not section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| err(format!("override key {path:?} is not section.key")))?;
            if section == "mixture" && key == "component" {
                return Err(err("components cannot be overridden from the command line".into()));
            }
            self.set(section, key, value).map_err(err)?;
        }
        Ok(())
    }

    /// Checks cross-field constraints that individual keys cannot.
    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.net.validate()?;
        self.train.validate()?;
        let bad = |msg: &str| Err(Error::Config { line: 0, msg: msg.into() });
        if self.mixture.n_train == 0 {
            return bad("mixture.n_train must be >= 1");
        }
        if self.train.conditioning == Conditioning::SubFlow && !self.cluster.enabled {
            return bad("conditioning = subflow needs a SubmodeTable, but [cluster] enabled = false");
        }
        if self.cluster.k == 0 {
            return bad("cluster.k must be >= 1");
        }
        if self.metrics.knn_k == 0 || self.metrics.grid == 0 || self.metrics.times.is_empty() {
            return bad("metrics.knn_k, metrics.grid and metrics.times must be nonempty");
        }
        if self.metrics.nfe_list.contains(&0) {
            return bad("metrics.nfe_list entries must be >= 1");
        }
        Ok(())
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        let m = &self.mixture;
        let _ = writeln!(s, "[mixture]\nsource_std = {}\nn_train = {}", m.source_std, m.n_train);
        for c in &m.components {
            let _ = writeln!(
                s,
                "component = {} {} {} {} {} {}",
                c.weight, c.mean[0], c.mean[1], c.std, c.class_id, c.submode_id
            );
        }
        let n = &self.net;
        let _ = writeln!(
            s,
            "\n[net]\nhidden_width = {}\nhidden_layers = {}\nembed_dim = {}",
            n.hidden_width, n.hidden_layers, n.embed_dim
        );
        let t = &self.train;
        let _ = writeln!(
            s,
            "\n[train]\nobjective = {}\nconditioning = {}\np_drop_class = {}\np_drop_submode = {}\nsteps = {}\n\
             batch_size = {}\nlearning_rate = {}\nadam_beta1 = {}\nadam_beta2 = {}\nema_decay = {}\n\
             rt_equal_fraction = {}\nseed = {}",
            objective_name(t.objective),
            conditioning_name(t.conditioning),
            t.p_drop_class,
            t.p_drop_submode,
            t.steps,
            t.batch_size,
            t.learning_rate,
            t.adam_beta1,
            t.adam_beta2,
            t.ema_decay,
            t.rt_equal_fraction,
            t.seed
        );
        let c = &self.cluster;
        let _ = writeln!(
            s,
            "\n[cluster]\nenabled = {}\nmethod = {}\nk = {}\nmax_iters = {}\nstandardize = {}",
            c.enabled,
            match c.method {
                ClusterMethod::KMeans => "kmeans",
                ClusterMethod::Random => "random",
            },
            c.k,
            c.max_iters,
            c.standardize
        );
        let p = &self.sample;
        let _ = writeln!(
            s,
            "\n[sample]\ncount = {}\nnfe = {}\nguidance_scale = {}\nstrategy = {}\nseed = {}\nuse_ema = {}\ntrajectory = {}",
            p.count,
            p.nfe,
            p.guidance_scale,
            strategy_name(p.strategy),
            p.seed,
            p.use_ema,
            p.trajectory
        );
        let x = &self.metrics;
        let join = |v: Vec<String>| v.join(", ");
        let _ = writeln!(
            s,
            "\n[metrics]\nn_real = {}\nknn_k = {}\ntau = {}\ngrid = {}\ntimes = {}\nnfe_list = {}",
            x.n_real,
            x.knn_k,
            x.tau,
            x.grid,
            join(x.times.iter().map(|v| v.to_string()).collect()),
            join(x.nfe_list.iter().map(|v| v.to_string()).collect())
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.emit()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn shipped_toy_config_parses() {
        let text = include_str!("../../../configs/toy.cfg");
        let cfg = ExperimentConfig::parse(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.spec().unwrap(), MixtureSpec::four_peak_toy());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "[train]\nsteps = 10\n\nsteps = 20\n";
        match ExperimentConfig::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("[train]\nlearning_rate = fast\n") {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("fast"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::parse("steps = 1\n"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("# c\n[plots]\n"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("[mixture]\ncomponent = 1 0 0 1 0\n"),
            Err(Error::Config { line: 2, .. })
        ));
    }

    #[test]
    fn components_replace_defaults() {
        let cfg = ExperimentConfig::parse("[mixture]\ncomponent = 1.0 2 3 0.5 0 0\n").unwrap();
        assert_eq!(cfg.mixture.components.len(), 1);
        assert_eq!(cfg.mixture.components[0].mean, [2.0, 3.0]);
    }

    #[test]
    fn subflow_without_clustering_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&["cluster.enabled=false".into()]).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("SubmodeTable"), "{msg}");
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&["train.steps=7".into(), "sample.strategy=fixed:1".into()])
            .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.sample.strategy, SubmodeStrategy::Fixed(1));
        assert!(cfg.apply_overrides(&["train.nope=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["steps".into()]).is_err());
    }

    proptest! {
        #[test]
        fn emit_parse_round_trip(
            steps in 0usize..100_000,
            lr in 1e-6f64..1.0,
            w in 0.0f64..10.0,
            seed in any::<u64>(),
            times in prop::collection::vec(0.0f64..1.0, 1..5),
            cond in 0usize..3,
            fixed in 0usize..8,
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.train.steps = steps;
            cfg.train.learning_rate = lr;
            cfg.train.seed = seed;
            cfg.train.conditioning = [Conditioning::Uncond, Conditioning::Class, Conditioning::SubFlow][cond];
            cfg.sample.guidance_scale = w;
            cfg.sample.strategy = SubmodeStrategy::Fixed(fixed);
            cfg.metrics.times = times;
            prop_assert_eq!(ExperimentConfig::parse(&cfg.emit()).unwrap(), cfg);
        }
    }
}
