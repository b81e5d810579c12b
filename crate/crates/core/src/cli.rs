//! Experiment configuration, checkpoints, reports and the command
//! implementations behind the `bidpm` binary.
//!
//! Configs are TOML with dotted keys, e.g.
//!
//! ```toml
//! seed = 7
//! data.paired_fraction = 0.1
//! field.hidden = 64
//! train.method = "bidpm"
//! train.steps = 2000
//! grid.steps = 2
//! sweep.paired_fraction = [0.01, 0.1, 0.5, 1.0]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{derive_seed, ComponentMap, Normalizer, PointTable, Side, ToyDataset, ToySpec};
use crate::eval::{evaluate, EvalReport};
use crate::field::{FieldInit, FieldSpec, Mlp, Time, TimeEmbedding, Velocity};
use crate::flow::{synthesize, Direction, TimeGrid};
use crate::losses::KernelSpec;
use crate::numcore::{Ops, Tensor};
use crate::train::{AdamConfig, AdamState, Method, TrainConfig, TrainRecord, Trainer};
use crate::{Error, Result};

/// Environment variable read by the binary for log verbosity.
pub const LOG_ENV: &str = "BIDPM_LOG";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub spec: ToySpec,
    pub test_per_component: usize,
    /// Train on coordinates mapped into `[-1, 1]`.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Euler steps for synthesis; `None` uses the training grid size.
    pub steps: Option<usize>,
    pub use_ema: bool,
}

/// Lists swept by `sweep`; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepSpec {
    pub grid_steps: Vec<usize>,
    pub paired_fraction: Vec<f64>,
    pub method: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub field: FieldSpec,
    pub final_scale: f64,
    pub train: TrainConfig,
    /// Write `checkpoint-<step>.bin` every this many steps; 0 disables.
    pub checkpoint_interval: u64,
    pub eval: EvalOptions,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig {
            seed: 0,
            out: None,
            data: DataConfig {
                spec: ToySpec::default(),
                test_per_component: 64,
                normalize: false,
            },
            field: FieldSpec::default(),
            final_scale: 1e-2,
            train: TrainConfig::default(),
            checkpoint_interval: 0,
            eval: EvalOptions {
                steps: None,
                use_ema: true,
            },
            sweep: SweepSpec::default(),
        };
        c.set_seed(0);
        c
    }
}

/// Walks a flattened TOML table, collecting one message per bad field.
struct Fields {
    map: BTreeMap<String, toml::Value>,
    errors: Vec<String>,
}

impl Fields {
    fn new(table: toml::Table) -> Self {
        fn flatten(prefix: &str, t: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
            for (k, v) in t {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                match v {
                    toml::Value::Table(inner) => flatten(&key, inner, out),
                    other => {
                        out.insert(key, other);
                    }
                }
            }
        }
        let mut map = BTreeMap::new();
        flatten("", table, &mut map);
        Fields {
            map,
            errors: Vec::new(),
        }
    }

    fn take<T>(&mut self, key: &str, default: T, conv: impl Fn(&toml::Value) -> Option<T>, what: &str) -> T {
        match self.map.remove(key) {
            None => default,
            Some(v) => conv(&v).unwrap_or_else(|| {
                self.errors.push(format!("{key}: expected {what}, got {v}"));
                default
            }),
        }
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        self.take(key, default, as_f64, "a number")
    }

    fn uint(&mut self, key: &str, default: u64) -> u64 {
        self.take(
            key,
            default,
            |v| v.as_integer().and_then(|i| u64::try_from(i).ok()),
            "a non-negative integer",
        )
    }

    fn usize(&mut self, key: &str, default: usize) -> usize {
        self.uint(key, default as u64) as usize
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        self.take(key, default, toml::Value::as_bool, "true or false")
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        self.take(key, default.to_string(), |v| v.as_str().map(String::from), "a string")
    }

    fn floats(&mut self, key: &str, default: Vec<f64>) -> Vec<f64> {
        self.take(
            key,
            default,
            |v| v.as_array()?.iter().map(as_f64).collect(),
            "a list of numbers",
        )
    }

    fn uints(&mut self, key: &str, default: Vec<usize>) -> Vec<usize> {
        self.take(
            key,
            default,
            |v| {
                v.as_array()?
                    .iter()
                    .map(|x| x.as_integer().and_then(|i| usize::try_from(i).ok()))
                    .collect()
            },
            "a list of non-negative integers",
        )
    }

    fn strings(&mut self, key: &str, default: Vec<String>) -> Vec<String> {
        self.take(
            key,
            default,
            |v| v.as_array()?.iter().map(|x| x.as_str().map(String::from)).collect(),
            "a list of strings",
        )
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }
}

fn as_f64(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn render_list<T: std::fmt::Display>(v: &[T]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

fn float_lit(x: f64) -> String {
    format!("{x:?}")
}

impl ExperimentConfig {
    /// Seeds the dataset with `seed` and the training stream with a value
    /// derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.spec.seed = seed;
        self.train.seed = derive_seed(seed, &[2]);
    }

    pub fn field_init(&self) -> FieldInit {
        FieldInit {
            seed: derive_seed(self.seed, &[1]),
            final_scale: self.final_scale,
        }
    }

    pub fn eval_steps(&self) -> usize {
        self.eval.steps.unwrap_or(self.train.grid.steps())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut f = Fields::new(table);
        let d = ExperimentConfig::default();
        let mut problems = Vec::new();

        let seed = f.uint("seed", 0);
        let out = f.map.remove("out").and_then(|v| v.as_str().map(PathBuf::from));

        let ds = &d.data.spec;
        let components = f.usize("data.components", ds.components);
        let map_text = f.string("data.map", "rotate:1");
        let map = ComponentMap::parse(&map_text, components).unwrap_or_else(|e| {
            problems.push(format!("data.map: {e}"));
            ComponentMap::identity(components)
        });
        let spec = ToySpec {
            components,
            source_radius: f.float("data.source_radius", ds.source_radius),
            source_std: f.float("data.source_std", ds.source_std),
            target_radius: f.float("data.target_radius", ds.target_radius),
            target_std: f.float("data.target_std", ds.target_std),
            map,
            paired_fraction: f.float("data.paired_fraction", ds.paired_fraction),
            per_component: f.usize("data.per_component", ds.per_component),
            seed,
            coupled_noise: f.boolean("data.coupled_noise", ds.coupled_noise),
        };
        let data = DataConfig {
            spec,
            test_per_component: f.usize("data.test_per_component", d.data.test_per_component),
            normalize: f.boolean("data.normalize", false),
        };

        let emb_text = f.string("field.embedding", &d.field.embedding.to_string());
        let embedding = TimeEmbedding::parse(&emb_text).unwrap_or_else(|| {
            problems.push(format!(
                "field.embedding: expected \"raw\" or \"fourier:K\", got {emb_text:?}"
            ));
            d.field.embedding
        });
        let field = FieldSpec {
            dim: 2,
            hidden: f.usize("field.hidden", d.field.hidden),
            hidden_layers: f.usize("field.hidden_layers", d.field.hidden_layers),
            embedding,
        };
        let final_scale = f.float("field.final_scale", d.final_scale);

        let t = &d.train;
        let method_name = f.string("train.method", "bidpm");
        let sigma = f.float("train.sigma", 0.1);
        let method = Method::parse(&method_name, sigma).unwrap_or_else(|e| {
            problems.push(format!("train.method: {e}"));
            Method::BiDpm
        });
        let clip = f.float("train.grad_clip", 10.0);
        let mut train = TrainConfig {
            adam: AdamConfig {
                lr: f.float("train.lr", t.adam.lr),
                beta1: f.float("train.beta1", t.adam.beta1),
                beta2: f.float("train.beta2", t.adam.beta2),
                eps: f.float("train.eps", t.adam.eps),
            },
            steps: f.uint("train.steps", t.steps),
            batch_size: f.usize("train.batch_size", t.batch_size),
            lambda_u: f.float("train.lambda_u", t.lambda_u),
            ema_decay: f.float("train.ema_decay", t.ema_decay),
            grid: t.grid.clone(),
            seed: 0,
            method,
            kernel: t.kernel.clone(),
            metric: t.metric,
            grad_clip: (clip != 0.0).then_some(clip),
            log_interval: f.uint("train.log_interval", t.log_interval),
        };
        let checkpoint_interval = f.uint("train.checkpoint_interval", 0);

        let bandwidths = f.floats("kernel.bandwidths", t.kernel.bandwidths().to_vec());
        match KernelSpec::rbf(bandwidths) {
            Ok(k) => train.kernel = k,
            Err(e) => problems.push(format!("kernel.bandwidths: {e}")),
        }

        let grid = if f.has("grid.points") || f.has("grid.weights") {
            if f.has("grid.steps") {
                problems.push("grid.steps: give either grid.steps or grid.points/grid.weights".into());
            }
            let points = f.floats("grid.points", Vec::new());
            let weights = f.floats("grid.weights", Vec::new());
            TimeGrid::new(points, weights)
        } else {
            let n = f.usize("grid.steps", 2);
            let ew = f.float("grid.endpoint_weight", 1.0);
            let iw = f.float("grid.interior_weight", 0.5);
            TimeGrid::uniform_weighted(n, ew, iw)
        };
        match grid {
            Ok(g) => train.grid = g,
            Err(e) => problems.push(format!("grid: {e}")),
        }

        let eval_steps = f.uint("eval.steps", 0);
        let eval = EvalOptions {
            steps: (eval_steps > 0).then_some(eval_steps as usize),
            use_ema: f.boolean("eval.use_ema", true),
        };
        let sweep = SweepSpec {
            grid_steps: f.uints("sweep.grid_steps", Vec::new()),
            paired_fraction: f.floats("sweep.paired_fraction", Vec::new()),
            method: f.strings("sweep.method", Vec::new()),
        };

        for k in f.map.keys() {
            problems.push(format!("{k}: unknown key"));
        }
        problems.extend(std::mem::take(&mut f.errors));

        let mut cfg = ExperimentConfig {
            seed,
            out,
            data,
            field,
            final_scale,
            train,
            checkpoint_interval,
            eval,
            sweep,
        };
        cfg.set_seed(seed);
        problems.extend(cfg.problems());
        problems.sort();
        problems.dedup();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Semantic checks across modules.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.seed > i64::MAX as u64 {
            p.push(format!("seed: must be <= {}, got {}", i64::MAX, self.seed));
        }
        let s = &self.data.spec;
        if s.components == 0 {
            p.push("data.components: must be >= 1".into());
        }
        for (k, v) in [
            ("data.source_radius", s.source_radius),
            ("data.target_radius", s.target_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{k}: must be > 0, got {v}"));
            }
        }
        for (k, v) in [("data.source_std", s.source_std), ("data.target_std", s.target_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{k}: must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&s.paired_fraction) {
            p.push(format!(
                "data.paired_fraction: must be in [0, 1], got {}",
                s.paired_fraction
            ));
        }
        if s.per_component == 0 {
            p.push("data.per_component: must be >= 1".into());
        }
        if self.data.test_per_component == 0 {
            p.push("data.test_per_component: must be >= 1".into());
        }
        if self.field.hidden == 0 {
            p.push("field.hidden: must be >= 1".into());
        }
        if let TimeEmbedding::Fourier(0) = self.field.embedding {
            p.push("field.embedding: fourier needs K >= 1".into());
        }
        if !(self.final_scale > 0.0 && self.final_scale.is_finite()) {
            p.push(format!("field.final_scale: must be > 0, got {}", self.final_scale));
        }
        p.extend(self.train.problems());
        for v in &self.sweep.paired_fraction {
            if !(0.0..=1.0).contains(v) {
                p.push(format!("sweep.paired_fraction: {v} outside [0, 1]"));
            }
        }
        if self.sweep.grid_steps.contains(&0) {
            p.push("sweep.grid_steps: entries must be >= 1".into());
        }
        for m in &self.sweep.method {
            if Method::parse(m, 0.0).is_err() {
                p.push(format!("sweep.method: unknown method {m:?}"));
            }
        }
        p
    }

    /// Canonical flat rendering; `parse(render())` reproduces the config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        let d = &self.data.spec;
        kv("seed", self.seed.to_string());
        if let Some(out) = &self.out {
            kv("out", format!("{:?}", out.display().to_string()));
        }
        kv("data.components", d.components.to_string());
        kv("data.source_radius", float_lit(d.source_radius));
        kv("data.source_std", float_lit(d.source_std));
        kv("data.target_radius", float_lit(d.target_radius));
        kv("data.target_std", float_lit(d.target_std));
        kv("data.map", format!("{:?}", d.map.render()));
        kv("data.paired_fraction", float_lit(d.paired_fraction));
        kv("data.per_component", d.per_component.to_string());
        kv("data.test_per_component", self.data.test_per_component.to_string());
        kv("data.coupled_noise", d.coupled_noise.to_string());
        kv("data.normalize", self.data.normalize.to_string());
        kv("field.hidden", self.field.hidden.to_string());
        kv("field.hidden_layers", self.field.hidden_layers.to_string());
        kv("field.embedding", format!("{:?}", self.field.embedding.to_string()));
        kv("field.final_scale", float_lit(self.final_scale));
        let t = &self.train;
        kv("train.method", format!("{:?}", t.method.name()));
        kv("train.sigma", float_lit(t.method.sigma()));
        kv("train.lr", float_lit(t.adam.lr));
        kv("train.beta1", float_lit(t.adam.beta1));
        kv("train.beta2", float_lit(t.adam.beta2));
        kv("train.eps", float_lit(t.adam.eps));
        kv("train.steps", t.steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lambda_u", float_lit(t.lambda_u));
        kv("train.ema_decay", float_lit(t.ema_decay));
        kv("train.grad_clip", float_lit(t.grad_clip.unwrap_or(0.0)));
        kv("train.log_interval", t.log_interval.to_string());
        kv("train.checkpoint_interval", self.checkpoint_interval.to_string());
        kv(
            "kernel.bandwidths",
            render_list(&t.kernel.bandwidths().iter().map(|v| float_lit(*v)).collect::<Vec<_>>()),
        );
        kv(
            "grid.points",
            render_list(&t.grid.points().iter().map(|v| float_lit(*v)).collect::<Vec<_>>()),
        );
        kv(
            "grid.weights",
            render_list(&t.grid.weights().iter().map(|v| float_lit(*v)).collect::<Vec<_>>()),
        );
        kv("eval.steps", self.eval.steps.unwrap_or(0).to_string());
        kv("eval.use_ema", self.eval.use_ema.to_string());
        if !self.sweep.grid_steps.is_empty() {
            kv("sweep.grid_steps", render_list(&self.sweep.grid_steps));
        }
        if !self.sweep.paired_fraction.is_empty() {
            kv(
                "sweep.paired_fraction",
                render_list(
                    &self
                        .sweep
                        .paired_fraction
                        .iter()
                        .map(|v| float_lit(*v))
                        .collect::<Vec<_>>(),
                ),
            );
        }
        if !self.sweep.method.is_empty() {
            kv(
                "sweep.method",
                render_list(&self.sweep.method.iter().map(|m| format!("{m:?}")).collect::<Vec<_>>()),
            );
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Training set, normalized when enabled, with its normalizer.
    pub fn build_train_set(&self) -> Result<(ToyDataset, Option<Normalizer>)> {
        let d = self.data.spec.build()?;
        if self.data.normalize {
            let (n, norm) = d.normalized();
            Ok((n, Some(norm)))
        } else {
            Ok((d, None))
        }
    }

    /// Raw-coordinate held-out set.
    pub fn build_test_set(&self) -> Result<ToyDataset> {
        self.data.spec.test_split(self.data.test_per_component)
    }
}

/// Velocity field expressed in raw coordinates for a network trained on
/// normalized ones: with `y = a∘x + b`, `u_x(x, t) = u_y(y, t) / a`.
#[derive(Debug, Clone)]
pub struct Model {
    pub field: Mlp,
    pub normalizer: Option<Normalizer>,
}

impl Velocity for Model {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity<O: Ops>(&self, ops: &mut O, x: &O::V, t: Time<'_>) -> Result<O::V> {
        let Some(n) = &self.normalizer else {
            return self.field.velocity(ops, x, t);
        };
        let d = self.dim();
        let mut scale = Tensor::zeros(&[d, d]);
        let mut unscale = Tensor::zeros(&[d, d]);
        let mut shift = Vec::with_capacity(d);
        for j in 0..d {
            let a = 2.0 / (n.hi[j] - n.lo[j]);
            scale.data_mut()[j * d + j] = a;
            unscale.data_mut()[j * d + j] = 1.0 / a;
            shift.push(-1.0 - a * n.lo[j]);
        }
        let sv = ops.constant(scale);
        let bv = ops.constant(Tensor::matrix(1, d, shift)?);
        let y = ops.matmul(x, &sv)?;
        let y = ops.add_row(&y, &bv)?;
        let u = self.field.velocity(ops, &y, t)?;
        let uv = ops.constant(unscale);
        Ok(ops.matmul(&u, &uv)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIDPMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or synthesize.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Stored verbatim so a save after load is byte-identical.
    pub config_text: String,
    pub config: ExperimentConfig,
    pub step: u64,
    /// Seed of the counter-based training stream; with `step` this is the
    /// full RNG state.
    pub rng_seed: u64,
    pub live: Mlp,
    pub ema: Mlp,
    pub optimizer: AdamState,
    pub normalizer: Option<Normalizer>,
}

/// Named `f64` array in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_trainer(config: &ExperimentConfig, trainer: &Trainer, normalizer: Option<Normalizer>) -> Self {
        Checkpoint {
            config_text: config.render(),
            config: config.clone(),
            step: trainer.step_count(),
            rng_seed: trainer.config().seed,
            live: trainer.live().clone(),
            ema: trainer.ema().clone(),
            optimizer: trainer.optimizer().clone(),
            normalizer,
        }
    }

    pub fn model(&self, use_ema: bool) -> Model {
        Model {
            field: if use_ema { self.ema.clone() } else { self.live.clone() },
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn arrays(&self) -> Vec<NamedArray> {
        let names = self.live.param_names();
        let mut out = Vec::new();
        let mut push = |prefix: &str, ts: &[Tensor]| {
            for (n, t) in names.iter().zip(ts) {
                out.push(NamedArray {
                    name: format!("{prefix}/{n}"),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                });
            }
        };
        push("live", self.live.params());
        push("ema", self.ema.params());
        push("adam.m", &self.optimizer.m);
        push("adam.v", &self.optimizer.v);
        if let Some(n) = &self.normalizer {
            for (name, v) in [("normalizer/lo", &n.lo), ("normalizer/hi", &n.hi)] {
                out.push(NamedArray {
                    name: name.into(),
                    shape: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config_text.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.rng_seed.to_le_bytes());
        b.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let arrays = self.arrays();
        b.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            b.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            b.extend_from_slice(a.name.as_bytes());
            b.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &a.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("config is not UTF-8"))?;
        let config = ExperimentConfig::parse(&config_text)?;
        let step = r.u64()?;
        let rng_seed = r.u64()?;
        let opt_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.bad("array name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.bad("array too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes"));
        }
        let names = Mlp::init(config.field.clone(), FieldInit::new(0))?.param_names();
        let mut group = |prefix: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|n| {
                    arrays.remove(&format!("{prefix}/{n}")).ok_or_else(|| Error::Format {
                        what: "checkpoint",
                        detail: format!("missing array {prefix}/{n}"),
                    })
                })
                .collect()
        };
        let live = Mlp::from_params(config.field.clone(), group("live")?)?;
        let ema = Mlp::from_params(config.field.clone(), group("ema")?)?;
        let optimizer = AdamState {
            m: group("adam.m")?,
            v: group("adam.v")?,
            step: opt_step,
        };
        let normalizer = match (arrays.remove("normalizer/lo"), arrays.remove("normalizer/hi")) {
            (Some(lo), Some(hi)) => Some(Normalizer {
                lo: lo.into_data(),
                hi: hi.into_data(),
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: "incomplete normalizer".into(),
                })
            }
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unexpected array {extra}"),
            });
        }
        Ok(Checkpoint {
            config_text,
            config,
            step,
            rng_seed,
            live,
            ema,
            optimizer,
            normalizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Human-readable listing for `inspect-checkpoint`.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        writeln!(s, "format version {CHECKPOINT_VERSION}").unwrap();
        writeln!(
            s,
            "step {}  rng seed {}  adam step {}",
            self.step, self.rng_seed, self.optimizer.step
        )
        .unwrap();
        writeln!(
            s,
            "method {}  field {}x{} hidden, embedding {}  ({} scalars)",
            self.config.train.method,
            self.config.field.hidden_layers,
            self.config.field.hidden,
            self.config.field.embedding,
            self.live.num_scalars()
        )
        .unwrap();
        for a in self.arrays() {
            let norm = a.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            writeln!(s, "  {:<24} {:?}  l2 {:.6e}", a.name, a.shape, norm).unwrap();
        }
        writeln!(s, "config:").unwrap();
        for line in self.config_text.lines() {
            writeln!(s, "  {line}").unwrap();
        }
        s
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn bad(&self, detail: &str) -> Error {
        Error::Format {
            what: "checkpoint",
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.bad("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Invalid(format!(
                "output directory {} is in use (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub const METRICS_HEADER: &str = "step,total,paired,unpaired,grad_norm";
pub const TIMING_HEADER: &str = "step,wall_ms";

pub fn metrics_row(r: &TrainRecord) -> String {
    format!(
        "{},{},{},{},{}",
        r.step, r.loss.total, r.loss.paired, r.loss.unpaired, r.grad_norm
    )
}

/// SVG scatter of source, target and synthesized points, with a line from
/// each paired source row to its partner.
pub fn scatter_svg(
    source: &Tensor,
    target: &Tensor,
    synthesized: &Tensor,
    pairs: &[(usize, usize)],
    means: &[[f64; 2]],
) -> String {
    let all = [source, target, synthesized];
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for t in all {
        for i in 0..t.rows() {
            let r = t.row(i);
            lo_x = lo_x.min(r[0]);
            hi_x = hi_x.max(r[0]);
            lo_y = lo_y.min(r[1]);
            hi_y = hi_y.max(r[1]);
        }
    }
    if !lo_x.is_finite() {
        (lo_x, hi_x, lo_y, hi_y) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9) * 1.1;
    let (cx, cy) = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
    let size = 640.0;
    let px = |x: f64| (x - cx) / span * size + size / 2.0;
    let py = |y: f64| size / 2.0 - (y - cy) / span * size;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r##"<g stroke="#2ca02c" stroke-width="0.5" stroke-opacity="0.5">"##).unwrap();
    for &(i, j) in pairs {
        let (a, b) = (source.row(i), target.row(j));
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
            px(a[0]),
            py(a[1]),
            px(b[0]),
            py(b[1])
        )
        .unwrap();
    }
    writeln!(s, "</g>").unwrap();
    for (t, class, color) in [
        (source, "source", "#1f77b4"),
        (target, "target", "#ff7f0e"),
        (synthesized, "synthesized", "#d62728"),
    ] {
        writeln!(s, r#"<g class="{class}" fill="{color}" fill-opacity="0.6">"#).unwrap();
        for i in 0..t.rows() {
            let r = t.row(i);
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, px(r[0]), py(r[1])).unwrap();
        }
        writeln!(s, "</g>").unwrap();
    }
    writeln!(s, r#"<g class="means" fill="black">"#).unwrap();
    for m in means {
        let (x, y) = (px(m[0]), py(m[1]));
        let pts: Vec<String> = (0..10)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 5.0 - std::f64::consts::FRAC_PI_2;
                let rad = if k % 2 == 0 { 7.0 } else { 3.0 };
                format!("{:.2},{:.2}", x + rad * a.cos(), y + rad * a.sin())
            })
            .collect();
        writeln!(s, r#"<polygon points="{}"/>"#, pts.join(" ")).unwrap();
    }
    writeln!(s, "</g>\n</svg>").unwrap();
    s
}

/// What `cmd_train` produced.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

fn resolve_out(config: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| config.out.clone())
        .ok_or_else(|| Error::Config(vec!["out: no output directory (set `out` or pass --out)".into()]))
}

/// Trains from a parsed config into `out`. Writes `config.toml`,
/// `train_points.csv`, `test_points.csv`, `metrics.csv`, `timing.csv`,
/// periodic `checkpoint-<step>.bin` and the final `checkpoint.bin`.
pub fn run_training(config: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    let _lock = OutputLock::acquire(out)?;
    fs::write(out.join("config.toml"), config.render())?;
    let (train_set, normalizer) = config.build_train_set()?;
    config
        .data
        .spec
        .build()?
        .to_table()
        .write(&out.join("train_points.csv"))?;
    config
        .build_test_set()?
        .to_table()
        .write(&out.join("test_points.csv"))?;

    let field = Mlp::init(config.field.clone(), config.field_init())?;
    let mut trainer = Trainer::new(field, config.train.clone())?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.csv"))?);
    let mut timing = BufWriter::new(File::create(out.join("timing.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    writeln!(timing, "{TIMING_HEADER}")?;
    let checkpoint_path = out.join("checkpoint.bin");
    let mut final_loss = None;
    log::info!(
        "training {} for {} steps into {}",
        config.train.method,
        config.train.steps,
        out.display()
    );
    while trainer.step_count() < config.train.steps {
        let r = match trainer.step(&train_set) {
            Ok(r) => r,
            Err(e) => {
                Checkpoint::from_trainer(config, &trainer, normalizer.clone()).save(&checkpoint_path)?;
                log::error!("{e}; saved the last good state to {}", checkpoint_path.display());
                return Err(e);
            }
        };
        let done = trainer.step_count();
        if r.step % config.train.log_interval == 0 || done == config.train.steps {
            writeln!(metrics, "{}", metrics_row(&r))?;
            writeln!(timing, "{},{}", r.step, r.wall_ms)?;
            log::debug!("step {} loss {:.6e}", r.step, r.loss.total);
        }
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.train.steps {
            Checkpoint::from_trainer(config, &trainer, normalizer.clone())
                .save(&out.join(format!("checkpoint-{done}.bin")))?;
        }
        final_loss = Some(r.loss.total);
    }
    metrics.flush()?;
    timing.flush()?;
    Checkpoint::from_trainer(config, &trainer, normalizer).save(&checkpoint_path)?;
    log::info!("wrote {}", checkpoint_path.display());
    Ok(TrainSummary {
        out: out.to_path_buf(),
        checkpoint: checkpoint_path,
        steps: trainer.step_count(),
        final_loss,
    })
}

/// `train --config <path> [--out <dir>] [--seed-override <n>]`
pub fn cmd_train(config_path: &Path, out: Option<&Path>, seed_override: Option<u64>) -> Result<TrainSummary> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed_override {
        config.set_seed(s);
    }
    let out = resolve_out(&config, out)?;
    run_training(&config, &out)
}

/// Runs every row of `table` through the field. Synthesized rows move to
/// the other side and keep their label and partner index.
pub fn synthesize_table(model: &Model, table: &PointTable, steps: usize, direction: Direction) -> Result<PointTable> {
    let side = match direction {
        Direction::Forward => Side::Source,
        Direction::Backward => Side::Target,
    };
    let dim = table.dim()?;
    if dim != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: vec![table.rows.len(), dim],
        });
    }
    let rows: Vec<&crate::data::TableRow> = table.rows.iter().filter(|r| r.side == side).collect();
    let x = Tensor::matrix(
        rows.len(),
        dim,
        rows.iter().flat_map(|r| r.coords.iter().copied()).collect(),
    )?;
    let grid = TimeGrid::uniform(steps)?;
    let y = if x.rows() == 0 {
        x.clone()
    } else {
        synthesize(model, &x, &grid, direction)?
    };
    Ok(PointTable {
        meta: table.meta.clone(),
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, r)| crate::data::TableRow {
                side: side.other(),
                label: r.label,
                partner: r.partner,
                coords: y.row(i).to_vec(),
            })
            .collect(),
    })
}

/// `synthesize --checkpoint <ckpt> --input <table> --out <table>`
pub fn cmd_synthesize(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    direction: Direction,
    use_ema: bool,
    steps: Option<usize>,
) -> Result<PointTable> {
    let ck = Checkpoint::load(checkpoint)?;
    let table = PointTable::read(input)?;
    let steps = steps.unwrap_or(ck.config.eval_steps());
    let result = synthesize_table(&ck.model(use_ema), &table, steps, direction)?;
    result.write(out)?;
    Ok(result)
}

/// Evaluates `model` on the paired rows of `test` and writes `report.csv`,
/// `summary.txt` and `scatter.svg` into `out`.
pub fn write_evaluation(
    model: &Model,
    test: &ToyDataset,
    steps: usize,
    method: &str,
    rho: f64,
    out: &Path,
) -> Result<EvalReport> {
    fs::create_dir_all(out)?;
    let report = evaluate(model, test, steps, method, rho)?;
    fs::write(
        out.join("report.csv"),
        EvalReport::to_csv(std::slice::from_ref(&report))?,
    )?;
    fs::write(out.join("summary.txt"), report.summary() + "\n")?;
    let synth = synthesize(model, &test.source, &TimeGrid::uniform(steps)?, Direction::Forward)?;
    let svg = scatter_svg(
        &test.source,
        &test.target,
        &synth,
        &test.pairing.pairs,
        &test.target_ring.means(),
    );
    fs::write(out.join("scatter.svg"), svg)?;
    Ok(report)
}

/// `eval --checkpoint <ckpt> [--input <table>] --out <dir>`. Without an
/// input table the held-out split described by the checkpoint's config is
/// regenerated.
pub fn cmd_eval(
    checkpoint: &Path,
    input: Option<&Path>,
    out: &Path,
    use_ema: bool,
    steps: Option<usize>,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let test = match input {
        Some(p) => ToyDataset::from_table(&PointTable::read(p)?)?,
        None => ck.config.build_test_set()?,
    };
    let _lock = OutputLock::acquire(out)?;
    let steps = steps.unwrap_or(ck.config.eval_steps());
    let report = write_evaluation(
        &ck.model(use_ema),
        &test,
        steps,
        ck.config.train.method.name(),
        ck.config.data.spec.paired_fraction,
        out,
    )?;
    log::info!("wrote {}", out.join("report.csv").display());
    Ok(report)
}

/// One sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub index: usize,
    pub grid_steps: usize,
    pub paired_fraction: f64,
    pub method: String,
    pub seed: u64,
}

impl SweepRun {
    pub fn label(&self) -> String {
        format!("run-{:03}", self.index)
    }
}

/// Cartesian product of the sweep lists. The seed is derived from the base
/// seed and the `(N, ρ)` cell, so methods compared inside a cell share data,
/// initialization and batch order.
pub fn sweep_runs(config: &ExperimentConfig) -> Vec<SweepRun> {
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let steps = or(&config.sweep.grid_steps, config.train.grid.steps());
    let rhos = if config.sweep.paired_fraction.is_empty() {
        vec![config.data.spec.paired_fraction]
    } else {
        config.sweep.paired_fraction.clone()
    };
    let methods = if config.sweep.method.is_empty() {
        vec![config.train.method.name().to_string()]
    } else {
        config.sweep.method.clone()
    };
    let mut runs = Vec::new();
    for &n in &steps {
        for &rho in &rhos {
            for m in &methods {
                let seed = derive_seed(config.seed, &[n as u64, rho.to_bits()]) >> 1;
                runs.push(SweepRun {
                    index: runs.len(),
                    grid_steps: n,
                    paired_fraction: rho,
                    method: m.clone(),
                    seed,
                });
            }
        }
    }
    runs
}

impl ExperimentConfig {
    /// Config for one sweep cell: uniform grid with the base endpoint and
    /// interior weights, evaluation with `N` steps unless fixed.
    pub fn for_run(&self, run: &SweepRun) -> Result<Self> {
        let mut c = self.clone();
        c.sweep = SweepSpec::default();
        c.set_seed(run.seed);
        c.data.spec.paired_fraction = run.paired_fraction;
        let w = self.train.grid.weights();
        let endpoint = w[0];
        let interior = if w.len() > 2 { w[1] } else { 0.5 };
        c.train.grid = TimeGrid::uniform_weighted(run.grid_steps, endpoint, interior)?;
        c.train.method = Method::parse(&run.method, self.train.method.sigma())?;
        Ok(c)
    }
}

pub const SWEEP_PREFIX: [&str; 4] = ["run", "seed", "status", "error"];

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<(SweepRun, Result<EvalReport, String>)>,
    /// Adjacent `ρ` pairs (same `N` and method) where the transport error
    /// grew by more than 10%.
    pub trend_violations: Vec<String>,
}

/// Trains and evaluates one sweep cell in `out/<label>`.
pub fn run_cell(config: &ExperimentConfig, run: &SweepRun, out: &Path) -> Result<EvalReport> {
    let c = config.for_run(run)?;
    let dir = out.join(run.label());
    let summary = run_training(&c, &dir)?;
    let ck = Checkpoint::load(&summary.checkpoint)?;
    write_evaluation(
        &ck.model(c.eval.use_ema),
        &c.build_test_set()?,
        c.eval_steps(),
        &run.method,
        run.paired_fraction,
        &dir.join("eval"),
    )
}

/// `sweep --config <path> [--out <dir>]`. Cells run in parallel; a failed
/// cell is recorded and the rest continue. Writes `sweep.csv`.
pub fn cmd_sweep(config_path: &Path, out: Option<&Path>, seed_override: Option<u64>) -> Result<SweepOutcome> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed_override {
        config.set_seed(s);
    }
    let out = resolve_out(&config, out)?;
    let _lock = OutputLock::acquire(&out)?;
    let runs = sweep_runs(&config);
    log::info!("sweep of {} runs into {}", runs.len(), out.display());
    let results: Vec<(SweepRun, Result<EvalReport, String>)> = runs
        .into_par_iter()
        .map(|run| {
            let r = run_cell(&config, &run, &out).map_err(|e| e.to_string());
            if let Err(e) = &r {
                log::warn!("{} failed: {e}", run.label());
            }
            (run, r)
        })
        .collect();

    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(|e| Error::Invalid(e.to_string()))?;
    let header: Vec<&str> = SWEEP_PREFIX
        .iter()
        .chain(crate::eval::REPORT_HEADER.iter())
        .copied()
        .collect();
    w.write_record(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    for (run, r) in &results {
        let mut rec = vec![run.label(), run.seed.to_string()];
        match r {
            Ok(rep) => {
                rec.push("ok".into());
                rec.push(String::new());
                rec.extend(rep.csv_record());
            }
            Err(e) => {
                rec.push("failed".into());
                rec.push(e.clone());
                rec.push(run.method.clone());
                rec.push(run.grid_steps.to_string());
                rec.push(run.paired_fraction.to_string());
                rec.extend(std::iter::repeat_n(String::new(), crate::eval::REPORT_HEADER.len() - 3));
            }
        }
        w.write_record(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;

    let trend_violations = rho_trend_violations(&results, 0.1);
    for v in &trend_violations {
        log::warn!("paired-fraction trend: {v}");
    }
    Ok(SweepOutcome {
        runs: results,
        trend_violations,
    })
}

/// Adjacent increasing-`ρ` pairs within each `(N, method)` group where the
/// transport error, averaged over both directions, rises by more than
/// `slack` (relative).
pub fn rho_trend_violations(results: &[(SweepRun, Result<EvalReport, String>)], slack: f64) -> Vec<String> {
    let mut groups: BTreeMap<(usize, String), Vec<(f64, f64)>> = BTreeMap::new();
    for (run, r) in results {
        if let Ok(rep) = r {
            groups
                .entry((run.grid_steps, run.method.clone()))
                .or_default()
                .push((run.paired_fraction, 0.5 * (rep.forward.mean + rep.backward.mean)));
        }
    }
    let mut out = Vec::new();
    for ((n, m), mut v) in groups {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in v.windows(2) {
            if w[1].1 > w[0].1 * (1.0 + slack) {
                out.push(format!(
                    "{m} N={n}: error {:.5} at rho={} exceeds {:.5} at rho={}",
                    w[1].1, w[1].0, w[0].1, w[0].0
                ));
            }
        }
    }
    out
}

/// `inspect-checkpoint --checkpoint <ckpt>`
pub fn cmd_inspect(checkpoint: &Path) -> Result<String> {
    Ok(Checkpoint::load(checkpoint)?.describe())
}
