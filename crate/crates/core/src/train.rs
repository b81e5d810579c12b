//! Adam, EMA and the training loops for Bi-DPM and the flow-matching
//! baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{derive_seed, minibatch, normals, uniforms, ToyDataset};
use crate::field::Mlp;
use crate::flow::TimeGrid;
use crate::losses::{bidpm_loss, cfm_loss, CfmVariant, KernelSpec, LossBreakdown, OtCost, PairwiseMetric};
use crate::numcore::{Ops, Tape, Tensor, TensorError};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    BiDpm,
    Rf,
    ICfm { sigma: f64 },
    OtCfm { sigma: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::BiDpm => "bidpm",
            Method::Rf => "rf",
            Method::ICfm { .. } => "icfm",
            Method::OtCfm { .. } => "otcfm",
        }
    }

    /// Parses a method name; `sigma` is used by the CFM variants.
    pub fn parse(name: &str, sigma: f64) -> Result<Self> {
        match name {
            "bidpm" => Ok(Method::BiDpm),
            "rf" => Ok(Method::Rf),
            "icfm" => Ok(Method::ICfm { sigma }),
            "otcfm" => Ok(Method::OtCfm { sigma }),
            other => Err(Error::Invalid(format!(
                "unknown method {other:?} (bidpm, rf, icfm, otcfm)"
            ))),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            Method::ICfm { sigma } | Method::OtCfm { sigma } => *sigma,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::parse(s, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lambda_u: f64,
    pub ema_decay: f64,
    pub grid: TimeGrid,
    pub seed: u64,
    pub method: Method,
    pub kernel: KernelSpec,
    pub metric: PairwiseMetric,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Keep every `log_interval`-th record (and the last one).
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            steps: 20_000,
            batch_size: 256,
            lambda_u: 0.2,
            ema_decay: 0.999,
            grid: TimeGrid::uniform(2).expect("valid grid"),
            seed: 0,
            method: Method::BiDpm,
            kernel: KernelSpec::default(),
            metric: PairwiseMetric::default(),
            grad_clip: Some(10.0),
            log_interval: 1,
        }
    }
}

impl TrainConfig {
    /// Every violated invariant, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            out.push(format!("train.lr: must be >= 0, got {}", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) {
            out.push(format!("train.beta1: must be in [0, 1), got {}", a.beta1));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            out.push(format!("train.beta2: must be in [0, 1), got {}", a.beta2));
        }
        if !(a.eps > 0.0) {
            out.push(format!("train.eps: must be > 0, got {}", a.eps));
        }
        if self.batch_size == 0 {
            out.push("train.batch_size: must be >= 1".into());
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            out.push(format!("train.lambda_u: must be >= 0, got {}", self.lambda_u));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            out.push(format!("train.ema_decay: must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.method.sigma() >= 0.0 && self.method.sigma().is_finite()) {
            out.push(format!("train.sigma: must be >= 0, got {}", self.method.sigma()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                out.push(format!("train.grad_clip: must be > 0, got {c}"));
            }
        }
        if self.log_interval == 0 {
            out.push("train.log_interval: must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam. Parameters are left untouched if any gradient is
/// non-finite or mis-shaped.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            }
            .into());
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { param: i });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mk, gk) in m.iter_mut().zip(g) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
        }
        let v = state.v[i].data_mut();
        for (vk, gk) in v.iter_mut().zip(g) {
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *pk -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·live`
pub fn ema_update(shadow: &mut [Tensor], live: &[Tensor], decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Invalid(format!("EMA decay must be in [0, 1), got {decay}")));
    }
    if shadow.len() != live.len() || shadow.iter().zip(live).any(|(s, l)| s.shape() != l.shape()) {
        return Err(Error::Invalid("EMA shadow does not mirror the live parameters".into()));
    }
    for (s, l) in shadow.iter_mut().zip(live) {
        for (a, b) in s.data_mut().iter_mut().zip(l.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub ot: Option<OtCost>,
}

/// Live network, its EMA shadow and the optimizer, advanced one step at a
/// time.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    live: Mlp,
    ema: Mlp,
    optimizer: AdamState,
}

impl Trainer {
    pub fn new(field: Mlp, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamState::new(field.params());
        Ok(Trainer {
            config,
            ema: field.clone(),
            live: field,
            optimizer,
        })
    }

    /// Resumes from saved parameters and optimizer state.
    pub fn resume(live: Mlp, ema: Mlp, optimizer: AdamState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ema.spec() != live.spec() || optimizer.m.len() != live.params().len() {
            return Err(Error::Invalid("resume state does not match the network".into()));
        }
        Ok(Trainer {
            config,
            live,
            ema,
            optimizer,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn live(&self) -> &Mlp {
        &self.live
    }

    pub fn ema(&self) -> &Mlp {
        &self.ema
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// Loss and gradients for the minibatch of the current step, without
    /// updating anything.
    pub fn loss_and_grads(&self, dataset: &ToyDataset) -> Result<(LossBreakdown, Vec<Tensor>, Option<OtCost>)> {
        let step = self.optimizer.step;
        let cfg = &self.config;
        let mb = minibatch(dataset, cfg.batch_size, cfg.seed, step)?;
        if step == 0 {
            for w in &mb.warnings {
                log::warn!("{w}");
            }
        }
        let mut tape = Tape::new();
        let (loss, breakdown, ot) = match cfg.method {
            Method::BiDpm => {
                let (loss, b) = bidpm_loss(
                    &mut tape,
                    &self.live,
                    &mb.batch,
                    &cfg.grid,
                    cfg.metric,
                    &cfg.kernel,
                    cfg.lambda_u,
                )?;
                (loss, b, None)
            }
            m => {
                // Paired rows stay paired; unpaired pools are zipped, which is
                // the independent coupling these baselines assume.
                let b = &mb.batch;
                let k = b.x_unpaired.rows().min(b.z_unpaired.rows());
                let idx: Vec<usize> = (0..k).collect();
                let x = b.x_paired.concat_rows(&b.x_unpaired.select_rows(&idx))?;
                let z = b.z_paired.concat_rows(&b.z_unpaired.select_rows(&idx))?;
                let rs = derive_seed(cfg.seed, &[step, 0xCF]);
                let t = uniforms(rs, 0, x.rows());
                let variant = match m {
                    Method::Rf => CfmVariant::Independent { sigma: 0.0 },
                    Method::ICfm { sigma } => CfmVariant::Independent { sigma },
                    Method::OtCfm { sigma } => CfmVariant::OptimalTransport { sigma },
                    Method::BiDpm => unreachable!(),
                };
                let noise = (variant.sigma() > 0.0).then(|| normals(rs, 1, x.rows(), x.cols()));
                let (loss, ot) = cfm_loss(&mut tape, &self.live, &x, &z, &t, variant, noise.as_ref())?;
                let total = tape.scalar_value(&loss);
                let b = LossBreakdown {
                    total,
                    paired: total,
                    unpaired: 0.0,
                    paired_terms: vec![total],
                    unpaired_terms: Vec::new(),
                };
                (loss, b, ot)
            }
        };
        let grads = tape.backward(loss, &self.live.param_ids())?;
        Ok((breakdown, grads.into_values().collect(), ot))
    }

    /// One minibatch, one Adam update, one EMA update. On error nothing is
    /// modified.
    pub fn step(&mut self, dataset: &ToyDataset) -> Result<TrainRecord> {
        let started = Instant::now();
        let step = self.optimizer.step;
        let (loss, mut grads, ot) = match self.loss_and_grads(dataset) {
            Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(Error::NonFiniteLoss { step }),
            other => other?,
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grad_norm = global_norm(&grads);
        if let Some(clip) = self.config.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                for g in grads.iter_mut() {
                    *g = g.scale(s);
                }
            }
        }
        let mut params = self.live.params().to_vec();
        let mut opt = self.optimizer.clone();
        adam_step(&mut params, &grads, &mut opt, &self.config.adam)?;
        let mut shadow = self.ema.params().to_vec();
        ema_update(&mut shadow, &params, self.config.ema_decay)?;
        self.live.params_mut().clone_from_slice(&params);
        self.ema.params_mut().clone_from_slice(&shadow);
        self.optimizer = opt;
        Ok(TrainRecord {
            step,
            loss,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ot,
        })
    }

    /// Runs until `config.steps` updates have been applied, passing every
    /// kept record to `on_record`.
    pub fn run(&mut self, dataset: &ToyDataset, mut on_record: impl FnMut(&TrainRecord)) -> Result<Vec<TrainRecord>> {
        let mut kept = Vec::new();
        while self.optimizer.step < self.config.steps {
            let r = self.step(dataset)?;
            let last = self.optimizer.step == self.config.steps;
            if r.step % self.config.log_interval == 0 || last {
                on_record(&r);
                kept.push(r);
            }
        }
        Ok(kept)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub live: Mlp,
    pub ema: Mlp,
    pub optimizer: AdamState,
    pub records: Vec<TrainRecord>,
}

/// Trains `field` on `dataset` for `config.steps` updates.
pub fn train(dataset: &ToyDataset, field: Mlp, config: TrainConfig) -> Result<TrainOutcome> {
    if field.spec().dim != dataset.dim() {
        return Err(Error::Dimension {
            expected: field.spec().dim,
            got: dataset.source.shape().to_vec(),
        });
    }
    let mut trainer = Trainer::new(field, config)?;
    let records = trainer.run(dataset, |r| {
        log::debug!("step {} loss {:.6e} grad {:.3e}", r.step, r.loss.total, r.grad_norm)
    })?;
    Ok(TrainOutcome {
        live: trainer.live,
        ema: trainer.ema,
        optimizer: trainer.optimizer,
        records,
    })
}
