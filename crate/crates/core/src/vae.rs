use std::str::FromStr;

use ctxmod_autodiff::{Tape, Tensor, TensorFile, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blackbox::{Arch, BlackBox};
use crate::data::ContextData;
use crate::decoder::ContextModule;
use crate::error::{CoreError, Result};
use crate::metrics::bpd;
use crate::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::sem::{ConceptSpec, InterventionSet};

pub const CHECKPOINT_FORMAT: &str = "ctxmod-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ContextModule,
    /// Black box only, observational data only.
    Ablation1,
    /// Black box only, pooled data.
    Ablation2,
    /// Context module attached, every batch treated as observational.
    Ablation3,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::ContextModule, Mode::Ablation1, Mode::Ablation2, Mode::Ablation3];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ContextModule => "context_module",
            Mode::Ablation1 => "ablation1",
            Mode::Ablation2 => "ablation2",
            Mode::Ablation3 => "ablation3",
        }
    }

    pub fn has_module(self) -> bool {
        matches!(self, Mode::ContextModule | Mode::Ablation3)
    }

    /// Whether the context label reaches the model.
    pub fn uses_context(self) -> bool {
        self == Mode::ContextModule
    }
}

impl FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub arch: Arch,
    pub spec: ConceptSpec,
    pub dim_e: usize,
    pub linear: bool,
    pub mode: Mode,
}

impl ModelConfig {
    pub fn quad(n: usize, mode: Mode) -> Self {
        Self {
            n,
            arch: Arch::default(),
            spec: ConceptSpec::default(),
            dim_e: 128,
            linear: false,
            mode,
        }
    }

    /// Latent width: the module's input, or the embedding itself without a module.
    pub fn dim_z(&self) -> usize {
        if self.mode.has_module() {
            self.spec.dim_z()
        } else {
            self.dim_e
        }
    }

    pub fn pixels(&self) -> usize {
        3 * self.n * self.n
    }

    /// Upper bound on trainable scalars, computed without allocating.
    pub fn param_bound(&self) -> u128 {
        let (p, dz, de) = (self.pixels() as u128, self.dim_z() as u128, self.dim_e as u128);
        let blackbox = match self.arch {
            Arch::Mlp { hidden } => {
                let h = hidden as u128;
                (p + 1) * h + 2 * (h + 1) * h + 2 * (h + 1) * dz + (de + 1) * h + (h + 1) * p
            }
            Arch::Conv3 => {
                let feat = 128 * (self.n as u128 / 8).pow(2);
                CONV_FIXED_PARAMS + 2 * (feat + 1) * dz + (de + 1) * feat
            }
        };
        let module = if self.mode.has_module() {
            let s = &self.spec;
            let (m, we, wc) = (s.m as u128, s.w_eps as u128, s.w_c as u128);
            let w = s.w_exp.max(s.w_eps) as u128 + 1;
            2 * m * s.h_exp as u128 * w * w + 2 * m * m * we * wc + (de + 1) * m * wc
        } else {
            0
        };
        blackbox + module
    }
}

/// Convolution kernels and biases of the conv3 body, both directions.
const CONV_FIXED_PARAMS: u128 = 2 * (3 * 32 * 16 + 32 + 32 * 64 * 16 + 64 + 64 * 128 * 16 + 128);

/// Models above this many scalars are refused.
pub const MAX_PARAMS: u128 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_gl: f64,
    pub lambda_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_gl: 0.0,
            lambda_l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Cap on validation images per context; `None` uses the whole split.
    pub val_limit: Option<usize>,
    pub freeze_blackbox: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            val_fraction: 0.3,
            val_limit: None,
            freeze_blackbox: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.beta > 0.0) || !(w.lambda_gl >= 0.0) || !(w.lambda_l2 >= 0.0) {
            return Err(CoreError::Config(format!(
                "need beta > 0 and nonnegative lambdas, got {w:?}"
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(CoreError::Config("batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CoreError::Config("validation fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-image ELBO terms in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub elbo_bpd: f64,
    pub recon_bpd: f64,
    pub kl: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub blackbox: BlackBox,
    pub module: Option<ContextModule>,
    pub epoch: usize,
    pub train_config: Option<TrainConfig>,
}

struct ElboVars<'t> {
    loss: Var<'t>,
    recon: f64,
    kl: f64,
}

fn check_pixels(x: &Tensor, pixels: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != pixels {
        return Err(CoreError::Data(format!(
            "batch shape {:?}, expected [B, {pixels}]",
            x.shape()
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CoreError::Data(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng)).expect("non-empty shape")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.spec.validate()?;
        ctxmod_quad::check_side(config.n)?;
        if config.dim_e == 0 {
            return Err(CoreError::Config("dim_e must be positive".into()));
        }
        if config.param_bound() > MAX_PARAMS {
            return Err(CoreError::Config(format!(
                "model would need up to {} parameters, limit {MAX_PARAMS}",
                config.param_bound()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut store = ParamStore::new();
        let blackbox = BlackBox::init(&mut store, config.arch, config.n, config.dim_z(), config.dim_e, &mut rng)?;
        let module = if config.mode.has_module() {
            Some(ContextModule::init(&mut store, config.spec, config.dim_e, config.linear, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            blackbox,
            module,
            epoch: 0,
            train_config: None,
        })
    }

    /// The target set the model actually conditions on.
    pub fn effective_targets(&self, targets: &InterventionSet) -> Result<InterventionSet> {
        targets.check(self.config.spec.m)?;
        Ok(if self.config.mode.uses_context() {
            targets.clone()
        } else {
            InterventionSet::obs()
        })
    }

    fn embed<'t>(&self, p: &Bound<'t>, z: Var<'t>, targets: &InterventionSet) -> Result<Var<'t>> {
        match &self.module {
            Some(m) => m.forward(p, z, targets),
            None => Ok(z),
        }
    }

    fn elbo_vars<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        x: &Tensor,
        targets: &InterventionSet,
        noise: Tensor,
        w: &LossWeights,
    ) -> Result<ElboVars<'t>> {
        let b = x.shape()[0] as f64;
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.blackbox.encode(p, xv)?;
        let z = mu.reparameterize(logvar, noise)?;
        let e = self.embed(p, z, targets)?;
        let logits = self.blackbox.decode(p, e)?;
        let recon = logits.bce_with_logits(x.clone())?.sum()?;
        let kl = mu
            .square()?
            .add(logvar.exp()?)?
            .sub(logvar)?
            .add_scalar(-1.0)?
            .sum()?
            .scale(0.5)?;
        let mut loss = recon.add(kl.scale(w.beta)?)?.scale(1.0 / b)?;
        if let Some(m) = &self.module {
            if w.lambda_gl > 0.0 {
                loss = loss.add(m.group_lasso(p)?.scale(w.lambda_gl)?)?;
            }
            if w.lambda_l2 > 0.0 {
                loss = loss.add(m.l2(p)?.scale(w.lambda_l2)?)?;
            }
        }
        let recon = recon.value().item()? / b;
        let kl = kl.value().item()? / b;
        Ok(ElboVars { loss, recon, kl })
    }

    /// ELBO terms of a batch `[B, 3·n·n]` with intensities in `[0, 1]`.
    pub fn elbo(&self, x: &Tensor, targets: &InterventionSet, w: &LossWeights, rng: &mut ChaCha8Rng) -> Result<ElboParts> {
        check_pixels(x, self.config.pixels())?;
        let targets = self.effective_targets(targets)?;
        let noise = normal_tensor(&[x.shape()[0], self.config.dim_z()], rng);
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let v = self.elbo_vars(&tape, &p, x, &targets, noise, w)?;
        let loss = v.loss.value().item()?;
        Ok(ElboParts {
            loss,
            recon: v.recon,
            kl: v.kl,
        })
    }

    /// One optimiser step on a batch; returns the per-image terms before the step.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        x: &Tensor,
        targets: &InterventionSet,
        w: &LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<ElboParts> {
        let targets = self.effective_targets(targets)?;
        let noise = normal_tensor(&[x.shape()[0], self.config.dim_z()], rng);
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let v = self.elbo_vars(&tape, &p, x, &targets, noise, w)?;
        let loss = v.loss.value().item()?;
        let grads = tape.backward(v.loss)?;
        let grads = p.grads(&grads);
        drop(p);
        opt.step(&mut self.store, &grads);
        Ok(ElboParts {
            loss,
            recon: v.recon,
            kl: v.kl,
        })
    }

    pub fn freeze_blackbox(&mut self, frozen: bool) {
        for id in self.blackbox.param_ids() {
            self.store.set_frozen(id, frozen);
        }
    }

    /// Decoder means for prior samples under `targets`, `[count, 3·n·n]`.
    pub fn generate(&self, targets: &InterventionSet, count: usize, seed: u64) -> Result<Tensor> {
        if count == 0 {
            return Err(CoreError::Data("sample count must be positive".into()));
        }
        let targets = self.effective_targets(targets)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = normal_tensor(&[count, self.config.dim_z()], &mut rng);
        self.decode_batched(&z, &targets)
    }

    fn decode_batched(&self, z: &Tensor, targets: &InterventionSet) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let count = z.shape()[0];
        let mut parts = Vec::new();
        for start in (0..count).step_by(CHUNK) {
            let len = CHUNK.min(count - start);
            let tape = Tape::new();
            let p = self.store.bind(&tape);
            let zv = tape.constant(z.slice_axis(0, start, len)?);
            let e = self.embed(&p, zv, targets)?;
            parts.push(self.blackbox.decode(&p, e)?.sigmoid()?.value().clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    /// Posterior-mean reconstruction of a batch under `targets`.
    pub fn reconstruct(&self, x: &Tensor, targets: &InterventionSet) -> Result<Tensor> {
        check_pixels(x, self.config.pixels())?;
        let targets = self.effective_targets(targets)?;
        const CHUNK: usize = 256;
        let count = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..count).step_by(CHUNK) {
            let len = CHUNK.min(count - start);
            let tape = Tape::new();
            let p = self.store.bind(&tape);
            let (mu, _) = self.blackbox.encode(&p, tape.constant(x.slice_axis(0, start, len)?))?;
            let e = self.embed(&p, mu, &targets)?;
            parts.push(self.blackbox.decode(&p, e)?.sigmoid()?.value().clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    /// Trains on context datasets; calls `on_epoch` after every epoch.
    pub fn train(
        &mut self,
        data: &[ContextData],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        cfg.validate()?;
        let contexts = self.training_contexts(data)?;
        self.freeze_blackbox(cfg.freeze_blackbox);
        self.train_config = Some(*cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let splits: Vec<(Vec<usize>, Vec<usize>)> = contexts
            .iter()
            .map(|c| {
                let mut idx: Vec<usize> = (0..c.len()).collect();
                idx.shuffle(&mut rng);
                let n_val = ((c.len() as f64) * cfg.val_fraction).round() as usize;
                let n_val = n_val.min(c.len().saturating_sub(1));
                let val = idx.split_off(c.len() - n_val);
                (idx, val)
            })
            .collect();
        let mut opt = Adam::new(
            &self.store,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        let pixels = self.config.pixels();
        let mut logs = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let started = std::time::Instant::now();
            let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = splits
                .iter()
                .map(|(train, _)| {
                    let mut t = train.clone();
                    t.shuffle(&mut rng);
                    t.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
                })
                .collect();
            let (mut total, mut seen) = (0.0, 0usize);
            loop {
                let mut any = false;
                for (c, q) in contexts.iter().zip(queues.iter_mut()) {
                    let Some(batch) = q.pop_front() else { continue };
                    any = true;
                    let x = gather(c, &batch, pixels);
                    let parts = self.train_step(&mut opt, &x, &c.targets, &cfg.weights, &mut rng)?;
                    total += parts.loss * batch.len() as f64;
                    seen += batch.len();
                }
                if !any {
                    break;
                }
            }
            self.epoch += 1;
            let val = self.validation(&contexts, &splits, cfg, &mut rng)?;
            let log = EpochLog {
                epoch: self.epoch,
                train_loss: total / seen.max(1) as f64,
                elbo_bpd: bpd(val.loss, pixels),
                recon_bpd: bpd(val.recon, pixels),
                kl: val.kl,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::debug!("{} epoch {} elbo_bpd {:.4}", self.config.mode.name(), log.epoch, log.elbo_bpd);
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    fn training_contexts<'d>(&self, data: &'d [ContextData]) -> Result<Vec<&'d ContextData>> {
        let m = self.config.spec.m;
        for c in data {
            c.targets.check(m)?;
            if c.n != self.config.n {
                return Err(CoreError::Data(format!(
                    "context {} has side {}, model expects {}",
                    c.label, c.n, self.config.n
                )));
            }
        }
        let chosen: Vec<&ContextData> = match self.config.mode {
            Mode::Ablation1 => data.iter().filter(|c| c.targets.is_empty()).collect(),
            _ => data.iter().collect(),
        };
        if chosen.is_empty() || chosen.iter().any(|c| c.len() < 2) {
            return Err(CoreError::Data(format!(
                "{} needs at least two images per context{}",
                self.config.mode.name(),
                if self.config.mode == Mode::Ablation1 { " and an observational context" } else { "" }
            )));
        }
        Ok(chosen)
    }

    fn validation(
        &self,
        contexts: &[&ContextData],
        splits: &[(Vec<usize>, Vec<usize>)],
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<ElboParts> {
        let pixels = self.config.pixels();
        let mut acc = ElboParts { loss: 0.0, recon: 0.0, kl: 0.0 };
        let mut count = 0usize;
        for (c, (_, val)) in contexts.iter().zip(splits) {
            let take = cfg.val_limit.map_or(val.len(), |l| l.min(val.len()));
            for batch in val[..take].chunks(256) {
                let parts = self.elbo(&gather(c, batch, pixels), &c.targets, &cfg.weights, rng)?;
                let k = batch.len() as f64;
                acc.loss += parts.loss * k;
                acc.recon += parts.recon * k;
                acc.kl += parts.kl * k;
                count += batch.len();
            }
        }
        if count == 0 {
            return Ok(acc);
        }
        let k = count as f64;
        Ok(ElboParts {
            loss: acc.loss / k,
            recon: acc.recon / k,
            kl: acc.kl / k,
        })
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model": self.config,
            "train": self.train_config,
            "epoch": self.epoch,
        }));
        f.tensors = self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let meta = &f.meta;
        if meta["format"] != CHECKPOINT_FORMAT || meta["version"] != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint("not a supported checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| CoreError::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        if f.tensors.len() != model.store.len() {
            return Err(CoreError::Checkpoint(format!(
                "{} tensors, model has {} parameters",
                f.tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in &f.tensors {
            model.store.set(name, t.clone())?;
        }
        model.epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        model.train_config = serde_json::from_value(meta["train"].clone()).ok().flatten();
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_tensor_file().to_bytes()).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_tensor_file(&TensorFile::from_bytes(&bytes)?)
    }
}

fn gather(c: &ContextData, idx: &[usize], pixels: usize) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * pixels);
    for &i in idx {
        data.extend(c.image(i).iter().map(|&v| v as f64));
    }
    Tensor::new(&[idx.len(), pixels], data).expect("non-empty batch")
}
