//! Multi-domain training, validation-based selection, transfer to a new
//! domain, and evaluation.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use checkpoint::{shared_checksum, Checkpoint};
pub use optim::{adam_step, bce_loss, cyclic_lr, AdamSlot, AdamState, BCE_CLAMP};

use crate::datasets::{mixed_sampler, resize_image, DatasetManifest, Interleave, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{decode_landmarks, gaussian_target, Datr, DomainSpec, Geometry, LandmarkSet, ModelConfig};
use crate::nn::BN_MOMENTUM;
use crate::numerics::Tensor;
use crate::params::{domain_name, relative_name, ParamStore, Session, Trainable};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    /// Steps per learning-rate cycle; two epochs when unset.
    pub cycle_steps: Option<u64>,
    /// Stops training once this many steps have run.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub sigma: f64,
    pub normalize_peak: bool,
    /// Adds a BCE term on the guidance heatmap.
    pub aux_guidance: bool,
    pub interleave: Interleave,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr_low: 1e-4,
            lr_high: 5e-3,
            cycle_steps: None,
            max_steps: None,
            seed: 0,
            sigma: 3.0,
            normalize_peak: false,
            aux_guidance: false,
            interleave: Interleave::Proportional,
        }
    }

    pub fn toy() -> Self {
        TrainConfig {
            epochs: 125,
            max_steps: Some(500),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch size must be positive"));
        }
        if !(self.lr_low > 0.0 && self.lr_low < self.lr_high) {
            return Err(Error::contract(format!(
                "need 0 < lr_low < lr_high, got {} and {}",
                self.lr_low, self.lr_high
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::contract("sigma must be positive"));
        }
        Ok(())
    }

    /// Applies one `key=value` setting; returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let bad = || Error::contract(format!("bad value `{v}` for `{key}`"));
        let opt = |v: &str| -> Result<Option<u64>> {
            if v == "none" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad())
            }
        };
        match key {
            "epochs" => self.epochs = v.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad())?,
            "lr_low" => self.lr_low = v.parse().map_err(|_| bad())?,
            "lr_high" => self.lr_high = v.parse().map_err(|_| bad())?,
            "cycle_steps" => self.cycle_steps = opt(v)?,
            "max_steps" => self.max_steps = opt(v)?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "sigma" => self.sigma = v.parse().map_err(|_| bad())?,
            "normalize_peak" => self.normalize_peak = v.parse().map_err(|_| bad())?,
            "aux_guidance" => self.aux_guidance = v.parse().map_err(|_| bad())?,
            "interleave" => {
                self.interleave = match v {
                    "proportional" => Interleave::Proportional,
                    "uniform" => Interleave::Uniform,
                    _ => return Err(bad()),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<u64>| v.map_or("none".to_string(), |v| v.to_string());
        format!(
            "epochs={}\nbatch_size={}\nlr_low={}\nlr_high={}\ncycle_steps={}\nmax_steps={}\nseed={}\n\
             sigma={}\nnormalize_peak={}\naux_guidance={}\ninterleave={}\n",
            self.epochs,
            self.batch_size,
            self.lr_low,
            self.lr_high,
            opt(self.cycle_steps),
            opt(self.max_steps),
            self.seed,
            self.sigma,
            self.normalize_peak,
            self.aux_guidance,
            match self.interleave {
                Interleave::Proportional => "proportional",
                Interleave::Uniform => "uniform",
            }
        )
    }
}

/// A sample resized to the model input with its rendered target.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: Tensor<f32>,
    pub target: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct PreparedDomain {
    pub name: String,
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
}

fn prepare_samples(samples: &[Sample], geometry: Geometry, config: &TrainConfig) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let (image, labels) = s.resized(geometry)?;
            let target = gaussian_target(&labels, geometry, config.sigma, config.normalize_peak)?;
            Ok(Prepared {
                image,
                target: target.data.cast(),
            })
        })
        .collect()
}

pub fn prepare(manifest: &DatasetManifest, geometry: Geometry, config: &TrainConfig) -> Result<PreparedDomain> {
    Ok(PreparedDomain {
        name: manifest.spec.name.clone(),
        train: prepare_samples(&manifest.train, geometry, config)?,
        val: prepare_samples(&manifest.val, geometry, config)?,
    })
}

/// Stacks `[H, W, C]` tensors into `[B, H, W, C]`.
pub fn stack<'a>(items: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut shape = Vec::new();
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        if n == 0 {
            shape = t.shape().to_vec();
        } else if t.shape() != shape.as_slice() {
            return Err(Error::shape("stack", t.shape(), &shape));
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    shape.insert(0, n);
    Tensor::new(&shape, data)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    /// All parameters train; batch normalization uses batch statistics.
    Joint,
    /// Only the named domain trains; shared values and statistics are frozen.
    Transfer(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Vec<(String, f64)>,
    pub val_total: f64,
}

#[derive(Clone, Debug)]
struct Best {
    loss: f64,
    epoch: u64,
    store: ParamStore<f32>,
    adam: AdamState<f32>,
}

pub struct Trainer {
    pub model: Datr,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub mode: Mode,
    pub step: u64,
    pub epoch: u64,
    /// Loss of every step taken by this trainer.
    pub losses: Vec<f64>,
    best: Option<Best>,
    best_loss: f64,
}

impl Trainer {
    /// Fresh model with `domains` registered in order.
    pub fn new(model_config: ModelConfig, domains: &[DomainSpec], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Datr::new(model_config)?;
        let mut store = ParamStore::new();
        model.init_shared(&mut store, config.seed)?;
        for d in domains {
            model.register_domain(&mut store, d.clone(), config.seed)?;
        }
        Ok(Trainer {
            model,
            store,
            adam: AdamState::default(),
            config,
            mode: Mode::Joint,
            step: 0,
            epoch: 0,
            losses: Vec::new(),
            best: None,
            best_loss: f64::INFINITY,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`];
    /// `best` restores the snapshot selected so far.
    pub fn resume(last: &Checkpoint, best: Option<&Checkpoint>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mode = match last.meta.get("mode").map(String::as_str) {
            Some(m) if m.starts_with("transfer:") => Mode::Transfer(m["transfer:".len()..].to_string()),
            _ => Mode::Joint,
        };
        let best = best.map(|b| Best {
            loss: b.meta_f64("best_val_loss").unwrap_or(f64::INFINITY),
            epoch: b.meta_u64("best_epoch").unwrap_or(0),
            store: b.params.clone(),
            adam: b.adam.clone(),
        });
        Ok(Trainer {
            model: last.build_model()?,
            store: last.params.clone(),
            adam: last.adam.clone(),
            config,
            mode,
            step: last.meta_u64("step").unwrap_or(0),
            epoch: last.meta_u64("epoch").unwrap_or(0),
            losses: Vec::new(),
            best_loss: last.meta_f64("best_val_loss").unwrap_or(f64::INFINITY),
            best,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs as u64 || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best_loss
    }

    fn trainable(&self) -> (Trainable, bool) {
        match &self.mode {
            Mode::Joint => (Trainable::All, true),
            Mode::Transfer(d) => (Trainable::DomainOnly(d.clone()), false),
        }
    }

    /// One optimizer step on a single-domain batch; returns the loss.
    pub fn train_step(&mut self, domain: &str, images: Tensor<f32>, targets: Tensor<f32>, lr: f64) -> Result<f64> {
        if let Mode::Transfer(d) = &self.mode {
            if d != domain {
                return Err(Error::contract(format!("transfer trains only `{d}`, got `{domain}`")));
            }
        }
        let (trainable, batch_stats) = self.trainable();
        let mut sess = Session::new(&self.store, trainable, batch_stats);
        let x = sess.graph.constant(images);
        let out = self.model.forward(&mut sess, x, domain)?;
        let target = Arc::new(targets);
        let clamp = BCE_CLAMP as f32;
        let mut loss = sess.graph.bce(out.fused, target.clone(), clamp)?;
        if self.config.aux_guidance {
            let aux = sess.graph.bce(out.guidance, target, clamp)?;
            loss = sess.graph.add(loss, aux)?;
        }
        let value = sess.graph.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {}", self.step)));
        }
        let grads = sess.graph.backward(loss)?;
        let grads = sess.param_grads(&grads);
        let stats = sess.take_batch_stats();
        drop(sess);
        adam_step(&mut self.store, &grads, &mut self.adam, lr).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", self.step)),
            other => other,
        })?;
        for (prefix, s) in stats {
            self.store.update_running_stats(&prefix, &s, BN_MOMENTUM as f32)?;
        }
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }

    fn period(&self, steps_per_epoch: u64) -> u64 {
        self.config.cycle_steps.unwrap_or(2 * steps_per_epoch).max(2)
    }

    /// Trains one epoch (or until the step budget runs out), then validates
    /// and updates the best snapshot.
    pub fn run_epoch(&mut self, data: &[PreparedDomain]) -> Result<EpochLog> {
        self.run_epoch_with(data, |_| Ok(()))
    }

    /// `run_epoch`, calling `after_step` after every optimizer step.
    pub fn run_epoch_with<F>(&mut self, data: &[PreparedDomain], mut after_step: F) -> Result<EpochLog>
    where
        F: FnMut(&Self) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::contract("no training data"));
        }
        let sizes: Vec<usize> = data.iter().map(|d| d.train.len()).collect();
        let batches = mixed_sampler(&sizes, self.config.batch_size, self.config.seed, self.epoch, self.config.interleave)?;
        if batches.is_empty() {
            return Err(Error::contract("training split too small to form a batch of two"));
        }
        let period = self.period(batches.len() as u64);
        let (mut sum, mut n, mut lr) = (0.0, 0usize, self.config.lr_low);
        for b in &batches {
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let d = &data[b.domain];
            let images = stack(b.indices.iter().map(|&i| &d.train[i].image))?;
            let targets = stack(b.indices.iter().map(|&i| &d.train[i].target))?;
            lr = cyclic_lr(self.step, self.config.lr_low, self.config.lr_high, period);
            sum += self.train_step(&d.name, images, targets, lr)?;
            n += 1;
            after_step(self)?;
        }
        self.epoch += 1;
        let (val, val_total) = self.validate(data)?;
        if val_total < self.best_loss {
            self.best_loss = val_total;
            self.best = Some(Best {
                loss: val_total,
                epoch: self.epoch,
                store: self.store.clone(),
                adam: self.adam.clone(),
            });
        }
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            train_loss: if n > 0 { sum / n as f64 } else { f64::NAN },
            val,
            val_total,
        })
    }

    /// Mean fused-heatmap BCE per domain, and over all validation samples.
    pub fn validate(&self, data: &[PreparedDomain]) -> Result<(Vec<(String, f64)>, f64)> {
        let (mut total, mut count) = (0.0, 0usize);
        let mut per = Vec::new();
        for d in data {
            if d.val.is_empty() {
                return Err(Error::contract(format!("domain `{}` has no validation samples", d.name)));
            }
            let mut sum = 0.0;
            for chunk in d.val.chunks(self.config.batch_size) {
                let images = stack(chunk.iter().map(|p| &p.image))?;
                let targets = stack(chunk.iter().map(|p| &p.target))?;
                let mut sess = Session::inference(&self.store);
                let x = sess.graph.constant(images);
                let out = self.model.forward(&mut sess, x, &d.name)?;
                let l = sess.graph.bce(out.fused, Arc::new(targets), BCE_CLAMP as f32)?;
                sum += sess.graph.value(l).data()[0] as f64 * chunk.len() as f64;
            }
            per.push((d.name.clone(), sum / d.val.len() as f64));
            total += sum;
            count += d.val.len();
        }
        Ok((per, total / count as f64))
    }

    /// Runs epochs until done and returns the best checkpoint.
    pub fn fit(&mut self, data: &[PreparedDomain]) -> Result<Checkpoint> {
        while !self.finished() {
            self.run_epoch(data)?;
        }
        Ok(self.best_checkpoint())
    }

    fn meta(&self, best_epoch: u64) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("step".into(), self.step.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("best_val_loss".into(), self.best_loss.to_string());
        meta.insert("best_epoch".into(), best_epoch.to_string());
        meta.insert(
            "mode".into(),
            match &self.mode {
                Mode::Joint => "joint".to_string(),
                Mode::Transfer(d) => format!("transfer:{d}"),
            },
        );
        for line in self.config.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(format!("train.{k}"), v.to_string());
            }
        }
        meta
    }

    /// Current state, suitable for resuming.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            domains: self.model.domains().to_vec(),
            params: self.store.clone(),
            adam: self.adam.clone(),
            meta: self.meta(self.best.as_ref().map_or(0, |b| b.epoch)),
        }
    }

    /// Snapshot with the lowest total validation loss so far, or the
    /// current state if no epoch has been validated.
    pub fn best_checkpoint(&self) -> Checkpoint {
        match &self.best {
            Some(b) => {
                let mut meta = self.meta(b.epoch);
                meta.insert("best_val_loss".into(), b.loss.to_string());
                Checkpoint {
                    model: self.model.config.clone(),
                    domains: self.model.domains().to_vec(),
                    params: b.store.clone(),
                    adam: b.adam.clone(),
                    meta,
                }
            }
            None => self.checkpoint(),
        }
    }
}

/// Joint training on every manifest; returns the best checkpoint.
pub fn train(model_config: ModelConfig, config: TrainConfig, manifests: &[DatasetManifest]) -> Result<Checkpoint> {
    let specs: Vec<DomainSpec> = manifests.iter().map(|m| m.spec.clone()).collect();
    let mut trainer = Trainer::new(model_config, &specs, config)?;
    let data = manifests
        .iter()
        .map(|m| prepare(m, trainer.model.config.input, &trainer.config))
        .collect::<Result<Vec<_>>>()?;
    trainer.fit(&data)
}

/// Adds `spec` to a trained model, copying the donor domain's values into
/// every new parameter whose shape allows it, and freezes the shared set.
pub fn start_transfer(base: &Checkpoint, spec: DomainSpec, config: TrainConfig, donor: Option<&str>) -> Result<Trainer> {
    config.validate()?;
    let mut model = base.build_model()?;
    if model.domain(&spec.name).is_ok() {
        return Err(Error::DuplicateDomain(spec.name));
    }
    let donor = match donor {
        Some(d) => model.domain(d)?.name.clone(),
        None => model
            .domains()
            .first()
            .ok_or_else(|| Error::contract("base checkpoint has no domains"))?
            .name
            .clone(),
    };
    let mut store = base.params.clone();
    let name = spec.name.clone();
    model.register_domain(&mut store, spec, config.seed)?;
    let fresh: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&domain_name(&name, "")))
        .cloned()
        .collect();
    for n in fresh {
        let from = domain_name(&donor, relative_name(&n));
        if let Ok(src) = store.get(&from) {
            if src.shape() == store.get(&n)?.shape() {
                let src = src.clone();
                store.set(&n, src)?;
            }
        }
    }
    Ok(Trainer {
        model,
        store,
        adam: base.adam.clone(),
        config,
        mode: Mode::Transfer(name),
        step: 0,
        epoch: 0,
        losses: Vec::new(),
        best: None,
        best_loss: f64::INFINITY,
    })
}

/// Transfer to a new domain and train it; returns the best checkpoint.
pub fn transfer(
    base: &Checkpoint,
    manifest: &DatasetManifest,
    config: TrainConfig,
    donor: Option<&str>,
) -> Result<Checkpoint> {
    let mut trainer = start_transfer(base, manifest.spec.clone(), config, donor)?;
    let data = prepare(manifest, trainer.model.config.input, &trainer.config)?;
    trainer.fit(&[data])
}

/// Predictions in original image geometry plus the report.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<LandmarkSet>,
}

/// Predicts landmarks for `samples` of one domain, in each sample's own
/// geometry. With `resize_heatmap` the fused heatmap is resized before
/// decoding instead of rescaling the decoded coordinates.
pub fn predict_landmarks(
    model: &Datr,
    store: &ParamStore<f32>,
    domain: &str,
    images: &[Tensor<f32>],
    resize_heatmap: bool,
    batch: usize,
) -> Result<Vec<LandmarkSet>> {
    let input = model.config.input;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let resized = chunk.iter().map(|i| resize_image(i, input)).collect::<Result<Vec<_>>>()?;
        let maps = model.predict(store, &stack(&resized)?, domain)?;
        for (img, [fused, _, _]) in chunk.iter().zip(maps) {
            let geom = Geometry::new(img.shape()[0], img.shape()[1]);
            out.push(if resize_heatmap {
                decode_landmarks(&fused.resized(geom)?)
            } else {
                decode_landmarks(&fused).rescaled(geom)
            });
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Datr,
    store: &ParamStore<f32>,
    manifest: &DatasetManifest,
    split: Split,
    resize_heatmap: bool,
) -> Result<Evaluation> {
    let name = &manifest.spec.name;
    let spec = model.domain(name)?;
    if spec.landmarks != manifest.spec.landmarks {
        return Err(Error::contract(format!(
            "domain `{name}` has {} landmarks in the checkpoint but {} in the data",
            spec.landmarks, manifest.spec.landmarks
        )));
    }
    let samples = manifest.split(split);
    if samples.is_empty() {
        return Err(Error::contract(format!("domain `{name}` has no {} samples", split.dir())));
    }
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let predictions = predict_landmarks(model, store, name, &images, resize_heatmap, 8)?;
    let pairs: Vec<(LandmarkSet, LandmarkSet)> = predictions
        .iter()
        .cloned()
        .zip(samples.iter().map(|s| s.landmarks.clone()))
        .collect();
    Ok(Evaluation {
        report: EvalReport::compute(&manifest.spec, &pairs)?,
        predictions,
    })
}
