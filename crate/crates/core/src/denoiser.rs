//! Class-conditional noise-prediction MLP and its standard training loop.
//!
//! Input layout per row is `[x_t | class embedding | time features]`, where
//! the class embedding is a learned `K x E` table and the time features are a
//! learned projection of sinusoidal step features. Hidden layers use SiLU.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{sample_latent_batch, LabeledDataset, LatentBatch, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gradcore::{Array, NodeId, ParamStore, Sgd, Tape};
use crate::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserArch {
    pub dim: usize,
    pub num_classes: usize,
    pub hidden_width: usize,
    /// Number of hidden layers, counting the input projection.
    pub hidden_depth: usize,
    pub embed_dim: usize,
    pub steps: usize,
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden_width == 0 || self.hidden_depth == 0 || self.steps == 0 {
            return Err(Error::Domain(format!("all dimensions must be positive: {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Domain(format!(
                "embedding width must be positive and even, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, k, h, e) = (self.dim, self.num_classes, self.hidden_width, self.embed_dim);
        let input = d + 2 * e;
        k * e + (e * e + e) + (input * h + h) + (self.hidden_depth - 1) * (h * h + h) + (h * d + d)
    }
}

/// Noise predictor `eps_theta(x_t, c, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: DenoiserArch,
    pub params: ParamStore,
}

/// Scaled-normal fan-in weights (`std = 1/sqrt(fan_in)`), zero biases.
pub(crate) fn fan_in_matrix<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array::new(vec![fan_in, fan_out], data).expect("finite init")
}

/// Sinusoidal step features: interleaved `sin(t w_k), cos(t w_k)` with
/// geometric frequencies `w_k = 10000^(-k / (E/2))`.
pub fn timestep_embedding(t: usize, embed_dim: usize) -> Result<Array> {
    if embed_dim == 0 || !embed_dim.is_multiple_of(2) {
        return Err(Error::Domain(format!("embedding width must be positive and even, got {embed_dim}")));
    }
    let half = embed_dim / 2;
    let mut out = Vec::with_capacity(embed_dim);
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let phase = t as f64 * w;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(Array::from_parts(vec![embed_dim], out))
}

impl DenoiserModel {
    pub fn init<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let (d, k, h, e) = (arch.dim, arch.num_classes, arch.hidden_width, arch.embed_dim);
        let mut p = ParamStore::new();
        let table = (0..k * e).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        p.insert("class_embed", Array::new(vec![k, e], table)?)?;
        p.insert("time_proj.w", fan_in_matrix(e, e, rng))?;
        p.insert("time_proj.b", Array::zeros(&[1, e]))?;
        p.insert("input.w", fan_in_matrix(d + 2 * e, h, rng))?;
        p.insert("input.b", Array::zeros(&[1, h]))?;
        for i in 0..arch.hidden_depth - 1 {
            p.insert(format!("hidden.{i}.w"), fan_in_matrix(h, h, rng))?;
            p.insert(format!("hidden.{i}.b"), Array::zeros(&[1, h]))?;
        }
        p.insert("head.w", fan_in_matrix(h, d, rng))?;
        p.insert("head.b", Array::zeros(&[1, d]))?;
        Ok(Self { arch, params: p })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a freshly initialised layout.
    pub fn from_params(arch: DenoiserArch, params: ParamStore) -> Result<Self> {
        let template = Self::init(arch, &mut rng_from_seed(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter arrays, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tv), (n, v)) in template.params.iter().zip(params.iter()) {
            if tn != n || tv.shape() != v.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{n}` {:?} does not match expected `{tn}` {:?}",
                    v.shape(),
                    tv.shape()
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    fn check_inputs(&self, x_t: &Array, labels: &[usize], steps: &[usize]) -> Result<()> {
        let (n, d) = x_t.require_matrix("x_t")?;
        if d != self.arch.dim {
            return Err(Error::Dimension(format!("x_t has {d} columns, model expects {}", self.arch.dim)));
        }
        if labels.len() != n || steps.len() != n {
            return Err(Error::Dimension(format!(
                "{n} rows with {} labels and {} steps",
                labels.len(),
                steps.len()
            )));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= self.arch.num_classes) {
            return Err(Error::Domain(format!(
                "label {c} out of range for {} classes",
                self.arch.num_classes
            )));
        }
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > self.arch.steps) {
            return Err(Error::Domain(format!("step {t} outside [1, {}]", self.arch.steps)));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `n x d` output node.
    pub fn forward(&self, tape: &mut Tape, x_t: &Array, labels: &[usize], steps: &[usize]) -> Result<NodeId> {
        self.check_inputs(x_t, labels, steps)?;
        let e = self.arch.embed_dim;
        let p = &self.params;

        let mut feats = Vec::with_capacity(steps.len() * e);
        for &t in steps {
            feats.extend_from_slice(timestep_embedding(t, e)?.data());
        }
        let feats = tape.leaf(Array::from_parts(vec![steps.len(), e], feats));
        let tw = tape.param_named(p, "time_proj.w")?;
        let tb = tape.param_named(p, "time_proj.b")?;
        let temb = tape.matmul(feats, tw)?;
        let temb = tape.add(temb, tb)?;
        let temb = tape.silu(temb)?;

        let table = tape.param_named(p, "class_embed")?;
        let cemb = tape.gather_rows(table, labels)?;

        let x = tape.leaf(x_t.clone());
        let mut h = tape.concat_cols(&[x, cemb, temb])?;
        h = self.dense(tape, h, "input", true)?;
        for i in 0..self.arch.hidden_depth - 1 {
            h = self.dense(tape, h, &format!("hidden.{i}"), true)?;
        }
        self.dense(tape, h, "head", false)
    }

    fn dense(&self, tape: &mut Tape, x: NodeId, prefix: &str, act: bool) -> Result<NodeId> {
        let w = tape.param_named(&self.params, &format!("{prefix}.w"))?;
        let b = tape.param_named(&self.params, &format!("{prefix}.b"))?;
        let y = tape.matmul(x, w)?;
        let y = tape.add(y, b)?;
        if act {
            tape.silu(y)
        } else {
            Ok(y)
        }
    }

    pub fn predict_eps(&self, x_t: &Array, labels: &[usize], steps: &[usize]) -> Result<Array> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x_t, labels, steps)?;
        Ok(tape.value(out).clone())
    }
}

impl NoisePredictor for DenoiserModel {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn predict_eps(&self, x_t: &Array, labels: &[usize], steps: &[usize]) -> Result<Array> {
        DenoiserModel::predict_eps(self, x_t, labels, steps)
    }
}

/// Unweighted noise-regression loss node for a batch.
pub fn denoising_loss(tape: &mut Tape, model: &DenoiserModel, batch: &LatentBatch) -> Result<NodeId> {
    let pred = model.forward(tape, &batch.x_t, &batch.labels, &batch.t)?;
    tape.mse_loss(pred, &batch.eps, None)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            learning_rate: 0.02,
            momentum: Sgd::DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        Sgd::new(self.learning_rate, self.momentum).map(|_| ())
    }
}

/// One optimizer step on the noise-regression loss. Returns the loss
/// before the update.
pub fn train_step(model: &mut DenoiserModel, batch: &LatentBatch, opt: &mut Sgd) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = denoising_loss(&mut tape, model, batch)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    let grads = tape.param_grads(loss, &model.params)?;
    opt.step(&mut model.params, &grads)?;
    Ok(value)
}

/// Standard training loop. Returns the per-step loss trace.
pub fn train(
    model: &mut DenoiserModel,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.num_classes() != model.arch.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes(),
            model.arch.num_classes
        )));
    }
    if schedule.steps() != model.arch.steps {
        return Err(Error::Contract(format!(
            "schedule has {} steps, model was built for {}",
            schedule.steps(),
            model.arch.steps
        )));
    }
    let mut rng = rng_from_seed(config.seed);
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_latent_batch(dataset, schedule, config.batch_size, &mut rng)?;
        let loss = train_step(model, &batch, &mut opt).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("pretraining step {step}: {m}")),
            other => other,
        })?;
        trace.push(loss);
    }
    Ok(trace)
}
