//! Entropy-maximization unlearning (SAFEMax) and a fixed-relabel baseline.
//!
//! The forget loss regresses the denoiser's output for the forget class onto
//! the terminal-state noise `eps_T`, with each row weighted by
//! `psi(t) = exp(-lambda t / T)` so early steps dominate. Retained classes get
//! ordinary noise-regression fine-tuning in the same update.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::denoiser::{denoising_loss, DenoiserModel};
use crate::diffusion::{build_latent_batch, standard_normal, LabeledDataset, LatentBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gradcore::{Array, NodeId, Sgd, Tape};
use crate::rng_from_seed;

/// How the terminal noise target is realised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EpsTargetMode {
    /// Fresh `N(0, I)` draw, independent of the noise that formed `x_t`.
    #[default]
    Independent,
    /// Extend the forward chain from `x_t` to `x_T` and read off its noise.
    Trajectory,
}

impl FromStr for EpsTargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "trajectory" => Ok(Self::Trajectory),
            other => Err(Error::config("unlearn.eps_t_mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for EpsTargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Independent => "independent",
            Self::Trajectory => "trajectory",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnlearnConfig {
    pub forget_class: usize,
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate_forget: f64,
    pub learning_rate_retain: f64,
    pub batch_size_forget: usize,
    pub batch_size_retain: usize,
    pub eps_t_mode: EpsTargetMode,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            forget_class: 0,
            lambda: 1.0,
            steps: 500,
            learning_rate_forget: 0.01,
            learning_rate_retain: 0.01,
            batch_size_forget: 64,
            batch_size_retain: 64,
            eps_t_mode: EpsTargetMode::Independent,
            momentum: Sgd::DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.forget_class >= num_classes {
            return Err(Error::Domain(format!(
                "forget class {} out of range for {num_classes} classes",
                self.forget_class
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Domain(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        for (name, lr) in [
            ("forget", self.learning_rate_forget),
            ("retain", self.learning_rate_retain),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Domain(format!("{name} learning rate must be positive, got {lr}")));
            }
        }
        if self.batch_size_forget == 0 || self.batch_size_retain == 0 {
            return Err(Error::Domain("batch sizes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Decay weight `exp(-lambda t / T)` for `t` in `[0, T]`.
pub fn psi(t: usize, total_steps: usize, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    if total_steps == 0 || t > total_steps {
        return Err(Error::Domain(format!("step {t} outside [0, {total_steps}]")));
    }
    Ok((-lambda * t as f64 / total_steps as f64).exp())
}

/// Terminal noise targets, one row per row of `x_t`.
pub fn eps_t_target<R: Rng + ?Sized>(
    x0: &Array,
    x_t: &Array,
    t: &[usize],
    schedule: &NoiseSchedule,
    mode: EpsTargetMode,
    rng: &mut R,
) -> Result<Array> {
    if x0.shape() != x_t.shape() || t.len() != x_t.rows() {
        return Err(Error::Dimension(format!(
            "x0 {:?}, x_t {:?} and {} steps do not line up",
            x0.shape(),
            x_t.shape(),
            t.len()
        )));
    }
    let big_t = schedule.steps();
    let ab_final = schedule.alpha_bar(big_t);
    if ab_final >= 1.0 {
        return Err(Error::Domain("terminal alpha_bar is 1; the schedule adds no noise".into()));
    }
    for &ti in t {
        schedule.check_step(ti)?;
    }
    let (n, d) = (x_t.rows(), x_t.cols());
    let fresh = standard_normal(n, d, rng);
    match mode {
        EpsTargetMode::Independent => Ok(fresh),
        EpsTargetMode::Trajectory => {
            let mut out = Vec::with_capacity(n * d);
            let denom = (1.0 - ab_final).sqrt();
            let sqrt_final = ab_final.sqrt();
            for (i, &ti) in t.iter().enumerate() {
                let ratio = ab_final / schedule.alpha_bar(ti);
                let (keep, add) = (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt());
                for j in 0..d {
                    let x_final = keep * x_t.row(i)[j] + add * fresh.row(i)[j];
                    out.push((x_final - sqrt_final * x0.row(i)[j]) / denom);
                }
            }
            Array::new(vec![n, d], out)
        }
    }
}

/// `psi(t_i)` for every row of a batch.
pub fn psi_weights(t: &[usize], total_steps: usize, lambda: f64) -> Result<Vec<f64>> {
    t.iter().map(|&ti| psi(ti, total_steps, lambda)).collect()
}

/// Weighted regression of the forget-class prediction onto `eps_T`.
#[allow(clippy::too_many_arguments)]
pub fn forget_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &DenoiserModel,
    batch: &LatentBatch,
    forget_class: usize,
    schedule: &NoiseSchedule,
    lambda: f64,
    mode: EpsTargetMode,
    rng: &mut R,
) -> Result<NodeId> {
    if let Some(&c) = batch.labels.iter().find(|&&c| c != forget_class) {
        return Err(Error::Contract(format!(
            "forget batch contains label {c}, expected only {forget_class}"
        )));
    }
    let target = eps_t_target(&batch.x0, &batch.x_t, &batch.t, schedule, mode, rng)?;
    let weights = psi_weights(&batch.t, schedule.steps(), lambda)?;
    forget_loss_with_target(tape, model, batch, &target, &weights)
}

/// Forget loss against precomputed targets and weights.
pub fn forget_loss_with_target(
    tape: &mut Tape,
    model: &DenoiserModel,
    batch: &LatentBatch,
    target: &Array,
    weights: &[f64],
) -> Result<NodeId> {
    let pred = model.forward(tape, &batch.x_t, &batch.labels, &batch.t)?;
    tape.mse_loss(pred, target, Some(weights))
}

/// Plain noise regression on retained classes.
pub fn retain_loss(tape: &mut Tape, model: &DenoiserModel, batch: &LatentBatch, forget_class: usize) -> Result<NodeId> {
    if batch.labels.contains(&forget_class) {
        return Err(Error::Contract(format!(
            "retain batch contains the forget class {forget_class}"
        )));
    }
    denoising_loss(tape, model, batch)
}

/// Row indices of the forget class and of each retained class.
struct ClassPools {
    forget: Vec<usize>,
    retained: Vec<Vec<usize>>,
}

impl ClassPools {
    fn new(dataset: &LabeledDataset, forget_class: usize) -> Result<Self> {
        let forget = dataset.indices_of(forget_class);
        if forget.is_empty() {
            return Err(Error::Domain(format!("dataset has no samples of forget class {forget_class}")));
        }
        let retained: Vec<Vec<usize>> = (0..dataset.num_classes())
            .filter(|&c| c != forget_class)
            .map(|c| dataset.indices_of(c))
            .filter(|v| !v.is_empty())
            .collect();
        if retained.is_empty() {
            return Err(Error::Domain("dataset has no retained classes".into()));
        }
        Ok(Self { forget, retained })
    }

    fn draw_forget<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| self.forget[rng.random_range(0..self.forget.len())]).collect()
    }

    // class uniformly among retained classes, then a row within it
    fn draw_retained<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let pool = &self.retained[rng.random_range(0..self.retained.len())];
                pool[rng.random_range(0..pool.len())]
            })
            .collect()
    }
}

/// Per-step record of an unlearning run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub psi_mean: f64,
    pub psi_min: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnlearnLog {
    pub records: Vec<StepRecord>,
}

impl UnlearnLog {
    pub const CSV_HEADER: &'static str = "step,forget_loss,retain_loss,psi_mean,psi_min";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.forget_loss, r.retain_loss, r.psi_mean, r.psi_min
            ));
        }
        s
    }
}

/// Joint update on `lr_f * L_forget + lr_r * L_retain` with a unit-rate
/// optimizer. With equal rates this is one step on the summed objective.
fn joint_update(
    model: &mut DenoiserModel,
    opt: &mut Sgd,
    tape: &mut Tape,
    forget: NodeId,
    retain: NodeId,
    lr_forget: f64,
    lr_retain: f64,
) -> Result<(f64, f64)> {
    let fv = tape.value(forget).data()[0];
    let rv = tape.value(retain).data()[0];
    if !fv.is_finite() || !rv.is_finite() {
        return Err(Error::Numeric(format!("forget loss {fv}, retain loss {rv}")));
    }
    let f = tape.scale(forget, lr_forget)?;
    let r = tape.scale(retain, lr_retain)?;
    let total = tape.add(f, r)?;
    let grads = tape.param_grads(total, &model.params)?;
    opt.step(&mut model.params, &grads)?;
    Ok((fv, rv))
}

fn unit_rate_optimizer(momentum: f64) -> Result<Sgd> {
    Sgd::new(1.0, momentum)
}

/// One SAFEMax update: a forget batch and a retain batch, one optimizer
/// step on their sum.
pub fn safemax_step<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    opt: &mut Sgd,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    let pools = ClassPools::new(dataset, config.forget_class)?;
    safemax_step_with(model, opt, dataset, &pools, schedule, config, 0, rng)
}

#[allow(clippy::too_many_arguments)]
fn safemax_step_with<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    opt: &mut Sgd,
    dataset: &LabeledDataset,
    pools: &ClassPools,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
    step: usize,
    rng: &mut R,
) -> Result<StepRecord> {
    let rows = pools.draw_forget(config.batch_size_forget, rng);
    let mut forget_batch = build_latent_batch(dataset, &rows, schedule, rng)?;
    forget_batch.labels.fill(config.forget_class);
    let rows = pools.draw_retained(config.batch_size_retain, rng);
    let retain_batch = build_latent_batch(dataset, &rows, schedule, rng)?;

    let weights = psi_weights(&forget_batch.t, schedule.steps(), config.lambda)?;
    let mut tape = Tape::new();
    let f = forget_loss(
        &mut tape,
        model,
        &forget_batch,
        config.forget_class,
        schedule,
        config.lambda,
        config.eps_t_mode,
        rng,
    )?;
    let r = retain_loss(&mut tape, model, &retain_batch, config.forget_class)?;
    let (fv, rv) = joint_update(
        model,
        opt,
        &mut tape,
        f,
        r,
        config.learning_rate_forget,
        config.learning_rate_retain,
    )?;
    Ok(StepRecord {
        step,
        forget_loss: fv,
        retain_loss: rv,
        psi_mean: weights.iter().sum::<f64>() / weights.len() as f64,
        psi_min: weights.iter().cloned().fold(f64::INFINITY, f64::min),
    })
}

/// Runs `config.steps` SAFEMax updates on `model` in place.
pub fn run_unlearning(
    model: &mut DenoiserModel,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
) -> Result<UnlearnLog> {
    let mut log = UnlearnLog::default();
    run_unlearning_into(model, dataset, schedule, config, &mut log)?;
    Ok(log)
}

/// [`run_unlearning`] appending to `log`, which keeps the records of the
/// steps that completed if a later step fails.
pub fn run_unlearning_into(
    model: &mut DenoiserModel,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
    log: &mut UnlearnLog,
) -> Result<()> {
    config.validate(model.arch.num_classes)?;
    let pools = ClassPools::new(dataset, config.forget_class)?;
    let mut rng = rng_from_seed(config.seed);
    let mut opt = unit_rate_optimizer(config.momentum)?;
    for step in 0..config.steps {
        let rec = safemax_step_with(model, &mut opt, dataset, &pools, schedule, config, step, &mut rng)
            .map_err(|e| with_step(e, step))?;
        log.records.push(rec);
    }
    Ok(())
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("unlearning step {step}: {m}")),
        other => other,
    }
}

/// Default relabel target: the next class id after the forget class.
pub fn default_relabel_target(forget_class: usize, num_classes: usize) -> usize {
    (forget_class + 1) % num_classes
}

/// One fixed-relabel baseline update: condition on the forget class while
/// regressing the true noise of latents built from `target_class` data,
/// plus retain fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn baseline_relabel_step<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    opt: &mut Sgd,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
    target_class: usize,
    rng: &mut R,
) -> Result<StepRecord> {
    if target_class == config.forget_class {
        return Err(Error::Domain(format!(
            "relabel target {target_class} equals the forget class"
        )));
    }
    if target_class >= dataset.num_classes() {
        return Err(Error::Domain(format!("relabel target {target_class} out of range")));
    }
    let pools = ClassPools::new(dataset, config.forget_class)?;
    relabel_step_with(model, opt, dataset, &pools, schedule, config, target_class, 0, rng)
}

#[allow(clippy::too_many_arguments)]
fn relabel_step_with<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    opt: &mut Sgd,
    dataset: &LabeledDataset,
    pools: &ClassPools,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
    target_class: usize,
    step: usize,
    rng: &mut R,
) -> Result<StepRecord> {
    let target_rows = dataset.indices_of(target_class);
    let rows: Vec<usize> = (0..config.batch_size_forget)
        .map(|_| target_rows[rng.random_range(0..target_rows.len())])
        .collect();
    let mut relabelled = build_latent_batch(dataset, &rows, schedule, rng)?;
    relabelled.labels.fill(config.forget_class);
    let rows = pools.draw_retained(config.batch_size_retain, rng);
    let retain_batch = build_latent_batch(dataset, &rows, schedule, rng)?;

    let mut tape = Tape::new();
    let f = denoising_loss(&mut tape, model, &relabelled)?;
    let r = retain_loss(&mut tape, model, &retain_batch, config.forget_class)?;
    let (fv, rv) = joint_update(
        model,
        opt,
        &mut tape,
        f,
        r,
        config.learning_rate_forget,
        config.learning_rate_retain,
    )?;
    Ok(StepRecord {
        step,
        forget_loss: fv,
        retain_loss: rv,
        psi_mean: 1.0,
        psi_min: 1.0,
    })
}

/// Runs `config.steps` fixed-relabel updates on `model` in place.
pub fn run_relabel(
    model: &mut DenoiserModel,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
    target_class: usize,
) -> Result<UnlearnLog> {
    let mut log = UnlearnLog::default();
    run_relabel_into(model, dataset, schedule, config, target_class, &mut log)?;
    Ok(log)
}

/// [`run_relabel`] appending to `log`.
pub fn run_relabel_into(
    model: &mut DenoiserModel,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &UnlearnConfig,
    target_class: usize,
    log: &mut UnlearnLog,
) -> Result<()> {
    config.validate(model.arch.num_classes)?;
    if target_class == config.forget_class || target_class >= dataset.num_classes() {
        return Err(Error::Domain(format!(
            "relabel target {target_class} must be a retained class"
        )));
    }
    let pools = ClassPools::new(dataset, config.forget_class)?;
    let mut rng = rng_from_seed(config.seed);
    let mut opt = unit_rate_optimizer(config.momentum)?;
    for step in 0..config.steps {
        let rec = relabel_step_with(
            model,
            &mut opt,
            dataset,
            &pools,
            schedule,
            config,
            target_class,
            step,
            &mut rng,
        )
        .map_err(|e| with_step(e, step))?;
        log.records.push(rec);
    }
    Ok(())
}
