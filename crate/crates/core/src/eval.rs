//! Evaluation: a small classifier as the judge of generated samples,
//! unlearning accuracy, prediction entropy, Gaussian-fit Fréchet distance,
//! the Fano bound and closed-form differential entropies.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{fan_in_matrix, DenoiserModel};
use crate::diffusion::{ancestral_sample, standard_normal, LabeledDataset, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gradcore::{softmax_rows, Array, NodeId, ParamStore, Sgd, Tape};
use crate::{rng_from_seed, stats};

/// Minimum held-out accuracy before a classifier may judge samples.
pub const ACCURACY_GATE: f64 = 0.98;

/// Every `HOLDOUT_EVERY`-th row is held out from classifier training.
pub const HOLDOUT_EVERY: usize = 5;

/// Eigenvalues of the covariance product above `-EIGEN_TOL` are clamped to 0.
pub const EIGEN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub dim: usize,
    pub num_classes: usize,
    pub hidden_width: usize,
}

/// Two hidden relu layers and a softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub params: ParamStore,
    pub holdout_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden_width: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            steps: 2000,
            learning_rate: 0.05,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.batch_size == 0 {
            return Err(Error::Domain("classifier width and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Domain(format!(
                "classifier learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

impl Classifier {
    pub fn init<R: Rng + ?Sized>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        if arch.dim == 0 || arch.num_classes < 2 || arch.hidden_width == 0 {
            return Err(Error::Domain(format!("invalid classifier architecture {arch:?}")));
        }
        let (d, h, k) = (arch.dim, arch.hidden_width, arch.num_classes);
        let mut params = ParamStore::new();
        params.insert("l0.w", fan_in_matrix(d, h, rng))?;
        params.insert("l0.b", Array::zeros(&[h]))?;
        params.insert("l1.w", fan_in_matrix(h, h, rng))?;
        params.insert("l1.b", Array::zeros(&[h]))?;
        params.insert("head.w", fan_in_matrix(h, k, rng))?;
        params.insert("head.b", Array::zeros(&[k]))?;
        Ok(Self {
            arch,
            params,
            holdout_accuracy: 0.0,
        })
    }

    /// Logits node for `x` (`n x d`).
    pub fn forward(&self, tape: &mut Tape, x: &Array) -> Result<NodeId> {
        let (_, d) = x.require_matrix("classifier input")?;
        if d != self.arch.dim {
            return Err(Error::Dimension(format!(
                "classifier expects {} columns, got {d}",
                self.arch.dim
            )));
        }
        let mut h = tape.leaf(x.clone());
        for layer in ["l0", "l1"] {
            let w = tape.param_named(&self.params, &format!("{layer}.w"))?;
            let b = tape.param_named(&self.params, &format!("{layer}.b"))?;
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = tape.relu(z)?;
        }
        let w = tape.param_named(&self.params, "head.w")?;
        let b = tape.param_named(&self.params, "head.b")?;
        let z = tape.matmul(h, w)?;
        tape.add(z, b)
    }

    pub fn loss(&self, tape: &mut Tape, x: &Array, labels: &[usize]) -> Result<NodeId> {
        let logits = self.forward(tape, x)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    /// Class probabilities, one row per sample.
    pub fn predict_proba(&self, x: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, x)?;
        Ok(softmax_rows(tape.value(logits)))
    }

    /// Argmax class per sample, ties toward the lowest class id.
    pub fn predict(&self, x: &Array) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Array, labels: &[usize]) -> Result<f64> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension(format!(
                "{} samples with {} labels",
                x.rows(),
                labels.len()
            )));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Trains a classifier on all but every fifth row and checks the held-out
/// accuracy against [`ACCURACY_GATE`].
pub fn train_classifier(dataset: &LabeledDataset, config: &ClassifierConfig) -> Result<Classifier> {
    config.validate()?;
    let (train, holdout) = dataset.split_every(HOLDOUT_EVERY)?;
    let mut rng = rng_from_seed(config.seed);
    let arch = ClassifierArch {
        dim: dataset.dim(),
        num_classes: dataset.num_classes(),
        hidden_width: config.hidden_width,
    };
    let mut model = Classifier::init(arch, &mut rng)?;
    let mut opt = Sgd::new(config.learning_rate, Sgd::DEFAULT_MOMENTUM)?;
    let n = train.len();
    for step in 0..config.steps {
        let rows: Vec<usize> = (0..config.batch_size.min(n)).map(|_| rng.random_range(0..n)).collect();
        let x = train.points().select_rows(&rows);
        let labels: Vec<usize> = rows.iter().map(|&i| train.labels()[i]).collect();
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &x, &labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("classifier loss {value} at step {step}")));
        }
        let grads = tape.param_grads(loss, &model.params)?;
        opt.step(&mut model.params, &grads)?;
    }
    let accuracy = model.accuracy(holdout.points(), holdout.labels())?;
    if accuracy < ACCURACY_GATE {
        return Err(Error::EvaluatorQuality {
            accuracy,
            required: ACCURACY_GATE,
        });
    }
    model.holdout_accuracy = accuracy;
    Ok(model)
}

/// `100 * (1 - fraction of samples classified as forget_class)`.
pub fn unlearning_accuracy(classifier: &Classifier, samples: &Array, forget_class: usize) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(Error::Domain("unlearning accuracy needs at least one sample".into()));
    }
    let pred = classifier.predict(samples)?;
    Ok(ua_from_predictions(&pred, forget_class))
}

/// Unlearning accuracy from precomputed argmax predictions.
pub fn ua_from_predictions(pred: &[usize], forget_class: usize) -> f64 {
    let hits = pred.iter().filter(|&&c| c == forget_class).count();
    // same rounding as `100 * accuracy`, so the two sum to exactly 100
    100.0 - 100.0 * (hits as f64 / pred.len() as f64)
}

/// Shannon entropy in nats of one probability vector, `0 ln 0 = 0`.
pub fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Mean entropy of the classifier's predictive distribution.
pub fn prediction_entropy(classifier: &Classifier, samples: &Array) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(Error::Domain("prediction entropy needs at least one sample".into()));
    }
    let p = classifier.predict_proba(samples)?;
    Ok(mean_entropy(&p))
}

/// Mean row entropy of a probability matrix.
pub fn mean_entropy(probs: &Array) -> f64 {
    let n = probs.rows();
    (0..n).map(|i| entropy_nats(probs.row(i))).sum::<f64>() / n as f64
}

/// Fréchet distance between Gaussian fits of two sample sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &Array, b: &Array) -> Result<f64> {
    let d = a.cols();
    if b.cols() != d {
        return Err(Error::Dimension(format!(
            "sample sets have {} and {} columns",
            d,
            b.cols()
        )));
    }
    for (name, s) in [("first", a), ("second", b)] {
        if s.rows() < d + 1 {
            return Err(Error::DegenerateSample(format!(
                "{name} sample set has {} rows, need at least {}",
                s.rows(),
                d + 1
            )));
        }
    }
    let (mu_a, cov_a) = stats::gaussian_fit(a)?;
    let (mu_b, cov_b) = stats::gaussian_fit(b)?;
    let diff = &mu_a - &mu_b;
    // (S_a S_b)^(1/2) shares its trace with the symmetric S_a^(1/2) S_b S_a^(1/2)
    let root_a = stats::sqrt_psd(&cov_a, EIGEN_TOL)?;
    let inner = &root_a * &cov_b * &root_a;
    let cross = stats::trace_sqrt_psd(&inner, EIGEN_TOL)?;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance evaluated to {value}")));
    }
    Ok(value.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoDiagnostic {
    pub h_cond_nats: f64,
    pub cardinality: u64,
    pub pe_lower_bound: f64,
}

/// Lower bound on reconstruction error probability,
/// `clamp((H(x|x_hat) - 1) / ln |X|, 0, 1)`.
pub fn fano_bound(h_cond_nats: f64, cardinality: u64) -> Result<FanoDiagnostic> {
    if cardinality < 2 {
        return Err(Error::Domain(format!("cardinality must be at least 2, got {cardinality}")));
    }
    if !(h_cond_nats >= 0.0) {
        return Err(Error::Domain(format!(
            "conditional entropy must be non-negative, got {h_cond_nats}"
        )));
    }
    let bound = ((h_cond_nats - 1.0) / (cardinality as f64).ln()).clamp(0.0, 1.0);
    Ok(FanoDiagnostic {
        h_cond_nats,
        cardinality,
        pe_lower_bound: bound,
    })
}

/// Differential entropy of `U(a, b)` in nats.
pub fn differential_entropy_uniform(a: f64, b: f64) -> Result<f64> {
    if !(b > a) || !(b - a).is_finite() {
        return Err(Error::Domain(format!("need a < b, got a={a}, b={b}")));
    }
    Ok((b - a).ln())
}

/// Differential entropy of `N(mu, sigma^2)` in nats.
pub fn differential_entropy_gaussian(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forget_class: usize,
    pub ua_percent: f64,
    pub mean_entropy_nats: f64,
    /// Retained classes only.
    pub frechet_per_class: BTreeMap<usize, f64>,
    pub frechet_mean: f64,
    /// Wall-clock seconds of the unlearning loop, when recorded.
    pub rte_seconds: Option<f64>,
    pub steps_executed: usize,
    /// Class that receives most pure-noise inputs, when it takes more than
    /// twice its uniform share.
    pub noise_attractor: Option<usize>,
}

/// Samples per class and the metrics computed from them.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub samples: Vec<Array>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub forget_class: usize,
    pub n_samples: usize,
    pub rte_seconds: Option<f64>,
    pub steps_executed: usize,
}

/// Draws `n_samples` per class from `model`, scores the forget-conditioned
/// set with `classifier`, and compares each retained class against the
/// held-out reference data.
pub fn evaluate<R: Rng + ?Sized>(
    model: &DenoiserModel,
    classifier: &Classifier,
    reference: &LabeledDataset,
    schedule: &NoiseSchedule,
    settings: &EvalSettings,
    rng: &mut R,
) -> Result<Evaluation> {
    let k = model.arch.num_classes;
    let c_f = settings.forget_class;
    if c_f >= k {
        return Err(Error::Domain(format!("forget class {c_f} out of range for {k} classes")));
    }
    if classifier.holdout_accuracy < ACCURACY_GATE {
        return Err(Error::EvaluatorQuality {
            accuracy: classifier.holdout_accuracy,
            required: ACCURACY_GATE,
        });
    }
    if settings.n_samples == 0 {
        return Err(Error::Domain("evaluation needs at least one sample per class".into()));
    }
    let mut samples = Vec::with_capacity(k);
    for c in 0..k {
        samples.push(ancestral_sample(model, c, schedule, settings.n_samples, rng)?);
    }
    let mut report = score_samples(classifier, reference, &samples, c_f)?;
    report.rte_seconds = settings.rte_seconds;
    report.steps_executed = settings.steps_executed;
    report.noise_attractor = noise_attractor(classifier, reference.dim(), rng)?;
    Ok(Evaluation { report, samples })
}

/// Metrics for precomputed per-class samples.
pub fn score_samples(
    classifier: &Classifier,
    reference: &LabeledDataset,
    samples: &[Array],
    forget_class: usize,
) -> Result<EvalReport> {
    let forget = samples
        .get(forget_class)
        .ok_or_else(|| Error::Domain(format!("no samples for forget class {forget_class}")))?;
    let probs = classifier.predict_proba(forget)?;
    let pred: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    let mut frechet_per_class = BTreeMap::new();
    for (c, s) in samples.iter().enumerate() {
        if c == forget_class {
            continue;
        }
        let fd = frechet_distance(s, &reference.class_points(c))?;
        frechet_per_class.insert(c, fd);
    }
    let frechet_mean = if frechet_per_class.is_empty() {
        0.0
    } else {
        frechet_per_class.values().sum::<f64>() / frechet_per_class.len() as f64
    };
    Ok(EvalReport {
        forget_class,
        ua_percent: ua_from_predictions(&pred, forget_class),
        mean_entropy_nats: mean_entropy(&probs),
        frechet_per_class,
        frechet_mean,
        rte_seconds: None,
        steps_executed: 0,
        noise_attractor: None,
    })
}

const NOISE_PROBE: usize = 2000;

/// Class that absorbs more than twice its share of `N(0, I)` inputs, if any.
pub fn noise_attractor<R: Rng + ?Sized>(classifier: &Classifier, dim: usize, rng: &mut R) -> Result<Option<usize>> {
    let k = classifier.arch.num_classes;
    let noise = standard_normal(NOISE_PROBE, dim, rng);
    let mut counts = vec![0usize; k];
    for c in classifier.predict(&noise)? {
        counts[c] += 1;
    }
    let best = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Ok((counts[best] * k > 2 * NOISE_PROBE).then_some(best))
}

/// Mean prediction entropy on pure noise and on real data of one class.
pub fn noise_vs_data_entropy<R: Rng + ?Sized>(
    classifier: &Classifier,
    dataset: &LabeledDataset,
    class: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let data = dataset.class_points(class);
    let noise = standard_normal(data.rows().max(1), dataset.dim(), rng);
    Ok((prediction_entropy(classifier, &noise)?, prediction_entropy(classifier, &data)?))
}
