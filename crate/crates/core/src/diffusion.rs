//! Forward noising process, noise schedules, the ancestral sampler and the
//! latent-state diagnostics (entropy growth, inter-class convergence).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::stats;

/// Per-step variance table of the forward process and its derived products.
///
/// Steps are 1-based: `beta(1)` is the first step and `beta(T)` the last.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Desk-scale default: 100 steps, beta from 1e-4 to 0.2.
    pub const DEFAULT_STEPS: usize = 100;
    pub const DEFAULT_BETA_MIN: f64 = 1e-4;
    pub const DEFAULT_BETA_MAX: f64 = 0.2;

    /// Linear beta schedule from `beta_min` at t=1 to `beta_max` at t=T.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Domain(format!(
                "need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Schedule from an explicit beta table.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Domain(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn default_desk() -> Self {
        Self::linear(Self::DEFAULT_STEPS, Self::DEFAULT_BETA_MIN, Self::DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Class-labelled samples `x_0` with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    points: Array,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(points: Array, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = points.require_matrix("dataset points")?;
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} points", labels.len())));
        }
        if num_classes < 1 {
            return Err(Error::Domain("dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Domain(format!("label {bad} out of range for {num_classes} classes")));
        }
        if n < num_classes {
            return Err(Error::Domain(format!("{n} points for {num_classes} classes")));
        }
        let mut counts = vec![0usize; num_classes];
        labels.iter().for_each(|&c| counts[c] += 1);
        if let Some(c) = counts.iter().position(|&k| k < 2) {
            return Err(Error::Domain(format!("class {c} has fewer than 2 samples")));
        }
        Ok(Self {
            points,
            labels,
            num_classes,
        })
    }

    pub fn points(&self) -> &Array {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices carrying label `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == class).then_some(i))
            .collect()
    }

    pub fn class_points(&self, class: usize) -> Array {
        self.points.select_rows(&self.indices_of(class))
    }

    /// Deterministic split into `(kept, held_out)`: within each class, every
    /// `every`-th row (starting with the first) is held out.
    pub fn split_every(&self, every: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        if every < 2 {
            return Err(Error::Domain(format!("split stride must be at least 2, got {every}")));
        }
        let (mut keep, mut held) = (Vec::new(), Vec::new());
        let mut seen = vec![0usize; self.num_classes];
        for (i, &c) in self.labels.iter().enumerate() {
            if seen[c].is_multiple_of(every) {
                held.push(i);
            } else {
                keep.push(i);
            }
            seen[c] += 1;
        }
        let part = |idx: &[usize]| {
            LabeledDataset::new(
                self.points.select_rows(idx),
                idx.iter().map(|&i| self.labels[i]).collect(),
                self.num_classes,
            )
        };
        Ok((part(&keep)?, part(&held)?))
    }
}

/// A batch of noised latents with the noise and steps that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub x0: Array,
    pub x_t: Array,
    pub eps: Array,
    pub t: Vec<usize>,
    pub labels: Vec<usize>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Standard-normal matrix of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Array::from_parts(vec![rows, cols], data)
}

/// `x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_sample(x0: &Array, t: usize, schedule: &NoiseSchedule, eps: &Array) -> Result<Array> {
    schedule.check_step(t)?;
    if eps.shape() != x0.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} differs from data shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| s * x + n * e).collect();
    Ok(Array::from_parts(x0.shape().to_vec(), data))
}

/// Forward-noises rows of `dataset` drawn uniformly (with replacement) from
/// `pool`, with `t ~ U{1..T}` and `eps ~ N(0, I)` per row.
pub fn sample_latent_batch_from<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    pool: &[usize],
    schedule: &NoiseSchedule,
    batch_size: usize,
    rng: &mut R,
) -> Result<LatentBatch> {
    if pool.is_empty() {
        return Err(Error::Domain("cannot draw a batch from an empty sample pool".into()));
    }
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let rows: Vec<usize> = (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    build_latent_batch(dataset, &rows, schedule, rng)
}

/// Uniform over the whole dataset.
pub fn sample_latent_batch<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    batch_size: usize,
    rng: &mut R,
) -> Result<LatentBatch> {
    if dataset.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    let pool: Vec<usize> = (0..dataset.len()).collect();
    sample_latent_batch_from(dataset, &pool, schedule, batch_size, rng)
}

/// Noises the given dataset rows, keeping their labels.
pub fn build_latent_batch<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    rows: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentBatch> {
    let d = dataset.dim();
    let x0 = dataset.points().select_rows(rows);
    let labels = rows.iter().map(|&i| dataset.labels()[i]).collect();
    let t: Vec<usize> = rows.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = standard_normal(rows.len(), d, rng);
    let mut x_t = Vec::with_capacity(rows.len() * d);
    for (i, &ti) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(ti);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.extend(x0.row(i).iter().zip(eps.row(i)).map(|(x, e)| s * x + n * e));
    }
    Ok(LatentBatch {
        x0,
        x_t: Array::from_parts(vec![rows.len(), d], x_t),
        eps,
        t,
        labels,
    })
}

/// Anything that predicts the noise in `x_t` given class labels and steps.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict_eps(&self, x_t: &Array, labels: &[usize], steps: &[usize]) -> Result<Array>;
}

/// DDPM reverse chain with reverse-step variance `beta_t`, conditioned on
/// `class`. Returns an `n x d` matrix.
pub fn ancestral_sample<M, R>(
    model: &M,
    class: usize,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Result<Array>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if class >= model.num_classes() {
        return Err(Error::Domain(format!(
            "class {class} out of range for {} classes",
            model.num_classes()
        )));
    }
    let d = model.dim();
    if n == 0 {
        return Ok(Array::zeros(&[0, d]));
    }
    let labels = vec![class; n];
    let mut x = standard_normal(n, d, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict_eps(&x, &labels, &vec![t; n])?;
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = schedule.beta(t).sqrt();
        let noise = (t > 1).then(|| standard_normal(n, d, rng));
        let data = x.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let mut next = inv_sqrt_alpha * (*v - coef * eps.data()[i]);
            if let Some(z) = &noise {
                next += sigma * z.data()[i];
            }
            *v = next;
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite sample at reverse step {t}")));
        }
    }
    Ok(x)
}

/// Differential entropy, in nats, of the Gaussian fitted to `samples`:
/// `0.5 * ln((2 pi e)^d det(cov))`.
pub fn latent_entropy_estimate(samples: &Array) -> Result<f64> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < d + 1 {
        return Err(Error::DegenerateSample(format!(
            "{n} samples cannot fit a {d}-dimensional covariance"
        )));
    }
    let (_, cov) = stats::gaussian_fit(samples)?;
    let log_det = stats::log_det_spd(&cov)?;
    Ok(0.5 * (d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_det))
}

/// Mean Euclidean distance between class means over all unordered pairs.
pub fn interclass_distance(latents_by_class: &[Array]) -> Result<f64> {
    if latents_by_class.len() < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 classes, got {}",
            latents_by_class.len()
        )));
    }
    if let Some(i) = latents_by_class.iter().position(|a| a.rows() == 0 || a.is_empty()) {
        return Err(Error::Domain(format!("class {i} has no samples")));
    }
    let means: Vec<Vec<f64>> = latents_by_class.iter().map(Array::column_means).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let d2: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d2.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn constant_half_betas() {
        let s = NoiseSchedule::from_betas(vec![0.5; 3]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25, 0.125]);
        let one = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1), 0.5);
    }

    #[test]
    fn schedule_domain_errors() {
        assert!(matches!(NoiseSchedule::linear(10, 0.0, 0.02), Err(Error::Domain(_))));
        assert!(matches!(NoiseSchedule::linear(0, 1e-4, 0.02), Err(Error::Domain(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.1, 0.05), Err(Error::Domain(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.1, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.2).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(100) - 0.2).abs() < 1e-15);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn terminal_state_is_near_pure_noise() {
        let ddpm = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(ddpm.alpha_bar(1000) < 1e-3);
        let desk = NoiseSchedule::default_desk();
        assert!(desk.alpha_bar(desk.steps()) < 1e-3);
    }

    #[test]
    fn forward_sample_cases() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x0 = Array::new(vec![1, 1], vec![2.0]).unwrap();
        let eps = Array::new(vec![1, 1], vec![1.0]).unwrap();
        let xt = forward_sample(&x0, 1, &s, &eps).unwrap();
        assert!((xt.data()[0] - (0.5 * 2.0 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!((xt.data()[0] - 1.8660).abs() < 1e-4);

        let zero = Array::zeros(&[1, 1]);
        let xt = forward_sample(&x0, 1, &s, &zero).unwrap();
        assert_eq!(xt.data()[0], 0.25f64.sqrt() * 2.0);
        let xt = forward_sample(&zero, 1, &s, &eps).unwrap();
        assert_eq!(xt.data()[0], 0.75f64.sqrt());

        assert!(matches!(forward_sample(&x0, 2, &s, &eps), Err(Error::Domain(_))));
        assert!(matches!(forward_sample(&x0, 0, &s, &eps), Err(Error::Domain(_))));
    }

    fn tiny_dataset() -> LabeledDataset {
        let pts = Array::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![5.0, 5.0],
            vec![6.0, 5.0],
        ])
        .unwrap();
        LabeledDataset::new(pts, vec![0, 0, 1, 1], 2).unwrap()
    }

    #[test]
    fn dataset_invariants() {
        let pts = Array::zeros(&[3, 2]);
        assert!(LabeledDataset::new(pts.clone(), vec![0, 0, 1], 2).is_err());
        assert!(LabeledDataset::new(pts, vec![0, 0, 2], 2).is_err());
        assert_eq!(tiny_dataset().indices_of(1), vec![2, 3]);
    }

    #[test]
    fn single_row_batch() {
        let ds = tiny_dataset();
        let s = NoiseSchedule::default_desk();
        let mut rng = rng_from_seed(3);
        let b = sample_latent_batch(&ds, &s, 1, &mut rng).unwrap();
        assert_eq!(b.x_t.shape(), &[1, 2]);
        assert_eq!(b.eps.shape(), &[1, 2]);
        assert!((1..=100).contains(&b.t[0]));
        let rebuilt = forward_sample(&b.x0, b.t[0], &s, &b.eps).unwrap();
        assert_eq!(rebuilt, b.x_t);
    }

    #[test]
    fn empty_pool_is_domain_error() {
        let ds = tiny_dataset();
        let s = NoiseSchedule::default_desk();
        let mut rng = rng_from_seed(3);
        assert!(matches!(
            sample_latent_batch_from(&ds, &[], &s, 4, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    struct Zero(usize, usize);
    impl NoisePredictor for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn num_classes(&self) -> usize {
            self.1
        }
        fn predict_eps(&self, x_t: &Array, _: &[usize], _: &[usize]) -> Result<Array> {
            Ok(Array::zeros(x_t.shape()))
        }
    }

    #[test]
    fn zero_model_sampling_is_finite() {
        let s = NoiseSchedule::default_desk();
        let mut rng = rng_from_seed(11);
        let x = ancestral_sample(&Zero(2, 3), 1, &s, 64, &mut rng).unwrap();
        assert_eq!(x.shape(), &[64, 2]);
        assert!(x.is_finite());
        let empty = ancestral_sample(&Zero(2, 3), 1, &s, 0, &mut rng).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);
        assert!(ancestral_sample(&Zero(2, 3), 3, &s, 4, &mut rng).is_err());
    }

    #[test]
    fn entropy_scaling_law() {
        let mut rng = rng_from_seed(5);
        let x = standard_normal(500, 3, &mut rng);
        let h = latent_entropy_estimate(&x).unwrap();
        let h2 = latent_entropy_estimate(&x.scaled(2.0)).unwrap();
        assert!((h2 - h - 3.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let x = Array::full(&[10, 2], 1.5);
        assert!(matches!(latent_entropy_estimate(&x), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn interclass_cases() {
        let a = Array::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Array::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(interclass_distance(&[a.clone(), b.clone()]).unwrap(), 5.0);
        assert_eq!(interclass_distance(&[a.clone(), a.clone()]).unwrap(), 0.0);
        let shift = |m: &Array| m.map(|v| v + 7.25);
        let moved = interclass_distance(&[shift(&a), shift(&b)]).unwrap();
        assert!((moved - 5.0).abs() < 1e-12);
        assert!(matches!(interclass_distance(&[a]), Err(Error::Domain(_))));
    }
}
