//! Acceptance criteria, one test per criterion. Each test writes a single
//! `ACCEPTANCE <n> PASS|FAIL` line to stderr (bypassing output capture)
//! before asserting, so the full tally is visible in any test log.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use diffusion_unlearn::denoiser::{denoising_loss, DenoiserArch, DenoiserModel};
use diffusion_unlearn::diffusion::{
    forward_sample, interclass_distance, latent_entropy_estimate, sample_latent_batch, standard_normal, NoiseSchedule,
};
use diffusion_unlearn::eval::{
    differential_entropy_gaussian, differential_entropy_uniform, fano_bound, Classifier, ClassifierArch,
};
use diffusion_unlearn::gradcore::{grad_check, Array};
use diffusion_unlearn::harness::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use diffusion_unlearn::harness::config::{ExperimentConfig, Method};
use diffusion_unlearn::harness::dataset::{generate_toy_dataset, Geometry};
use diffusion_unlearn::harness::experiment::{evaluate_model, median, prepare, run_experiment, run_variant};
use diffusion_unlearn::rng_from_seed;
use diffusion_unlearn::unlearn::{eps_t_target, forget_loss_with_target, psi_weights, EpsTargetMode};
use rand::Rng;

fn verdict(id: u32, pass: bool, detail: &str) {
    let line = format!(
        "ACCEPTANCE {id:>2} {}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "acceptance criterion {id} failed: {detail}");
}

fn default_arch() -> DenoiserArch {
    ExperimentConfig::default().arch()
}

#[test]
fn criterion_01_gradient_oracle() {
    let started = Instant::now();
    let schedule = NoiseSchedule::default_desk();
    let ds = generate_toy_dataset(4, 50, Geometry::Ring, 0.5, 1).unwrap();
    let mut rng = rng_from_seed(11);
    let model = DenoiserModel::init(default_arch(), &mut rng).unwrap();
    let batch = sample_latent_batch(&ds, &schedule, 8, &mut rng).unwrap();

    let denoise = grad_check(
        |tape, params| {
            let m = DenoiserModel::from_params(model.arch, params.clone())?;
            denoising_loss(tape, &m, &batch)
        },
        &model.params,
        1e-6,
        150,
        1,
    )
    .unwrap();

    let mut forget = batch.clone();
    forget.labels.fill(0);
    let target = eps_t_target(&forget.x0, &forget.x_t, &forget.t, &schedule, EpsTargetMode::Trajectory, &mut rng).unwrap();
    let weights = psi_weights(&forget.t, schedule.steps(), 1.0).unwrap();
    let forget_err = grad_check(
        |tape, params| {
            let m = DenoiserModel::from_params(model.arch, params.clone())?;
            forget_loss_with_target(tape, &m, &forget, &target, &weights)
        },
        &model.params,
        1e-6,
        150,
        2,
    )
    .unwrap();

    let arch = ClassifierArch {
        dim: 2,
        num_classes: 4,
        hidden_width: 32,
    };
    let clf = Classifier::init(arch, &mut rng).unwrap();
    let labels = ds.labels()[..32].to_vec();
    let x = ds.points().select_rows(&(0..32).collect::<Vec<_>>());
    let clf_err = grad_check(
        |tape, params| {
            let c = Classifier {
                arch,
                params: params.clone(),
                holdout_accuracy: 0.0,
            };
            c.loss(tape, &x, &labels)
        },
        &clf.params,
        1e-6,
        150,
        3,
    )
    .unwrap();

    let worst = denoise.max(forget_err).max(clf_err);
    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        worst < 1e-4 && secs < 30.0,
        &format!(
            "max relative error {worst:.2e} over 3x150 probes (denoise {denoise:.2e}, forget {forget_err:.2e}, classifier {clf_err:.2e}) in {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_02_forward_process_statistics() {
    let started = Instant::now();
    let schedule = NoiseSchedule::default_desk();
    let n = 100_000;
    let mut rng = rng_from_seed(5);
    let mut ok = true;
    let mut detail = Vec::new();
    for (x0v, t) in [([2.0, -1.0], 1usize), ([4.0, 0.0], 30), ([-3.0, 2.5], 100)] {
        let x0 = Array::new(vec![n, 2], (0..n).flat_map(|_| x0v).collect()).unwrap();
        let eps = standard_normal(n, 2, &mut rng);
        let xt = forward_sample(&x0, t, &schedule, &eps).unwrap();
        let ab = schedule.alpha_bar(t);
        let var = 1.0 - ab;
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
        let means = xt.column_means();
        for j in 0..2 {
            let emp_var = (0..n).map(|i| (xt.row(i)[j] - means[j]).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let zm = (means[j] - ab.sqrt() * x0v[j]).abs() / se_mean;
            let zv = (emp_var - var).abs() / se_var;
            ok &= zm < 3.0 && zv < 3.0;
            detail.push(format!("t={t} c{j}: mean {zm:.2}se var {zv:.2}se"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(2, ok && secs < 10.0, &format!("{} in {secs:.1}s", detail.join(", ")));
}

#[test]
fn criterion_03_entropy_and_separation_trajectory() {
    let schedule = NoiseSchedule::default_desk();
    let big_t = schedule.steps();
    let ds = generate_toy_dataset(4, 5000, Geometry::Ring, 0.5, 3).unwrap();
    let mut rng = rng_from_seed(9);
    let classes: Vec<Array> = (0..4).map(|c| ds.class_points(c)).collect();
    let noise: Vec<Array> = classes.iter().map(|p| standard_normal(p.rows(), 2, &mut rng)).collect();
    let checkpoints = [1, big_t / 4, big_t / 2, 3 * big_t / 4, big_t];
    let mut entropy = Vec::new();
    let mut distance = Vec::new();
    for &t in &checkpoints {
        let latents: Vec<Array> = classes
            .iter()
            .zip(&noise)
            .map(|(x0, e)| forward_sample(x0, t, &schedule, e).unwrap())
            .collect();
        let h = latents.iter().map(|l| latent_entropy_estimate(l).unwrap()).sum::<f64>() / latents.len() as f64;
        entropy.push(h);
        distance.push(interclass_distance(&latents).unwrap());
    }
    let entropy_ok = entropy.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let tol = 0.05 * distance[0];
    let distance_ok = distance.windows(2).all(|w| w[1] <= w[0] + tol) && distance[4] < 0.2 * distance[0];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        3,
        entropy_ok && distance_ok,
        &format!(
            "t={checkpoints:?}: class-mean latent entropy [{}] nats, interclass distance [{}]",
            fmt(&entropy),
            fmt(&distance)
        ),
    );
}

#[test]
#[allow(clippy::approx_constant)]
fn criterion_04_closed_form_entropies() {
    let u = differential_entropy_uniform(-1.0, 1.0).unwrap();
    let g = differential_entropy_gaussian(1.0).unwrap();
    verdict(
        4,
        (u - 0.693147).abs() < 1e-6 && (u - 2f64.ln()).abs() < 1e-9 && (g - 1.4189).abs() < 1e-4,
        &format!("uniform(-1,1) = {u:.9}, N(0,1) = {g:.6}"),
    );
}

#[test]
fn criterion_05_fano_diagnostic() {
    let zero = fano_bound(1.0, 10).unwrap().pe_lower_bound;
    let one = fano_bound(1.0 + 10f64.ln(), 10).unwrap().pe_lower_bound;
    let mut rng = rng_from_seed(21);
    let mut monotone = true;
    for _ in 0..500 {
        let h1: f64 = rng.random_range(0.0..6.0);
        let h2 = h1 + rng.random_range(0.0..2.0);
        let k1: u64 = rng.random_range(2..1000);
        let k2 = k1 + rng.random_range(0..1000);
        let b = |h, k| fano_bound(h, k).unwrap().pe_lower_bound;
        monotone &= b(h2, k1) >= b(h1, k1) && b(h1, k2) <= b(h1, k1);
    }
    verdict(
        5,
        zero == 0.0 && (one - 1.0).abs() < 1e-12 && monotone,
        &format!("bound(1)={zero}, bound(1+ln|X|)={one}, monotone on 500 random pairs: {monotone}"),
    );
}

/// Metrics of one seed for every variant the directional criteria compare.
#[derive(Debug)]
struct SeedRun {
    pretrained: (f64, f64, f64),
    safemax: Vec<(f64, (f64, f64, f64))>,
    relabel: (f64, f64, f64),
    seconds: f64,
}

impl SeedRun {
    fn at(&self, lambda: f64) -> (f64, f64, f64) {
        self.safemax.iter().find(|(l, _)| *l == lambda).expect("lambda was run").1
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Default pipeline per seed: 20k pretraining steps, then 500-step SAFEMax
/// at λ ∈ {0, 1, 100} and the relabel baseline from the same model.
fn toy_runs() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let config = ExperimentConfig::default();
        SEEDS
            .iter()
            .map(|&seed| {
                let started = Instant::now();
                let prep = prepare(&config, seed, None).unwrap();
                let m = |r: &diffusion_unlearn::eval::EvalReport| (r.ua_percent, r.mean_entropy_nats, r.frechet_mean);
                let pre = evaluate_model(&config, &prep, &prep.pretrained, config.pretrain.steps, None).unwrap();
                let safemax = [0.0, 1.0, 100.0]
                    .iter()
                    .map(|&l| {
                        let v = run_variant(&config, &prep, Method::Safemax, l).map_err(|(e, _)| e).unwrap();
                        (l, m(&v.evaluation.report))
                    })
                    .collect();
                let relabel = run_variant(&config, &prep, Method::Relabel, config.unlearn.config.lambda)
                    .map_err(|(e, _)| e)
                    .unwrap();
                let run = SeedRun {
                    pretrained: m(&pre.report),
                    safemax,
                    relabel: m(&relabel.evaluation.report),
                    seconds: started.elapsed().as_secs_f64(),
                };
                let _ = std::io::stderr().write_all(format!("  seed {seed}: {run:?}\n").as_bytes());
                run
            })
            .collect()
    })
}

fn med(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    median(&runs.iter().map(|r| Some(f(r))).collect::<Vec<_>>()).unwrap()
}

#[test]
fn criterion_06_unlearning_efficacy() {
    let runs = toy_runs();
    let ua = med(runs, |r| r.at(1.0).0);
    let h = med(runs, |r| r.at(1.0).1);
    let h_pre = med(runs, |r| r.pretrained.1);
    // the runtime budget covers only what this criterion needs, so the
    // extra λ and relabel variants are excluded pro rata
    let per_seed = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    verdict(
        6,
        ua >= 95.0 && h > h_pre && per_seed < 300.0,
        &format!(
            "median UA {ua:.1}% (need >= 95), median entropy {h:.4} vs pretrained {h_pre:.4} nats, slowest seed {per_seed:.0}s for all variants"
        ),
    );
}

#[test]
fn criterion_07_retention() {
    let runs = toy_runs();
    let fd_pre = med(runs, |r| r.pretrained.2);
    let fd_1 = med(runs, |r| r.at(1.0).2);
    let fd_0 = med(runs, |r| r.at(0.0).2);
    verdict(
        7,
        fd_1 <= 1.5 * fd_pre && fd_1 <= fd_0,
        &format!("median Fréchet: pretrained {fd_pre:.4}, lambda=1 {fd_1:.4}, lambda=0 {fd_0:.4}"),
    );
}

#[test]
fn criterion_08_lambda_ablation() {
    let runs = toy_runs();
    let ua_1 = med(runs, |r| r.at(1.0).0);
    let ua_100 = med(runs, |r| r.at(100.0).0);
    verdict(
        8,
        ua_100 <= ua_1,
        &format!("median UA: lambda=100 {ua_100:.1}%, lambda=1 {ua_1:.1}%"),
    );
}

#[test]
fn criterion_09_baseline_contrast() {
    let runs = toy_runs();
    let h_relabel = med(runs, |r| r.relabel.1);
    let h_safemax = med(runs, |r| r.at(1.0).1);
    let per_seed = runs.iter().filter(|r| r.relabel.1 < r.at(1.0).1).count();
    verdict(
        9,
        h_relabel < h_safemax,
        &format!(
            "median entropy: relabel {h_relabel:.2e}, SAFEMax {h_safemax:.2e} nats (relabel lower on {per_seed}/{} seeds)",
            runs.len()
        ),
    );
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let root = tempfile::tempdir().unwrap();
    let text = "pretrain.steps = 300\ndataset.n_per_class = 200\nunlearn.steps = 50\neval.n_samples = 100\n\
                eval.classifier_steps = 1000\nrun.seeds = 4\n";
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        cfg.output.dir = root.path().join(name);
        let outcome = run_experiment(&cfg).unwrap();
        let read = |f: &str| std::fs::read(outcome.output_dir.join(f)).unwrap();
        outputs.push((read("metrics.csv"), read("report.json"), read("seed-4/safemax.svg")));
    }
    let same = outputs[0] == outputs[1];

    let ck = load_checkpoint(&root.path().join("a/seed-4/safemax.ckpt")).unwrap();
    let copy = root.path().join("copy.ckpt");
    save_checkpoint(&copy, &ck).unwrap();
    let back = load_checkpoint(&copy).unwrap();
    let mut rng = rng_from_seed(2);
    let fresh = DenoiserModel::init(default_arch(), &mut rng).unwrap();
    let prov = Provenance {
        config_hash: config_hash(text),
        seed: 4,
        step_count: 0,
        phase: "init".into(),
    };
    let fresh_ck = Checkpoint::new(&fresh, &NoiseSchedule::default_desk(), prov);
    let fresh_back = Checkpoint::from_bytes(&fresh_ck.to_bytes()).unwrap();
    let exact = back.params.bit_identical(&ck.params)
        && back.schedule == ck.schedule
        && fresh_back.params.bit_identical(&fresh.params)
        && fresh_back.schedule == fresh_ck.schedule;
    verdict(
        10,
        same && exact,
        &format!("repeat run byte-identical (metrics, report, plot): {same}; checkpoint round trip bit-exact: {exact}"),
    );
}
