use std::fs;
use std::path::Path;

use diffusion_unlearn::denoiser::DenoiserModel;
use diffusion_unlearn::diffusion::NoiseSchedule;
use diffusion_unlearn::error::Error;
use diffusion_unlearn::harness::checkpoint::{config_hash, Checkpoint, Provenance};
use diffusion_unlearn::harness::config::ExperimentConfig;
use diffusion_unlearn::harness::dataset::{class_means, Geometry};
use diffusion_unlearn::harness::experiment::{
    ensure_dir, resolve_output_dir, run_experiment, sweep_lambda, OUTPUT_ROOT_ENV,
};
use diffusion_unlearn::rng_from_seed;
use proptest::prelude::*;

/// Small enough to run the whole pipeline in a couple of seconds.
fn tiny_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        "dataset.n_per_class = 200\n\
         model.hidden_width = 32\n\
         model.hidden_depth = 2\n\
         pretrain.steps = 300\n\
         pretrain.batch_size = 64\n\
         unlearn.steps = 20\n\
         unlearn.batch_size_forget = 16\n\
         unlearn.batch_size_retain = 16\n\
         eval.n_samples = 60\n\
         eval.classifier_steps = 800\n\
         output.dir = {}\n",
        dir.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn config_key(e: &Error) -> Option<&str> {
    match e {
        Error::Config { key, .. } => Some(key),
        _ => None,
    }
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    assert_eq!(ExperimentConfig::parse("# only a comment\n\n").unwrap(), ExperimentConfig::default());
}

#[test]
fn config_errors_name_the_key() {
    let e = ExperimentConfig::parse("unlearn.lambda = -1").unwrap_err();
    assert_eq!(config_key(&e), Some("unlearn.lambda"));
    let e = ExperimentConfig::parse("unlearn.lamda = 1").unwrap_err();
    assert_eq!(config_key(&e), Some("unlearn.lamda"));
    let e = ExperimentConfig::parse("model.seed = 1\nmodel.seed = 2").unwrap_err();
    assert_eq!(config_key(&e), Some("model.seed"));
    let e = ExperimentConfig::parse("dataset.geometry = spiral").unwrap_err();
    assert_eq!(config_key(&e), Some("dataset.geometry"));
    let e = ExperimentConfig::parse("pretrain.steps = many").unwrap_err();
    assert_eq!(config_key(&e), Some("pretrain.steps"));
}

prop_compose! {
    fn any_config()(
        k in 2usize..7,
        n in 5usize..3000,
        grid in any::<bool>(),
        noise in 0.01f64..2.0,
        lambda in 0.0f64..1e3,
        steps in 0usize..5000,
        lr in 1e-5f64..1.0,
        trajectory in any::<bool>(),
        relabel in any::<bool>(),
        seeds in prop::collection::vec(0u64..1_000_000, 1..4),
        timing in any::<bool>(),
        beta_max in 0.05f64..0.5,
    ) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        for (key, value) in [
            ("dataset.num_classes", k.to_string()),
            ("dataset.n_per_class", n.to_string()),
            ("dataset.geometry", if grid { "grid" } else { "ring" }.to_string()),
            ("dataset.noise_scale", noise.to_string()),
            ("schedule.beta_max", beta_max.to_string()),
            ("unlearn.lambda", lambda.to_string()),
            ("unlearn.steps", steps.to_string()),
            ("unlearn.learning_rate_forget", lr.to_string()),
            ("unlearn.eps_t_mode", if trajectory { "trajectory" } else { "independent" }.to_string()),
            ("unlearn.method", if relabel { "relabel" } else { "safemax" }.to_string()),
            ("unlearn.forget_class", (k - 1).to_string()),
            ("run.seeds", seeds.join(",")),
            ("output.record_timing", timing.to_string()),
        ] {
            c.set(key, &value).unwrap();
        }
        c
    }
}

proptest! {
    #[test]
    fn render_then_parse_round_trips(config in any_config()) {
        let text = config.render();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &config);
        prop_assert_eq!(back.render(), text);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0.0f64..1.0, flip in 0usize..10_000) {
        let model = DenoiserModel::init(ExperimentConfig::default().arch(), &mut rng_from_seed(0)).unwrap();
        let prov = Provenance {
            config_hash: config_hash("x"),
            seed: 0,
            step_count: 3,
            phase: "pretrained".into(),
        };
        let bytes = Checkpoint::new(&model, &NoiseSchedule::default_desk(), prov).to_bytes();
        let at = (cut * bytes.len() as f64) as usize;
        prop_assert!(matches!(Checkpoint::from_bytes(&bytes[..at]), Err(Error::Integrity(_))));

        // flip one bit past the version field
        let mut damaged = bytes.clone();
        let i = 12 + flip % (bytes.len() - 12);
        damaged[i] ^= 1;
        prop_assert!(matches!(Checkpoint::from_bytes(&damaged), Err(Error::Integrity(_))));
    }
}

#[test]
fn ring_means_sit_on_the_axes() {
    let m = class_means(4, Geometry::Ring);
    let expected = [[4.0, 0.0], [0.0, 4.0], [-4.0, 0.0], [0.0, -4.0]];
    for (a, b) in m.iter().zip(expected) {
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12, "{a:?}");
    }
}

#[test]
fn output_root_override_applies_to_relative_dirs() {
    std::env::set_var(OUTPUT_ROOT_ENV, "/tmp/override-root");
    let rel = resolve_output_dir(Path::new("runs/a"));
    let abs = resolve_output_dir(Path::new("/data/runs/a"));
    std::env::remove_var(OUTPUT_ROOT_ENV);
    assert_eq!(rel, Path::new("/tmp/override-root/runs/a"));
    assert_eq!(abs, Path::new("/data/runs/a"));
    assert_eq!(resolve_output_dir(Path::new("runs/a")), Path::new("runs/a"));
}

#[test]
fn output_dir_needs_an_existing_parent() {
    let root = tempfile::tempdir().unwrap();
    let fresh = root.path().join("fresh");
    ensure_dir(&fresh).unwrap();
    assert!(fresh.is_dir());
    let orphan = root.path().join("missing/child");
    assert!(matches!(ensure_dir(&orphan), Err(Error::Path(_))));
}

#[test]
fn pipeline_outputs_are_byte_identical_across_reruns() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let first = run_experiment(&tiny_config(&a)).unwrap();
    run_experiment(&tiny_config(&b)).unwrap();
    for name in ["metrics.csv", "report.json", "seed-0/pretrained.svg", "seed-0/safemax.svg", "seed-0/unlearn_log.csv"] {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs between reruns");
    }
    for name in ["config.txt", "timing.json", "seed-0/pretrained.ckpt", "seed-0/safemax.ckpt"] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
    let header = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "phase,seed,lambda,steps,ua_percent,mean_entropy_nats,frechet_mean,frechet_c0,frechet_c1,frechet_c2,frechet_c3,rte_seconds"
    );
    assert_eq!(first.rows.len(), 2);
    assert_eq!(first.rows[1].phase, "safemax");
    assert!(first.rows.iter().all(|r| r.frechet[0].is_none() && r.rte_seconds.is_none()));
}

#[test]
fn single_value_sweep_matches_a_single_run() {
    let root = tempfile::tempdir().unwrap();
    let single = run_experiment(&tiny_config(&root.path().join("single"))).unwrap();
    let sweep = sweep_lambda(&tiny_config(&root.path().join("sweep")), &[1.0]).unwrap();
    assert!(sweep.failures.is_empty());
    let rows: Vec<_> = sweep.rows.iter().filter(|r| r.phase != "median").cloned().collect();
    assert_eq!(rows, single.rows);
    assert!(root.path().join("sweep/sweep.csv").is_file());
}

#[test]
fn sweep_rejects_bad_value_lists() {
    let root = tempfile::tempdir().unwrap();
    let config = tiny_config(&root.path().join("s"));
    assert!(matches!(sweep_lambda(&config, &[]), Err(Error::Contract(_))));
    assert!(matches!(sweep_lambda(&config, &[1.0, 0.0, 1.0]), Err(Error::Contract(_))));
    let e = sweep_lambda(&config, &[-2.0]).unwrap_err();
    assert_eq!(config_key(&e), Some("unlearn.lambda"));
}
