//! Pretrain, unlearn, evaluate, and write every artifact of a run.
//!
//! Output layout under the resolved output directory:
//!
//! ```text
//! metrics.csv  report.json  timing.json
//! seed-<s>/pretrained.ckpt  seed-<s>/<phase>.ckpt
//! seed-<s>/unlearn_log.csv  seed-<s>/pretrained.svg  seed-<s>/<phase>.svg
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::denoiser::{train, DenoiserModel};
use crate::diffusion::{LabeledDataset, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, fano_bound, noise_vs_data_entropy, train_classifier, Classifier, EvalReport, EvalSettings, Evaluation,
    FanoDiagnostic, HOLDOUT_EVERY,
};
use crate::gradcore::Array;
use crate::harness::checkpoint::{config_hash, hex, load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::dataset::generate_toy_dataset;
use crate::harness::plot::{render_scatter, Series};
use crate::rng_from_seed;
use crate::unlearn::{run_relabel_into, run_unlearning_into, UnlearnLog};

/// Environment variable that re-roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DIFFUSION_UNLEARN_OUT";

/// Seed for one stage of one run, mixed so stages never share a stream.
pub fn derive_seed(stage: &str, section_seed: u64, run_seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(section_seed.to_le_bytes());
    h.update(run_seed.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Output directory after applying [`OUTPUT_ROOT_ENV`].
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Creates `dir` if needed; its parent must already exist.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Error::Path(format!(
            "cannot create {}: parent directory does not exist",
            dir.display()
        )));
    }
    fs::create_dir(dir).map_err(|e| Error::Path(format!("cannot create {}: {e}", dir.display())))
}

/// Everything shared by the unlearning variants of one run seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    /// Rows the denoiser and classifier train on.
    pub train: LabeledDataset,
    /// Held-out rows used as the Fréchet reference.
    pub reference: LabeledDataset,
    pub schedule: NoiseSchedule,
    pub classifier: Classifier,
    pub pretrained: DenoiserModel,
    pub pretrain_seconds: f64,
    pub pretrain_reused: bool,
    /// Mean classifier entropy on `N(0, I)` inputs and on forget-class data.
    pub noise_entropy: f64,
    pub data_entropy: f64,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Builds the dataset, pretrains the denoiser (or reloads a checkpoint with
/// matching provenance from `out`) and trains the evaluation classifier.
pub fn prepare(config: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Prepared> {
    let d = &config.dataset;
    let dataset = generate_toy_dataset(
        d.num_classes,
        d.n_per_class,
        d.geometry,
        d.noise_scale,
        derive_seed("dataset", d.seed, seed),
    )
    .map_err(|e| e.at_stage("dataset"))?;
    let (train_part, reference) = dataset.split_every(HOLDOUT_EVERY).map_err(|e| e.at_stage("dataset"))?;
    let schedule = config.schedule.build().map_err(|e| e.at_stage("schedule"))?;

    let identity = config_hash(&config.pretrain_identity(seed));
    let ckpt_path = out.map(|o| seed_dir(o, seed).join("pretrained.ckpt"));
    let cached = ckpt_path
        .as_deref()
        .filter(|p| p.is_file())
        .and_then(|p| load_checkpoint(p).ok())
        .filter(|c| c.provenance.config_hash == identity && c.provenance.phase == "pretrained");
    let started = Instant::now();
    let (pretrained, reused) = match cached {
        Some(c) => (c.model().map_err(|e| e.at_stage("pretrain"))?, true),
        None => {
            let mut rng = rng_from_seed(derive_seed("model", config.model.seed, seed));
            let mut model = DenoiserModel::init(config.arch(), &mut rng).map_err(|e| e.at_stage("pretrain"))?;
            let mut tc = config.pretrain;
            tc.seed = derive_seed("pretrain", tc.seed, seed);
            train(&mut model, &train_part, &schedule, &tc).map_err(|e| e.at_stage("pretrain"))?;
            if let (Some(path), Some(o)) = (ckpt_path.as_deref(), out) {
                ensure_dir(&seed_dir(o, seed))?;
                let prov = Provenance {
                    config_hash: identity,
                    seed,
                    step_count: config.pretrain.steps as u64,
                    phase: "pretrained".into(),
                };
                save_checkpoint(path, &Checkpoint::new(&model, &schedule, prov)).map_err(|e| e.at_stage("pretrain"))?;
            }
            (model, false)
        }
    };
    let pretrain_seconds = started.elapsed().as_secs_f64();

    let mut cc = config.eval.classifier;
    cc.seed = derive_seed("classifier", cc.seed, seed);
    let classifier = train_classifier(&dataset, &cc).map_err(|e| e.at_stage("classifier"))?;
    let mut rng = rng_from_seed(derive_seed("linkage", config.eval.seed, seed));
    let (noise_entropy, data_entropy) =
        noise_vs_data_entropy(&classifier, &dataset, config.unlearn.config.forget_class, &mut rng)
            .map_err(|e| e.at_stage("classifier"))?;
    Ok(Prepared {
        seed,
        train: train_part,
        reference,
        schedule,
        classifier,
        pretrained,
        pretrain_seconds,
        pretrain_reused: reused,
        noise_entropy,
        data_entropy,
    })
}

/// Samples and scores `model` with the run's evaluation stream. Every model
/// of a run is scored on the same random numbers.
pub fn evaluate_model(
    config: &ExperimentConfig,
    prep: &Prepared,
    model: &DenoiserModel,
    steps_executed: usize,
    rte_seconds: Option<f64>,
) -> Result<Evaluation> {
    let settings = EvalSettings {
        forget_class: config.unlearn.config.forget_class,
        n_samples: config.eval.n_samples,
        rte_seconds,
        steps_executed,
    };
    let mut rng = rng_from_seed(derive_seed("eval", config.eval.seed, prep.seed));
    evaluate(model, &prep.classifier, &prep.reference, &prep.schedule, &settings, &mut rng)
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub method: Method,
    pub lambda: f64,
    pub model: DenoiserModel,
    pub log: UnlearnLog,
    pub evaluation: Evaluation,
    pub rte_seconds: f64,
}

/// Unlearns a copy of the pretrained model with `method` at `lambda` and
/// evaluates it. On failure the partial log is returned with the error.
pub fn run_variant(
    config: &ExperimentConfig,
    prep: &Prepared,
    method: Method,
    lambda: f64,
) -> std::result::Result<VariantOutcome, (Error, UnlearnLog)> {
    let mut uc = config.unlearn.config;
    uc.lambda = lambda;
    uc.seed = derive_seed("unlearn", uc.seed, prep.seed);
    let mut model = prep.pretrained.clone();
    let mut log = UnlearnLog::default();
    let started = Instant::now();
    let outcome = match method {
        Method::Safemax => run_unlearning_into(&mut model, &prep.train, &prep.schedule, &uc, &mut log),
        Method::Relabel => run_relabel_into(
            &mut model,
            &prep.train,
            &prep.schedule,
            &uc,
            config.relabel_target(),
            &mut log,
        ),
    };
    let rte_seconds = started.elapsed().as_secs_f64();
    if let Err(e) = outcome {
        return Err((e.at_stage("unlearn"), log));
    }
    let recorded = config.output.record_timing.then_some(rte_seconds);
    match evaluate_model(config, prep, &model, uc.steps, recorded) {
        Ok(evaluation) => Ok(VariantOutcome {
            method,
            lambda,
            model,
            log,
            evaluation,
            rte_seconds,
        }),
        Err(e) => Err((e.at_stage("evaluate"), log)),
    }
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub phase: String,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub steps: Option<usize>,
    pub ua_percent: Option<f64>,
    pub mean_entropy_nats: Option<f64>,
    pub frechet_mean: Option<f64>,
    /// One entry per class; `None` for the forget class.
    pub frechet: Vec<Option<f64>>,
    pub rte_seconds: Option<f64>,
}

impl MetricsRow {
    pub fn from_report(phase: &str, seed: u64, lambda: Option<f64>, num_classes: usize, r: &EvalReport) -> Self {
        Self {
            phase: phase.to_string(),
            seed: Some(seed),
            lambda,
            steps: Some(r.steps_executed),
            ua_percent: Some(r.ua_percent),
            mean_entropy_nats: Some(r.mean_entropy_nats),
            frechet_mean: Some(r.frechet_mean),
            frechet: (0..num_classes).map(|c| r.frechet_per_class.get(&c).copied()).collect(),
            rte_seconds: r.rte_seconds,
        }
    }

    fn failed(seed: u64, lambda: Option<f64>, num_classes: usize) -> Self {
        Self {
            phase: "failed".into(),
            seed: Some(seed),
            lambda,
            steps: None,
            ua_percent: None,
            mean_entropy_nats: None,
            frechet_mean: None,
            frechet: vec![None; num_classes],
            rte_seconds: None,
        }
    }
}

pub fn metrics_header(num_classes: usize) -> String {
    let mut h = String::from("phase,seed,lambda,steps,ua_percent,mean_entropy_nats,frechet_mean");
    for c in 0..num_classes {
        let _ = write!(h, ",frechet_c{c}");
    }
    h.push_str(",rte_seconds");
    h
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(num_classes: usize, rows: &[MetricsRow]) -> String {
    let mut out = metrics_header(num_classes);
    out.push('\n');
    for r in rows {
        let mut cells = vec![
            r.phase.clone(),
            cell(r.seed),
            cell(r.lambda),
            cell(r.steps),
            cell(r.ua_percent),
            cell(r.mean_entropy_nats),
            cell(r.frechet_mean),
        ];
        cells.extend(r.frechet.iter().map(|v| cell(*v)));
        cells.push(cell(r.rte_seconds));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub classifier_holdout_accuracy: f64,
    pub noise_entropy_nats: f64,
    pub forget_data_entropy_nats: f64,
    pub pretrained: EvalReport,
    pub unlearned: Option<EvalReport>,
    /// Fano bound with the classifier's predictive entropy on the
    /// forget-conditioned samples as `H(x | x_hat)` over the `K` classes.
    pub fano: Option<FanoDiagnostic>,
    pub final_forget_loss: Option<f64>,
    pub final_retain_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config_sha256: String,
    pub method: String,
    pub forget_class: usize,
    pub lambda: f64,
    pub runs: Vec<SeedReport>,
}

#[derive(Clone, Debug, Serialize)]
struct SeedTiming {
    seed: u64,
    pretrain_seconds: f64,
    pretrain_reused: bool,
    rte_seconds: Option<f64>,
}

/// Paths and in-memory results of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub report: RunReport,
}

fn write_samples_svg(path: &Path, title: &str, samples: &[Array]) -> Result<()> {
    let series: Vec<Series> = samples
        .iter()
        .enumerate()
        .map(|(c, points)| Series {
            label: format!("class {c}"),
            points,
        })
        .collect();
    render_scatter(&series, title, path)
}

/// Runs the full pipeline for every configured seed and writes all
/// artifacts. A failing stage stops the run after persisting the metrics
/// and logs gathered so far.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let out = resolve_output_dir(&config.output.dir);
    ensure_dir(&out)?;
    let k = config.dataset.num_classes;
    let method = config.unlearn.method;
    let lambda = config.unlearn.config.lambda;
    let identity = config.identity_text();
    let mut rows = Vec::new();
    let mut report = RunReport {
        config_sha256: hex(&config_hash(&identity)),
        method: method.phase().into(),
        forget_class: config.unlearn.config.forget_class,
        lambda,
        runs: Vec::new(),
    };
    let mut timings = Vec::new();
    fs::write(out.join("config.txt"), config.render())?;

    let persist = |rows: &[MetricsRow], report: &RunReport, timings: &[SeedTiming]| -> Result<()> {
        fs::write(out.join("metrics.csv"), metrics_csv(k, rows))?;
        fs::write(out.join("report.json"), to_json(report)? + "\n")?;
        fs::write(out.join("timing.json"), to_json(&timings)? + "\n")?;
        Ok(())
    };

    for &seed in &config.seeds {
        let result = run_seed(config, seed, &out, method, lambda, &identity);
        match result {
            Ok((seed_rows, seed_report, timing)) => {
                rows.extend(seed_rows);
                report.runs.push(seed_report);
                timings.push(timing);
            }
            Err((e, seed_rows, seed_report)) => {
                rows.extend(seed_rows);
                if let Some(r) = seed_report {
                    report.runs.push(r);
                }
                persist(&rows, &report, &timings)?;
                return Err(e);
            }
        }
    }
    persist(&rows, &report, &timings)?;
    Ok(ExperimentOutcome {
        output_dir: out,
        rows,
        report,
    })
}

type SeedResult = std::result::Result<
    (Vec<MetricsRow>, SeedReport, SeedTiming),
    (Error, Vec<MetricsRow>, Option<SeedReport>),
>;

#[allow(clippy::result_large_err)]
fn run_seed(config: &ExperimentConfig, seed: u64, out: &Path, method: Method, lambda: f64, identity: &str) -> SeedResult {
    let k = config.dataset.num_classes;
    let dir = seed_dir(out, seed);
    if let Err(e) = ensure_dir(&dir) {
        return Err((e, vec![], None));
    }
    let prep = prepare(config, seed, Some(out)).map_err(|e| (e, vec![], None))?;
    let pre = evaluate_model(config, &prep, &prep.pretrained, config.pretrain.steps, None)
        .map_err(|e| (e.at_stage("evaluate-pretrained"), vec![], None))?;
    let mut rows = vec![MetricsRow::from_report("pretrained", seed, None, k, &pre.report)];
    let mut seed_report = SeedReport {
        seed,
        classifier_holdout_accuracy: prep.classifier.holdout_accuracy,
        noise_entropy_nats: prep.noise_entropy,
        forget_data_entropy_nats: prep.data_entropy,
        pretrained: pre.report.clone(),
        unlearned: None,
        fano: None,
        final_forget_loss: None,
        final_retain_loss: None,
        error: None,
    };
    let write = |r: Result<()>| r.map_err(|e| e.at_stage("write"));
    if let Err(e) = write(write_samples_svg(
        &dir.join("pretrained.svg"),
        &format!("pretrained, seed {seed}"),
        &pre.samples,
    )) {
        return Err((e, rows, Some(seed_report)));
    }

    let variant = match run_variant(config, &prep, method, lambda) {
        Ok(v) => v,
        Err((e, log)) => {
            let _ = fs::write(dir.join("unlearn_log.csv"), log.to_csv());
            seed_report.error = Some(e.to_string());
            rows.push(MetricsRow::failed(seed, lambda_cell(method, lambda), k));
            return Err((e, rows, Some(seed_report)));
        }
    };
    let phase = method.phase();
    let ev = &variant.evaluation.report;
    rows.push(MetricsRow::from_report(phase, seed, lambda_cell(method, lambda), k, ev));
    seed_report.unlearned = Some(ev.clone());
    seed_report.fano = fano_bound(ev.mean_entropy_nats, k as u64).ok();
    seed_report.final_forget_loss = variant.log.records.last().map(|r| r.forget_loss);
    seed_report.final_retain_loss = variant.log.records.last().map(|r| r.retain_loss);
    let prov = Provenance {
        config_hash: config_hash(identity),
        seed,
        step_count: config.unlearn.config.steps as u64,
        phase: phase.into(),
    };
    let saved = fs::write(dir.join("unlearn_log.csv"), variant.log.to_csv())
        .map_err(Error::from)
        .and_then(|_| {
            save_checkpoint(
                &dir.join(format!("{phase}.ckpt")),
                &Checkpoint::new(&variant.model, &prep.schedule, prov),
            )
        })
        .and_then(|_| {
            write_samples_svg(
                &dir.join(format!("{phase}.svg")),
                &format!("{phase}, seed {seed}"),
                &variant.evaluation.samples,
            )
        });
    if let Err(e) = write(saved) {
        return Err((e, rows, Some(seed_report)));
    }
    let timing = SeedTiming {
        seed,
        pretrain_seconds: prep.pretrain_seconds,
        pretrain_reused: prep.pretrain_reused,
        rte_seconds: Some(variant.rte_seconds),
    };
    Ok((rows, seed_report, timing))
}

fn lambda_cell(method: Method, lambda: f64) -> Option<f64> {
    (method == Method::Safemax).then_some(lambda)
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Contract(format!("cannot serialize report: {e}")))
}

/// Median of the present values, `None` if there are none.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn median_row(lambda: f64, steps: usize, rows: &[&MetricsRow], num_classes: usize) -> MetricsRow {
    let pick = |f: &dyn Fn(&MetricsRow) -> Option<f64>| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    MetricsRow {
        phase: "median".into(),
        seed: None,
        lambda: Some(lambda),
        steps: Some(steps),
        ua_percent: pick(&|r| r.ua_percent),
        mean_entropy_nats: pick(&|r| r.mean_entropy_nats),
        frechet_mean: pick(&|r| r.frechet_mean),
        frechet: (0..num_classes).map(|c| pick(&|r| r.frechet[c])).collect(),
        rte_seconds: pick(&|r| r.rte_seconds),
    }
}

/// Result of a λ sweep: the comparison table and the failures it skipped.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub output_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<(u64, f64, String)>,
}

/// SAFEMax at each λ in `values` for every configured seed, sharing each
/// seed's pretrained model and evaluation stream. Writes `sweep.csv` with
/// the pretrained rows, one row per (λ, seed) and a median row per λ.
pub fn sweep_lambda(config: &ExperimentConfig, values: &[f64]) -> Result<SweepOutcome> {
    config.validate()?;
    if values.is_empty() {
        return Err(Error::Contract("sweep needs at least one value".into()));
    }
    for (i, v) in values.iter().enumerate() {
        if !(*v >= 0.0) || !v.is_finite() {
            return Err(Error::config("unlearn.lambda", format!("sweep value {v} must be finite and non-negative")));
        }
        if values[..i].contains(v) {
            return Err(Error::Contract(format!("sweep value {v} appears more than once")));
        }
    }
    let out = resolve_output_dir(&config.output.dir);
    ensure_dir(&out)?;
    let k = config.dataset.num_classes;
    let steps = config.unlearn.config.steps;
    let mut pretrained_rows = Vec::new();
    let mut per_value: Vec<Vec<MetricsRow>> = vec![Vec::new(); values.len()];
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        ensure_dir(&seed_dir(&out, seed))?;
        let prep = match prepare(config, seed, Some(&out)) {
            Ok(p) => p,
            Err(e) => {
                for (i, &v) in values.iter().enumerate() {
                    per_value[i].push(MetricsRow::failed(seed, Some(v), k));
                    failures.push((seed, v, e.to_string()));
                }
                continue;
            }
        };
        match evaluate_model(config, &prep, &prep.pretrained, config.pretrain.steps, None) {
            Ok(ev) => pretrained_rows.push(MetricsRow::from_report("pretrained", seed, None, k, &ev.report)),
            Err(e) => failures.push((seed, f64::NAN, e.at_stage("evaluate-pretrained").to_string())),
        }
        for (i, &v) in values.iter().enumerate() {
            match run_variant(config, &prep, Method::Safemax, v) {
                Ok(var) => per_value[i].push(MetricsRow::from_report(
                    "safemax",
                    seed,
                    Some(v),
                    k,
                    &var.evaluation.report,
                )),
                Err((e, _)) => {
                    per_value[i].push(MetricsRow::failed(seed, Some(v), k));
                    failures.push((seed, v, e.to_string()));
                }
            }
        }
    }
    let mut rows = pretrained_rows;
    for (i, &v) in values.iter().enumerate() {
        let ok: Vec<&MetricsRow> = per_value[i].iter().filter(|r| r.phase != "failed").collect();
        let med = median_row(v, steps, &ok, k);
        rows.append(&mut per_value[i]);
        rows.push(med);
    }
    fs::write(out.join("sweep.csv"), metrics_csv(k, &rows))?;
    Ok(SweepOutcome {
        output_dir: out,
        rows,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_columns() {
        assert_eq!(
            metrics_header(3),
            "phase,seed,lambda,steps,ua_percent,mean_entropy_nats,frechet_mean,frechet_c0,frechet_c1,frechet_c2,rte_seconds"
        );
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[Some(3.0), None, Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median(&[Some(4.0), Some(1.0)]), Some(2.5));
        assert_eq!(median(&[None]), None);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(derive_seed("dataset", 0, 0), derive_seed("model", 0, 0));
        assert_ne!(derive_seed("dataset", 0, 0), derive_seed("dataset", 0, 1));
        assert_eq!(derive_seed("eval", 3, 4), derive_seed("eval", 3, 4));
    }

    #[test]
    fn missing_parent_is_a_path_error() {
        let tmp = tempfile::tempdir().unwrap();
        let nested = tmp.path().join("a").join("b");
        assert!(matches!(ensure_dir(&nested), Err(Error::Path(_))));
        let child = tmp.path().join("a");
        ensure_dir(&child).unwrap();
        assert!(child.is_dir());
    }
}
