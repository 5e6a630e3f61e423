use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use diffusion_unlearn::diffusion::ancestral_sample;
use diffusion_unlearn::harness::checkpoint::load_checkpoint;
use diffusion_unlearn::harness::config::{ExperimentConfig, Method};
use diffusion_unlearn::harness::experiment::{
    evaluate_model, median, metrics_csv, prepare, resolve_output_dir, run_experiment, sweep_lambda, MetricsRow,
    OUTPUT_ROOT_ENV,
};
use diffusion_unlearn::harness::plot::{render_scatter, Series};
use diffusion_unlearn::rng_from_seed;

#[derive(Parser)]
#[command(name = "diffusion-unlearn", version, about = "Class unlearning for a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Safemax,
    Relabel,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the denoiser for every configured seed and save checkpoints.
    Train { config: PathBuf },
    /// Run the full pipeline: pretrain (or reuse), unlearn, evaluate.
    Unlearn {
        config: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Draw samples of one class from a checkpoint into an SVG scatter.
    Sample {
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-evaluate the checkpoints found in the output directory.
    Evaluate { config: PathBuf },
    /// SAFEMax at several lambda values with shared seeds.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
    },
    /// Summarise the metrics tables in a run directory.
    Report { dir: PathBuf },
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ExperimentConfig::parse(&text)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let out = resolve_output_dir(&cfg.output.dir);
            diffusion_unlearn::harness::experiment::ensure_dir(&out)?;
            for &seed in &cfg.seeds {
                let prep = prepare(&cfg, seed, Some(&out))?;
                let state = if prep.pretrain_reused { "reused" } else { "trained" };
                println!(
                    "seed {seed}: {state} {} (classifier held-out accuracy {:.4})",
                    out.join(format!("seed-{seed}/pretrained.ckpt")).display(),
                    prep.classifier.holdout_accuracy
                );
            }
        }
        Command::Unlearn { config, method, lambda } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.unlearn.method = match m {
                    MethodArg::Safemax => Method::Safemax,
                    MethodArg::Relabel => Method::Relabel,
                };
            }
            if let Some(l) = lambda {
                cfg.set("unlearn.lambda", &l.to_string())?;
                cfg.validate()?;
            }
            let outcome = run_experiment(&cfg)?;
            print!("{}", metrics_csv(cfg.dataset.num_classes, &outcome.rows));
            eprintln!("artifacts in {}", outcome.output_dir.display());
        }
        Command::Sample {
            checkpoint,
            class,
            n,
            out,
            seed,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let model = ck.model()?;
            if class >= model.arch.num_classes {
                bail!("class {class} out of range for {} classes", model.arch.num_classes);
            }
            let samples = ancestral_sample(&model, class, &ck.schedule, n, &mut rng_from_seed(seed))?;
            let series = [Series {
                label: format!("class {class}"),
                points: &samples,
            }];
            render_scatter(&series, &format!("{} samples, class {class}", ck.provenance.phase), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { config } => {
            let cfg = load_config(&config)?;
            let out = resolve_output_dir(&cfg.output.dir);
            if !out.is_dir() {
                bail!("output directory {} does not exist; run `train` or `unlearn` first", out.display());
            }
            let k = cfg.dataset.num_classes;
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let prep = prepare(&cfg, seed, Some(&out))?;
                let pre = evaluate_model(&cfg, &prep, &prep.pretrained, cfg.pretrain.steps, None)?;
                rows.push(MetricsRow::from_report("pretrained", seed, None, k, &pre.report));
                for method in [Method::Safemax, Method::Relabel] {
                    let path = out.join(format!("seed-{seed}/{}.ckpt", method.phase()));
                    if !path.is_file() {
                        continue;
                    }
                    let ck = load_checkpoint(&path)?;
                    let ev = evaluate_model(&cfg, &prep, &ck.model()?, ck.provenance.step_count as usize, None)?;
                    let lambda = (method == Method::Safemax).then_some(cfg.unlearn.config.lambda);
                    rows.push(MetricsRow::from_report(method.phase(), seed, lambda, k, &ev.report));
                }
            }
            let csv = metrics_csv(k, &rows);
            fs::write(out.join("evaluation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Sweep { config, lambda } => {
            let cfg = load_config(&config)?;
            let outcome = sweep_lambda(&cfg, &lambda)?;
            print!("{}", metrics_csv(cfg.dataset.num_classes, &outcome.rows));
            for (seed, value, err) in &outcome.failures {
                eprintln!("failed: seed {seed}, lambda {value}: {err}");
            }
            eprintln!("table in {}", outcome.output_dir.join("sweep.csv").display());
        }
        Command::Report { dir } => report(&dir)?,
    }
    Ok(())
}

/// Median UA, entropy and Fréchet distance per (phase, lambda) group.
fn report(dir: &Path) -> anyhow::Result<()> {
    if !dir.is_dir() {
        bail!("{} is not a directory (output root override: {OUTPUT_ROOT_ENV})", dir.display());
    }
    let mut found = false;
    for name in ["metrics.csv", "sweep.csv", "evaluation.csv"] {
        let path = dir.join(name);
        let Ok(text) = fs::read_to_string(&path) else {
            continue;
        };
        found = true;
        println!("{name}");
        println!("{:<12} {:>8} {:>6} {:>10} {:>12} {:>12}", "phase", "lambda", "runs", "ua_percent", "entropy_nats", "frechet_mean");
        // (phase, lambda cell, [ua, entropy, frechet] per row)
        type Group = (String, String, Vec<[Option<f64>; 3]>);
        let mut groups: Vec<Group> = Vec::new();
        for line in text.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() < 7 || cells[0] == "median" {
                continue;
            }
            let num = |i: usize| cells[i].parse::<f64>().ok();
            let key = (cells[0].to_string(), cells[2].to_string());
            let vals = [num(4), num(5), num(6)];
            match groups.iter_mut().find(|g| g.0 == key.0 && g.1 == key.1) {
                Some(g) => g.2.push(vals),
                None => groups.push((key.0, key.1, vec![vals])),
            }
        }
        for (phase, lambda, vals) in groups {
            let col = |j: usize| {
                median(&vals.iter().map(|v| v[j]).collect::<Vec<_>>())
                    .map(|m| format!("{m:.4}"))
                    .unwrap_or_else(|| "-".into())
            };
            let lambda = if lambda.is_empty() { "-".to_string() } else { lambda };
            println!(
                "{phase:<12} {lambda:>8} {:>6} {:>10} {:>12} {:>12}",
                vals.len(),
                col(0),
                col(1),
                col(2)
            );
        }
        println!();
    }
    if !found {
        bail!("no metrics tables in {}", dir.display());
    }
    Ok(())
}
