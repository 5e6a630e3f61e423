//! Flat `section.key = value` experiment configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Every
//! key has a default, so an empty file is a valid config. Unknown and
//! repeated keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::denoiser::{DenoiserArch, TrainConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::ClassifierConfig;
use crate::harness::dataset::Geometry;
use crate::unlearn::{default_relabel_target, UnlearnConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Safemax,
    Relabel,
}

impl Method {
    /// Phase label used in metrics rows.
    pub fn phase(self) -> &'static str {
        match self {
            Method::Safemax => "safemax",
            Method::Relabel => "relabel",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safemax" => Ok(Method::Safemax),
            "relabel" => Ok(Method::Relabel),
            other => Err(Error::config("unlearn.method", format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub geometry: Geometry,
    pub noise_scale: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnlearnSpec {
    pub method: Method,
    /// `None` means the class after the forget class.
    pub relabel_target: Option<usize>,
    pub config: UnlearnConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Wall-clock timings make outputs non-reproducible, so they are only
    /// written into metrics and reports on request.
    pub record_timing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    pub unlearn: UnlearnSpec,
    pub eval: EvalSpec,
    /// Run seeds; each one re-derives every stage seed.
    pub seeds: Vec<u64>,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                num_classes: 4,
                n_per_class: 1000,
                geometry: Geometry::Ring,
                noise_scale: 0.5,
                seed: 0,
            },
            schedule: ScheduleSpec {
                steps: 100,
                beta_min: 1e-4,
                beta_max: 0.2,
            },
            model: ModelSpec {
                hidden_width: 128,
                hidden_depth: 3,
                embed_dim: 16,
                seed: 0,
            },
            pretrain: TrainConfig::default(),
            unlearn: UnlearnSpec {
                method: Method::Safemax,
                relabel_target: None,
                config: UnlearnConfig::default(),
            },
            eval: EvalSpec {
                n_samples: 500,
                seed: 0,
                classifier: ClassifierConfig::default(),
            },
            seeds: vec![0],
            output: OutputSpec {
                dir: PathBuf::from("runs/default"),
                record_timing: false,
            },
        }
    }
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "dataset.num_classes",
    "dataset.n_per_class",
    "dataset.geometry",
    "dataset.noise_scale",
    "dataset.seed",
    "schedule.steps",
    "schedule.beta_min",
    "schedule.beta_max",
    "model.hidden_width",
    "model.hidden_depth",
    "model.embed_dim",
    "model.seed",
    "pretrain.steps",
    "pretrain.batch_size",
    "pretrain.learning_rate",
    "pretrain.momentum",
    "pretrain.seed",
    "unlearn.method",
    "unlearn.forget_class",
    "unlearn.lambda",
    "unlearn.steps",
    "unlearn.learning_rate_forget",
    "unlearn.learning_rate_retain",
    "unlearn.batch_size_forget",
    "unlearn.batch_size_retain",
    "unlearn.eps_t_mode",
    "unlearn.momentum",
    "unlearn.seed",
    "unlearn.relabel_target",
    "eval.n_samples",
    "eval.seed",
    "eval.classifier_hidden_width",
    "eval.classifier_steps",
    "eval.classifier_learning_rate",
    "eval.classifier_batch_size",
    "eval.classifier_seed",
    "run.seeds",
    "output.dir",
    "output.record_timing",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}` as {}", short_type::<T>())))
}

fn short_type<T>() -> &'static str {
    let full = std::any::type_name::<T>();
    full.rsplit("::").next().unwrap_or(full)
}

fn parse_seeds(key: &str, raw: &str) -> Result<Vec<u64>> {
    raw.split(',').map(|s| parse_value(key, s.trim())).collect()
}

impl ExperimentConfig {
    /// Parses and validates config text, filling unspecified keys with
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `section.key = value`, got `{line}`"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "key given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let u = &mut self.unlearn.config;
        let c = &mut self.eval.classifier;
        match key {
            "dataset.num_classes" => self.dataset.num_classes = parse_value(key, v)?,
            "dataset.n_per_class" => self.dataset.n_per_class = parse_value(key, v)?,
            "dataset.geometry" => self.dataset.geometry = v.parse()?,
            "dataset.noise_scale" => self.dataset.noise_scale = parse_value(key, v)?,
            "dataset.seed" => self.dataset.seed = parse_value(key, v)?,
            "schedule.steps" => self.schedule.steps = parse_value(key, v)?,
            "schedule.beta_min" => self.schedule.beta_min = parse_value(key, v)?,
            "schedule.beta_max" => self.schedule.beta_max = parse_value(key, v)?,
            "model.hidden_width" => self.model.hidden_width = parse_value(key, v)?,
            "model.hidden_depth" => self.model.hidden_depth = parse_value(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse_value(key, v)?,
            "model.seed" => self.model.seed = parse_value(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse_value(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_value(key, v)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse_value(key, v)?,
            "pretrain.momentum" => self.pretrain.momentum = parse_value(key, v)?,
            "pretrain.seed" => self.pretrain.seed = parse_value(key, v)?,
            "unlearn.method" => self.unlearn.method = v.parse()?,
            "unlearn.forget_class" => u.forget_class = parse_value(key, v)?,
            "unlearn.lambda" => u.lambda = parse_value(key, v)?,
            "unlearn.steps" => u.steps = parse_value(key, v)?,
            "unlearn.learning_rate_forget" => u.learning_rate_forget = parse_value(key, v)?,
            "unlearn.learning_rate_retain" => u.learning_rate_retain = parse_value(key, v)?,
            "unlearn.batch_size_forget" => u.batch_size_forget = parse_value(key, v)?,
            "unlearn.batch_size_retain" => u.batch_size_retain = parse_value(key, v)?,
            "unlearn.eps_t_mode" => u.eps_t_mode = v.parse()?,
            "unlearn.momentum" => u.momentum = parse_value(key, v)?,
            "unlearn.seed" => u.seed = parse_value(key, v)?,
            "unlearn.relabel_target" => {
                self.unlearn.relabel_target = match v {
                    "auto" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "eval.n_samples" => self.eval.n_samples = parse_value(key, v)?,
            "eval.seed" => self.eval.seed = parse_value(key, v)?,
            "eval.classifier_hidden_width" => c.hidden_width = parse_value(key, v)?,
            "eval.classifier_steps" => c.steps = parse_value(key, v)?,
            "eval.classifier_learning_rate" => c.learning_rate = parse_value(key, v)?,
            "eval.classifier_batch_size" => c.batch_size = parse_value(key, v)?,
            "eval.classifier_seed" => c.seed = parse_value(key, v)?,
            "run.seeds" => self.seeds = parse_seeds(key, v)?,
            "output.dir" => {
                if v.is_empty() {
                    return Err(Error::config(key, "output directory must not be empty"));
                }
                self.output.dir = PathBuf::from(v);
            }
            "output.record_timing" => self.output.record_timing = parse_value(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        fn require(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, message))
            }
        }
        fn positive(v: f64) -> bool {
            v > 0.0 && v.is_finite()
        }
        let d = &self.dataset;
        require(d.num_classes >= 2, "dataset.num_classes", "need at least 2 classes")?;
        require(d.n_per_class >= 2, "dataset.n_per_class", "need at least 2 samples per class")?;
        require(positive(d.noise_scale), "dataset.noise_scale", "must be positive")?;

        let s = &self.schedule;
        require(s.steps >= 1, "schedule.steps", "must be at least 1")?;
        require(s.beta_min > 0.0 && s.beta_min < 1.0, "schedule.beta_min", "must lie in (0, 1)")?;
        require(s.beta_max > 0.0 && s.beta_max < 1.0, "schedule.beta_max", "must lie in (0, 1)")?;
        require(s.beta_min <= s.beta_max, "schedule.beta_max", "must be at least beta_min")?;

        let m = &self.model;
        require(m.hidden_width >= 1, "model.hidden_width", "must be at least 1")?;
        require(m.hidden_depth >= 1, "model.hidden_depth", "must be at least 1")?;
        require(
            m.embed_dim >= 2 && m.embed_dim.is_multiple_of(2),
            "model.embed_dim",
            "must be a positive even number",
        )?;

        let p = &self.pretrain;
        require(p.batch_size >= 1, "pretrain.batch_size", "must be at least 1")?;
        require(positive(p.learning_rate), "pretrain.learning_rate", "must be positive")?;
        require((0.0..1.0).contains(&p.momentum), "pretrain.momentum", "must lie in [0, 1)")?;

        let u = &self.unlearn.config;
        require(
            u.forget_class < d.num_classes,
            "unlearn.forget_class",
            format!("must be below dataset.num_classes = {}", d.num_classes),
        )?;
        require(u.lambda >= 0.0 && u.lambda.is_finite(), "unlearn.lambda", "must be finite and non-negative")?;
        require(positive(u.learning_rate_forget), "unlearn.learning_rate_forget", "must be positive")?;
        require(positive(u.learning_rate_retain), "unlearn.learning_rate_retain", "must be positive")?;
        require(u.batch_size_forget >= 1, "unlearn.batch_size_forget", "must be at least 1")?;
        require(u.batch_size_retain >= 1, "unlearn.batch_size_retain", "must be at least 1")?;
        require((0.0..1.0).contains(&u.momentum), "unlearn.momentum", "must lie in [0, 1)")?;
        if let Some(t) = self.unlearn.relabel_target {
            require(
                t < d.num_classes && t != u.forget_class,
                "unlearn.relabel_target",
                "must be a class other than the forget class",
            )?;
        }

        let e = &self.eval;
        // a Fréchet fit in the plane needs at least 3 points
        require(e.n_samples >= 3, "eval.n_samples", "must be at least 3")?;
        let c = &e.classifier;
        require(c.hidden_width >= 1, "eval.classifier_hidden_width", "must be at least 1")?;
        require(c.batch_size >= 1, "eval.classifier_batch_size", "must be at least 1")?;
        require(positive(c.learning_rate), "eval.classifier_learning_rate", "must be positive")?;

        require(!self.seeds.is_empty(), "run.seeds", "need at least one seed")?;
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        require(sorted.len() == self.seeds.len(), "run.seeds", "seeds must be distinct")?;
        require(!self.output.dir.as_os_str().is_empty(), "output.dir", "must not be empty")?;
        Ok(())
    }

    /// Text form listing every key; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        let u = &self.unlearn.config;
        let c = &self.eval.classifier;
        match key {
            "dataset.num_classes" => self.dataset.num_classes.to_string(),
            "dataset.n_per_class" => self.dataset.n_per_class.to_string(),
            "dataset.geometry" => self.dataset.geometry.to_string(),
            "dataset.noise_scale" => self.dataset.noise_scale.to_string(),
            "dataset.seed" => self.dataset.seed.to_string(),
            "schedule.steps" => self.schedule.steps.to_string(),
            "schedule.beta_min" => self.schedule.beta_min.to_string(),
            "schedule.beta_max" => self.schedule.beta_max.to_string(),
            "model.hidden_width" => self.model.hidden_width.to_string(),
            "model.hidden_depth" => self.model.hidden_depth.to_string(),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.seed" => self.model.seed.to_string(),
            "pretrain.steps" => self.pretrain.steps.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.learning_rate" => self.pretrain.learning_rate.to_string(),
            "pretrain.momentum" => self.pretrain.momentum.to_string(),
            "pretrain.seed" => self.pretrain.seed.to_string(),
            "unlearn.method" => self.unlearn.method.phase().to_string(),
            "unlearn.forget_class" => u.forget_class.to_string(),
            "unlearn.lambda" => u.lambda.to_string(),
            "unlearn.steps" => u.steps.to_string(),
            "unlearn.learning_rate_forget" => u.learning_rate_forget.to_string(),
            "unlearn.learning_rate_retain" => u.learning_rate_retain.to_string(),
            "unlearn.batch_size_forget" => u.batch_size_forget.to_string(),
            "unlearn.batch_size_retain" => u.batch_size_retain.to_string(),
            "unlearn.eps_t_mode" => u.eps_t_mode.to_string(),
            "unlearn.momentum" => u.momentum.to_string(),
            "unlearn.seed" => u.seed.to_string(),
            "unlearn.relabel_target" => match self.unlearn.relabel_target {
                Some(t) => t.to_string(),
                None => "auto".to_string(),
            },
            "eval.n_samples" => self.eval.n_samples.to_string(),
            "eval.seed" => self.eval.seed.to_string(),
            "eval.classifier_hidden_width" => c.hidden_width.to_string(),
            "eval.classifier_steps" => c.steps.to_string(),
            "eval.classifier_learning_rate" => c.learning_rate.to_string(),
            "eval.classifier_batch_size" => c.batch_size.to_string(),
            "eval.classifier_seed" => c.seed.to_string(),
            "run.seeds" => self
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "output.dir" => self.output.dir.display().to_string(),
            "output.record_timing" => self.output.record_timing.to_string(),
            _ => unreachable!("key list and renderer out of sync: {key}"),
        }
    }

    pub fn arch(&self) -> DenoiserArch {
        DenoiserArch {
            dim: 2,
            num_classes: self.dataset.num_classes,
            hidden_width: self.model.hidden_width,
            hidden_depth: self.model.hidden_depth,
            embed_dim: self.model.embed_dim,
            steps: self.schedule.steps,
        }
    }

    pub fn relabel_target(&self) -> usize {
        self.unlearn.relabel_target.unwrap_or_else(|| {
            default_relabel_target(self.unlearn.config.forget_class, self.dataset.num_classes)
        })
    }

    /// Rendered config without the `output.*` keys: what identifies an
    /// experiment independently of where its artifacts go.
    pub fn identity_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS.iter().filter(|k| !k.starts_with("output.")) {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// Text of the keys that determine the pretrained model for `seed`.
    pub fn pretrain_identity(&self, seed: u64) -> String {
        let mut out = format!("run.seed = {seed}\n");
        for key in KEYS.iter().filter(|k| {
            k.starts_with("dataset.") || k.starts_with("schedule.") || k.starts_with("model.") || k.starts_with("pretrain.")
        }) {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
