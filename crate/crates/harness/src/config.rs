//! Experiment configuration files: UTF-8 lines of `section.key = value`.
//! Blank lines and lines starting with `#` are ignored; unknown keys and
//! repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use scaledp_core::ddpm::{NoiseSchedule, ScheduleKind};
use scaledp_core::envs::EnvKind;
use scaledp_core::model::{Conditioning, ModelConfig, ModelName};
use scaledp_core::training::{AdamWConfig, TrainConfig};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSection {
    pub steps: usize,
    pub schedule: ScheduleKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    pub warmup: usize,
    /// Steps already completed when this configuration was saved with a
    /// checkpoint; a resumed run continues from here.
    pub resume_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSection {
    pub id: EnvKind,
    pub n_demos: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub episodes: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub exec_horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub ddpm: DdpmSection,
    pub training: TrainingSection,
    pub env: EnvSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let optim = AdamWConfig::default();
        let train = TrainConfig::default();
        Self {
            model: ModelConfig::default(),
            ddpm: DdpmSection { steps: 100, schedule: ScheduleKind::SquaredCosine },
            training: TrainingSection {
                steps: train.steps,
                batch: train.batch,
                lr: optim.lr,
                seed: train.seed,
                ema_decay: train.ema_decay,
                weight_decay: optim.weight_decay,
                clip: optim.clip,
                warmup: optim.warmup_steps,
                resume_step: 0,
            },
            env: EnvSection { id: EnvKind::ReachAround, n_demos: 20 },
            eval: EvalSection { episodes: 100, eval_every: 1000, exec_horizon: 1 },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn parse_core<T: FromStr<Err = scaledp_core::Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: scaledp_core::Error| HarnessError::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            seed: t.seed,
            ema_decay: t.ema_decay,
            optim: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                clip: t.clip,
                warmup_steps: t.warmup,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(self.ddpm.steps, self.ddpm.schedule)?)
    }

    /// Checks every section; parse-level checks live in [`Self::parse`].
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.ddpm.steps == 0 {
            return bad("ddpm.steps must be at least 1".into());
        }
        let t = &self.training;
        if t.batch == 0 {
            return bad("training.batch must be positive".into());
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return bad(format!("training.lr {} must be finite and non-negative", t.lr));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return bad(format!("training.ema_decay {} outside [0, 1)", t.ema_decay));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad(format!("training.weight_decay {} must be finite and non-negative", t.weight_decay));
        }
        if t.clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("training.clip must be positive or none".into());
        }
        if self.env.n_demos == 0 {
            return bad("env.n_demos must be positive".into());
        }
        if self.eval.exec_horizon == 0 || self.eval.exec_horizon > self.model.chunk {
            return bad(format!("eval.exec_horizon must be in 1..={}", self.model.chunk));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), (n + 1, value.to_string())).is_some() {
                return Err(HarnessError::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        let mut c = Self::default();
        for (key, (line, value)) in &seen {
            let v = value.as_str();
            let k = key.as_str();
            match k {
                "model.name" => c.model.name = parse_core::<ModelName>(k, v)?,
                "model.layers" => c.model.layers = parse(k, v)?,
                "model.hidden" => c.model.hidden = parse(k, v)?,
                "model.heads" => c.model.heads = parse(k, v)?,
                "model.conditioning" => c.model.conditioning = parse_core::<Conditioning>(k, v)?,
                "model.causal_mask" => c.model.causal_mask = parse_bool(k, v)?,
                "model.chunk" => c.model.chunk = parse(k, v)?,
                "model.obs_horizon" => c.model.obs_horizon = parse(k, v)?,
                "model.action_dim" => c.model.action_dim = parse(k, v)?,
                "model.obs_dim" => c.model.obs_dim = parse(k, v)?,
                "model.proprio_dim" => c.model.proprio_dim = parse(k, v)?,
                "model.adaln_zero_init" => c.model.adaln_zero_init = parse_bool(k, v)?,
                "ddpm.steps" => c.ddpm.steps = parse(k, v)?,
                "ddpm.schedule" => c.ddpm.schedule = parse_core::<ScheduleKind>(k, v)?,
                "training.steps" => c.training.steps = parse(k, v)?,
                "training.batch" => c.training.batch = parse(k, v)?,
                "training.lr" => c.training.lr = parse(k, v)?,
                "training.seed" => c.training.seed = parse(k, v)?,
                "training.ema_decay" => c.training.ema_decay = parse(k, v)?,
                "training.weight_decay" => c.training.weight_decay = parse(k, v)?,
                "training.clip" => c.training.clip = if v == "none" { None } else { Some(parse(k, v)?) },
                "training.warmup" => c.training.warmup = parse(k, v)?,
                "training.resume_step" => c.training.resume_step = parse(k, v)?,
                "env.id" => c.env.id = parse_core::<EnvKind>(k, v)?,
                "env.n_demos" => c.env.n_demos = parse(k, v)?,
                "eval.episodes" => c.eval.episodes = parse(k, v)?,
                "eval.eval_every" => c.eval.eval_every = parse(k, v)?,
                "eval.exec_horizon" => c.eval.exec_horizon = parse(k, v)?,
                _ => return Err(HarnessError::Config(format!("line {line}: unknown key {key}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.training;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").expect("write to string");
        kv("model.name", &m.name);
        kv("model.layers", &m.layers);
        kv("model.hidden", &m.hidden);
        kv("model.heads", &m.heads);
        kv("model.conditioning", &m.conditioning);
        kv("model.causal_mask", &m.causal_mask);
        kv("model.chunk", &m.chunk);
        kv("model.obs_horizon", &m.obs_horizon);
        kv("model.action_dim", &m.action_dim);
        kv("model.obs_dim", &m.obs_dim);
        kv("model.proprio_dim", &m.proprio_dim);
        kv("model.adaln_zero_init", &m.adaln_zero_init);
        kv("ddpm.steps", &self.ddpm.steps);
        kv("ddpm.schedule", &self.ddpm.schedule);
        kv("training.steps", &t.steps);
        kv("training.batch", &t.batch);
        kv("training.lr", &t.lr);
        kv("training.seed", &t.seed);
        kv("training.ema_decay", &t.ema_decay);
        kv("training.weight_decay", &t.weight_decay);
        match t.clip {
            Some(c) => kv("training.clip", &c),
            None => kv("training.clip", &"none"),
        }
        kv("training.warmup", &t.warmup);
        kv("training.resume_step", &t.resume_step);
        kv("env.id", &self.env.id);
        kv("env.n_demos", &self.env.n_demos);
        kv("eval.episodes", &self.eval.episodes);
        kv("eval.eval_every", &self.eval.eval_every);
        kv("eval.exec_horizon", &self.eval.exec_horizon);
        s
    }
}
