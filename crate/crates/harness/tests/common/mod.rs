#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use scaledp_core::model::{Conditioning, ModelConfig};
use scaledp_harness::ExperimentConfig;

/// A trunk and budget small enough to train in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model = ModelConfig::custom(2, 16, 2, Conditioning::AdaLn);
    c.ddpm.steps = 5;
    c.training.steps = 40;
    c.training.batch = 4;
    c.training.lr = 1e-3;
    c.training.warmup = 5;
    c.env.n_demos = 4;
    c.eval.episodes = 3;
    c.eval.eval_every = 20;
    c
}

pub fn scaledp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaledp"))
        .args(args)
        .env("SCALEDP_LOG_LEVEL", "error")
        .output()
        .expect("run scaledp")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn write_config(path: &Path, c: &ExperimentConfig) -> String {
    std::fs::write(path, c.render()).unwrap();
    path.to_str().unwrap().to_string()
}
