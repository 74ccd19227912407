//! The `scaledp` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use scaledp_core::ddpm::sample_chunk;
use scaledp_core::envs::{generate_dataset, EnvKind, EnvState, OBS_DIM, PROPRIO_DIM};
use scaledp_core::model::{Conditioning, ObsBatch};
use scaledp_core::compute::Tensor;
use scaledp_core::rng::substream;

use crate::checkpoint::read_checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset_io::{read_dataset, write_dataset};
use crate::error::{HarnessError, Result};
use crate::params::{params_table, PARAMS_HEADER};
use crate::report::{emit_report, TrainingLog};
use crate::run::{eval_seed, evaluate_trunk, run_scan, run_training, scan_cells, ScanData, Start, SCAN_HEADER};

#[derive(Parser, Debug)]
#[command(name = "scaledp", version, about = "Diffusion-policy trunk experiments on toy 2-D control tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record scripted-expert demonstrations to a dataset file.
    GenData(GenDataArgs),
    /// Train a trunk; writes log.csv and final/ema/best checkpoints.
    Train(TrainArgs),
    /// Roll out a checkpoint's policy and print its success rate.
    Eval(EvalArgs),
    /// Print one sampled action chunk for a start state.
    Sample(SampleArgs),
    /// Train every (conditioning, depth, seed) cell and tabulate the results.
    Scan(ScanArgs),
    /// Print parameter counts of the named sizes.
    Params(ParamsArgs),
    /// Turn a training log into report.csv and SVG charts.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub env: EnvKind,
    /// Number of trajectories.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config file; defaults apply when omitted (or, when
    /// resuming, the checkpoint's own config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides training.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides training.steps (the total, counting resumed steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint; an ema.sdpc beside it is picked up.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset the checkpoint was trained on (for normalization).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Evaluation seed; defaults to the one training used.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Actions executed per sampled chunk.
    #[arg(long)]
    pub exec_horizon: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Seeds both the start state and the sampling noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    /// Base config; each cell overrides conditioning, depth and seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shared dataset; by default each seed generates its own.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "adaln,cross_attention")]
    pub conditioning: Vec<Conditioning>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,6")]
    pub depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value = "adaln")]
    pub conditioning: Conditioning,
    /// Adds a custom row for this config's model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    ExperimentConfig::parse(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn print(out: &mut impl Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| HarnessError::io("<stdout>", e))
}

fn gen_data(a: GenDataArgs, out: &mut impl Write) -> Result<()> {
    if a.n == 0 {
        return Err(HarnessError::Usage("--n must be at least 1".into()));
    }
    let d = generate_dataset(a.env, a.n, a.seed)?;
    write_dataset(&d, &a.out)?;
    let (l, r) = d.mode_balance();
    print(
        out,
        &format!(
            "trajectories = {}\nmean_length = {:.2}\nmode_balance = {l} left / {r} right\n",
            d.len(),
            d.transitions() as f64 / d.len() as f64
        ),
    )
}

fn train(a: TrainArgs, out: &mut impl Write) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let (start, mut cfg) = match &a.resume {
        Some(p) => {
            let (start, saved) = Start::from_checkpoint(p)?;
            let cfg = match &a.config {
                Some(c) => read_config(c)?,
                None => saved,
            };
            (start, cfg)
        }
        None => (Start::Fresh, a.config.as_ref().map(read_config).transpose()?.unwrap_or_default()),
    };
    cfg.training.resume_step = 0;
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    let s = run_training(&cfg, &dataset, start, &a.out)?;
    let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.4}"));
    print(
        out,
        &format!(
            "steps = {}\nmean_loss = {:.6}\nmean_cross_block_std = {:.6}\nfinal_success = {}\nbest_success = {}\nout = {}\n",
            s.steps_done,
            s.mean_loss,
            s.mean_cross_block_std,
            opt(s.final_success),
            opt(s.best_success),
            s.out_dir.display()
        ),
    )
}

fn eval(a: EvalArgs, out: &mut impl Write) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let dataset = read_dataset(&a.data)?;
    let mut cfg = ckpt.config.clone();
    if let Some(n) = a.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(h) = a.exec_horizon {
        cfg.eval.exec_horizon = h;
    }
    cfg.validate()?;
    let seed = a.seed.unwrap_or_else(|| eval_seed(cfg.training.seed));
    let report = evaluate_trunk(&cfg, &ckpt.trunk()?, &dataset, seed)?;
    let (l, r) = report.side_counts();
    print(
        out,
        &format!(
            "episodes = {}\nsuccess_rate = {}\nsides = {l} left / {r} right\n",
            report.outcomes.len(),
            report.success_rate()
        ),
    )
}

fn sample(a: SampleArgs, out: &mut impl Write) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let dataset = read_dataset(&a.data)?;
    let trunk = ckpt.trunk()?;
    let cfg = &ckpt.config;
    let state = EnvState::sample(cfg.env.id, &mut substream(a.seed, 0));
    let stats = dataset.stats();
    let to = cfg.model.obs_horizon;
    let obs: Vec<f64> = (0..to).flat_map(|_| stats.normalize_obs(state.observe())).collect();
    let proprio: Vec<f64> = (0..to).flat_map(|_| stats.normalize_proprio(state.proprio())).collect();
    let cond = ObsBatch::new(Tensor::new(&[1, to * OBS_DIM], obs)?, Tensor::new(&[1, to * PROPRIO_DIM], proprio)?)?;
    let chunk = sample_chunk(&trunk, &cond, &cfg.schedule()?, &mut substream(a.seed, 1))?;
    let mut text = format!("# start agent {:?} goal {:?}\nstep,ax,ay\n", state.agent, state.goal);
    for i in 0..chunk.horizon() {
        let n = chunk.action(i);
        let act = stats.denormalize_action([n[0], n[1]]);
        text.push_str(&format!("{i},{},{}\n", act[0], act[1]));
    }
    print(out, &text)
}

fn scan(a: ScanArgs, out: &mut impl Write) -> Result<()> {
    if a.conditioning.is_empty() || a.depths.is_empty() || a.seeds.is_empty() {
        return Err(HarnessError::Usage("scan needs at least one conditioning, depth and seed".into()));
    }
    let base = a.config.as_ref().map(read_config).transpose()?.unwrap_or_default();
    let shared = a.data.as_deref().map(read_dataset).transpose()?;
    let data = match &shared {
        Some(d) => ScanData::Shared(d),
        None => ScanData::PerSeed,
    };
    let cells = scan_cells(&a.conditioning, &a.depths, &a.seeds);
    let rows = run_scan(&base, data, &cells, a.jobs, &a.out)?;
    let mut text = format!("{SCAN_HEADER}\n");
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    print(out, &text)
}

fn params(a: ParamsArgs, out: &mut impl Write) -> Result<()> {
    let custom = a.config.as_ref().map(read_config).transpose()?.map(|c| c.model);
    let mut text = format!("{PARAMS_HEADER}\n");
    for r in params_table(a.conditioning, custom.as_ref()) {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    print(out, &text)
}

fn report(a: ReportArgs, out: &mut impl Write) -> Result<()> {
    let log = TrainingLog::read(&a.log)?;
    let r = emit_report(&log, &a.out)?;
    if r.charts.is_empty() {
        eprintln!("warning: {} has no rows; wrote header only and no charts", a.log.display());
    }
    let mut text = format!("rows = {}\ncsv = {}\n", log.rows.len(), r.csv.display());
    for c in &r.charts {
        text.push_str(&format!("chart = {}\n", c.display()));
    }
    print(out, &text)
}

pub fn execute(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Sample(a) => sample(a, out),
        Command::Scan(a) => scan(a, out),
        Command::Params(a) => params(a, out),
        Command::Report(a) => report(a, out),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
