//! Training runs with periodic evaluation, and scaling scans over
//! conditioning × depth × seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use scaledp_core::ddpm::NoiseSchedule;
use scaledp_core::envs::{evaluate_with, generate_dataset, DemoDataset, DiffusionPolicy, EvalOptions, EvalReport};
use scaledp_core::model::{count_params, Conditioning, Trunk, TrunkParameters};
use scaledp_core::training::Trainer;
use scaledp_core::Error as CoreError;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::report::{log_header, LogRow, TrainingLog};

pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CHECKPOINT: &str = "final.sdpc";
pub const EMA_CHECKPOINT: &str = "ema.sdpc";
pub const BEST_CHECKPOINT: &str = "best.sdpc";

/// Evaluation episodes are seeded apart from the training streams of the
/// same run seed.
pub fn eval_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x5eed_0000_0000
}

/// Rolls out the diffusion policy of `trunk` under the config's
/// evaluation settings.
pub fn evaluate_trunk(cfg: &ExperimentConfig, trunk: &Trunk, dataset: &DemoDataset, seed: u64) -> Result<EvalReport> {
    Ok(evaluate_core(cfg, &cfg.schedule()?, trunk, dataset, seed)?)
}

fn evaluate_core(
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    trunk: &Trunk,
    dataset: &DemoDataset,
    seed: u64,
) -> scaledp_core::Result<EvalReport> {
    let mut policy = DiffusionPolicy::new(trunk.clone(), sched.clone(), dataset.stats().clone(), seed);
    let opts = EvalOptions { exec_horizon: cfg.eval.exec_horizon, ..EvalOptions::new(cfg.eval.episodes, seed) };
    evaluate_with(&mut policy, cfg.env.id, &opts)
}

/// Where a run starts from.
pub enum Start {
    Fresh,
    /// Raw weights, their averaged copy if saved, and the step to resume at.
    Resume { trunk: Trunk, ema: Option<TrunkParameters>, step: usize },
}

impl Start {
    /// Loads `path` and the averaged weights saved beside it, if any.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, ExperimentConfig)> {
        let ckpt = read_checkpoint(path)?;
        let trunk = ckpt.trunk()?;
        let ema_path = path.with_file_name(EMA_CHECKPOINT);
        let ema = if ema_path.exists() && ema_path != path {
            Some(read_checkpoint(&ema_path)?.trunk_for(&ckpt.config.model)?.params().clone())
        } else {
            None
        };
        let step = ckpt.config.training.resume_step;
        Ok((Self::Resume { trunk, ema, step }, ckpt.config))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps_done: usize,
    pub final_success: Option<f64>,
    pub best_success: Option<f64>,
    pub mean_loss: f64,
    pub mean_cross_block_std: f64,
    pub out_dir: PathBuf,
}

/// Run-level aggregates recomputed from a log: mean loss and mean
/// cross-block std over all rows, and the last evaluation.
pub fn summarize_log(log: &TrainingLog) -> (f64, f64, Option<f64>) {
    let n = log.rows.len().max(1) as f64;
    let loss = log.rows.iter().map(|r| r.loss).sum::<f64>() / n;
    let std = log.rows.iter().map(|r| r.cross_block_std).sum::<f64>() / n;
    let last_eval = log.rows.iter().rev().find_map(|r| r.eval_success);
    (loss, std, last_eval)
}

/// Trains `cfg` on `dataset`, writing `log.csv` and the final, averaged
/// and best checkpoints into `out`. Evaluation (of the averaged weights)
/// runs every `eval.eval_every` steps and after the last one; it is
/// skipped entirely when `eval.episodes` is 0.
pub fn run_training(cfg: &ExperimentConfig, dataset: &DemoDataset, start: Start, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    if dataset.env != cfg.env.id {
        return Err(HarnessError::Usage(format!("dataset is for {} but the config trains on {}", dataset.env, cfg.env.id)));
    }
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let sched = cfg.schedule()?;
    let tc = cfg.train_config();
    let mut trainer = match start {
        Start::Fresh => Trainer::new(cfg.model.clone(), dataset.clone(), sched, tc)?,
        Start::Resume { trunk, ema, step } => {
            if trunk.config() != &cfg.model {
                return Err(HarnessError::Config("resumed checkpoint has a different model config".into()));
            }
            Trainer::resume(trunk, ema, dataset.clone(), sched, tc, step)?
        }
    };
    let first = trainer.step();
    let remaining = cfg.training.steps.saturating_sub(first);
    let log_path = out.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| HarnessError::io(&log_path, e);
    writeln!(log, "{}", log_header(cfg.model.layers)).map_err(io)?;

    let eval_seed = eval_seed(cfg.training.seed);
    let mut best: Option<(f64, TrunkParameters)> = None;
    let mut last_eval = None;
    let (mut loss_sum, mut std_sum) = (0.0, 0.0);
    let result = trainer.run(remaining, |r, t| {
        let done = r.step + 1;
        let due = cfg.eval.episodes > 0
            && (done == cfg.training.steps || (cfg.eval.eval_every > 0 && done % cfg.eval.eval_every == 0));
        let success = if due {
            let s = evaluate_core(cfg, t.schedule(), &t.ema_trunk(), dataset, eval_seed)?.success_rate();
            log::info!("step {done}: loss {:.5} eval success {s:.3}", r.loss);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, t.ema().clone()));
            }
            last_eval = Some(s);
            Some(s)
        } else {
            None
        };
        if done % 100 == 0 {
            log::debug!("step {done}: loss {:.5} cross-block std {:.5}", r.loss, r.stats.cross_block_std);
        }
        loss_sum += r.loss;
        std_sum += r.stats.cross_block_std;
        writeln!(log, "{}", LogRow::from_record(r, success).to_csv())
            .map_err(|e| CoreError::Contract(format!("writing {}: {e}", log_path.display())))
    });
    log.flush().map_err(io)?;
    result?;

    let steps_done = trainer.step();
    let mut saved = cfg.clone();
    saved.training.resume_step = steps_done;
    let (trunk, ema) = trainer.into_parts();
    write_checkpoint(trunk.params(), &saved, &out.join(FINAL_CHECKPOINT))?;
    write_checkpoint(&ema, &saved, &out.join(EMA_CHECKPOINT))?;
    let best_params = best.as_ref().map_or(&ema, |(_, p)| p);
    write_checkpoint(best_params, &saved, &out.join(BEST_CHECKPOINT))?;
    let n = remaining.max(1) as f64;
    Ok(RunSummary {
        steps_done,
        final_success: last_eval,
        best_success: best.map(|(s, _)| s),
        mean_loss: loss_sum / n,
        mean_cross_block_std: std_sum / n,
        out_dir: out.to_path_buf(),
    })
}

/// Convenience for tests and the CLI: the checkpoint a finished run wrote.
pub fn load_run_checkpoint(out: &Path, name: &str) -> Result<Checkpoint> {
    read_checkpoint(&out.join(name))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanCell {
    pub conditioning: Conditioning,
    pub depth: usize,
    pub seed: u64,
}

impl ScanCell {
    pub fn dir_name(&self) -> String {
        format!("cell_{}_{}_{}", self.conditioning, self.depth, self.seed)
    }

    /// `base` with this cell's conditioning, depth and seed. The causal
    /// mask follows the conditioning's default.
    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.model.conditioning = self.conditioning;
        c.model.causal_mask = self.conditioning == Conditioning::CrossAttention;
        c.model.layers = self.depth;
        c.model.name = scaledp_core::model::ModelName::Custom;
        c.training.seed = self.seed;
        c
    }
}

/// Cells in row order: conditioning, then depth, then seed.
pub fn scan_cells(conditionings: &[Conditioning], depths: &[usize], seeds: &[u64]) -> Vec<ScanCell> {
    let mut cells = Vec::new();
    for &conditioning in conditionings {
        for &depth in depths {
            for &seed in seeds {
                cells.push(ScanCell { conditioning, depth, seed });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanRow {
    pub cell: ScanCell,
    pub params: u64,
    pub final_success: Option<f64>,
    pub mean_loss: Option<f64>,
    pub mean_cross_block_std: Option<f64>,
    /// `ok`, or what went wrong in this cell.
    pub status: String,
}

pub const SCAN_HEADER: &str = "conditioning,depth,seed,params,final_success,mean_loss,mean_cross_block_std,status";

impl ScanRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.cell.conditioning,
            self.cell.depth,
            self.cell.seed,
            self.params,
            opt(self.final_success),
            opt(self.mean_loss),
            opt(self.mean_cross_block_std),
            self.status.replace(',', ";")
        )
    }
}

/// Where each scan cell gets its demonstrations.
pub enum ScanData<'a> {
    /// One dataset shared by every cell.
    Shared(&'a DemoDataset),
    /// `env.n_demos` demonstrations generated from the cell seed.
    PerSeed,
}

fn run_cell(base: &ExperimentConfig, data: &ScanData<'_>, cell: ScanCell, out: &Path) -> Result<ScanRow> {
    let cfg = cell.config(base);
    let params = count_params(&cfg.model);
    let generated;
    let dataset = match data {
        ScanData::Shared(d) => *d,
        ScanData::PerSeed => {
            generated = generate_dataset(cfg.env.id, cfg.env.n_demos, cell.seed)?;
            &generated
        }
    };
    let row = |s: Option<RunSummary>, status: String| ScanRow {
        cell,
        params,
        final_success: s.as_ref().and_then(|s| s.final_success),
        mean_loss: s.as_ref().map(|s| s.mean_loss),
        mean_cross_block_std: s.as_ref().map(|s| s.mean_cross_block_std),
        status,
    };
    match run_training(&cfg, dataset, Start::Fresh, &out.join(cell.dir_name())) {
        Ok(s) => Ok(row(Some(s), "ok".into())),
        Err(HarnessError::Core(CoreError::Divergence { step, detail })) => {
            log::warn!("{}: diverged at step {step}: {detail}", cell.dir_name());
            Ok(row(None, format!("diverged at step {step}")))
        }
        Err(HarnessError::Config(e)) => Ok(row(None, format!("invalid config: {e}"))),
        Err(e) => Err(e),
    }
}

/// Runs every cell, at most `jobs` at a time, and returns rows in cell
/// order. A diverging or misconfigured cell is reported in its row; I/O
/// failures abort the scan.
pub fn run_scan(
    base: &ExperimentConfig,
    data: ScanData<'_>,
    cells: &[ScanCell],
    jobs: usize,
    out: &Path,
) -> Result<Vec<ScanRow>> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ScanRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                log::info!("scan cell {} of {}: {}", i + 1, cells.len(), cell.dir_name());
                let r = run_cell(base, &data, cell, out);
                results.lock().expect("scan results lock")[i] = Some(r);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("scan results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from(SCAN_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    crate::codec::write_file(&out.join("scan.csv"), csv.as_bytes())?;
    Ok(rows)
}
