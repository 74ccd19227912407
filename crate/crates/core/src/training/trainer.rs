use rand::Rng;

use super::optim::{AdamWConfig, OptimState};
use super::stats::{ema_update, grad_block_magnitudes, total_grad_norm, windowed_means, GradStats};
use crate::compute::{Tape, Tensor};
use crate::ddpm::{ddpm_loss, NoisePredictor, NoiseSchedule};
use crate::envs::{DemoDataset, ACTION_DIM, OBS_DIM, PROPRIO_DIM};
use crate::error::{contract_err, Error, Result};
use crate::model::{ModelConfig, ObsBatch, Trunk, TrunkParameters};
use crate::rng::{standard_normal, substream};

/// Stream used for parameter initialization under a run seed; step `s`
/// draws from stream `s`.
pub const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub ema_decay: f64,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch: 64, seed: 0, ema_decay: 0.999, optim: AdamWConfig::default() }
    }
}

/// Normalized training examples: observation windows and the target
/// chunks, `[B·C, action_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub cond: ObsBatch,
    pub actions: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }
}

/// Draws `size` windows uniformly over all recorded steps.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &DemoDataset,
    config: &ModelConfig,
    size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if size == 0 {
        return contract_err("empty batch");
    }
    if (config.obs_dim, config.proprio_dim, config.action_dim) != (OBS_DIM, PROPRIO_DIM, ACTION_DIM) {
        return contract_err(format!(
            "trunk interface ({}, {}, {}) does not match the environment ({OBS_DIM}, {PROPRIO_DIM}, {ACTION_DIM})",
            config.obs_dim, config.proprio_dim, config.action_dim
        ));
    }
    let (to, c) = (config.obs_horizon, config.chunk);
    let (mut obs, mut proprio, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..size {
        let (traj, t) = dataset.sample_index(rng);
        let w = dataset.window(traj, t, to, c)?;
        obs.extend(w.obs);
        proprio.extend(w.proprio);
        actions.extend(w.actions);
    }
    Ok(Batch {
        cond: ObsBatch::new(
            Tensor::new(&[size, to * OBS_DIM], obs)?,
            Tensor::new(&[size, to * PROPRIO_DIM], proprio)?,
        )?,
        actions: Tensor::new(&[size * c, ACTION_DIM], actions)?,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence { step, detail: format!("non-finite value in {what}") },
        other => other,
    }
}

/// One optimization step: draws `k ~ U[1, K]` and `ε ~ N(0, I)` per record,
/// backpropagates the noise-prediction loss, records gradient statistics
/// and applies the update. `step` labels the statistics and errors.
pub fn train_step<R: Rng + ?Sized>(
    trunk: &mut Trunk,
    optim: &mut OptimState,
    batch: &Batch,
    sched: &NoiseSchedule,
    step: usize,
    rng: &mut R,
) -> Result<(f64, GradStats)> {
    let b = batch.len();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = Tensor::new(batch.actions.shape(), standard_normal(rng, batch.actions.numel()))?;
    let mut tape = Tape::new();
    let vars = trunk.bind(&mut tape, true);
    let loss = ddpm_loss(&*trunk, &mut tape, &vars, &batch.cond, &batch.actions, &steps, &eps, sched)
        .map_err(|e| diverged(step, e))?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss).map_err(|e| diverged(step, e))?;
    // Release the tape's shared handles so the update below mutates in place.
    drop(tape);
    for (p, v) in trunk.params_mut().iter_mut().zip(&vars) {
        let g = grads.take(*v).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("non-finite gradient of {}", p.name) });
        }
        p.tensor.set_grad(g)?;
    }
    let stats = GradStats::new(
        step,
        grad_block_magnitudes(trunk.params(), trunk.config())?,
        total_grad_norm(trunk.params())?,
    );
    optim.apply(trunk.params_mut())?;
    trunk.params_mut().clear_grads();
    Ok((value, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub stats: GradStats,
}

/// Stateful training run. Step `s` draws its batch, diffusion steps and
/// noise from `substream(seed, s)`, so a run resumed at step `s` sees the
/// same data as an uninterrupted one.
pub struct Trainer {
    trunk: Trunk,
    ema: TrunkParameters,
    optim: OptimState,
    sched: NoiseSchedule,
    dataset: DemoDataset,
    config: TrainConfig,
    step: usize,
}

impl Trainer {
    /// Fresh run: the trunk is initialized from the run seed.
    pub fn new(model: ModelConfig, dataset: DemoDataset, sched: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        let trunk = Trunk::new(model, &mut substream(config.seed, INIT_STREAM))?;
        Self::resume(trunk, None, dataset, sched, config, 0)
    }

    /// Continues from `trunk` (and optionally its averaged weights) at
    /// `start_step`. Optimizer moments restart from zero.
    pub fn resume(
        trunk: Trunk,
        ema: Option<TrunkParameters>,
        dataset: DemoDataset,
        sched: NoiseSchedule,
        config: TrainConfig,
        start_step: usize,
    ) -> Result<Self> {
        if config.batch == 0 {
            return contract_err("batch size must be positive");
        }
        if !(0.0..1.0).contains(&config.ema_decay) {
            return contract_err(format!("EMA decay {} outside [0, 1)", config.ema_decay));
        }
        let ema = match ema {
            Some(e) => {
                let values = e.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
                TrunkParameters::conform(trunk.params(), values)?
            }
            None => trunk.params().clone(),
        };
        let optim = OptimState::resume(trunk.params(), config.optim, start_step);
        Ok(Self { trunk, ema, optim, sched, dataset, config, step: start_step })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn ema(&self) -> &TrunkParameters {
        &self.ema
    }

    /// The trunk carrying the averaged weights.
    pub fn ema_trunk(&self) -> Trunk {
        let mut t = self.trunk.clone();
        t.set_params(self.ema.clone()).expect("EMA conforms to the trunk");
        t
    }

    pub fn dataset(&self) -> &DemoDataset {
        &self.dataset
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Averaging rate at update `t`: ramps up as `(1 + t) / (10 + t)`
    /// until it reaches the configured decay.
    pub fn ema_decay_at(&self, t: usize) -> f64 {
        self.config.ema_decay.min((1.0 + t as f64) / (10.0 + t as f64))
    }

    pub fn step_once(&mut self) -> Result<StepRecord> {
        let s = self.step;
        let mut rng = substream(self.config.seed, s as u64);
        let batch = sample_batch(&self.dataset, self.trunk.config(), self.config.batch, &mut rng)?;
        let (loss, stats) = train_step(&mut self.trunk, &mut self.optim, &batch, &self.sched, s, &mut rng)?;
        let decay = self.ema_decay_at(s);
        ema_update(&mut self.ema, self.trunk.params(), decay)?;
        self.step += 1;
        Ok(StepRecord { step: s, loss, stats })
    }

    /// Runs `n` steps, handing each record to `on_step`.
    pub fn run<F>(&mut self, n: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepRecord, &Trainer) -> Result<()>,
    {
        for _ in 0..n {
            let record = self.step_once()?;
            on_step(&record, self)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Trunk, TrunkParameters) {
        (self.trunk, self.ema)
    }
}

/// Trains `model` for `steps` steps with clipping disabled and returns the
/// cross-block gradient standard deviation averaged over consecutive
/// windows of `window` steps.
pub fn grad_std_profile(
    model: &ModelConfig,
    dataset: &DemoDataset,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    steps: usize,
    window: usize,
) -> Result<Vec<f64>> {
    if window == 0 || steps < window {
        return contract_err(format!("window {window} over {steps} steps"));
    }
    let config = TrainConfig { optim: AdamWConfig { clip: None, ..config.optim }, ..*config };
    let mut trainer = Trainer::new(model.clone(), dataset.clone(), sched.clone(), config)?;
    let mut series = Vec::with_capacity(steps);
    trainer.run(steps, |r, _| {
        series.push(r.stats.cross_block_std);
        Ok(())
    })?;
    windowed_means(&series, window)
}
