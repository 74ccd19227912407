//! DDPM forward noising, the noise-prediction objective and the ancestral
//! reverse sampler over action chunks.
//!
//! Diffusion steps are 1-based: `k = 1..=K`, with `k = K` the noisiest.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::compute::{Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng::standard_normal;

/// Largest admissible per-step variance.
const MAX_BETA: f64 = 0.999;
/// Offset of the squared-cosine schedule, keeping early betas away from 0.
const COSINE_OFFSET: f64 = 0.008;
/// Denoised actions may overshoot the normalized range by this much.
pub const ACTION_CLAMP: f64 = 1.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    #[default]
    SquaredCosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::SquaredCosine => "squared-cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "squared-cosine" => Ok(ScheduleKind::SquaredCosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Precomputed DDPM coefficients for steps `1..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_sigmas: Vec<f64>,
}

/// Builds a schedule with `steps` diffusion steps.
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind)
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return contract_err("a noise schedule needs at least one step");
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                // The classic 1e-4..0.02 range at 1000 steps, rescaled so
                // shorter schedules still reach (almost) pure noise.
                let scale = 1000.0 / steps as f64;
                let (start, end) = (1e-4 * scale, 0.02 * scale);
                (0..steps)
                    .map(|i| {
                        let t = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
                        (start + t * (end - start)).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::SquaredCosine => {
                let f = |t: f64| {
                    let angle = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    angle.cos().powi(2)
                };
                (1..=steps).map(|k| (1.0 - f(k as f64) / f((k - 1) as f64)).min(MAX_BETA)).collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let posterior_sigmas = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(Self { kind, betas, alphas, alpha_bars, posterior_sigmas })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return contract_err(format!("diffusion step {k} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    /// `alpha_bar` one step earlier; 1 before the first step.
    pub fn alpha_bar_prev(&self, k: usize) -> f64 {
        if k == 1 {
            1.0
        } else {
            self.alpha_bars[k - 2]
        }
    }

    /// Reverse-step noise scale; exactly 0 at `k = 1`.
    pub fn posterior_sigma(&self, k: usize) -> f64 {
        self.posterior_sigmas[k - 1]
    }

    /// Multiplier outside the bracket of the reverse step: `1/√α_k`.
    pub fn alpha_coef(&self, k: usize) -> f64 {
        1.0 / self.alpha(k).sqrt()
    }

    /// Weight of the predicted noise inside the bracket: `β_k/√(1−ᾱ_k)`.
    pub fn gamma_coef(&self, k: usize) -> f64 {
        self.beta(k) / (1.0 - self.alpha_bar(k)).sqrt()
    }
}

/// A normalized chunk of `horizon` future actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    actions: Tensor,
}

impl ActionChunk {
    /// Wraps a `[horizon × action_dim]` tensor.
    pub fn new(actions: Tensor, horizon: usize) -> Result<Self> {
        if actions.shape().len() != 2 || actions.shape()[0] != horizon {
            return dim_err(format!("action chunk of shape {:?}, expected {horizon} rows", actions.shape()));
        }
        Ok(Self { actions })
    }

    pub fn horizon(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn action_dim(&self) -> usize {
        self.actions.shape()[1]
    }

    pub fn actions(&self) -> &Tensor {
        &self.actions
    }

    pub fn action(&self, i: usize) -> &[f64] {
        self.actions.row(i)
    }

    pub fn into_tensor(self) -> Tensor {
        self.actions
    }
}

fn checked_like(x: &Tensor, other: &Tensor, what: &str) -> Result<()> {
    if x.shape() != other.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", x.shape(), other.shape()));
    }
    Ok(())
}

/// Forward noising `√ᾱ_k·x0 + √(1−ᾱ_k)·eps`.
pub fn q_sample(x0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    q_sample_batch(x0, &[k], eps, sched)
}

/// [`q_sample`] over a batch of chunks stacked along rows; chunk `i` uses
/// step `steps[i]`.
pub fn q_sample_batch(x0: &Tensor, steps: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    checked_like(x0, eps, "q_sample")?;
    if steps.is_empty() || x0.numel() % steps.len() != 0 {
        return dim_err(format!("{} steps for a batch of {} values", steps.len(), x0.numel()));
    }
    let per = x0.numel() / steps.len();
    let mut out = Vec::with_capacity(x0.numel());
    for (b, &k) in steps.iter().enumerate() {
        sched.check_step(k)?;
        let (s, n) = (sched.alpha_bar(k).sqrt(), (1.0 - sched.alpha_bar(k)).sqrt());
        let range = b * per..(b + 1) * per;
        out.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(x, e)| s * x + n * e));
    }
    Tensor::new(x0.shape(), out)
}

/// Mean of the true posterior `q(x_{k−1} | x_k, x_0)`.
pub fn posterior_mean(xk: &Tensor, x0: &Tensor, k: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(k)?;
    checked_like(xk, x0, "posterior_mean")?;
    let (ab, ab_prev) = (sched.alpha_bar(k), sched.alpha_bar_prev(k));
    let c0 = ab_prev.sqrt() * sched.beta(k) / (1.0 - ab);
    let ck = sched.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Tensor::new(xk.shape(), xk.data().iter().zip(x0.data()).map(|(a, b)| ck * a + c0 * b).collect())
}

/// One ancestral step `α_coef·(x_k − γ_coef·ε̂) + σ_k·z`; the noise term
/// is skipped at `k = 1`.
pub fn p_sample_step<R: Rng + ?Sized>(
    xk: &Tensor,
    k: usize,
    pred_eps: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_step(k)?;
    p_sample_step_with_sigma(xk, k, pred_eps, sched, sched.posterior_sigma(k), rng)
}

/// [`p_sample_step`] with an explicit noise scale (0 gives the posterior
/// mean under the predicted noise).
pub fn p_sample_step_with_sigma<R: Rng + ?Sized>(
    xk: &Tensor,
    k: usize,
    pred_eps: &Tensor,
    sched: &NoiseSchedule,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_step(k)?;
    checked_like(xk, pred_eps, "p_sample_step")?;
    let (a, g) = (sched.alpha_coef(k), sched.gamma_coef(k));
    let mut out: Vec<f64> = xk.data().iter().zip(pred_eps.data()).map(|(x, e)| a * (x - g * e)).collect();
    if k > 1 && sigma > 0.0 {
        for (o, z) in out.iter_mut().zip(standard_normal(rng, xk.numel())) {
            *o += sigma * z;
        }
    }
    Tensor::new(xk.shape(), out)
}

/// A conditional noise predictor `ε_θ(A^k, k, condition)` acting on a batch
/// of chunks stacked along rows (`[batch·C, action_dim]`).
pub trait NoisePredictor {
    type Condition;

    /// `(C, action_dim)` of one chunk.
    fn chunk_shape(&self) -> (usize, usize);

    fn batch_size(&self, cond: &Self::Condition) -> usize;

    /// Records every parameter on `tape`, trainable or constant.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var>;

    /// Records the prediction for `noised` at per-chunk steps `steps`.
    fn predict_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        noised: Var,
        steps: &[usize],
        cond: &Self::Condition,
    ) -> Result<Var>;

    /// Gradient-free prediction.
    fn predict(&self, noised: &Tensor, steps: &[usize], cond: &Self::Condition) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(noised.clone());
        let out = self.predict_on_tape(&mut tape, &params, x, steps, cond)?;
        Ok(tape.value(out).clone())
    }
}

/// Noise-prediction objective: mean squared error between `eps` and the
/// model's prediction on the noised chunks. Returns the loss node, so the
/// caller can differentiate it with respect to `params`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_loss<M: NoisePredictor>(
    model: &M,
    tape: &mut Tape,
    params: &[Var],
    cond: &M::Condition,
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let noised = q_sample_batch(x0, steps, eps, sched)?;
    let noised = tape.constant(noised);
    let pred = model.predict_on_tape(tape, params, noised, steps, cond)?;
    if tape.value(pred).shape() != eps.shape() {
        return dim_err(format!(
            "predicted noise {:?} vs target noise {:?}",
            tape.value(pred).shape(),
            eps.shape()
        ));
    }
    let target = tape.constant(eps.clone());
    tape.mse(pred, target)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence { step, detail: format!("non-finite value in {what}") },
        other => other,
    }
}

/// Runs the reverse chain `K → 1` for every chunk in the batch and clamps
/// the result to `±ACTION_CLAMP`. Returns `[batch·C, action_dim]`.
pub fn sample_chunks<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Condition,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let batch = model.batch_size(cond);
    let (c, a) = model.chunk_shape();
    let shape = [batch * c, a];
    let mut x = Tensor::new(&shape, standard_normal(rng, batch * c * a))?;
    for k in (1..=sched.steps()).rev() {
        let steps = vec![k; batch];
        let pred = model.predict(&x, &steps, cond).map_err(|e| diverged(k, e))?;
        x = p_sample_step(&x, k, &pred, sched, rng).map_err(|e| diverged(k, e))?;
    }
    x.map(|v| v.clamp(-ACTION_CLAMP, ACTION_CLAMP))
}

/// Samples a single chunk; `cond` must describe a batch of one.
pub fn sample_chunk<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Condition,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ActionChunk> {
    if model.batch_size(cond) != 1 {
        return contract_err("sample_chunk expects a condition for exactly one chunk");
    }
    let horizon = model.chunk_shape().0;
    ActionChunk::new(sample_chunks(model, cond, sched, rng)?, horizon)
}
