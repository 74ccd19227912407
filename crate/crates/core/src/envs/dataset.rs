use rand::Rng;

use super::expert::{scripted_expert, Mode};
use super::world::{EnvKind, EnvParams, EnvState, ACTION_DIM, OBS_DIM, PROPRIO_DIM};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng::{seeded, substream};

/// Observation and proprioception standard deviations are floored here so
/// constant features normalize to 0 instead of blowing up.
pub const STD_FLOOR: f64 = 1e-3;
/// Action ranges narrower than this are widened.
pub const RANGE_FLOOR: f64 = 1e-6;

/// One demonstration. Row `t` of each field belongs to control step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<[f64; OBS_DIM]>,
    pub proprio: Vec<[f64; PROPRIO_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    /// Detour side the expert used.
    pub mode: Mode,
}

impl Trajectory {
    pub fn new(
        obs: Vec<[f64; OBS_DIM]>,
        proprio: Vec<[f64; PROPRIO_DIM]>,
        actions: Vec<[f64; ACTION_DIM]>,
        mode: Mode,
    ) -> Result<Self> {
        if obs.is_empty() || obs.len() != proprio.len() || obs.len() != actions.len() {
            return dim_err(format!(
                "trajectory lengths differ or are empty: {} obs, {} proprio, {} actions",
                obs.len(),
                proprio.len(),
                actions.len()
            ));
        }
        let finite = obs.iter().flatten().chain(proprio.iter().flatten()).chain(actions.iter().flatten());
        if let Some(v) = finite.copied().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trajectory value {v}")));
        }
        if actions.iter().flatten().any(|a| a.abs() > 1.0) {
            return contract_err("trajectory action outside [-1, 1]");
        }
        Ok(Self { obs, proprio, actions, mode })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Per-dimension normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub action_min: [f64; ACTION_DIM],
    pub action_max: [f64; ACTION_DIM],
    pub obs_mean: [f64; OBS_DIM],
    pub obs_std: [f64; OBS_DIM],
    pub proprio_mean: [f64; PROPRIO_DIM],
    pub proprio_std: [f64; PROPRIO_DIM],
}

fn mean_std<const N: usize>(rows: impl Iterator<Item = [f64; N]> + Clone) -> ([f64; N], [f64; N]) {
    let mut mean = [0.0; N];
    let mut count = 0.0;
    for r in rows.clone() {
        count += 1.0;
        for j in 0..N {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = [0.0; N];
    for r in rows {
        for j in 0..N {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    (mean, var.map(|v| (v / count).sqrt()))
}

impl NormStats {
    pub fn compute(trajectories: &[Trajectory]) -> Result<Self> {
        if trajectories.is_empty() {
            return contract_err("statistics of an empty dataset");
        }
        let actions = || trajectories.iter().flat_map(|t| t.actions.iter().copied());
        let mut action_min = [f64::INFINITY; ACTION_DIM];
        let mut action_max = [f64::NEG_INFINITY; ACTION_DIM];
        for a in actions() {
            for j in 0..ACTION_DIM {
                action_min[j] = action_min[j].min(a[j]);
                action_max[j] = action_max[j].max(a[j]);
            }
        }
        let (obs_mean, obs_std) = mean_std(trajectories.iter().flat_map(|t| t.obs.iter().copied()));
        let (proprio_mean, proprio_std) = mean_std(trajectories.iter().flat_map(|t| t.proprio.iter().copied()));
        Ok(Self { action_min, action_max, obs_mean, obs_std, proprio_mean, proprio_std })
    }

    /// Range of action dimension `j`, widened to be symmetric about zero
    /// so the normalized origin is the null action.
    fn action_range(&self, j: usize) -> (f64, f64) {
        let m = self.action_min[j].abs().max(self.action_max[j].abs()).max(0.5 * RANGE_FLOOR);
        (-m, m)
    }

    /// Maps actions to `[−1, 1]` per dimension.
    pub fn normalize_action(&self, a: [f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|j| {
            let (lo, hi) = self.action_range(j);
            2.0 * (a[j] - lo) / (hi - lo) - 1.0
        })
    }

    pub fn denormalize_action(&self, a: [f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|j| {
            let (lo, hi) = self.action_range(j);
            (a[j] + 1.0) * 0.5 * (hi - lo) + lo
        })
    }

    pub fn normalize_obs(&self, o: [f64; OBS_DIM]) -> [f64; OBS_DIM] {
        std::array::from_fn(|j| (o[j] - self.obs_mean[j]) / self.obs_std[j].max(STD_FLOOR))
    }

    pub fn normalize_proprio(&self, p: [f64; PROPRIO_DIM]) -> [f64; PROPRIO_DIM] {
        std::array::from_fn(|j| (p[j] - self.proprio_mean[j]) / self.proprio_std[j].max(STD_FLOOR))
    }
}

/// Expert demonstrations for one environment plus their statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub env: EnvKind,
    pub seed: u64,
    trajectories: Vec<Trajectory>,
    stats: NormStats,
}

/// A training sample: normalized observation window (oldest first),
/// proprioception window and the action chunk starting at the window's
/// last step.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub obs: Vec<f64>,
    pub proprio: Vec<f64>,
    pub actions: Vec<f64>,
}

impl DemoDataset {
    pub fn new(env: EnvKind, seed: u64, trajectories: Vec<Trajectory>) -> Result<Self> {
        let stats = NormStats::compute(&trajectories)?;
        Ok(Self { env, seed, trajectories, stats })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Total number of recorded control steps.
    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Number of trajectories per mode, `(left, right)`.
    pub fn mode_balance(&self) -> (usize, usize) {
        let left = self.trajectories.iter().filter(|t| t.mode == Mode::Left).count();
        (left, self.len() - left)
    }

    /// Normalized window ending at step `t` of trajectory `traj`. The
    /// observation window repeats the first step before the episode start;
    /// the chunk repeats the last action past the episode end.
    pub fn window(&self, traj: usize, t: usize, obs_horizon: usize, chunk: usize) -> Result<Window> {
        let tr = self
            .trajectories
            .get(traj)
            .ok_or_else(|| Error::Contract(format!("trajectory {traj} of {}", self.len())))?;
        if t >= tr.len() {
            return contract_err(format!("step {t} of a {}-step trajectory", tr.len()));
        }
        let mut obs = Vec::with_capacity(obs_horizon * OBS_DIM);
        let mut proprio = Vec::with_capacity(obs_horizon * PROPRIO_DIM);
        for back in (0..obs_horizon).rev() {
            let s = t.saturating_sub(back);
            obs.extend(self.stats.normalize_obs(tr.obs[s]));
            proprio.extend(self.stats.normalize_proprio(tr.proprio[s]));
        }
        let mut actions = Vec::with_capacity(chunk * ACTION_DIM);
        for i in 0..chunk {
            let s = (t + i).min(tr.len() - 1);
            actions.extend(self.stats.normalize_action(tr.actions[s]));
        }
        Ok(Window { obs, proprio, actions })
    }

    /// Uniformly random `(trajectory, step)` over all recorded steps.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let mut i = rng.random_range(0..self.transitions());
        for (j, tr) in self.trajectories.iter().enumerate() {
            if i < tr.len() {
                return (j, i);
            }
            i -= tr.len();
        }
        unreachable!("index below total transitions")
    }
}

fn quantize<const N: usize>(v: [f64; N]) -> [f64; N] {
    v.map(|x| x as f32 as f64)
}

/// Rolls out the scripted expert from `start`, recording every step.
/// Values are stored at 32-bit precision so they survive serialization
/// unchanged.
pub fn record_expert(start: EnvState, mode: Mode, params: &EnvParams) -> Result<Trajectory> {
    let (mut obs, mut proprio, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    let mut s = start;
    while !s.done {
        let a = quantize(scripted_expert(&s, mode, params.step_scale));
        obs.push(quantize(s.observe()));
        proprio.push(quantize(s.proprio()));
        actions.push(a);
        s = s.step(a, params);
    }
    if !s.success {
        return Err(Error::Contract(format!("{} expert ({mode}) failed from {:?}", start.kind, start)));
    }
    Trajectory::new(obs, proprio, actions, mode)
}

/// `n` expert demonstrations from random starts, mode drawn 50/50 per
/// trajectory. Episode `i` depends only on `(seed, i)`.
pub fn generate_dataset(env: EnvKind, n: usize, seed: u64) -> Result<DemoDataset> {
    if n == 0 {
        return contract_err("a dataset needs at least one trajectory");
    }
    let params = EnvParams::default();
    let mut mode_rng = seeded(seed);
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let mode = if mode_rng.random_bool(0.5) { Mode::Left } else { Mode::Right };
        let start = EnvState::sample(env, &mut substream(seed, 1 + i as u64));
        trajectories.push(record_expert(start, mode, &params)?);
    }
    DemoDataset::new(env, seed, trajectories)
}
