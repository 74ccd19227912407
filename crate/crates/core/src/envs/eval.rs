use std::collections::VecDeque;

use rand_distr::{Distribution, Normal};

use super::dataset::NormStats;
use super::expert::{scripted_expert, Mode};
use super::world::{sub, EnvKind, EnvParams, EnvState, Vec2, OBS_DIM, PROPRIO_DIM};
use crate::compute::Tensor;
use crate::ddpm::{sample_chunks, NoiseSchedule};
use crate::error::{contract_err, Result};
use crate::model::{ObsBatch, Trunk};
use crate::rng::{substream, SeededRng};

/// What a policy sees when asked to plan: the current state (only the
/// scripted expert may peek at it) and the raw observation history,
/// oldest first.
#[derive(Clone, Debug)]
pub struct Query<'a> {
    pub episode: usize,
    pub state: &'a EnvState,
    pub obs: &'a [[f64; OBS_DIM]],
    pub proprio: &'a [[f64; PROPRIO_DIM]],
}

pub trait Policy {
    /// Observation steps each query carries.
    fn obs_horizon(&self) -> usize;
    /// Actions returned per plan.
    fn horizon(&self) -> usize;
    /// One chunk of raw actions per query.
    fn plan(&mut self, queries: &[Query<'_>]) -> Result<Vec<Vec<Vec2>>>;
}

/// The scripted expert as a policy, planning by simulating itself ahead.
/// Episode `i` uses `Left` when `i` is even.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub chunk: usize,
    pub params: EnvParams,
}

impl ExpertPolicy {
    pub fn mode_for(episode: usize) -> Mode {
        if episode % 2 == 0 {
            Mode::Left
        } else {
            Mode::Right
        }
    }
}

impl Policy for ExpertPolicy {
    fn obs_horizon(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.chunk
    }

    fn plan(&mut self, queries: &[Query<'_>]) -> Result<Vec<Vec<Vec2>>> {
        Ok(queries
            .iter()
            .map(|q| {
                let mode = Self::mode_for(q.episode);
                let mut s = *q.state;
                (0..self.chunk)
                    .map(|_| {
                        let a = scripted_expert(&s, mode, self.params.step_scale);
                        s = s.step(a, &self.params);
                        a
                    })
                    .collect()
            })
            .collect())
    }
}

/// A trained trunk sampled with the DDPM reverse chain. Observations are
/// normalized with the training statistics and sampled chunks mapped back
/// to raw actions.
pub struct DiffusionPolicy {
    pub trunk: Trunk,
    pub sched: NoiseSchedule,
    pub stats: NormStats,
    pub rng: SeededRng,
}

impl DiffusionPolicy {
    pub fn new(trunk: Trunk, sched: NoiseSchedule, stats: NormStats, seed: u64) -> Self {
        Self { trunk, sched, stats, rng: substream(seed, POLICY_STREAM) }
    }
}

impl Policy for DiffusionPolicy {
    fn obs_horizon(&self) -> usize {
        self.trunk.config().obs_horizon
    }

    fn horizon(&self) -> usize {
        self.trunk.config().chunk
    }

    fn plan(&mut self, queries: &[Query<'_>]) -> Result<Vec<Vec<Vec2>>> {
        let c = self.trunk.config();
        let (to, chunk) = (c.obs_horizon, c.chunk);
        let mut obs = Vec::with_capacity(queries.len() * to * OBS_DIM);
        let mut proprio = Vec::with_capacity(queries.len() * to * PROPRIO_DIM);
        for q in queries {
            if q.obs.len() != to || q.proprio.len() != to {
                return contract_err(format!("observation window of {} steps, expected {to}", q.obs.len()));
            }
            q.obs.iter().for_each(|o| obs.extend(self.stats.normalize_obs(*o)));
            q.proprio.iter().for_each(|p| proprio.extend(self.stats.normalize_proprio(*p)));
        }
        let b = queries.len();
        let cond = ObsBatch::new(
            Tensor::new(&[b, to * OBS_DIM], obs)?,
            Tensor::new(&[b, to * PROPRIO_DIM], proprio)?,
        )?;
        let x = sample_chunks(&self.trunk, &cond, &self.sched, &mut self.rng)?;
        Ok((0..b)
            .map(|i| {
                (0..chunk)
                    .map(|t| {
                        let row = x.row(i * chunk + t);
                        let a = self.stats.denormalize_action([row[0], row[1]]);
                        [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
                    })
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    /// Root seed; episode `i` draws its start from an independent stream.
    pub seed: u64,
    /// Actions executed from each plan before re-planning.
    pub exec_horizon: usize,
    pub params: EnvParams,
}

impl EvalOptions {
    pub fn new(episodes: usize, seed: u64) -> Self {
        Self { episodes, seed, exec_horizon: 1, params: EnvParams::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    /// Side of the start→goal line the agent strayed furthest to.
    pub side: Option<Mode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.success).count() as f64 / self.outcomes.len() as f64
    }

    /// `(left, right)` detour counts over successful episodes.
    pub fn side_counts(&self) -> (usize, usize) {
        let ok = self.outcomes.iter().filter(|o| o.success);
        let left = ok.clone().filter(|o| o.side == Some(Mode::Left)).count();
        let right = ok.filter(|o| o.side == Some(Mode::Right)).count();
        (left, right)
    }
}

struct Episode {
    state: EnvState,
    start: Vec2,
    obs: VecDeque<[f64; OBS_DIM]>,
    proprio: VecDeque<[f64; PROPRIO_DIM]>,
    noise: SeededRng,
    /// Signed lateral offset with the largest magnitude so far.
    lateral: f64,
}

impl Episode {
    fn record(&mut self, params: &EnvParams, window: usize) {
        let mut o = self.state.observe();
        if params.obs_noise > 0.0 {
            let n = Normal::new(0.0, params.obs_noise).expect("positive noise");
            o.iter_mut().for_each(|v| *v += n.sample(&mut self.noise));
        }
        if self.obs.is_empty() {
            self.obs.extend(std::iter::repeat_n(o, window));
            self.proprio.extend(std::iter::repeat_n(self.state.proprio(), window));
        } else {
            self.obs.pop_front();
            self.obs.push_back(o);
            self.proprio.pop_front();
            self.proprio.push_back(self.state.proprio());
        }
        let d = sub(self.state.goal, self.start);
        let p = sub(self.state.agent, self.start);
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
        let lateral = (d[0] * p[1] - d[1] * p[0]) / len;
        if lateral.abs() > self.lateral.abs() {
            self.lateral = lateral;
        }
    }
}

/// Runs `episodes` rollouts in lockstep. Each round every unfinished
/// episode is planned for in one batch and executes the first
/// `exec_horizon` actions of its chunk (fewer if it finishes).
pub fn evaluate_with<P: Policy + ?Sized>(policy: &mut P, env: EnvKind, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.exec_horizon == 0 || opts.exec_horizon > policy.horizon() {
        return contract_err(format!(
            "execution horizon {} outside 1..={}",
            opts.exec_horizon,
            policy.horizon()
        ));
    }
    let window = policy.obs_horizon();
    let mut episodes: Vec<Episode> = (0..opts.episodes)
        .map(|i| {
            let state = EnvState::sample(env, &mut substream(opts.seed, 2 * i as u64));
            let mut e = Episode {
                state,
                start: state.agent,
                obs: VecDeque::with_capacity(window),
                proprio: VecDeque::with_capacity(window),
                noise: substream(opts.seed, 2 * i as u64 + 1),
                lateral: 0.0,
            };
            e.record(&opts.params, window);
            e
        })
        .collect();
    loop {
        let active: Vec<usize> = (0..episodes.len()).filter(|&i| !episodes[i].state.done).collect();
        if active.is_empty() {
            break;
        }
        let windows: Vec<(Vec<_>, Vec<_>)> = active
            .iter()
            .map(|&i| (episodes[i].obs.iter().copied().collect(), episodes[i].proprio.iter().copied().collect()))
            .collect();
        let queries: Vec<Query<'_>> = active
            .iter()
            .zip(&windows)
            .map(|(&i, (o, p))| Query { episode: i, state: &episodes[i].state, obs: o, proprio: p })
            .collect();
        let plans = policy.plan(&queries)?;
        drop(queries);
        for (&i, plan) in active.iter().zip(plans) {
            let e = &mut episodes[i];
            for a in plan.into_iter().take(opts.exec_horizon) {
                e.state = e.state.step(a, &opts.params);
                e.record(&opts.params, window);
                if e.state.done {
                    break;
                }
            }
        }
    }
    let outcomes = episodes
        .iter()
        .map(|e| EpisodeOutcome {
            success: e.state.success,
            steps: e.state.steps,
            side: if e.lateral > 0.0 {
                Some(Mode::Left)
            } else if e.lateral < 0.0 {
                Some(Mode::Right)
            } else {
                None
            },
        })
        .collect();
    Ok(EvalReport { outcomes })
}

/// Stream of the policy's sampling noise under an evaluation seed, kept
/// apart from the per-episode streams.
pub const POLICY_STREAM: u64 = 1 << 40;

/// Receding-horizon evaluation of a trained trunk: only the first action
/// of every sampled chunk is executed. Returns the success rate; `seed`
/// fixes episode starts and sampling noise.
pub fn evaluate_policy(
    trunk: &Trunk,
    stats: &NormStats,
    env: EnvKind,
    episodes: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    execution_horizon_variant(trunk, stats, env, episodes, sched, seed, 1)
}

/// [`evaluate_policy`] executing the first `exec_h` actions of each chunk.
pub fn execution_horizon_variant(
    trunk: &Trunk,
    stats: &NormStats,
    env: EnvKind,
    episodes: usize,
    sched: &NoiseSchedule,
    seed: u64,
    exec_h: usize,
) -> Result<f64> {
    let mut policy = DiffusionPolicy::new(trunk.clone(), sched.clone(), stats.clone(), seed);
    let opts = EvalOptions { exec_horizon: exec_h, ..EvalOptions::new(episodes, seed) };
    Ok(evaluate_with(&mut policy, env, &opts)?.success_rate())
}
