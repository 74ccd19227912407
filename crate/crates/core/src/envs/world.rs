use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub(crate) fn scale(a: Vec2, c: f64) -> Vec2 {
    [a[0] * c, a[1] * c]
}

pub(crate) fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

pub(crate) fn unit(a: Vec2) -> Vec2 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        [0.0, 0.0]
    }
}

/// Counter-clockwise quarter turn.
pub(crate) fn perp(a: Vec2) -> Vec2 {
    [-a[1], a[0]]
}

/// Distance from `p` to the segment `a–b`.
pub(crate) fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, add(a, scale(ab, t)))
}

pub const ARENA: f64 = 1.0;
pub const OBS_DIM: usize = 7;
pub const PROPRIO_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
/// Reach-around succeeds within this distance of the goal.
pub const GOAL_TOLERANCE: f64 = 0.05;
/// Push-block: the block moves when its center is closer than this to the
/// agent.
pub const CONTACT_RADIUS: f64 = 0.1;
/// Cosine of the push friction-cone half-angle (45 degrees).
const FRICTION_COS: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn clamp_arena(p: Vec2) -> Vec2 {
    [p[0].clamp(-ARENA, ARENA), p[1].clamp(-ARENA, ARENA)]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EnvKind {
    /// Reach a goal on the far side of a circular obstacle.
    #[default]
    ReachAround,
    /// Push a block into a circular zone.
    PushBlock,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::ReachAround => "reach-around",
            EnvKind::PushBlock => "push-block",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach-around" => Ok(EnvKind::ReachAround),
            "push-block" => Ok(EnvKind::PushBlock),
            other => Err(Error::Config(format!("unknown environment '{other}'"))),
        }
    }
}

impl EnvKind {
    pub fn id(self) -> u8 {
        match self {
            EnvKind::ReachAround => 0,
            EnvKind::PushBlock => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(EnvKind::ReachAround),
            1 => Some(EnvKind::PushBlock),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvParams {
    /// Displacement of a unit action per control step.
    pub step_scale: f64,
    pub episode_cap: usize,
    /// Standard deviation of Gaussian noise added to observations.
    pub obs_noise: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self { step_scale: 0.04, episode_cap: 200, obs_noise: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    pub center: Vec2,
    pub radius: f64,
}

/// Full simulator state. For reach-around `goal` is the target and
/// `obstacle` blocks the agent; for push-block `goal` is the zone center,
/// `obstacle.radius` the zone radius, and `block` the pushed object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub kind: EnvKind,
    pub agent: Vec2,
    pub goal: Vec2,
    pub obstacle: Circle,
    pub block: Vec2,
    pub steps: usize,
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    pub fn reach_around(agent: Vec2, goal: Vec2, obstacle: Circle) -> Self {
        let mut s = Self {
            kind: EnvKind::ReachAround,
            agent: clamp_arena(agent),
            goal,
            obstacle,
            block: [0.0, 0.0],
            steps: 0,
            done: false,
            success: false,
        };
        s.settle(&EnvParams::default());
        s
    }

    pub fn push_block(agent: Vec2, block: Vec2, zone: Circle) -> Self {
        let mut s = Self {
            kind: EnvKind::PushBlock,
            agent: clamp_arena(agent),
            goal: zone.center,
            obstacle: zone,
            block: clamp_arena(block),
            steps: 0,
            done: false,
            success: false,
        };
        s.settle(&EnvParams::default());
        s
    }

    /// Random initial state: starts along the bottom, goals or zones along
    /// the top, obstacle or block in between.
    pub fn sample<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Self {
        match kind {
            EnvKind::ReachAround => {
                let agent = [rng.random_range(-0.15..0.15), rng.random_range(-0.75..-0.55)];
                let goal = [rng.random_range(-0.15..0.15), rng.random_range(0.55..0.75)];
                let center = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
                let radius = rng.random_range(0.22..0.28);
                Self::reach_around(agent, goal, Circle { center, radius })
            }
            EnvKind::PushBlock => {
                let agent = [rng.random_range(-0.3..0.3), rng.random_range(-0.8..-0.6)];
                let block = [rng.random_range(-0.2..0.2), rng.random_range(-0.3..-0.1)];
                let zone = [rng.random_range(-0.3..0.3), rng.random_range(0.4..0.6)];
                let radius = rng.random_range(0.08..0.12);
                Self::push_block(agent, block, Circle { center: zone, radius })
            }
        }
    }

    fn goal_reached(&self) -> bool {
        match self.kind {
            EnvKind::ReachAround => dist(self.agent, self.goal) < GOAL_TOLERANCE,
            EnvKind::PushBlock => dist(self.block, self.obstacle.center) < self.obstacle.radius,
        }
    }

    fn settle(&mut self, params: &EnvParams) {
        self.success = self.goal_reached();
        self.done = self.success || self.steps >= params.episode_cap;
    }

    /// Advances one control step. Actions are clamped to `[−1, 1]²`.
    /// A finished episode is left unchanged.
    pub fn step(&self, action: Vec2, params: &EnvParams) -> Self {
        let mut next = *self;
        if self.done {
            return next;
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let a = [if a[0].is_finite() { a[0] } else { 0.0 }, if a[1].is_finite() { a[1] } else { 0.0 }];
        let mut p = clamp_arena(add(self.agent, scale(a, params.step_scale)));
        match self.kind {
            EnvKind::ReachAround => {
                let c = self.obstacle;
                let off = sub(p, c.center);
                let d = norm(off);
                if d < c.radius {
                    // Project back onto the boundary, along the entry
                    // direction if the agent sits exactly on the center.
                    let dir = if d > 0.0 { scale(off, 1.0 / d) } else { unit(sub(self.agent, c.center)) };
                    p = add(c.center, scale(dir, c.radius));
                }
                next.agent = p;
            }
            EnvKind::PushBlock => {
                next.agent = p;
                if dist(self.block, p) < CONTACT_RADIUS {
                    // Inside the friction cone the block rides along with the
                    // agent; outside it the agent slides and only shoves the
                    // block out along the contact normal.
                    let motion = sub(p, self.agent);
                    let normal = unit(sub(self.block, self.agent));
                    let sticks = dot(motion, normal) >= FRICTION_COS * norm(motion);
                    let block = if sticks { add(self.block, motion) } else { self.block };
                    let off = sub(block, p);
                    let d = norm(off);
                    let dir = if d > 0.0 { scale(off, 1.0 / d) } else { unit(a) };
                    next.block = clamp_arena(add(p, scale(dir, d.max(CONTACT_RADIUS))));
                }
            }
        }
        next.steps += 1;
        next.settle(params);
        next
    }

    /// Observation vector: `[agent, goal, obstacle center, radius]` for
    /// reach-around and `[agent, block, zone center, zone radius]` for
    /// push-block.
    pub fn observe(&self) -> [f64; OBS_DIM] {
        let second = match self.kind {
            EnvKind::ReachAround => self.goal,
            EnvKind::PushBlock => self.block,
        };
        [
            self.agent[0],
            self.agent[1],
            second[0],
            second[1],
            self.obstacle.center[0],
            self.obstacle.center[1],
            self.obstacle.radius,
        ]
    }

    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        self.agent
    }
}
