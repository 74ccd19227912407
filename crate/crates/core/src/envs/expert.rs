use std::fmt;

use super::world::{add, dist, norm, perp, scale, segment_distance, sub, unit, EnvKind, EnvState, Vec2, CONTACT_RADIUS};

/// Side on which the expert passes the obstacle (or the block).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Left,
    Right,
}

impl Mode {
    pub fn sign(self) -> f64 {
        match self {
            Mode::Left => 1.0,
            Mode::Right => -1.0,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Mode::Left => 0,
            Mode::Right => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Mode::Left),
            1 => Some(Mode::Right),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Left => "left",
            Mode::Right => "right",
        })
    }
}

/// Clearance the expert keeps from the obstacle boundary.
const CLEARANCE: f64 = 0.05;
/// Extra lateral offset of the detour waypoint beyond the radius.
const DETOUR_OFFSET: f64 = 0.15;

/// Unit-speed-capped step toward `target`, reaching it exactly when
/// within one step.
fn toward(from: Vec2, target: Vec2, step_scale: f64) -> Vec2 {
    let a = scale(sub(target, from), 1.0 / step_scale);
    let n = norm(a);
    if n > 1.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

/// The point the reach-around expert is currently heading for.
pub fn reach_waypoint(state: &EnvState, mode: Mode) -> Vec2 {
    let c = state.obstacle;
    if segment_distance(c.center, state.agent, state.goal) >= c.radius + CLEARANCE {
        return state.goal;
    }
    let side = scale(perp(unit(sub(state.goal, c.center))), mode.sign());
    add(c.center, scale(side, c.radius + DETOUR_OFFSET))
}

/// Deterministic waypoint controller. Reach-around: head for the goal when
/// the straight line clears the obstacle, otherwise for a detour point on
/// the `mode` side. Push-block: get behind the block (passing it on the
/// `mode` side if needed), then push it toward the zone.
pub fn scripted_expert(state: &EnvState, mode: Mode, step_scale: f64) -> Vec2 {
    match state.kind {
        EnvKind::ReachAround => toward(state.agent, reach_waypoint(state, mode), step_scale),
        EnvKind::PushBlock => push_action(state, mode, step_scale),
    }
}

fn push_action(state: &EnvState, mode: Mode, step_scale: f64) -> Vec2 {
    let zone = state.obstacle.center;
    let block = state.block;
    let dir = unit(sub(zone, block));
    let behind = sub(block, scale(dir, CONTACT_RADIUS + 0.02));
    if dist(state.agent, behind) <= step_scale {
        // Aligned: the block rides along, so push straight toward the zone.
        return scale(dir, 1.0f64.min(dist(block, zone) / step_scale + 0.5));
    }
    let target = if segment_distance(block, state.agent, behind) < CONTACT_RADIUS + 0.01 {
        let side = scale(perp(dir), mode.sign());
        let around = add(block, scale(side, CONTACT_RADIUS + 0.08));
        // Once level with the block, drop back behind it.
        if dot_along(sub(state.agent, block), dir) > -0.02 {
            add(around, scale(dir, -0.06))
        } else {
            around
        }
    } else {
        behind
    };
    toward(state.agent, target, step_scale)
}

fn dot_along(v: Vec2, dir: Vec2) -> f64 {
    v[0] * dir[0] + v[1] * dir[1]
}
