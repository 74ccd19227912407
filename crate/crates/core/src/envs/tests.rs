use proptest::prelude::*;

use super::*;
use crate::ddpm::{NoiseSchedule, ScheduleKind};
use crate::model::{Conditioning, ModelConfig, Trunk};
use crate::rng::{seeded, substream};

fn reach_state() -> EnvState {
    EnvState::reach_around([0.0, -0.6], [0.0, 0.6], Circle { center: [0.0, 0.0], radius: 0.25 })
}

#[test]
fn zero_action_keeps_position() {
    let p = EnvParams::default();
    for kind in [EnvKind::ReachAround, EnvKind::PushBlock] {
        let s = EnvState::sample(kind, &mut seeded(1));
        let n = s.step([0.0, 0.0], &p);
        assert_eq!(n.agent, s.agent);
        assert_eq!(n.steps, 1);
    }
}

#[test]
fn agent_at_goal_is_done() {
    let s = EnvState::reach_around([0.3, 0.6], [0.3, 0.6], Circle { center: [0.0, 0.0], radius: 0.25 });
    assert!(s.done && s.success);
    let s = EnvState::reach_around([0.3, 0.58], [0.3, 0.6], Circle { center: [0.0, 0.0], radius: 0.25 });
    let n = s.step([0.0, 0.0], &EnvParams::default());
    assert!(n.done && n.success);
}

#[test]
fn motion_into_obstacle_stops_on_boundary() {
    let p = EnvParams::default();
    let mut s = reach_state();
    for _ in 0..30 {
        s = s.step([0.0, 1.0], &p);
    }
    let d = world::dist(s.agent, s.obstacle.center);
    assert!((d - 0.25).abs() < 1e-9, "{d}");
    // Off-axis approach lands on the boundary too.
    let mut s = EnvState::reach_around([0.1, -0.6], [0.0, 0.6], Circle { center: [0.0, 0.0], radius: 0.25 });
    let mut touched = false;
    for _ in 0..30 {
        let before = s.agent;
        s = s.step([0.0, 1.0], &p);
        let d = world::dist(s.agent, s.obstacle.center);
        assert!(d >= 0.25 - 1e-9);
        // The first blocked step ends on the boundary; later ones slide.
        if !touched && world::dist(before, s.agent) < 0.04 - 1e-12 {
            assert!((d - 0.25).abs() < 1e-9, "{d}");
            touched = true;
        }
    }
    assert!(touched);
}

#[test]
fn positions_stay_in_arena_and_cap_ends_episode() {
    let p = EnvParams::default();
    let mut s = reach_state();
    for _ in 0..250 {
        s = s.step([-1.0, -1.0], &p);
        assert!(s.agent.iter().all(|v| v.abs() <= ARENA));
    }
    assert!(s.done && !s.success);
    assert_eq!(s.steps, p.episode_cap);
}

#[test]
fn dynamics_are_deterministic_and_clamp_inputs() {
    let p = EnvParams::default();
    let s = EnvState::sample(EnvKind::PushBlock, &mut seeded(3));
    assert_eq!(s.step([0.3, 0.7], &p), s.step([0.3, 0.7], &p));
    assert_eq!(s.step([5.0, -9.0], &p), s.step([1.0, -1.0], &p));
}

#[test]
fn push_moves_block_on_contact() {
    let p = EnvParams::default();
    let s = EnvState::push_block([0.0, -0.2], [0.0, -0.08], Circle { center: [0.0, 0.5], radius: 0.1 });
    let n = s.step([0.0, 1.0], &p);
    assert!(n.block[1] > s.block[1]);
    // A head-on push carries the block with the agent.
    assert!((n.block[1] - s.block[1] - p.step_scale).abs() < 1e-12);
    assert!(n.block[0].abs() < 1e-12);
}

#[test]
fn glancing_contact_slides_instead_of_carrying() {
    let p = EnvParams::default();
    let s = EnvState::push_block([-0.05, -0.2], [0.0, -0.11], Circle { center: [0.0, 0.5], radius: 0.1 });
    let n = s.step([1.0, 0.0], &p);
    assert!((world::dist(n.agent, n.block) - CONTACT_RADIUS).abs() < 1e-12);
    assert!(n.block[1] > s.block[1]);
}

#[test]
fn expert_heads_straight_to_visible_goal() {
    let s = EnvState::reach_around([0.6, 0.2], [0.3, 0.7], Circle { center: [0.0, 0.0], radius: 0.25 });
    let a = scripted_expert(&s, Mode::Left, 0.04);
    let to_goal = world::unit(world::sub(s.goal, s.agent));
    let cos = world::dot(a, to_goal) / world::norm(a);
    assert!(cos > 0.99, "{cos}");
}

#[test]
fn expert_modes_differ_at_the_obstacle() {
    let s = reach_state();
    let l = scripted_expert(&s, Mode::Left, 0.04);
    let r = scripted_expert(&s, Mode::Right, 0.04);
    assert!(world::dist(l, r) > 0.5);
    assert!(l[0] < 0.0 && r[0] > 0.0);
}

#[test]
fn expert_always_succeeds() {
    let p = EnvParams::default();
    for kind in [EnvKind::ReachAround, EnvKind::PushBlock] {
        for i in 0..200 {
            for mode in [Mode::Left, Mode::Right] {
                let start = EnvState::sample(kind, &mut substream(11, i));
                let t = record_expert(start, mode, &p).unwrap_or_else(|e| panic!("{kind} {i} {mode}: {e}"));
                assert!(t.len() < p.episode_cap);
            }
        }
    }
}

#[test]
fn expert_policy_scores_one() {
    for kind in [EnvKind::ReachAround, EnvKind::PushBlock] {
        let mut policy = ExpertPolicy { chunk: 10, params: EnvParams::default() };
        let report = evaluate_with(&mut policy, kind, &EvalOptions::new(40, 5)).unwrap();
        assert_eq!(report.success_rate(), 1.0, "{kind}");
    }
    // Detour side classification follows the expert's mode.
    let mut policy = ExpertPolicy { chunk: 10, params: EnvParams::default() };
    let report = evaluate_with(&mut policy, EnvKind::ReachAround, &EvalOptions::new(40, 6)).unwrap();
    for (i, o) in report.outcomes.iter().enumerate() {
        assert_eq!(o.side, Some(ExpertPolicy::mode_for(i)));
    }
    assert_eq!(report.side_counts(), (20, 20));
    // Open-loop chunks of the expert are still exact.
    let opts = EvalOptions { exec_horizon: 10, ..EvalOptions::new(20, 7) };
    assert_eq!(evaluate_with(&mut policy, EnvKind::ReachAround, &opts).unwrap().success_rate(), 1.0);
}

#[test]
fn execution_horizon_is_validated() {
    let mut policy = ExpertPolicy { chunk: 4, params: EnvParams::default() };
    for h in [0, 5] {
        let opts = EvalOptions { exec_horizon: h, ..EvalOptions::new(2, 0) };
        assert!(evaluate_with(&mut policy, EnvKind::ReachAround, &opts).is_err());
    }
}

#[test]
fn dataset_generation_is_deterministic() {
    let a = generate_dataset(EnvKind::ReachAround, 20, 7).unwrap();
    let b = generate_dataset(EnvKind::ReachAround, 20, 7).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(EnvKind::ReachAround, 20, 8).unwrap();
    assert_ne!(a, c);
    assert!(generate_dataset(EnvKind::ReachAround, 0, 7).is_err());
}

#[test]
fn mode_balance_within_binomial_bound() {
    for seed in 0..20 {
        let d = generate_dataset(EnvKind::ReachAround, 20, seed).unwrap();
        let (l, r) = d.mode_balance();
        assert!((5..=15).contains(&l) && (5..=15).contains(&r), "seed {seed}: {l}/{r}");
    }
}

#[test]
fn stored_actions_in_bounds_and_stats_recomputable() {
    let d = generate_dataset(EnvKind::PushBlock, 10, 3).unwrap();
    for t in d.trajectories() {
        assert!(t.actions.iter().flatten().all(|a| a.abs() <= 1.0));
        assert!(t.obs.iter().flatten().all(|v| (*v as f32 as f64) == *v));
    }
    let again = NormStats::compute(d.trajectories()).unwrap();
    let s = d.stats();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
    assert!(close(&again.action_min, &s.action_min) && close(&again.action_max, &s.action_max));
    assert!(close(&again.obs_mean, &s.obs_mean) && close(&again.obs_std, &s.obs_std));
}

#[test]
fn action_normalization_inverts() {
    let d = generate_dataset(EnvKind::ReachAround, 10, 4).unwrap();
    let s = d.stats();
    for a in d.trajectories().iter().flat_map(|t| t.actions.iter()) {
        let n = s.normalize_action(*a);
        assert!(n.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        let back = s.denormalize_action(n);
        assert!((back[0] - a[0]).abs() < 1e-9 && (back[1] - a[1]).abs() < 1e-9);
    }
}

#[test]
fn expert_actions_are_bimodal_at_the_decision_point() {
    let d = generate_dataset(EnvKind::ReachAround, 40, 9).unwrap();
    let mut groups: [Vec<Vec2>; 2] = [vec![], vec![]];
    for t in d.trajectories() {
        groups[t.mode.id() as usize].push(t.actions[0]);
    }
    let centroid = |g: &[Vec2]| {
        let n = g.len() as f64;
        [g.iter().map(|a| a[0]).sum::<f64>() / n, g.iter().map(|a| a[1]).sum::<f64>() / n]
    };
    let spread = |g: &[Vec2], c: Vec2| (g.iter().map(|a| world::dist(*a, c).powi(2)).sum::<f64>() / g.len() as f64).sqrt();
    let (c0, c1) = (centroid(&groups[0]), centroid(&groups[1]));
    let within = spread(&groups[0], c0).max(spread(&groups[1], c1));
    assert!(world::dist(c0, c1) > 5.0 * within, "{:?} {:?} {within}", c0, c1);
}

#[test]
fn windows_pad_at_both_ends() {
    let d = generate_dataset(EnvKind::ReachAround, 2, 1).unwrap();
    let tr = &d.trajectories()[0];
    let w = d.window(0, 0, 2, 10).unwrap();
    assert_eq!(w.obs.len(), 14);
    assert_eq!(&w.obs[..7], &w.obs[7..]);
    let last = tr.len() - 1;
    let w = d.window(0, last, 2, 10).unwrap();
    let a = d.stats().normalize_action(tr.actions[last]);
    for i in 0..10 {
        assert_eq!(&w.actions[2 * i..2 * i + 2], &a);
    }
    assert!(d.window(0, tr.len(), 2, 10).is_err());
    assert!(d.window(5, 0, 2, 10).is_err());
}

#[test]
fn untrained_policy_rarely_succeeds_and_is_seeded() {
    let c = ModelConfig::custom(1, 16, 2, Conditioning::AdaLn);
    let trunk = Trunk::new(c, &mut seeded(0)).unwrap();
    let d = generate_dataset(EnvKind::ReachAround, 10, 2).unwrap();
    let sched = NoiseSchedule::new(5, ScheduleKind::SquaredCosine).unwrap();
    let a = evaluate_policy(&trunk, d.stats(), EnvKind::ReachAround, 100, &sched, 3).unwrap();
    assert!(a <= 0.05, "{a}");
    let b = evaluate_policy(&trunk, d.stats(), EnvKind::ReachAround, 100, &sched, 3).unwrap();
    assert_eq!(a, b);
    let h1 = execution_horizon_variant(&trunk, d.stats(), EnvKind::ReachAround, 100, &sched, 3, 1).unwrap();
    assert_eq!(a, h1);
}

proptest! {
    #[test]
    fn states_stay_in_bounds(seed in 0u64..500, actions in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..80)) {
        let p = EnvParams::default();
        for kind in [EnvKind::ReachAround, EnvKind::PushBlock] {
            let mut s = EnvState::sample(kind, &mut seeded(seed));
            for &(x, y) in &actions {
                s = s.step([x, y], &p);
                prop_assert!(s.agent.iter().chain(s.block.iter()).all(|v| v.abs() <= ARENA));
                if kind == EnvKind::ReachAround {
                    prop_assert!(world::dist(s.agent, s.obstacle.center) >= s.obstacle.radius - 1e-9);
                }
                prop_assert!(!s.done || s.success || s.steps == p.episode_cap);
            }
        }
    }
}
