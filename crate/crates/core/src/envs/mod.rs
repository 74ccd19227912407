//! Toy 2-D control tasks with multimodal scripted experts, demonstration
//! datasets and receding-horizon policy evaluation.

mod dataset;
mod eval;
mod expert;
mod world;

pub use dataset::{generate_dataset, record_expert, DemoDataset, NormStats, Trajectory, Window, RANGE_FLOOR, STD_FLOOR};
pub use eval::{
    evaluate_policy, evaluate_with, execution_horizon_variant, DiffusionPolicy, EpisodeOutcome, EvalOptions,
    EvalReport, ExpertPolicy, Policy, Query, POLICY_STREAM,
};
pub use expert::{reach_waypoint, scripted_expert, Mode};
pub use world::{
    Circle, EnvKind, EnvParams, EnvState, Vec2, ACTION_DIM, ARENA, CONTACT_RADIUS, GOAL_TOLERANCE, OBS_DIM,
    PROPRIO_DIM,
};

#[cfg(test)]
mod tests;
