use proptest::prelude::*;
use scaledp_core::ddpm::ScheduleKind;
use scaledp_core::envs::EnvKind;
use scaledp_core::model::{Conditioning, ModelConfig, ModelName};
use scaledp_harness::{ExperimentConfig, HarnessError};

#[test]
fn default_round_trips() {
    let c = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
}

#[test]
fn unknown_key_is_rejected_with_line() {
    let text = "model.layers = 4\nmodel.layrs = 4\n";
    let e = ExperimentConfig::parse(text).unwrap_err();
    assert!(matches!(e, HarnessError::Config(ref m) if m.contains("line 2") && m.contains("model.layrs")), "{e}");
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn duplicate_and_malformed_lines_are_rejected() {
    assert!(ExperimentConfig::parse("ddpm.steps = 10\nddpm.steps = 20\n").is_err());
    assert!(ExperimentConfig::parse("ddpm.steps 10\n").is_err());
    assert!(ExperimentConfig::parse("ddpm.steps = ten\n").is_err());
    assert!(ExperimentConfig::parse("model.causal_mask = yes\n").is_err());
}

#[test]
fn comments_blanks_and_partial_files() {
    let c = ExperimentConfig::parse("# toy\n\nmodel.layers = 3\n  training.clip = none  \n").unwrap();
    assert_eq!(c.model.layers, 3);
    assert_eq!(c.training.clip, None);
    assert_eq!(c.ddpm, ExperimentConfig::default().ddpm);
}

#[test]
fn invalid_values_fail_validation() {
    for bad in [
        "model.hidden = 30\nmodel.heads = 4",
        "training.ema_decay = 1",
        "training.batch = 0",
        "ddpm.steps = 0",
        "eval.exec_horizon = 11",
        "model.name = Ti",
        "training.clip = -1",
    ] {
        assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
    }
    let ti = "model.name = Ti\nmodel.layers = 8\nmodel.hidden = 256\nmodel.heads = 4\n";
    assert_eq!(ExperimentConfig::parse(ti).unwrap().model.name, ModelName::Ti);
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (1usize..6, 1usize..5, 1usize..4, any::<bool>(), any::<bool>(), any::<bool>()),
        (1usize..12, 1usize..4, 1usize..200, any::<bool>()),
        (1usize..100_000, 1usize..256, 0.0f64..1.0, any::<u64>(), 0.0f64..0.99999, 0.0f64..1.0),
        (prop::option::of(0.001f64..100.0), 0usize..1000, 0usize..100_000, any::<bool>(), 1usize..100),
        (0usize..1000, 0usize..10_000),
    )
        .prop_map(|(m, d, t, o, e)| {
            let (layers, heads, per_head, cross, causal, zero) = m;
            let (chunk, obs_horizon, ddpm_steps, linear) = d;
            let (steps, batch, lr, seed, ema, wd) = t;
            let (clip, warmup, resume, push, demos) = o;
            let mut c = ExperimentConfig::default();
            let cond = if cross { Conditioning::CrossAttention } else { Conditioning::AdaLn };
            c.model = ModelConfig {
                causal_mask: causal,
                adaln_zero_init: zero,
                chunk,
                obs_horizon,
                ..ModelConfig::custom(layers, heads * per_head * 2, heads, cond)
            };
            c.ddpm.steps = ddpm_steps;
            c.ddpm.schedule = if linear { ScheduleKind::Linear } else { ScheduleKind::SquaredCosine };
            c.training.steps = steps;
            c.training.batch = batch;
            c.training.lr = lr;
            c.training.seed = seed;
            c.training.ema_decay = ema;
            c.training.weight_decay = wd;
            c.training.clip = clip;
            c.training.warmup = warmup;
            c.training.resume_step = resume;
            c.env.id = if push { EnvKind::PushBlock } else { EnvKind::ReachAround };
            c.env.n_demos = demos;
            c.eval.episodes = e.0;
            c.eval.eval_every = e.1;
            c.eval.exec_horizon = 1 + (e.1 % chunk);
            c
        })
}

proptest! {
    #[test]
    fn render_parse_is_lossless(c in arb_config()) {
        let text = c.render();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.render(), text);
    }
}
