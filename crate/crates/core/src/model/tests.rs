use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::compute::{check_gradients_many, Tape, Tensor, Var};
use crate::ddpm::NoisePredictor;
use crate::error::Error;
use crate::rng::{seeded, standard_normal};

fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let n = shape.iter().product();
    let data = standard_normal(&mut seeded(seed), n).into_iter().map(|z| scale * z.tanh()).collect();
    Tensor::new(shape, data).unwrap()
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Overwrites every parameter with non-degenerate random values so that
/// zero-initialized paths carry signal.
fn scramble(trunk: &mut Trunk, scale: f64, seed: u64) {
    let mut rng = seeded(seed);
    for p in trunk.params_mut().iter_mut() {
        for v in p.tensor.data_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn obs_batch(config: &ModelConfig, batch: usize, seed: u64) -> ObsBatch {
    ObsBatch::new(
        uniform(&[batch, config.obs_horizon * config.obs_dim], seed),
        uniform(&[batch, config.obs_horizon * config.proprio_dim], seed + 1),
    )
    .unwrap()
}

fn noised(config: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    random(&[batch * config.chunk, config.action_dim], 1.0, seed)
}

#[test]
fn named_configs_match_grid() {
    let expected = [(8, 256, 4), (12, 384, 6), (12, 768, 12), (24, 1024, 16), (32, 1280, 16)];
    for (spec, dims) in SIZE_GRID.iter().zip(expected) {
        let c = ModelConfig::named(spec.name, Conditioning::AdaLn).unwrap();
        assert_eq!((c.layers, c.hidden, c.heads), dims);
        c.validate().unwrap();
    }
    assert!(ModelConfig::named(ModelName::Custom, Conditioning::AdaLn).is_err());
}

#[test]
fn indivisible_heads_is_config_error() {
    let c = ModelConfig::custom(1, 10, 3, Conditioning::AdaLn);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    assert!(matches!(Trunk::new(c, &mut seeded(0)), Err(Error::Config(_))));
}

#[test]
fn hand_enumerated_tiny_trunk() {
    // N=1, d=2, one head, 2-D actions, 2 steps of 7+2 observation inputs.
    let expected: &[(&str, &[usize])] = &[
        ("embed.action.weight", &[2, 2]),
        ("embed.action.bias", &[2]),
        ("embed.time.fc1.weight", &[2, 2]),
        ("embed.time.fc1.bias", &[2]),
        ("embed.time.fc2.weight", &[2, 2]),
        ("embed.time.fc2.bias", &[2]),
        ("embed.obs.fc1.weight", &[18, 2]),
        ("embed.obs.fc1.bias", &[2]),
        ("embed.obs.fc2.weight", &[2, 2]),
        ("embed.obs.fc2.bias", &[2]),
        ("blocks.0.adaln.weight", &[2, 12]),
        ("blocks.0.adaln.bias", &[12]),
        ("blocks.0.attn.qkv.weight", &[2, 6]),
        ("blocks.0.attn.qkv.bias", &[6]),
        ("blocks.0.attn.proj.weight", &[2, 2]),
        ("blocks.0.attn.proj.bias", &[2]),
        ("blocks.0.mlp.fc1.weight", &[2, 8]),
        ("blocks.0.mlp.fc1.bias", &[8]),
        ("blocks.0.mlp.fc2.weight", &[8, 2]),
        ("blocks.0.mlp.fc2.bias", &[2]),
        ("final.adaln.weight", &[2, 4]),
        ("final.adaln.bias", &[4]),
        ("final.linear.weight", &[2, 2]),
        ("final.linear.bias", &[2]),
    ];
    let config = ModelConfig::custom(1, 2, 1, Conditioning::AdaLn);
    let trunk = Trunk::new(config.clone(), &mut seeded(0)).unwrap();
    let got: Vec<(&str, &[usize])> = trunk.params().iter().map(|p| (p.name.as_str(), p.tensor.shape())).collect();
    assert_eq!(got, expected);
    let hand: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(hand, 182);
    assert_eq!(count_params(&config), 182);
    let in_group = |g: ParamGroup| -> usize {
        trunk.params().iter().filter(|p| p.group == g).map(|p| p.tensor.numel()).sum()
    };
    assert_eq!(in_group(ParamGroup::Embeddings), 62);
    assert_eq!(in_group(ParamGroup::Block(0)), 102);
    assert_eq!(in_group(ParamGroup::Final), 18);
}

#[test]
fn analytic_count_matches_built_trunks() {
    for cond in [Conditioning::AdaLn, Conditioning::CrossAttention] {
        for (layers, hidden, heads) in [(1, 2, 1), (2, 16, 4), (3, 24, 3)] {
            for zero in [true, false] {
                let mut c = ModelConfig::custom(layers, hidden, heads, cond);
                c.adaln_zero_init = zero;
                let t = Trunk::new(c.clone(), &mut seeded(1)).unwrap();
                assert_eq!(t.params().numel() as u64, count_params(&c), "{c:?}");
            }
        }
    }
}

#[test]
fn published_sizes_within_tolerance() {
    for spec in SIZE_GRID {
        let c = ModelConfig::named(spec.name, Conditioning::AdaLn).unwrap();
        let ratio = count_params(&c) as f64 / spec.reference_params as f64;
        assert!((0.85..=1.15).contains(&ratio), "{}: {}", spec.name, count_params(&c));
    }
}

#[test]
fn conditioning_swap_changes_count_by_less_than_a_fifth() {
    for spec in SIZE_GRID {
        let a = count_params(&ModelConfig::named(spec.name, Conditioning::AdaLn).unwrap()) as f64;
        let x = count_params(&ModelConfig::named(spec.name, Conditioning::CrossAttention).unwrap()) as f64;
        assert!((a - x).abs() / a.max(x) < 0.2, "{}", spec.name);
    }
}

#[test]
fn parameter_names_unique_and_grouping_total() {
    let c = ModelConfig::custom(3, 16, 2, Conditioning::CrossAttention);
    let t = Trunk::new(c, &mut seeded(2)).unwrap();
    let names: std::collections::BTreeSet<_> = t.params().names().collect();
    assert_eq!(names.len(), t.params().len());
    for p in t.params().iter() {
        match p.group {
            ParamGroup::Block(i) => assert!(p.name.starts_with(&format!("blocks.{i}."))),
            ParamGroup::Embeddings => assert!(p.name.starts_with("embed.")),
            ParamGroup::Final => assert!(p.name.starts_with("final.")),
        }
    }
}

#[test]
fn adaln_modulate_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let shift = tape.constant(Tensor::from_rows(&[vec![0.0, -1.0]]).unwrap());
    let scale = tape.constant(Tensor::from_rows(&[vec![0.5, 0.0]]).unwrap());
    let y = adaln_modulate(&mut tape, x, shift, scale, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 1.0]);

    // γ = −1 collapses every token onto β.
    let x = tape.constant(random(&[3, 2], 1.0, 3));
    let beta = tape.constant(Tensor::from_rows(&[vec![0.25, -0.75]]).unwrap());
    let minus_one = tape.constant(Tensor::full(&[1, 2], -1.0));
    let y = adaln_modulate(&mut tape, x, beta, minus_one, 3).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(y).row(r), &[0.25, -0.75]);
    }

    let zero = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(adaln_modulate(&mut tape, x, zero, zero, 3), Err(Error::Dimension(_))));
}

#[test]
fn zero_modulation_after_layer_norm_is_plain_layer_norm() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[4, 6], 2.0, 4));
    let ln = tape.layer_norm(x, LAYER_NORM_EPS).unwrap();
    let zero = tape.constant(Tensor::zeros(&[2, 6]));
    let y = adaln_modulate(&mut tape, ln, zero, zero, 2).unwrap();
    assert_eq!(tape.value(y), tape.value(ln));
}

#[test]
fn timestep_embeddings_are_distinct_and_sized() {
    let c = ModelConfig::custom(1, 32, 4, Conditioning::AdaLn);
    let mut t = Trunk::new(c, &mut seeded(5)).unwrap();
    scramble(&mut t, 0.3, 6);
    let mut tape = Tape::new();
    let p = t.bind(&mut tape, false);
    let steps: Vec<usize> = (1..=20).collect();
    let e = t.timestep_embedding(&mut tape, &p, &steps).unwrap();
    let e = tape.value(e).clone();
    assert_eq!(e.shape(), &[20, 32]);
    for i in 0..20 {
        for j in i + 1..20 {
            let diff = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff > 1e-6, "steps {} and {}", i + 1, j + 1);
        }
    }
    assert!(t.timestep_embedding(&mut tape, &p, &[0]).is_err());
}

#[test]
fn observation_encoding_contracts() {
    let c = ModelConfig::custom(1, 16, 2, Conditioning::AdaLn);
    let mut t = Trunk::new(c.clone(), &mut seeded(7)).unwrap();
    scramble(&mut t, 0.3, 8);

    // Zero inputs leave only the bias path: fc2(silu(b1)) + b2.
    let zero = ObsBatch::new(Tensor::zeros(&[1, 14]), Tensor::zeros(&[1, 4])).unwrap();
    let mut tape = Tape::new();
    let p = t.bind(&mut tape, false);
    let got = t.encode_observation(&mut tape, &p, &zero).unwrap();
    let got = tape.value(got).clone();
    let b1 = &t.params().by_name("embed.obs.fc1.bias").unwrap().tensor;
    let w2 = &t.params().by_name("embed.obs.fc2.weight").unwrap().tensor;
    let b2 = &t.params().by_name("embed.obs.fc2.bias").unwrap().tensor;
    for j in 0..16 {
        let mut v = b2.data()[j];
        for i in 0..16 {
            let h = b1.data()[i];
            v += h / (1.0 + (-h).exp()) * w2.at(i, j);
        }
        assert!((got.data()[j] - v).abs() < 1e-12);
    }

    // Swapping the two steps of the window changes the encoding.
    let window = obs_batch(&c, 1, 9);
    let mut swapped = window.clone();
    let (o, pr) = (window.obs.row(0).to_vec(), window.proprio.row(0).to_vec());
    swapped.obs.data_mut().copy_from_slice(&[&o[7..], &o[..7]].concat());
    swapped.proprio.data_mut().copy_from_slice(&[&pr[2..], &pr[..2]].concat());
    let a = t.encode_observation(&mut tape, &p, &window).unwrap();
    let b = t.encode_observation(&mut tape, &p, &swapped).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() > 1e-8);

    let short = ObsBatch::new(Tensor::zeros(&[1, 7]), Tensor::zeros(&[1, 2])).unwrap();
    assert!(matches!(t.encode_observation(&mut tape, &p, &short), Err(Error::Contract(_))));
}

#[test]
fn observation_encoding_finite_over_seeds() {
    let c = ModelConfig::custom(1, 32, 4, Conditioning::AdaLn);
    for seed in 0..100 {
        let t = Trunk::new(c.clone(), &mut seeded(seed)).unwrap();
        let mut tape = Tape::new();
        let p = t.bind(&mut tape, false);
        let e = t.encode_observation(&mut tape, &p, &obs_batch(&c, 2, 1000 + seed)).unwrap();
        assert!(tape.value(e).data().iter().all(|v| v.is_finite()));
    }
}

fn token_output(t: &Trunk, x: &Tensor, causal: bool) -> Tensor {
    let mut tape = Tape::new();
    let p = t.bind(&mut tape, false);
    let x = tape.constant(x.clone());
    let y = t.attention(&mut tape, &p, 0, x, 1, causal).unwrap();
    tape.value(y).clone()
}

#[test]
fn attention_mask_semantics() {
    let c = ModelConfig::custom(1, 16, 4, Conditioning::AdaLn);
    let mut t = Trunk::new(c, &mut seeded(10)).unwrap();
    scramble(&mut t, 0.4, 11);
    let x = random(&[10, 16], 1.0, 12);

    // Single token: masking is irrelevant.
    let one = random(&[1, 16], 1.0, 13);
    assert_eq!(token_output(&t, &one, true), token_output(&t, &one, false));

    let mut bumped = x.clone();
    for v in &mut bumped.data_mut()[9 * 16..] {
        *v += 0.5;
    }
    for causal in [true, false] {
        let a = token_output(&t, &x, causal);
        let b = token_output(&t, &bumped, causal);
        let d0 = a.row(0).iter().zip(b.row(0)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        if causal {
            assert!(d0 <= 1e-12, "{d0}");
        } else {
            assert!(d0 > 1e-8, "{d0}");
        }
    }
}

#[test]
fn causal_dependence_is_lower_triangular() {
    let c = ModelConfig::custom(1, 8, 2, Conditioning::AdaLn);
    let mut t = Trunk::new(c, &mut seeded(14)).unwrap();
    scramble(&mut t, 0.4, 15);
    let x = random(&[6, 8], 1.0, 16);
    for causal in [true, false] {
        let base = token_output(&t, &x, causal);
        let mut future_dependence = false;
        for j in 0..6 {
            let mut bumped = x.clone();
            bumped.data_mut()[j * 8] += 0.3;
            let out = token_output(&t, &bumped, causal);
            for i in 0..j {
                let d = out.row(i).iter().zip(base.row(i)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                if causal {
                    assert!(d <= 1e-12);
                } else if d > 1e-8 {
                    future_dependence = true;
                }
            }
        }
        assert_eq!(future_dependence, !causal);
    }
}

#[test]
fn zero_init_trunk_is_identity_blocks_and_zero_head() {
    let c = ModelConfig::custom(3, 32, 4, Conditioning::AdaLn);
    let t = Trunk::new(c.clone(), &mut seeded(17)).unwrap();
    let cond = obs_batch(&c, 2, 18);
    let out = t.predict(&noised(&c, 2, 19), &[3, 77], &cond).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.shape(), &[20, 2]);

    let mut tape = Tape::new();
    let p = t.bind(&mut tape, false);
    let steps = [5, 9];
    let cvec = t.condition_embedding(&mut tape, &p, &steps, &cond).unwrap();
    let cvec = tape.silu(cvec).unwrap();
    let x0 = tape.constant(random(&[20, 32], 1.0, 20));
    let mut x = x0;
    for i in 0..3 {
        let y = t.scaledp_block(&mut tape, &p, i, x, cvec).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)).unwrap() <= 1e-12);
        x = y;
    }
    let head = t.final_layer(&mut tape, &p, x, Some(cvec)).unwrap();
    assert!(tape.value(head).data().iter().all(|&v| v == 0.0));
}

#[test]
fn first_gradient_at_init_is_bounded() {
    let c = ModelConfig::custom(2, 32, 4, Conditioning::AdaLn);
    let t = Trunk::new(c.clone(), &mut seeded(21)).unwrap();
    let cond = obs_batch(&c, 4, 22);
    let eps = noised(&c, 4, 23);
    let mut tape = Tape::new();
    let p = t.bind(&mut tape, true);
    let x = tape.constant(noised(&c, 4, 24));
    let pred = t.forward(&mut tape, &p, x, &[1, 2, 3, 4], &cond).unwrap();
    let target = tape.constant(eps);
    let loss = tape.mse(pred, target).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut nonzero = 0;
    for (param, v) in t.params().iter().zip(&p) {
        let grad = g.get(*v).unwrap();
        assert!(grad.iter().all(|x| x.is_finite() && x.abs() < 1e3));
        if grad.iter().any(|&x| x != 0.0) {
            nonzero += 1;
            assert!(param.name.starts_with("final."), "{}", param.name);
        }
    }
    assert!(nonzero > 0);
}

#[test]
fn perturbations_reach_the_output() {
    for cond_kind in [Conditioning::AdaLn, Conditioning::CrossAttention] {
        let c = ModelConfig::custom(2, 16, 2, cond_kind);
        let mut t = Trunk::new(c.clone(), &mut seeded(25)).unwrap();
        scramble(&mut t, 0.3, 26);
        let x = noised(&c, 1, 27);
        let o = obs_batch(&c, 1, 28);
        let a = t.predict(&x, &[4], &o).unwrap();
        let b = t.predict(&x, &[40], &o).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-8);
        let o2 = obs_batch(&c, 1, 29);
        let d = t.predict(&x, &[4], &o2).unwrap();
        assert!(a.max_abs_diff(&d).unwrap() > 1e-8);
    }
}

#[test]
fn decoder_block_respects_mask_and_condition() {
    let c = ModelConfig::custom(1, 16, 2, Conditioning::CrossAttention);
    let mut t = Trunk::new(c, &mut seeded(30)).unwrap();
    scramble(&mut t, 0.3, 31);
    let run = |x: &Tensor, cond: &Tensor| {
        let mut tape = Tape::new();
        let p = t.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let cs = tape.constant(cond.clone());
        let y = t.dpt_block(&mut tape, &p, 0, x, cs).unwrap();
        tape.value(y).clone()
    };
    let x = random(&[10, 16], 1.0, 32);
    let cond = random(&[3, 16], 1.0, 33);
    let base = run(&x, &cond);
    assert_eq!(base.shape(), &[10, 16]);

    let mut late = x.clone();
    for v in &mut late.data_mut()[5 * 16..] {
        *v -= 0.7;
    }
    let moved = run(&late, &cond);
    for i in 0..5 {
        let d = moved.row(i).iter().zip(base.row(i)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-12);
    }
    let zero_cond = run(&x, &Tensor::zeros(&[3, 16]));
    assert!(zero_cond.max_abs_diff(&base).unwrap() > 1e-8);
}

#[test]
fn block_ops_reject_wrong_trunk_kind() {
    let a = Trunk::new(ModelConfig::custom(1, 8, 2, Conditioning::AdaLn), &mut seeded(0)).unwrap();
    let x = Trunk::new(ModelConfig::custom(1, 8, 2, Conditioning::CrossAttention), &mut seeded(0)).unwrap();
    let mut tape = Tape::new();
    let pa = a.bind(&mut tape, false);
    let px = x.bind(&mut tape, false);
    let v = tape.constant(Tensor::zeros(&[10, 8]));
    let c = tape.constant(Tensor::zeros(&[1, 8]));
    assert!(matches!(a.dpt_block(&mut tape, &pa, 0, v, c), Err(Error::Contract(_))));
    assert!(matches!(x.scaledp_block(&mut tape, &px, 0, v, c), Err(Error::Contract(_))));
    assert!(matches!(a.scaledp_block(&mut tape, &pa, 5, v, c), Err(Error::Contract(_))));
}

/// Gradient check of `loss(trunk(params))` with respect to every parameter
/// and the noised chunk.
fn trunk_gradcheck(c: &ModelConfig, seed: u64) -> f64 {
    let mut t = Trunk::new(c.clone(), &mut seeded(seed)).unwrap();
    scramble(&mut t, 0.2, seed + 1);
    let cond = obs_batch(c, 2, seed + 2);
    let target = random(&[2 * c.chunk, c.action_dim], 1.0, seed + 3);
    let mut inputs: Vec<Tensor> = t.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(noised(c, 2, seed + 4));
    let n = t.params().len();
    check_gradients_many(
        |tape: &mut Tape, vars: &[Var]| {
            let y = t.forward(tape, &vars[..n], vars[n], &[3, 17], &cond)?;
            let target = tape.constant(target.clone());
            tape.mse(y, target)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn full_trunk_gradients_scaledp() {
    let err = trunk_gradcheck(&ModelConfig::custom(2, 32, 4, Conditioning::AdaLn), 40);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn full_trunk_gradients_dpt() {
    let err = trunk_gradcheck(&ModelConfig::custom(2, 16, 2, Conditioning::CrossAttention), 50);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn final_layer_and_timestep_gradients() {
    let c = ModelConfig::custom(1, 8, 2, Conditioning::AdaLn);
    let mut t = Trunk::new(c.clone(), &mut seeded(60)).unwrap();
    scramble(&mut t, 0.3, 61);
    let n = t.params().len();
    let mut inputs: Vec<Tensor> = t.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(random(&[10, 8], 1.0, 62));
    inputs.push(random(&[1, 8], 1.0, 63));
    let err = check_gradients_many(
        |tape: &mut Tape, v: &[Var]| {
            let y = t.final_layer(tape, &v[..n], v[n], Some(v[n + 1]))?;
            let y = tape.mul(y, y)?;
            tape.mean(y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let err = check_gradients_many(
        |tape: &mut Tape, v: &[Var]| {
            let e = t.timestep_embedding(tape, &v[..n], &[1, 7, 50])?;
            let e = tape.mul(e, e)?;
            tape.sum(e)
        },
        &inputs[..n],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn two_stacked_blocks_gradients() {
    let c = ModelConfig::custom(2, 8, 2, Conditioning::AdaLn);
    let mut t = Trunk::new(c, &mut seeded(70)).unwrap();
    scramble(&mut t, 0.3, 71);
    let n = t.params().len();
    let mut inputs: Vec<Tensor> = t.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(random(&[10, 8], 1.0, 72));
    inputs.push(random(&[1, 8], 1.0, 73));
    let err = check_gradients_many(
        |tape: &mut Tape, v: &[Var]| {
            let x = t.scaledp_block(tape, &v[..n], 0, v[n], v[n + 1])?;
            let x = t.scaledp_block(tape, &v[..n], 1, x, v[n + 1])?;
            let x = tape.slice_cols(x, 0, 1)?;
            tape.sum(x)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn with_parameters_round_trips_and_reports_mismatch() {
    let c = ModelConfig::custom(2, 8, 2, Conditioning::AdaLn);
    let t = Trunk::new(c.clone(), &mut seeded(80)).unwrap();
    let values: BTreeMap<String, Tensor> = t.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    let back = Trunk::with_parameters(c, values.clone()).unwrap();
    for (a, b) in t.params().iter().zip(back.params().iter()) {
        assert_eq!(a.tensor, b.tensor);
    }
    let other = ModelConfig::custom(1, 8, 2, Conditioning::AdaLn);
    match Trunk::with_parameters(other, values) {
        Err(Error::RegistryMismatch { missing, extra, .. }) => {
            assert!(missing.is_empty());
            assert!(extra.iter().any(|n| n.starts_with("blocks.1.")));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn forward_shape_errors() {
    let c = ModelConfig::custom(1, 8, 2, Conditioning::AdaLn);
    let t = Trunk::new(c.clone(), &mut seeded(90)).unwrap();
    let o = obs_batch(&c, 2, 91);
    assert!(matches!(t.predict(&noised(&c, 1, 92), &[1, 2], &o), Err(Error::Dimension(_))));
    assert!(matches!(t.predict(&noised(&c, 2, 92), &[1], &o), Err(Error::Dimension(_))));
    assert!(t.predict(&Tensor::zeros(&[20, 3]), &[1, 2], &o).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_init_output_is_zero_for_any_input(seed in 0u64..1000, k in 1usize..100, batch in 1usize..3) {
        let c = ModelConfig::custom(2, 16, 4, Conditioning::AdaLn);
        let t = Trunk::new(c.clone(), &mut seeded(seed)).unwrap();
        let steps = vec![k; batch];
        let out = t.predict(&noised(&c, batch, seed + 1), &steps, &obs_batch(&c, batch, seed + 2)).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_prediction_matches_per_item(seed in 0u64..1000) {
        let c = ModelConfig::custom(1, 8, 2, Conditioning::CrossAttention);
        let mut t = Trunk::new(c.clone(), &mut seeded(seed)).unwrap();
        scramble(&mut t, 0.3, seed + 1);
        let x = noised(&c, 2, seed + 2);
        let o = obs_batch(&c, 2, seed + 3);
        let both = t.predict(&x, &[2, 9], &o).unwrap();
        for b in 0..2 {
            let xb = Tensor::new(&[10, 2], x.data()[b * 20..(b + 1) * 20].to_vec()).unwrap();
            let ob = ObsBatch::new(
                Tensor::new(&[1, 14], o.obs.row(b).to_vec()).unwrap(),
                Tensor::new(&[1, 4], o.proprio.row(b).to_vec()).unwrap(),
            ).unwrap();
            let one = t.predict(&xb, &[[2, 9][b]], &ob).unwrap();
            for (u, v) in one.data().iter().zip(&both.data()[b * 20..(b + 1) * 20]) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
