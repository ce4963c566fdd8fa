use rand::Rng;
use rand_distr::StandardNormal;
use seabed_core::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use seabed_core::nn::gradcheck::{check_primitives, max_rel_error};
use seabed_core::nn::ops::l1_loss;
use seabed_core::nn::spec::{search_widths, ModelSpec};
use seabed_core::nn::{AdamConfig, AdamState, Mode, Model, Tensor, TrainingStats};
use seabed_core::grid::{Domain, Fidelity, NormMode, NormalizationStats};
use seabed_core::rng::rng_from;
use seabed_core::{Error, Exec};

fn randn_tensor<T: seabed_core::nn::Real>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut r = rng_from(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(r.sample::<f64, _>(StandardNormal)))
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..8 {
        for c in check_primitives(seed).unwrap() {
            assert!(
                c.max_rel_error < 1e-4,
                "{} wrt {} on {:?}: {:e}",
                c.op,
                c.wrt,
                c.shape,
                c.max_rel_error
            );
        }
    }
}

#[test]
fn whole_model_input_gradient_matches_finite_differences() {
    // eval mode keeps the network piecewise linear in its input
    let mut model = Model::<f64>::build("unet-c2", 3).unwrap();
    model.set_mode(Mode::Eval);
    let x = randn_tensor::<f64>([1, 1, 16, 16], 11);
    let target = randn_tensor::<f64>([1, 1, 16, 16], 12);
    let y = model.forward(&x).unwrap();
    let (_, g) = l1_loss(&y, &target).unwrap();
    let grads = model.backward(&g).unwrap();
    let loss = |v: &[f64]| {
        let xt = Tensor::from_vec([1, 1, 16, 16], v.to_vec()).unwrap();
        l1_loss(&model.infer(&xt).unwrap(), &target).unwrap().0
    };
    let err = max_rel_error(loss, x.data(), grads.input.data());
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn output_layer_parameter_gradient_matches_finite_differences() {
    let mut model = Model::<f64>::build("unet-c2", 5).unwrap();
    let x = randn_tensor::<f64>([2, 1, 16, 16], 21);
    let target = randn_tensor::<f64>([2, 1, 16, 16], 22);
    let y = model.forward(&x).unwrap();
    let (_, g) = l1_loss(&y, &target).unwrap();
    let grads = model.backward(&g).unwrap();
    let out = model.spec().output_layer();
    let (wi, bi) = model.layer_params(out).unwrap();
    for idx in [wi, bi] {
        let base = model.params()[idx].data.clone();
        let probe = model.clone();
        let loss = |v: &[f64]| {
            let mut m = probe.clone();
            m.params_mut()[idx].data.copy_from_slice(v);
            let y = m.forward(&x).unwrap();
            l1_loss(&y, &target).unwrap().0
        };
        let err = max_rel_error(loss, &base, &grads.params[idx]);
        assert!(err < 1e-4, "param {idx}: {err:e}");
    }
}

#[test]
fn output_shape_and_size_contract() {
    let model = Model::<f32>::build("unet-opt", 0).unwrap();
    let x = randn_tensor::<f32>([2, 1, 32, 48], 1);
    assert_eq!(model.infer(&x).unwrap().shape(), [2, 1, 32, 48]);
    let bad = randn_tensor::<f32>([1, 1, 24, 32], 1);
    assert!(matches!(model.infer(&bad), Err(Error::InvalidArgument(_))));
    let d = Model::<f32>::build("unet-d", 0).unwrap();
    assert_eq!(d.infer(&bad).unwrap().shape(), [1, 1, 24, 32]);
}

#[test]
fn zero_network_outputs_zero() {
    let mut model = Model::<f32>::build("unet-c2", 9).unwrap();
    model.zero_all();
    let x = randn_tensor::<f32>([1, 1, 16, 16], 2);
    assert!(model.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(model.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_inference_is_deterministic_across_exec_modes() {
    let mut model = Model::<f32>::build("unet-opt", 4).unwrap();
    let x = randn_tensor::<f32>([3, 1, 32, 32], 3);
    let a = model.infer(&x).unwrap();
    let b = model.infer(&x).unwrap();
    assert_eq!(a, b);
    model.set_exec(Exec::Sequential);
    assert_eq!(model.infer(&x).unwrap(), a);
}

#[test]
fn training_step_is_identical_across_exec_modes() {
    let x = randn_tensor::<f32>([2, 1, 16, 16], 7);
    let t = randn_tensor::<f32>([2, 1, 16, 16], 8);
    let run = |exec| {
        let mut m = Model::<f32>::build("unet-c2", 1).unwrap();
        m.set_exec(exec);
        let y = m.forward(&x).unwrap();
        let (_, g) = l1_loss(&y, &t).unwrap();
        m.backward(&g).unwrap().params
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn backward_requires_forward() {
    let mut model = Model::<f32>::build("unet-c2", 0).unwrap();
    let g = Tensor::<f32>::zeros([1, 1, 16, 16]);
    assert!(matches!(model.backward(&g), Err(Error::State(_))));
    let x = randn_tensor::<f32>([1, 1, 16, 16], 0);
    model.forward(&x).unwrap();
    model.backward(&g).unwrap();
    assert!(matches!(model.backward(&g), Err(Error::State(_))));
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradients() {
    let mut model = Model::<f32>::build("unet-c2", 0).unwrap();
    let x = randn_tensor::<f32>([2, 1, 16, 16], 0);
    model.forward(&x).unwrap();
    let grads = model.backward(&Tensor::zeros([2, 1, 16, 16])).unwrap();
    assert!(grads.params.iter().flatten().all(|&v| v == 0.0));
    assert!(grads.input.data().iter().all(|&v| v == 0.0));
}

#[test]
fn nan_check_reports_the_layer() {
    let mut model = Model::<f32>::build("unet-c2", 0).unwrap();
    model.set_nan_check(true);
    model.params_mut()[0].data[0] = f32::NAN;
    let x = randn_tensor::<f32>([1, 1, 16, 16], 0);
    match model.forward(&x) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("Conv-0"), "{msg}"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn one_small_step_reduces_loss_in_most_trials() {
    let mut improved = 0;
    for seed in 0..100u64 {
        let mut model = Model::<f32>::build("unet-c2", seed).unwrap();
        let x = randn_tensor::<f32>([1, 1, 16, 16], 1000 + seed);
        let t = randn_tensor::<f32>([1, 1, 16, 16], 2000 + seed);
        let y = model.forward(&x).unwrap();
        let (before, g) = l1_loss(&y, &t).unwrap();
        let grads = model.backward(&g).unwrap();
        // plain gradient step: the first-order decrease is lr * |g|^2
        let lr = 1e-3;
        for (p, g) in model.params_mut().iter_mut().zip(&grads.params) {
            for (w, d) in p.data.iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
        let y = model.forward(&x).unwrap();
        let (after, _) = l1_loss(&y, &t).unwrap();
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 95, "{improved}/100");
}

#[test]
fn adam_scalar_recurrence() {
    // independent scalar oracle of the bias-corrected update
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
    let mut expected = Vec::new();
    for t in 1..=5 {
        let g = 1.0;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        expected.push(p);
    }
    assert!((expected[0] + 0.1).abs() < 1e-8);

    let mut model = Model::<f64>::build("unet-c2", 0).unwrap();
    let mut state = AdamState::new(&model, AdamConfig::default()).unwrap();
    let idx = model.params().len() - 1;
    model.params_mut()[idx].data[0] = 0.0;
    let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.data.clone()).collect();
    for want in expected {
        let mut grads = zero_grads(&model);
        grads.params[idx][0] = 1.0;
        state.step(&mut model, &grads).unwrap();
        assert!((model.params()[idx].data[0] - want).abs() < 1e-12);
    }
    // everything with zero gradient is unchanged
    for (i, p) in model.params().iter().enumerate() {
        let skip = if i == idx { 1 } else { 0 };
        assert_eq!(&p.data[skip..], &before[i][skip..]);
    }
}

fn zero_grads(model: &Model<f64>) -> seabed_core::nn::Gradients<f64> {
    seabed_core::nn::Gradients {
        params: model.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        input: Tensor::zeros([1, 1, 1, 1]),
    }
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut model = Model::<f64>::build("unet-c2", 0).unwrap();
    let mut state = AdamState::new(&model, AdamConfig::default()).unwrap();
    let mut grads = zero_grads(&model);
    grads.params.pop();
    assert!(state.step(&mut model, &grads).is_err());
}

#[test]
fn identical_models_and_gradients_step_identically() {
    let x = randn_tensor::<f32>([2, 1, 16, 16], 5);
    let t = randn_tensor::<f32>([2, 1, 16, 16], 6);
    let run = || {
        let mut m = Model::<f32>::build("unet-c2", 8).unwrap();
        let mut s = AdamState::new(&m, AdamConfig::default()).unwrap();
        let y = m.forward(&x).unwrap();
        let (_, g) = l1_loss(&y, &t).unwrap();
        let grads = m.backward(&g).unwrap();
        s.step(&mut m, &grads).unwrap();
        m.flat_params()
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_parameters_and_running_stats_stay_bitwise_fixed() {
    let mut model = Model::<f32>::build("unet-opt", 2).unwrap();
    model.freeze_all_but_output();
    let before = model.flat_params();
    let buffers = model.buffers().to_vec();
    let mut state = AdamState::new(&model, AdamConfig::default()).unwrap();
    let x = randn_tensor::<f32>([2, 1, 32, 32], 1);
    let t = randn_tensor::<f32>([2, 1, 32, 32], 2);
    for _ in 0..3 {
        let y = model.forward(&x).unwrap();
        let (_, g) = l1_loss(&y, &t).unwrap();
        let grads = model.backward(&g).unwrap();
        state.step(&mut model, &grads).unwrap();
    }
    let after = model.flat_params();
    let changed: Vec<usize> = (0..before.len())
        .filter(|&i| before[i].to_bits() != after[i].to_bits())
        .collect();
    // only the 9 trailing output-layer values may move; a channel that is
    // dead on this batch has a zero gradient and stays put
    let first_free = before.len() - 9;
    assert!(!changed.is_empty() && changed.iter().all(|&i| i >= first_free), "{changed:?}");
    assert_eq!(model.buffers(), &buffers[..]);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut model = Model::<f32>::build("unet-c2", 6).unwrap();
    let mut state = AdamState::new(&model, AdamConfig::default()).unwrap();
    let x = randn_tensor::<f32>([2, 1, 16, 16], 1);
    let t = randn_tensor::<f32>([2, 1, 16, 16], 2);
    let y = model.forward(&x).unwrap();
    let (_, g) = l1_loss(&y, &t).unwrap();
    let grads = model.backward(&g).unwrap();
    state.step(&mut model, &grads).unwrap();
    let stats = TrainingStats {
        intensity: NormalizationStats::new(0.0, 3.5, Domain::Intensity, Fidelity::A).unwrap(),
        relief: NormalizationStats::new(-0.4, 0.5, Domain::Relief, Fidelity::A).unwrap(),
        mode: NormMode::Range,
    };
    let bytes = encode_checkpoint(&model, Some(&state), Some(&stats)).unwrap();
    let ck = decode_checkpoint(&bytes, "mem".as_ref(), Some("unet-c2")).unwrap();
    assert_eq!(ck.model.flat_params(), model.flat_params());
    assert_eq!(ck.model.buffers(), model.buffers());
    assert_eq!(ck.adam.as_ref(), Some(&state));
    assert_eq!(ck.stats, Some(stats));
    assert_eq!(ck.model.infer(&x).unwrap(), model.infer(&x).unwrap());
    assert_eq!(encode_checkpoint(&ck.model, ck.adam.as_ref(), ck.stats.as_ref()).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    seabed_core::nn::save_checkpoint(&path, &model, None, None).unwrap();
    let ck = seabed_core::nn::load_checkpoint(&path, None).unwrap();
    assert!(ck.adam.is_none());
    assert_eq!(ck.model.infer(&x).unwrap(), model.infer(&x).unwrap());
}

#[test]
fn checkpoint_guards() {
    let model = Model::<f32>::build("unet-c2", 6).unwrap();
    let bytes = encode_checkpoint(&model, None, None).unwrap();
    let origin: &std::path::Path = "mem".as_ref();
    assert!(matches!(
        decode_checkpoint(&bytes, origin, Some("unet-opt")),
        Err(Error::Format { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad, origin, None).is_err());
    let mut bad = bytes.clone();
    bad[20] ^= 0xFF;
    assert!(decode_checkpoint(&bad, origin, None).is_err());
    let mut bad = bytes.clone();
    bad[8] = 2;
    assert!(decode_checkpoint(&bad, origin, None).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1], origin, None).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long, origin, None).is_err());
}

#[test]
fn width_search_reports_no_match_for_impossible_totals() {
    assert!(search_widths(49_065, 2..=5, 64).is_empty());
    let spec = ModelSpec::by_name("unet-d").unwrap();
    assert_eq!(spec.pool_count(), 3);
    assert_eq!(spec.layers[spec.output_layer()].name, "Conv-8");
}
