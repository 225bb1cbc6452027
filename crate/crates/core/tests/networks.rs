//! MLP forward against a plain-loop oracle, backward against finite
//! differences (batch-norm included), and Adam against its recurrence.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdr_core::gradcheck::{central_difference5, GradCheckReport};
use stdr_core::nets::{adam_step, Activation, AdamConfig, AdamState, LayerSpec, Mlp, MlpSpec, Mode};

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Layer-by-layer loops over the flat parameter layout: column-major
/// `outputs × inputs` weights followed by the bias.
fn oracle(params: &[f64], widths: &[usize], acts: &[fn(f64) -> f64], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut at = 0;
    for l in 1..widths.len() {
        let (ni, no) = (widths[l - 1], widths[l]);
        let w = &params[at..at + ni * no];
        let b = &params[at + ni * no..at + ni * no + no];
        at += ni * no + no;
        cur = (0..no)
            .map(|o| acts[l - 1]((0..ni).map(|i| w[i * no + o] * cur[i]).sum::<f64>() + b[o]))
            .collect();
    }
    assert_eq!(at, params.len());
    cur
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = MlpSpec {
        input_width: 5,
        layers: vec![
            LayerSpec {
                width: 7,
                activation: Activation::Relu,
            },
            LayerSpec {
                width: 6,
                activation: Activation::Tanh,
            },
            LayerSpec {
                width: 3,
                activation: Activation::Sigmoid,
            },
        ],
        batch_norm: false,
        dropout: 0.0,
        zero_init_output: false,
    };
    let net = Mlp::new(spec, &mut rng).unwrap();
    let acts: [fn(f64) -> f64; 3] = [relu, f64::tanh, |v| 1.0 / (1.0 + (-v).exp())];
    let input = DMatrix::from_fn(5, 9, |_, _| rng.random_range(-2.0..2.0));
    for mode in [Mode::Train, Mode::Eval] {
        let (out, _) = net.forward(&input, mode, None).unwrap();
        for b in 0..9 {
            let col: Vec<f64> = input.column(b).iter().copied().collect();
            let expect = oracle(net.params(), &[5, 7, 6, 3], &acts, &col);
            for o in 0..3 {
                assert!((out[(o, b)] - expect[o]).abs() <= 1e-12);
            }
        }
    }
}

fn check_backward(spec: MlpSpec, batch: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(spec.clone(), &mut rng).unwrap();
    for p in net.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    let input = DMatrix::from_fn(spec.input_width, batch, |_, _| rng.random_range(-1.5..1.5));
    let upstream = DMatrix::from_fn(spec.output_width(), batch, |_, _| rng.random_range(-1.0..1.0));
    let loss = |net: &Mlp, x: &DMatrix<f64>| -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
        let (y, _) = net.forward(x, Mode::Train, Some(&mut r)).unwrap();
        y.component_mul(&upstream).sum()
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
    let (_, ctx) = net.forward(&input, Mode::Train, Some(&mut r)).unwrap();
    let (dp, dx) = net.backward(&ctx, &upstream).unwrap();

    let mut report = GradCheckReport::default();
    let base = net.params().to_vec();
    for j in 0..base.len() {
        let mut probe = net.clone();
        let num = central_difference5(
            |v| {
                probe.params_mut()[j] = v;
                loss(&probe, &input)
            },
            base[j],
            1e-5,
        );
        report.record(format!("param {j}"), dp[j], num, 1e-5, 1e-6);
    }
    for j in 0..input.len() {
        let num = central_difference5(
            |v| {
                let mut x = input.clone();
                x[j] = v;
                loss(&net, &x)
            },
            input[j],
            1e-5,
        );
        report.record(format!("input {j}"), dx[j], num, 1e-5, 1e-6);
    }
    report
}

#[test]
fn backward_matches_differences() {
    let spec = MlpSpec::uniform(4, 6, 3, 2, Activation::Tanh, Activation::Identity);
    let r = check_backward(spec, 5, 11);
    assert!(r.passed(), "{:#?}", r.failures);
}

#[test]
fn batch_norm_and_dropout_backward_over_a_batch_of_eight() {
    let mut spec = MlpSpec::uniform(3, 5, 3, 2, Activation::Tanh, Activation::Sigmoid);
    spec.batch_norm = true;
    spec.dropout = 0.2;
    let r = check_backward(spec, 8, 12);
    assert!(r.passed(), "{:#?}", r.failures);
    assert!(r.checked > 60);
}

#[test]
fn batch_statistics_are_committed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut spec = MlpSpec::uniform(3, 4, 2, 4, Activation::Identity, Activation::Identity);
    spec.batch_norm = true;
    let net = Mlp::new(spec, &mut rng).unwrap();
    let input = DMatrix::from_fn(3, 8, |_, _| rng.random_range(-3.0..3.0));
    // Committed running averages expose the batch statistics of the affine map.
    let (_, ctx) = net.forward(&input, Mode::Train, None).unwrap();
    let mut committed = net.clone();
    committed.commit_batch_stats(&ctx);
    let stats = committed.running_stats();
    let w = DMatrix::from_column_slice(4, 3, &net.params()[..12]);
    let z = &w * &input;
    for f in 0..4 {
        let m = z.row(f).sum() / 8.0;
        let v = z.row(f).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
        assert!((stats[f] - 0.1 * m).abs() < 1e-12);
        // Running variance is tracked with the unbiased estimate.
        assert!((stats[4 + f] - (0.9 + 0.1 * v * 8.0 / 7.0)).abs() < 1e-12);
    }
}

#[test]
fn adam_matches_recurrence_over_steps() {
    let cfg = AdamConfig {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-15,
    };
    let mut state = AdamState::new(2, cfg);
    let mut p = vec![1.0, -2.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    let mut expect = p.clone();
    for t in 1..=5 {
        let g = [0.3 * t as f64, -0.1];
        adam_step(&mut p, &g, &mut state).unwrap();
        for j in 0..2 {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            expect[j] -= 0.01 * mh / (vh.sqrt() + 1e-15);
        }
    }
    for j in 0..2 {
        assert!((p[j] - expect[j]).abs() < 1e-14);
    }
    assert_eq!(state.step, 5);
}
