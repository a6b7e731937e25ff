//! Random networks and property checks shared by the integration tests.
#![allow(
    dead_code,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop
)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rewc::continual::{run_sequence, Method, SequenceRun, TrainConfig};
use rewc::data::{
    read_idx_images, read_idx_labels, synthetic_tasks, write_idx_images, write_idx_labels,
    IdxImages,
};
use rewc::fim::{estimate_diag_fim, ewc_penalty, EwcAnchor, FimDiagonal, FimMode};
use rewc::linalg::Matrix;
use rewc::nn::{Activations, Conv2d, Dense, Layer, Network, Shape, Tensor4};
use rewc::rotation::{
    accumulate_correlations, combine_network, rotate_network, GradientLabels, RotationScope,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize, shape: Shape) -> Activations {
    Activations::new(n, shape, normal_vec(rng, n * shape.len())).unwrap()
}

fn dense(rng: &mut ChaCha8Rng, input: usize, output: usize, bias: bool) -> Layer {
    let scale = 1.0 / (input as f64).sqrt();
    let w: Vec<f64> = normal_vec(rng, input * output)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let b = bias.then(|| {
        normal_vec(rng, output)
            .into_iter()
            .map(|v| 0.1 * v)
            .collect()
    });
    Layer::Dense(Dense::new(Matrix::from_vec(output, input, w).unwrap(), b).unwrap())
}

/// Dense ReLU stack with 1 to 3 hidden layers of random widths.
pub fn random_mlp(rng: &mut ChaCha8Rng) -> Network {
    let input = rng.random_range(2..7);
    let hidden = rng.random_range(1..4);
    let mut layers = Vec::new();
    let mut prev = input;
    for _ in 0..hidden {
        let w = rng.random_range(2..7);
        let bias = rng.random_bool(0.8);
        layers.push(dense(rng, prev, w, bias));
        layers.push(Layer::Relu);
        prev = w;
    }
    let classes = rng.random_range(2..5);
    let bias = rng.random_bool(0.8);
    layers.push(dense(rng, prev, classes, bias));
    Network::new(layers, Shape::Flat(input), rng.random()).unwrap()
}

/// Convolutions (random kernel size, stride and padding, optional pooling)
/// followed by a dense head.
pub fn random_conv_mix(rng: &mut ChaCha8Rng) -> Network {
    let c = rng.random_range(1..4);
    let side = rng.random_range(5..9);
    let input = Shape::Image {
        h: side,
        w: side,
        c,
    };
    let mut layers = Vec::new();
    let mut shape = input;
    let convs = rng.random_range(1..3);
    for _ in 0..convs {
        let cin = shape.channels();
        let cout = rng.random_range(1..5);
        let k = rng.random_range(1..4);
        let padding = rng.random_range(0..2);
        let stride = if rng.random_bool(0.25) { 2 } else { 1 };
        let Shape::Image { h, w, .. } = shape else {
            unreachable!()
        };
        if h + 2 * padding < k || w + 2 * padding < k {
            continue;
        }
        let n = k * k * cin * cout;
        let scale = 1.0 / ((k * k * cin) as f64).sqrt();
        let kernel = Tensor4::from_vec(
            [k, k, cin, cout],
            normal_vec(rng, n).into_iter().map(|v| v * scale).collect(),
        )
        .unwrap();
        let bias = rng
            .random_bool(0.8)
            .then(|| normal_vec(rng, cout).into_iter().map(|v| 0.1 * v).collect());
        let conv = Layer::Conv2d(Conv2d::new(kernel, bias, stride, padding).unwrap());
        shape = conv.output_shape(shape).unwrap();
        layers.push(conv);
        layers.push(Layer::Relu);
        let Shape::Image { h, w, .. } = shape else {
            unreachable!()
        };
        if h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 && rng.random_bool(0.5) {
            layers.push(Layer::MeanPool2);
            shape = Layer::MeanPool2.output_shape(shape).unwrap();
        }
    }
    layers.push(Layer::Flatten);
    let flat = shape.len();
    let hidden = rng.random_range(2..6);
    layers.push(dense(rng, flat, hidden, true));
    layers.push(Layer::Relu);
    let (classes, bias) = (rng.random_range(2..5), rng.random_bool(0.8));
    layers.push(dense(rng, hidden, classes, bias));
    Network::new(layers, input, rng.random()).unwrap()
}

/// Even `i` gives an MLP, odd `i` a conv mix.
pub fn random_net(rng: &mut ChaCha8Rng, i: usize) -> Network {
    if i.is_multiple_of(2) {
        random_mlp(rng)
    } else {
        random_conv_mix(rng)
    }
}

/// Rotates every weight layer with statistics from random inputs.
pub fn rotated(net: &Network, rng: &mut ChaCha8Rng) -> Network {
    let data = random_inputs(rng, 24, net.input_shape());
    let stats =
        accumulate_correlations(net, &data, 24, GradientLabels::Model, rng.random()).unwrap();
    rotate_network(net, &stats, RotationScope::All).unwrap().0
}

pub fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between an
/// analytic gradient and central differences of `f` with step `h`.
pub fn fd_relative_error(
    net: &Network,
    analytic: &[Vec<f64>],
    h: f64,
    f: impl Fn(&Network) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for (t, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let orig = probe.params_mut()[t][j];
            probe.params_mut()[t][j] = orig + h;
            let up = f(&probe);
            probe.params_mut()[t][j] = orig - h;
            let down = f(&probe);
            probe.params_mut()[t][j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(grad).max(norm(&numeric));
        if scale > 1e-12 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

pub fn xent(net: &Network, x: &Activations, y: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let cache = net.forward(x).unwrap();
    let (loss, grads) = net.backward(&cache, y).unwrap();
    (loss, grads.tensors)
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// A non-negative random diagonal over the layout of `net`.
pub fn random_fim(net: &Network, rng: &mut ChaCha8Rng) -> FimDiagonal {
    let values = net
        .params()
        .iter()
        .map(|p| (0..p.len()).map(|_| rng.random_range(0.0..2.0)).collect())
        .collect();
    FimDiagonal::new(net.layout(), values).unwrap()
}

/// Shifts every parameter by independent normal noise of size `scale`.
pub fn jitter(net: &Network, rng: &mut ChaCha8Rng, scale: f64) -> Network {
    let mut out = net.clone();
    for p in out.params_mut() {
        for v in p.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += scale * z;
        }
    }
    out
}

// Invariant checks, each returning a description of the first violation.

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 32,
        lr: 0.01,
        seed,
    }
}

/// The penalty of a fresh anchor is exactly zero, with a zero gradient.
pub fn check_anchor_penalty_zero(seed: u64, lambda: f64) -> Check {
    let mut r = rng(seed);
    let net = random_net(&mut r, seed as usize);
    let fim = random_fim(&net, &mut r);
    let anchor = EwcAnchor::new(&net, fim, lambda).map_err(|e| e.to_string())?;
    let (penalty, grad) = ewc_penalty(&net, &anchor).map_err(|e| e.to_string())?;
    ensure!(penalty == 0.0, "penalty {penalty}");
    ensure!(
        grad.flat().iter().all(|g| *g == 0.0),
        "non-zero penalty gradient"
    );
    Ok(())
}

/// Through a sequence the learner holds one anchor over the current
/// parameters (in the rotated basis for the rotated method).
pub fn check_single_anchor(seed: u64, rotated_method: bool) -> Check {
    let tasks = synthetic_tasks(seed, 3, 2, 6, 8.0).map_err(|e| e.to_string())?;
    let spec = "mlp-6-8-2".parse::<rewc::nn::ArchSpec>().unwrap();
    let net = rewc::nn::build_network(&spec, seed).map_err(|e| e.to_string())?;
    let method = if rotated_method {
        Method::rewc(10.0, RotationScope::AllNoLast)
    } else {
        Method::ewc(10.0)
    };
    let cfg = quick_config(seed);
    let mut run = SequenceRun::start(net, &tasks).map_err(|e| e.to_string())?;
    run.step(&tasks, &method, &cfg).map_err(|e| e.to_string())?;
    ensure!(
        run.learner().anchor().is_none(),
        "anchor before any task ended"
    );
    for k in 1..tasks.len() {
        let before = run.learner().plain_network().map_err(|e| e.to_string())?;
        run.step(&tasks, &method, &cfg).map_err(|e| e.to_string())?;
        let learner = run.learner();
        let anchor = learner.anchor().ok_or("missing anchor")?;
        learner
            .net()
            .layout()
            .check_covers(anchor.layout())
            .map_err(|e| e.to_string())?;
        ensure!(
            learner.pairs().is_empty() != rotated_method,
            "rotation pairs {} for rotated={rotated_method}",
            learner.pairs().len()
        );
        // The anchor was taken on the previous task's parameters.
        let mut anchored = learner.net().clone();
        for (p, star) in anchored.params_mut().into_iter().zip(anchor.theta_star()) {
            p[..star.len()].copy_from_slice(star);
        }
        let plain = combine_network(&anchored, learner.pairs()).map_err(|e| e.to_string())?;
        let x = &tasks.tasks()[k - 1].test.inputs;
        let old = before.logits(x).map_err(|e| e.to_string())?;
        let new = plain.logits(x).map_err(|e| e.to_string())?;
        let width = old.shape().len();
        let gap = old
            .data()
            .chunks(width)
            .zip(new.data().chunks(new.shape().len()))
            .map(|(a, b)| max_abs_gap(a, &b[..width]))
            .fold(0.0, f64::max);
        ensure!(
            gap < 1e-8,
            "anchor does not reproduce the previous network: {gap}"
        );
    }
    Ok(())
}

/// EWC with λ = 0 reproduces fine-tuning bit for bit.
pub fn check_zero_lambda_is_ft(seed: u64) -> Check {
    let tasks = synthetic_tasks(seed, 2, 2, 5, 6.0).map_err(|e| e.to_string())?;
    let spec = "mlp-5-6-2".parse::<rewc::nn::ArchSpec>().unwrap();
    let cfg = quick_config(seed);
    let run = |m: &Method| {
        let net = rewc::nn::build_network(&spec, seed).unwrap();
        run_sequence(net, &tasks, m, &cfg).unwrap()
    };
    let ft = run(&Method::ft());
    let ewc = run(&Method::ewc(0.0));
    ensure!(
        ft.eval == ewc.eval,
        "evaluation differs: {:?} vs {:?}",
        ft.eval,
        ewc.eval
    );
    ensure!(
        ft.net.flat_params() == ewc.net.flat_params(),
        "parameters differ"
    );
    Ok(())
}

/// Growing the head leaves the existing logits bit-identical.
pub fn check_head_growth(seed: u64, extra: usize) -> Check {
    let mut r = rng(seed);
    let net = random_net(&mut r, seed as usize);
    let x = random_inputs(&mut r, 7, net.input_shape());
    let before = net.logits(&x).map_err(|e| e.to_string())?;
    let mut grown = net.clone();
    grown.grow_head(extra).map_err(|e| e.to_string())?;
    let after = grown.logits(&x).map_err(|e| e.to_string())?;
    let (a, b) = (before.shape().len(), after.shape().len());
    ensure!(b == a + extra, "head width {b}, expected {}", a + extra);
    for i in 0..x.n() {
        ensure!(
            before.sample(i) == &after.sample(i)[..a],
            "sample {i} logits changed"
        );
    }
    Ok(())
}

/// Every Fisher diagonal entry is finite and non-negative.
pub fn check_fim_non_negative(seed: u64, expected: bool) -> Check {
    let mut r = rng(seed);
    let mut net = random_net(&mut r, seed as usize);
    if seed.is_multiple_of(3) {
        net = rotated(&net, &mut r);
    }
    let x = random_inputs(&mut r, 12, net.input_shape());
    let mode = if expected {
        FimMode::Expected
    } else {
        FimMode::Sampled
    };
    let fim = estimate_diag_fim(&net, &x, 12, mode, seed).map_err(|e| e.to_string())?;
    ensure!(
        fim.flat().iter().all(|v| v.is_finite() && *v >= 0.0),
        "negative or non-finite entry"
    );
    Ok(())
}

/// Writing and re-reading IDX files preserves every byte.
pub fn check_idx_round_trip(count: usize, rows: usize, cols: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let images = IdxImages {
        count,
        rows,
        cols,
        pixels: (0..count * rows * cols).map(|_| r.random()).collect(),
    };
    let labels: Vec<u8> = (0..count).map(|_| r.random_range(0..10)).collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    write_idx_images(&ip, &images).map_err(|e| e.to_string())?;
    write_idx_labels(&lp, &labels).map_err(|e| e.to_string())?;
    ensure!(
        read_idx_images(&ip).map_err(|e| e.to_string())? == images,
        "images differ"
    );
    ensure!(
        read_idx_labels(&lp).map_err(|e| e.to_string())? == labels,
        "labels differ"
    );
    Ok(())
}
