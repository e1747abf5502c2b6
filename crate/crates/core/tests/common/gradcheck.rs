//! Analytic gradients against central finite differences. Each check returns
//! the worst relative error over its instances.

use cfsg_core::network::{ArchitectureConfig, Model};
use cfsg_core::tensor::{
    batch_norm_grad, batch_norm_train, conv2d, conv2d_grad, max_pool_2x2, max_pool_2x2_grad,
    max_unpool_2x2, max_unpool_2x2_grad, relu, relu_grad, softmax_channels, BatchNormState, Mode,
    Shape, Tensor,
};
use cfsg_core::training::{weighted_cross_entropy, ClassWeights};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Central differences of `f` at `coords` of `x`.
fn numeric_grad(x: &Tensor, coords: &[usize], h: f32, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h as f64)
        })
        .collect()
}

fn sample_coords(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

fn pick(g: &Tensor, coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&i| g.data()[i] as f64).collect()
}

pub fn conv2d_gradients() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let x = random_tensor(&mut rng, Shape::new(n, cin, h, w), 1.0);
        let k = random_tensor(&mut rng, Shape::new(cout, cin, 3, 3), 0.5);
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
        let r = random_tensor(&mut rng, Shape::new(n, cout, h, w), 1.0);
        let g = conv2d_grad(&x, &k, &r).unwrap();

        let cx = sample_coords(&mut rng, x.len(), 30);
        let num = numeric_grad(&x, &cx, 1e-2, |xp| dot(&conv2d(xp, &k, &b).unwrap(), &r));
        let e = relative_error(&pick(&g.input, &cx), &num);
        worst = worst.max(e);

        let ck = sample_coords(&mut rng, k.len(), 30);
        let num = numeric_grad(&k, &ck, 1e-2, |kp| dot(&conv2d(&x, kp, &b).unwrap(), &r));
        let e = relative_error(&pick(&g.weights, &ck), &num);
        worst = worst.max(e);

        let bt = Tensor::from_vec(Shape::new(1, cout, 1, 1), b.clone()).unwrap();
        let cb: Vec<usize> = (0..cout).collect();
        let num = numeric_grad(&bt, &cb, 1e-2, |bp| dot(&conv2d(&x, &k, bp.data()).unwrap(), &r));
        let an: Vec<f64> = g.bias.iter().map(|&v| v as f64).collect();
        let e = relative_error(&an, &num);
        worst = worst.max(e);
    }
    worst
}

pub fn batch_norm_train_gradients() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, c) = (rng.random_range(2..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
        let x = random_tensor(&mut rng, Shape::new(n, c, h, w), 2.0);
        let mut state = BatchNormState::new(c);
        state.gamma = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        state.beta = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let r = random_tensor(&mut rng, x.shape(), 1.0);
        let (_, cache) = batch_norm_train(&x, &mut state.clone()).unwrap();
        let g = batch_norm_grad(&cache, &state.gamma, &r).unwrap();

        let loss = |xp: &Tensor, st: &BatchNormState| dot(&batch_norm_train(xp, &mut st.clone()).unwrap().0, &r);
        let cx = sample_coords(&mut rng, x.len(), 30);
        let num = numeric_grad(&x, &cx, 1e-2, |xp| loss(xp, &state));
        let e = relative_error(&pick(&g.input, &cx), &num);
        worst = worst.max(e);

        for (which, analytic) in [("gamma", &g.gamma), ("beta", &g.beta)] {
            let num: Vec<f64> = (0..c)
                .map(|i| {
                    let h = 1e-2;
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    let (p, m) = if which == "gamma" {
                        (&mut plus.gamma, &mut minus.gamma)
                    } else {
                        (&mut plus.beta, &mut minus.beta)
                    };
                    p[i] += h;
                    m[i] -= h;
                    (loss(&x, &plus) - loss(&x, &minus)) / (2.0 * h as f64)
                })
                .collect();
            let an: Vec<f64> = analytic.iter().map(|&v| v as f64).collect();
            let e = relative_error(&an, &num);
            worst = worst.max(e);
        }
    }
    worst
}

pub fn relu_gradients() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = Shape::new(2, 3, rng.random_range(2..6), rng.random_range(2..6));
        // keep clear of the kink
        let x = Tensor::from_fn(shape, |_, _, _, _| {
            let v: f32 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let r = random_tensor(&mut rng, shape, 1.0);
        let g = relu_grad(&x, &r).unwrap();
        let cx: Vec<usize> = (0..x.len()).collect();
        let num = numeric_grad(&x, &cx, 1e-3, |xp| dot(&relu(xp), &r));
        let e = relative_error(&pick(&g, &cx), &num);
        worst = worst.max(e);
    }
    worst
}

pub fn pool_unpool_composition_gradients() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let shape = Shape::new(rng.random_range(1..3), rng.random_range(1..4), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
        // distinct values 0.01 apart so a small step never changes a winner
        let mut values: Vec<f32> = (0..shape.len()).map(|i| i as f32 * 0.01).collect();
        values.shuffle(&mut rng);
        let x = Tensor::from_vec(shape, values).unwrap();
        let r = random_tensor(&mut rng, shape, 1.0);
        let f = |xp: &Tensor| {
            let (p, idx) = max_pool_2x2(xp).unwrap();
            dot(&max_unpool_2x2(&p, &idx).unwrap(), &r)
        };
        let (_, idx) = max_pool_2x2(&x).unwrap();
        let g = max_pool_2x2_grad(&max_unpool_2x2_grad(&r, &idx).unwrap(), &idx).unwrap();
        let cx: Vec<usize> = (0..x.len()).collect();
        let num = numeric_grad(&x, &cx, 1e-3, f);
        let e = relative_error(&pick(&g, &cx), &num);
        worst = worst.max(e);
    }
    worst
}

pub fn softmax_weighted_cross_entropy_gradients() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let c = rng.random_range(2..5);
        let shape = Shape::new(rng.random_range(1..3), c, rng.random_range(2..5), rng.random_range(2..5));
        let logits = random_tensor(&mut rng, shape, 2.0);
        let labels: Vec<u8> = (0..shape.n * shape.plane()).map(|_| rng.random_range(0..c as u8)).collect();
        let weights = ClassWeights((0..c).map(|_| rng.random_range(1.0..3.0)).collect());
        let (_, g) = weighted_cross_entropy(&softmax_channels(&logits), &labels, &weights).unwrap();
        let cx: Vec<usize> = (0..logits.len()).collect();
        let num = numeric_grad(&logits, &cx, 1e-2, |lp| {
            weighted_cross_entropy(&softmax_channels(lp), &labels, &weights).unwrap().0 as f64
        });
        let e = relative_error(&pick(&g, &cx), &num);
        worst = worst.max(e);
    }
    worst
}

/// Index unpooling makes the loss jump wherever a pool switch flips, so
/// only perturbations that keep every switch in place are compared.
pub fn tiny_network_end_to_end_gradients() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let model = Model::build(ArchitectureConfig::with_widths([2, 3, 3, 3, 3]), 5).unwrap();
    let x = random_tensor(&mut rng, Shape::new(2, 3, 32, 32), 1.0);
    let labels: Vec<u8> = (0..2 * 32 * 32).map(|_| rng.random_range(0..3)).collect();
    let weights = ClassWeights(vec![1.0, 1.5, 2.5]);
    let run = |m: &Model| {
        let trace = m.clone().forward(&x, Mode::Train, &[]).unwrap();
        let loss = weighted_cross_entropy(&trace.probabilities, &labels, &weights).unwrap().0;
        (loss as f64, trace.pool_indices().unwrap().to_vec())
    };
    let trace = model.clone().forward(&x, Mode::Train, &[]).unwrap();
    let switches = trace.pool_indices().unwrap().to_vec();
    let (_, g_logits) = weighted_cross_entropy(&trace.probabilities, &labels, &weights).unwrap();
    let grads = model.backward(&trace, &g_logits).unwrap();
    let names: Vec<String> = model.trainable_parameters().into_iter().map(|p| p.name).collect();
    if grads.iter().map(|g| &g.name).ne(names.iter()) {
        return Err("gradient blocks do not follow the parameter order".into());
    }

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    // small enough that few ReLU inputs cross zero, large enough for f32
    let h = 3e-4f32;
    let mut skipped = 0;
    for (block, g) in grads.iter().enumerate() {
        // two entries per block, so every layer is exercised
        let mut taken = 0;
        for _ in 0..20 {
            if taken == 2 {
                break;
            }
            let i = rng.random_range(0..g.data.len());
            let mut plus = model.clone();
            plus.trainable_slices_mut()[block][i] += h;
            let mut minus = model.clone();
            minus.trainable_slices_mut()[block][i] -= h;
            let ((lp, sp), (lm, sm)) = (run(&plus), run(&minus));
            if sp != switches || sm != switches {
                skipped += 1;
                continue;
            }
            numeric.push((lp - lm) / (2.0 * h as f64));
            analytic.push(g.data[i] as f64);
            taken += 1;
        }
    }
    if analytic.len() < grads.len() {
        return Err(format!("only {} usable entries ({skipped} skipped)", analytic.len()));
    }
    Ok(relative_error(&analytic, &numeric))
}
