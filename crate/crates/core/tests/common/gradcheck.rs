//! Central finite-difference oracle for the autodiff tape.

use labaug::tensor::{Kernel, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, taking the worst
/// input. `build` must return a scalar loss computed from `vars` only.
pub fn relative_error<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss, &vars).expect("backward");

    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).unwrap().item().unwrap()
    };

    let mut worst = 0.0f64;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().data().to_vec();
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|k| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[k] += STEP;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[k] -= STEP;
                (eval(&plus) - eval(&minus)) / (2.0 * STEP)
            })
            .collect();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        // Sum of uniforms keeps the draw dependency-free and roughly Gaussian.
        (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0
    })
}

/// Entries bounded away from zero so kinks (relu, sign) stay out of the
/// finite-difference stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.2..3.0))
}

/// Contracts a non-scalar output with a fixed random tensor.
pub fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Var {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r).unwrap();
    tape.sum(p).unwrap()
}

fn simplex_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, d], data).unwrap()
}

/// One randomized case of a named operation; returns the relative error.
pub fn case(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    match op {
        "relu" | "exp" | "neg" | "scale" | "sign" | "power_int" | "log" | "power_frac" => {
            let n = r.random_range(1..12);
            let x = match op {
                "log" | "power_frac" => positive_tensor(&mut r, &[n]),
                _ => away_from_zero(&mut r, &[n]),
            };
            let kernel = match op {
                "relu" => Kernel::Relu,
                "exp" => Kernel::Exp,
                "neg" => Kernel::Neg,
                "scale" => Kernel::Scale(r.random_range(-3.0..3.0)),
                "sign" => Kernel::Sign,
                "power_int" => Kernel::Power(r.random_range(0..5) as f64),
                "log" => Kernel::Log,
                _ => Kernel::Power(r.random_range(0.3..2.7)),
            };
            let proj = normal_tensor(&mut r, &[n]);
            relative_error(&[x], |t, v| {
                let y = t.map(v[0], kernel).unwrap();
                project(t, y, &proj)
            })
        }
        "add" | "mul" => {
            let shape = [r.random_range(1..5), r.random_range(1..5)];
            let a = normal_tensor(&mut r, &shape);
            let b = normal_tensor(&mut r, &shape);
            let proj = normal_tensor(&mut r, &shape);
            let mul = op == "mul";
            relative_error(&[a, b], |t, v| {
                let y = if mul { t.mul(v[0], v[1]) } else { t.add(v[0], v[1]) }.unwrap();
                project(t, y, &proj)
            })
        }
        "matmul" => {
            let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
            let a = normal_tensor(&mut r, &[m, k]);
            let b = normal_tensor(&mut r, &[k, n]);
            relative_error(&[a, b], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                t.sum(y).unwrap()
            })
        }
        "add_bias" => {
            let c = r.random_range(1..4);
            let shape: Vec<usize> = if r.random::<bool>() {
                vec![r.random_range(1..4), c]
            } else {
                vec![r.random_range(1..3), c, r.random_range(1..4), r.random_range(1..4)]
            };
            let x = normal_tensor(&mut r, &shape);
            let b = normal_tensor(&mut r, &[c]);
            let proj = normal_tensor(&mut r, &shape);
            relative_error(&[x, b], |t, v| {
                let y = t.add_bias(v[0], v[1]).unwrap();
                project(t, y, &proj)
            })
        }
        "conv2d" => {
            let stride = r.random_range(1..3);
            let pad = r.random_range(0..2);
            let k = if stride == 2 { 3 } else { r.random_range(1..4) };
            // 5 + 2 pad - 3 is even for stride 2.
            let x = normal_tensor(&mut r, &[1, 2, 5, 5]);
            let f = r.random_range(1..4);
            let w = normal_tensor(&mut r, &[f, 2, k, k]);
            let out = (5 + 2 * pad - k) / stride + 1;
            let proj = normal_tensor(&mut r, &[1, f, out, out]);
            relative_error(&[x, w], |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad).unwrap();
                project(t, y, &proj)
            })
        }
        "max_pool2d" => {
            let size = r.random_range(1..3);
            let side = size * r.random_range(1..4);
            let x = normal_tensor(&mut r, &[2, 2, side, side]);
            let proj = normal_tensor(&mut r, &[2, 2, side / size, side / size]);
            relative_error(&[x], |t, v| {
                let y = t.max_pool2d(v[0], size).unwrap();
                project(t, y, &proj)
            })
        }
        "reshape" => {
            let x = normal_tensor(&mut r, &[2, 3, 2, 2]);
            let proj = normal_tensor(&mut r, &[2, 12]);
            relative_error(&[x], |t, v| {
                let y = t.flatten(v[0]).unwrap();
                project(t, y, &proj)
            })
        }
        "slice_cols" => {
            let d = r.random_range(2..7);
            let start = r.random_range(0..d);
            let end = r.random_range(start + 1..=d);
            let x = normal_tensor(&mut r, &[3, d]);
            let proj = normal_tensor(&mut r, &[3, end - start]);
            relative_error(&[x], |t, v| {
                let y = t.slice_cols(v[0], start, end).unwrap();
                project(t, y, &proj)
            })
        }
        "sum" => {
            let n = r.random_range(1..9);
            let x = normal_tensor(&mut r, &[n]);
            relative_error(&[x], |t, v| t.sum(v[0]).unwrap())
        }
        "softmax_cross_entropy" => {
            let logits = normal_tensor(&mut r, &[4, 7]).map(|v| v * 3.0);
            let targets = simplex_rows(&mut r, 4, 7);
            relative_error(&[logits], |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap())
        }
        "weighted_cross_entropy" => {
            let logits = normal_tensor(&mut r, &[4, 5]);
            let targets = simplex_rows(&mut r, 4, 5);
            let weights: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();
            relative_error(&[logits], |t, v| {
                t.softmax_cross_entropy_weighted(v[0], &targets, &weights).unwrap()
            })
        }
        "composite" => {
            // conv -> bias -> relu -> pool -> flatten -> matmul -> bias -> CE
            let x = normal_tensor(&mut r, &[2, 2, 4, 4]);
            let w1 = normal_tensor(&mut r, &[3, 2, 3, 3]);
            let b1 = normal_tensor(&mut r, &[3]);
            let w2 = normal_tensor(&mut r, &[12, 4]);
            let b2 = normal_tensor(&mut r, &[4]);
            let targets = simplex_rows(&mut r, 2, 4);
            relative_error(&[x, w1, b1, w2, b2], |t, v| {
                let h = t.conv2d(v[0], v[1], 1, 1).unwrap();
                let h = t.add_bias(h, v[2]).unwrap();
                let h = t.relu(h).unwrap();
                let h = t.max_pool2d(h, 2).unwrap();
                let h = t.flatten(h).unwrap();
                let z = t.matmul(h, v[3]).unwrap();
                let z = t.add_bias(z, v[4]).unwrap();
                t.softmax_cross_entropy(z, &targets).unwrap()
            })
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "relu",
    "exp",
    "log",
    "neg",
    "scale",
    "power_int",
    "power_frac",
    "sign",
    "add",
    "mul",
    "matmul",
    "add_bias",
    "conv2d",
    "max_pool2d",
    "reshape",
    "slice_cols",
    "sum",
    "softmax_cross_entropy",
    "weighted_cross_entropy",
    "composite",
];

/// Worst relative error of `op` over `cases` randomized draws.
pub fn worst_over(op: &str, cases: u64) -> f64 {
    (0..cases)
        .map(|seed| case(op, seed * 7919 + op.len() as u64))
        .fold(0.0, f64::max)
}
