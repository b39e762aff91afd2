//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajknock::model::{Batch, RowMajor};
use trajknock::{Network, NetworkConfig, Task};

/// Knockoff+ threshold by scanning every candidate with plain counting.
pub fn brute_single(w: &[f64], q: f64) -> (f64, Vec<usize>) {
    let mut best = f64::INFINITY;
    for &c in w {
        if c == 0.0 {
            continue;
        }
        let t = c.abs();
        let neg = w.iter().filter(|&&v| v <= -t).count();
        let pos = w.iter().filter(|&&v| v >= t).count();
        if pos > 0 && (1.0 + neg as f64) / pos as f64 <= q && t < best {
            best = t;
        }
    }
    let sel = (0..w.len()).filter(|&j| w[j] >= best).collect();
    (best, sel)
}

/// Multiple-knockoff threshold by scanning every positive τ.
pub fn brute_multi(kappa: &[usize], tau: &[f64], m: usize, q: f64) -> (f64, Vec<usize>) {
    let mut best = f64::INFINITY;
    for &t in tau {
        if t <= 0.0 {
            continue;
        }
        let mut knock = 0usize;
        let mut orig = 0usize;
        for j in 0..tau.len() {
            if tau[j] >= t {
                if kappa[j] == 0 {
                    orig += 1;
                } else {
                    knock += 1;
                }
            }
        }
        let ratio = (1.0 / m as f64 + knock as f64 / m as f64) / (orig.max(1) as f64);
        if ratio <= q && t < best {
            best = t;
        }
    }
    let sel = (0..tau.len()).filter(|&j| kappa[j] == 0 && tau[j] >= best).collect();
    (best, sel)
}

/// Leverage from a modified Gram–Schmidt basis of the column space, plus
/// the number of basis vectors kept.
pub fn gram_schmidt_leverage(z: &DMatrix<f64>) -> (Vec<f64>, usize) {
    let (n, d) = z.shape();
    let scale = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        let mut v: Vec<f64> = (0..n).map(|i| z[(i, j)] / scale).collect();
        let orig_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 * orig_norm.max(1e-300) && norm > 1e-12 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let h = (0..n).map(|i| basis.iter().map(|b| b[i] * b[i]).sum()).collect();
    (h, basis.len())
}

/// A random `rows × cols` matrix of exact rank `rank`.
pub fn random_rank_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(rows, rank, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(rank, cols, |_, _| rng.random_range(-1.0..1.0));
    a * b
}

pub struct GradCase {
    pub net: Network,
    pub x: RowMajor,
    pub cov: Option<RowMajor>,
    pub y: Vec<f64>,
}

/// Small random network cycling through depth 1–3, M ∈ {1, 5}, with and
/// without covariates, and both tasks.
pub fn random_grad_case(rng: &mut ChaCha8Rng, index: usize) -> GradCase {
    let depth = 1 + index % 3;
    let copies = if (index / 3).is_multiple_of(2) { 1 } else { 5 };
    let covariate_dim = if (index / 6).is_multiple_of(2) { 0 } else { 2 };
    let task = if (index / 12).is_multiple_of(2) { Task::Regression } else { Task::Binary };
    let p = rng.random_range(2..5);
    let rows = 3;
    let cfg = NetworkConfig {
        p,
        copies,
        depth,
        hidden: rng.random_range(2..5),
        lambda: rng.random_range(0.0..0.05),
        dropout_prob: 0.5,
        covariate_dim,
        task,
        seed: rng.random(),
    };
    let d = cfg.input_dim();
    let mut net = Network::new(cfg).unwrap();
    // Wider weights than the initializer so every layer matters.
    for v in net.params_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let x = RowMajor::new((0..rows * d).map(|_| rng.random_range(-1.5..1.5)).collect(), rows, d);
    let cov = (covariate_dim > 0).then(|| {
        RowMajor::new(
            (0..rows * covariate_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rows,
            covariate_dim,
        )
    });
    let y = (0..rows)
        .map(|_| match task {
            Task::Regression => rng.random_range(-2.0..2.0),
            Task::Binary => f64::from(u8::from(rng.random::<bool>())),
        })
        .collect();
    GradCase { net, x, cov, y }
}

pub const FD_STEP: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference
/// parameter gradients of the penalized loss, with a fixed dropout mask.
pub fn max_param_grad_error(case: &mut GradCase) -> f64 {
    let h = FD_STEP;
    let mask = case.net.sample_dropout_mask(case.x.nrows);
    let batch = Batch::new(&case.x, case.cov.as_ref());
    let (_, grads) = case.net.loss_and_gradient(&batch, &case.y, Some(&mask)).unwrap();
    let mut worst = 0.0f64;
    for (k, &g) in grads.iter().enumerate() {
        let w0 = case.net.params()[k];
        if w0.abs() < 10.0 * h {
            continue; // L1 kink
        }
        case.net.params_mut()[k] = w0 + h;
        let (up, _) = case.net.loss_and_gradient(&batch, &case.y, Some(&mask)).unwrap();
        case.net.params_mut()[k] = w0 - h;
        let (down, _) = case.net.loss_and_gradient(&batch, &case.y, Some(&mask)).unwrap();
        case.net.params_mut()[k] = w0;
        worst = worst.max(rel_err(g, (up - down) / (2.0 * h)));
    }
    worst
}

/// Largest relative error of the input gradients of the output.
pub fn max_input_grad_error(case: &GradCase) -> f64 {
    let h = FD_STEP;
    let (rows, d) = (case.x.nrows, case.x.ncols);
    let grads = case.net.input_gradients(&Batch::new(&case.x, case.cov.as_ref())).unwrap();
    let mut x = case.x.clone();
    let mut worst = 0.0f64;
    for b in 0..rows {
        for k in 0..d {
            let v0 = x.data[b * d + k];
            x.data[b * d + k] = v0 + h;
            let up = case.net.predict(&Batch::new(&x, case.cov.as_ref())).unwrap()[b];
            x.data[b * d + k] = v0 - h;
            let down = case.net.predict(&Batch::new(&x, case.cov.as_ref())).unwrap()[b];
            x.data[b * d + k] = v0;
            worst = worst.max(rel_err(grads[b * d + k], (up - down) / (2.0 * h)));
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
