//! Central finite-difference gradient checking, used by the test suites.
//!
//! The numeric side only ever evaluates forward passes at perturbed inputs,
//! so it stays independent of the backward implementation it is checking.

use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar loss from leaves placed on the given tape.
pub type LossBuilder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Forward-only evaluation of the loss at the given input values.
fn eval(inputs: &[Tensor<f64>], build: &LossBuilder) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).item()
}

/// Analytic gradients of the loss w.r.t. every input, via the tape.
pub fn analytic_grads(inputs: &[Tensor<f64>], build: &LossBuilder) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward");
    vars.iter()
        .zip(inputs.iter())
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Max relative error between analytic and central-difference gradients over
/// the listed coordinates, or over every coordinate when `coords` is `None`.
pub fn max_rel_err(
    inputs: &[Tensor<f64>],
    build: &LossBuilder,
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> f64 {
    let analytic = analytic_grads(inputs, build);
    let all_coords: Vec<(usize, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
    };
    let mut worst = 0.0f64;
    for (i, j) in all_coords {
        let mut plus = inputs.to_vec();
        {
            let d = plus[i].data_mut();
            d[j] += h;
        }
        let mut minus = inputs.to_vec();
        {
            let d = minus[i].data_mut();
            d[j] -= h;
        }
        let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
        let a = analytic[i][j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Deterministic pseudo-random values in [-1, 1] for test inputs.
pub fn pseudo_uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x243f6a8885a308d3);
    (0..n)
        .map(|_| {
            // splitmix64 step
            state = state.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, pseudo_uniform(seed, n)).expect("shape")
}
