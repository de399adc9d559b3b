use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor3;

/// Symmetry tolerance, relative to `max(1, ‖T‖_F)`.
const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Robust tensor power iteration with deflation.
///
/// Each of the `n` eigenpairs keeps the best of `restarts` random starts
/// (largest `T(u,u,u)`), polishes it for another `iterations` steps and
/// removes `λ u⊗u⊗u` from the tensor. Signs are chosen so that `T(u,u,u) > 0`.
pub fn tensor_power_method(
    t: &Tensor3,
    n: usize,
    restarts: usize,
    iterations: usize,
    seed: u64,
) -> Result<(Vec<Eigenpair>, Tensor3)> {
    if !t.is_cubic() {
        return Err(Error::InvalidInput("power method needs a cubic tensor".into()));
    }
    let norm0 = t.frobenius_norm();
    let asym = t.asymmetry();
    if !(asym <= SYMMETRY_TOL * norm0.max(1.0)) {
        return Err(Error::NotSymmetric { deviation: asym });
    }
    let dim = t.dims()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = t.clone();
    let mut pairs = Vec::with_capacity(n);
    for index in 0..n {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..restarts.max(1) {
            let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&mut u);
            iterate(&residual, &mut u, iterations);
            let (val, u) = signed(&residual, u);
            if best.as_ref().is_none_or(|(b, _)| val > *b) {
                best = Some((val, u));
            }
        }
        let (_, mut u) = best.expect("at least one restart");
        iterate(&residual, &mut u, iterations);
        let (value, u) = signed(&residual, u);
        if !(value > 1e-12 * norm0) || !value.is_finite() {
            return Err(Error::NoPositiveEigenvalue { index, value });
        }
        residual.add_outer(-value, &u, &u, &u);
        pairs.push(Eigenpair { value, vector: u });
    }
    Ok((pairs, residual))
}

fn normalize(u: &mut [f64]) -> f64 {
    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        u.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn iterate(t: &Tensor3, u: &mut Vec<f64>, iterations: usize) {
    for _ in 0..iterations {
        let mut next = t.contract_pair(u);
        let n = normalize(&mut next);
        if !(n > 0.0) || !n.is_finite() {
            return;
        }
        *u = next;
    }
}

fn signed(t: &Tensor3, mut u: Vec<f64>) -> (f64, Vec<f64>) {
    let val = t.trilinear(&u, &u, &u);
    if val < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        (-val, u)
    } else {
        (val, u)
    }
}
