use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use super::PlugInEstimate;
use crate::error::{Error, Result};
use crate::linalg::{softmax_into, sorted_svd, Tensor3};
use crate::models::VIEWS;
use crate::moments::{MomentSet, TripleMoment, PAIRS};

const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;

/// Default weights `(1/k, 1/k², 1/k³)`.
pub fn default_weights(k: usize) -> [f64; 3] {
    let k = k as f64;
    [1.0 / k, 1.0 / (k * k), 1.0 / (k * k * k)]
}

/// Moment targets of the weighted least-squares fit.
///
/// The third-moment term is compared in `k`-dimensional coordinates `Q_v h_v`,
/// where `Q_v` is the identity when `D_v = k` and otherwise spans the top-`k`
/// left singular space of the view's cross moments.
#[derive(Debug, Clone)]
pub struct RefineTarget {
    first: [DVector<f64>; VIEWS],
    pairs: [DMatrix<f64>; 3],
    q: [DMatrix<f64>; VIEWS],
    triple: Option<Tensor3>,
    weights: [f64; 3],
}

impl RefineTarget {
    pub fn new(
        moments: &MomentSet,
        triple: Option<&dyn TripleMoment>,
        k: usize,
        weights: [f64; 3],
    ) -> Result<Self> {
        let q: [DMatrix<f64>; VIEWS] = core::array::from_fn(|v| {
            if moments.dims[v] == k {
                DMatrix::identity(k, k)
            } else {
                let svd = sorted_svd(&moments.pair(v, (v + 1) % VIEWS));
                svd.u.columns(0, k).transpose()
            }
        });
        let triple = if weights[2] == 0.0 {
            None
        } else {
            let proj = [&q[0], &q[1], &q[2]];
            Some(match (&moments.triple, triple) {
                (Some(dense), _) => dense.project(proj)?,
                (None, Some(src)) => src.project(proj)?,
                (None, None) => {
                    return Err(Error::InvalidInput(
                        "refinement with a third-moment weight needs a third-moment source".into(),
                    ))
                }
            })
        };
        Ok(RefineTarget {
            first: moments.first.clone(),
            pairs: moments.pairs.clone(),
            q,
            triple,
            weights,
        })
    }

    pub fn weights(&self) -> [f64; 3] {
        self.weights
    }

    /// `J(M, π)`.
    pub fn objective(&self, m: &[DMatrix<f64>; VIEWS], pi: &[f64]) -> f64 {
        self.eval(m, pi, false).0
    }

    fn eval(&self, m: &[DMatrix<f64>; VIEWS], pi: &[f64], grad: bool) -> (f64, [DMatrix<f64>; VIEWS], Vec<f64>) {
        let k = pi.len();
        let [w1, w2, w3] = self.weights;
        let pv = DVector::from_column_slice(pi);
        let mut gm: [DMatrix<f64>; VIEWS] = core::array::from_fn(|v| DMatrix::zeros(m[v].nrows(), k));
        let mut gpi = vec![0.0; k];
        let mut j = 0.0;

        if w1 != 0.0 {
            for v in 0..VIEWS {
                let r = &self.first[v] - &m[v] * &pv;
                j += w1 * r.norm_squared();
                if grad {
                    gm[v] -= (&r * pv.transpose()) * (2.0 * w1);
                    let t = m[v].transpose() * &r;
                    for (g, x) in gpi.iter_mut().zip(t.iter()) {
                        *g -= 2.0 * w1 * x;
                    }
                }
            }
        }

        if w2 != 0.0 {
            for (p, &(v, w)) in PAIRS.iter().enumerate() {
                let mut mvd = m[v].clone();
                for c in 0..k {
                    mvd.column_mut(c).scale_mut(pi[c]);
                }
                let r = &self.pairs[p] - &mvd * m[w].transpose();
                j += w2 * r.norm_squared();
                if grad {
                    let mut mwd = m[w].clone();
                    for c in 0..k {
                        mwd.column_mut(c).scale_mut(pi[c]);
                    }
                    gm[v] -= (&r * &mwd) * (2.0 * w2);
                    gm[w] -= (r.transpose() * &mvd) * (2.0 * w2);
                    let rm = &r * &m[w];
                    for c in 0..k {
                        gpi[c] -= 2.0 * w2 * m[v].column(c).dot(&rm.column(c));
                    }
                }
            }
        }

        if let (true, Some(target)) = (w3 != 0.0, &self.triple) {
            let a: [DMatrix<f64>; VIEWS] = core::array::from_fn(|v| &self.q[v] * &m[v]);
            let mut r = target.clone();
            let model = Tensor3::from_factors(pi, &a[0], &a[1], &a[2]);
            r.add_assign(&{
                let mut neg = model;
                neg.scale(-1.0);
                neg
            });
            j += w3 * r.as_slice().iter().map(|x| x * x).sum::<f64>();
            if grad {
                let mut ga: [DMatrix<f64>; VIEWS] = core::array::from_fn(|_| DMatrix::zeros(k, k));
                for c in 0..k {
                    let (a1, a2, a3) = (a[0].column(c), a[1].column(c), a[2].column(c));
                    let (a1, a2, a3) = (a1.as_slice(), a2.as_slice(), a3.as_slice());
                    let g1 = mode_contract(&r, 0, a2, a3);
                    let g2 = mode_contract(&r, 1, a1, a3);
                    let g3 = mode_contract(&r, 2, a1, a2);
                    for i in 0..k {
                        ga[0][(i, c)] = -2.0 * w3 * pi[c] * g1[i];
                        ga[1][(i, c)] = -2.0 * w3 * pi[c] * g2[i];
                        ga[2][(i, c)] = -2.0 * w3 * pi[c] * g3[i];
                    }
                    gpi[c] -= 2.0 * w3 * r.trilinear(a1, a2, a3);
                }
                for v in 0..VIEWS {
                    gm[v] += self.q[v].transpose() * &ga[v];
                }
            }
        }
        (j, gm, gpi)
    }
}

/// Contracts every mode except `free` with the two given vectors, in mode order.
fn mode_contract(t: &Tensor3, free: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
    let [n0, n1, n2] = t.dims();
    let mut out = vec![0.0; t.dims()[free]];
    for a in 0..n0 {
        for b in 0..n1 {
            for c in 0..n2 {
                let v = t.get(a, b, c);
                match free {
                    0 => out[a] += v * x[b] * y[c],
                    1 => out[b] += v * x[a] * y[c],
                    _ => out[c] += v * x[a] * y[b],
                }
            }
        }
    }
    out
}

/// Result of [`refine`].
#[derive(Debug, Clone)]
pub struct Refined {
    pub estimate: PlugInEstimate,
    pub objective: f64,
    pub iterations: usize,
    /// False when the iteration cap stopped the search.
    pub converged: bool,
}

struct Layout {
    rows: [usize; VIEWS],
    k: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.rows.iter().map(|r| r * self.k).sum::<usize>() + self.k
    }

    fn pack(&self, m: &[DMatrix<f64>; VIEWS], z: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for mat in m {
            x.extend_from_slice(mat.as_slice());
        }
        x.extend_from_slice(z);
        x
    }

    fn unpack(&self, x: &[f64]) -> ([DMatrix<f64>; VIEWS], Vec<f64>) {
        let mut off = 0;
        let m = core::array::from_fn(|v| {
            let n = self.rows[v] * self.k;
            let mat = DMatrix::from_column_slice(self.rows[v], self.k, &x[off..off + n]);
            off += n;
            mat
        });
        let mut pi = vec![0.0; self.k];
        softmax_into(&x[off..], &mut pi);
        (m, pi)
    }
}

/// Locally minimizes the weighted moment misfit over `M_v` and softmax logits
/// of `π` by limited-memory quasi-Newton steps with a backtracking Armijo
/// search, so every accepted step lowers `J`.
pub fn refine(est: &PlugInEstimate, target: &RefineTarget, max_iter: usize) -> Result<Refined> {
    let k = est.pi.len();
    let lay = Layout {
        rows: core::array::from_fn(|v| est.m[v].nrows()),
        k,
    };
    let z: Vec<f64> = est.pi.iter().map(|&p| p.max(1e-12).ln()).collect();
    let mut x = lay.pack(&est.m, &z);

    let value_grad = |x: &[f64]| -> (f64, Vec<f64>) {
        let (m, pi) = lay.unpack(x);
        let (j, gm, gpi) = target.eval(&m, &pi, true);
        let dot: f64 = pi.iter().zip(&gpi).map(|(p, g)| p * g).sum();
        let gz: Vec<f64> = pi.iter().zip(&gpi).map(|(p, g)| p * (g - dot)).collect();
        (j, lay.pack(&gm, &gz))
    };

    let (mut f, mut g) = value_grad(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite {
            context: "refinement objective",
            index: 0,
        });
    }
    let scale = 1.0 + target.first.iter().map(|v| v.amax()).fold(0.0, f64::max).powi(2);
    let gtol = 1e-15 * scale;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        if g.iter().fold(0.0f64, |a, b| a.max(b.abs())) <= gtol || f == 0.0 {
            converged = true;
            break;
        }
        let mut d = two_loop(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|x| -x).collect();
            slope = dot(&g, &d);
        }
        let mut step = if history.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        while step > 1e-20 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (ft, gt) = value_grad(&trial);
            if ft.is_finite() && ft <= f + ARMIJO * step * slope && ft < f {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, fnew, gn)) = accepted else {
            if history.is_empty() {
                // no descent left at working precision
                converged = true;
                break;
            }
            history.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        f = fnew;
        g = gn;
    }

    let (m, pi) = lay.unpack(&x);
    let mut estimate = PlugInEstimate {
        m,
        pi,
        diagnostics: est.diagnostics.clone(),
    };
    estimate.diagnostics.residual = f;
    Ok(Refined {
        estimate,
        objective: f,
        iterations,
        converged,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|x| *x *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|x| *x = -*x);
    q
}
