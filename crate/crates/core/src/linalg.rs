//! Small dense linear-algebra helpers shared by the estimation modules.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Numerically stable `log Σ exp(values)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `values` written into `out`.
pub fn softmax_into(values: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(values);
    for (o, &v) in out.iter_mut().zip(values) {
        *o = (v - lse).exp();
    }
}

/// Dense three-way array stored row-major, index `(a, b, c) -> (a * n1 + b) * n2 + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Tensor3 {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::Dimension {
                what: "tensor data",
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor3 { dims, data })
    }

    /// `Σ_j weights[j] · a_j ⊗ b_j ⊗ c_j` with factors stored as matrix columns.
    pub fn from_factors(
        weights: &[f64],
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> Self {
        let mut t = Tensor3::zeros([a.nrows(), b.nrows(), c.nrows()]);
        for (j, &w) in weights.iter().enumerate() {
            t.add_outer(w, a.column(j).as_slice(), b.column(j).as_slice(), c.column(j).as_slice());
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn index(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.index(a, b, c)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, value: f64) {
        let i = self.index(a, b, c);
        self.data[i] = value;
    }

    /// `self += w · a ⊗ b ⊗ c`.
    pub fn add_outer(&mut self, w: f64, a: &[f64], b: &[f64], c: &[f64]) {
        let [_, n1, n2] = self.dims;
        for (i, &ai) in a.iter().enumerate() {
            let wa = w * ai;
            if wa == 0.0 {
                continue;
            }
            for (j, &bj) in b.iter().enumerate() {
                let wab = wa * bj;
                let row = &mut self.data[(i * n1 + j) * n2..(i * n1 + j + 1) * n2];
                for (r, &cl) in row.iter_mut().zip(c) {
                    *r += wab * cl;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.dims, other.dims);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += *y;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    /// Largest absolute difference between entries related by a mode permutation.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_cubic() {
            return f64::INFINITY;
        }
        let n = self.dims[0];
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let x = self.get(a, b, c);
                    for y in [self.get(a, c, b), self.get(b, a, c), self.get(c, b, a)] {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        worst
    }

    /// Average over all six mode permutations. Requires a cubic tensor.
    pub fn symmetrized(&self) -> Tensor3 {
        assert!(self.is_cubic(), "symmetrization needs equal mode sizes");
        let n = self.dims[0];
        let mut out = Tensor3::zeros(self.dims);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let s = self.get(a, b, c)
                        + self.get(a, c, b)
                        + self.get(b, a, c)
                        + self.get(b, c, a)
                        + self.get(c, a, b)
                        + self.get(c, b, a);
                    out.set(a, b, c, s / 6.0);
                }
            }
        }
        out
    }

    /// `T(I, u, u)`.
    pub fn contract_pair(&self, u: &[f64]) -> Vec<f64> {
        let [n0, n1, n2] = self.dims;
        let mut out = vec![0.0; n0];
        for (a, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (b, &ub) in u.iter().enumerate().take(n1) {
                let row = &self.data[(a * n1 + b) * n2..(a * n1 + b + 1) * n2];
                let inner: f64 = row.iter().zip(u).map(|(t, uc)| t * uc).sum();
                s += ub * inner;
            }
            *o = s;
        }
        out
    }

    /// `T(a, b, c)`.
    pub fn trilinear(&self, a: &[f64], b: &[f64], c: &[f64]) -> f64 {
        let [_, n1, n2] = self.dims;
        let mut s = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                let row = &self.data[(i * n1 + j) * n2..(i * n1 + j + 1) * n2];
                let inner: f64 = row.iter().zip(c).map(|(t, cl)| t * cl).sum();
                s += ai * bj * inner;
            }
        }
        s
    }

    /// Multilinear transform `T(p1ᵀ, p2ᵀ, p3ᵀ)` where each `p` is `out_dim × dim`.
    pub fn transform(&self, p: [&DMatrix<f64>; 3]) -> Tensor3 {
        let [n0, n1, n2] = self.dims;
        let [o0, o1, o2] = [p[0].nrows(), p[1].nrows(), p[2].nrows()];
        // mode 3
        let mut t3 = vec![0.0; n0 * n1 * o2];
        for ab in 0..n0 * n1 {
            let row = &self.data[ab * n2..(ab + 1) * n2];
            for r in 0..o2 {
                let mut s = 0.0;
                for (c, &x) in row.iter().enumerate() {
                    s += p[2][(r, c)] * x;
                }
                t3[ab * o2 + r] = s;
            }
        }
        // mode 2
        let mut t2 = vec![0.0; n0 * o1 * o2];
        for a in 0..n0 {
            for q in 0..o1 {
                for b in 0..n1 {
                    let w = p[1][(q, b)];
                    if w == 0.0 {
                        continue;
                    }
                    for r in 0..o2 {
                        t2[(a * o1 + q) * o2 + r] += w * t3[(a * n1 + b) * o2 + r];
                    }
                }
            }
        }
        // mode 1
        let mut out = Tensor3::zeros([o0, o1, o2]);
        for s in 0..o0 {
            for a in 0..n0 {
                let w = p[0][(s, a)];
                if w == 0.0 {
                    continue;
                }
                let src = &t2[a * o1 * o2..(a + 1) * o1 * o2];
                let dst = &mut out.data[s * o1 * o2..(s + 1) * o1 * o2];
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += w * x;
                }
            }
        }
        out
    }
}

/// SVD with singular triplets sorted in descending order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn sorted_svd(a: &DMatrix<f64>) -> SortedSvd {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)]);
    SortedSvd {
        u,
        singular_values: order.iter().map(|&i| s[i]).collect(),
        v,
    }
}

/// Rank-`rank` pseudo-inverse of `a`, together with the retained `σ_rank`.
///
/// Fails when `σ_rank < rel_tol · σ_1` (or `σ_1 = 0`).
pub fn truncated_pinv(
    a: &DMatrix<f64>,
    rank: usize,
    rel_tol: f64,
    what: &'static str,
) -> Result<(DMatrix<f64>, f64)> {
    if rank == 0 || rank > a.nrows().min(a.ncols()) {
        return Err(Error::Dimension {
            what,
            expected: rank,
            got: a.nrows().min(a.ncols()),
        });
    }
    let svd = sorted_svd(a);
    let s1 = svd.singular_values[0];
    let sk = svd.singular_values[rank - 1];
    if !(s1 > 0.0) || !(sk > rel_tol * s1) || !sk.is_finite() {
        return Err(Error::IllConditioned { what, sigma: sk });
    }
    let mut pinv = DMatrix::zeros(a.ncols(), a.nrows());
    for i in 0..rank {
        let vi = svd.v.column(i);
        let ui = svd.u.column(i);
        pinv += (vi * ui.transpose()) / svd.singular_values[i];
    }
    Ok((pinv, sk))
}

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Top-`k` eigenpairs of a symmetric matrix, eigenvalues descending.
pub fn top_eigen(a: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    order.truncate(k);
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Clips negative entries to zero and renormalizes.
///
/// Fails when the clipped mass is below 0.5, which signals a broken estimate
/// rather than finite-sample noise.
pub fn clip_to_simplex(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "class prior",
            index: 0,
        });
    }
    let clipped: Vec<f64> = p.iter().map(|&x| x.max(0.0)).collect();
    let mass: f64 = clipped.iter().sum();
    if mass < 0.5 {
        return Err(Error::DegeneratePrior { mass });
    }
    Ok(clipped.into_iter().map(|x| x / mass).collect())
}

pub fn dvector(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
