//! Class-permutation resolution by maximum-weight assignment.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `k` for which the second-best assignment is found by enumeration.
pub const GAP_MAX_K: usize = 10;

/// `σ` as an array: loss row `j` is paired with latent column `sigma[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Permutation {
    pub sigma: Vec<usize>,
    pub value: f64,
}

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Permutation {
            sigma: (0..k).collect(),
            value: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.sigma.iter().enumerate().all(|(j, &s)| j == s)
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.sigma.len()];
        for (j, &s) in self.sigma.iter().enumerate() {
            inv[s] = j;
        }
        inv
    }
}

/// `Σ_j x[σ(j), j]`, summed in `j` order.
pub fn assignment_value(x: &DMatrix<f64>, sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(j, &i)| x[(i, j)]).sum()
}

/// `X_{i,j} = π_i Σ_v (M_v)_{j,i}` over the first `k` rows of each `M_v`.
pub fn score_matrix(mats: &[DMatrix<f64>], pi: &[f64]) -> Result<DMatrix<f64>> {
    let k = pi.len();
    for m in mats {
        if m.ncols() != k || m.nrows() < k {
            return Err(Error::Dimension {
                what: "conditional matrix for matching",
                expected: k,
                got: m.ncols().min(m.nrows()),
            });
        }
    }
    let x = DMatrix::from_fn(k, k, |i, j| pi[i] * mats.iter().map(|m| m[(j, i)]).sum::<f64>());
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "matching scores",
            index: 0,
        });
    }
    Ok(x)
}

/// `σ` maximizing `Σ_j X_{σ(j),j}`, ties broken toward the lexicographically smallest `σ`.
pub fn best_permutation(mats: &[DMatrix<f64>], pi: &[f64]) -> Result<Permutation> {
    best_assignment(&score_matrix(mats, pi)?)
}

/// Best minus second-best matching objective, by enumeration.
pub fn permutation_gap(mats: &[DMatrix<f64>], pi: &[f64]) -> Result<f64> {
    assignment_gap(&score_matrix(mats, pi)?)
}

/// Maximum-weight assignment by the Hungarian algorithm on `max(X) − X`.
pub fn best_assignment(x: &DMatrix<f64>) -> Result<Permutation> {
    let k = x.nrows();
    if x.ncols() != k {
        return Err(Error::Dimension {
            what: "assignment matrix",
            expected: k,
            got: x.ncols(),
        });
    }
    if k == 0 {
        return Ok(Permutation {
            sigma: Vec::new(),
            value: 0.0,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "assignment matrix",
            index: 0,
        });
    }
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // cost[j][i]: pairing loss row j with latent column i
    let cost = |j: usize, i: usize| top - x[(i, j)];
    let (u, v) = hungarian_potentials(k, &cost);

    let scale = x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let tol = 1e-11 * (1.0 + scale);
    let tight = |j: usize, i: usize| (cost(j, i) - u[j] - v[i]).abs() <= tol;
    let sigma = lex_smallest_matching(k, &tight).expect("dual optimum has a tight perfect matching");
    Ok(Permutation {
        value: assignment_value(x, &sigma),
        sigma,
    })
}

/// Dual potentials of the min-cost assignment (rows `j`, columns `i`).
fn hungarian_potentials(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        p[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Greedy lexicographically smallest perfect matching inside an edge set.
fn lex_smallest_matching(k: usize, edge: &dyn Fn(usize, usize) -> bool) -> Option<Vec<usize>> {
    let mut sigma = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for j in 0..k {
        let mut chosen = None;
        for i in 0..k {
            if used[i] || !edge(j, i) {
                continue;
            }
            used[i] = true;
            if completes(k, j + 1, &used, edge) {
                chosen = Some(i);
                break;
            }
            used[i] = false;
        }
        sigma[j] = chosen?;
    }
    Some(sigma)
}

/// Whether rows `from..k` can be matched into the unused columns.
fn completes(k: usize, from: usize, used: &[bool], edge: &dyn Fn(usize, usize) -> bool) -> bool {
    let mut owner: Vec<Option<usize>> = vec![None; k];
    for j in from..k {
        let mut seen = vec![false; k];
        if !augment(j, k, used, edge, &mut owner, &mut seen) {
            return false;
        }
    }
    true
}

fn augment(
    j: usize,
    k: usize,
    used: &[bool],
    edge: &dyn Fn(usize, usize) -> bool,
    owner: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for i in 0..k {
        if used[i] || seen[i] || !edge(j, i) {
            continue;
        }
        seen[i] = true;
        let free = match owner[i] {
            None => true,
            Some(other) => augment(other, k, used, edge, owner, seen),
        };
        if free {
            owner[i] = Some(j);
            return true;
        }
    }
    false
}

/// Calls `f` on every permutation of `0..k` in lexicographic order.
pub fn for_each_permutation(k: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..k).collect();
    loop {
        f(&p);
        // next lexicographic permutation
        let Some(a) = (0..k.saturating_sub(1)).rev().find(|&a| p[a] < p[a + 1]) else {
            return;
        };
        let b = (a + 1..k).rev().find(|&b| p[b] > p[a]).expect("successor exists");
        p.swap(a, b);
        p[a + 1..].reverse();
    }
}

/// Exhaustive maximum; the first maximizer in lexicographic order wins ties.
pub fn brute_force_assignment(x: &DMatrix<f64>) -> Permutation {
    let mut best = Permutation {
        sigma: Vec::new(),
        value: f64::NEG_INFINITY,
    };
    for_each_permutation(x.nrows(), |p| {
        let val = assignment_value(x, p);
        if val > best.value {
            best = Permutation {
                sigma: p.to_vec(),
                value: val,
            };
        }
    });
    best
}

/// Best minus second-best objective over distinct permutations.
pub fn assignment_gap(x: &DMatrix<f64>) -> Result<f64> {
    let k = x.nrows();
    if k > GAP_MAX_K {
        return Err(Error::Unsupported(alloc::format!(
            "exact permutation gap needs k <= {GAP_MAX_K}, got {k}"
        )));
    }
    if k < 2 {
        return Ok(0.0);
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for_each_permutation(k, |p| {
        let val = assignment_value(x, p);
        if val > first {
            second = first;
            first = val;
        } else if val > second {
            second = val;
        }
    });
    Ok((first - second).max(0.0))
}

/// Column order of `candidate` best matching `reference`: `perm[a]` is the
/// candidate column paired with reference column `a`, minimizing the summed
/// squared column distance over all views.
pub fn align_columns(reference: &[DMatrix<f64>], candidate: &[DMatrix<f64>]) -> Result<Vec<usize>> {
    let k = reference.first().map_or(0, |m| m.ncols());
    if reference.len() != candidate.len()
        || reference
            .iter()
            .zip(candidate)
            .any(|(a, b)| a.shape() != b.shape() || a.ncols() != k)
    {
        return Err(Error::InvalidInput("aligned estimates differ in shape".into()));
    }
    // x[(b, a)] = −distance(reference column a, candidate column b)
    let x = DMatrix::from_fn(k, k, |b, a| {
        -reference
            .iter()
            .zip(candidate)
            .map(|(r, c)| (r.column(a) - c.column(b)).norm_squared())
            .sum::<f64>()
    });
    Ok(best_assignment(&x)?.sigma)
}

/// Reorders the columns of `m` so column `a` becomes old column `perm[a]`.
pub fn permute_columns(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), perm.len(), |r, a| m[(r, perm[a])])
}
