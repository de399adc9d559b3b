use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use super::power::Eigenpair;
use super::whiten::Whitening;
use super::{Diagnostics, PlugInEstimate};
use crate::error::Result;
use crate::linalg::{clip_to_simplex, singular_values, truncated_pinv};
use crate::moments::MomentSet;

/// Back-projects eigenpairs to `(M₁, M₂, M₃, π)` sharing one column order.
pub fn recover_parameters(
    pairs: &[Eigenpair],
    whitening: &Whitening,
    moments: &MomentSet,
    rank_tol: f64,
) -> Result<PlugInEstimate> {
    let k = pairs.len();
    let vecs = DMatrix::from_fn(k, k, |r, c| pairs[c].vector[r]);
    let lambda: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    let (wt_pinv, _) = truncated_pinv(&whitening.w.transpose(), k, rank_tol, "whitening map")?;
    let mut m3 = wt_pinv * vecs;
    for (j, &l) in lambda.iter().enumerate() {
        m3.column_mut(j).scale_mut(l);
    }
    let pi_tilde: Vec<f64> = lambda.iter().map(|l| 1.0 / (l * l)).collect();

    let mut b = m3.transpose();
    for (j, &p) in pi_tilde.iter().enumerate() {
        b.row_mut(j).scale_mut(p);
    }
    let (b_pinv, _) = truncated_pinv(&b, k, rank_tol, "third-view conditional matrix")?;
    let m1 = moments.pair(0, 2) * &b_pinv;
    let m2 = moments.pair(1, 2) * &b_pinv;

    let (m1_pinv, _) = truncated_pinv(&m1, k, rank_tol, "first-view conditional matrix")?;
    let raw_pi: DVector<f64> = m1_pinv * &moments.first[0];
    let pi = clip_to_simplex(raw_pi.as_slice())?;

    let mut est = PlugInEstimate {
        m: [m1, m2, m3],
        pi,
        diagnostics: Diagnostics::default(),
    };
    est.diagnostics = Diagnostics {
        eigenvalues: lambda,
        pi_tilde,
        sigma_k: whitening.sigma_k,
        ..est.summary(moments)
    };
    Ok(est)
}

/// `(min_v σ_k(M_v), κ_v)`.
pub(crate) fn conditioning(m: &[DMatrix<f64>; 3]) -> (f64, [f64; 3]) {
    let mut lambda = f64::INFINITY;
    let mut kappa = [0.0; 3];
    for (v, mat) in m.iter().enumerate() {
        let s = singular_values(mat);
        let k = mat.ncols().min(mat.nrows());
        let sk = s.get(k.saturating_sub(1)).copied().unwrap_or(0.0);
        lambda = lambda.min(sk);
        kappa[v] = if sk > 0.0 { s[0] / sk } else { f64::INFINITY };
    }
    (lambda, kappa)
}
