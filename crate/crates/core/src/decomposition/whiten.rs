use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{top_eigen, truncated_pinv, Tensor3};
use crate::moments::{MomentSet, TripleMoment};

/// Output of [`symmetrize_and_whiten`].
#[derive(Debug, Clone)]
pub struct Whitening {
    /// `D₃ × k`, with `Wᵀ Pairs₃ W = I_k`.
    pub w: DMatrix<f64>,
    /// `C₁ = pair[3,2]·pair[1,2]⁺`, `D₃ × D₁`.
    pub c1: DMatrix<f64>,
    /// `C₂ = pair[3,1]·pair[2,1]⁺`, `D₃ × D₂`.
    pub c2: DMatrix<f64>,
    /// `Pairs₃`, the symmetrized second moment of `(C₁h₁, C₂h₂)`.
    pub pairs3: DMatrix<f64>,
    /// Symmetrized whitened third moment, `k × k × k`.
    pub tensor: Tensor3,
    /// `σ_k(pair[1,2])`.
    pub sigma_k: f64,
}

/// Moves views 1 and 2 onto view 3, whitens, and forms the `k × k × k`
/// tensor from `triple` (or the dense third moment when present).
pub fn symmetrize_and_whiten(
    moments: &MomentSet,
    triple: Option<&dyn TripleMoment>,
    k: usize,
    rank_tol: f64,
) -> Result<Whitening> {
    let p12 = moments.pair(0, 1);
    let (p12_pinv, sigma_k) = truncated_pinv(&p12, k, rank_tol, "cross-view moment pair[1,2]")?;
    let c1 = moments.pair(2, 1) * &p12_pinv;
    // pair[2,1]⁺ = (pair[1,2]⁺)ᵀ
    let c2 = moments.pair(2, 0) * p12_pinv.transpose();
    let raw = &c1 * &p12 * c2.transpose();
    let pairs3 = (&raw + raw.transpose()) * 0.5;

    let (vals, vecs) = top_eigen(&pairs3, k);
    let top = vals.first().copied().unwrap_or(0.0);
    let low = vals.last().copied().unwrap_or(0.0);
    if !(top > 0.0) || !(low > rank_tol * top) {
        return Err(Error::IllConditioned {
            what: "symmetrized second moment",
            sigma: low,
        });
    }
    let mut w = vecs;
    for (j, &l) in vals.iter().enumerate() {
        w.column_mut(j).scale_mut(1.0 / l.sqrt());
    }

    let wt = w.transpose();
    let proj = [&wt * &c1, &wt * &c2, wt.clone()];
    let raw_t = match (&moments.triple, triple) {
        (Some(dense), _) => dense.project([&proj[0], &proj[1], &proj[2]])?,
        (None, Some(src)) => src.project([&proj[0], &proj[1], &proj[2]])?,
        (None, None) => {
            return Err(Error::InvalidInput(
                "third moment is not stored densely and no second pass was supplied".into(),
            ))
        }
    };
    Ok(Whitening {
        w,
        c1,
        c2,
        pairs3,
        tensor: raw_t.symmetrized(),
        sigma_k,
    })
}
