//! Recovery of `(M₁, M₂, M₃, π)` from loss-vector moments.

mod amplify;
mod power;
mod recover;
mod refine;
mod whiten;

pub use amplify::{amplify, amplify_estimates, amplify_scalars, default_radius, estimate_distance};
pub use power::{tensor_power_method, Eigenpair};
pub use recover::recover_parameters;
pub use refine::{default_weights, refine, RefineTarget, Refined};
pub use whiten::{symmetrize_and_whiten, Whitening};

use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::matching::permute_columns;
use crate::models::{ViewLossModel, VIEWS};
use crate::moments::{
    accumulate_moments, gauge_offsets, LossSource, ModelLosses, MomentSet, SampleTriple, Shifted, Subset, TripleMoment,
};
use crate::sample::ViewData;

/// Largest supported class count.
pub const MAX_K: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub refine: bool,
    pub refine_max_iter: usize,
    /// Independent sample splits; more than one enables amplification.
    pub splits: usize,
    pub seed: u64,
    pub rank_tol: f64,
    /// Amplification radius `ε`; half the median pairwise distance when unset.
    pub amplify_radius: Option<f64>,
    /// Refinement weights; `(1/k, 1/k², 1/k³)` when unset.
    pub weights: Option<[f64; 3]>,
    /// Largest view dimension kept as a dense third moment.
    pub dense_cap: usize,
}

impl Default for DecompConfig {
    fn default() -> Self {
        DecompConfig {
            restarts: 25,
            iterations: 100,
            refine: true,
            refine_max_iter: 500,
            splits: 1,
            seed: 0,
            rank_tol: 1e-10,
            amplify_radius: None,
            weights: None,
            dense_cap: crate::moments::DENSE_TRIPLE_CAP,
        }
    }
}

impl DecompConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.iterations == 0 {
            return Err(Error::InvalidInput("restarts and iterations must be positive".into()));
        }
        if self.splits == 0 || self.splits == 2 {
            return Err(Error::InvalidInput(
                "splits must be 1 or at least 3 (amplification needs three estimates)".into(),
            ));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidInput("rank_tol must lie in (0, 1)".into()));
        }
        if let Some(w) = self.weights {
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidInput("refinement weights must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `min_v σ_k(M_v)`.
    pub lambda: f64,
    pub pi_min: f64,
    /// `σ₁(M_v) / σ_k(M_v)`.
    pub kappa: [f64; 3],
    /// Root mean squared loss-vector norm.
    pub tau: f64,
    /// `σ_k(pair[1,2])`.
    pub sigma_k: f64,
    /// Tensor eigenvalues `≈ π_j^{-1/2}`.
    pub eigenvalues: Vec<f64>,
    /// `λ_j⁻²`.
    pub pi_tilde: Vec<f64>,
    /// Weighted moment misfit `J` of the returned estimate.
    pub residual: f64,
    pub refined: bool,
    pub refine_iterations: usize,
    pub refine_converged: bool,
    /// Residual before refinement.
    pub tensor_only_residual: f64,
    pub splits: usize,
    pub chosen_split: usize,
    /// Gauge shift added to each view's loss block before decomposing.
    #[serde(default)]
    pub offsets: [f64; 3],
}

/// Recovered conditional matrices and class prior, all in one column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlugInEstimate {
    #[serde(with = "crate::serde_mat::triple")]
    pub m: [DMatrix<f64>; VIEWS],
    pub pi: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl PlugInEstimate {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// The first `k` rows of every view, the part read by matching and risk.
    pub fn risk_rows(&self) -> [DMatrix<f64>; VIEWS] {
        let k = self.k();
        core::array::from_fn(|v| self.m[v].rows(0, k).into_owned())
    }

    /// Reorders columns so new column `a` is old column `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> PlugInEstimate {
        PlugInEstimate {
            m: core::array::from_fn(|v| permute_columns(&self.m[v], perm)),
            pi: perm.iter().map(|&p| self.pi[p]).collect(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    /// Diagnostics computed from `M`, `π` and the moments alone.
    pub fn summary(&self, moments: &MomentSet) -> Diagnostics {
        let (lambda, kappa) = recover::conditioning(&self.m);
        Diagnostics {
            lambda,
            kappa,
            pi_min: self.pi.iter().copied().fold(f64::INFINITY, f64::min),
            tau: moments.sq_norm.max(0.0).sqrt(),
            ..self.diagnostics.clone()
        }
    }
}

fn check_shape(dims: [usize; VIEWS], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidInput(alloc::format!("k must be at least 2, got {k}")));
    }
    if k > MAX_K {
        return Err(Error::Unsupported(alloc::format!("k = {k} exceeds {MAX_K}")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d < k) {
        return Err(Error::InvalidInput(alloc::format!(
            "view dimension {d} is smaller than k = {k}"
        )));
    }
    Ok(())
}

/// Whitening, power iteration, recovery and optional refinement on one moment set.
///
/// `triple` supplies the projected third moment when it is not stored densely.
pub fn decompose_moments(
    moments: &MomentSet,
    triple: Option<&dyn TripleMoment>,
    k: usize,
    config: &DecompConfig,
) -> Result<PlugInEstimate> {
    config.validate()?;
    check_shape(moments.dims, k)?;
    let whitening = symmetrize_and_whiten(moments, triple, k, config.rank_tol).map_err(|e| e.at(Stage::Whiten))?;
    let (pairs, _) = tensor_power_method(&whitening.tensor, k, config.restarts, config.iterations, config.seed)
        .map_err(|e| e.at(Stage::PowerMethod))?;
    let mut est = recover_parameters(&pairs, &whitening, moments, config.rank_tol).map_err(|e| e.at(Stage::Recover))?;

    let weights = config.weights.unwrap_or_else(|| default_weights(k));
    let target = RefineTarget::new(moments, triple, k, weights).map_err(|e| e.at(Stage::Refine))?;
    let before = target.objective(&est.m, &est.pi);
    est.diagnostics.tensor_only_residual = before;
    est.diagnostics.residual = before;
    est.diagnostics.splits = 1;
    if config.refine {
        let out = refine(&est, &target, config.refine_max_iter).map_err(|e| e.at(Stage::Refine))?;
        // the softmax round trip of π can cost a few ulps; never hand back a worse fit
        if out.objective <= before {
            est = out.estimate;
        }
        est.diagnostics.refined = true;
        est.diagnostics.refine_iterations = out.iterations;
        est.diagnostics.refine_converged = out.converged;
    }
    est.diagnostics = est.summary(moments);
    Ok(est)
}

/// Full pipeline over a loss source, with amplification across `config.splits`
/// contiguous sample splits.
pub fn decompose_source<S: LossSource + ?Sized>(source: &S, k: usize, config: &DecompConfig) -> Result<PlugInEstimate> {
    config.validate()?;
    check_shape(source.dims(), k)?;
    let m = source.len();
    if m == 0 {
        return Err(Error::Empty.at(Stage::Accumulate));
    }
    if config.splits == 1 {
        let moments = accumulate_moments(source, config.dense_cap).map_err(|e| e.at(Stage::Accumulate))?;
        let triple = SampleTriple { source };
        return decompose_moments(&moments, Some(&triple), k, config);
    }
    let splits = config.splits;
    if m < splits {
        return Err(Error::InvalidInput(alloc::format!("{m} samples cannot fill {splits} splits")).at(Stage::Accumulate));
    }
    let mut estimates = Vec::with_capacity(splits);
    for s in 0..splits {
        let sub = Subset {
            inner: source,
            range: s * m / splits..(s + 1) * m / splits,
        };
        let moments = accumulate_moments(&sub, config.dense_cap).map_err(|e| e.at(Stage::Accumulate))?;
        let cfg = DecompConfig {
            seed: config.seed.wrapping_add(s as u64),
            splits: 1,
            ..config.clone()
        };
        estimates.push(decompose_moments(&moments, Some(&SampleTriple { source: &sub }), k, &cfg)?);
    }
    choose_amplified(estimates, config.amplify_radius)
}

/// Picks the amplified estimate from per-split results and records the choice.
pub fn choose_amplified(estimates: Vec<PlugInEstimate>, radius: Option<f64>) -> Result<PlugInEstimate> {
    let n = estimates.len();
    let idx = amplify_estimates(&estimates, radius).map_err(|e| e.at(Stage::Amplify))?;
    let mut est = estimates.into_iter().nth(idx).expect("index from amplify");
    est.diagnostics.splits = n;
    est.diagnostics.chosen_split = idx;
    Ok(est)
}

/// Removes the gauge shift from the first `rows` rows of each `M_v`.
pub fn unshift(est: &mut PlugInEstimate, rows: usize, offsets: [f64; VIEWS]) {
    for (m, &c) in est.m.iter_mut().zip(&offsets) {
        for i in 0..rows.min(m.nrows()) {
            m.row_mut(i).add_scalar_mut(-c);
        }
    }
    est.diagnostics.offsets = offsets;
}

/// [`decompose_source`] after the gauge shift of [`gauge_offsets`] on the
/// first `k` rows; the returned `M_v` are shifted back, diagnostics describe
/// the shifted problem.
pub fn decompose_gauged<S: LossSource + ?Sized>(source: &S, k: usize, config: &DecompConfig) -> Result<PlugInEstimate> {
    let offsets = gauge_offsets(source, k).map_err(|e| e.at(Stage::Accumulate))?;
    if offsets == [0.0; VIEWS] {
        return decompose_source(source, k, config);
    }
    let shifted = Shifted {
        inner: source,
        rows: k,
        offsets,
    };
    let mut est = decompose_source(&shifted, k, config)?;
    unshift(&mut est, k, offsets);
    Ok(est)
}

/// Decomposes the loss vectors of `model` on unlabeled `data`.
pub fn decompose(data: &ViewData, model: &ViewLossModel, config: &DecompConfig) -> Result<PlugInEstimate> {
    decompose_gauged(&ModelLosses::new(model, data), model.k(), config)
}
