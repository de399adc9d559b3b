//! Risk assembly from recovered `(M, π)`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::decomposition::{decompose_gauged, decompose_source, DecompConfig, Diagnostics, PlugInEstimate};
use crate::error::{Error, Result};
use crate::matching::{assignment_gap, best_assignment, best_permutation, score_matrix, GAP_MAX_K};
use crate::models::{ViewLossModel, VIEWS};
use crate::moments::{LossSource, ModelLosses, TreeSum};
use crate::sample::{LabeledData, ViewData};

/// Relative tolerance under which a loss vector counts as label-constant.
const CONSTANT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Labeled risk on held-out data from the training distribution.
    pub validation: Option<f64>,
    /// Mean entropy of the model's predictive distribution.
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub sigma: Vec<usize>,
    pub a_mean: f64,
    /// `π_{σ(j)} Σ_v (M_v)_{j,σ(j)}` per loss row `j`.
    pub contributions: Vec<f64>,
    pub diagnostics: Option<Diagnostics>,
    pub gap: Option<f64>,
    /// Every loss vector was constant across labels, so no decomposition ran.
    pub label_constant: bool,
    #[serde(default)]
    pub baselines: Baselines,
}

impl RiskEstimate {
    /// `a_mean − Σ contributions`, recomputed from the stored parts.
    pub fn recompute(&self) -> f64 {
        self.a_mean - self.contributions.iter().sum::<f64>()
    }
}

fn check_sigma(sigma: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if sigma.len() != k {
        return Err(Error::Dimension {
            what: "permutation",
            expected: k,
            got: sigma.len(),
        });
    }
    for &s in sigma {
        if s >= k || seen[s] {
            return Err(Error::InvalidInput("sigma is not a bijection".into()));
        }
        seen[s] = true;
    }
    Ok(())
}

fn check_mats(mats: &[DMatrix<f64>], k: usize, rows: usize) -> Result<()> {
    for m in mats {
        if m.ncols() != k || m.nrows() < rows {
            return Err(Error::Dimension {
                what: "conditional matrix",
                expected: k,
                got: m.ncols(),
            });
        }
    }
    Ok(())
}

/// `π_{σ(j)} Σ_v (M_v)_{j,σ(j)}` for each `j`.
pub fn contributions(mats: &[DMatrix<f64>], pi: &[f64], sigma: &[usize]) -> Result<Vec<f64>> {
    let k = pi.len();
    check_sigma(sigma, k)?;
    check_mats(mats, k, k)?;
    Ok(sigma
        .iter()
        .enumerate()
        .map(|(j, &s)| pi[s] * mats.iter().map(|m| m[(j, s)]).sum::<f64>())
        .collect())
}

/// `A_mean − Σ_j π_{σ(j)} Σ_v (M_v)_{j,σ(j)}`.
pub fn risk_from_components(a_mean: f64, mats: &[DMatrix<f64>], pi: &[f64], sigma: &[usize]) -> Result<f64> {
    Ok(a_mean - contributions(mats, pi, sigma)?.iter().sum::<f64>())
}

/// Optimistic risk from a decomposition: matching plus assembly.
pub fn risk_from_estimate(a_mean: f64, est: &PlugInEstimate) -> Result<RiskEstimate> {
    let rows = est.risk_rows();
    let perm = best_permutation(&rows, &est.pi)?;
    let contributions = contributions(&rows, &est.pi, &perm.sigma)?;
    let gap = if est.k() <= GAP_MAX_K {
        Some(assignment_gap(&score_matrix(&rows, &est.pi)?)?)
    } else {
        None
    };
    Ok(RiskEstimate {
        value: a_mean - contributions.iter().sum::<f64>(),
        sigma: perm.sigma,
        a_mean,
        contributions,
        diagnostics: Some(est.diagnostics.clone()),
        gap,
        label_constant: false,
        baselines: Baselines::default(),
    })
}

/// `Ê[A(θ; x)]`.
pub fn mean_base_term(data: &ViewData, model: &ViewLossModel) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut tree = TreeSum::new(1);
    for n in 0..data.len() {
        tree.current()[0] += model.base_term(data.sample(n))?;
        tree.commit();
    }
    let (s, m) = tree.finish();
    Ok(s[0] / m as f64)
}

/// Per-view means of the loss when every vector is constant across labels.
pub fn label_constant_means<S: LossSource + ?Sized>(source: &S) -> Result<Option<[f64; VIEWS]>> {
    let dims = source.dims();
    let mut bufs = [vec![0.0; dims[0]], vec![0.0; dims[1]], vec![0.0; dims[2]]];
    let mut tree = TreeSum::new(VIEWS);
    for n in 0..source.len() {
        for v in 0..VIEWS {
            source.fill(n, v, &mut bufs[v])?;
            let first = bufs[v][0];
            let tol = CONSTANT_TOL * (1.0 + first.abs());
            if bufs[v].iter().any(|&x| (x - first).abs() > tol) {
                return Ok(None);
            }
            tree.current()[v] += bufs[v].iter().sum::<f64>() / dims[v] as f64;
        }
        tree.commit();
    }
    let (s, m) = tree.finish();
    if m == 0 {
        return Err(Error::Empty);
    }
    Ok(Some(core::array::from_fn(|v| s[v] / m as f64)))
}

/// Risk when no loss term depends on the label: `Ê[A] − Σ_v Ê[f_v]`.
pub fn label_constant_risk(a_mean: f64, means: [f64; VIEWS], k: usize) -> RiskEstimate {
    let total: f64 = means.iter().sum();
    RiskEstimate {
        value: a_mean - total,
        sigma: (0..k).collect(),
        a_mean,
        contributions: {
            let mut c = vec![0.0; k];
            c[0] = total;
            c
        },
        diagnostics: None,
        gap: Some(0.0),
        label_constant: true,
        baselines: Baselines::default(),
    }
}

/// Unsupervised estimate of `R̃(θ)`: decompose, match, assemble.
pub fn estimate_risk(data: &ViewData, model: &ViewLossModel, config: &DecompConfig) -> Result<RiskEstimate> {
    let a_mean = mean_base_term(data, model)?;
    let source = ModelLosses::new(model, data);
    if let Some(means) = label_constant_means(&source)? {
        return Ok(label_constant_risk(a_mean, means, model.k()));
    }
    let est = decompose_gauged(&source, model.k(), config)?;
    risk_from_estimate(a_mean, &est)
}

/// `(1/m) Σ L(θ; x, y)` on labeled data.
pub fn labeled_risk(data: &LabeledData, model: &ViewLossModel) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut tree = TreeSum::new(1);
    for (n, &y) in data.labels().iter().enumerate() {
        tree.current()[0] += model.loss(data.unlabeled().sample(n), y)?;
        tree.commit();
    }
    let (s, m) = tree.finish();
    Ok(s[0] / m as f64)
}

/// Mean entropy of `p_θ(y | x)`.
pub fn predictive_entropy(data: &ViewData, model: &ViewLossModel) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut tree = TreeSum::new(1);
    for n in 0..data.len() {
        let p = model.predictive(data.sample(n))?;
        tree.current()[0] -= p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>();
        tree.commit();
    }
    let (s, m) = tree.finish();
    Ok(s[0] / m as f64)
}

/// Loss vectors `exp(−f_v)` of the exponential loss `Π_v exp(−f_v)`.
pub struct ExponentialLosses<'a> {
    pub model: &'a ViewLossModel,
    pub data: &'a ViewData,
}

impl LossSource for ExponentialLosses<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn dims(&self) -> [usize; VIEWS] {
        [self.model.k(); VIEWS]
    }

    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()> {
        self.model.loss_vector_into(v, self.data.sample(n)[v], out)?;
        out.iter_mut().for_each(|x| *x = (-*x).exp());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialRisk {
    pub value: f64,
    pub sigma: Vec<usize>,
    /// Some `M_v` entry was negative, which exponential losses cannot produce.
    pub negative_entries: bool,
}

/// `Σ_j π_{σ(j)} Π_v (M_v)_{j,σ(j)}`.
pub fn exponential_risk(mats: &[DMatrix<f64>], pi: &[f64], sigma: &[usize]) -> Result<ExponentialRisk> {
    let k = pi.len();
    check_sigma(sigma, k)?;
    check_mats(mats, k, k)?;
    let negative_entries = mats.iter().any(|m| m.rows(0, k).iter().any(|&x| x < 0.0));
    let value = sigma
        .iter()
        .enumerate()
        .map(|(j, &s)| pi[s] * mats.iter().map(|m| m[(j, s)]).product::<f64>())
        .sum();
    Ok(ExponentialRisk {
        value,
        sigma: sigma.to_vec(),
        negative_entries,
    })
}

/// The permutation minimizing the exponential risk.
pub fn exponential_sigma(mats: &[DMatrix<f64>], pi: &[f64]) -> Result<Vec<usize>> {
    let k = pi.len();
    check_mats(mats, k, k)?;
    let x = DMatrix::from_fn(k, k, |i, j| -pi[i] * mats.iter().map(|m| m[(j, i)]).product::<f64>());
    Ok(best_assignment(&x)?.sigma)
}

/// Decomposes `exp(−f_v)` loss vectors and assembles the product-form risk.
pub fn estimate_exponential_risk(
    data: &ViewData,
    model: &ViewLossModel,
    config: &DecompConfig,
) -> Result<ExponentialRisk> {
    let est = decompose_source(&ExponentialLosses { model, data }, model.k(), config)?;
    let rows = est.risk_rows();
    let sigma = exponential_sigma(&rows, &est.pi)?;
    exponential_risk(&rows, &est.pi, &sigma)
}

/// `Ê[A] + Σ_{j<k′} p_z(j) Σ_v (M′_v)_{r(j),j}`.
///
/// `mats` hold loss-like terms, so with `k′ = k`, `r = id` this equals
/// [`risk_from_components`] applied to the negated matrices.
pub fn mediated_risk(a_mean: f64, mats: &[DMatrix<f64>], p_z: &[f64], r: &[usize], k: usize) -> Result<f64> {
    let kp = p_z.len();
    check_mediator_map(r, kp, k)?;
    check_mats(mats, kp, k)?;
    let corr: f64 = r
        .iter()
        .enumerate()
        .map(|(j, &rj)| p_z[j] * mats.iter().map(|m| m[(rj, j)]).sum::<f64>())
        .sum();
    Ok(a_mean + corr)
}

fn check_mediator_map(r: &[usize], kp: usize, k: usize) -> Result<()> {
    if kp < k {
        return Err(Error::InvalidInput(alloc::format!(
            "mediator count {kp} is below the class count {k}"
        )));
    }
    if r.len() != kp {
        return Err(Error::Dimension {
            what: "mediator map",
            expected: kp,
            got: r.len(),
        });
    }
    let mut hit = vec![false; k];
    for &c in r {
        if c >= k {
            return Err(Error::InvalidInput(alloc::format!("mediator maps to class {c} >= {k}")));
        }
        hit[c] = true;
    }
    if hit.iter().any(|h| !h) {
        return Err(Error::InvalidInput("mediator map is not onto the classes".into()));
    }
    Ok(())
}

/// Mediator column order maximizing `Σ_j p_z Σ_v (M′_v)_{r(j), ·}` on
/// reward-like matrices; entry `j` of the result is the estimated column
/// assigned to mediator value `j`.
pub fn align_mediator(mats: &[DMatrix<f64>], p_z: &[f64], r: &[usize], k: usize) -> Result<Vec<usize>> {
    let kp = p_z.len();
    check_mediator_map(r, kp, k)?;
    check_mats(mats, kp, k)?;
    let x = DMatrix::from_fn(kp, kp, |i, j| p_z[i] * mats.iter().map(|m| m[(r[j], i)]).sum::<f64>());
    Ok(best_assignment(&x)?.sigma)
}

/// Mediated risk from a reward-like extended decomposition.
pub fn mediated_from_estimate(a_mean: f64, est: &PlugInEstimate, r: &[usize], k: usize) -> Result<f64> {
    let order = align_mediator(&est.m, &est.pi, r, k)?;
    let aligned = est.permuted(&order);
    let neg: Vec<DMatrix<f64>> = aligned.m.iter().map(|m| -m).collect();
    mediated_risk(a_mean, &neg, &aligned.pi, r, k)
}

/// Extension function appending extra coordinates to a view's loss vector.
pub trait Extension: Sync {
    fn extra_dim(&self, v: usize) -> usize;
    fn fill(&self, v: usize, x_v: &[f64], out: &mut [f64]);
}

/// Appends the raw view coordinates.
pub struct RawCoordinates {
    pub dims: [usize; VIEWS],
}

impl Extension for RawCoordinates {
    fn extra_dim(&self, v: usize) -> usize {
        self.dims[v]
    }

    fn fill(&self, _v: usize, x_v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x_v);
    }
}

/// `h′_v(x_v) = [f_v(x_v, 1..k); extension(x_v)]`.
pub struct MediatedLosses<'a, E: ?Sized> {
    pub model: &'a ViewLossModel,
    pub data: &'a ViewData,
    pub extension: &'a E,
}

impl<E: Extension + ?Sized> LossSource for MediatedLosses<'_, E> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn dims(&self) -> [usize; VIEWS] {
        core::array::from_fn(|v| self.model.k() + self.extension.extra_dim(v))
    }

    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()> {
        let k = self.model.k();
        let x = self.data.sample(n)[v];
        self.model.loss_vector_into(v, x, &mut out[..k])?;
        self.extension.fill(v, x, &mut out[k..]);
        Ok(())
    }
}

/// Risk through a mediating variable with `k′ = r.len()` values.
pub fn estimate_mediated_risk<E: Extension + ?Sized>(
    data: &ViewData,
    model: &ViewLossModel,
    extension: &E,
    r: &[usize],
    config: &DecompConfig,
) -> Result<f64> {
    let a_mean = mean_base_term(data, model)?;
    let source = MediatedLosses { model, data, extension };
    let est = decompose_source(&source, r.len(), config)?;
    mediated_from_estimate(a_mean, &est, r, model.k())
}
