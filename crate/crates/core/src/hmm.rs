//! Chain models: log-space forward-backward and per-position risk estimation.
//!
//! Positions are 1-based throughout the public API: `t = 1..=T`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::{EmissionSpec, HmmSpec, LabeledSequences, Sequences};
use crate::decomposition::{decompose_source, DecompConfig, PlugInEstimate};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, truncated_pinv};
use crate::matching::best_permutation;
use crate::models::VIEWS;
use crate::moments::LossTable;
use crate::risk::label_constant_means;

/// Log emission potentials `log g(j, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Emission {
    /// `log_probs[j][s]` for symbol `s`.
    Categorical { log_probs: Vec<Vec<f64>> },
    /// Diagonal Gaussian log densities.
    Gaussian { means: Vec<Vec<f64>>, variances: Vec<Vec<f64>> },
}

impl Emission {
    pub fn obs_dim(&self) -> usize {
        match self {
            Emission::Categorical { .. } => 1,
            Emission::Gaussian { means, .. } => means.first().map_or(0, Vec::len),
        }
    }

    fn log_potential(&self, j: usize, x: &[f64]) -> Result<f64> {
        match self {
            Emission::Categorical { log_probs } => {
                let s = x[0];
                let row = &log_probs[j];
                if !(s >= 0.0) || s.fract() != 0.0 || s as usize >= row.len() {
                    return Err(Error::InvalidInput(alloc::format!("symbol {s} outside the alphabet")));
                }
                Ok(row[s as usize])
            }
            Emission::Gaussian { means, variances } => Ok(means[j]
                .iter()
                .zip(&variances[j])
                .zip(x)
                .map(|((mu, var), xi)| -0.5 * ((xi - mu).powi(2) / var + (2.0 * core::f64::consts::PI * var).ln()))
                .sum()),
        }
    }
}

/// `p(y | x) ∝ init(y₁) Π f(y_{t−1}, y_t) Π g(y_t, x_t)`, stored as logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub k: usize,
    pub log_initial: Vec<f64>,
    /// `log f(i, j)`, row `i` the previous state.
    pub log_transition: Vec<Vec<f64>>,
    pub emission: Emission,
}

fn finite_logs(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|&x| x == f64::NEG_INFINITY) {
        return Err(Error::ZeroPotential(what.into()));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(alloc::format!("non-finite {what}")));
    }
    Ok(())
}

impl HmmModel {
    pub fn new(log_initial: Vec<f64>, log_transition: Vec<Vec<f64>>, emission: Emission) -> Result<Self> {
        let k = log_initial.len();
        if k == 0 || log_transition.len() != k || log_transition.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("transition must be k × k".into()));
        }
        finite_logs(&log_initial, "initial potential")?;
        for row in &log_transition {
            finite_logs(row, "transition potential")?;
        }
        match &emission {
            Emission::Categorical { log_probs } => {
                if log_probs.len() != k || log_probs.iter().any(|r| r.is_empty() || r.len() != log_probs[0].len()) {
                    return Err(Error::InvalidInput("emission table must have k equal rows".into()));
                }
                for row in log_probs {
                    finite_logs(row, "emission potential")?;
                }
            }
            Emission::Gaussian { means, variances } => {
                let d = means.first().map_or(0, Vec::len);
                if d == 0
                    || means.len() != k
                    || variances.len() != k
                    || means.iter().chain(variances).any(|r| r.len() != d)
                    || variances.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite()))
                {
                    return Err(Error::InvalidInput("bad Gaussian emission parameters".into()));
                }
            }
        }
        Ok(HmmModel {
            k,
            log_initial,
            log_transition,
            emission,
        })
    }

    /// The generating chain itself as an evaluation model.
    pub fn from_spec(spec: &HmmSpec) -> Result<Self> {
        spec.validate()?;
        let ln = |row: &Vec<f64>| row.iter().map(|p| p.ln()).collect::<Vec<f64>>();
        let emission = match &spec.emission {
            EmissionSpec::Categorical { probs } => Emission::Categorical {
                log_probs: probs.iter().map(ln).collect(),
            },
            EmissionSpec::Gaussian { means, variances } => Emission::Gaussian {
                means: means.clone(),
                variances: variances.clone(),
            },
        };
        HmmModel::new(ln(&spec.initial), spec.transition.iter().map(ln).collect(), emission)
    }

    /// Uniform initial and transition potentials with the given emissions.
    pub fn uniform(k: usize, emission: Emission) -> Result<Self> {
        HmmModel::new(vec![0.0; k], vec![vec![0.0; k]; k], emission)
    }

    fn log_emissions(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let od = self.emission.obs_dim();
        if x.is_empty() || x.len() % od != 0 {
            return Err(Error::Dimension {
                what: "observation sequence",
                expected: od,
                got: x.len(),
            });
        }
        x.chunks(od)
            .map(|xt| (0..self.k).map(|j| self.emission.log_potential(j, xt)).collect())
            .collect()
    }

    /// Unnormalized log potential of one label path.
    pub fn path_log_potential(&self, x: &[f64], path: &[usize]) -> Result<f64> {
        let g = self.log_emissions(x)?;
        if path.len() != g.len() {
            return Err(Error::Dimension {
                what: "label path",
                expected: g.len(),
                got: path.len(),
            });
        }
        let mut s = self.log_initial[path[0]];
        for (t, &y) in path.iter().enumerate() {
            s += g[t][y];
            if t > 0 {
                s += self.log_transition[path[t - 1]][y];
            }
        }
        Ok(s)
    }
}

fn normalize_log(v: &mut [f64]) {
    let z = log_sum_exp(v);
    v.iter_mut().for_each(|x| *x -= z);
}

/// Forward-backward results for one sequence, indexed from 0 internally.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageTable {
    pub k: usize,
    /// `log p(y_t | x_{1:t})`.
    pub log_alpha: Vec<Vec<f64>>,
    /// `log p(y_t | x_{1:t−1})`, the normalized initial potential at `t = 1`.
    pub log_pred: Vec<Vec<f64>>,
    /// Backward messages shifted so the largest entry is 0.
    pub log_beta: Vec<Vec<f64>>,
    pub log_emission: Vec<Vec<f64>>,
    /// `p(y_t | x_{1:T})`.
    pub unary: Vec<Vec<f64>>,
    /// `p(y_{t−1}, y_t | x_{1:T})` for `t ≥ 2`; entry 0 is empty.
    pub pairwise: Vec<DMatrix<f64>>,
    pub log_transition: Vec<Vec<f64>>,
}

impl MessageTable {
    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    /// Local loss vectors at 1-based position `t`.
    pub fn local_views(&self, t: usize, kind: LocalKind) -> Result<LocalLosses> {
        let big_t = self.len();
        let (lo, hi) = kind.range(big_t);
        if t < lo || t > hi {
            return Err(Error::Position { t, lo, hi });
        }
        let i = t - 1;
        let k = self.k;
        let f: [Vec<f64>; VIEWS] = match kind {
            LocalKind::Unary => [
                self.log_pred[i].clone(),
                self.log_emission[i].clone(),
                self.log_beta[i].clone(),
            ],
            LocalKind::Pair => {
                let mut f1 = Vec::with_capacity(k * k);
                let mut f2 = Vec::with_capacity(k * k);
                let mut f3 = Vec::with_capacity(k * k);
                for a in 0..k {
                    for b in 0..k {
                        f1.push(self.log_pred[i - 1][a]);
                        f2.push(self.log_emission[i - 1][a] + self.log_transition[a][b] + self.log_emission[i][b]);
                        f3.push(self.log_beta[i][b]);
                    }
                }
                [f1, f2, f3]
            }
        };
        let total: Vec<f64> = (0..f[0].len()).map(|l| f[0][l] + f[1][l] + f[2][l]).collect();
        Ok(LocalLosses {
            a: log_sum_exp(&total),
            f,
        })
    }
}

pub fn forward_backward(model: &HmmModel, x: &[f64]) -> Result<MessageTable> {
    let k = model.k;
    let g = model.log_emissions(x)?;
    let big_t = g.len();
    let f = &model.log_transition;
    let mut log_pred = Vec::with_capacity(big_t);
    let mut log_alpha: Vec<Vec<f64>> = Vec::with_capacity(big_t);
    let mut scratch = vec![0.0; k];
    for t in 0..big_t {
        let mut pred = if t == 0 {
            model.log_initial.clone()
        } else {
            let prev = &log_alpha[t - 1];
            (0..k)
                .map(|j| {
                    for i in 0..k {
                        scratch[i] = prev[i] + f[i][j];
                    }
                    log_sum_exp(&scratch)
                })
                .collect()
        };
        normalize_log(&mut pred);
        let mut alpha: Vec<f64> = pred.iter().zip(&g[t]).map(|(p, e)| p + e).collect();
        normalize_log(&mut alpha);
        if alpha.iter().any(|x| !x.is_finite()) {
            return Err(Error::ZeroPotential(alloc::format!("forward message at t = {}", t + 1)));
        }
        log_pred.push(pred);
        log_alpha.push(alpha);
    }
    let mut log_beta = vec![vec![0.0; k]; big_t];
    for t in (0..big_t.saturating_sub(1)).rev() {
        let mut b: Vec<f64> = (0..k)
            .map(|i| {
                for j in 0..k {
                    scratch[j] = f[i][j] + g[t + 1][j] + log_beta[t + 1][j];
                }
                log_sum_exp(&scratch)
            })
            .collect();
        let top = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::ZeroPotential(alloc::format!("backward message at t = {}", t + 1)));
        }
        b.iter_mut().for_each(|x| *x -= top);
        log_beta[t] = b;
    }
    let unary = (0..big_t)
        .map(|t| {
            let mut u: Vec<f64> = (0..k).map(|j| log_alpha[t][j] + log_beta[t][j]).collect();
            normalize_log(&mut u);
            u.into_iter().map(f64::exp).collect()
        })
        .collect();
    let mut pairwise = Vec::with_capacity(big_t);
    pairwise.push(DMatrix::zeros(0, 0));
    for t in 1..big_t {
        let mut logs: Vec<f64> = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                logs.push(log_alpha[t - 1][i] + f[i][j] + g[t][j] + log_beta[t][j]);
            }
        }
        normalize_log(&mut logs);
        pairwise.push(DMatrix::from_row_iterator(k, k, logs.into_iter().map(f64::exp)));
    }
    Ok(MessageTable {
        k,
        log_alpha,
        log_pred,
        log_beta,
        log_emission: g,
        unary,
        pairwise,
        log_transition: model.log_transition.clone(),
    })
}

/// Which local loss a position contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalKind {
    /// `ℓ_t = −log p(y_{t−1}, y_t | x)`; label `(i, j)` is index `i·k + j`.
    Pair,
    /// `ℓ′_t = −log p(y_t | x)`.
    Unary,
}

impl LocalKind {
    /// Admissible 1-based positions for a chain of length `T`.
    pub fn range(self, big_t: usize) -> (usize, usize) {
        match self {
            LocalKind::Pair => (3, big_t.saturating_sub(1)),
            LocalKind::Unary => (2, big_t.saturating_sub(1)),
        }
    }
}

/// Three loss vectors and the base term with `A − Σ_v f_v(y) = ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLosses {
    pub f: [Vec<f64>; VIEWS],
    pub a: f64,
}

impl LocalLosses {
    pub fn loss(&self, label: usize) -> f64 {
        self.a - self.f.iter().map(|f| f[label]).sum::<f64>()
    }
}

pub fn local_loss_views(model: &HmmModel, x: &[f64], t: usize, kind: LocalKind) -> Result<LocalLosses> {
    forward_backward(model, x)?.local_views(t, kind)
}

/// `−log p(y_{2:T−1} | x)` through the chain factorization.
pub fn inner_log_loss(table: &MessageTable, path: &[usize]) -> f64 {
    let big_t = table.len();
    let pair: f64 = (3..big_t).map(|t| -table.pairwise[t - 1][(path[t - 2], path[t - 1])].ln()).sum();
    let sep: f64 = (3..big_t - 1).map(|t| -table.unary[t - 1][path[t - 1]].ln()).sum();
    pair - sep
}

/// Labeled mean of the inner structured log loss.
pub fn labeled_inner_risk(model: &HmmModel, data: &LabeledSequences) -> Result<f64> {
    let seqs = &data.data;
    if seqs.is_empty() {
        return Err(Error::Empty);
    }
    if seqs.t_len < 4 {
        return Err(Error::InvalidInput("inner risk needs T ≥ 4".into()));
    }
    let mut total = 0.0;
    for n in 0..seqs.len() {
        total += inner_log_loss(&forward_backward(model, seqs.sequence(n))?, data.path(n));
    }
    Ok(total / seqs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmRiskConfig {
    pub decomp: DecompConfig,
    pub min_sequences: usize,
}

impl Default for HmmRiskConfig {
    fn default() -> Self {
        HmmRiskConfig {
            decomp: DecompConfig::default(),
            min_sequences: 50,
        }
    }
}

/// One position's estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionTerm {
    pub t: usize,
    pub kind: LocalKind,
    pub value: f64,
    pub a_mean: f64,
    /// `min_v σ_k(M_v)` of the unary decomposition at `t`; `None` when the
    /// losses were label-constant.
    pub lambda: Option<f64>,
    /// Recovered `p(y_{t−1}, y_t)`, row-major, for pair terms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmRisk {
    /// `Σ_{t=3}^{T−1} Ê[ℓ_t] − Σ_{t=3}^{T−2} Ê[ℓ′_t]`.
    pub value: f64,
    pub terms: Vec<PositionTerm>,
}

/// Unary decomposition at one position, in label coordinates.
struct UnaryFit {
    /// `M_v[i, j] = E[f_v(i) | y_t = j]` after alignment.
    mats: Option<[DMatrix<f64>; VIEWS]>,
    /// `E[f_v(y_t)]` per view.
    view_means: [f64; VIEWS],
    a_mean: f64,
    lambda: Option<f64>,
}

fn aligned(est: &PlugInEstimate) -> Result<([DMatrix<f64>; VIEWS], Vec<f64>)> {
    let rows = est.risk_rows();
    let sigma = best_permutation(&rows, &est.pi)?.sigma;
    let k = est.k();
    let mats = core::array::from_fn(|v| DMatrix::from_fn(k, k, |i, j| rows[v][(i, sigma[j])]));
    Ok((mats, sigma.iter().map(|&s| est.pi[s]).collect()))
}

fn fit_unary(table: &LossTable, a_mean: f64, k: usize, config: &DecompConfig) -> Result<UnaryFit> {
    if let Some(view_means) = label_constant_means(table)? {
        return Ok(UnaryFit {
            mats: None,
            view_means,
            a_mean,
            lambda: None,
        });
    }
    let est = decompose_source(table, k, config)?;
    let (mats, pi) = aligned(&est)?;
    let view_means = core::array::from_fn(|v| (0..k).map(|j| pi[j] * mats[v][(j, j)]).sum());
    Ok(UnaryFit {
        mats: Some(mats),
        view_means,
        a_mean,
        lambda: Some(est.diagnostics.lambda),
    })
}

/// `P = A⁻¹ C B⁻ᵀ` from `C = E[f₁^{(t−1)} f₃^{(t)ᵀ}] = A P Bᵀ`, projected to a
/// joint distribution.
fn recover_joint(
    cross: &DMatrix<f64>,
    before: &[DMatrix<f64>; VIEWS],
    after: &[DMatrix<f64>; VIEWS],
    rank_tol: f64,
) -> Result<DMatrix<f64>> {
    let k = cross.nrows();
    let (a_inv, _) = truncated_pinv(&before[0], k, rank_tol, "previous-position view 1")?;
    let (b_inv, _) = truncated_pinv(&after[2], k, rank_tol, "position view 3")?;
    let p = a_inv * cross * b_inv.transpose();
    let clipped = p.map(|x| x.max(0.0));
    let mass = clipped.sum();
    if !(mass >= 0.5) {
        return Err(Error::DegeneratePrior { mass });
    }
    Ok(clipped / mass)
}

/// Per-position loss tables for every sequence.
struct PositionData {
    unary: Vec<LossTable>,
    unary_a: Vec<f64>,
    pair_a: Vec<f64>,
}

fn collect_positions(model: &HmmModel, seqs: &Sequences) -> Result<PositionData> {
    let k = model.k;
    let big_t = seqs.t_len;
    let m = seqs.len();
    let unary_positions = big_t - 2;
    let mut values: Vec<[Vec<f64>; VIEWS]> = (0..unary_positions)
        .map(|_| core::array::from_fn(|_| Vec::with_capacity(m * k)))
        .collect();
    let mut unary_a = vec![0.0; unary_positions];
    let mut pair_a = vec![0.0; big_t - 3];
    for n in 0..m {
        let table = forward_backward(model, seqs.sequence(n)).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::InvalidInput(alloc::format!("sequence {n}: {msg}")),
            e => e,
        })?;
        for t in 2..big_t {
            let local = table.local_views(t, LocalKind::Unary)?;
            for v in 0..VIEWS {
                values[t - 2][v].extend_from_slice(&local.f[v]);
            }
            unary_a[t - 2] += local.a;
            if t >= 3 {
                pair_a[t - 3] += table.local_views(t, LocalKind::Pair)?.a;
            }
        }
    }
    let scale = 1.0 / m as f64;
    Ok(PositionData {
        unary: values
            .into_iter()
            .map(|vals| LossTable::new([k; VIEWS], vals))
            .collect::<Result<_>>()?,
        unary_a: unary_a.into_iter().map(|a| a * scale).collect(),
        pair_a: pair_a.into_iter().map(|a| a * scale).collect(),
    })
}

fn is_constant(rows: &[Vec<f64>]) -> Option<f64> {
    let first = rows[0][0];
    let tol = 1e-12 * (1.0 + first.abs());
    rows.iter().flatten().all(|&x| (x - first).abs() <= tol).then_some(first)
}

/// Estimates the inner structured risk `−E[log p(y_{2:T−1} | x)]` from
/// unlabeled sequences.
///
/// Each unary position `t ∈ [2, T−1]` gets its own three-view decomposition
/// with views `x_{1:t−1}`, `x_t`, `x_{t+1:T}`. Pair terms are composed from the
/// unary fits at `t − 1` and `t` plus the joint `p(y_{t−1}, y_t)` recovered
/// from the cross moment of the outer views.
pub fn hmm_risk(model: &HmmModel, seqs: &Sequences, config: &HmmRiskConfig) -> Result<HmmRisk> {
    let big_t = seqs.t_len;
    if big_t < 4 {
        return Err(Error::InvalidInput(alloc::format!(
            "T = {big_t} leaves no admissible pair position (need T ≥ 4)"
        )));
    }
    if seqs.obs_dim != model.emission.obs_dim() {
        return Err(Error::Dimension {
            what: "observation width",
            expected: model.emission.obs_dim(),
            got: seqs.obs_dim,
        });
    }
    if seqs.len() < config.min_sequences.max(1) {
        return Err(Error::InvalidInput(alloc::format!(
            "{} sequences, need at least {}",
            seqs.len(),
            config.min_sequences.max(1)
        )));
    }
    let k = model.k;
    let data = collect_positions(model, seqs)?;
    let fits: Vec<UnaryFit> = (2..big_t)
        .map(|t| {
            fit_unary(&data.unary[t - 2], data.unary_a[t - 2], k, &config.decomp)
                .map_err(|e| Error::AtPosition { t, source: e.into() })
        })
        .collect::<Result<_>>()?;
    let fit = |t: usize| &fits[t - 2];
    let constant_transition = is_constant(&model.log_transition);

    let mut terms = Vec::new();
    let mut value = 0.0;
    for t in 3..big_t {
        let (prev, cur) = (fit(t - 1), fit(t));
        let (transition_term, joint) = match (constant_transition, &prev.mats, &cur.mats) {
            (Some(c), _, _) => (c, None),
            (None, Some(before), Some(after)) => {
                let (tb, ta) = (&data.unary[t - 3], &data.unary[t - 2]);
                let mut cross = DMatrix::zeros(k, k);
                for n in 0..seqs.len() {
                    let (f1, f3) = (tb.row(n, 0), ta.row(n, 2));
                    for i in 0..k {
                        for j in 0..k {
                            cross[(i, j)] += f1[i] * f3[j];
                        }
                    }
                }
                cross /= seqs.len() as f64;
                let p = recover_joint(&cross, before, after, config.decomp.rank_tol)
                    .map_err(|e| Error::AtPosition { t, source: e.into() })?;
                let e: f64 = (0..k)
                    .flat_map(|i| (0..k).map(move |j| (i, j)))
                    .map(|(i, j)| p[(i, j)] * model.log_transition[i][j])
                    .sum();
                (e, Some(p.transpose().iter().copied().collect()))
            }
            _ => {
                return Err(Error::AtPosition {
                    t,
                    source: Error::IllConditioned {
                        what: "label-constant neighbor of a pair position",
                        sigma: 0.0,
                    }
                    .into(),
                })
            }
        };
        let pair = data.pair_a[t - 3]
            - prev.view_means[0]
            - prev.view_means[1]
            - transition_term
            - cur.view_means[1]
            - cur.view_means[2];
        value += pair;
        terms.push(PositionTerm {
            t,
            kind: LocalKind::Pair,
            value: pair,
            a_mean: data.pair_a[t - 3],
            lambda: cur.lambda,
            joint,
        });
    }
    for t in 3..big_t - 1 {
        let f = fit(t);
        let unary = f.a_mean - f.view_means.iter().sum::<f64>();
        value -= unary;
        terms.push(PositionTerm {
            t,
            kind: LocalKind::Unary,
            value: unary,
            a_mean: f.a_mean,
            lambda: f.lambda,
            joint: None,
        });
    }
    Ok(HmmRisk { value, terms })
}

/// The unary plug-in at 1-based `t` with labels revealed: per-view class
/// means and class frequencies in place of the decomposition.
pub fn oracle_unary_term(model: &HmmModel, data: &LabeledSequences, t: usize) -> Result<f64> {
    let seqs = &data.data;
    let k = model.k;
    if seqs.is_empty() {
        return Err(Error::Empty);
    }
    let mut sums = [DMatrix::<f64>::zeros(k, k), DMatrix::zeros(k, k), DMatrix::zeros(k, k)];
    let mut counts = vec![0.0; k];
    let mut a_total = 0.0;
    for n in 0..seqs.len() {
        let local = local_loss_views(model, seqs.sequence(n), t, LocalKind::Unary)?;
        let y = data.path(n)[t - 1];
        counts[y] += 1.0;
        a_total += local.a;
        for v in 0..VIEWS {
            for i in 0..k {
                sums[v][(i, y)] += local.f[v][i];
            }
        }
    }
    let m = seqs.len() as f64;
    let pi: Vec<f64> = counts.iter().map(|c| c / m).collect();
    let mats: Vec<DMatrix<f64>> = sums
        .iter()
        .map(|s| DMatrix::from_fn(k, k, |i, j| if counts[j] > 0.0 { s[(i, j)] / counts[j] } else { 0.0 }))
        .collect();
    crate::risk::risk_from_components(a_total / m, &mats, &pi, &(0..k).collect::<Vec<_>>())
}
