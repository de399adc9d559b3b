//! Learning from unlabeled data and a seed model.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::decomposition::{decompose_gauged, DecompConfig, Diagnostics, PlugInEstimate};
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::matching::{align_columns, assignment_gap, best_permutation, score_matrix, GAP_MAX_K};
use crate::models::{ModelKind, ViewLossModel, VIEWS};
use crate::moments::{estimate_scale_constants, ExtendedLosses, ModelLosses, ScaleConstants, TreeSum};
use crate::sample::{LabeledData, ViewData};

/// Alignment of the seed model's loss rows with the recovered latent classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedContext {
    pub theta0: Vec<f64>,
    /// `sigma0[j]`: latent column matched to loss row `j`.
    pub sigma0: Vec<usize>,
    pub gap: Option<f64>,
    /// Set when `gap` falls below the configured threshold.
    pub low_gap: bool,
    /// `M_v(θ₀)` (first `k` rows) in label order, for later alignment.
    #[serde(with = "crate::serde_mat::triple")]
    pub seed_mats: [DMatrix<f64>; VIEWS],
    pub pi: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Columns reordered so column `j` is latent column `sigma[j]`.
fn label_order(est: &PlugInEstimate, sigma: &[usize]) -> ([DMatrix<f64>; VIEWS], Vec<f64>) {
    let mats = core::array::from_fn(|v| crate::matching::permute_columns(&est.m[v], sigma));
    (mats, sigma.iter().map(|&s| est.pi[s]).collect())
}

/// Decomposes the seed model's loss vectors and matches loss rows to classes.
pub fn seed_alignment(
    data: &ViewData,
    seed: &ViewLossModel,
    config: &DecompConfig,
    gap_threshold: f64,
) -> Result<SeedContext> {
    let est = decompose_gauged(&ModelLosses::new(seed, data), seed.k(), config)?;
    let rows = est.risk_rows();
    let perm = best_permutation(&rows, &est.pi)?;
    let gap = if est.k() <= GAP_MAX_K {
        Some(assignment_gap(&score_matrix(&rows, &est.pi)?)?)
    } else {
        None
    };
    let (mats, pi) = label_order(&est, &perm.sigma);
    Ok(SeedContext {
        theta0: seed.theta().to_vec(),
        low_gap: gap.is_some_and(|g| g < gap_threshold),
        sigma0: perm.sigma,
        gap,
        seed_mats: core::array::from_fn(|v| mats[v].rows(0, seed.k()).into_owned()),
        pi,
        diagnostics: est.diagnostics,
    })
}

/// Conditional gradient matrices and the estimated mean feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMoments {
    /// `G_v`, `dk × k` in layout `(i + k·r, j)`, columns in label order.
    #[serde(with = "crate::serde_mat::triple")]
    pub g: [DMatrix<f64>; VIEWS],
    /// `M_v(θ₀)` in label order.
    #[serde(with = "crate::serde_mat::triple")]
    pub seed_mats: [DMatrix<f64>; VIEWS],
    /// `M_v(θ)` in label order, present when query losses were decomposed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_mats: Option<Vec<Vec<Vec<f64>>>>,
    pub pi: Vec<f64>,
    pub phi_hat: Vec<f64>,
    pub scale: ScaleConstants,
    pub diagnostics: Diagnostics,
}

/// `φ̂_r = Σ_j π_j Σ_v (G_v)_{j + k·r, j}`.
pub fn phi_from_parts(g: &[DMatrix<f64>; VIEWS], pi: &[f64]) -> Vec<f64> {
    let k = pi.len();
    let d = g[0].nrows() / k.max(1);
    (0..d)
        .map(|r| {
            (0..k)
                .map(|j| pi[j] * g.iter().map(|gv| gv[(j + k * r, j)]).sum::<f64>())
                .sum()
        })
        .collect()
}

impl GradientMoments {
    pub fn recompute_phi(&self) -> Vec<f64> {
        phi_from_parts(&self.g, &self.pi)
    }

    /// `Ê[A(θ)] − Σ_j π_j Σ_v M_v(θ)_{j,j}` from the query block.
    pub fn query_risk(&self, a_mean: f64) -> Option<f64> {
        let q = self.query_mats.as_ref()?;
        let k = self.pi.len();
        Some(a_mean - (0..k).map(|j| self.pi[j] * q.iter().map(|m| m[j][j]).sum::<f64>()).sum::<f64>())
    }
}

/// How the latent columns of an extended decomposition are put in label order.
#[derive(Debug, Clone, Copy)]
pub enum Alignment<'a> {
    /// Best permutation of the seed block itself.
    Match,
    /// Hungarian alignment of the seed block to a cached seed context.
    Cached(&'a SeedContext),
}

/// Splits an extended estimate into label-ordered `M(θ₀)`, `M(θ)` and `G`.
pub fn gradient_moments_from_estimate(
    est: &PlugInEstimate,
    layout: &ExtendedLosses<'_>,
    scale: ScaleConstants,
    query_losses: bool,
    alignment: Alignment<'_>,
) -> Result<GradientMoments> {
    let k = est.k();
    let seed_rows = est.risk_rows();
    let sigma = match alignment {
        Alignment::Match => best_permutation(&seed_rows, &est.pi)?.sigma,
        Alignment::Cached(ctx) => align_columns(&ctx.seed_mats, &seed_rows)?,
    };
    let (mats, pi) = label_order(est, &sigma);
    let g = core::array::from_fn(|v| layout.expand_gradient(v, &mats[v]));
    let query_mats = query_losses.then(|| {
        mats.iter()
            .map(|m| (0..k).map(|i| (0..k).map(|j| m[(k + i, j)]).collect()).collect())
            .collect()
    });
    let phi_hat = phi_from_parts(&g, &pi);
    Ok(GradientMoments {
        g,
        seed_mats: core::array::from_fn(|v| mats[v].rows(0, k).into_owned()),
        query_mats,
        pi,
        phi_hat,
        scale,
        diagnostics: est.diagnostics.clone(),
    })
}

/// `τ` from the seed's loss vectors, `B` from the query's gradients.
pub fn extended_scale(data: &ViewData, seed: &ViewLossModel, query: &ViewLossModel) -> Result<ScaleConstants> {
    let tau = estimate_scale_constants(data, seed)?.tau;
    let b = if seed.theta() == query.theta() {
        estimate_scale_constants(data, seed)?.b
    } else {
        estimate_scale_constants(data, query)?.b
    };
    Ok(ScaleConstants { tau, b })
}

/// Jointly recovers `M_v(θ₀)` and `G_v(θ)` from extended features.
pub fn estimate_mean_features(
    data: &ViewData,
    seed: &ViewLossModel,
    query: &ViewLossModel,
    config: &DecompConfig,
    query_losses: bool,
    alignment: Alignment<'_>,
) -> Result<GradientMoments> {
    let scale = extended_scale(data, seed, query)?;
    let source = ExtendedLosses::new(seed, query, data, &scale, query_losses)?;
    let est = decompose_gauged(&source, seed.k(), config)?;
    gradient_moments_from_estimate(&est, &source, scale, query_losses, alignment)
}

/// `Ê[A(θ; x)]` and its gradient.
pub fn mean_base_and_gradient(data: &ViewData, model: &ViewLossModel) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let (k, d) = (model.k(), model.d());
    let mut tree = TreeSum::new(d + 1);
    let mut scores = vec![0.0; k];
    let mut buf = vec![0.0; k];
    let mut grad = vec![0.0; k * d];
    for n in 0..data.len() {
        let x = data.sample(n);
        scores.iter_mut().for_each(|s| *s = 0.0);
        for v in 0..VIEWS {
            model.loss_vector_into(v, x[v], &mut buf)?;
            scores.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
        }
        let acc = tree.current();
        if model.is_softmax() {
            let z = log_sum_exp(&scores);
            acc[0] += z;
            let p: Vec<f64> = scores.iter().map(|s| (s - z).exp()).collect();
            for v in 0..VIEWS {
                model.grad_loss_vector_into(v, x[v], &mut grad)?;
                for (i, &pi) in p.iter().enumerate() {
                    for (a, g) in acc[1..].iter_mut().zip(&grad[i * d..(i + 1) * d]) {
                        *a += pi * g;
                    }
                }
            }
        }
        tree.commit();
    }
    let (sums, m) = tree.finish();
    let inv = 1.0 / m as f64;
    Ok((sums[0] * inv, sums[1..].iter().map(|s| s * inv).collect()))
}

/// `(1/m) Σ φ(x, y)`, the labeled mean feature `φ̄`.
pub fn labeled_mean_features(data: &LabeledData, model: &ViewLossModel) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let (k, d) = (model.k(), model.d());
    let mut tree = TreeSum::new(d);
    let mut grad = vec![0.0; k * d];
    for (n, &y) in data.labels().iter().enumerate() {
        let x = data.unlabeled().sample(n);
        let acc = tree.current();
        for v in 0..VIEWS {
            model.grad_loss_vector_into(v, x[v], &mut grad)?;
            acc.iter_mut().zip(&grad[y * d..(y + 1) * d]).for_each(|(a, g)| *a += g);
        }
        tree.commit();
    }
    let (sums, m) = tree.finish();
    Ok(sums.into_iter().map(|s| s / m as f64).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projection onto `{‖θ‖ ≤ ρ}`.
pub fn project_ball(theta: &mut [f64], rho: f64) {
    let n = norm(theta);
    if n > rho {
        let s = if n > 0.0 { rho / n } else { 0.0 };
        theta.iter_mut().for_each(|t| *t *= s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub theta: Vec<f64>,
    pub objective: f64,
    /// `‖θ − P(θ − ∇F(θ))‖` at the returned iterate.
    pub projected_gradient: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `Ê[A(θ; x)]`, its gradient and (optionally) its Hessian.
///
/// The Hessian is `Σ_n Σ_i p_i (g_i − ḡ)(g_i − ḡ)ᵀ / m` with `g_i` the summed
/// score gradient of class `i`, accumulated in blocks as `ZᵀZ`.
fn base_second_order(data: &ViewData, model: &ViewLossModel, hessian: bool) -> Result<(f64, Vec<f64>, Option<DMatrix<f64>>)> {
    const BLOCK: usize = 128;
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let (k, d) = (model.k(), model.d());
    let mut a_sum = TreeSum::new(d + 1);
    let mut h = hessian.then(|| DMatrix::<f64>::zeros(d, d));
    let mut z = DMatrix::<f64>::zeros(BLOCK * k, d);
    let mut rows = 0;
    let mut scores = vec![0.0; k];
    let mut buf = vec![0.0; k];
    let mut grad = vec![0.0; k * d];
    let mut total = vec![0.0; k * d];
    for n in 0..data.len() {
        let x = data.sample(n);
        scores.iter_mut().for_each(|s| *s = 0.0);
        total.iter_mut().for_each(|s| *s = 0.0);
        for v in 0..VIEWS {
            model.loss_vector_into(v, x[v], &mut buf)?;
            scores.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
            model.grad_loss_vector_into(v, x[v], &mut grad)?;
            total.iter_mut().zip(&grad).for_each(|(t, g)| *t += g);
        }
        let lse = log_sum_exp(&scores);
        let p: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
        let acc = a_sum.current();
        acc[0] += lse;
        for (i, &pi) in p.iter().enumerate() {
            for (a, g) in acc[1..].iter_mut().zip(&total[i * d..(i + 1) * d]) {
                *a += pi * g;
            }
        }
        if let Some(h) = h.as_mut() {
            let mean: Vec<f64> = (0..d).map(|r| (0..k).map(|i| p[i] * total[i * d + r]).sum()).collect();
            for (i, &pi) in p.iter().enumerate() {
                let w = pi.sqrt();
                for r in 0..d {
                    z[(rows, r)] = w * (total[i * d + r] - mean[r]);
                }
                rows += 1;
            }
            if rows == BLOCK * k || n + 1 == data.len() {
                let zb = z.rows(0, rows);
                h.gemm_tr(1.0, &zb, &zb, 1.0);
                rows = 0;
            }
        }
        a_sum.commit();
    }
    let (sums, m) = a_sum.finish();
    let inv = 1.0 / m as f64;
    Ok((sums[0] * inv, sums[1..].iter().map(|s| s * inv).collect(), h.map(|h| h * inv)))
}

/// Minimizer of `½θᵀHθ − bᵀθ` over `‖θ‖ ≤ ρ`: `θ(λ) = (H + λI)⁺ b` with the
/// smallest `λ ≥ 0` that keeps `θ(λ)` inside the ball.
fn ball_quadratic_step(h: &DMatrix<f64>, b: &nalgebra::DVector<f64>, rho: f64) -> nalgebra::DVector<f64> {
    let eig = h.clone().symmetric_eigen();
    let c = eig.eigenvectors.transpose() * b;
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = 1e-12 * top.max(1e-300);
    let solve = |lambda: f64| -> nalgebra::DVector<f64> {
        let coef = nalgebra::DVector::from_iterator(
            c.len(),
            c.iter().zip(eig.eigenvalues.iter()).map(|(&ci, &hi)| {
                let den = hi.max(0.0) + lambda;
                if den > floor {
                    ci / den
                } else {
                    0.0
                }
            }),
        );
        &eig.eigenvectors * coef
    };
    // a linear direction of the model (null curvature, nonzero slope) forces λ > 0
    let unbounded = c
        .iter()
        .zip(eig.eigenvalues.iter())
        .any(|(&ci, &hi)| hi <= floor && ci.abs() > 1e-12 * b.norm().max(1e-300));
    if !unbounded {
        let t = solve(0.0);
        if t.norm() <= rho {
            return t;
        }
    }
    let (mut lo, mut hi) = (0.0, b.norm() / rho.max(1e-300) + top);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if solve(mid).norm() > rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let mut t = solve(hi);
    let n = t.norm();
    if n > rho {
        t *= rho / n;
    }
    t
}

/// `min_{‖θ‖ ≤ ρ} Ê[A(θ; x)] − θᵀφ` by projected Newton: each step minimizes
/// the local quadratic model over the ball exactly, then backtracks (Armijo).
/// Starts from `model.theta()` projected onto the ball.
pub fn constrained_minimizer(
    data: &ViewData,
    model: &ViewLossModel,
    phi: &[f64],
    rho: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SolveOutcome> {
    if phi.len() != model.d() {
        return Err(Error::Dimension {
            what: "mean feature",
            expected: model.d(),
            got: phi.len(),
        });
    }
    if !model.is_softmax() {
        return Err(Error::Unsupported("constrained solver needs a softmax model".into()));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidInput("rho must be non-negative".into()));
    }
    let lin = |theta: &[f64]| theta.iter().zip(phi).map(|(t, p)| t * p).sum::<f64>();
    let value = |theta: &[f64]| -> Result<f64> {
        Ok(crate::risk::mean_base_term(data, &model.with_theta(theta.to_vec())?)? - lin(theta))
    };
    let stationarity = |theta: &[f64], g: &[f64]| {
        let mut step: Vec<f64> = theta.iter().zip(g).map(|(t, gi)| t - gi).collect();
        project_ball(&mut step, rho);
        step.iter().zip(theta).map(|(s, t)| (s - t).powi(2)).sum::<f64>().sqrt()
    };

    let mut theta = model.theta().to_vec();
    project_ball(&mut theta, rho);
    let mut flat = 0usize;
    for it in 0..max_iter {
        let (a, mut g, h) = base_second_order(data, &model.with_theta(theta.clone())?, true)?;
        g.iter_mut().zip(phi).for_each(|(gi, p)| *gi -= p);
        let f = a - lin(&theta);
        let s = stationarity(&theta, &g);
        if s <= tol {
            return Ok(SolveOutcome {
                theta,
                objective: f,
                projected_gradient: s,
                iterations: it,
                converged: true,
            });
        }
        let h = h.expect("hessian requested");
        let th = nalgebra::DVector::from_column_slice(&theta);
        let b = &h * &th - nalgebra::DVector::from_column_slice(&g);
        let target = ball_quadratic_step(&h, &b, rho);
        let mut dir: Vec<f64> = target.iter().zip(&theta).map(|(t, c)| t - c).collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            // fall back to the projected gradient direction
            let mut pg: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - gi).collect();
            project_ball(&mut pg, rho);
            dir = pg.iter().zip(&theta).map(|(p, t)| p - t).collect();
            slope = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let fc = value(&cand)?;
            if fc <= f + 1e-4 * step * slope {
                theta = cand;
                moved = true;
                // decreases at rounding level: the precision floor is reached
                if f - fc <= 4.0 * f64::EPSILON * (1.0 + f.abs()) {
                    flat += 1;
                } else {
                    flat = 0;
                }
                break;
            }
            step *= 0.5;
        }
        if !moved || flat >= 3 {
            // no decrease representable at this precision
            return Ok(SolveOutcome {
                theta,
                objective: f,
                projected_gradient: s,
                iterations: it + 1,
                converged: false,
            });
        }
        let n = norm(&theta);
        if n > rho {
            theta.iter_mut().for_each(|t| *t *= rho / n);
        }
    }
    let (a, mut g) = mean_base_and_gradient(data, &model.with_theta(theta.clone())?)?;
    g.iter_mut().zip(phi).for_each(|(gi, p)| *gi -= p);
    let s = stationarity(&theta, &g);
    Ok(SolveOutcome {
        converged: s <= tol,
        objective: a - lin(&theta),
        projected_gradient: s,
        theta,
        iterations: max_iter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    /// `ℓ²` radius `ρ`.
    pub rho: f64,
    /// Dual-averaging step size `η`.
    pub eta: f64,
    /// Dual-averaging iterations.
    pub steps: usize,
    /// Samples per gradient estimate; the whole sample when unset.
    pub samples_per_step: Option<usize>,
    pub seed: u64,
    /// First-order tolerance of the logistic solver.
    pub tol: f64,
    pub max_iter: usize,
    /// Align each step to the seed context instead of re-matching the seed block.
    pub cache_seed_block: bool,
    /// Warn when `gap(θ₀)` is below this.
    pub gap_threshold: f64,
    pub decomp: DecompConfig,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            rho: 10.0,
            eta: 0.1,
            steps: 50,
            samples_per_step: None,
            seed: 0,
            tol: 1e-6,
            max_iter: 200,
            cache_seed_block: false,
            gap_threshold: 1e-3,
            decomp: DecompConfig::default(),
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !(self.eta > 0.0) || self.steps == 0 {
            return Err(Error::InvalidInput("need rho > 0, eta > 0 and at least one step".into()));
        }
        if self.samples_per_step == Some(0) {
            return Err(Error::InvalidInput("samples_per_step must be positive".into()));
        }
        self.decomp.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticOutcome {
    pub solve: SolveOutcome,
    pub moments: GradientMoments,
    pub seed: SeedContext,
}

/// Estimates `φ̂` once at `θ₀` and solves the constrained logistic problem.
pub fn learn_logistic(data: &ViewData, seed: &ViewLossModel, config: &LearnConfig) -> Result<LogisticOutcome> {
    config.validate()?;
    if seed.kind() != ModelKind::Logistic {
        return Err(Error::Unsupported("learn_logistic needs a logistic model".into()));
    }
    let decomp = DecompConfig {
        seed: config.seed,
        ..config.decomp.clone()
    };
    let ctx = seed_alignment(data, seed, &decomp, config.gap_threshold)?;
    let alignment = if config.cache_seed_block {
        Alignment::Cached(&ctx)
    } else {
        Alignment::Match
    };
    let moments = estimate_mean_features(data, seed, seed, &decomp, false, alignment)?;
    let solve = constrained_minimizer(data, seed, &moments.phi_hat, config.rho, config.tol, config.max_iter)?;
    Ok(LogisticOutcome {
        solve,
        moments,
        seed: ctx,
    })
}

/// One gradient estimate of the risk at `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStep {
    pub gradient: Vec<f64>,
    pub risk: Option<f64>,
}

/// Supplies `∇R(θ)` estimates to [`learn_general`].
pub trait GradientEstimator {
    fn gradient(&mut self, step: usize, theta: &[f64]) -> Result<GradientStep>;
}

/// Per-step record of the learning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub gradient_norm: f64,
    pub skipped: bool,
    pub estimated_risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralOutcome {
    /// `(θ⁽¹⁾ + … + θ⁽ᵀ⁾) / T`.
    pub theta: Vec<f64>,
    pub steps: Vec<StepLog>,
}

/// Dual averaging: `θ⁽ᵗ⁾ = P_ρ(θ₀ + ηz)`, `z ← z − ĝ(θ⁽ᵗ⁾)`.
///
/// A failed estimate is logged as skipped and the previous gradient is reused.
pub fn learn_general(
    theta0: &[f64],
    config: &LearnConfig,
    estimator: &mut dyn GradientEstimator,
    mut on_step: impl FnMut(&StepLog),
) -> Result<GeneralOutcome> {
    config.validate()?;
    let d = theta0.len();
    let mut z = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut last: Option<Vec<f64>> = None;
    let mut steps = Vec::with_capacity(config.steps);
    for t in 1..=config.steps {
        let mut theta: Vec<f64> = theta0.iter().zip(&z).map(|(a, b)| a + config.eta * b).collect();
        project_ball(&mut theta, config.rho);
        let (g, skipped, risk) = match estimator.gradient(t, &theta) {
            Ok(step) => (step.gradient, false, step.risk),
            Err(e) if e.is_numerical() => (last.clone().unwrap_or_else(|| vec![0.0; d]), true, None),
            Err(e) => return Err(e),
        };
        if g.len() != d {
            return Err(Error::Dimension {
                what: "gradient",
                expected: d,
                got: g.len(),
            });
        }
        z.iter_mut().zip(&g).for_each(|(zi, gi)| *zi -= gi);
        avg.iter_mut().zip(&theta).for_each(|(a, th)| *a += th);
        let log = StepLog {
            t,
            gradient_norm: norm(&g),
            skipped,
            estimated_risk: risk,
        };
        on_step(&log);
        steps.push(log);
        last = Some(g);
    }
    let inv = 1.0 / config.steps as f64;
    Ok(GeneralOutcome {
        theta: avg.into_iter().map(|a| a * inv).collect(),
        steps,
    })
}

/// Gradient estimates from extended-feature decompositions on unlabeled data.
pub struct MomentGradient<'a> {
    data: &'a ViewData,
    seed: &'a ViewLossModel,
    config: LearnConfig,
    context: Option<SeedContext>,
}

impl<'a> MomentGradient<'a> {
    pub fn new(data: &'a ViewData, seed: &'a ViewLossModel, config: &LearnConfig) -> Result<Self> {
        config.validate()?;
        let context = if config.cache_seed_block {
            Some(seed_alignment(data, seed, &config.decomp, config.gap_threshold)?)
        } else {
            None
        };
        Ok(MomentGradient {
            data,
            seed,
            config: config.clone(),
            context,
        })
    }

    fn window(&self, step: usize) -> ViewData {
        match self.config.samples_per_step {
            Some(b) if b < self.data.len() => {
                let start = ((step - 1) * b) % self.data.len();
                let end = (start + b).min(self.data.len());
                self.data.slice(start..end)
            }
            _ => self.data.clone(),
        }
    }
}

impl GradientEstimator for MomentGradient<'_> {
    fn gradient(&mut self, step: usize, theta: &[f64]) -> Result<GradientStep> {
        let data = self.window(step);
        let query = self.seed.with_theta(theta.to_vec())?;
        let decomp = DecompConfig {
            seed: self.config.seed.wrapping_add(step as u64),
            ..self.config.decomp.clone()
        };
        let alignment = match &self.context {
            Some(ctx) => Alignment::Cached(ctx),
            None => Alignment::Match,
        };
        let moments = estimate_mean_features(&data, self.seed, &query, &decomp, true, alignment)?;
        let (a_mean, grad_a) = mean_base_and_gradient(&data, &query)?;
        Ok(GradientStep {
            gradient: grad_a.iter().zip(&moments.phi_hat).map(|(a, p)| a - p).collect(),
            risk: moments.query_risk(a_mean),
        })
    }
}

/// Exact labeled gradients `∇R(θ) = Ê[∇A] − φ̄`, for oracle comparisons.
pub struct LabeledGradient<'a> {
    data: &'a LabeledData,
    template: &'a ViewLossModel,
}

impl<'a> LabeledGradient<'a> {
    pub fn new(data: &'a LabeledData, template: &'a ViewLossModel) -> Self {
        LabeledGradient { data, template }
    }
}

impl GradientEstimator for LabeledGradient<'_> {
    fn gradient(&mut self, _step: usize, theta: &[f64]) -> Result<GradientStep> {
        let model = self.template.with_theta(theta.to_vec())?;
        let (_, grad_a) = mean_base_and_gradient(self.data.unlabeled(), &model)?;
        let phi = labeled_mean_features(self.data, &model)?;
        Ok(GradientStep {
            gradient: grad_a.iter().zip(&phi).map(|(a, p)| a - p).collect(),
            risk: Some(crate::risk::labeled_risk(self.data, &model)?),
        })
    }
}

/// Boxed estimator, for callers choosing the source at run time.
pub type DynEstimator<'a> = Box<dyn GradientEstimator + 'a>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_multiview, MultiviewConfig};
    use crate::decomposition::decompose_moments;
    use crate::models::separate_offsets;
    use crate::moments::{LossSource, PopulationModel};
    use crate::risk::labeled_risk;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logistic(k: usize, dims: [usize; 3], seed: u64, scale: f64) -> ViewLossModel {
        let (_, d) = separate_offsets(k, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        ViewLossModel::logistic(k, dims, theta).unwrap()
    }

    fn config(k: usize) -> MultiviewConfig {
        let mut c = MultiviewConfig::new(k, [4, 4, 4]);
        c.pi = match k {
            2 => vec![0.4, 0.6],
            _ => vec![0.25, 0.35, 0.4],
        };
        c.mean_scale = 1.5;
        c.noise = 0.5;
        c
    }

    /// The class-mean-trained model: block `(v, i)` holds `μ_{v,i}`.
    fn mean_model(c: &MultiviewConfig) -> ViewLossModel {
        let means = c.class_means();
        let theta = (0..3).flat_map(|v| means[v].iter().flatten().copied()).collect();
        ViewLossModel::logistic(c.k, c.dims, theta).unwrap()
    }

    #[test]
    fn dual_averaging_closed_form() {
        struct Fixed(Vec<f64>);
        impl GradientEstimator for Fixed {
            fn gradient(&mut self, _: usize, _: &[f64]) -> Result<GradientStep> {
                Ok(GradientStep {
                    gradient: self.0.clone(),
                    risk: None,
                })
            }
        }
        let cfg = LearnConfig {
            eta: 0.1,
            steps: 2,
            rho: 100.0,
            ..Default::default()
        };
        // z after step 1 is (1, −2), so θ⁽²⁾ = (0.1, −0.2)
        let out = learn_general(&[0.0, 0.0], &cfg, &mut Fixed(vec![-1.0, 2.0]), |_| {}).unwrap();
        assert!((out.theta[0] - 0.05).abs() < 1e-15 && (out.theta[1] + 0.1).abs() < 1e-15);
        let zero = learn_general(&[0.3, -0.4], &cfg, &mut Fixed(vec![0.0, 0.0]), |_| {}).unwrap();
        assert_eq!(zero.theta, vec![0.3, -0.4]);
        let none = LearnConfig { steps: 0, ..cfg };
        assert!(learn_general(&[7.0, 8.0], &none, &mut Fixed(vec![1.0, 1.0]), |_| {}).is_err());
    }

    #[test]
    fn failed_steps_reuse_previous_gradient() {
        struct Flaky(usize);
        impl GradientEstimator for Flaky {
            fn gradient(&mut self, step: usize, _: &[f64]) -> Result<GradientStep> {
                self.0 += 1;
                if step == 2 {
                    return Err(Error::AmplificationFailed);
                }
                Ok(GradientStep {
                    gradient: vec![-1.0],
                    risk: None,
                })
            }
        }
        let cfg = LearnConfig {
            eta: 1.0,
            steps: 3,
            rho: 100.0,
            ..Default::default()
        };
        let out = learn_general(&[0.0], &cfg, &mut Flaky(0), |_| {}).unwrap();
        assert!(out.steps[1].skipped && !out.steps[0].skipped);
        assert_eq!(out.theta, vec![(0.0 + 1.0 + 2.0) / 3.0]);
    }

    #[test]
    fn oracle_loop_is_reproducible() {
        let c = config(2);
        let data = gen_multiview(&c, 400, 1).unwrap();
        let model = logistic(2, c.dims, 0, 0.0);
        let cfg = LearnConfig {
            steps: 5,
            ..Default::default()
        };
        let a = learn_general(model.theta(), &cfg, &mut LabeledGradient::new(&data, &model), |_| {}).unwrap();
        // the same loop written out by hand
        let mut z = vec![0.0; model.d()];
        let mut avg = vec![0.0; model.d()];
        for _ in 0..5 {
            let mut theta: Vec<f64> = model.theta().iter().zip(&z).map(|(a, b)| a + 0.1 * b).collect();
            project_ball(&mut theta, 10.0);
            let m = model.with_theta(theta.clone()).unwrap();
            let (_, ga) = mean_base_and_gradient(data.unlabeled(), &m).unwrap();
            let phi = labeled_mean_features(&data, &m).unwrap();
            z.iter_mut().zip(ga.iter().zip(&phi)).for_each(|(zi, (g, p))| *zi -= g - p);
            avg.iter_mut().zip(&theta).for_each(|(a, t)| *a += t);
        }
        let b: Vec<f64> = avg.into_iter().map(|a| a * (1.0 / 5.0)).collect();
        assert_eq!(a.theta, b);
        assert!(a.steps.iter().all(|s| s.estimated_risk.is_some()));
    }

    #[test]
    fn projection_and_tiny_ball() {
        let mut t = vec![3.0, 4.0];
        project_ball(&mut t, 1.0);
        assert!((t[0] - 0.6).abs() < 1e-15 && (t[1] - 0.8).abs() < 1e-15);
        let c = config(2);
        let data = gen_multiview(&c, 200, 2).unwrap();
        let model = logistic(2, c.dims, 1, 1.0);
        let phi = labeled_mean_features(&data, &model).unwrap();
        let out = constrained_minimizer(data.unlabeled(), &model, &phi, 1e-12, 1e-6, 100).unwrap();
        assert!(norm(&out.theta) <= 1e-12 * (1.0 + 1e-9));
    }

    #[test]
    fn labeled_solver_reaches_tolerance() {
        let c = config(3);
        let data = gen_multiview(&c, 2000, 3).unwrap();
        let model = logistic(3, c.dims, 0, 0.0);
        let phi = labeled_mean_features(&data, &model).unwrap();
        for rho in [0.5, 10.0] {
            let out = constrained_minimizer(data.unlabeled(), &model, &phi, rho, 1e-6, 20_000).unwrap();
            assert!(out.converged, "rho {rho}: {}", out.projected_gradient);
            assert!(norm(&out.theta) <= rho + 1e-12);
            // objective equals labeled risk at the solution
            let risk = labeled_risk(&data, &model.with_theta(out.theta.clone()).unwrap()).unwrap();
            assert!((risk - out.objective).abs() < 1e-10);
        }
    }

    /// Population extended moments: features are linear in `x`, so the class
    /// conditional mean of `h′` is `h′` evaluated at the class mean.
    fn population_extended(c: &MultiviewConfig, seed: &ViewLossModel, query: &ViewLossModel) -> (PlugInEstimate, GradientMoments) {
        let means = c.class_means();
        let views: [Vec<f64>; 3] = core::array::from_fn(|v| means[v].iter().flatten().copied().collect());
        let at_means = ViewData::new(c.dims, views).unwrap();
        let scale = ScaleConstants { tau: 1.0, b: 2.0 };
        let layout = ExtendedLosses::new(seed, query, &at_means, &scale, false).unwrap();
        let dims = layout.dims();
        let mats: [DMatrix<f64>; 3] = core::array::from_fn(|v| {
            let mut m = DMatrix::zeros(dims[v], c.k);
            for j in 0..c.k {
                let mut col = vec![0.0; dims[v]];
                layout.fill(j, v, &mut col).unwrap();
                m.set_column(j, &nalgebra::DVector::from_vec(col));
            }
            m
        });
        let pop = PopulationModel::new(mats, c.pi.clone()).unwrap();
        let moments = pop.moments(1, 64);
        let est = decompose_moments(&moments, Some(&pop), c.k, &DecompConfig::default()).unwrap();
        let gm = gradient_moments_from_estimate(&est, &layout, scale, false, Alignment::Match).unwrap();
        (est, gm)
    }

    #[test]
    fn exact_extended_moments_recover_phi() {
        for k in [2, 3] {
            let c = config(k);
            let seed = mean_model(&c);
            let query = logistic(k, c.dims, 5, 1.0);
            let (_, gm) = population_extended(&c, &seed, &query);
            // φ̄ block (v, i) is π_i μ_{v,i}
            let means = c.class_means();
            let (offsets, _) = separate_offsets(k, c.dims);
            for v in 0..3 {
                for i in 0..k {
                    for (r, mu) in means[v][i].iter().enumerate() {
                        let idx = offsets[v] + i * c.dims[v] + r;
                        assert!((gm.phi_hat[idx] - c.pi[i] * mu).abs() < 1e-5);
                        for j in 0..k {
                            let want = means[v][j][r];
                            assert!((gm.g[v][(i + k * idx, j)] - want).abs() < 1e-5);
                        }
                    }
                }
            }
            let again = gm.recompute_phi();
            assert!(again.iter().zip(&gm.phi_hat).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }

    #[test]
    fn constant_features_give_constant_gradient_rows() {
        // one parameter per view shared across classes via a custom scorer
        struct Shared;
        impl crate::models::ViewScorer for Shared {
            fn scores(&self, v: usize, theta: &[f64], _x: &[f64], out: &mut [f64]) {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = theta[0] * (i + v) as f64;
                }
            }
            fn gradient(&self, v: usize, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (i + v + 1) as f64;
                }
            }
        }
        let c = config(2);
        let seed = mean_model(&c);
        let query = ViewLossModel::with_scorer(2, c.dims, vec![0.3], alloc::sync::Arc::new(Shared)).unwrap();
        let seed_small = mean_model(&c);
        let _ = seed_small;
        let data = gen_multiview(&c, 10, 0).unwrap();
        let scale = ScaleConstants { tau: 1.0, b: 1.0 };
        // shapes differ (d), so the extended source must refuse the pair
        assert!(ExtendedLosses::new(&seed, &query, data.unlabeled(), &scale, false).is_err());
        let seed1 = query.clone();
        let means = c.class_means();
        let views: [Vec<f64>; 3] = core::array::from_fn(|v| means[v].iter().flatten().copied().collect());
        let at_means = ViewData::new(c.dims, views).unwrap();
        let layout = ExtendedLosses::new(&seed1, &query, &at_means, &scale, false).unwrap();
        let mut col = vec![0.0; layout.dims()[1]];
        layout.fill(0, 1, &mut col).unwrap();
        // view 1: (G)_{i + k·0, ·} = c_i = i + 2
        let g = layout.expand_gradient(1, &DMatrix::from_fn(col.len(), 2, |r, _| col[r]));
        for j in 0..2 {
            assert_eq!(g[(0, j)], 2.0);
            assert_eq!(g[(1, j)], 3.0);
        }
    }

    fn true_class_of_columns(data: &LabeledData, model: &ViewLossModel, ctx: &SeedContext) -> Vec<usize> {
        // labeled conditional loss means, columns by true class
        let k = model.k();
        let mut sums = [DMatrix::<f64>::zeros(k, k), DMatrix::zeros(k, k), DMatrix::zeros(k, k)];
        let mut counts = vec![0.0; k];
        for (n, &y) in data.labels().iter().enumerate() {
            counts[y] += 1.0;
            for v in 0..3 {
                let h = model.loss_vector(v, data.unlabeled().sample(n)[v]).unwrap();
                for i in 0..k {
                    sums[v][(i, y)] += h.values[i];
                }
            }
        }
        let oracle: [DMatrix<f64>; 3] = core::array::from_fn(|v| DMatrix::from_fn(k, k, |i, j| sums[v][(i, j)] / counts[j]));
        // column a of the label-ordered seed block is the true class perm[a]
        align_columns(&ctx.seed_mats, &oracle)
            .map(|p| crate::matching::Permutation { sigma: p, value: 0.0 }.inverse())
            .unwrap()
    }

    #[test]
    fn seed_alignment_detects_swaps() {
        let c = config(3);
        let data = gen_multiview(&c, 20_000, 4).unwrap();
        let good = mean_model(&c);
        let ctx = seed_alignment(data.unlabeled(), &good, &DecompConfig::default(), 1e-3).unwrap();
        assert_eq!(true_class_of_columns(&data, &good, &ctx), vec![0, 1, 2]);
        assert!(!ctx.low_gap && ctx.gap.unwrap() > 0.0);

        // swap the parameter blocks of classes 0 and 1 in every view
        let mut theta = good.theta().to_vec();
        let (offsets, _) = separate_offsets(3, c.dims);
        for v in 0..3 {
            for r in 0..c.dims[v] {
                theta.swap(offsets[v] + r, offsets[v] + c.dims[v] + r);
            }
        }
        let swapped = good.with_theta(theta).unwrap();
        let ctx = seed_alignment(data.unlabeled(), &swapped, &DecompConfig::default(), 1e-3).unwrap();
        assert_eq!(true_class_of_columns(&data, &swapped, &ctx), vec![1, 0, 2]);
    }

    #[test]
    fn symmetric_seed_has_no_gap() {
        let c = config(2);
        let data = gen_multiview(&c, 5000, 5).unwrap();
        // identical class blocks: every loss vector is label-constant
        let mut theta = mean_model(&c).theta().to_vec();
        let (offsets, _) = separate_offsets(2, c.dims);
        for v in 0..3 {
            for r in 0..c.dims[v] {
                theta[offsets[v] + c.dims[v] + r] = theta[offsets[v] + r] + 1e-9;
            }
        }
        let model = ViewLossModel::logistic(2, c.dims, theta).unwrap();
        match seed_alignment(data.unlabeled(), &model, &DecompConfig::default(), 1e-3) {
            Ok(ctx) => assert!(ctx.low_gap && ctx.gap.unwrap() < 1e-3),
            Err(e) => assert!(e.is_numerical()),
        }
    }

    #[test]
    fn learned_phi_matches_labeled_means() {
        let c = config(3);
        let data = gen_multiview(&c, 20_000, 6).unwrap();
        let seed = mean_model(&c);
        let gm = estimate_mean_features(data.unlabeled(), &seed, &seed, &DecompConfig::default(), false, Alignment::Match).unwrap();
        let phi = labeled_mean_features(&data, &seed).unwrap();
        let worst = gm.phi_hat.iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 0.1, "{worst}");
    }

    #[test]
    fn oracle_phi_gives_labeled_minimizer() {
        let c = config(3);
        let data = gen_multiview(&c, 3000, 7).unwrap();
        let model = logistic(3, c.dims, 0, 0.0);
        let phi = labeled_mean_features(&data, &model).unwrap();
        let a = constrained_minimizer(data.unlabeled(), &model, &phi, 10.0, 1e-8, 50_000).unwrap();
        let b = constrained_minimizer(data.unlabeled(), &logistic(3, c.dims, 9, 0.3), &phi, 10.0, 1e-8, 50_000).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn perturbed_features_bound(seed in 0u64..1000, eps in prop::sample::select(vec![0.01, 0.1])) {
            let c = config(2);
            let data = gen_multiview(&c, 300, seed).unwrap();
            let model = logistic(2, c.dims, 0, 0.0);
            let rho = 10.0;
            let phi = labeled_mean_features(&data, &model).unwrap();
            let best = constrained_minimizer(data.unlabeled(), &model, &phi, rho, 1e-9, 500).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut delta: Vec<f64> = (0..phi.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&delta);
            delta.iter_mut().for_each(|x| *x *= eps / n);
            let noisy: Vec<f64> = phi.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let out = constrained_minimizer(data.unlabeled(), &model, &noisy, rho, 1e-9, 500).unwrap();
            let r_hat = labeled_risk(&data, &model.with_theta(out.theta).unwrap()).unwrap();
            prop_assert!(r_hat <= best.objective + 2.0 * eps * rho + 1e-6);
        }
    }
}
