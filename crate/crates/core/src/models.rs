//! View-decomposed losses `L(θ; x, y) = A(θ; x) − Σ_v f_v(θ; x_v, y)`.
//!
//! Three families are built in:
//!
//! * **logistic**: `f_v = θᵀφ_v(x_v, y)` with `A` the log-partition function.
//! * **modified hinge**: `−f_v` is a per-view multiclass hinge loss and `A ≡ 0`.
//! * **additive scorer**: per-view score tables summed and passed through a
//!   softmax; `A` is again the log-partition function.
//!
//! Linear features use dense per-class blocks: `φ_v(x_v, i)` places `x_v` at
//! `θ[offset_v + i·D_v .. offset_v + (i+1)·D_v]` and is zero elsewhere.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, softmax_into};

/// Number of conditionally independent views.
pub const VIEWS: usize = 3;

/// One sample split into its three views.
pub type Views<'a> = [&'a [f64]; VIEWS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Logistic,
    ModifiedHinge,
    AdditiveScorer,
}

/// How per-view class scores are produced from `θ` and `x_v`.
#[derive(Clone)]
pub enum Scorer {
    /// `θ_blockᵀ x_v`.
    Linear,
    /// `x_v = [s]` is a symbol index and the score is `θ[offset_v + s·k + i]`.
    Table,
    Custom(Arc<dyn ViewScorer>),
}

impl fmt::Debug for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scorer::Linear => f.write_str("Linear"),
            Scorer::Table => f.write_str("Table"),
            Scorer::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A user-supplied per-view score function, differentiable in `θ`.
pub trait ViewScorer: Send + Sync {
    /// Writes the `k` class scores of view `v` into `out`.
    fn scores(&self, v: usize, theta: &[f64], x_v: &[f64], out: &mut [f64]);

    /// Writes `∂ score_i / ∂θ_r` into `out[i * d + r]`.
    fn gradient(&self, v: usize, theta: &[f64], x_v: &[f64], out: &mut [f64]);
}

/// The loss vector `h_v(x_v) = (f_v(θ; x_v, i))_{i=1..k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub view: usize,
    pub values: Vec<f64>,
}

/// Serializable description of a built-in model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    pub k: usize,
    pub d: usize,
    /// Input dimension of each view (for table scorers: the symbol count).
    pub view_dims: [usize; VIEWS],
    /// Start of each view's parameter block inside `θ`.
    pub view_offsets: [usize; VIEWS],
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ViewLossModel {
    kind: ModelKind,
    k: usize,
    d: usize,
    view_dims: [usize; VIEWS],
    view_offsets: [usize; VIEWS],
    theta: Vec<f64>,
    scorer: Scorer,
}

/// Offsets for views with their own parameter blocks, and the resulting `d`.
pub fn separate_offsets(k: usize, view_dims: [usize; VIEWS]) -> ([usize; VIEWS], usize) {
    let mut offsets = [0; VIEWS];
    let mut next = 0;
    for v in 0..VIEWS {
        offsets[v] = next;
        next += k * view_dims[v];
    }
    (offsets, next)
}

/// Builds one of the built-in families from its descriptor fields.
///
/// `ModelKind::AdditiveScorer` built this way uses [`Scorer::Table`].
pub fn build_builtin_model(
    kind: ModelKind,
    k: usize,
    view_dims: [usize; VIEWS],
    view_offsets: [usize; VIEWS],
    theta: Vec<f64>,
) -> Result<ViewLossModel> {
    let d = theta.len();
    let scorer = match kind {
        ModelKind::Logistic | ModelKind::ModifiedHinge => Scorer::Linear,
        ModelKind::AdditiveScorer => Scorer::Table,
    };
    let model = ViewLossModel {
        kind,
        k,
        d,
        view_dims,
        view_offsets,
        theta,
        scorer,
    };
    model.validate()?;
    Ok(model)
}

impl ViewLossModel {
    pub fn from_descriptor(desc: &ModelDescriptor) -> Result<Self> {
        if desc.theta.len() != desc.d {
            return Err(Error::Dimension {
                what: "theta",
                expected: desc.d,
                got: desc.theta.len(),
            });
        }
        build_builtin_model(
            desc.kind,
            desc.k,
            desc.view_dims,
            desc.view_offsets,
            desc.theta.clone(),
        )
    }

    /// Logistic model with one parameter block per view.
    pub fn logistic(k: usize, view_dims: [usize; VIEWS], theta: Vec<f64>) -> Result<Self> {
        let (offsets, _) = separate_offsets(k, view_dims);
        build_builtin_model(ModelKind::Logistic, k, view_dims, offsets, theta)
    }

    /// Additive-scorer model backed by a custom score function.
    pub fn with_scorer(
        k: usize,
        view_dims: [usize; VIEWS],
        theta: Vec<f64>,
        scorer: Arc<dyn ViewScorer>,
    ) -> Result<Self> {
        let model = ViewLossModel {
            kind: ModelKind::AdditiveScorer,
            k,
            d: theta.len(),
            view_dims,
            view_offsets: [0; VIEWS],
            theta,
            scorer: Scorer::Custom(scorer),
        };
        model.validate()?;
        Ok(model)
    }

    /// Descriptor for built-in scorers; `None` for custom score functions.
    pub fn descriptor(&self) -> Option<ModelDescriptor> {
        if matches!(self.scorer, Scorer::Custom(_)) {
            return None;
        }
        Some(ModelDescriptor {
            kind: self.kind,
            k: self.k,
            d: self.d,
            view_dims: self.view_dims,
            view_offsets: self.view_offsets,
            theta: self.theta.clone(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidInput(alloc::format!(
                "need at least 2 classes, got {}",
                self.k
            )));
        }
        if let Some(i) = self.theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                context: "theta",
                index: i,
            });
        }
        let block = |v: usize| match self.scorer {
            Scorer::Linear | Scorer::Table => self.view_offsets[v] + self.k * self.view_dims[v],
            Scorer::Custom(_) => 0,
        };
        for v in 0..VIEWS {
            if block(v) > self.d {
                return Err(Error::Dimension {
                    what: "parameter block",
                    expected: block(v),
                    got: self.d,
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }
    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }
    #[inline]
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    #[inline]
    pub fn view_dims(&self) -> [usize; VIEWS] {
        self.view_dims
    }
    #[inline]
    pub fn view_offsets(&self) -> [usize; VIEWS] {
        self.view_offsets
    }

    /// Expected length of the raw input of view `v`.
    pub fn input_dim(&self, v: usize) -> usize {
        match self.scorer {
            Scorer::Table => 1,
            _ => self.view_dims[v],
        }
    }

    /// Same model at different parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.d {
            return Err(Error::Dimension {
                what: "theta",
                expected: self.d,
                got: theta.len(),
            });
        }
        let mut m = self.clone();
        m.theta = theta;
        m.validate()?;
        Ok(m)
    }

    /// True when `A` is a log-partition function (logistic and additive scorers).
    pub fn is_softmax(&self) -> bool {
        !matches!(self.kind, ModelKind::ModifiedHinge)
    }

    fn check_view(&self, v: usize, x_v: &[f64]) -> Result<()> {
        if v >= VIEWS {
            return Err(Error::InvalidInput(alloc::format!("view index {v} out of range")));
        }
        let want = self.input_dim(v);
        if x_v.len() != want {
            return Err(Error::Dimension {
                what: "view input",
                expected: want,
                got: x_v.len(),
            });
        }
        if let Some(i) = x_v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "view input",
                index: i,
            });
        }
        Ok(())
    }

    fn table_row(&self, v: usize, x_v: &[f64]) -> Result<usize> {
        let s = x_v[0];
        if s < 0.0 || s.fract() != 0.0 || s as usize >= self.view_dims[v] {
            return Err(Error::InvalidInput(alloc::format!(
                "symbol {s} out of range for view {v}"
            )));
        }
        Ok(s as usize)
    }

    /// Raw per-view class scores `s_v(x_v, ·)`.
    fn scores_into(&self, v: usize, x_v: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.scorer {
            Scorer::Linear => {
                let dv = self.view_dims[v];
                for (i, o) in out.iter_mut().enumerate() {
                    let start = self.view_offsets[v] + i * dv;
                    *o = self.theta[start..start + dv]
                        .iter()
                        .zip(x_v)
                        .map(|(t, x)| t * x)
                        .sum();
                }
            }
            Scorer::Table => {
                let s = self.table_row(v, x_v)?;
                let start = self.view_offsets[v] + s * self.k;
                out.copy_from_slice(&self.theta[start..start + self.k]);
            }
            Scorer::Custom(sc) => sc.scores(v, &self.theta, x_v, out),
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "class scores",
                index: v,
            });
        }
        Ok(())
    }

    /// Writes `∂ s_v(x_v, i) / ∂θ` into `out[i * d ..]` (row-major `k × d`).
    fn score_gradient_into(&self, v: usize, x_v: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        let d = self.d;
        match &self.scorer {
            Scorer::Linear => {
                let dv = self.view_dims[v];
                for i in 0..self.k {
                    let start = self.view_offsets[v] + i * dv;
                    out[i * d + start..i * d + start + dv].copy_from_slice(x_v);
                }
            }
            Scorer::Table => {
                let s = self.table_row(v, x_v)?;
                for i in 0..self.k {
                    out[i * d + self.view_offsets[v] + s * self.k + i] = 1.0;
                }
            }
            Scorer::Custom(sc) => sc.gradient(v, &self.theta, x_v, out),
        }
        Ok(())
    }

    /// Writes `h_v(x_v)` into `out` (length `k`).
    pub fn loss_vector_into(&self, v: usize, x_v: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_view(v, x_v)?;
        if out.len() != self.k {
            return Err(Error::Dimension {
                what: "loss vector",
                expected: self.k,
                got: out.len(),
            });
        }
        self.scores_into(v, x_v, out)?;
        if self.kind == ModelKind::ModifiedHinge {
            let scores: Vec<f64> = out.to_vec();
            for (i, o) in out.iter_mut().enumerate() {
                let rival = scores
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &s)| s)
                    .fold(f64::NEG_INFINITY, f64::max);
                *o = -(1.0 + rival - scores[i]).max(0.0);
            }
        }
        Ok(())
    }

    pub fn loss_vector(&self, v: usize, x_v: &[f64]) -> Result<LossVector> {
        let mut values = vec![0.0; self.k];
        self.loss_vector_into(v, x_v, &mut values)?;
        Ok(LossVector { view: v, values })
    }

    /// Σ_v h_v(x_v), the summed per-class terms.
    pub fn total_scores(&self, x: Views<'_>) -> Result<Vec<f64>> {
        let mut total = vec![0.0; self.k];
        let mut buf = vec![0.0; self.k];
        for (v, x_v) in x.iter().enumerate() {
            self.loss_vector_into(v, x_v, &mut buf)?;
            total.iter_mut().zip(&buf).for_each(|(t, b)| *t += b);
        }
        Ok(total)
    }

    /// The base term `A(θ; x)`.
    pub fn base_term(&self, x: Views<'_>) -> Result<f64> {
        match self.kind {
            ModelKind::ModifiedHinge => {
                for (v, x_v) in x.iter().enumerate() {
                    self.check_view(v, x_v)?;
                }
                Ok(0.0)
            }
            _ => Ok(log_sum_exp(&self.total_scores(x)?)),
        }
    }

    /// `L(θ; x, y)` evaluated directly from the family's definition.
    pub fn loss(&self, x: Views<'_>, y: usize) -> Result<f64> {
        if y >= self.k {
            return Err(Error::InvalidInput(alloc::format!("label {y} out of range")));
        }
        let mut buf = vec![0.0; self.k];
        match self.kind {
            ModelKind::ModifiedHinge => {
                let mut total = 0.0;
                for (v, x_v) in x.iter().enumerate() {
                    self.check_view(v, x_v)?;
                    self.scores_into(v, x_v, &mut buf)?;
                    let rival = buf
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != y)
                        .map(|(_, &s)| s)
                        .fold(f64::NEG_INFINITY, f64::max);
                    total += (1.0 + rival - buf[y]).max(0.0);
                }
                Ok(total)
            }
            _ => {
                let total = self.total_scores(x)?;
                // −log softmax(total)_y
                Ok(log_sum_exp(&total) - total[y])
            }
        }
    }

    /// `p_θ(· | x)` for softmax families.
    pub fn predictive(&self, x: Views<'_>) -> Result<Vec<f64>> {
        if !self.is_softmax() {
            return Err(Error::Unsupported(
                "predictive distribution of a hinge model".into(),
            ));
        }
        let total = self.total_scores(x)?;
        let mut p = vec![0.0; self.k];
        softmax_into(&total, &mut p);
        Ok(p)
    }

    /// Row-major `k × d` gradient of `h_v` written into `out`.
    ///
    /// For the modified hinge the subgradient at the kink is taken on the flat
    /// side (zero).
    pub fn grad_loss_vector_into(&self, v: usize, x_v: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_view(v, x_v)?;
        let (k, d) = (self.k, self.d);
        if out.len() != k * d {
            return Err(Error::Dimension {
                what: "gradient buffer",
                expected: k * d,
                got: out.len(),
            });
        }
        self.score_gradient_into(v, x_v, out)?;
        if self.kind == ModelKind::ModifiedHinge {
            let mut scores = vec![0.0; k];
            self.scores_into(v, x_v, &mut scores)?;
            let grads = out.to_vec();
            for i in 0..k {
                let (rival, s_rival) = scores
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, &s)| {
                        if s > acc.1 {
                            (j, s)
                        } else {
                            acc
                        }
                    });
                let row = &mut out[i * d..(i + 1) * d];
                if 1.0 + s_rival - scores[i] > 0.0 {
                    for r in 0..d {
                        row[r] = grads[i * d + r] - grads[rival * d + r];
                    }
                } else {
                    row.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Ok(())
    }

    /// `∇_θ h_v(x_v)` as a `k × d` matrix.
    pub fn grad_loss_vector(&self, v: usize, x_v: &[f64]) -> Result<DMatrix<f64>> {
        let mut buf = vec![0.0; self.k * self.d];
        self.grad_loss_vector_into(v, x_v, &mut buf)?;
        Ok(DMatrix::from_row_slice(self.k, self.d, &buf))
    }

    /// `∇_θ A(θ; x)`.
    pub fn grad_base_term(&self, x: Views<'_>) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.d];
        if !self.is_softmax() {
            return Ok(g);
        }
        let p = self.predictive(x)?;
        let mut buf = vec![0.0; self.k * self.d];
        for (v, x_v) in x.iter().enumerate() {
            self.grad_loss_vector_into(v, x_v, &mut buf)?;
            for (i, &pi) in p.iter().enumerate() {
                if pi == 0.0 {
                    continue;
                }
                for (gr, b) in g.iter_mut().zip(&buf[i * self.d..(i + 1) * self.d]) {
                    *gr += pi * b;
                }
            }
        }
        Ok(g)
    }

    /// Layout rows `i + k·r` of view `v`'s gradient that can be nonzero, ascending.
    pub fn gradient_support(&self, v: usize) -> Vec<usize> {
        let (k, d) = (self.k, self.d);
        let mut rows = Vec::new();
        match self.scorer {
            Scorer::Linear => {
                let dv = self.view_dims[v];
                let start = self.view_offsets[v];
                let hinge = self.kind == ModelKind::ModifiedHinge;
                for r in start..start + k * dv {
                    let owner = (r - start) / dv;
                    for i in 0..k {
                        if hinge || i == owner {
                            rows.push(i + k * r);
                        }
                    }
                }
            }
            Scorer::Table => {
                let start = self.view_offsets[v];
                for r in start..start + k * self.view_dims[v] {
                    rows.push((r - start) % k + k * r);
                }
            }
            Scorer::Custom(_) => rows.extend(0..k * d),
        }
        rows.sort_unstable();
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_model(theta: Vec<f64>) -> ViewLossModel {
        // k = 2, view 1 has a scalar input, views 2 and 3 are empty.
        build_builtin_model(ModelKind::Logistic, 2, [1, 0, 0], [0, 2, 2], theta).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_loss_vector() {
        let m = ViewLossModel::logistic(3, [2, 2, 2], vec![0.0; 18]).unwrap();
        let h = m.loss_vector(1, &[0.3, -4.0]).unwrap();
        assert_eq!(h.values, vec![0.0; 3]);
        assert_eq!(h.view, 1);
    }

    #[test]
    fn block_embedding_reads_class_blocks() {
        let m = one_hot_model(vec![1.0, 2.0]);
        assert_eq!(m.loss_vector(0, &[1.0]).unwrap().values, vec![1.0, 2.0]);
    }

    #[test]
    fn hinge_vector_and_zero_base_term() {
        let m = build_builtin_model(ModelKind::ModifiedHinge, 2, [1, 0, 0], [0, 2, 2], vec![0.0, 1.0])
            .unwrap();
        // scores (0, 1): h_0 = −(1 + 1 − 0) = −2, h_1 = −(1 + 0 − 1)_+ = 0
        assert_eq!(m.loss_vector(0, &[1.0]).unwrap().values, vec![-2.0, 0.0]);
        assert_eq!(m.base_term([&[1.0], &[], &[]]).unwrap(), 0.0);
    }

    #[test]
    fn base_term_values() {
        let m = ViewLossModel::logistic(3, [1, 1, 1], vec![0.0; 9]).unwrap();
        let a = m.base_term([&[1.0], &[2.0], &[3.0]]).unwrap();
        assert!((a - 3f64.ln()).abs() < 1e-15);

        let m = one_hot_model(vec![10.0, 10.0]);
        let a = m.base_term([&[1.0], &[], &[]]).unwrap();
        assert!((a - (10.0 + 2f64.ln())).abs() <= 1e-12 * a);

        let m = one_hot_model(vec![0.0, 0.0]);
        let a = m.base_term([&[5.0], &[], &[]]).unwrap();
        assert!((a - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn extreme_scores_do_not_overflow() {
        let m = one_hot_model(vec![800.0, -800.0]);
        let a = m.base_term([&[1.0], &[], &[]]).unwrap();
        assert!((a - 800.0).abs() < 1e-12 * 800.0);
        assert!(m.loss([&[1.0], &[], &[]], 1).unwrap().is_finite());
    }

    #[test]
    fn logistic_gradient_is_feature_matrix() {
        let m = ViewLossModel::logistic(2, [2, 1, 1], vec![0.5; 8]).unwrap();
        let g = m.grad_loss_vector(0, &[3.0, -1.0]).unwrap();
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), vec![3.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 3.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let other = m.with_theta(vec![-2.0; 8]).unwrap();
        assert_eq!(other.grad_loss_vector(0, &[3.0, -1.0]).unwrap(), g);
    }

    #[test]
    fn constant_feature_gradient_column() {
        // d = 1, φ(x, i) = c_i: a table scorer with one symbol and a shared parameter
        // is not expressible, so use a custom scorer.
        struct Const;
        impl ViewScorer for Const {
            fn scores(&self, _v: usize, theta: &[f64], _x: &[f64], out: &mut [f64]) {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = theta[0] * (i as f64 + 1.0);
                }
            }
            fn gradient(&self, _v: usize, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = i as f64 + 1.0;
                }
            }
        }
        let m = ViewLossModel::with_scorer(3, [1, 1, 1], vec![0.7], Arc::new(Const)).unwrap();
        let g = m.grad_loss_vector(2, &[9.0]).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn table_scorer_is_softmax_of_summed_tables() {
        // k = 2, two symbols per view.
        let theta: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let m = build_builtin_model(ModelKind::AdditiveScorer, 2, [2, 2, 2], [0, 4, 8], theta.clone())
            .unwrap();
        let x: Views<'_> = [&[1.0], &[0.0], &[1.0]];
        let s: Vec<f64> = (0..2)
            .map(|i| theta[2 + i] + theta[4 + i] + theta[8 + 2 + i])
            .collect();
        let lse = (s[0].exp() + s[1].exp()).ln();
        for y in 0..2 {
            assert!((m.loss(x, y).unwrap() - (lse - s[y])).abs() < 1e-12);
        }
        assert!(m.loss_vector(0, &[2.0]).is_err());
    }

    #[test]
    fn input_errors() {
        let m = ViewLossModel::logistic(2, [2, 1, 1], vec![0.0; 8]).unwrap();
        assert!(matches!(m.loss_vector(0, &[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(
            m.loss_vector(0, &[1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(m.loss_vector(3, &[1.0]).is_err());
        assert!(ViewLossModel::logistic(1, [1, 1, 1], vec![0.0; 3]).is_err());
        assert!(ViewLossModel::logistic(2, [2, 1, 1], vec![0.0; 7]).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        let m = ViewLossModel::logistic(2, [2, 1, 1], (0..8).map(|i| i as f64).collect()).unwrap();
        let back = ViewLossModel::from_descriptor(&m.descriptor().unwrap()).unwrap();
        assert_eq!(back.theta(), m.theta());
        assert_eq!(back.view_offsets(), m.view_offsets());
    }

    #[test]
    fn support_covers_nonzero_gradient_rows() {
        let m = ViewLossModel::logistic(3, [2, 1, 2], (0..15).map(|i| 0.1 * i as f64).collect())
            .unwrap();
        for v in 0..3 {
            let x: Vec<f64> = (0..m.input_dim(v)).map(|i| 1.0 + i as f64).collect();
            let g = m.grad_loss_vector(v, &x).unwrap();
            let support = m.gradient_support(v);
            for i in 0..3 {
                for r in 0..m.d() {
                    if g[(i, r)] != 0.0 {
                        assert!(support.binary_search(&(i + 3 * r)).is_ok());
                    }
                }
            }
            assert_eq!(support.len(), 3 * m.view_dims()[v]);
        }
    }
}
