//! Empirical and population moments of per-view loss vectors.
//!
//! Sums are accumulated in fixed-size blocks that are combined pairwise, so the
//! result does not depend (beyond rounding at the 1e−12 level) on how samples
//! are chunked across workers.

use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::Tensor3;
use crate::models::{ViewLossModel, VIEWS};
use crate::sample::ViewData;

/// Largest view dimension for which the third moment is stored densely.
pub const DENSE_TRIPLE_CAP: usize = 64;

/// Unordered view pairs in storage order.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Anything that yields one vector per (sample, view).
pub trait LossSource: Sync {
    fn len(&self) -> usize;
    fn dims(&self) -> [usize; VIEWS];
    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss vectors `h_v(x_v)` of a model evaluated on raw samples.
pub struct ModelLosses<'a> {
    pub model: &'a ViewLossModel,
    pub data: &'a ViewData,
}

impl<'a> ModelLosses<'a> {
    pub fn new(model: &'a ViewLossModel, data: &'a ViewData) -> Self {
        ModelLosses { model, data }
    }
}

impl LossSource for ModelLosses<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn dims(&self) -> [usize; VIEWS] {
        [self.model.k(); VIEWS]
    }

    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()> {
        let x = self.data.sample(n);
        self.model
            .loss_vector_into(v, x[v], out)
            .map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite { context, index: n },
                e => e,
            })
    }
}

/// A contiguous window of another source.
pub struct Subset<'a, S: ?Sized> {
    pub inner: &'a S,
    pub range: core::ops::Range<usize>,
}

impl<S: LossSource + ?Sized> LossSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.range.len()
    }

    fn dims(&self) -> [usize; VIEWS] {
        self.inner.dims()
    }

    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()> {
        self.inner.fill(self.range.start + n, v, out)
    }
}

/// Adds `offsets[v]` to the first `rows` coordinates of view `v`.
pub struct Shifted<'a, S: ?Sized> {
    pub inner: &'a S,
    pub rows: usize,
    pub offsets: [f64; VIEWS],
}

impl<S: LossSource + ?Sized> LossSource for Shifted<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn dims(&self) -> [usize; VIEWS] {
        self.inner.dims()
    }

    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()> {
        self.inner.fill(n, v, out)?;
        out[..self.rows].iter_mut().for_each(|x| *x += self.offsets[v]);
        Ok(())
    }
}

/// Relative size of `1ᵀh` below which a loss block counts as sum-zero.
const SUM_ZERO_TOL: f64 = 1e-8;

/// Per-view shifts taking sum-zero loss blocks off the hyperplane `1ᵀh = 0`.
///
/// `(h_v, A)` and `(h_v + c·1, A + Σ_v c)` describe the same loss. Softmax
/// weights trained by gradient steps from zero keep `Σ_i θ_{v,i} = 0`, so
/// `1ᵀh_v ≡ 0` and every `M_v` has rank `k − 1`; adding `c·11ᵀ` restores rank
/// `k` whenever the scores separate the classes. The shift is the RMS entry of
/// the block; views that are not sum-zero get 0.
pub fn gauge_offsets<S: LossSource + ?Sized>(source: &S, rows: usize) -> Result<[f64; VIEWS]> {
    let dims = source.dims();
    if dims.iter().any(|&d| d < rows) {
        return Err(Error::InvalidInput("loss block wider than the view".into()));
    }
    let mut bufs = [vec![0.0; dims[0]], vec![0.0; dims[1]], vec![0.0; dims[2]]];
    // per view: Σ (1ᵀh)², Σ ‖h‖²
    let mut tree = TreeSum::new(2 * VIEWS);
    for n in 0..source.len() {
        let acc = tree.current();
        for v in 0..VIEWS {
            source.fill(n, v, &mut bufs[v])?;
            let block = &bufs[v][..rows];
            let s: f64 = block.iter().sum();
            acc[2 * v] += s * s;
            acc[2 * v + 1] += block.iter().map(|x| x * x).sum::<f64>();
        }
        tree.commit();
    }
    let (sums, m) = tree.finish();
    if m == 0 {
        return Err(Error::Empty);
    }
    Ok(core::array::from_fn(|v| {
        let (sum_sq, norm_sq) = (sums[2 * v], sums[2 * v + 1]);
        if norm_sq > 0.0 && sum_sq <= SUM_ZERO_TOL * SUM_ZERO_TOL * norm_sq {
            (norm_sq / (m * rows) as f64).sqrt()
        } else {
            0.0
        }
    }))
}

/// Precomputed vectors, one row per sample and view.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    dims: [usize; VIEWS],
    m: usize,
    values: [Vec<f64>; VIEWS],
}

impl LossTable {
    pub fn new(dims: [usize; VIEWS], values: [Vec<f64>; VIEWS]) -> Result<Self> {
        let m = values[0].len() / dims[0].max(1);
        for v in 0..VIEWS {
            if values[v].len() != m * dims[v] {
                return Err(Error::Dimension {
                    what: "loss table",
                    expected: m * dims[v],
                    got: values[v].len(),
                });
            }
        }
        Ok(LossTable { dims, m, values })
    }

    pub fn from_source<S: LossSource + ?Sized>(source: &S) -> Result<Self> {
        let dims = source.dims();
        let m = source.len();
        let mut values = [
            vec![0.0; m * dims[0]],
            vec![0.0; m * dims[1]],
            vec![0.0; m * dims[2]],
        ];
        for n in 0..m {
            for v in 0..VIEWS {
                source.fill(n, v, &mut values[v][n * dims[v]..(n + 1) * dims[v]])?;
            }
        }
        Ok(LossTable { dims, m, values })
    }

    #[inline]
    pub fn row(&self, n: usize, v: usize) -> &[f64] {
        &self.values[v][n * self.dims[v]..(n + 1) * self.dims[v]]
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.values[v]
    }
}

impl LossSource for LossTable {
    fn len(&self) -> usize {
        self.m
    }

    fn dims(&self) -> [usize; VIEWS] {
        self.dims
    }

    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(self.row(n, v));
        Ok(())
    }
}

const BLOCK: usize = 64;

/// Block-wise pairwise summation of fixed-length vectors.
#[derive(Debug, Clone)]
pub(crate) struct TreeSum {
    block: Vec<f64>,
    in_block: usize,
    count: usize,
    stack: Vec<(u32, Vec<f64>)>,
}

impl TreeSum {
    pub(crate) fn new(len: usize) -> Self {
        TreeSum {
            block: vec![0.0; len],
            in_block: 0,
            count: 0,
            stack: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn current(&mut self) -> &mut [f64] {
        &mut self.block
    }

    pub(crate) fn commit(&mut self) {
        self.in_block += 1;
        self.count += 1;
        if self.in_block == BLOCK {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let len = self.block.len();
        let full = mem::replace(&mut self.block, vec![0.0; len]);
        self.in_block = 0;
        self.stack.push((0, full));
        while self.stack.len() >= 2 {
            let n = self.stack.len();
            if self.stack[n - 1].0 != self.stack[n - 2].0 {
                break;
            }
            let (level, top) = self.stack.pop().expect("len checked");
            let below = &mut self.stack[n - 2];
            add_into(&mut below.1, &top);
            below.0 = level + 1;
        }
    }

    pub(crate) fn finish(mut self) -> (Vec<f64>, usize) {
        if self.in_block > 0 {
            self.flush();
        }
        let count = self.count;
        let mut acc: Option<Vec<f64>> = None;
        while let Some((_, part)) = self.stack.pop() {
            acc = Some(match acc {
                None => part,
                Some(mut a) => {
                    add_into(&mut a, &part);
                    a
                }
            });
        }
        (acc.unwrap_or(self.block), count)
    }
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += *b;
    }
}

/// Sums a list of equal-length vectors pairwise, left to right.
pub(crate) fn pairwise_total(mut parts: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_into(&mut a, &b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// First, pairwise and (optionally dense) third moments of three vector views.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub m: usize,
    pub dims: [usize; VIEWS],
    /// `Ê[h_v]`.
    pub first: [DVector<f64>; VIEWS],
    /// `Ê[h_v h_wᵀ]` for `(v, w)` in [`PAIRS`] order.
    pub pairs: [DMatrix<f64>; 3],
    /// `Ê[Σ_v ‖h_v‖²]`.
    pub sq_norm: f64,
    /// `Ê[h_1 ⊗ h_2 ⊗ h_3]` when every view dimension is within the dense cap.
    pub triple: Option<Tensor3>,
}

impl MomentSet {
    /// `Ê[h_v h_wᵀ]`; a transpose of the stored matrix when `v > w`.
    pub fn pair(&self, v: usize, w: usize) -> DMatrix<f64> {
        match (v, w) {
            (0, 1) => self.pairs[0].clone(),
            (0, 2) => self.pairs[1].clone(),
            (1, 2) => self.pairs[2].clone(),
            (1, 0) => self.pairs[0].transpose(),
            (2, 0) => self.pairs[1].transpose(),
            (2, 1) => self.pairs[2].transpose(),
            _ => panic!("pair moment needs two distinct views, got ({v}, {w})"),
        }
    }

    fn layout(dims: [usize; VIEWS], dense: bool) -> Layout {
        let mut off = 0;
        let mut first = [0; VIEWS];
        for v in 0..VIEWS {
            first[v] = off;
            off += dims[v];
        }
        let mut pairs = [0; 3];
        for (p, &(v, w)) in PAIRS.iter().enumerate() {
            pairs[p] = off;
            off += dims[v] * dims[w];
        }
        let sq = off;
        off += 1;
        let triple = off;
        if dense {
            off += dims[0] * dims[1] * dims[2];
        }
        Layout {
            first,
            pairs,
            sq,
            triple,
            len: off,
        }
    }

    fn from_sums(dims: [usize; VIEWS], dense: bool, sums: &[f64], m: usize) -> MomentSet {
        let lay = Self::layout(dims, dense);
        let inv = 1.0 / m as f64;
        let first = core::array::from_fn(|v| {
            DVector::from_iterator(dims[v], sums[lay.first[v]..lay.first[v] + dims[v]].iter().map(|x| x * inv))
        });
        let pairs = core::array::from_fn(|p| {
            let (v, w) = PAIRS[p];
            let s = &sums[lay.pairs[p]..lay.pairs[p] + dims[v] * dims[w]];
            DMatrix::from_row_iterator(dims[v], dims[w], s.iter().map(|x| x * inv))
        });
        let triple = dense.then(|| {
            let s = &sums[lay.triple..lay.len];
            Tensor3::from_vec(dims, s.iter().map(|x| x * inv).collect()).expect("layout length")
        });
        MomentSet {
            m,
            dims,
            first,
            pairs,
            sq_norm: sums[lay.sq] * inv,
            triple,
        }
    }

    fn to_sums(&self) -> Vec<f64> {
        let dense = self.triple.is_some();
        let lay = Self::layout(self.dims, dense);
        let mut out = vec![0.0; lay.len];
        let scale = self.m as f64;
        for v in 0..VIEWS {
            for (i, x) in self.first[v].iter().enumerate() {
                out[lay.first[v] + i] = x * scale;
            }
        }
        for (p, &(v, w)) in PAIRS.iter().enumerate() {
            let mat = &self.pairs[p];
            for a in 0..self.dims[v] {
                for b in 0..self.dims[w] {
                    out[lay.pairs[p] + a * self.dims[w] + b] = mat[(a, b)] * scale;
                }
            }
        }
        out[lay.sq] = self.sq_norm * scale;
        if let Some(t) = &self.triple {
            for (o, x) in out[lay.triple..].iter_mut().zip(t.as_slice()) {
                *o = x * scale;
            }
        }
        out
    }

    /// Size-weighted combination of moment sets over disjoint samples,
    /// merged pairwise in the given order.
    pub fn combine(parts: &[MomentSet]) -> Result<MomentSet> {
        let first = parts.first().ok_or(Error::Empty)?;
        let dense = parts.iter().all(|p| p.triple.is_some());
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::InvalidInput("moment sets have different dimensions".into()));
            }
        }
        let m: usize = parts.iter().map(|p| p.m).sum();
        if m == 0 {
            return Err(Error::Empty);
        }
        let sums: Vec<Vec<f64>> = parts
            .iter()
            .map(|p| {
                let mut s = p.to_sums();
                if !dense {
                    s.truncate(Self::layout(p.dims, false).len);
                }
                s
            })
            .collect();
        let total = pairwise_total(sums).expect("non-empty");
        Ok(MomentSet::from_sums(first.dims, dense, &total, m))
    }
}

struct Layout {
    first: [usize; VIEWS],
    pairs: [usize; 3],
    sq: usize,
    triple: usize,
    len: usize,
}

/// Streaming accumulator behind [`accumulate_moments`].
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    dims: [usize; VIEWS],
    dense: bool,
    tree: TreeSum,
}

impl MomentAccumulator {
    pub fn new(dims: [usize; VIEWS], dense_cap: usize) -> Self {
        let dense = dims.iter().all(|&d| d <= dense_cap);
        let len = MomentSet::layout(dims, dense).len;
        MomentAccumulator {
            dims,
            dense,
            tree: TreeSum::new(len),
        }
    }

    pub fn push(&mut self, h: [&[f64]; VIEWS]) {
        let lay = MomentSet::layout(self.dims, self.dense);
        let dims = self.dims;
        let acc = self.tree.current();
        for v in 0..VIEWS {
            add_into(&mut acc[lay.first[v]..lay.first[v] + dims[v]], h[v]);
            acc[lay.sq] += h[v].iter().map(|x| x * x).sum::<f64>();
        }
        for (p, &(v, w)) in PAIRS.iter().enumerate() {
            let base = lay.pairs[p];
            for (a, &ha) in h[v].iter().enumerate() {
                if ha == 0.0 {
                    continue;
                }
                let row = &mut acc[base + a * dims[w]..base + (a + 1) * dims[w]];
                for (r, &hb) in row.iter_mut().zip(h[w]) {
                    *r += ha * hb;
                }
            }
        }
        if self.dense {
            let base = lay.triple;
            for (a, &ha) in h[0].iter().enumerate() {
                if ha == 0.0 {
                    continue;
                }
                for (b, &hb) in h[1].iter().enumerate() {
                    let w = ha * hb;
                    if w == 0.0 {
                        continue;
                    }
                    let off = base + (a * dims[1] + b) * dims[2];
                    for (r, &hc) in acc[off..off + dims[2]].iter_mut().zip(h[2]) {
                        *r += w * hc;
                    }
                }
            }
        }
        self.tree.commit();
    }

    pub fn count(&self) -> usize {
        self.tree.count
    }

    pub fn finish(self) -> Result<MomentSet> {
        let (sums, m) = self.tree.finish();
        if m == 0 {
            return Err(Error::Empty);
        }
        Ok(MomentSet::from_sums(self.dims, self.dense, &sums, m))
    }
}

/// One streaming pass over `source` producing first, pairwise and (when every
/// view dimension is at most `dense_cap`) dense third moments.
pub fn accumulate_moments<S: LossSource + ?Sized>(source: &S, dense_cap: usize) -> Result<MomentSet> {
    accumulate_range(source, 0..source.len(), dense_cap)
}

/// As [`accumulate_moments`] over a contiguous index range.
pub fn accumulate_range<S: LossSource + ?Sized>(
    source: &S,
    range: core::ops::Range<usize>,
    dense_cap: usize,
) -> Result<MomentSet> {
    if range.is_empty() {
        return Err(Error::Empty);
    }
    let dims = source.dims();
    let mut acc = MomentAccumulator::new(dims, dense_cap);
    let mut bufs = [vec![0.0; dims[0]], vec![0.0; dims[1]], vec![0.0; dims[2]]];
    for n in range {
        for v in 0..VIEWS {
            source.fill(n, v, &mut bufs[v])?;
            if bufs[v].iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "loss vector",
                    index: n,
                });
            }
        }
        acc.push([&bufs[0], &bufs[1], &bufs[2]]);
    }
    acc.finish()
}

/// Source of projected third moments `E[(P₁h₁) ⊗ (P₂h₂) ⊗ (P₃h₃)]`.
pub trait TripleMoment {
    fn project(&self, proj: [&DMatrix<f64>; VIEWS]) -> Result<Tensor3>;
}

impl TripleMoment for Tensor3 {
    fn project(&self, proj: [&DMatrix<f64>; VIEWS]) -> Result<Tensor3> {
        let dims = self.dims();
        for v in 0..VIEWS {
            if proj[v].ncols() != dims[v] {
                return Err(Error::Dimension {
                    what: "projection",
                    expected: dims[v],
                    got: proj[v].ncols(),
                });
            }
        }
        Ok(self.transform(proj))
    }
}

/// Second data pass computing the projected third moment without forming
/// the full `D₁ × D₂ × D₃` tensor.
pub struct SampleTriple<'a, S: ?Sized> {
    pub source: &'a S,
}

impl<S: LossSource + ?Sized> TripleMoment for SampleTriple<'_, S> {
    fn project(&self, proj: [&DMatrix<f64>; VIEWS]) -> Result<Tensor3> {
        let dims = self.source.dims();
        for v in 0..VIEWS {
            if proj[v].ncols() != dims[v] {
                return Err(Error::Dimension {
                    what: "projection",
                    expected: dims[v],
                    got: proj[v].ncols(),
                });
            }
        }
        let out_dims = [proj[0].nrows(), proj[1].nrows(), proj[2].nrows()];
        let m = self.source.len();
        if m == 0 {
            return Err(Error::Empty);
        }
        let mut tree = TreeSum::new(out_dims[0] * out_dims[1] * out_dims[2]);
        let mut bufs = [vec![0.0; dims[0]], vec![0.0; dims[1]], vec![0.0; dims[2]]];
        let mut projected: [Vec<f64>; VIEWS] = core::array::from_fn(|v| vec![0.0; out_dims[v]]);
        for n in 0..m {
            for v in 0..VIEWS {
                self.source.fill(n, v, &mut bufs[v])?;
                for (r, p) in projected[v].iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (c, &h) in bufs[v].iter().enumerate() {
                        if h != 0.0 {
                            s += proj[v][(r, c)] * h;
                        }
                    }
                    *p = s;
                }
            }
            let acc = tree.current();
            for (a, &pa) in projected[0].iter().enumerate() {
                for (b, &pb) in projected[1].iter().enumerate() {
                    let w = pa * pb;
                    let off = (a * out_dims[1] + b) * out_dims[2];
                    for (r, &pc) in acc[off..off + out_dims[2]].iter_mut().zip(&projected[2]) {
                        *r += w * pc;
                    }
                }
            }
            tree.commit();
        }
        let (sums, count) = tree.finish();
        let inv = 1.0 / count as f64;
        Tensor3::from_vec(out_dims, sums.into_iter().map(|x| x * inv).collect())
    }
}

/// Exact moments of a multi-view mixture with conditional means `M_v` and prior `π`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    pub mats: [DMatrix<f64>; VIEWS],
    pub pi: Vec<f64>,
}

impl PopulationModel {
    pub fn new(mats: [DMatrix<f64>; VIEWS], pi: Vec<f64>) -> Result<Self> {
        let k = pi.len();
        for m in &mats {
            if m.ncols() != k {
                return Err(Error::Dimension {
                    what: "conditional matrix columns",
                    expected: k,
                    got: m.ncols(),
                });
            }
        }
        Ok(PopulationModel { mats, pi })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// `M_v π`, `M_v diag(π) M_wᵀ` and (when small enough) `Σ_j π_j m₁ⱼ⊗m₂ⱼ⊗m₃ⱼ`.
    pub fn moments(&self, m: usize, dense_cap: usize) -> MomentSet {
        let pi = DVector::from_column_slice(&self.pi);
        let dpi = DMatrix::from_diagonal(&pi);
        let dims = [self.mats[0].nrows(), self.mats[1].nrows(), self.mats[2].nrows()];
        let first = core::array::from_fn(|v| &self.mats[v] * &pi);
        let pairs = core::array::from_fn(|p| {
            let (v, w) = PAIRS[p];
            &self.mats[v] * &dpi * self.mats[w].transpose()
        });
        let triple = dims
            .iter()
            .all(|&d| d <= dense_cap)
            .then(|| Tensor3::from_factors(&self.pi, &self.mats[0], &self.mats[1], &self.mats[2]));
        // second moments of the conditional means only
        let sq_norm = self
            .mats
            .iter()
            .map(|m| (0..self.k()).map(|j| self.pi[j] * m.column(j).norm_squared()).sum::<f64>())
            .sum();
        MomentSet {
            m,
            dims,
            first,
            pairs,
            sq_norm,
            triple,
        }
    }
}

impl TripleMoment for PopulationModel {
    fn project(&self, proj: [&DMatrix<f64>; VIEWS]) -> Result<Tensor3> {
        for v in 0..VIEWS {
            if proj[v].ncols() != self.mats[v].nrows() {
                return Err(Error::Dimension {
                    what: "projection",
                    expected: self.mats[v].nrows(),
                    got: proj[v].ncols(),
                });
            }
        }
        Ok(Tensor3::from_factors(
            &self.pi,
            &(proj[0] * &self.mats[0]),
            &(proj[1] * &self.mats[1]),
            &(proj[2] * &self.mats[2]),
        ))
    }
}

/// Loss scale `τ` and feature scale `B`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleConstants {
    pub tau: f64,
    pub b: f64,
}

impl ScaleConstants {
    /// `τ / B`, the weight applied to gradient coordinates of extended features.
    pub fn ratio(&self) -> Result<f64> {
        if !(self.b > 0.0) {
            return Err(Error::DegenerateScale);
        }
        // An all-zero loss leaves nothing to balance against; keep gradients unscaled.
        Ok(if self.tau > 0.0 { self.tau / self.b } else { 1.0 })
    }
}

/// Plug-in `τ = √Ê[Σ_{v,j} f_v²]` and `B = √Ê[Σ_{i,v} ‖∇_θ f_v(·, i)‖²]` at the model's `θ`.
pub fn estimate_scale_constants(data: &ViewData, model: &ViewLossModel) -> Result<ScaleConstants> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let (k, d) = (model.k(), model.d());
    let mut h = vec![0.0; k];
    let mut g = vec![0.0; k * d];
    let mut tree = TreeSum::new(2);
    for n in 0..data.len() {
        let x = data.sample(n);
        let (mut loss_sq, mut grad_sq) = (0.0, 0.0);
        for v in 0..VIEWS {
            model.loss_vector_into(v, x[v], &mut h)?;
            loss_sq += h.iter().map(|a| a * a).sum::<f64>();
            if d > 0 {
                model.grad_loss_vector_into(v, x[v], &mut g)?;
                grad_sq += g.iter().map(|a| a * a).sum::<f64>();
            }
        }
        let acc = tree.current();
        acc[0] += loss_sq;
        acc[1] += grad_sq;
        tree.commit();
    }
    let (sums, m) = tree.finish();
    Ok(ScaleConstants {
        tau: (sums[0] / m as f64).sqrt(),
        b: (sums[1] / m as f64).sqrt(),
    })
}

/// `h′_v(x_v)`: the seed loss vector followed by `(τ/B)·∂f_v(θ; x_v, i)/∂θ_r`
/// at layout index `i + k·r`, length `k(d+1)`.
pub fn extended_feature(
    seed: &ViewLossModel,
    query: &ViewLossModel,
    x_v: &[f64],
    v: usize,
    scale: &ScaleConstants,
) -> Result<Vec<f64>> {
    let (k, d) = (seed.k(), seed.d());
    let mut out = vec![0.0; k * (d + 1)];
    seed.loss_vector_into(v, x_v, &mut out[..k])?;
    if d == 0 {
        return Ok(out);
    }
    let ratio = scale.ratio()?;
    let mut g = vec![0.0; k * d];
    query.grad_loss_vector_into(v, x_v, &mut g)?;
    for i in 0..k {
        for r in 0..d {
            out[k + i + k * r] = ratio * g[i * d + r];
        }
    }
    Ok(out)
}

/// Extended features restricted to the gradient rows each view can reach.
///
/// Row layout per view: `h_v(θ₀)` (k), optionally `h_v(θ)` (k), then the
/// scaled gradient rows listed in [`ExtendedLosses::support`].
pub struct ExtendedLosses<'a> {
    seed: &'a ViewLossModel,
    query: &'a ViewLossModel,
    data: &'a ViewData,
    ratio: f64,
    query_losses: bool,
    support: [Vec<usize>; VIEWS],
}

impl<'a> ExtendedLosses<'a> {
    pub fn new(
        seed: &'a ViewLossModel,
        query: &'a ViewLossModel,
        data: &'a ViewData,
        scale: &ScaleConstants,
        query_losses: bool,
    ) -> Result<Self> {
        if seed.k() != query.k() || seed.d() != query.d() {
            return Err(Error::InvalidInput("seed and query models differ in shape".into()));
        }
        let ratio = scale.ratio()?;
        let support = core::array::from_fn(|v| query.gradient_support(v));
        Ok(ExtendedLosses {
            seed,
            query,
            data,
            ratio,
            query_losses,
            support,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Layout rows (`i + k·r`) carried by view `v`'s gradient block.
    pub fn support(&self, v: usize) -> &[usize] {
        &self.support[v]
    }

    /// Offset of the gradient block inside each extended vector.
    pub fn gradient_offset(&self) -> usize {
        if self.query_losses {
            2 * self.seed.k()
        } else {
            self.seed.k()
        }
    }

    /// Scatters a compact gradient block (`support` rows × k) back into the
    /// full `dk × k` layout, undoing the `τ/B` scaling.
    pub fn expand_gradient(&self, v: usize, compact: &DMatrix<f64>) -> DMatrix<f64> {
        let (k, d) = (self.seed.k(), self.seed.d());
        let off = self.gradient_offset();
        let mut g = DMatrix::zeros(k * d, compact.ncols());
        for (row, &layout) in self.support[v].iter().enumerate() {
            for j in 0..compact.ncols() {
                g[(layout, j)] = compact[(off + row, j)] / self.ratio;
            }
        }
        g
    }
}

impl LossSource for ExtendedLosses<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn dims(&self) -> [usize; VIEWS] {
        core::array::from_fn(|v| self.gradient_offset() + self.support[v].len())
    }

    fn fill(&self, n: usize, v: usize, out: &mut [f64]) -> Result<()> {
        let (k, d) = (self.seed.k(), self.seed.d());
        let x = self.data.sample(n)[v];
        self.seed.loss_vector_into(v, x, &mut out[..k])?;
        if self.query_losses {
            self.query.loss_vector_into(v, x, &mut out[k..2 * k])?;
        }
        let mut g = vec![0.0; k * d];
        self.query.grad_loss_vector_into(v, x, &mut g)?;
        let off = self.gradient_offset();
        for (slot, &layout) in out[off..].iter_mut().zip(&self.support[v]) {
            let (i, r) = (layout % k, layout / k);
            *slot = self.ratio * g[i * d + r];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_builtin_model, ModelKind};

    fn table(rows: [&[f64]; 3], dim: usize) -> LossTable {
        LossTable::new([dim; 3], [rows[0].to_vec(), rows[1].to_vec(), rows[2].to_vec()]).unwrap()
    }

    #[test]
    fn first_moment_is_mean() {
        let t = table([&[0.0, 1.0, 2.0, 3.0], &[1.0, 1.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0]], 2);
        let ms = accumulate_moments(&t, DENSE_TRIPLE_CAP).unwrap();
        assert_eq!(ms.m, 2);
        assert_eq!(ms.first[0].as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn single_sample_pair_is_outer_product() {
        let t = table([&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]], 2);
        let ms = accumulate_moments(&t, DENSE_TRIPLE_CAP).unwrap();
        assert_eq!(ms.pair(0, 1), DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 6.0, -2.0]));
        assert_eq!(ms.pair(1, 0), ms.pair(0, 1).transpose());
        let t3 = ms.triple.unwrap();
        assert_eq!(t3.get(1, 0, 1), 2.0 * 3.0 * 0.5);
    }

    #[test]
    fn population_identity_case() {
        let pop = PopulationModel::new(
            [DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            vec![0.3, 0.7],
        )
        .unwrap();
        let ms = pop.moments(1, DENSE_TRIPLE_CAP);
        for v in 0..3 {
            assert_eq!(ms.first[v].as_slice(), &[0.3, 0.7]);
        }
        assert_eq!(ms.pair(0, 1), DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.7]));
    }

    #[test]
    fn empty_and_non_finite_inputs() {
        let t = LossTable::new([2; 3], [vec![], vec![], vec![]]).unwrap();
        assert!(matches!(accumulate_moments(&t, 64), Err(Error::Empty)));
        let t = table([&[0.0, 1.0, 2.0, f64::NAN], &[1.0; 4], &[1.0; 4]], 2);
        assert!(matches!(
            accumulate_moments(&t, 64),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn dense_cap_controls_triple() {
        let t = table([&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]], 2);
        assert!(accumulate_moments(&t, 1).unwrap().triple.is_none());
    }

    #[test]
    fn scale_constants_examples() {
        // All-zero parameters: every loss is zero.
        let model = ViewLossModel::logistic(2, [1, 1, 1], vec![0.0; 6]).unwrap();
        let data = ViewData::new([1; 3], [vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let s = estimate_scale_constants(&data, &model).unwrap();
        assert_eq!(s.tau, 0.0);
        // unit one-hot features: B = √(3k)
        assert!((s.b - 6f64.sqrt()).abs() < 1e-15);

        // h₁ = (1, 0), h₂ = (0, 1), h₃ = 0 via a table scorer with one symbol per view.
        let model = build_builtin_model(
            ModelKind::AdditiveScorer,
            2,
            [1, 1, 1],
            [0, 2, 4],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let data = ViewData::new([1; 3], [vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        let s = estimate_scale_constants(&data, &model).unwrap();
        assert!((s.tau - 2f64.sqrt()).abs() < 1e-15);
        assert!(estimate_scale_constants(&ViewData::empty([1; 3]), &model).is_err());
    }

    #[test]
    fn extended_feature_layout() {
        // k = 2, d = 1: h = (1, 2) via θ = 1 on per-class constant features (1, 2),
        // gradients (3, 4) at the query θ.
        struct Lin(f64, f64);
        impl crate::models::ViewScorer for Lin {
            fn scores(&self, _v: usize, t: &[f64], _x: &[f64], out: &mut [f64]) {
                out[0] = self.0 * t[0];
                out[1] = self.1 * t[0];
            }
            fn gradient(&self, _v: usize, _t: &[f64], _x: &[f64], out: &mut [f64]) {
                out[0] = self.0;
                out[1] = self.1;
            }
        }
        let seed = ViewLossModel::with_scorer(2, [1; 3], vec![1.0], alloc::sync::Arc::new(Lin(1.0, 2.0))).unwrap();
        let query = ViewLossModel::with_scorer(2, [1; 3], vec![1.0], alloc::sync::Arc::new(Lin(3.0, 4.0))).unwrap();
        let scale = ScaleConstants { tau: 1.0, b: 2.0 };
        let h = extended_feature(&seed, &query, &[0.0], 0, &scale).unwrap();
        assert_eq!(h, vec![1.0, 2.0, 1.5, 2.0]);
        assert!(matches!(
            extended_feature(&seed, &query, &[0.0], 0, &ScaleConstants { tau: 1.0, b: 0.0 }),
            Err(Error::DegenerateScale)
        ));
    }

    #[test]
    fn extended_feature_equal_parameters_concatenates_features() {
        let model = ViewLossModel::logistic(2, [2, 1, 1], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let scale = ScaleConstants { tau: 3.0, b: 3.0 };
        let x = [0.5, -2.0];
        let h = extended_feature(&model, &model, &x, 0, &scale).unwrap();
        let lv = model.loss_vector(0, &x).unwrap().values;
        assert_eq!(&h[..2], lv.as_slice());
        let g = model.grad_loss_vector(0, &x).unwrap();
        for i in 0..2 {
            for r in 0..8 {
                assert_eq!(h[2 + i + 2 * r], g[(i, r)]);
            }
        }
    }

    #[test]
    fn compact_extended_losses_match_full_layout() {
        let model = ViewLossModel::logistic(3, [2, 1, 2], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        let data = ViewData::new([2, 1, 2], [vec![1.0, 2.0], vec![-1.0], vec![0.5, 0.25]]).unwrap();
        let scale = ScaleConstants { tau: 2.0, b: 4.0 };
        let ext = ExtendedLosses::new(&model, &model, &data, &scale, false).unwrap();
        for v in 0..3 {
            let full = extended_feature(&model, &model, data.sample(0)[v], v, &scale).unwrap();
            let mut compact = vec![0.0; ext.dims()[v]];
            ext.fill(0, v, &mut compact).unwrap();
            assert_eq!(&compact[..3], &full[..3]);
            for (slot, &layout) in ext.support(v).iter().enumerate() {
                assert_eq!(compact[3 + slot], full[3 + layout]);
            }
            let nonzero = full[3..].iter().filter(|x| **x != 0.0).count();
            assert!(nonzero <= ext.support(v).len());
        }
    }
}
