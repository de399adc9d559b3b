//! Containers for view-split samples.
//!
//! Estimation code only ever sees [`ViewData`]; labels live in
//! [`LabeledData`] and are reachable only by oracle and evaluation paths.

use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::models::{Views, VIEWS};

/// `m` unlabeled samples, each split into three views stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    dims: [usize; VIEWS],
    m: usize,
    views: [Vec<f64>; VIEWS],
}

impl ViewData {
    pub fn new(dims: [usize; VIEWS], views: [Vec<f64>; VIEWS]) -> Result<Self> {
        let m = if dims[0] > 0 {
            views[0].len() / dims[0]
        } else if dims[1] > 0 {
            views[1].len() / dims[1]
        } else if dims[2] > 0 {
            views[2].len() / dims[2]
        } else {
            return Err(Error::InvalidInput("all views are empty".into()));
        };
        for v in 0..VIEWS {
            if views[v].len() != m * dims[v] {
                return Err(Error::Dimension {
                    what: "view data",
                    expected: m * dims[v],
                    got: views[v].len(),
                });
            }
        }
        Ok(ViewData { dims, m, views })
    }

    pub fn empty(dims: [usize; VIEWS]) -> Self {
        ViewData {
            dims,
            m: 0,
            views: [Vec::new(), Vec::new(), Vec::new()],
        }
    }

    pub fn push(&mut self, x: Views<'_>) -> Result<()> {
        for v in 0..VIEWS {
            if x[v].len() != self.dims[v] {
                return Err(Error::Dimension {
                    what: "view input",
                    expected: self.dims[v],
                    got: x[v].len(),
                });
            }
        }
        for v in 0..VIEWS {
            self.views[v].extend_from_slice(x[v]);
        }
        self.m += 1;
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    #[inline]
    pub fn dims(&self) -> [usize; VIEWS] {
        self.dims
    }

    #[inline]
    pub fn view(&self, v: usize) -> &[f64] {
        &self.views[v]
    }

    #[inline]
    pub fn sample(&self, n: usize) -> Views<'_> {
        let at = |v: usize| &self.views[v][n * self.dims[v]..(n + 1) * self.dims[v]];
        [at(0), at(1), at(2)]
    }

    pub fn slice(&self, range: Range<usize>) -> ViewData {
        let cut = |v: usize| self.views[v][range.start * self.dims[v]..range.end * self.dims[v]].to_vec();
        ViewData {
            dims: self.dims,
            m: range.len(),
            views: [cut(0), cut(1), cut(2)],
        }
    }

    pub fn concat(&self, other: &ViewData) -> Result<ViewData> {
        if self.dims != other.dims {
            return Err(Error::InvalidInput("view dimensions differ".into()));
        }
        let join = |v: usize| {
            let mut out = self.views[v].clone();
            out.extend_from_slice(&other.views[v]);
            out
        };
        Ok(ViewData {
            dims: self.dims,
            m: self.m + other.m,
            views: [join(0), join(1), join(2)],
        })
    }

    pub fn into_views(self) -> [Vec<f64>; VIEWS] {
        self.views
    }
}

/// Samples with their hidden labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    data: ViewData,
    labels: Vec<usize>,
    k: usize,
}

impl LabeledData {
    pub fn new(data: ViewData, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != data.len() {
            return Err(Error::Dimension {
                what: "labels",
                expected: data.len(),
                got: labels.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidInput(alloc::format!("label {y} out of range")));
        }
        Ok(LabeledData { data, labels, k })
    }

    /// The label-free projection handed to estimators.
    #[inline]
    pub fn unlabeled(&self) -> &ViewData {
        &self.data
    }

    #[inline]
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> LabeledData {
        LabeledData {
            data: self.data.slice(range.clone()),
            labels: self.labels[range].to_vec(),
            k: self.k,
        }
    }

    pub fn into_parts(self) -> (ViewData, Vec<usize>) {
        (self.data, self.labels)
    }
}
