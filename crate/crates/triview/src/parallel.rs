//! Rayon versions of the data passes.
//!
//! Samples are cut into fixed-size chunks, so results depend on the chunk
//! size but never on the number of worker threads.

use nalgebra::DMatrix;
use rayon::prelude::*;
use triview_core::decomposition::{choose_amplified, decompose_moments, unshift, DecompConfig, PlugInEstimate};
use triview_core::linalg::Tensor3;
use triview_core::models::{ViewLossModel, VIEWS};
use triview_core::moments::{
    accumulate_range, gauge_offsets, LossSource, ModelLosses, MomentSet, SampleTriple, Shifted, Subset, TripleMoment,
};
use triview_core::risk::{label_constant_means, label_constant_risk, mean_base_term, risk_from_estimate, RiskEstimate};
use triview_core::sample::ViewData;
use triview_core::{Error, Result, Stage};

/// Samples per work item.
pub const CHUNK: usize = 2048;

fn chunks(m: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..m.div_ceil(chunk)).map(|c| c * chunk..((c + 1) * chunk).min(m)).collect()
}

/// [`triview_core::moments::accumulate_moments`] with chunks reduced in parallel
/// and merged in index order.
pub fn par_accumulate_moments<S: LossSource + ?Sized>(source: &S, dense_cap: usize, chunk: usize) -> Result<MomentSet> {
    let ranges = chunks(source.len(), chunk);
    if ranges.is_empty() {
        return Err(Error::Empty);
    }
    let parts = ranges
        .into_par_iter()
        .map(|r| accumulate_range(source, r, dense_cap))
        .collect::<Result<Vec<_>>>()?;
    MomentSet::combine(&parts)
}

/// Projected third moment computed chunk by chunk in parallel.
pub struct ParTriple<'a, S: ?Sized> {
    pub source: &'a S,
    pub chunk: usize,
}

impl<S: LossSource + ?Sized> TripleMoment for ParTriple<'_, S> {
    fn project(&self, proj: [&DMatrix<f64>; VIEWS]) -> Result<Tensor3> {
        let m = self.source.len();
        if m == 0 {
            return Err(Error::Empty);
        }
        let parts = chunks(m, self.chunk)
            .into_par_iter()
            .map(|range| {
                let n = range.len();
                let sub = Subset {
                    inner: self.source,
                    range,
                };
                SampleTriple { source: &sub }.project(proj).map(|t| (n, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total: Option<Tensor3> = None;
        for (n, mut t) in parts {
            t.scale(n as f64 / m as f64);
            match &mut total {
                Some(acc) => acc.add_assign(&t),
                None => total = Some(t),
            }
        }
        Ok(total.expect("at least one chunk"))
    }
}

fn decompose_one<S: LossSource + ?Sized>(source: &S, k: usize, config: &DecompConfig) -> Result<PlugInEstimate> {
    let moments = par_accumulate_moments(source, config.dense_cap, CHUNK).map_err(|e| Error::Stage {
        stage: Stage::Accumulate,
        source: e.into(),
    })?;
    let triple = ParTriple { source, chunk: CHUNK };
    decompose_moments(&moments, Some(&triple), k, config)
}

/// [`triview_core::decomposition::decompose_source`] with parallel data passes;
/// amplification splits also run concurrently.
pub fn par_decompose_source<S: LossSource + ?Sized>(source: &S, k: usize, config: &DecompConfig) -> Result<PlugInEstimate> {
    config.validate()?;
    let m = source.len();
    if config.splits == 1 {
        return decompose_one(source, k, config);
    }
    if m < config.splits {
        return Err(Error::InvalidInput(format!("{m} samples cannot fill {} splits", config.splits)));
    }
    let splits = config.splits;
    let estimates = (0..splits)
        .into_par_iter()
        .map(|s| {
            let sub = Subset {
                inner: source,
                range: s * m / splits..(s + 1) * m / splits,
            };
            let cfg = DecompConfig {
                seed: config.seed.wrapping_add(s as u64),
                splits: 1,
                ..config.clone()
            };
            decompose_one(&sub, k, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    choose_amplified(estimates, config.amplify_radius)
}

/// [`triview_core::risk::estimate_risk`] with parallel data passes.
pub fn par_estimate_risk(data: &ViewData, model: &ViewLossModel, config: &DecompConfig) -> Result<RiskEstimate> {
    let a_mean = mean_base_term(data, model)?;
    let source = ModelLosses::new(model, data);
    if let Some(means) = label_constant_means(&source)? {
        return Ok(label_constant_risk(a_mean, means, model.k()));
    }
    let est = par_decompose_gauged(&source, model.k(), config)?;
    risk_from_estimate(a_mean, &est)
}

/// [`triview_core::decomposition::decompose_gauged`] with parallel data passes.
pub fn par_decompose_gauged<S: LossSource + ?Sized>(source: &S, k: usize, config: &DecompConfig) -> Result<PlugInEstimate> {
    let offsets = gauge_offsets(source, k).map_err(|e| Error::Stage {
        stage: Stage::Accumulate,
        source: e.into(),
    })?;
    if offsets.iter().all(|&c| c == 0.0) {
        return par_decompose_source(source, k, config);
    }
    let shifted = Shifted {
        inner: source,
        rows: k,
        offsets,
    };
    let mut est = par_decompose_source(&shifted, k, config)?;
    unshift(&mut est, k, offsets);
    Ok(est)
}
