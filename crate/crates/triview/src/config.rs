//! JSON run configs for the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use triview_core::data::{
    compose_patchwork, gen_hmm_sequences, gen_multiview, synthetic_digits, DimConvention, HmmSpec, ImageSet,
    LabeledSequences, MultiviewConfig, PatchworkConfig,
};
use triview_core::decomposition::DecompConfig;
use triview_core::hmm::HmmRiskConfig;
use triview_core::learning::{constrained_minimizer, labeled_mean_features, LearnConfig};
use triview_core::models::{separate_offsets, ViewLossModel};
use triview_core::sample::LabeledData;

use crate::error::{Error, Result};
use crate::format;

/// Sampling seed of the labeled set a seed model is trained on.
pub const DEFAULT_TRAIN_SEED: u64 = 1_000_000;
/// Added to a job seed to draw its unshifted validation set.
pub const VALIDATION_SEED_OFFSET: u64 = 2_000_000;

/// Where images for the patchwork construction come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ImageSource {
    /// IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
    /// Procedurally drawn digit-like strokes.
    Synthetic {
        k: usize,
        per_class: usize,
        side: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchworkSource {
    pub images: ImageSource,
    /// Class prior of the composites; uniform when unset.
    #[serde(default)]
    pub pi: Option<Vec<f64>>,
}

/// A data generator. `type` selects the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Source {
    Multiview(MultiviewConfig),
    Patchwork(PatchworkSource),
    Hmm(HmmSpec),
}

/// A dataset file with the shift and seed it should be reported under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Labeled training run producing a logistic seed model at a fixed shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub m: usize,
    pub seed: u64,
    pub shift: f64,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            m: 5000,
            seed: DEFAULT_TRAIN_SEED,
            shift: 0.0,
            rho: 10.0,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// A model descriptor JSON file.
    Path(PathBuf),
    /// Train on labeled generator output.
    Train(TrainSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Tensor initialization followed by refinement.
    Refine,
    TensorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Logistic,
    General,
}

fn zero_shift() -> Vec<f64> {
    vec![0.0]
}

fn first_seed() -> Vec<u64> {
    vec![0]
}

fn yes() -> bool {
    true
}

fn default_m() -> usize {
    10_000
}

fn default_validation_m() -> usize {
    5000
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Refine]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub source: Source,
    pub m: usize,
    #[serde(default = "zero_shift")]
    pub shifts: Vec<f64>,
    #[serde(default = "first_seed")]
    pub seeds: Vec<u64>,
    /// Write the label block.
    #[serde(default = "yes")]
    pub labels: bool,
    #[serde(default)]
    pub convention: DimConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRiskConfig {
    /// Files to evaluate; when empty, data come from `source`.
    #[serde(default)]
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub source: Option<Source>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "zero_shift")]
    pub shifts: Vec<f64>,
    #[serde(default = "first_seed")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub convention: DimConvention,
    pub model: ModelSpec,
    /// Labeled unshifted file for the validation baseline (file mode).
    #[serde(default)]
    pub validation: Option<PathBuf>,
    /// Size of the generated validation set (generator mode).
    #[serde(default = "default_validation_m")]
    pub validation_m: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub decomp: DecompConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnRunConfig {
    #[serde(default)]
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub source: Option<Source>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "zero_shift")]
    pub shifts: Vec<f64>,
    #[serde(default = "first_seed")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub convention: DimConvention,
    /// The seed model `θ₀`.
    pub model: ModelSpec,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub learn: LearnConfig,
    /// Also train on the labeled shifted data as a comparator.
    #[serde(default = "yes")]
    pub oracle: bool,
}

fn default_method() -> Method {
    Method::Logistic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmRunConfig {
    #[serde(default)]
    pub sequences: Vec<SequenceEntry>,
    /// Generating chain; also the evaluated model when `model` is unset.
    #[serde(default)]
    pub source: Option<HmmSpec>,
    #[serde(default = "default_hmm_m")]
    pub m: usize,
    #[serde(default = "first_seed")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: Option<HmmSpec>,
    #[serde(default)]
    pub risk: HmmRiskConfig,
}

fn default_hmm_m() -> usize {
    5000
}

/// Makes relative paths relative to `base`.
pub(crate) fn rebase(path: &mut PathBuf, base: &Path) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

fn rebase_source(source: &mut Source, base: &Path) {
    if let Source::Patchwork(PatchworkSource {
        images: ImageSource::Idx { images, labels },
        ..
    }) = source
    {
        rebase(images, base);
        rebase(labels, base);
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{} does not exist", path.display())));
    }
    Ok(())
}

fn check_source(source: &Source) -> Result<()> {
    if let Source::Patchwork(PatchworkSource {
        images: ImageSource::Idx { images, labels },
        ..
    }) = source
    {
        require_file(images)?;
        require_file(labels)?;
    }
    Ok(())
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("seeds must not be empty".into()));
    }
    Ok(())
}

fn check_shifts(shifts: &[f64]) -> Result<()> {
    if shifts.is_empty() || shifts.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::Config("shifts must be a non-empty list of finite values ≥ 0".into()));
    }
    Ok(())
}

fn check_data_input(datasets: &[DatasetEntry], source: &Option<Source>, shifts: &[f64], seeds: &[u64]) -> Result<()> {
    match (datasets.is_empty(), source) {
        (true, None) => Err(Error::Config("give either datasets or a source".into())),
        (false, Some(_)) => Err(Error::Config("datasets and source are mutually exclusive".into())),
        (false, None) => datasets.iter().try_for_each(|d| require_file(&d.path)),
        (true, Some(s)) => {
            if matches!(s, Source::Hmm(_)) {
                return Err(Error::Config("an hmm source yields sequences, not multi-view samples".into()));
            }
            check_source(s)?;
            check_shifts(shifts)?;
            check_seeds(seeds)
        }
    }
}

impl GenDataConfig {
    pub(crate) fn resolve(&mut self, base: &Path) -> Result<()> {
        rebase_source(&mut self.source, base);
        if let Source::Multiview(mv) = &mut self.source {
            mv.convention = self.convention;
        }
        check_source(&self.source)?;
        check_seeds(&self.seeds)?;
        if !matches!(self.source, Source::Hmm(_)) {
            check_shifts(&self.shifts)?;
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        Ok(())
    }
}

impl EstimateRiskConfig {
    pub(crate) fn resolve(&mut self, base: &Path) -> Result<()> {
        self.datasets.iter_mut().for_each(|d| rebase(&mut d.path, base));
        if let Some(s) = &mut self.source {
            rebase_source(s, base);
            if let Source::Multiview(mv) = s {
                mv.convention = self.convention;
            }
        }
        if let ModelSpec::Path(p) = &mut self.model {
            rebase(p, base);
            require_file(p)?;
        }
        if let Some(v) = &mut self.validation {
            rebase(v, base);
            require_file(v)?;
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variants must not be empty".into()));
        }
        check_data_input(&self.datasets, &self.source, &self.shifts, &self.seeds)?;
        check_model(&self.model, &self.source)?;
        self.decomp.validate()?;
        Ok(())
    }
}

impl LearnRunConfig {
    pub(crate) fn resolve(&mut self, base: &Path) -> Result<()> {
        self.datasets.iter_mut().for_each(|d| rebase(&mut d.path, base));
        if let Some(s) = &mut self.source {
            rebase_source(s, base);
            if let Source::Multiview(mv) = s {
                mv.convention = self.convention;
            }
        }
        if let ModelSpec::Path(p) = &mut self.model {
            rebase(p, base);
            require_file(p)?;
        }
        check_data_input(&self.datasets, &self.source, &self.shifts, &self.seeds)?;
        check_model(&self.model, &self.source)?;
        LearnConfig { steps: self.learn.steps.max(1), ..self.learn.clone() }.validate()?;
        Ok(())
    }
}

impl HmmRunConfig {
    pub(crate) fn resolve(&mut self, base: &Path) -> Result<()> {
        self.sequences.iter_mut().for_each(|s| rebase(&mut s.path, base));
        match (self.sequences.is_empty(), &self.source) {
            (true, None) => return Err(Error::Config("give either sequences or a source".into())),
            (false, Some(_)) => return Err(Error::Config("sequences and source are mutually exclusive".into())),
            (false, None) => self.sequences.iter().try_for_each(|s| require_file(&s.path))?,
            (true, Some(spec)) => {
                spec.validate()?;
                check_seeds(&self.seeds)?;
                if spec.t_len < 4 {
                    return Err(Error::Config(format!(
                        "T = {} leaves no admissible pair position (need T ≥ 4)",
                        spec.t_len
                    )));
                }
            }
        }
        if self.model.is_none() {
            self.model = self.source.clone();
        }
        match &self.model {
            Some(spec) => spec.validate()?,
            None => return Err(Error::Config("sequence files need an explicit model".into())),
        }
        Ok(())
    }
}

fn check_model(model: &ModelSpec, source: &Option<Source>) -> Result<()> {
    if let ModelSpec::Train(t) = model {
        if source.is_none() {
            return Err(Error::Config("training a seed model needs a source".into()));
        }
        if t.m == 0 || !(t.rho > 0.0) {
            return Err(Error::Config("train needs m > 0 and rho > 0".into()));
        }
    }
    Ok(())
}

/// A resolved generator with its images loaded.
pub struct Generator {
    source: Source,
    images: Option<ImageSet>,
    convention: DimConvention,
}

impl Generator {
    pub fn new(source: &Source, convention: DimConvention) -> Result<Generator> {
        let images = match source {
            Source::Patchwork(p) => Some(match &p.images {
                ImageSource::Idx { images, labels } => format::load_idx(images, labels)?,
                ImageSource::Synthetic {
                    k,
                    per_class,
                    side,
                    seed,
                } => synthetic_digits(*k, *per_class, *side, *seed)?,
            }),
            _ => None,
        };
        Ok(Generator {
            source: source.clone(),
            images,
            convention,
        })
    }

    /// `m` labeled multi-view samples at shift `a`.
    pub fn views(&self, m: usize, a: f64, seed: u64) -> Result<LabeledData> {
        match &self.source {
            Source::Multiview(cfg) => {
                let cfg = MultiviewConfig {
                    shift: a,
                    convention: self.convention,
                    ..cfg.clone()
                };
                Ok(gen_multiview(&cfg, m, seed)?)
            }
            Source::Patchwork(p) => {
                let cfg = PatchworkConfig {
                    shift: a,
                    convention: self.convention,
                    pi: p.pi.clone(),
                };
                Ok(compose_patchwork(self.images.as_ref().expect("loaded"), &cfg, m, seed)?)
            }
            Source::Hmm(_) => Err(Error::Config("an hmm source yields sequences, not multi-view samples".into())),
        }
    }

    pub fn sequences(&self, m: usize, seed: u64) -> Result<LabeledSequences> {
        match &self.source {
            Source::Hmm(spec) => Ok(gen_hmm_sequences(spec, m, seed)?),
            _ => Err(Error::Config("only an hmm source yields sequences".into())),
        }
    }
}

/// Logistic model fitted on labeled data: `min_{‖θ‖ ≤ ρ}` of the empirical risk.
pub fn train_logistic(data: &LabeledData, rho: f64, tol: f64, max_iter: usize) -> Result<ViewLossModel> {
    let dims = data.unlabeled().dims();
    let (_, d) = separate_offsets(data.k(), dims);
    let start = ViewLossModel::logistic(data.k(), dims, vec![0.0; d])?;
    retrain(data, &start, rho, tol, max_iter)
}

/// As [`train_logistic`], warm-started from `start`.
pub fn retrain(data: &LabeledData, start: &ViewLossModel, rho: f64, tol: f64, max_iter: usize) -> Result<ViewLossModel> {
    let phi = labeled_mean_features(data, start)?;
    let out = constrained_minimizer(data.unlabeled(), start, &phi, rho, tol, max_iter)?;
    Ok(start.with_theta(out.theta)?)
}
