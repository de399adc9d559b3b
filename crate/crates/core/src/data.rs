//! Synthetic generators with known ground truth, patchwork images and dimming.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::VIEWS;
use crate::sample::{LabeledData, ViewData};

/// Tolerance for probability vectors summing to one.
const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidInput(alloc::format!("{what} is not a probability vector")));
    }
    Ok(())
}

fn categorical(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&q| q > 0.0).unwrap_or(0)
}

/// Generator for sample `n`: one ChaCha stream per index, stream 0 reserved.
fn sample_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64 + 1);
    rng
}

/// How the dimming factor is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimConvention {
    /// Divide by `exp(a(d − 0.4))`: the periphery darkens as `a` grows.
    #[default]
    Divide,
    /// Multiply by `exp(a(d − 0.4))`.
    Multiply,
}

impl DimConvention {
    /// Intensity multiplier at normalized distance `d`.
    pub fn factor(self, a: f64, d: f64) -> f64 {
        match self {
            DimConvention::Divide => (-a * (d - 0.4)).exp(),
            DimConvention::Multiply => (a * (d - 0.4)).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiviewConfig {
    pub k: usize,
    pub dims: [usize; VIEWS],
    pub pi: Vec<f64>,
    /// Standard deviation of class-mean entries.
    pub mean_scale: f64,
    /// Within-class noise standard deviation `s`.
    pub noise: f64,
    /// Shift `a`: coordinate `r` of each view is scaled by the dimming factor
    /// at pseudo-distance `r / (D − 1)`.
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub convention: DimConvention,
    /// Seed of the class means; kept apart from the sampling seed so shifted
    /// and unshifted draws share one ground truth.
    #[serde(default)]
    pub means_seed: u64,
}

impl MultiviewConfig {
    pub fn new(k: usize, dims: [usize; VIEWS]) -> Self {
        MultiviewConfig {
            k,
            dims,
            pi: vec![1.0 / k as f64; k],
            mean_scale: 1.0,
            noise: 1.0,
            shift: 0.0,
            convention: DimConvention::Divide,
            means_seed: 0,
        }
    }

    /// Class means `μ_{v,y}`, `k` rows of length `D_v` per view.
    pub fn class_means(&self) -> [Vec<Vec<f64>>; VIEWS] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.means_seed);
        core::array::from_fn(|v| {
            (0..self.k)
                .map(|_| {
                    (0..self.dims[v])
                        .map(|_| self.mean_scale * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
    }

    /// Per-coordinate scale induced by the shift.
    pub fn shift_factors(&self, v: usize) -> Vec<f64> {
        let d = self.dims[v];
        (0..d)
            .map(|r| {
                let rho = if d > 1 { r as f64 / (d - 1) as f64 } else { 0.0 };
                self.convention.factor(self.shift, rho)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.k < 1 || self.pi.len() != self.k {
            return Err(Error::InvalidInput("prior length must equal k".into()));
        }
        check_simplex(&self.pi, "class prior")?;
        if self.dims.contains(&0) {
            return Err(Error::InvalidInput("view dimensions must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.shift >= 0.0) {
            return Err(Error::InvalidInput("noise and shift must be non-negative".into()));
        }
        Ok(())
    }
}

/// `y ~ π`, `x_v | y ~ N(μ_{v,y}, s² I)`, then the shift scaling.
pub fn gen_multiview(config: &MultiviewConfig, m: usize, seed: u64) -> Result<LabeledData> {
    config.validate()?;
    let means = config.class_means();
    let scales: [Vec<f64>; VIEWS] = core::array::from_fn(|v| config.shift_factors(v));
    let mut views: [Vec<f64>; VIEWS] = core::array::from_fn(|v| Vec::with_capacity(m * config.dims[v]));
    let mut labels = Vec::with_capacity(m);
    for n in 0..m {
        let mut rng = sample_rng(seed, n);
        let y = categorical(&mut rng, &config.pi);
        labels.push(y);
        for v in 0..VIEWS {
            for (r, &mu) in means[v][y].iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                views[v].push((mu + config.noise * e) * scales[v][r]);
            }
        }
    }
    LabeledData::new(ViewData::new(config.dims, views)?, labels, config.k)
}

/// Grayscale images of one size with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ImageSet {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, labels: Vec<usize>, k: usize) -> Result<Self> {
        let size = width * height;
        if size == 0 || pixels.len() != size * labels.len() {
            return Err(Error::Dimension {
                what: "image pixels",
                expected: size * labels.len(),
                got: pixels.len(),
            });
        }
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::InvalidInput("image label out of range".into()));
        }
        Ok(ImageSet {
            width,
            height,
            pixels,
            labels,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let size = self.width * self.height;
        &self.pixels[i * size..(i + 1) * size]
    }
}

/// Multiplies pixel `p` by the dimming factor at `‖p − p₀‖ / max‖p − p₀‖`,
/// with `p₀` the grid center, then clips to `[0, max_intensity]`.
pub fn apply_dimming(
    image: &[f64],
    width: usize,
    height: usize,
    a: f64,
    convention: DimConvention,
    max_intensity: f64,
) -> Vec<f64> {
    if a == 0.0 {
        return image.to_vec();
    }
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let far = (cx * cx + cy * cy).sqrt();
    image
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let d = if far > 0.0 {
                ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / far
            } else {
                0.0
            };
            (p * convention.factor(a, d)).clamp(0.0, max_intensity)
        })
        .collect()
}

/// Splits a composite into views by pixel index mod 3.
pub fn split_views(composite: &[f64]) -> [Vec<f64>; VIEWS] {
    core::array::from_fn(|v| composite.iter().skip(v).step_by(VIEWS).copied().collect())
}

/// Inverse of [`split_views`].
pub fn interleave(views: [&[f64]; VIEWS]) -> Vec<f64> {
    let n: usize = views.iter().map(|v| v.len()).sum();
    (0..n).map(|i| views[i % VIEWS][i / VIEWS]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchworkConfig {
    /// Dimming shift `a`.
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub convention: DimConvention,
    /// Class prior of the composites; uniform when unset.
    #[serde(default)]
    pub pi: Option<Vec<f64>>,
}

/// Composites whose pixel `p` comes from the `(p mod 3)`-th of three images
/// drawn from one class; view `v` holds the pixels with index `≡ v (mod 3)`.
pub fn compose_patchwork(images: &ImageSet, config: &PatchworkConfig, m: usize, seed: u64) -> Result<LabeledData> {
    let k = images.k;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in images.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(y) = by_class.iter().position(|c| c.len() < 3) {
        return Err(Error::InvalidInput(alloc::format!(
            "class {y} has fewer than 3 source images"
        )));
    }
    let pi = config.pi.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
    if pi.len() != k {
        return Err(Error::InvalidInput("prior length must equal k".into()));
    }
    check_simplex(&pi, "class prior")?;
    let size = images.width * images.height;
    let dims: [usize; VIEWS] = core::array::from_fn(|v| (size + VIEWS - 1 - v) / VIEWS);
    if dims.contains(&0) {
        return Err(Error::InvalidInput("images need at least 3 pixels".into()));
    }
    let max_intensity = images.pixels.iter().copied().fold(0.0, f64::max).max(1.0);
    let mut views: [Vec<f64>; VIEWS] = core::array::from_fn(|v| Vec::with_capacity(m * dims[v]));
    let mut labels = Vec::with_capacity(m);
    for n in 0..m {
        let mut rng = sample_rng(seed, n);
        let y = categorical(&mut rng, &pi);
        let pool = &by_class[y];
        let picks: [usize; VIEWS] = core::array::from_fn(|_| pool[rng.random_range(0..pool.len())]);
        let composite: Vec<f64> = (0..size).map(|p| images.image(picks[p % VIEWS])[p]).collect();
        let dimmed = apply_dimming(
            &composite,
            images.width,
            images.height,
            config.shift,
            config.convention,
            max_intensity,
        );
        for (v, part) in split_views(&dimmed).into_iter().enumerate() {
            views[v].extend_from_slice(&part);
        }
        labels.push(y);
    }
    LabeledData::new(ViewData::new(dims, views)?, labels, k)
}

/// Digit-like images: each class is a fixed set of strokes on a square grid,
/// rendered with per-image jitter, stroke thickness and pixel noise.
pub fn synthetic_digits(k: usize, per_class: usize, side: usize, seed: u64) -> Result<ImageSet> {
    if k == 0 || side < 2 {
        return Err(Error::InvalidInput("need at least one class and a 2×2 grid".into()));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    // strokes as segment endpoints in [0, 1]²
    let strokes: Vec<Vec<[f64; 4]>> = (0..k)
        .map(|_| {
            (0..3)
                .map(|_| core::array::from_fn(|_| proto_rng.random_range(0.05..0.95)))
                .collect()
        })
        .collect();
    let size = side * side;
    let mut pixels = Vec::with_capacity(k * per_class * size);
    let mut labels = Vec::with_capacity(k * per_class);
    for y in 0..k {
        for i in 0..per_class {
            let mut rng = sample_rng(seed, y * per_class + i);
            let (dx, dy) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
            let width = rng.random_range(0.08..0.14);
            let gain = rng.random_range(0.7..1.0);
            for p in 0..size {
                let px = ((p % side) as f64 + 0.5) / side as f64 - dx;
                let py = ((p / side) as f64 + 0.5) / side as f64 - dy;
                let d = strokes[y]
                    .iter()
                    .map(|s| segment_distance(px, py, s))
                    .fold(f64::INFINITY, f64::min);
                let ink = gain * (-(d / width).powi(2)).exp();
                let noise = 0.05 * rng.sample::<f64, _>(StandardNormal);
                pixels.push((ink + noise).clamp(0.0, 1.0));
            }
            labels.push(y);
        }
    }
    ImageSet::new(side, side, pixels, labels, k)
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * vx - px, ay + t * vy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Emission model of a synthetic chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum EmissionSpec {
    /// `probs[j][s]`: probability of symbol `s` in state `j`.
    Categorical { probs: Vec<Vec<f64>> },
    /// Diagonal Gaussians with per-state means and variances.
    Gaussian { means: Vec<Vec<f64>>, variances: Vec<Vec<f64>> },
}

impl EmissionSpec {
    /// Observation width: 1 symbol or the Gaussian dimension.
    pub fn obs_dim(&self) -> usize {
        match self {
            EmissionSpec::Categorical { .. } => 1,
            EmissionSpec::Gaussian { means, .. } => means.first().map_or(0, Vec::len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSpec {
    pub k: usize,
    pub t_len: usize,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: EmissionSpec,
}

impl HmmSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if k == 0 || self.t_len == 0 {
            return Err(Error::InvalidInput("k and T must be positive".into()));
        }
        if self.initial.len() != k || self.transition.len() != k {
            return Err(Error::InvalidInput("initial and transition must have k entries".into()));
        }
        check_simplex(&self.initial, "initial distribution")?;
        for row in &self.transition {
            if row.len() != k {
                return Err(Error::InvalidInput("transition rows must have k entries".into()));
            }
            check_simplex(row, "transition row")?;
        }
        match &self.emission {
            EmissionSpec::Categorical { probs } => {
                if probs.len() != k {
                    return Err(Error::InvalidInput("emission needs one row per state".into()));
                }
                let s = probs[0].len();
                for row in probs {
                    if row.len() != s {
                        return Err(Error::InvalidInput("ragged emission table".into()));
                    }
                    check_simplex(row, "emission row")?;
                }
            }
            EmissionSpec::Gaussian { means, variances } => {
                if means.len() != k || variances.len() != k {
                    return Err(Error::InvalidInput("emission needs one row per state".into()));
                }
                let d = means[0].len();
                if d == 0
                    || means.iter().chain(variances).any(|r| r.len() != d)
                    || variances.iter().flatten().any(|&x| !(x > 0.0))
                {
                    return Err(Error::InvalidInput("bad Gaussian emission parameters".into()));
                }
            }
        }
        Ok(())
    }
}

/// Unlabeled observation sequences of equal length, row-major `[m][T][obs_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequences {
    pub m: usize,
    pub t_len: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
}

impl Sequences {
    pub fn new(t_len: usize, obs_dim: usize, obs: Vec<f64>) -> Result<Self> {
        let row = t_len * obs_dim;
        if row == 0 || obs.len() % row != 0 {
            return Err(Error::Dimension {
                what: "sequence observations",
                expected: row,
                got: obs.len(),
            });
        }
        Ok(Sequences {
            m: obs.len() / row,
            t_len,
            obs_dim,
            obs,
        })
    }

    pub fn sequence(&self, n: usize) -> &[f64] {
        let row = self.t_len * self.obs_dim;
        &self.obs[n * row..(n + 1) * row]
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }
}

/// Sequences with their hidden state paths, `[m][T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequences {
    pub data: Sequences,
    pub states: Vec<usize>,
}

impl LabeledSequences {
    pub fn path(&self, n: usize) -> &[usize] {
        &self.states[n * self.data.t_len..(n + 1) * self.data.t_len]
    }
}

pub fn gen_hmm_sequences(spec: &HmmSpec, m: usize, seed: u64) -> Result<LabeledSequences> {
    spec.validate()?;
    let t_len = spec.t_len;
    let od = spec.emission.obs_dim();
    let mut obs = Vec::with_capacity(m * t_len * od);
    let mut states = Vec::with_capacity(m * t_len);
    for n in 0..m {
        let mut rng = sample_rng(seed, n);
        let mut y = categorical(&mut rng, &spec.initial);
        for t in 0..t_len {
            if t > 0 {
                y = categorical(&mut rng, &spec.transition[y]);
            }
            states.push(y);
            match &spec.emission {
                EmissionSpec::Categorical { probs } => obs.push(categorical(&mut rng, &probs[y]) as f64),
                EmissionSpec::Gaussian { means, variances } => {
                    for (mu, var) in means[y].iter().zip(&variances[y]) {
                        let e: f64 = rng.sample(StandardNormal);
                        obs.push(mu + var.sqrt() * e);
                    }
                }
            }
        }
    }
    Ok(LabeledSequences {
        data: Sequences::new(t_len, od, obs)?,
        states,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::InvalidInput("truncated IDX header".into()))
}

/// Parses an IDX image file (magic `0x00000803`), scaling bytes to `[0, 1]`.
/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0803 {
        return Err(Error::InvalidInput(alloc::format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::InvalidInput(alloc::format!(
            "IDX image body has {} bytes, expected {want}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0801 {
        return Err(Error::InvalidInput(alloc::format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::InvalidInput(alloc::format!(
            "IDX label body has {} bytes, expected {n}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiview_is_deterministic() {
        let cfg = MultiviewConfig::new(3, [4, 3, 5]);
        let a = gen_multiview(&cfg, 50, 9).unwrap();
        let b = gen_multiview(&cfg, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_multiview(&cfg, 50, 10).unwrap());
    }

    #[test]
    fn noiseless_samples_sit_on_class_means() {
        let mut cfg = MultiviewConfig::new(2, [3, 3, 3]);
        cfg.noise = 0.0;
        let data = gen_multiview(&cfg, 20, 1).unwrap();
        let means = cfg.class_means();
        for (n, &y) in data.labels().iter().enumerate() {
            for v in 0..3 {
                assert_eq!(data.unlabeled().sample(n)[v], means[v][y].as_slice());
            }
        }
    }

    #[test]
    fn class_frequencies_follow_prior() {
        let mut cfg = MultiviewConfig::new(3, [1, 1, 1]);
        cfg.pi = vec![0.2, 0.3, 0.5];
        let m = 100_000;
        let data = gen_multiview(&cfg, m, 3).unwrap();
        for (y, &p) in cfg.pi.iter().enumerate() {
            let f = data.labels().iter().filter(|&&l| l == y).count() as f64 / m as f64;
            assert!((f - p).abs() < 0.01);
        }
        cfg.pi = vec![0.5, 0.6, -0.1];
        assert!(gen_multiview(&cfg, 1, 0).is_err());
    }

    #[test]
    fn dimming_values() {
        let img = vec![0.1; 25];
        assert_eq!(apply_dimming(&img, 5, 5, 0.0, DimConvention::Divide, 1.0), img);
        let out = apply_dimming(&img, 5, 5, 5.0, DimConvention::Divide, 10.0);
        assert!((out[12] - 0.1 * 2f64.exp()).abs() < 1e-15);
        assert!((out[0] - 0.1 * (-3f64).exp()).abs() < 1e-15);
        let bright = apply_dimming(&[1.0; 25], 5, 5, 5.0, DimConvention::Divide, 1.0);
        assert_eq!(bright[12], 1.0);
        let mul = apply_dimming(&img, 5, 5, 5.0, DimConvention::Multiply, 10.0);
        assert!((mul[0] - 0.1 * 3f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn patchwork_interleaves_constant_sources() {
        let pixels: Vec<f64> = [1.0, 2.0, 3.0].iter().flat_map(|&c| vec![c; 9]).collect();
        // the same class, so any draw of 3 images picks among the three constants
        let set = ImageSet::new(3, 3, pixels, vec![0, 0, 0], 1).unwrap();
        let composite: Vec<f64> = (0..9).map(|p| set.image(p % 3)[p]).collect();
        assert_eq!(composite, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let views = split_views(&composite);
        assert_eq!(interleave([&views[0], &views[1], &views[2]]), composite);
        let data = compose_patchwork(&set, &PatchworkConfig { shift: 0.0, convention: DimConvention::Divide, pi: None }, 10, 0).unwrap();
        assert_eq!(data.unlabeled().dims(), [3, 3, 3]);
    }

    #[test]
    fn patchwork_needs_three_images_per_class() {
        let set = ImageSet::new(2, 2, vec![0.0; 16], vec![0, 0, 1, 1], 2).unwrap();
        let cfg = PatchworkConfig {
            shift: 0.0,
            convention: DimConvention::Divide,
            pi: None,
        };
        assert!(compose_patchwork(&set, &cfg, 5, 0).is_err());
    }

    #[test]
    fn patchwork_view_means_match_sources() {
        let set = synthetic_digits(2, 20, 6, 4).unwrap();
        let cfg = PatchworkConfig {
            shift: 0.0,
            convention: DimConvention::Divide,
            pi: None,
        };
        let data = compose_patchwork(&set, &cfg, 10_000, 5).unwrap();
        for y in 0..2 {
            let members: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == y).collect();
            let mut src = vec![0.0; 36];
            for &i in &members {
                for (s, p) in src.iter_mut().zip(set.image(i)) {
                    *s += p / members.len() as f64;
                }
            }
            let rows: Vec<usize> = (0..data.len()).filter(|&n| data.labels()[n] == y).collect();
            for v in 0..3 {
                let want: Vec<f64> = src.iter().skip(v).step_by(3).copied().collect();
                for (r, w) in want.iter().enumerate() {
                    let got = rows.iter().map(|&n| data.unlabeled().sample(n)[v][r]).sum::<f64>() / rows.len() as f64;
                    assert!((got - w).abs() < 0.02);
                }
            }
        }
    }

    fn two_state(transition: Vec<Vec<f64>>) -> HmmSpec {
        HmmSpec {
            k: 2,
            t_len: 50,
            initial: vec![0.5, 0.5],
            transition,
            emission: EmissionSpec::Categorical {
                probs: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
            },
        }
    }

    #[test]
    fn identity_transitions_freeze_state() {
        let spec = two_state(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let seqs = gen_hmm_sequences(&spec, 20, 1).unwrap();
        for n in 0..20 {
            let p = seqs.path(n);
            assert!(p.iter().all(|&s| s == p[0]));
        }
        assert_eq!(seqs, gen_hmm_sequences(&spec, 20, 1).unwrap());
    }

    #[test]
    fn transition_counts_match() {
        let a = vec![vec![0.7, 0.3], vec![0.2, 0.8]];
        let spec = two_state(a.clone());
        let seqs = gen_hmm_sequences(&spec, 2000, 2).unwrap();
        let mut counts = [[0.0f64; 2]; 2];
        for n in 0..2000 {
            for w in seqs.path(n).windows(2) {
                counts[w[0]][w[1]] += 1.0;
            }
        }
        for i in 0..2 {
            let row: f64 = counts[i].iter().sum();
            for j in 0..2 {
                assert!((counts[i][j] / row - a[i][j]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn idx_parsing() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102, 0, 0, 0, 255]);
        let (n, r, c, px) = parse_idx_images(&img).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px[1], 1.0);
        assert_eq!(px[2], 0.2);
        let labels = [0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
        assert!(parse_idx_images(&labels).is_err());
        assert!(parse_idx_images(&[]).is_err());
        assert!(parse_idx_images(&img[..20]).is_err());
    }
}
