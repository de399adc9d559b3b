//! Binary dataset, moment and sequence files plus IDX and JSON ingestion.
//!
//! All binary formats are little-endian with a 4-byte magic and a `u32`
//! version; see `docs/schema.md` for the byte layouts.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;
use triview_core::data::{parse_idx_images, parse_idx_labels, ImageSet, Sequences};
use triview_core::linalg::Tensor3;
use triview_core::models::{ModelDescriptor, ViewLossModel, VIEWS};
use triview_core::moments::{MomentSet, PAIRS};
use triview_core::sample::{LabeledData, ViewData};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"TVDS";
pub const MOMENTS_MAGIC: [u8; 4] = *b"TVMS";
pub const SEQUENCES_MAGIC: [u8; 4] = *b"TVHM";
pub const FORMAT_VERSION: u32 = 1;

/// A multi-view sample as stored on disk, labels optional.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub data: ViewData,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn from_labeled(data: &LabeledData) -> Dataset {
        Dataset {
            k: data.k(),
            data: data.unlabeled().clone(),
            labels: Some(data.labels().to_vec()),
        }
    }

    /// The labeled view of the file, when it carries labels.
    pub fn labeled(&self) -> Result<Option<LabeledData>> {
        match &self.labels {
            Some(l) => Ok(Some(LabeledData::new(self.data.clone(), l.clone(), self.k)?)),
            None => Ok(None),
        }
    }

    /// The same samples with the label block dropped.
    pub fn without_labels(mut self) -> Dataset {
        self.labels = None;
        self
    }
}

/// Emission family recorded in a sequence file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionKind {
    Categorical,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFile {
    pub k: usize,
    pub emission: EmissionKind,
    pub data: Sequences,
    pub states: Option<Vec<usize>>,
}

/// Moments cached together with the class count they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFile {
    pub k: usize,
    pub moments: MomentSet,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, format!("truncated file ({} bytes)", self.bytes.len()))),
        }
    }

    fn magic(&mut self, want: [u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(&want)
                ),
            ));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "size does not fit in memory"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn labels(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        let labels: Vec<usize> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::format(self.path, format!("label {bad} outside 0..{k}")));
        }
        Ok(labels)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(self.path, format!("flag byte {b} is neither 0 nor 1"))),
        }
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, magic: [u8; 4]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

fn dim_u32(path: &Path, what: &str, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(path, format!("{what} {n} does not fit in 32 bits")))
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let dims = ds.data.dims();
    let m = ds.data.len();
    let mut out = Vec::with_capacity(33 + 4 * m * (dims.iter().sum::<usize>() + 1));
    header(&mut out, DATASET_MAGIC);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(ds.k as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(ds.labels.is_some() as u8);
    for v in 0..VIEWS {
        for &x in ds.data.view(v) {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(labels) = &ds.labels {
        for &y in labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(bytes, path);
    r.magic(DATASET_MAGIC)?;
    let m = r.size()?;
    let k = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let has_labels = r.flag()?;
    let mut views: [Vec<f64>; VIEWS] = Default::default();
    for (v, view) in views.iter_mut().enumerate() {
        let n = m
            .checked_mul(dims[v])
            .ok_or_else(|| Error::format(path, "size overflow"))?;
        *view = r.f32s(n)?;
    }
    let labels = if has_labels { Some(r.labels(m, k)?) } else { None };
    r.finish()?;
    let data = ViewData::new(dims, views)?;
    Ok(Dataset { k, data, labels })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    dim_u32(path, "k", ds.k)?;
    for d in ds.data.dims() {
        dim_u32(path, "view dimension", d)?;
    }
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}

pub fn encode_moments(file: &MomentFile) -> Vec<u8> {
    let ms = &file.moments;
    let mut out = Vec::new();
    header(&mut out, MOMENTS_MAGIC);
    out.extend_from_slice(&(file.k as u32).to_le_bytes());
    for d in ms.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ms.m as u64).to_le_bytes());
    out.push(ms.triple.is_some() as u8);
    let mut put = |x: f64| out.extend_from_slice(&x.to_le_bytes());
    for v in 0..VIEWS {
        ms.first[v].iter().for_each(|&x| put(x));
    }
    for p in &ms.pairs {
        for a in 0..p.nrows() {
            for b in 0..p.ncols() {
                put(p[(a, b)]);
            }
        }
    }
    put(ms.sq_norm);
    if let Some(t) = &ms.triple {
        t.as_slice().iter().for_each(|&x| put(x));
    }
    out
}

pub fn decode_moments(bytes: &[u8], path: &Path) -> Result<MomentFile> {
    let mut r = Reader::new(bytes, path);
    r.magic(MOMENTS_MAGIC)?;
    let k = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let m = r.size()?;
    let dense = r.flag()?;
    let first: [DVector<f64>; VIEWS] = [
        DVector::from_vec(r.f64s(dims[0])?),
        DVector::from_vec(r.f64s(dims[1])?),
        DVector::from_vec(r.f64s(dims[2])?),
    ];
    let mut pairs: [DMatrix<f64>; 3] = Default::default();
    for (p, &(v, w)) in PAIRS.iter().enumerate() {
        pairs[p] = DMatrix::from_row_slice(dims[v], dims[w], &r.f64s(dims[v] * dims[w])?);
    }
    let sq_norm = r.f64s(1)?[0];
    let triple = if dense {
        Some(Tensor3::from_vec(dims, r.f64s(dims[0] * dims[1] * dims[2])?)?)
    } else {
        None
    };
    r.finish()?;
    Ok(MomentFile {
        k,
        moments: MomentSet {
            m,
            dims,
            first,
            pairs,
            sq_norm,
            triple,
        },
    })
}

pub fn write_moments(path: &Path, file: &MomentFile) -> Result<()> {
    fs::write(path, encode_moments(file)).map_err(|e| Error::io(path, e))
}

pub fn read_moments(path: &Path) -> Result<MomentFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_moments(&bytes, path)
}

pub fn encode_sequences(file: &SequenceFile) -> Vec<u8> {
    let s = &file.data;
    let mut out = Vec::with_capacity(34 + 8 * s.obs.len() + 4 * s.m * s.t_len);
    header(&mut out, SEQUENCES_MAGIC);
    out.extend_from_slice(&(s.m as u64).to_le_bytes());
    out.extend_from_slice(&(s.t_len as u32).to_le_bytes());
    out.extend_from_slice(&(file.k as u32).to_le_bytes());
    out.push(match file.emission {
        EmissionKind::Categorical => 0,
        EmissionKind::Gaussian => 1,
    });
    out.extend_from_slice(&(s.obs_dim as u32).to_le_bytes());
    out.push(file.states.is_some() as u8);
    for &x in &s.obs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(states) = &file.states {
        for &y in states {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
    }
    out
}

pub fn decode_sequences(bytes: &[u8], path: &Path) -> Result<SequenceFile> {
    let mut r = Reader::new(bytes, path);
    r.magic(SEQUENCES_MAGIC)?;
    let m = r.size()?;
    let t_len = r.u32()? as usize;
    let k = r.u32()? as usize;
    let emission = match r.u8()? {
        0 => EmissionKind::Categorical,
        1 => EmissionKind::Gaussian,
        b => return Err(Error::format(path, format!("unknown emission type {b}"))),
    };
    let obs_dim = r.u32()? as usize;
    let has_states = r.flag()?;
    let cells = m
        .checked_mul(t_len)
        .ok_or_else(|| Error::format(path, "size overflow"))?;
    let obs = r.f64s(cells * obs_dim)?;
    let states = if has_states { Some(r.labels(cells, k)?) } else { None };
    r.finish()?;
    if m == 0 {
        return Err(Error::format(path, "no sequences"));
    }
    Ok(SequenceFile {
        k,
        emission,
        data: Sequences::new(t_len, obs_dim, obs)?,
        states,
    })
}

pub fn write_sequences(path: &Path, file: &SequenceFile) -> Result<()> {
    fs::write(path, encode_sequences(file)).map_err(|e| Error::io(path, e))
}

pub fn read_sequences(path: &Path) -> Result<SequenceFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequences(&bytes, path)
}

/// Reads an IDX image file and its label file; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes).map_err(|e| Error::format(images, e.to_string()))?;
    let labels_v = parse_idx_labels(&lab_bytes).map_err(|e| Error::format(labels, e.to_string()))?;
    if labels_v.len() != n {
        return Err(Error::format(
            labels,
            format!("{} labels for {} images", labels_v.len(), n),
        ));
    }
    let k = labels_v.iter().max().map_or(0, |&y| y + 1);
    Ok(ImageSet::new(cols, rows, pixels, labels_v, k)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ViewLossModel> {
    let desc: ModelDescriptor = read_json(path)?;
    Ok(ViewLossModel::from_descriptor(&desc)?)
}

pub fn write_model(path: &Path, model: &ViewLossModel) -> Result<()> {
    let desc = model
        .descriptor()
        .ok_or_else(|| Error::Config("models with custom scorers have no descriptor".into()))?;
    write_json(path, &desc)
}
