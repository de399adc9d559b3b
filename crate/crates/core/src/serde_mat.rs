//! Matrices as JSON-friendly lists of rows.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows<'de, D: Deserializer<'de>>(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, D::Error> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(serde::de::Error::custom("ragged matrix rows"));
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
}

#[allow(dead_code)]
pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    to_rows(m).serialize(s)
}

#[allow(dead_code)]
pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    from_rows::<D>(Vec::deserialize(d)?)
}

pub mod triple {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[DMatrix<f64>; 3], s: S) -> Result<S::Ok, S::Error> {
        [to_rows(&m[0]), to_rows(&m[1]), to_rows(&m[2])].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[DMatrix<f64>; 3], D::Error> {
        let [a, b, c] = <[Vec<Vec<f64>>; 3]>::deserialize(d)?;
        Ok([from_rows::<D>(a)?, from_rows::<D>(b)?, from_rows::<D>(c)?])
    }
}
