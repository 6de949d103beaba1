//! Dense 3D scalar volumes stored in the canonical voxel order.
//!
//! A volume of shape (rows R, cols C, planes P) is stored so that the voxel
//! `(r, c, p)` lives at linear index `q = ((p * R) + r) * C + c`: plane index
//! slowest, column index fastest. Every file format in this crate uses the
//! same ordering, so [`vectorize`] and [`devectorize`] are exact copies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordering tag written into every sidecar.
pub const VOXEL_ORDERING: &str = "p-slowest,c-fastest";

/// Shape of a volume as (rows, cols, planes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub rows: usize,
    pub cols: usize,
    pub planes: usize,
}

impl Dims3 {
    pub const fn new(rows: usize, cols: usize, planes: usize) -> Self {
        Self { rows, cols, planes }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols * self.planes
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, r: usize, c: usize, p: usize) -> usize {
        (p * self.rows + r) * self.cols + c
    }

    /// Inverse of [`Dims3::index`], returning `(r, c, p)`.
    #[inline]
    pub const fn coords(&self, q: usize) -> (usize, usize, usize) {
        let c = q % self.cols;
        let rest = q / self.cols;
        (rest % self.rows, c, rest / self.rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims3,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: Dims3) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims3, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    /// Builds a volume by evaluating `f(r, c, p)` at every voxel.
    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for p in 0..dims.planes {
            for r in 0..dims.rows {
                for c in 0..dims.cols {
                    data.push(f(r, c, p));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, p: usize) -> f64 {
        self.data[self.dims.index(r, c, p)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, p: usize, value: f64) {
        let q = self.dims.index(r, c, p);
        self.data[q] = value;
    }

    /// Axial slice at plane `p`, row-major `rows x cols`.
    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.dims.rows * self.dims.cols;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Flattens a volume into a vector of length `Q` in canonical order.
pub fn vectorize(volume: &Volume) -> Vec<f64> {
    volume.data.clone()
}

/// Rebuilds a volume of shape `dims` from its canonical vectorization.
pub fn devectorize(values: &[f64], dims: Dims3) -> Result<Volume> {
    if values.len() != dims.len() {
        return Err(Error::invalid(format!(
            "vector of length {} cannot be reshaped to {}x{}x{} (Q = {})",
            values.len(),
            dims.rows,
            dims.cols,
            dims.planes,
            dims.len()
        )));
    }
    Ok(Volume {
        dims,
        data: values.to_vec(),
    })
}

/// Builds a volume from a `[r][c][p]` nested array, the natural reading order
/// for hand-written fixtures.
pub fn volume_from_nested(nested: &[Vec<Vec<f64>>]) -> Result<Volume> {
    let rows = nested.len();
    let cols = nested.first().map_or(0, Vec::len);
    let planes = nested
        .first()
        .and_then(|row| row.first())
        .map_or(0, Vec::len);
    if rows == 0 || cols == 0 || planes == 0 {
        return Err(Error::invalid("nested volume has an empty axis"));
    }
    let ragged = nested
        .iter()
        .any(|row| row.len() != cols || row.iter().any(|col| col.len() != planes));
    if ragged {
        return Err(Error::invalid("nested volume is ragged"));
    }
    let dims = Dims3::new(rows, cols, planes);
    Ok(Volume::from_fn(dims, |r, c, p| nested[r][c][p]))
}
