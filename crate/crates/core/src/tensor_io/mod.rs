//! Dense matrices, feature sets and the classifier head, plus NPY and
//! manifest loading.

mod manifest;
pub mod npy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, DatasetEntry, DatasetManifest, HeadEntry, RunData, FORMAT_VERSION};
pub use npy::{load_labels, load_matrix, read_matrix, write_matrix, write_matrix_to};

/// Row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Parameter(format!("shape {rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::dims("matrix data length", expected, data.len()));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::dims("row length", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Matrix whose values were produced internally from finite inputs.
    pub(crate) fn from_parts_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, and a zero-width matrix still has rows.
        let cols = self.cols;
        (0..self.rows).map(move |r| &self.data[r * cols..(r + 1) * cols])
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    /// New matrix holding the listed rows in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_parts_unchecked(indices.len(), self.cols, data)
    }

    /// New matrix with columns reordered so that output column `j` is input
    /// column `perm[j]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Matrix> {
        if perm.len() != self.cols {
            return Err(Error::dims("column permutation", self.cols, perm.len()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.iter_rows() {
            data.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(Matrix::from_parts_unchecked(self.rows, self.cols, data))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(Error::dims("stacked matrix columns", cols, part.cols));
            }
            rows += part.rows;
            data.extend_from_slice(&part.data);
        }
        Ok(Matrix::from_parts_unchecked(rows, cols, data))
    }
}

/// Which part of an experiment a feature set plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdTrain,
    IdTest,
    Ood,
    Validation,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::IdTrain => "id_train",
            Role::IdTest => "id_test",
            Role::Ood => "ood",
            Role::Validation => "validation",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Penultimate-layer activations for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub name: String,
    pub role: Role,
    pub features: Matrix,
    pub labels: Option<Vec<i64>>,
}

impl FeatureSet {
    pub fn new(name: impl Into<String>, role: Role, features: Matrix) -> Self {
        FeatureSet {
            name: name.into(),
            role,
            features,
            labels: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Linear classification head: `logits = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weights: Matrix,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::Parameter(format!(
                "classifier head needs at least 2 classes, got {}",
                weights.rows()
            )));
        }
        if bias.len() != weights.rows() {
            return Err(Error::dims("head bias length", weights.rows(), bias.len()));
        }
        if let Some((index, &value)) = bias.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(ClassifierHead { weights, bias })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }
}
