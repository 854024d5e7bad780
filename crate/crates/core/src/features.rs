//! Row-major sample × feature matrices.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        if data.len() != rows * cols {
            return Err(FeatureError::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FeatureError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[self ‖ other]` row by row.
    pub fn concat_columns(&self, other: &FeatureMatrix) -> Result<Self, FeatureError> {
        if self.rows != other.rows {
            return Err(FeatureError::Data(format!("row counts differ: {} vs {}", self.rows, other.rows)));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self { rows: self.rows, cols, data })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    /// Keeps the columns where `mask` is true.
    pub fn select_columns(&self, mask: &[bool]) -> Result<Self, FeatureError> {
        if mask.len() != self.cols {
            return Err(FeatureError::Shape(format!("mask of {} for {} columns", mask.len(), self.cols)));
        }
        let keep: Vec<usize> = (0..self.cols).filter(|&j| mask[j]).collect();
        let mut data = Vec::with_capacity(self.rows * keep.len());
        for r in self.iter_rows() {
            data.extend(keep.iter().map(|&j| r[j]));
        }
        Ok(Self { rows: self.rows, cols: keep.len(), data })
    }

    /// Per-column mean and standard deviation (population); zero spreads become 1.
    pub fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.max(1) as f64;
        let mut mean = vec![0.0; self.cols];
        for r in self.iter_rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for j in 0..self.cols {
                std[j] += (r[j] - mean[j]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        (mean, std)
    }

    pub fn standardize(&self, mean: &[f64], std: &[f64]) -> Result<Self, FeatureError> {
        if mean.len() != self.cols || std.len() != self.cols {
            return Err(FeatureError::Shape("statistics do not match the column count".into()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
        Ok(out)
    }
}
