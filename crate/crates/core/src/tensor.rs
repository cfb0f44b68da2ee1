//! Dense f64 tensors and fixed-order reductions.
//!
//! All numerics in this crate are double precision with single-threaded,
//! fixed-order arithmetic, so "deterministic" means bitwise, not
//! tolerance-level.

use crate::error::{Error, Result};

/// Dense row-major f64 tensor. Shapes used in practice are `[n]`, `[r, c]`
/// and `[b, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Input(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// 2-D constructor from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("empty row list".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Input("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row view of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Fixed left-to-right pairwise-tree sum: adjacent pairs are combined level
/// by level. The tree shape depends only on `n`, so results are bitwise
/// reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        _ => {
            let mut buf = values.to_vec();
            let mut n = buf.len();
            while n > 1 {
                let half = n / 2;
                for i in 0..half {
                    buf[i] = buf[2 * i] + buf[2 * i + 1];
                }
                if n % 2 == 1 {
                    buf[half] = buf[n - 1];
                }
                n = half + n % 2;
            }
            buf[0]
        }
    }
}

/// Pairwise-tree sum over canonically ordered operands (IEEE total order).
/// Sorting first makes the result bitwise invariant under any permutation of
/// the inputs, which plain fixed trees are not.
pub fn canonical_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    pairwise_sum(&sorted)
}

pub fn canonical_mean(values: &[f64]) -> f64 {
    canonical_sum(values) / values.len() as f64
}
