//! Lifted data handling: snapshot vectorization, `(X, Y)` pair assembly,
//! the centralized least-squares operator, its first-order optimality
//! residual, and the row partitioning handed to the consensus agents.
//!
//! The lift is a direct row-major vectorization of the intensity grid;
//! entry `(r, c)` maps to index `r * cols + c`. Reconstruction in
//! [`crate::forecast`] inverts it exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One rectangular grid of occupancy intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySnapshot {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    timestamp: usize,
}

impl DensitySnapshot {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, timestamp: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid_input("snapshot grid must be non-empty"));
        }
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "snapshot has {} values, expected {}x{}={}",
                values.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid_input(format!(
                "snapshot value {v} outside [0, 1]"
            )));
        }
        Ok(DensitySnapshot { rows, cols, values, timestamp })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn timestamp(&self) -> usize {
        self.timestamp
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Lift dimension `n = rows * cols`.
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major vectorization.
    pub fn lift(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// Lifted snapshot pairs: column `k` of `Y` is the lift of the successor
/// of the state lifted in column `k` of `X`.
#[derive(Debug, Clone)]
pub struct DataMatrices {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl DataMatrices {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "X is {:?}, Y is {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(DataMatrices { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Lift dimension `n`.
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Sample-pair count `N`.
    pub fn pair_count(&self) -> usize {
        self.x.ncols()
    }

    /// True when the columns form one trajectory, i.e. `X[:, k+1] == Y[:, k]`.
    pub fn is_trajectory(&self) -> bool {
        (1..self.pair_count()).all(|k| self.x.column(k) == self.y.column(k - 1))
    }
}

/// Organize an ordered snapshot sequence of length `T ≥ 2` into
/// `N = T - 1` transition pairs.
pub fn assemble_pairs(snapshots: &[DensitySnapshot]) -> Result<DataMatrices> {
    if snapshots.len() < 2 {
        return Err(Error::invalid_input(format!(
            "need at least 2 snapshots, got {}",
            snapshots.len()
        )));
    }
    let (rows, cols) = (snapshots[0].rows(), snapshots[0].cols());
    for s in snapshots {
        if s.rows() != rows || s.cols() != cols {
            return Err(Error::shape(format!(
                "snapshot at t={} is {}x{}, expected {}x{}",
                s.timestamp(),
                s.rows(),
                s.cols(),
                rows,
                cols
            )));
        }
    }
    let n = rows * cols;
    let pairs = snapshots.len() - 1;
    let mut x = DMatrix::zeros(n, pairs);
    let mut y = DMatrix::zeros(n, pairs);
    for k in 0..pairs {
        x.set_column(k, &snapshots[k].lift());
        y.set_column(k, &snapshots[k + 1].lift());
    }
    DataMatrices::new(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Centralized,
    Distributed,
}

/// Finite-dimensional propagator of lifted states.
#[derive(Debug, Clone)]
pub struct KoopmanOperator {
    matrix: DMatrix<f64>,
    provenance: Provenance,
}

impl KoopmanOperator {
    pub fn new(matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::shape(format!(
                "operator must be square, got {:?}",
                matrix.shape()
            )));
        }
        Ok(KoopmanOperator { matrix, provenance })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// Centralized least-squares fit `argmin_K ||Y - K X||_F`.
///
/// With `ridge == 0` the minimum-norm solution `Y X⁺` is returned, which
/// is deterministic even when `X Xᵀ` is singular. With `ridge > 0` the
/// regularized normal equations `K = Y Xᵀ (X Xᵀ + ridge·I)⁻¹` are solved
/// instead.
pub fn centralized_edmd(data: &DataMatrices, ridge: f64) -> Result<KoopmanOperator> {
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::invalid_input("ridge must be a nonnegative finite value"));
    }
    let n = data.dim();
    let matrix = if ridge > 0.0 {
        let gram = data.x() * data.x().transpose() + DMatrix::identity(n, n) * ridge;
        let chol = nalgebra::Cholesky::new(gram)
            .ok_or_else(|| Error::Numerical("ridge-regularized Gram not positive definite".into()))?;
        // K (XXᵀ + λI) = Y Xᵀ, solved through the transposed system.
        let rhs = data.x() * data.y().transpose();
        chol.solve(&rhs).transpose()
    } else {
        let svd = data.x().clone().svd(true, true);
        let eps = f64::EPSILON * svd.singular_values.max() * data.x().nrows().max(data.x().ncols()) as f64;
        let pinv = svd
            .pseudo_inverse(eps)
            .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
        data.y() * pinv
    };
    KoopmanOperator::new(matrix, Provenance::Centralized)
}

/// First-order optimality residual `||(Y - K X) Xᵀ||_F`; zero (to
/// tolerance) exactly when `K` minimizes `||Y - K X||_F`.
pub fn residual_orthogonality(op: &KoopmanOperator, data: &DataMatrices) -> Result<f64> {
    if op.dim() != data.dim() {
        return Err(Error::shape(format!(
            "operator dim {} vs data dim {}",
            op.dim(),
            data.dim()
        )));
    }
    let residual = data.y() - op.matrix() * data.x();
    Ok((residual * data.x().transpose()).norm())
}

/// One agent's contiguous row block of the data matrices.
#[derive(Debug, Clone)]
pub struct Partition {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// First global row owned by this block.
    pub row_offset: usize,
}

impl Partition {
    pub fn row_count(&self) -> usize {
        self.x.nrows()
    }
}

/// Split the data into `p` contiguous row blocks. Uses `sizes` when
/// given (must sum to `n`); otherwise requires `n` divisible by `p`.
pub fn partition_rows(
    data: &DataMatrices,
    p: usize,
    sizes: Option<&[usize]>,
) -> Result<Vec<Partition>> {
    if p == 0 {
        return Err(Error::invalid_input("partition count must be at least 1"));
    }
    let n = data.dim();
    let block_sizes: Vec<usize> = match sizes {
        Some(s) => {
            if s.len() != p {
                return Err(Error::invalid_input(format!(
                    "{} sizes given for {} partitions",
                    s.len(),
                    p
                )));
            }
            if s.iter().any(|&v| v == 0) {
                return Err(Error::invalid_input("partition sizes must be positive"));
            }
            if s.iter().sum::<usize>() != n {
                return Err(Error::invalid_input(format!(
                    "partition sizes sum to {}, expected {n}",
                    s.iter().sum::<usize>()
                )));
            }
            s.to_vec()
        }
        None => {
            if n % p != 0 {
                return Err(Error::invalid_input(format!(
                    "lift dimension {n} not divisible by {p}; pass explicit sizes"
                )));
            }
            vec![n / p; p]
        }
    };
    let mut out = Vec::with_capacity(p);
    let mut offset = 0;
    for size in block_sizes {
        out.push(Partition {
            x: data.x().rows(offset, size).into_owned(),
            y: data.y().rows(offset, size).into_owned(),
            row_offset: offset,
        });
        offset += size;
    }
    Ok(out)
}
