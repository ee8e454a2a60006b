//! Forward propagation of lifted snapshots, reconstruction back to the
//! grid, thresholding into world-frame occupancy points, and normalized
//! prediction-error metrics against the centralized oracle.

use nalgebra::{DMatrix, DVector, Point2};

use crate::error::{Error, Result};
use crate::lifting::{DataMatrices, DensitySnapshot, KoopmanOperator};

/// Mapping from grid indices to the robot's coordinate frame. Row `r`
/// runs along +y, column `c` along +x; occupancy points sit at cell
/// centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorldMap {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridWorldMap {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64, rows: usize, cols: usize) -> Result<Self> {
        if cell_size <= 0.0 || !cell_size.is_finite() {
            return Err(Error::invalid_input("cell size must be positive"));
        }
        Ok(GridWorldMap { origin_x, origin_y, cell_size, rows, cols })
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Point2<f64> {
        Point2::new(
            self.origin_x + (c as f64 + 0.5) * self.cell_size,
            self.origin_y + (r as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.cell_size
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.cell_size
    }
}

/// Predicted density maps for horizon steps `t+1 .. t+H`.
#[derive(Debug, Clone)]
pub struct ForecastSequence {
    pub origin_timestamp: usize,
    pub predictions: Vec<DensitySnapshot>,
}

impl ForecastSequence {
    pub fn horizon(&self) -> usize {
        self.predictions.len()
    }
}

/// World-frame centers of cells whose predicted intensity exceeds the
/// threshold, with the source intensities kept alongside for optional
/// density-weighted fitting.
#[derive(Debug, Clone)]
pub struct OccupancyPointSet {
    pub points: Vec<Point2<f64>>,
    pub intensities: Vec<f64>,
    pub threshold: f64,
    pub horizon_step: usize,
}

impl OccupancyPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `K^h x_t` for `h = 1..=horizon` by repeated multiplication.
pub fn propagate(op: &KoopmanOperator, lifted: &DVector<f64>, horizon: usize) -> Result<Vec<DVector<f64>>> {
    if op.dim() != lifted.len() {
        return Err(Error::shape(format!(
            "operator dim {} vs state dim {}",
            op.dim(),
            lifted.len()
        )));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut state = lifted.clone();
    for _ in 0..horizon {
        state = op.matrix() * state;
        out.push(state.clone());
    }
    Ok(out)
}

/// Inverse of the row-major lift, clamping values to `[0, 1]`.
pub fn reconstruct(lifted: &DVector<f64>, rows: usize, cols: usize, timestamp: usize) -> Result<DensitySnapshot> {
    if lifted.len() != rows * cols {
        return Err(Error::shape(format!(
            "vector of length {} cannot fill a {rows}x{cols} grid",
            lifted.len()
        )));
    }
    let values: Vec<f64> = lifted.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    DensitySnapshot::new(rows, cols, values, timestamp)
}

/// Propagate and reconstruct in one go.
pub fn forecast_maps(
    op: &KoopmanOperator,
    latest: &DensitySnapshot,
    horizon: usize,
) -> Result<ForecastSequence> {
    let lifted = propagate(op, &latest.lift(), horizon)?;
    let predictions = lifted
        .iter()
        .enumerate()
        .map(|(h, v)| reconstruct(v, latest.rows(), latest.cols(), latest.timestamp() + h + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForecastSequence { origin_timestamp: latest.timestamp(), predictions })
}

/// Cells with intensity strictly above `threshold`, as world
/// coordinates of their centers.
pub fn threshold_set(
    snapshot: &DensitySnapshot,
    threshold: f64,
    map: &GridWorldMap,
    horizon_step: usize,
) -> Result<OccupancyPointSet> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid_input(format!("threshold {threshold} outside [0, 1)")));
    }
    if map.rows != snapshot.rows() || map.cols != snapshot.cols() {
        return Err(Error::shape(format!(
            "map is {}x{} but snapshot is {}x{}",
            map.rows,
            map.cols,
            snapshot.rows(),
            snapshot.cols()
        )));
    }
    let mut points = Vec::new();
    let mut intensities = Vec::new();
    for r in 0..snapshot.rows() {
        for c in 0..snapshot.cols() {
            let v = snapshot.value(r, c);
            if v > threshold {
                points.push(map.cell_center(r, c));
                intensities.push(v);
            }
        }
    }
    Ok(OccupancyPointSet { points, intensities, threshold, horizon_step })
}

/// Normalized prediction error; the denominator vanishes exactly when
/// the centralized operator fits the data perfectly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizedError {
    Ratio(f64),
    /// Denominator below 1e-14: the oracle fit is exact and the ratio
    /// is undefined.
    ExactFit,
}

impl NormalizedError {
    pub fn ratio(&self) -> Option<f64> {
        match self {
            NormalizedError::Ratio(v) => Some(*v),
            NormalizedError::ExactFit => None,
        }
    }
}

/// One-step and `h`-step normalized errors
/// `e_1 = ||Y − K_d X|| / ||Y − K* X||` and
/// `e_h = ||Y⁽ʰ⁾ − K_d^h X|| / ||Y⁽ʰ⁾ − (K*)^h X||`, where `Y⁽ʰ⁾` shifts
/// the single-trajectory data `h` steps and columns without an `h`-step
/// successor are dropped from numerator and denominator alike.
pub fn normalized_errors(
    kd: &KoopmanOperator,
    kstar: &KoopmanOperator,
    data: &DataMatrices,
    h: usize,
) -> Result<(NormalizedError, NormalizedError)> {
    if h == 0 {
        return Err(Error::invalid_input("horizon must be at least 1"));
    }
    if kd.dim() != data.dim() || kstar.dim() != data.dim() {
        return Err(Error::shape("operator and data dimensions differ"));
    }
    if h > data.pair_count() {
        return Err(Error::invalid_input(format!(
            "horizon {h} exceeds the {}-pair trajectory",
            data.pair_count()
        )));
    }
    if !data.is_trajectory() {
        return Err(Error::invalid_input(
            "multi-step ground truth requires trajectory-consistent pairs (X[:,k+1] = Y[:,k])",
        ));
    }

    let e1 = error_ratio(&(data.y() - kd.matrix() * data.x()), &(data.y() - kstar.matrix() * data.x()));

    // Frames s_0..s_N live in the columns of X plus the last column of Y.
    let n = data.pair_count();
    let keep = n - h + 1;
    let x_kept = data.x().columns(0, keep).into_owned();
    let mut y_h = DMatrix::zeros(data.dim(), keep);
    for k in 0..keep {
        // s_{k+h} is X column k+h when it exists, else the final Y column.
        if k + h < n {
            y_h.set_column(k, &data.x().column(k + h));
        } else {
            y_h.set_column(k, &data.y().column(n - 1));
        }
    }
    let kd_h = matrix_power_apply(kd.matrix(), &x_kept, h);
    let ks_h = matrix_power_apply(kstar.matrix(), &x_kept, h);
    let eh = error_ratio(&(&y_h - kd_h), &(&y_h - ks_h));

    Ok((e1, eh))
}

fn error_ratio(num: &DMatrix<f64>, den: &DMatrix<f64>) -> NormalizedError {
    let d = den.norm();
    if d < 1e-14 {
        NormalizedError::ExactFit
    } else {
        NormalizedError::Ratio(num.norm() / d)
    }
}

fn matrix_power_apply(k: &DMatrix<f64>, x: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let mut out = x.clone();
    for _ in 0..h {
        out = k * out;
    }
    out
}
