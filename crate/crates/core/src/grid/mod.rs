//! Discrete probability distributions over a 2-D grid of cells.
//!
//! Cells are addressed as `(x, y)` with `0 <= x < width` and `0 <= y < height`
//! and stored row-major (`y * width + x`). Every [`GridDistribution`] handed
//! out by this module is nonnegative and sums to one within
//! [`MASS_TOLERANCE`].

mod fusion;
mod pgm;
mod propagation;

pub use fusion::{estimate_kernel, fuse_gps, fuse_match, MatchKernel};
pub use pgm::{write_pgm, PgmImage};
pub use propagation::{forecast, propagate, violation_probability, DiffusionParams, Displacement, TrajectoryForecast};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of total mass from one.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("vanished belief: every cell has zero density")]
    VanishedBelief,
    #[error("invalid density {value} at cell {cell}")]
    InvalidDensity { cell: Cell, value: f64 },
    #[error("grid is {width}x{height} but {len} densities were supplied")]
    LengthMismatch { width: usize, height: usize, len: usize },
    #[error("grid must have at least one cell (got {width}x{height})")]
    EmptyGrid { width: usize, height: usize },
    #[error("dimension mismatch: {expected:?} vs {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("densities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("cell {cell} lies outside the {width}x{height} grid")]
    OutOfBounds { cell: Cell, width: usize, height: usize },
    #[error("matcher produced an invalid distribution for cell {cell}: {reason}")]
    InvalidKernelRow { cell: Cell, reason: Box<GridError> },
    #[error("probability {0} outside (0, 1]")]
    InvalidProbability(f64),
    #[error("leak {0} outside [0, 1]")]
    InvalidLeak(f64),
    #[error("non-finite displacement ({dx}, {dy})")]
    InvalidDisplacement { dx: f64, dy: f64 },
    #[error("forecast horizon must be at least 1")]
    ZeroHorizon,
    #[error("{what} has {len} steps, horizon needs {horizon}")]
    PlanTooShort {
        what: &'static str,
        len: usize,
        horizon: usize,
    },
}

/// Grid cell coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// Chebyshev (king-move) distance.
    pub fn chebyshev(self, other: Cell) -> usize {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }

    pub fn euclidean(self, x: f64, y: f64) -> f64 {
        ((self.x as f64 - x).powi(2) + (self.y as f64 - y).powi(2)).sqrt()
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Width and height shared by grids, masks and kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
}

impl GridShape {
    pub fn new(width: usize, height: usize) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyGrid { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn len(self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn index(self, cell: Cell) -> usize {
        cell.y * self.width + cell.x
    }

    pub fn cell(self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    pub fn contains(self, cell: Cell) -> bool {
        cell.x < self.width && cell.y < self.height
    }

    pub fn check(self, cell: Cell) -> Result<(), GridError> {
        if self.contains(cell) {
            Ok(())
        } else {
            Err(GridError::OutOfBounds {
                cell,
                width: self.width,
                height: self.height,
            })
        }
    }

    /// Row-major iterator over all cells.
    pub fn cells(self) -> impl Iterator<Item = Cell> {
        (0..self.len()).map(move |i| self.cell(i))
    }

    /// In-bounds 8-neighbors of `cell`, row-major.
    pub fn neighbors(self, cell: Cell) -> impl Iterator<Item = Cell> {
        let (x, y) = (cell.x as isize, cell.y as isize);
        let (w, h) = (self.width as isize, self.height as isize);
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .filter_map(move |(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                (nx >= 0 && ny >= 0 && nx < w && ny < h).then(|| Cell::new(nx as usize, ny as usize))
            })
    }

    fn ensure_same(self, other: GridShape) -> Result<(), GridError> {
        if self == other {
            Ok(())
        } else {
            Err(GridError::DimensionMismatch {
                expected: (self.width, self.height),
                found: (other.width, other.height),
            })
        }
    }
}

/// Probability mass function over grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridDistribution {
    shape: GridShape,
    density: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    width: usize,
    height: usize,
    density: Vec<f64>,
}

impl TryFrom<RawGrid> for GridDistribution {
    type Error = GridError;

    fn try_from(raw: RawGrid) -> Result<Self, Self::Error> {
        GridDistribution::from_normalized(raw.width, raw.height, raw.density)
    }
}

impl From<GridDistribution> for RawGrid {
    fn from(d: GridDistribution) -> Self {
        RawGrid {
            width: d.shape.width,
            height: d.shape.height,
            density: d.density,
        }
    }
}

fn validate_raw(shape: GridShape, density: &[f64]) -> Result<f64, GridError> {
    if density.len() != shape.len() {
        return Err(GridError::LengthMismatch {
            width: shape.width,
            height: shape.height,
            len: density.len(),
        });
    }
    let mut sum = 0.0;
    for (i, &value) in density.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(GridError::InvalidDensity {
                cell: shape.cell(i),
                value,
            });
        }
        sum += value;
    }
    Ok(sum)
}

/// Scales a raw nonnegative grid so it sums to one.
///
/// Fails with [`GridError::VanishedBelief`] when every cell is zero, which
/// is what fusing contradictory evidence looks like.
pub fn normalize(width: usize, height: usize, raw: Vec<f64>) -> Result<GridDistribution, GridError> {
    let shape = GridShape::new(width, height)?;
    normalize_shaped(shape, raw)
}

pub(crate) fn normalize_shaped(shape: GridShape, mut raw: Vec<f64>) -> Result<GridDistribution, GridError> {
    let sum = validate_raw(shape, &raw)?;
    if sum <= 0.0 {
        return Err(GridError::VanishedBelief);
    }
    for v in &mut raw {
        *v /= sum;
    }
    Ok(GridDistribution { shape, density: raw })
}

impl GridDistribution {
    /// Accepts densities that already sum to one (within [`MASS_TOLERANCE`]).
    pub fn from_normalized(width: usize, height: usize, density: Vec<f64>) -> Result<Self, GridError> {
        let shape = GridShape::new(width, height)?;
        let sum = validate_raw(shape, &density)?;
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(GridError::NotNormalized { sum });
        }
        Ok(Self { shape, density })
    }

    pub fn uniform(width: usize, height: usize) -> Result<Self, GridError> {
        let shape = GridShape::new(width, height)?;
        let p = 1.0 / shape.len() as f64;
        Ok(Self {
            shape,
            density: vec![p; shape.len()],
        })
    }

    pub fn delta(width: usize, height: usize, at: Cell) -> Result<Self, GridError> {
        let shape = GridShape::new(width, height)?;
        shape.check(at)?;
        let mut density = vec![0.0; shape.len()];
        density[shape.index(at)] = 1.0;
        Ok(Self { shape, density })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    /// Density at `cell`; zero outside the grid.
    pub fn get(&self, cell: Cell) -> f64 {
        if self.shape.contains(cell) {
            self.density[self.shape.index(cell)]
        } else {
            0.0
        }
    }

    /// Row-major densities.
    pub fn densities(&self) -> &[f64] {
        &self.density
    }

    pub fn into_densities(self) -> Vec<f64> {
        self.density
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum()
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    /// Density-weighted centroid in cell coordinates.
    pub fn mean_location(&self) -> (f64, f64) {
        let mut mx = 0.0;
        let mut my = 0.0;
        for (i, &p) in self.density.iter().enumerate() {
            let c = self.shape.cell(i);
            mx += p * c.x as f64;
            my += p * c.y as f64;
        }
        let total = self.total_mass();
        (mx / total, my / total)
    }

    /// Cell of greatest density; ties go to the lowest `y`, then lowest `x`.
    pub fn argmax_location(&self) -> Cell {
        let mut best = 0;
        for (i, &p) in self.density.iter().enumerate() {
            if p > self.density[best] {
                best = i;
            }
        }
        self.shape.cell(best)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.density.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// Boolean mask over a grid (no-fly zones, cloud cover).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMask {
    shape: GridShape,
    cells: Vec<bool>,
}

impl GridMask {
    pub fn empty(width: usize, height: usize) -> Result<Self, GridError> {
        let shape = GridShape::new(width, height)?;
        Ok(Self {
            shape,
            cells: vec![false; shape.len()],
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(Cell) -> bool) -> Result<Self, GridError> {
        let shape = GridShape::new(width, height)?;
        Ok(Self {
            shape,
            cells: shape.cells().map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn get(&self, cell: Cell) -> bool {
        self.shape.contains(cell) && self.cells[self.shape.index(cell)]
    }

    pub fn set(&mut self, cell: Cell, value: bool) {
        let i = self.shape.index(cell);
        self.cells[i] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_clear(&self) -> bool {
        self.count() == 0
    }

    /// Masked cells in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| self.shape.cell(i))
    }

    pub(crate) fn flags(&self) -> &[bool] {
        &self.cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_constant_grid_is_uniform() {
        let d = normalize(4, 4, vec![2.0; 16]).unwrap();
        assert!(d.densities().iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn normalize_single_cell_is_delta() {
        let mut raw = vec![0.0; 12];
        raw[5] = 0.3;
        let d = normalize(4, 3, raw).unwrap();
        assert_eq!(d.get(Cell::new(1, 1)), 1.0);
        assert_eq!(d.total_mass(), 1.0);
    }

    #[test]
    fn normalize_rejects_zero_negative_and_nan() {
        assert_eq!(normalize(2, 2, vec![0.0; 4]), Err(GridError::VanishedBelief));
        assert!(matches!(
            normalize(2, 2, vec![1.0, -0.5, 0.0, 0.0]),
            Err(GridError::InvalidDensity { .. })
        ));
        assert!(matches!(
            normalize(2, 2, vec![1.0, f64::NAN, 0.0, 0.0]),
            Err(GridError::InvalidDensity { .. })
        ));
        assert!(matches!(
            normalize(2, 2, vec![1.0; 3]),
            Err(GridError::LengthMismatch { .. })
        ));
        assert!(matches!(normalize(0, 2, vec![]), Err(GridError::EmptyGrid { .. })));
    }

    #[test]
    fn mean_location_examples() {
        let d = GridDistribution::delta(6, 6, Cell::new(3, 4)).unwrap();
        assert_eq!(d.mean_location(), (3.0, 4.0));
        let u = GridDistribution::uniform(4, 4).unwrap();
        let (x, y) = u.mean_location();
        assert!((x - 1.5).abs() < 1e-12 && (y - 1.5).abs() < 1e-12);
        let mut raw = vec![0.0; 3];
        raw[0] = 0.5;
        raw[2] = 0.5;
        assert_eq!(normalize(3, 1, raw).unwrap().mean_location(), (1.0, 0.0));
    }

    #[test]
    fn argmax_tie_breaks_row_major() {
        let d = GridDistribution::delta(8, 4, Cell::new(5, 1)).unwrap();
        assert_eq!(d.argmax_location(), Cell::new(5, 1));
        assert_eq!(
            GridDistribution::uniform(5, 5).unwrap().argmax_location(),
            Cell::new(0, 0)
        );

        let shape = GridShape::new(5, 5).unwrap();
        let mut raw = vec![0.2 / 23.0; 25];
        raw[shape.index(Cell::new(1, 1))] = 0.4;
        raw[shape.index(Cell::new(3, 3))] = 0.4;
        assert_eq!(normalize(5, 5, raw).unwrap().argmax_location(), Cell::new(1, 1));
    }

    #[test]
    fn neighbors_respect_bounds() {
        let shape = GridShape::new(3, 3).unwrap();
        assert_eq!(shape.neighbors(Cell::new(1, 1)).count(), 8);
        assert_eq!(shape.neighbors(Cell::new(0, 0)).count(), 3);
        assert_eq!(shape.neighbors(Cell::new(2, 1)).count(), 5);
    }

    #[test]
    fn serde_rejects_unnormalized() {
        let ok = serde_json::to_string(&GridDistribution::uniform(2, 1).unwrap()).unwrap();
        assert_eq!(ok, r#"{"width":2,"height":1,"density":[0.5,0.5]}"#);
        let bad = r#"{"width":2,"height":1,"density":[0.5,0.6]}"#;
        assert!(serde_json::from_str::<GridDistribution>(bad).is_err());
    }
}
