use super::{normalize_shaped, validate_raw, Cell, GridDistribution, GridError, GridShape, MASS_TOLERANCE};

/// Per-cell match distributions: row `(x, y)` holds the probability that an
/// observation taken at `(x, y)` is matched to each cell `(x', y')`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchKernel {
    shape: GridShape,
    rows: Vec<Vec<f64>>,
}

impl MatchKernel {
    /// Every row is a delta on its own cell.
    pub fn identity(width: usize, height: usize) -> Result<Self, GridError> {
        let shape = GridShape::new(width, height)?;
        let rows = (0..shape.len())
            .map(|i| {
                let mut row = vec![0.0; shape.len()];
                row[i] = 1.0;
                row
            })
            .collect();
        Ok(Self { shape, rows })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// Match distribution for observations taken at `cell`.
    pub fn row(&self, cell: Cell) -> &[f64] {
        &self.rows[self.shape.index(cell)]
    }

    pub fn row_distribution(&self, cell: Cell) -> GridDistribution {
        GridDistribution {
            shape: self.shape,
            density: self.row(cell).to_vec(),
        }
    }
}

/// Builds a kernel by querying `matcher` once per cell, row-major.
///
/// Each returned row must be a valid distribution over the same grid; the
/// first offending cell is reported.
pub fn estimate_kernel(
    width: usize,
    height: usize,
    mut matcher: impl FnMut(Cell) -> Vec<f64>,
) -> Result<MatchKernel, GridError> {
    let shape = GridShape::new(width, height)?;
    let mut rows = Vec::with_capacity(shape.len());
    for cell in shape.cells() {
        let row = matcher(cell);
        let invalid = |reason| GridError::InvalidKernelRow {
            cell,
            reason: Box::new(reason),
        };
        let sum = validate_raw(shape, &row).map_err(invalid)?;
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(invalid(GridError::NotNormalized { sum }));
        }
        rows.push(row);
    }
    Ok(MatchKernel { shape, rows })
}

/// Bayesian fusion of a predicted prior with a matcher observation:
/// `posterior(c) ∝ prior(c) · Σ_{c'} observation(c') · K_c(c')`.
pub fn fuse_match(
    prior: &GridDistribution,
    observation: &GridDistribution,
    kernel: &MatchKernel,
) -> Result<GridDistribution, GridError> {
    prior.shape.ensure_same(observation.shape)?;
    prior.shape.ensure_same(kernel.shape)?;
    let support: Vec<(usize, f64)> = observation
        .density
        .iter()
        .enumerate()
        .filter(|(_, &o)| o > 0.0)
        .map(|(j, &o)| (j, o))
        .collect();
    let raw = prior
        .density
        .iter()
        .zip(&kernel.rows)
        .map(|(&p, row)| {
            if p == 0.0 {
                return 0.0;
            }
            let likelihood: f64 = support.iter().map(|&(j, o)| row[j] * o).sum();
            p * likelihood
        })
        .collect();
    normalize_shaped(prior.shape, raw)
}

/// Fuses a GPS fix that is exact with probability `p_gps` and otherwise
/// lands uniformly on one of the eight neighbors of the true cell.
pub fn fuse_gps(prior: &GridDistribution, reading: Cell, p_gps: f64) -> Result<GridDistribution, GridError> {
    let shape = prior.shape;
    shape.check(reading)?;
    if !(p_gps > 0.0 && p_gps <= 1.0) {
        return Err(GridError::InvalidProbability(p_gps));
    }
    let mut raw = vec![0.0; shape.len()];
    let i = shape.index(reading);
    raw[i] = prior.density[i] * p_gps;
    let spread = (1.0 - p_gps) / 8.0;
    for n in shape.neighbors(reading) {
        let j = shape.index(n);
        raw[j] = prior.density[j] * spread;
    }
    normalize_shaped(shape, raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::normalize;

    fn uniform_kernel(w: usize, h: usize) -> MatchKernel {
        let n = (w * h) as f64;
        estimate_kernel(w, h, |_| vec![1.0 / n; w * h]).unwrap()
    }

    #[test]
    fn identity_kernel_with_delta_observation_gives_delta() {
        let prior = GridDistribution::uniform(4, 3).unwrap();
        let obs = GridDistribution::delta(4, 3, Cell::new(2, 1)).unwrap();
        let k = MatchKernel::identity(4, 3).unwrap();
        let post = fuse_match(&prior, &obs, &k).unwrap();
        assert_eq!(post, obs);
    }

    #[test]
    fn uniform_rows_leave_prior_unchanged() {
        let prior = normalize(3, 2, vec![1.0, 2.0, 3.0, 0.0, 5.0, 1.0]).unwrap();
        let obs = GridDistribution::delta(3, 2, Cell::new(0, 1)).unwrap();
        let post = fuse_match(&prior, &obs, &uniform_kernel(3, 2)).unwrap();
        for (a, b) in post.densities().iter().zip(prior.densities()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_by_three_matches_direct_summation() {
        let shape = GridShape::new(3, 3).unwrap();
        let row_for = |c: Cell| -> Vec<f64> {
            let mut row = vec![0.3 / 8.0; 9];
            row[shape.index(c)] = 0.7;
            row
        };
        let kernel = estimate_kernel(3, 3, row_for).unwrap();
        let prior = GridDistribution::uniform(3, 3).unwrap();
        let obs = GridDistribution::delta(3, 3, Cell::new(1, 1)).unwrap();
        let post = fuse_match(&prior, &obs, &kernel).unwrap();

        // brute force over (x, y) and (x', y')
        let mut expected = [[0.0f64; 3]; 3];
        let mut total = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                let mut s = 0.0;
                for yp in 0..3 {
                    for xp in 0..3 {
                        let o = if (xp, yp) == (1, 1) { 1.0 } else { 0.0 };
                        let k = if (xp, yp) == (x, y) { 0.7 } else { 0.3 / 8.0 };
                        s += o * k;
                    }
                }
                expected[y][x] = (1.0 / 9.0) * s;
                total += expected[y][x];
            }
        }
        for y in 0..3 {
            for x in 0..3 {
                let want = expected[y][x] / total;
                assert!((post.get(Cell::new(x, y)) - want).abs() < 1e-12);
            }
        }
        // 0.7 / (0.7 + 8 * 0.0375)
        assert!((post.get(Cell::new(1, 1)) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn fuse_match_rejects_mismatched_shapes() {
        let prior = GridDistribution::uniform(3, 3).unwrap();
        let obs = GridDistribution::uniform(3, 2).unwrap();
        let k = MatchKernel::identity(3, 3).unwrap();
        assert!(matches!(
            fuse_match(&prior, &obs, &k),
            Err(GridError::DimensionMismatch { .. })
        ));
        let obs = GridDistribution::uniform(3, 3).unwrap();
        let k = MatchKernel::identity(2, 3).unwrap();
        assert!(matches!(
            fuse_match(&prior, &obs, &k),
            Err(GridError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fuse_match_reports_vanished_belief() {
        let prior = GridDistribution::delta(3, 3, Cell::new(0, 0)).unwrap();
        let obs = GridDistribution::delta(3, 3, Cell::new(2, 2)).unwrap();
        let k = MatchKernel::identity(3, 3).unwrap();
        assert_eq!(fuse_match(&prior, &obs, &k), Err(GridError::VanishedBelief));
    }

    #[test]
    fn estimate_kernel_examples() {
        let shape = GridShape::new(4, 3).unwrap();
        let k = estimate_kernel(4, 3, |c| {
            let mut row = vec![0.0; 12];
            row[shape.index(c)] = 1.0;
            row
        })
        .unwrap();
        assert_eq!(k, MatchKernel::identity(4, 3).unwrap());

        let u = uniform_kernel(4, 3);
        for c in shape.cells() {
            assert!(u.row(c).iter().all(|&p| (p - 1.0 / 12.0).abs() < 1e-15));
        }
    }

    #[test]
    fn estimate_kernel_names_offending_cell() {
        let err = estimate_kernel(3, 3, |c| {
            if c == Cell::new(2, 1) {
                vec![0.5; 9]
            } else {
                vec![1.0 / 9.0; 9]
            }
        })
        .unwrap_err();
        match err {
            GridError::InvalidKernelRow { cell, reason } => {
                assert_eq!(cell, Cell::new(2, 1));
                assert!(matches!(*reason, GridError::NotNormalized { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = estimate_kernel(3, 3, |_| vec![1.0; 4]).unwrap_err();
        assert!(matches!(
            err,
            GridError::InvalidKernelRow {
                cell: Cell { x: 0, y: 0 },
                ..
            }
        ));
    }

    #[test]
    fn gps_exact_reading_gives_delta() {
        let prior = normalize(5, 5, (1..=25).map(f64::from).collect()).unwrap();
        let post = fuse_gps(&prior, Cell::new(3, 2), 1.0).unwrap();
        assert_eq!(post.get(Cell::new(3, 2)), 1.0);
    }

    #[test]
    fn gps_uniform_prior_interior_and_corner() {
        let prior = GridDistribution::uniform(5, 5).unwrap();
        let post = fuse_gps(&prior, Cell::new(2, 2), 0.92).unwrap();
        assert!((post.get(Cell::new(2, 2)) - 0.92).abs() < 1e-12);
        for n in prior.shape().neighbors(Cell::new(2, 2)) {
            assert!((post.get(n) - 0.01).abs() < 1e-12);
        }
        assert_eq!(post.get(Cell::new(0, 0)), 0.0);

        // corner: the reading plus three in-bounds neighbors
        let post = fuse_gps(&prior, Cell::new(0, 0), 0.92).unwrap();
        assert!((post.get(Cell::new(0, 0)) - 0.92 / 0.95).abs() < 1e-12);
        for n in [Cell::new(1, 0), Cell::new(0, 1), Cell::new(1, 1)] {
            assert!((post.get(n) - 0.01 / 0.95).abs() < 1e-12);
        }
    }

    #[test]
    fn gps_errors() {
        let prior = GridDistribution::delta(5, 5, Cell::new(0, 0)).unwrap();
        assert_eq!(fuse_gps(&prior, Cell::new(4, 4), 0.9), Err(GridError::VanishedBelief));
        assert!(matches!(
            fuse_gps(&prior, Cell::new(5, 0), 0.9),
            Err(GridError::OutOfBounds { .. })
        ));
        assert_eq!(
            fuse_gps(&prior, Cell::new(0, 0), 0.0),
            Err(GridError::InvalidProbability(0.0))
        );
        assert!(fuse_gps(&prior, Cell::new(0, 0), 1.2).is_err());
    }
}
