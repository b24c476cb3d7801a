//! Control-driven propagation of a location distribution and multi-step
//! trajectory forecasts.

use serde::{Deserialize, Serialize};

use super::{Cell, GridDistribution, GridError, GridMask, GridShape};

/// Per-step movement in cells.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
}

impl Displacement {
    pub const ZERO: Displacement = Displacement { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Result<Self, GridError> {
        if dx.is_finite() && dy.is_finite() {
            Ok(Self { dx, dy })
        } else {
            Err(GridError::InvalidDisplacement { dx, dy })
        }
    }

    pub fn norm(self) -> f64 {
        self.dx.hypot(self.dy)
    }

    /// Scales down to at most `max` cells, keeping direction.
    pub fn capped(self, max: f64) -> Self {
        let n = self.norm();
        if n > max && n > 0.0 {
            Self {
                dx: self.dx * max / n,
                dy: self.dy * max / n,
            }
        } else {
            self
        }
    }
}

impl std::ops::Add for Displacement {
    type Output = Displacement;

    fn add(self, rhs: Self) -> Self {
        Self {
            dx: self.dx + rhs.dx,
            dy: self.dy + rhs.dy,
        }
    }
}

/// Fraction of each cell's mass that leaks to its 8-neighbors per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DiffusionParams {
    leak: f64,
}

impl DiffusionParams {
    pub const NONE: DiffusionParams = DiffusionParams { leak: 0.0 };

    pub fn new(leak: f64) -> Result<Self, GridError> {
        if (0.0..=1.0).contains(&leak) {
            Ok(Self { leak })
        } else {
            Err(GridError::InvalidLeak(leak))
        }
    }

    pub fn leak(self) -> f64 {
        self.leak
    }
}

impl TryFrom<f64> for DiffusionParams {
    type Error = GridError;

    fn try_from(leak: f64) -> Result<Self, GridError> {
        Self::new(leak)
    }
}

impl From<DiffusionParams> for f64 {
    fn from(d: DiffusionParams) -> f64 {
        d.leak
    }
}

/// Shifts mass by `step` and then diffuses it.
///
/// Fractional shifts split each cell's mass bilinearly over the four cells
/// its shifted center overlaps. A shifted center that leaves the grid is
/// clamped to the boundary first. Diffusion moves `leak` of every cell's
/// mass to its in-bounds neighbors in equal shares, so total mass is
/// conserved.
pub fn propagate(
    belief: &GridDistribution,
    step: Displacement,
    diffusion: DiffusionParams,
) -> Result<GridDistribution, GridError> {
    let step = Displacement::new(step.dx, step.dy)?;
    let shape = belief.shape;
    let shifted = shift(shape, &belief.density, step);
    let diffused = diffuse(shape, &shifted, diffusion.leak);
    super::normalize_shaped(shape, diffused)
}

fn shift(shape: GridShape, density: &[f64], step: Displacement) -> Vec<f64> {
    if step == Displacement::ZERO {
        return density.to_vec();
    }
    let max_x = (shape.width - 1) as f64;
    let max_y = (shape.height - 1) as f64;
    let mut out = vec![0.0; shape.len()];
    for (i, &m) in density.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let c = shape.cell(i);
        let px = (c.x as f64 + step.dx).clamp(0.0, max_x);
        let py = (c.y as f64 + step.dy).clamp(0.0, max_y);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let w = wx * wy;
                if w > 0.0 {
                    out[shape.index(Cell::new(x0 + ox, y0 + oy))] += m * w;
                }
            }
        }
    }
    out
}

fn diffuse(shape: GridShape, density: &[f64], leak: f64) -> Vec<f64> {
    if leak == 0.0 {
        return density.to_vec();
    }
    let mut out = vec![0.0; shape.len()];
    for (i, &m) in density.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let c = shape.cell(i);
        let neighbors: Vec<Cell> = shape.neighbors(c).collect();
        if neighbors.is_empty() {
            out[i] += m;
            continue;
        }
        out[i] += m * (1.0 - leak);
        let share = m * leak / neighbors.len() as f64;
        for n in neighbors {
            out[shape.index(n)] += share;
        }
    }
    out
}

/// Predicted location distributions `F_0 .. F_{H-1}`, with `F_0` the belief
/// the forecast started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryForecast {
    steps: Vec<GridDistribution>,
}

impl TrajectoryForecast {
    pub fn steps(&self) -> &[GridDistribution] {
        &self.steps
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn initial(&self) -> &GridDistribution {
        &self.steps[0]
    }
}

/// Forecasts `horizon` steps: `F_0 = belief` and
/// `F_n = propagate(F_{n-1}, plan[n-1] + perturb[n-1])`.
pub fn forecast(
    belief: &GridDistribution,
    plan: &[Displacement],
    perturb: &[Displacement],
    diffusion: DiffusionParams,
    horizon: usize,
) -> Result<TrajectoryForecast, GridError> {
    if horizon == 0 {
        return Err(GridError::ZeroHorizon);
    }
    for (what, seq) in [("plan", plan), ("perturbation", perturb)] {
        if seq.len() < horizon {
            return Err(GridError::PlanTooShort {
                what,
                len: seq.len(),
                horizon,
            });
        }
    }
    let mut steps = Vec::with_capacity(horizon);
    steps.push(belief.clone());
    for n in 1..horizon {
        let next = propagate(&steps[n - 1], plan[n - 1] + perturb[n - 1], diffusion)?;
        steps.push(next);
    }
    Ok(TrajectoryForecast { steps })
}

/// Greatest density any forecast step puts on a masked cell.
pub fn violation_probability(forecast: &TrajectoryForecast, mask: &GridMask) -> Result<f64, GridError> {
    let shape = forecast.initial().shape;
    shape.ensure_same(mask.shape())?;
    let flags = mask.flags();
    Ok(forecast
        .steps
        .iter()
        .flat_map(|f| f.density.iter().zip(flags).filter(|(_, &m)| m).map(|(&p, _)| p))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(dx: f64, dy: f64) -> Displacement {
        Displacement::new(dx, dy).unwrap()
    }

    #[test]
    fn zero_move_zero_leak_is_identity() {
        let belief = crate::grid::normalize(4, 3, (0..12).map(|i| (i % 5) as f64).collect()).unwrap();
        let out = propagate(&belief, Displacement::ZERO, DiffusionParams::NONE).unwrap();
        assert_eq!(out, belief);
    }

    #[test]
    fn integer_move_shifts_delta() {
        let belief = GridDistribution::delta(6, 6, Cell::new(2, 2)).unwrap();
        let out = propagate(&belief, d(1.0, 0.0), DiffusionParams::NONE).unwrap();
        assert_eq!(out, GridDistribution::delta(6, 6, Cell::new(3, 2)).unwrap());
    }

    #[test]
    fn half_move_splits_mass() {
        let belief = GridDistribution::delta(6, 6, Cell::new(2, 2)).unwrap();
        let out = propagate(&belief, d(0.5, 0.0), DiffusionParams::NONE).unwrap();
        assert_eq!(out.get(Cell::new(2, 2)), 0.5);
        assert_eq!(out.get(Cell::new(3, 2)), 0.5);

        let out = propagate(&belief, d(0.25, -0.5), DiffusionParams::NONE).unwrap();
        assert!((out.get(Cell::new(2, 1)) - 0.375).abs() < 1e-15);
        assert!((out.get(Cell::new(3, 1)) - 0.125).abs() < 1e-15);
        assert!((out.get(Cell::new(2, 2)) - 0.375).abs() < 1e-15);
        assert!((out.get(Cell::new(3, 2)) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn off_grid_mass_clamps_to_exit_cell() {
        let belief = GridDistribution::delta(5, 5, Cell::new(4, 1)).unwrap();
        let out = propagate(&belief, d(3.0, -2.5), DiffusionParams::NONE).unwrap();
        assert_eq!(out.get(Cell::new(4, 0)), 1.0);
    }

    #[test]
    fn leak_spreads_to_neighbors() {
        let belief = GridDistribution::delta(5, 5, Cell::new(2, 2)).unwrap();
        let out = propagate(&belief, Displacement::ZERO, DiffusionParams::new(0.4).unwrap()).unwrap();
        assert!((out.get(Cell::new(2, 2)) - 0.6).abs() < 1e-15);
        assert!((out.get(Cell::new(1, 3)) - 0.05).abs() < 1e-15);

        let corner = GridDistribution::delta(5, 5, Cell::new(0, 0)).unwrap();
        let out = propagate(&corner, Displacement::ZERO, DiffusionParams::new(0.3).unwrap()).unwrap();
        assert!((out.get(Cell::new(1, 1)) - 0.1).abs() < 1e-15);
        assert!((out.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diffusion_params_validate() {
        assert!(DiffusionParams::new(-0.1).is_err());
        assert!(DiffusionParams::new(1.1).is_err());
        assert!(DiffusionParams::new(f64::NAN).is_err());
        assert!(Displacement::new(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn forecast_edge_cases() {
        let belief = GridDistribution::delta(4, 4, Cell::new(1, 1)).unwrap();
        let plan = vec![Displacement::ZERO; 5];
        let f = forecast(&belief, &plan, &plan, DiffusionParams::NONE, 1).unwrap();
        assert_eq!(f.steps(), std::slice::from_ref(&belief));

        let f = forecast(&belief, &plan, &plan, DiffusionParams::NONE, 5).unwrap();
        assert!(f.steps().iter().all(|s| *s == belief));

        assert_eq!(
            forecast(&belief, &plan, &plan, DiffusionParams::NONE, 0),
            Err(GridError::ZeroHorizon)
        );
        assert!(matches!(
            forecast(&belief, &plan[..2], &plan, DiffusionParams::NONE, 3),
            Err(GridError::PlanTooShort { what: "plan", .. })
        ));
        assert!(matches!(
            forecast(&belief, &plan, &plan[..2], DiffusionParams::NONE, 3),
            Err(GridError::PlanTooShort {
                what: "perturbation",
                ..
            })
        ));
    }

    #[test]
    fn violation_probability_examples() {
        let belief = GridDistribution::delta(5, 1, Cell::new(0, 0)).unwrap();
        let plan = vec![d(1.0, 0.0); 4];
        let zero = vec![Displacement::ZERO; 4];
        let f = forecast(&belief, &plan, &zero, DiffusionParams::NONE, 4).unwrap();

        let far = GridMask::from_fn(5, 1, |c| c.x == 4).unwrap();
        assert_eq!(violation_probability(&f, &far).unwrap(), 0.0);
        let hit = GridMask::from_fn(5, 1, |c| c.x == 2).unwrap();
        assert_eq!(violation_probability(&f, &hit).unwrap(), 1.0);
        assert_eq!(violation_probability(&f, &GridMask::empty(5, 1).unwrap()).unwrap(), 0.0);
        assert!(violation_probability(&f, &GridMask::empty(4, 1).unwrap()).is_err());
    }
}
