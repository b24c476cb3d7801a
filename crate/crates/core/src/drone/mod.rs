//! Grid drone-navigation scenario: a drone flies from A to B over a tiled
//! map while an assurance network predicts whether it will stray into the
//! no-fly zone around the planned route.

mod matcher;
mod mission;

pub use matcher::{ambiguity_profile, expected_match, match_kernel, synthetic_match};
pub use mission::{
    drone_topology, run_mission, AbortInfo, CvAgent, Frame, MissionOutcome, MissionRow, MissionTrace, StepDiagnostic,
    MISSION_CSV_HEADER,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{NetworkError, Signal};
use crate::grid::{Cell, DiffusionParams, Displacement, GridError, GridMask, GridShape};

/// Largest per-step displacement of a revised plan, in cells.
pub const MAX_STEP: f64 = 1.5;

#[derive(Debug, Error)]
pub enum DroneError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("plan is empty")]
    EmptyPlan,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Inclusive rectangle of cloud-covered tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CloudRect {
    pub fn contains(&self, c: Cell) -> bool {
        (self.x0..=self.x1).contains(&c.x) && (self.y0..=self.y1).contains(&c.y)
    }
}

/// Scripted wind: an extra displacement added to the random perturbation
/// when moving into step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gust {
    pub t: u64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub target: Cell,
    pub nofly_margin: f64,
    pub clouds: Vec<CloudRect>,
    pub horizon: usize,
    pub threshold: f64,
    pub p_gps: f64,
    pub diffusion: DiffusionParams,
    /// Per-axis bound of the uniform perturbation, cells per step.
    pub perturbation_scale: f64,
    pub gusts: Vec<Gust>,
    /// Cells per step of the initial straight-line plan.
    pub speed: f64,
    pub resource_budget: u64,
    pub resource_threshold: u64,
    pub gps_cost: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 20,
            height: 24,
            start: Cell::new(0, 12),
            target: Cell::new(19, 12),
            nofly_margin: 2.0,
            clouds: Vec::new(),
            horizon: 5,
            threshold: 0.05,
            p_gps: 0.92,
            diffusion: DiffusionParams::new(0.1).expect("valid leak"),
            perturbation_scale: 0.3,
            gusts: Vec::new(),
            speed: 1.0,
            resource_budget: 12,
            resource_threshold: 2,
            gps_cost: 1,
        }
    }
}

impl WorldConfig {
    pub fn shape(&self) -> Result<GridShape, DroneError> {
        Ok(GridShape::new(self.width, self.height)?)
    }

    pub fn validate(&self) -> Result<(), DroneError> {
        let shape = self.shape()?;
        let bad = |msg: String| Err(DroneError::Config(msg));
        for (what, c) in [("start", self.start), ("target", self.target)] {
            if !shape.contains(c) {
                return bad(format!("{what} {c} outside {}x{} grid", self.width, self.height));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if !(self.p_gps > 0.0 && self.p_gps <= 1.0) {
            return bad(format!("p_gps {} not in (0, 1]", self.p_gps));
        }
        if !(self.nofly_margin >= 0.0) {
            return bad(format!("nofly_margin {} is negative", self.nofly_margin));
        }
        if !(self.perturbation_scale >= 0.0 && self.perturbation_scale.is_finite()) {
            return bad(format!("perturbation_scale {} invalid", self.perturbation_scale));
        }
        if !(self.speed > 0.0 && self.speed <= MAX_STEP) {
            return bad(format!("speed {} not in (0, {MAX_STEP}]", self.speed));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.start == self.target {
            return bad("start and target coincide".into());
        }
        for g in &self.gusts {
            Displacement::new(g.dx, g.dy)?;
        }
        for r in &self.clouds {
            if r.x0 > r.x1 || r.y0 > r.y1 || !shape.contains(Cell::new(r.x1, r.y1)) {
                return bad(format!("cloud rectangle {r:?} empty or outside grid"));
            }
        }
        Ok(())
    }

    pub fn cloud_mask(&self) -> Result<GridMask, DroneError> {
        Ok(GridMask::from_fn(self.width, self.height, |c| {
            self.clouds.iter().any(|r| r.contains(c))
        })?)
    }

    /// Straight line from start to target at `speed` cells per step.
    pub fn initial_plan(&self) -> Vec<Displacement> {
        let dx = self.target.x as f64 - self.start.x as f64;
        let dy = self.target.y as f64 - self.start.y as f64;
        let n = (dx.hypot(dy) / self.speed - 1e-9).ceil().max(1.0) as usize;
        vec![
            Displacement {
                dx: dx / n as f64,
                dy: dy / n as f64
            };
            n
        ]
    }

    fn gust(&self, t: u64) -> Displacement {
        self.gusts
            .iter()
            .filter(|g| g.t == t)
            .fold(Displacement::ZERO, |acc, g| acc + Displacement { dx: g.dx, dy: g.dy })
    }
}

/// Chebyshev distance from point `p` to the segment from `a` to `b`.
pub fn chebyshev_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let dist = |s: f64| {
        let s = s.clamp(0.0, 1.0);
        (p.0 - a.0 - s * dx).abs().max((p.1 - a.1 - s * dy).abs())
    };
    // The objective is piecewise linear and convex in s; its minimum sits at
    // an endpoint, a zero of either term, or where the two terms cross.
    let (rx, ry) = (p.0 - a.0, p.1 - a.1);
    let mut candidates = vec![0.0, 1.0];
    if dx != 0.0 {
        candidates.push(rx / dx);
    }
    if dy != 0.0 {
        candidates.push(ry / dy);
    }
    if dx - dy != 0.0 {
        candidates.push((rx - ry) / (dx - dy));
    }
    if dx + dy != 0.0 {
        candidates.push((rx + ry) / (dx + dy));
    }
    candidates.into_iter().map(dist).fold(f64::INFINITY, f64::min)
}

fn center(c: Cell) -> (f64, f64) {
    (c.x as f64, c.y as f64)
}

/// Cells farther than `nofly_margin` (Chebyshev) from the segment A→B.
pub fn build_nofly_mask(config: &WorldConfig) -> Result<GridMask, DroneError> {
    config.validate()?;
    let (a, b) = (center(config.start), center(config.target));
    let mask = GridMask::from_fn(config.width, config.height, |c| {
        chebyshev_to_segment(center(c), a, b) > config.nofly_margin + 1e-12
    })?;
    Ok(mask)
}

/// Drone state as seen by the control agent.
#[derive(Debug, Clone, PartialEq)]
pub struct MissionState {
    pub t: u64,
    pub truth: (f64, f64),
    pub plan: Vec<Displacement>,
    pub resources: u64,
    pub finished: bool,
}

impl MissionState {
    pub fn initial(config: &WorldConfig) -> Self {
        Self {
            t: 0,
            truth: center(config.start),
            plan: config.initial_plan(),
            resources: config.resource_budget,
            finished: false,
        }
    }

    /// Grid cell nearest to the true position.
    pub fn truth_cell(&self) -> Cell {
        nearest_cell(self.truth)
    }
}

fn nearest_cell(p: (f64, f64)) -> Cell {
    Cell::new(p.0.round().max(0.0) as usize, p.1.round().max(0.0) as usize)
}

/// Moves the truth by the head of the plan plus wind and a per-axis uniform
/// perturbation, clamped to the grid.
pub fn step_ground_truth(
    state: &MissionState,
    config: &WorldConfig,
    rng: &mut impl Rng,
) -> Result<MissionState, DroneError> {
    let (&step, rest) = state.plan.split_first().ok_or(DroneError::EmptyPlan)?;
    let s = config.perturbation_scale;
    let (nx, ny) = if s > 0.0 {
        (rng.random_range(-s..=s), rng.random_range(-s..=s))
    } else {
        (0.0, 0.0)
    };
    let gust = config.gust(state.t + 1);
    let x = state.truth.0 + step.dx + nx + gust.dx;
    let y = state.truth.1 + step.dy + ny + gust.dy;
    Ok(MissionState {
        t: state.t + 1,
        truth: (
            x.clamp(0.0, (config.width - 1) as f64),
            y.clamp(0.0, (config.height - 1) as f64),
        ),
        plan: rest.to_vec(),
        resources: state.resources,
        finished: state.finished,
    })
}

/// Three-way check-violation decision.
pub fn check_violation_policy(probability: f64, resources: u64, config: &WorldConfig, escalated: bool) -> Signal {
    if probability <= config.threshold {
        Signal::Continue
    } else if !escalated && resources >= config.resource_threshold + config.gps_cost {
        Signal::MoreData
    } else {
        Signal::Change
    }
}

/// Euclidean distance from `p` to the nearest masked cell center.
pub fn clearance(p: (f64, f64), mask: &GridMask) -> f64 {
    mask.iter_set()
        .map(|c| c.euclidean(p.0, p.1))
        .fold(f64::INFINITY, f64::min)
}

/// Corrective plan from the belief mean: one lateral step of at most
/// `margin/2` cells away from the nearest masked cells, then a straight
/// line to the target, every step capped at [`MAX_STEP`].
///
/// The lateral step length is the one in `[0, margin/2]` that maximizes the
/// clearance after the step, so it never brings the drone closer to the
/// zone. A mean inside the zone instead steps toward the nearest safe cell.
pub fn revise_plan(
    mean: (f64, f64),
    target: Cell,
    mask: &GridMask,
    margin: f64,
    remaining: usize,
) -> Result<Vec<Displacement>, DroneError> {
    if remaining == 0 {
        return Err(DroneError::EmptyPlan);
    }
    let toward = |from: (f64, f64), steps: usize| {
        let d = Displacement {
            dx: (target.x as f64 - from.0) / steps as f64,
            dy: (target.y as f64 - from.1) / steps as f64,
        };
        d.capped(MAX_STEP)
    };
    let shape = mask.shape();
    let here = nearest_cell(mean);
    if shape.contains(here) && mask.get(here) {
        let safe = shape
            .cells()
            .filter(|&c| !mask.get(c))
            .min_by(|a, b| a.euclidean(mean.0, mean.1).total_cmp(&b.euclidean(mean.0, mean.1)));
        if let Some(safe) = safe {
            let first = Displacement {
                dx: safe.x as f64 - mean.0,
                dy: safe.y as f64 - mean.1,
            }
            .capped(MAX_STEP);
            let after = (mean.0 + first.dx, mean.1 + first.dy);
            let mut plan = vec![first];
            plan.extend(std::iter::repeat_n(
                toward(after, remaining.saturating_sub(1).max(1)),
                remaining - 1,
            ));
            return Ok(plan);
        }
    }
    if remaining == 1 {
        return Ok(vec![toward(mean, 1)]);
    }
    let lateral = lateral_step(mean, mask, (margin / 2.0).min(MAX_STEP));
    let after = (mean.0 + lateral.dx, mean.1 + lateral.dy);
    let mut plan = vec![lateral];
    plan.extend(std::iter::repeat_n(toward(after, remaining - 1), remaining - 1));
    Ok(plan)
}

fn lateral_step(mean: (f64, f64), mask: &GridMask, max_len: f64) -> Displacement {
    let base = clearance(mean, mask);
    if !base.is_finite() || max_len <= 0.0 {
        return Displacement::ZERO;
    }
    let (mut ux, mut uy) = (0.0, 0.0);
    for c in mask.iter_set() {
        let d = c.euclidean(mean.0, mean.1);
        if d <= base + 1e-9 && d > 0.0 {
            ux += (mean.0 - c.x as f64) / d;
            uy += (mean.1 - c.y as f64) / d;
        }
    }
    let n = ux.hypot(uy);
    if n < 1e-9 {
        return Displacement::ZERO;
    }
    let (ux, uy) = (ux / n, uy / n);
    let shape = mask.shape();
    let inside = |p: (f64, f64)| {
        (0.0..=(shape.width - 1) as f64).contains(&p.0) && (0.0..=(shape.height - 1) as f64).contains(&p.1)
    };
    const SAMPLES: usize = 20;
    let mut best = (0.0, base);
    for k in 1..=SAMPLES {
        let m = max_len * k as f64 / SAMPLES as f64;
        let p = (mean.0 + m * ux, mean.1 + m * uy);
        if !inside(p) {
            break;
        }
        let c = clearance(p, mask);
        if c > best.1 + 1e-12 {
            best = (m, c);
        }
    }
    Displacement {
        dx: best.0 * ux,
        dy: best.0 * uy,
    }
}
