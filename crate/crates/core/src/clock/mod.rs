//! Clock-drift assurance: the local clock's deviation from a reference clock
//! is modelled as a Wiener process with drift and infinitesimal variance,
//! both estimated from a sliding window of `(local, reference)` readings.
//!
//! Slope bookkeeping: the fitted regression slope `m` maps local elapsed
//! time to reference elapsed time and is what corrects the local clock; the
//! deviation drift is `m - 1`.

mod monitor;
mod sim;

pub use monitor::{
    clock_topology, run_clock_monitor, ClockConfig, MonitorOutcome, ReadRecord, SyncEvent, SyncRow, SyncTrace,
    SYNC_CSV_HEADER, WARMUP_READS,
};
pub use sim::WienerClock;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::agent::NetworkError;

#[derive(Debug, Error)]
pub enum ClockError {
    #[error("window holds {len} samples; at least 2 are needed")]
    WindowTooShort { len: usize },
    #[error("window capacity must be at least 2 (got {0})")]
    CapacityTooSmall(usize),
    #[error("sample {index} does not advance both clocks")]
    NonMonotonic { index: usize },
    #[error("all local elapsed times are zero")]
    DegenerateWindow,
    #[error("interval {index} is not positive ({value})")]
    NonPositiveInterval { index: usize, value: f64 },
    #[error("{residuals} residuals but {intervals} intervals")]
    LengthMismatch { residuals: usize, intervals: usize },
    #[error("invalid assurance spec: {0}")]
    InvalidSpec(String),
    #[error("invalid clock parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Local clock reading `t_j` and the reference reading `T_j` taken at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockSamplePair {
    pub local: f64,
    pub reference: f64,
}

/// Most recent `capacity` sample pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pairs: VecDeque<ClockSamplePair>,
    capacity: usize,
}

impl SampleWindow {
    pub fn new(capacity: usize) -> Result<Self, ClockError> {
        if capacity < 2 {
            return Err(ClockError::CapacityTooSmall(capacity));
        }
        Ok(Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn from_pairs(capacity: usize, pairs: impl IntoIterator<Item = ClockSamplePair>) -> Result<Self, ClockError> {
        let mut w = Self::new(capacity)?;
        for p in pairs {
            w.push(p)?;
        }
        Ok(w)
    }

    /// Appends a pair, evicting the oldest when full. Both clocks must
    /// strictly advance.
    pub fn push(&mut self, pair: ClockSamplePair) -> Result<(), ClockError> {
        if let Some(last) = self.pairs.back() {
            if !(pair.local > last.local && pair.reference > last.reference) {
                return Err(ClockError::NonMonotonic {
                    index: self.pairs.len(),
                });
            }
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pairs(&self) -> impl ExactSizeIterator<Item = &ClockSamplePair> + Clone {
        self.pairs.iter()
    }

    pub fn last(&self) -> Option<ClockSamplePair> {
        self.pairs.back().copied()
    }

    fn ensure_estimable(&self) -> Result<(), ClockError> {
        if self.pairs.len() < 2 {
            Err(ClockError::WindowTooShort { len: self.pairs.len() })
        } else {
            Ok(())
        }
    }

    /// Reference-time gaps `T_j - T_{j-1}`.
    pub fn reference_intervals(&self) -> Vec<f64> {
        self.increments().map(|(_, dr)| dr).collect()
    }

    fn increments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.pairs
            .iter()
            .zip(self.pairs.iter().skip(1))
            .map(|(a, b)| (b.local - a.local, b.reference - a.reference))
    }
}

/// Drift `mu` (seconds of deviation per second) and infinitesimal
/// variance `sigma2` (s²/s) of the deviation process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WienerParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl WienerParams {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self, ClockError> {
        let p = Self { mu, sigma2 };
        p.validate()?;
        Ok(p)
    }

    /// Parameters implied by a regression slope.
    pub fn from_slope(slope: f64, sigma2: f64) -> Result<Self, ClockError> {
        Self::new(slope - 1.0, sigma2)
    }

    pub fn slope(self) -> f64 {
        1.0 + self.mu
    }

    pub fn validate(self) -> Result<(), ClockError> {
        if !self.mu.is_finite() || !self.sigma2.is_finite() || self.sigma2 < 0.0 {
            return Err(ClockError::InvalidParams(format!(
                "mu = {}, sigma2 = {}",
                self.mu, self.sigma2
            )));
        }
        if self.slope() <= 0.0 {
            return Err(ClockError::InvalidParams(format!(
                "slope {} must be positive",
                self.slope()
            )));
        }
        Ok(())
    }
}

/// Output of the fusion agent: fitted parameters plus the sync point that
/// serves as the origin for the next prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WienerEstimate {
    pub slope: f64,
    pub sigma2: f64,
    pub origin: ClockSamplePair,
}

/// Zero-mean normal deviation of corrected from true time, with variance
/// growing at `variance_rate` per local second since `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationModel {
    pub origin: ClockSamplePair,
    pub slope: f64,
    pub variance_rate: f64,
}

/// Limit on the corrected clock's deviation and the resources available to
/// enforce it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssuranceSpec {
    /// Largest allowed absolute deviation, seconds.
    pub limit: f64,
    /// Largest tolerated probability of exceeding `limit`.
    pub p_max: f64,
    /// Resource units per reference read.
    pub sync_cost: u64,
    pub budget: u64,
}

impl AssuranceSpec {
    pub fn validate(&self) -> Result<(), ClockError> {
        if !(self.limit > 0.0) {
            return Err(ClockError::InvalidSpec(format!(
                "limit {} must be positive",
                self.limit
            )));
        }
        if !(self.p_max > 0.0 && self.p_max < 1.0) {
            return Err(ClockError::InvalidSpec(format!("p_max {} outside (0, 1)", self.p_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: f64,
    pub variance: f64,
}

/// Through-origin least-squares slope of reference elapsed time against
/// local elapsed time, both measured from the first pair in the window.
pub fn estimate_drift(window: &SampleWindow) -> Result<f64, ClockError> {
    window.ensure_estimable()?;
    let first = window.pairs[0];
    let (sxy, sxx) = window.pairs.iter().skip(1).fold((0.0, 0.0), |(sxy, sxx), p| {
        let x = p.local - first.local;
        let y = p.reference - first.reference;
        (sxy + x * y, sxx + x * x)
    });
    if sxx == 0.0 {
        return Err(ClockError::DegenerateWindow);
    }
    Ok(sxy / sxx)
}

/// `ε_j = (T_j - T_{j-1}) - slope · (t_j - t_{j-1})` for each interval.
pub fn residuals(window: &SampleWindow, slope: f64) -> Result<Vec<f64>, ClockError> {
    window.ensure_estimable()?;
    Ok(window.increments().map(|(dl, dr)| dr - slope * dl).collect())
}

/// How the summed likelihood terms are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScaling {
    /// Maximum-likelihood estimate: mean over intervals.
    #[default]
    Mean,
    /// Unscaled sum of `ε_j² / ΔT_j`, for compatibility.
    Sum,
}

/// Maximum-likelihood `sigma2 = (1/M) Σ ε_j² / (T_j - T_{j-1})`.
pub fn estimate_variance(residuals: &[f64], intervals: &[f64]) -> Result<f64, ClockError> {
    estimate_variance_scaled(residuals, intervals, VarianceScaling::Mean)
}

pub fn estimate_variance_scaled(
    residuals: &[f64],
    intervals: &[f64],
    scaling: VarianceScaling,
) -> Result<f64, ClockError> {
    if residuals.len() != intervals.len() {
        return Err(ClockError::LengthMismatch {
            residuals: residuals.len(),
            intervals: intervals.len(),
        });
    }
    let mut sum = 0.0;
    for (index, (&e, &dt)) in residuals.iter().zip(intervals).enumerate() {
        if !(dt > 0.0) {
            return Err(ClockError::NonPositiveInterval { index, value: dt });
        }
        sum += e * e / dt;
    }
    Ok(match scaling {
        VarianceScaling::Mean if !residuals.is_empty() => sum / residuals.len() as f64,
        _ => sum,
    })
}

/// Fits slope and variance over a window in one go.
pub fn estimate(window: &SampleWindow) -> Result<WienerEstimate, ClockError> {
    let slope = estimate_drift(window)?;
    let eps = residuals(window, slope)?;
    let sigma2 = estimate_variance(&eps, &window.reference_intervals())?;
    Ok(WienerEstimate {
        slope,
        sigma2,
        origin: window.last().expect("window checked non-empty"),
    })
}

/// Local elapsed time rescaled by the fitted slope.
pub fn corrected_elapsed(local_gap: f64, slope: f64) -> f64 {
    slope * local_gap
}

/// Deviation of corrected from true time after `local_gap` seconds on the
/// local clock since the last sync.
pub fn deviation_distribution(local_gap: f64, sigma2: f64) -> NormalParams {
    NormalParams {
        mean: 0.0,
        variance: local_gap * sigma2,
    }
}

/// Local elapsed time over `true_gap` seconds of true time.
pub fn local_elapsed_distribution(true_gap: f64, params: WienerParams) -> NormalParams {
    NormalParams {
        mean: (1.0 + params.mu) * true_gap,
        variance: params.sigma2 * true_gap,
    }
}

/// When the next reference read is due.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Deadline {
    /// Local clock time by which to read the reference.
    At(f64),
    /// The deviation bound can never be violated with probability above
    /// `p_max`.
    Unbounded,
}

impl Deadline {
    pub fn time(self) -> Option<f64> {
        match self {
            Deadline::At(t) => Some(t),
            Deadline::Unbounded => None,
        }
    }
}

/// Two-sided standard-normal critical value `z` with `P(|Z| > z) = p`.
pub fn two_sided_critical_value(p: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - p / 2.0)
}

/// Latest local time at which `P(|deviation| > limit) <= p_max`:
/// `t_last + (limit / (σ z))²` with `z` the two-sided critical value.
pub fn next_sync_deadline(spec: &AssuranceSpec, sigma2: f64, t_last_sync: f64) -> Result<Deadline, ClockError> {
    spec.validate()?;
    if !(sigma2 >= 0.0) {
        return Err(ClockError::InvalidParams(format!("sigma2 = {sigma2}")));
    }
    if sigma2 == 0.0 || spec.limit.is_infinite() {
        return Ok(Deadline::Unbounded);
    }
    let z = two_sided_critical_value(spec.p_max);
    let gap = (spec.limit / (sigma2.sqrt() * z)).powi(2);
    Ok(Deadline::At(t_last_sync + gap))
}
