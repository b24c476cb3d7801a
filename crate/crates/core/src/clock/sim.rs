use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ClockError, ClockSamplePair, WienerParams};

/// Simulated local/reference clock pair.
///
/// Over a local interval `dt` the reference clock advances by
/// `slope·dt + ε` with `ε ~ N(0, σ²·slope·dt)`, i.e. the Wiener variance is
/// accrued in (approximate) true time.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerClock {
    params: WienerParams,
    now: ClockSamplePair,
}

impl WienerClock {
    pub fn new(params: WienerParams) -> Result<Self, ClockError> {
        params.validate()?;
        Ok(Self {
            params,
            now: ClockSamplePair {
                local: 0.0,
                reference: 0.0,
            },
        })
    }

    pub fn params(&self) -> WienerParams {
        self.params
    }

    pub fn now(&self) -> ClockSamplePair {
        self.now
    }

    /// Reference increment over a local interval `dt`.
    pub fn reference_increment(&self, dt: f64, rng: &mut impl Rng) -> f64 {
        let slope = self.params.slope();
        let variance = self.params.sigma2 * slope * dt;
        let noise = if variance > 0.0 {
            Normal::new(0.0, variance.sqrt())
                .expect("finite positive std")
                .sample(rng)
        } else {
            0.0
        };
        slope * dt + noise
    }

    /// Advances the local clock to `local` and returns the reference reading
    /// there. Times at or before the current local time return the current
    /// reference reading.
    pub fn advance_to(&mut self, local: f64, rng: &mut impl Rng) -> f64 {
        let dt = local - self.now.local;
        if dt > 0.0 {
            self.now.reference += self.reference_increment(dt, rng);
            self.now.local = local;
        }
        self.now.reference
    }
}
