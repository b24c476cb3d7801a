//! Stand-in for the image matcher: tiles under cloud look alike, clear
//! tiles are recognised with high confidence.

use rand::Rng;

use crate::grid::{estimate_kernel, normalize, Cell, GridDistribution, GridError, GridMask, GridShape, MatchKernel};

/// Mass a clear tile puts on itself.
const CLEAR_SELF: f64 = 0.8;
/// Mass a clear tile spreads over its neighbors.
const CLEAR_NEIGHBORS: f64 = 0.1;
/// Largest mass a clouded tile may put on itself.
const CLOUD_SELF_CAP: f64 = 0.2;
/// Per-query multiplicative jitter on clouded match scores.
const JITTER: (f64, f64) = (0.8, 1.2);

/// How strongly a clouded tile attracts matches, fixed per tile.
pub fn ambiguity_profile(c: Cell) -> f64 {
    1.0 + 0.25 * (0.9 * c.x as f64 + 0.3).sin() * (0.7 * c.y as f64 + 0.5).cos()
}

fn build(shape: GridShape, truth: Cell, clouds: &GridMask, mut jitter: impl FnMut() -> f64) -> Vec<f64> {
    let n = shape.len();
    let mut raw = vec![0.0; n];
    let cloud_count = clouds.count();
    if !clouds.get(truth) {
        raw[shape.index(truth)] = CLEAR_SELF;
        let neighbors: Vec<Cell> = shape.neighbors(truth).collect();
        for &c in &neighbors {
            raw[shape.index(c)] += CLEAR_NEIGHBORS / neighbors.len() as f64;
        }
        let rest = 1.0 - CLEAR_SELF - CLEAR_NEIGHBORS;
        if cloud_count == 0 {
            raw.iter_mut().for_each(|r| *r += rest / n as f64);
        } else {
            for c in clouds.iter_set() {
                raw[shape.index(c)] += rest / cloud_count as f64;
            }
        }
        return raw;
    }
    let t = shape.index(truth);
    if cloud_count == 1 {
        raw.iter_mut()
            .for_each(|r| *r = (1.0 - CLOUD_SELF_CAP) / (n - 1).max(1) as f64);
        raw[t] = if n == 1 { 1.0 } else { CLOUD_SELF_CAP };
        return raw;
    }
    for c in clouds.iter_set() {
        raw[shape.index(c)] = ambiguity_profile(c) * jitter();
    }
    let total: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|r| *r /= total);
    if raw[t] > CLOUD_SELF_CAP {
        let others = 1.0 - raw[t];
        let scale = (1.0 - CLOUD_SELF_CAP) / others;
        raw.iter_mut().for_each(|r| *r *= scale);
        raw[t] = CLOUD_SELF_CAP;
    }
    raw
}

/// Match scores without per-query jitter: the matcher's expected output.
pub fn expected_match(truth: Cell, clouds: &GridMask) -> Result<Vec<f64>, GridError> {
    let shape = clouds.shape();
    shape.check(truth)?;
    Ok(build(shape, truth, clouds, || 1.0))
}

/// One matcher query for a drone at `truth`.
pub fn synthetic_match(truth: Cell, clouds: &GridMask, rng: &mut impl Rng) -> Result<GridDistribution, GridError> {
    let shape = clouds.shape();
    shape.check(truth)?;
    let raw = build(shape, truth, clouds, || rng.random_range(JITTER.0..JITTER.1));
    normalize(shape.width, shape.height, raw)
}

/// Kernel built by querying the expected matcher at every tile.
pub fn match_kernel(clouds: &GridMask) -> Result<MatchKernel, GridError> {
    let shape = clouds.shape();
    estimate_kernel(shape.width, shape.height, |c| build(shape, c, clouds, || 1.0))
}
