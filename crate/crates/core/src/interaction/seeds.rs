use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{contour, BinaryMask};

use super::voronoi::squared_distance_transform;
use super::{rng_from, Seed};

/// Spacing rules for a seed set: pairwise distance strictly above `d1`,
/// distance to every boundary pixel of the region strictly above `d2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedConstraints {
    pub d1: f64,
    pub d2: f64,
}

impl Default for SeedConstraints {
    fn default() -> Self {
        Self { d1: 10.0, d2: 3.0 }
    }
}

impl SeedConstraints {
    pub fn new(d1: f64, d2: f64) -> Result<Self> {
        if !(d1 > 0.0 && d2 > 0.0 && d1.is_finite() && d2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "seed constraints must be positive, got d1={d1}, d2={d2}"
            )));
        }
        Ok(Self { d1, d2 })
    }
}

/// Squared distance from each pixel to the nearest boundary pixel of `mask`
/// (see [`contour`]); `None` when the mask is empty.
pub fn boundary_distance_sq(mask: &BinaryMask) -> Vec<Option<f64>> {
    let edge = contour(mask);
    squared_distance_transform::<f64>(mask.width(), mask.height(), |x, y| edge.get(x, y))
}

const ATTEMPTS_PER_SEED: usize = 1000;

/// Rejection-samples `n` positive seeds inside `mask` under `constraints`.
///
/// Candidates are foreground pixels further than `d2` from the boundary; each
/// attempt draws one uniformly and keeps it if it is further than `d1` from all
/// seeds kept so far. Gives up after `1000 * n` attempts.
pub fn sample_positive_seeds(
    mask: &BinaryMask,
    n: usize,
    constraints: SeedConstraints,
    rng_seed: u64,
) -> Result<Vec<Seed>> {
    if mask.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one positive seed".into()));
    }
    let dist = boundary_distance_sq(mask);
    let d2_sq = constraints.d2 * constraints.d2;
    let d1_sq = constraints.d1 * constraints.d1;
    let candidates: Vec<(usize, usize)> = mask
        .pixels()
        .filter(|&(x, y)| dist[y * mask.width() + x].is_some_and(|d| d > d2_sq))
        .collect();

    let max_attempts = ATTEMPTS_PER_SEED * n;
    let mut rng = rng_from(rng_seed);
    let mut chosen: Vec<Seed> = Vec::with_capacity(n);
    let mut attempts = 0;
    while chosen.len() < n && attempts < max_attempts && !candidates.is_empty() {
        attempts += 1;
        let (x, y) = candidates[rng.random_range(0..candidates.len())];
        let far = chosen.iter().all(|s| {
            let dx = s.x as f64 - x as f64;
            let dy = s.y as f64 - y as f64;
            dx * dx + dy * dy > d1_sq
        });
        if far {
            chosen.push(Seed::positive(x, y));
        }
    }
    if chosen.len() < n {
        return Err(Error::Infeasible {
            requested: n,
            placed: chosen.len(),
            attempts,
        });
    }
    Ok(chosen)
}

/// Like [`sample_positive_seeds`], but on infeasibility retries with `d1`
/// halved, then `d2` halved, down to one pixel each. Evaluation uses this so
/// that every test mask receives the requested number of clicks. Returns the
/// constraints that were finally satisfied.
pub fn sample_positive_seeds_relaxed(
    mask: &BinaryMask,
    n: usize,
    constraints: SeedConstraints,
    rng_seed: u64,
) -> Result<(Vec<Seed>, SeedConstraints)> {
    let mut c = constraints;
    loop {
        match sample_positive_seeds(mask, n, c, rng_seed) {
            Ok(seeds) => return Ok((seeds, c)),
            Err(Error::Infeasible { .. }) if c.d1 > 1.0 => c.d1 = (c.d1 / 2.0).max(1.0),
            Err(Error::Infeasible { .. }) if c.d2 > 0.5 => c.d2 = if c.d2 > 1.0 { (c.d2 / 2.0).max(1.0) } else { 0.0 },
            Err(e) => return Err(e),
        }
    }
}
