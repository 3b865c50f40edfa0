//! Synthetic user interactions: click seeds, Voronoi (distance) encoding,
//! morphological cortex detection for negative seeds, and training-pair assembly.

mod cortex;
mod pairs;
mod seeds;
mod shapes;
mod voronoi;

use serde::{Deserialize, Serialize};

pub use cortex::{
    cortex_ring, extract_cortex, mcd_level, mcd_negative_seeds, mcd_selections, Cortex, CortexPath, McdSelection,
};
pub use pairs::{
    build_training_pair, load_pairs_manifest, save_pairs_manifest, PairRecord, TrainingPair, PAIRS_MANIFEST,
};
pub use seeds::{boundary_distance_sq, sample_positive_seeds, sample_positive_seeds_relaxed, SeedConstraints};
pub use shapes::{gen_shapes_dataset, ShapeSample};
pub use voronoi::{compute_voronoi, squared_distance_transform, VoronoiMap, VORONOI_SATURATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// One user click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
    pub polarity: Polarity,
}

impl Seed {
    pub fn positive(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Positive,
        }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Negative,
        }
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x < width && self.y < height
    }
}

/// Splits a click list by polarity, preserving order within each set.
pub fn split_by_polarity(seeds: &[Seed]) -> (Vec<Seed>, Vec<Seed>) {
    seeds.iter().partition(|s| s.polarity == Polarity::Positive)
}

/// Deterministic stream for a given integer seed.
pub fn rng_from(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
