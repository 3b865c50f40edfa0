use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, load_mask, BinaryMask, ImageRgb};
use crate::scalar::Scalar;

use super::{
    compute_voronoi, mcd_negative_seeds, rng_from, sample_positive_seeds, split_by_polarity, Seed, SeedConstraints,
    VoronoiMap,
};

/// Image, both click maps and the label: one network training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    pub image: ImageRgb,
    pub pos_map: VoronoiMap<T>,
    pub neg_map: VoronoiMap<T>,
    pub label: BinaryMask,
    pub seeds: Vec<Seed>,
}

impl<T: Scalar> TrainingPair<T> {
    /// Builds a pair from explicit clicks, recomputing both distance maps.
    pub fn from_seeds(image: ImageRgb, label: BinaryMask, seeds: Vec<Seed>) -> Result<Self> {
        if image.dims() != label.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                actual: label.dims(),
            });
        }
        let (w, h) = image.dims();
        let (pos, neg) = split_by_polarity(&seeds);
        Ok(Self {
            pos_map: compute_voronoi(&pos, w, h)?,
            neg_map: compute_voronoi(&neg, w, h)?,
            image,
            label,
            seeds,
        })
    }
}

/// Samples `n_pos` positive seeds and `n_neg` MCD seeds per level, then encodes them.
#[allow(clippy::too_many_arguments)]
pub fn build_training_pair<T: Scalar>(
    image: &ImageRgb,
    mask: &BinaryMask,
    n_pos: usize,
    n_neg: usize,
    levels: &[usize],
    constraints: SeedConstraints,
    rng_seed: u64,
) -> Result<TrainingPair<T>> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            actual: mask.dims(),
        });
    }
    let mut rng = rng_from(rng_seed);
    let pos_seed = rng.next_u64();
    let neg_seed = rng.next_u64();
    let mut seeds = sample_positive_seeds(mask, n_pos, constraints, pos_seed)?;
    seeds.extend(mcd_negative_seeds(mask, n_neg, levels, neg_seed)?);
    TrainingPair::from_seeds(image.clone(), mask.clone(), seeds)
}

/// One entry of `pairs.json`. Image and label paths are stored as written and
/// resolved against the manifest directory when relative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: PathBuf,
    pub label: PathBuf,
    pub pos_seeds: Vec<[usize; 2]>,
    pub neg_seeds: Vec<[usize; 2]>,
    pub levels: Vec<usize>,
    pub rng_seed: u64,
}

impl PairRecord {
    pub fn seeds(&self) -> Vec<Seed> {
        self.pos_seeds
            .iter()
            .map(|&[x, y]| Seed::positive(x, y))
            .chain(self.neg_seeds.iter().map(|&[x, y]| Seed::negative(x, y)))
            .collect()
    }

    /// Loads the rasters and recomputes the Voronoi maps.
    pub fn load<T: Scalar>(&self, base: &Path) -> Result<TrainingPair<T>> {
        let image = load_image(base.join(&self.image))?;
        let label = load_mask(base.join(&self.label))?;
        TrainingPair::from_seeds(image, label, self.seeds())
    }
}

pub const PAIRS_MANIFEST: &str = "pairs.json";

pub fn save_pairs_manifest(dir: &Path, records: &[PairRecord]) -> Result<()> {
    let path = dir.join(PAIRS_MANIFEST);
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_pairs_manifest(dir: &Path) -> Result<Vec<PairRecord>> {
    let path = dir.join(PAIRS_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
