//! On-disk shape corpora and the click protocol used for evaluation.
//!
//! A corpus directory holds `images/*.png`, `masks/*.png` and a
//! `corpus.json` manifest listing `{id, image, mask}` with paths relative to
//! the directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, load_mask, save_image, save_mask, BinaryMask};
use crate::interaction::{
    mcd_negative_seeds, rng_from, sample_positive_seeds_relaxed, Seed, SeedConstraints, ShapeSample,
};
use crate::lfcn::{segment, Network};
use crate::metrics::{confusion, EvalReport};
use crate::scalar::Scalar;

pub const CORPUS_MANIFEST: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusItem {
    pub id: String,
    pub sample: ShapeSample,
}

/// Writes samples as `shape_NNNN` image/mask PNGs plus the manifest.
pub fn write_corpus(dir: &Path, samples: &[ShapeSample]) -> Result<Vec<CorpusEntry>> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
    }
    let width = samples.len().saturating_sub(1).to_string().len().max(4);
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("shape_{i:0width$}");
        let entry = CorpusEntry {
            image: Path::new("images").join(format!("{id}.png")),
            mask: Path::new("masks").join(format!("{id}.png")),
            id,
        };
        save_image(&s.image, dir.join(&entry.image))?;
        save_mask(&s.mask, dir.join(&entry.mask))?;
        entries.push(entry);
    }
    let path = dir.join(CORPUS_MANIFEST);
    let mut text = serde_json::to_string_pretty(&entries)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(entries)
}

pub fn read_corpus_manifest(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let path = dir.join(CORPUS_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    read_corpus_manifest(dir)?
        .into_iter()
        .map(|e| {
            let image = load_image(dir.join(&e.image))?;
            let mask = load_mask(dir.join(&e.mask))?;
            if image.dims() != mask.dims() {
                return Err(Error::DimensionMismatch {
                    expected: image.dims(),
                    actual: mask.dims(),
                });
            }
            Ok(CorpusItem {
                id: e.id,
                sample: ShapeSample { image, mask },
            })
        })
        .collect()
}

/// Simulated user for evaluation: `positives` random clicks inside the object
/// (relaxing the spacing rules on masks too small for them) and MCD negatives
/// around it. Using `k` clicks means the first `k` positives, so larger click
/// counts always extend smaller ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickProtocol {
    pub positives: usize,
    pub negatives: usize,
    pub levels: Vec<usize>,
    pub constraints: SeedConstraints,
    pub rng_seed: u64,
}

impl Default for ClickProtocol {
    fn default() -> Self {
        Self {
            positives: 5,
            negatives: 5,
            levels: vec![1, 4, 8],
            constraints: SeedConstraints::default(),
            rng_seed: 0,
        }
    }
}

impl ClickProtocol {
    /// Clicks for the `index`-th image of a corpus using `k` positives.
    pub fn clicks(&self, mask: &BinaryMask, index: usize, k: usize) -> Result<Vec<Seed>> {
        if k == 0 || k > self.positives {
            return Err(Error::InvalidArgument(format!(
                "click count {k} outside 1..={}",
                self.positives
            )));
        }
        let mut rng = rng_from(self.rng_seed);
        rng.set_stream(index as u64);
        let (pos_seed, neg_seed) = (rng.next_u64(), rng.next_u64());
        let (pos, _) = sample_positive_seeds_relaxed(mask, self.positives, self.constraints, pos_seed)?;
        let mut seeds = pos[..k].to_vec();
        seeds.extend(mcd_negative_seeds(mask, self.negatives, &self.levels, neg_seed)?);
        Ok(seeds)
    }
}

/// Segments every corpus item with `k` protocol clicks and scores it against its mask.
pub fn evaluate_clicks<T: Scalar>(
    net: &Network<T>,
    corpus: &[CorpusItem],
    protocol: &ClickProtocol,
    k: usize,
    threshold: f64,
) -> Result<EvalReport> {
    let rows = corpus
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let seeds = protocol.clicks(&item.sample.mask, i, k)?;
            let seg = segment(net, &item.sample.image, &seeds, threshold)?;
            Ok((item.id.clone(), confusion(&seg.mask, &item.sample.mask)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::build(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub clicks: usize,
    pub fg_iou: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub images: usize,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityTable {
    /// Largest drop in `fg_iou` from one click count to the next (0 when non-decreasing).
    pub fn max_drop(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| w[0].fg_iou - w[1].fg_iou)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>6}  {:>8}  {:>8}\n", "clicks", "fg_iou", "mean_iou");
        for r in &self.rows {
            let _ = writeln!(out, "{:>6}  {:>8.4}  {:>8.4}", r.clicks, r.fg_iou, r.mean_iou);
        }
        out
    }
}

/// Mean scores for click counts `1..=max_clicks` over the corpus.
pub fn sensitivity<T: Scalar>(
    net: &Network<T>,
    corpus: &[CorpusItem],
    protocol: &ClickProtocol,
    max_clicks: usize,
    threshold: f64,
) -> Result<SensitivityTable> {
    if max_clicks == 0 {
        return Err(Error::InvalidArgument("max_clicks must be at least 1".into()));
    }
    let protocol = ClickProtocol {
        positives: protocol.positives.max(max_clicks),
        ..protocol.clone()
    };
    let rows = (1..=max_clicks)
        .map(|k| {
            let report = evaluate_clicks(net, corpus, &protocol, k, threshold)?;
            Ok(SensitivityRow {
                clicks: k,
                fg_iou: report.mean.fg_iou,
                mean_iou: report.mean.mean_iou,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityTable {
        images: corpus.len(),
        rows,
    })
}
