//! Caption fusion: rank externally produced region proposals by objectness
//! and adopt the caption of the box that best matches the segmented region.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{box_iou, contour, mask_bbox, BinaryMask, BoundingBox, ImageRgb};

pub const DEFAULT_TOP_K: usize = 100;
pub const CONTOUR_COLOR: [u8; 3] = [255, 32, 32];
pub const BOX_COLOR: [u8; 3] = [32, 255, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProposalRecord", into = "ProposalRecord")]
pub struct RegionProposal {
    pub bbox: BoundingBox,
    pub score: f64,
    pub caption: String,
}

/// Wire form: `{"box": [x, y, w, h], "score": s, "caption": "..."}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProposalRecord {
    #[serde(rename = "box")]
    bbox: [i64; 4],
    score: f64,
    caption: String,
}

impl TryFrom<ProposalRecord> for RegionProposal {
    type Error = String;

    fn try_from(r: ProposalRecord) -> std::result::Result<Self, String> {
        let [x, y, w, h] = r.bbox;
        if x < 0 || y < 0 {
            return Err(format!("box origin ({x}, {y}) is negative"));
        }
        if w < 1 || h < 1 {
            return Err(format!("box extent {w}x{h} must be at least 1x1"));
        }
        let fit = |v: i64| u32::try_from(v).map_err(|_| format!("box coordinate {v} out of range"));
        if !r.score.is_finite() {
            return Err("score must be finite".into());
        }
        if r.caption.is_empty() {
            return Err("caption must not be empty".into());
        }
        Ok(Self {
            bbox: BoundingBox {
                x: fit(x)?,
                y: fit(y)?,
                w: fit(w)?,
                h: fit(h)?,
            },
            score: r.score,
            caption: r.caption,
        })
    }
}

impl From<RegionProposal> for ProposalRecord {
    fn from(p: RegionProposal) -> Self {
        let b = p.bbox;
        Self {
            bbox: [b.x as i64, b.y as i64, b.w as i64, b.h as i64],
            score: p.score,
            caption: p.caption,
        }
    }
}

pub fn parse_proposals(json: &str) -> Result<Vec<RegionProposal>> {
    serde_json::from_str(json).map_err(|e| Error::Proposals(e.to_string()))
}

pub fn load_proposals(path: impl AsRef<Path>) -> Result<Vec<RegionProposal>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(&text)
}

/// Stable sort by descending objectness.
pub fn rank_proposals(proposals: &[RegionProposal]) -> Vec<RegionProposal> {
    let mut out = proposals.to_vec();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// How a proposal is compared against the predicted region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchCriterion {
    /// IoU of the proposal box and the mask's tight bounding box.
    #[default]
    BoxIou,
    /// IoU of the proposal box's pixels and the mask's pixels.
    MaskIou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub chosen: RegionProposal,
    /// Zero-based position of `chosen` in the ranked list.
    pub rank: usize,
    /// Match score under the criterion used; for [`MatchCriterion::BoxIou`]
    /// this equals `box_iou(chosen.bbox, mask_box)`.
    pub iou: f64,
    pub mask_box: BoundingBox,
    pub caption: String,
}

fn mask_box_iou(mask: &BinaryMask, b: &BoundingBox, mask_area: u64) -> f64 {
    let inter = mask.pixels().filter(|&(x, y)| b.contains(x, y)).count() as u64;
    let union = mask_area + b.area() - inter;
    inter as f64 / union as f64
}

/// Best-matching proposal among the `top_k` highest-ranked ones. Ties in the
/// match score go to the higher objectness, then to the earlier rank.
pub fn best_match(
    mask: &BinaryMask,
    proposals: &[RegionProposal],
    top_k: usize,
    criterion: MatchCriterion,
) -> Result<FusionResult> {
    let mask_box = mask_bbox(mask)?;
    if proposals.is_empty() {
        return Err(Error::Proposals("no proposals to match against".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let ranked = rank_proposals(proposals);
    let area = mask.count() as u64;
    let mut best: Option<(usize, f64)> = None;
    for (rank, p) in ranked.iter().take(top_k).enumerate() {
        let iou = match criterion {
            MatchCriterion::BoxIou => box_iou(&p.bbox, &mask_box),
            MatchCriterion::MaskIou => mask_box_iou(mask, &p.bbox, area),
        };
        // Ranked order is already descending score, so the first maximum wins ties.
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((rank, iou));
        }
    }
    let (rank, iou) = best.expect("at least one proposal considered");
    let chosen = ranked[rank].clone();
    Ok(FusionResult {
        caption: chosen.caption.clone(),
        chosen,
        rank,
        iou,
        mask_box,
    })
}

/// Result record written next to an annotated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub caption: String,
    pub iou: f64,
    pub score: f64,
    pub mask_box: BoundingBox,
    pub chosen_box: BoundingBox,
}

impl From<&FusionResult> for Sidecar {
    fn from(r: &FusionResult) -> Self {
        Self {
            caption: r.caption.clone(),
            iou: r.iou,
            score: r.chosen.score,
            mask_box: r.mask_box,
            chosen_box: r.chosen.bbox,
        }
    }
}

/// Pixels on the outline of `b`, clipped to the image.
pub fn box_outline(b: &BoundingBox, width: usize, height: usize) -> BinaryMask {
    let (x0, y0) = (b.x as u64, b.y as u64);
    let (x1, y1) = (b.right() - 1, b.bottom() - 1);
    BinaryMask::from_fn(width, height, |x, y| {
        let (x, y) = (x as u64, y as u64);
        let in_x = x >= x0 && x <= x1;
        let in_y = y >= y0 && y <= y1;
        (in_y && (x == x0 || x == x1)) || (in_x && (y == y0 || y == y1))
    })
}

/// Draws the chosen box outline, then the mask contour on top of it.
pub fn annotate(image: &ImageRgb, mask: &BinaryMask, result: &FusionResult) -> Result<(ImageRgb, Sidecar)> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            actual: mask.dims(),
        });
    }
    let (w, h) = image.dims();
    let mut out = image.clone();
    for (x, y) in box_outline(&result.chosen.bbox, w, h).pixels() {
        out.set_pixel(x, y, BOX_COLOR);
    }
    for (x, y) in contour(mask).pixels() {
        out.set_pixel(x, y, CONTOUR_COLOR);
    }
    Ok((out, Sidecar::from(result)))
}
