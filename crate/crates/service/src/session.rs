use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lyncean::fusion::{best_match, MatchCriterion, RegionProposal};
use lyncean::imagecore::{encode_gray, encode_mask, mask_bbox, BoundingBox, ImageRgb};
use lyncean::interaction::Seed;
use lyncean::lfcn::segment;
use lyncean::Network32;
use serde::Serialize;

/// Per-request inference settings shared by every session.
#[derive(Debug, Clone, Copy)]
pub struct InferenceSettings {
    pub threshold: f64,
    pub top_k: usize,
    pub criterion: MatchCriterion,
}

/// Everything derived from one forward pass, already encoded for the wire.
#[derive(Debug, Clone)]
pub struct Outcome {
    prob: Vec<f32>,
    prob_png: Vec<u8>,
    mask_png: Vec<u8>,
    mask_box: Option<BoundingBox>,
    caption: Option<(String, f64)>,
}

#[derive(Debug)]
pub struct Session {
    pub image: Arc<ImageRgb>,
    pub proposals: Option<Arc<[RegionProposal]>>,
    pub seeds: Vec<Seed>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbFormat {
    Png,
    F32,
}

#[derive(Serialize)]
struct Wire<'a> {
    width: usize,
    height: usize,
    seeds: &'a [Seed],
    probability: String,
    probability_format: &'static str,
    mask: String,
    mask_box: Option<BoundingBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    caption: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iou: Option<f64>,
}

impl Session {
    /// JSON body for the current state. A pure function of the session, so
    /// replaying the same clicks yields the same bytes.
    pub fn render(&self, format: ProbFormat) -> Vec<u8> {
        let o = &self.outcome;
        let (probability, probability_format) = match format {
            ProbFormat::Png => (B64.encode(&o.prob_png), "png"),
            ProbFormat::F32 => {
                let raw: Vec<u8> = o.prob.iter().flat_map(|p| p.to_le_bytes()).collect();
                (B64.encode(raw), "f32")
            }
        };
        let wire = Wire {
            width: self.image.width(),
            height: self.image.height(),
            seeds: &self.seeds,
            probability,
            probability_format,
            mask: B64.encode(&o.mask_png),
            mask_box: o.mask_box,
            caption: o.caption.as_ref().map(|(c, _)| c.as_str()),
            iou: o.caption.as_ref().map(|&(_, iou)| iou),
        };
        serde_json::to_vec(&wire).expect("response serializes")
    }
}

/// Full recomputation for a click list: distance maps, forward pass, threshold, fusion.
pub fn infer(
    net: &Network32,
    settings: InferenceSettings,
    image: &ImageRgb,
    seeds: &[Seed],
    proposals: Option<&[RegionProposal]>,
) -> lyncean::Result<Outcome> {
    let seg = segment(net, image, seeds, settings.threshold)?;
    let (w, h) = image.dims();
    let prob = seg.prob.into_data();
    let gray: Vec<u8> = prob
        .iter()
        .map(|&p| (255.0 * p).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mask_box = mask_bbox(&seg.mask).ok();
    // Nothing to caption when the mask is empty.
    let caption = match (proposals, mask_box) {
        (Some(props), Some(_)) => {
            let fused = best_match(&seg.mask, props, settings.top_k, settings.criterion)?;
            Some((fused.caption, fused.iou))
        }
        _ => None,
    };
    Ok(Outcome {
        prob_png: encode_gray(w, h, &gray)?,
        mask_png: encode_mask(&seg.mask)?,
        prob,
        mask_box,
        caption,
    })
}
